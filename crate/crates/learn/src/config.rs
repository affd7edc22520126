//! Flat run configuration shared by every pipeline stage.
//!
//! A configuration file is either a JSON object or `key = value` lines
//! (`#` starts a comment). Keys override a preset chosen by the optional
//! `preset` key (`desk` or `paper`); unknown keys are rejected.

use ritp_core::noise::NoiseParams;
use ritp_core::scenario_gen::ScenarioKind;
use ritp_core::sim::SimConfig;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::motionformer::PolicyConfig;
use crate::reward::RewardConfig;
use crate::stages::{IlConfig, IrlConfig};
use crate::trainer::TrainerConfig;

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("unknown configuration key '{0}'")]
    UnknownKey(String),
    #[error("unknown preset '{0}' (expected desk or paper)")]
    UnknownPreset(String),
    #[error("line {line}: expected key = value, got '{text}'")]
    Syntax { line: usize, text: String },
    #[error("key '{key}': cannot parse '{value}' as {expected}")]
    Value { key: String, value: String, expected: &'static str },
    #[error("invalid configuration at {path}: {message}")]
    Invalid { path: String, message: String },
    #[error("{0}")]
    Constraint(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub preset: String,
    pub seed: u64,

    pub scenario_count: usize,
    pub scenario_seed: u64,
    /// Comma-separated scenario kinds, or `all`.
    pub scenario_kinds: String,

    pub policy_dim: usize,
    pub policy_heads: usize,
    pub policy_bands: usize,
    pub policy_modes: usize,
    pub history_steps: usize,
    pub plan_steps: usize,
    pub replan_period: usize,

    pub reward_dim: usize,
    pub reward_heads: usize,
    pub reward_dropout: f64,
    pub reward_base: f64,
    pub reward_candidates: usize,
    pub reward_passes: usize,
    pub reward_lambda: f64,
    pub reward_tau: f64,
    pub reward_sigma: f64,
    pub reward_reg_scale: f64,
    pub irl_steps: usize,
    pub irl_lr: f64,

    pub il_steps: usize,
    pub il_batch: usize,
    pub il_lr: f64,
    pub il_weight_decay: f64,

    pub rl_steps: usize,
    pub collect_envs: usize,
    pub batch_size: usize,
    pub gamma: f64,
    pub xi: f64,
    pub policy_delay: usize,
    pub beta: f64,
    pub beta_prime: f64,
    pub clip_c: f64,
    pub actor_lr: f64,
    pub critic_lr: f64,
    pub weight_decay: f64,
    pub warmup: usize,
    pub normalize_rewards: bool,
    pub replay_capacity: usize,
    pub sampler_cap: usize,
    pub log_every: usize,
    pub eval_every: usize,
    pub checkpoint_every: usize,

    /// Critic-ranked imitation targets over sampler candidates.
    pub msr: bool,
    /// Warm start from the imitation-pretrained policy.
    pub ws: bool,
    /// Multi-agent imitation supervision.
    pub mas: bool,
    /// Rule-based post-optimization at evaluation.
    pub hybrid: bool,
}

impl RunConfig {
    pub fn desk() -> Self {
        let p = PolicyConfig::desk();
        let r = RewardConfig::desk();
        let il = IlConfig::default();
        let irl = IrlConfig::default();
        let t = TrainerConfig::desk();
        Self {
            preset: "desk".into(),
            seed: 0,
            scenario_count: 20,
            scenario_seed: 7,
            scenario_kinds: "all".into(),
            policy_dim: p.dim,
            policy_heads: p.heads,
            policy_bands: p.bands,
            policy_modes: p.modes,
            history_steps: p.history,
            plan_steps: p.plan_steps,
            replan_period: t.replan_period,
            reward_dim: r.dim,
            reward_heads: r.heads,
            reward_dropout: r.dropout,
            reward_base: r.base,
            reward_candidates: r.candidates,
            reward_passes: r.passes,
            reward_lambda: r.lambda,
            reward_tau: r.tau,
            reward_sigma: r.sigma,
            reward_reg_scale: r.reg_scale,
            irl_steps: irl.steps,
            irl_lr: irl.lr,
            il_steps: il.steps,
            il_batch: il.batch,
            il_lr: il.lr,
            il_weight_decay: il.weight_decay,
            rl_steps: t.total_steps,
            collect_envs: t.collect_envs,
            batch_size: t.batch,
            gamma: t.gamma,
            xi: t.xi,
            policy_delay: t.delay,
            beta: t.noise.beta,
            beta_prime: t.noise.beta_prime,
            clip_c: t.noise.clip_c,
            actor_lr: t.actor_lr,
            critic_lr: t.critic_lr,
            weight_decay: t.weight_decay,
            warmup: t.warmup,
            normalize_rewards: t.normalize_rewards,
            replay_capacity: t.replay_capacity,
            sampler_cap: t.sampler_cap,
            log_every: t.log_every,
            eval_every: t.eval_every,
            checkpoint_every: t.checkpoint_every,
            msr: t.msr,
            ws: true,
            mas: t.mas,
            hybrid: false,
        }
    }

    pub fn paper() -> Self {
        let p = PolicyConfig::paper();
        let r = RewardConfig::paper();
        let t = TrainerConfig::paper();
        Self {
            preset: "paper".into(),
            policy_dim: p.dim,
            policy_heads: p.heads,
            policy_bands: p.bands,
            policy_modes: p.modes,
            history_steps: p.history,
            plan_steps: p.plan_steps,
            reward_dim: r.dim,
            reward_heads: r.heads,
            rl_steps: t.total_steps,
            collect_envs: t.collect_envs,
            batch_size: t.batch,
            actor_lr: t.actor_lr,
            critic_lr: t.critic_lr,
            sampler_cap: t.sampler_cap,
            ..Self::desk()
        }
    }

    pub fn preset(name: &str) -> Result<Self, ConfigError> {
        match name {
            "desk" => Ok(Self::desk()),
            "paper" => Ok(Self::paper()),
            other => Err(ConfigError::UnknownPreset(other.into())),
        }
    }

    /// Parses a JSON object or `key = value` text over its preset.
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let pairs = parse_pairs(text)?;
        Self::from_pairs(&pairs)
    }

    /// Applies raw overrides in order; a `preset` entry selects the base.
    pub fn from_pairs(pairs: &[(String, RawValue)]) -> Result<Self, ConfigError> {
        let preset = pairs
            .iter()
            .rev()
            .find(|(k, _)| k == "preset")
            .map(|(_, v)| v.as_text())
            .unwrap_or_else(|| "desk".into());
        Self::preset(&preset)?.with_overrides(pairs)
    }

    pub fn with_overrides(&self, pairs: &[(String, RawValue)]) -> Result<Self, ConfigError> {
        let mut map = match serde_json::to_value(self).expect("config serializes") {
            Value::Object(m) => m,
            _ => unreachable!("config is a struct"),
        };
        for (key, raw) in pairs {
            apply(&mut map, key, raw)?;
        }
        let out: Self = serde_path_to_error::deserialize(Value::Object(map)).map_err(|e| ConfigError::Invalid {
            path: e.path().to_string(),
            message: e.inner().to_string(),
        })?;
        out.validate()?;
        Ok(out)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.kinds()?;
        let positive = [
            ("policy_dim", self.policy_dim),
            ("policy_heads", self.policy_heads),
            ("policy_modes", self.policy_modes),
            ("history_steps", self.history_steps),
            ("plan_steps", self.plan_steps),
            ("replan_period", self.replan_period),
            ("reward_dim", self.reward_dim),
            ("reward_heads", self.reward_heads),
            ("reward_passes", self.reward_passes),
            ("collect_envs", self.collect_envs),
            ("batch_size", self.batch_size),
            ("policy_delay", self.policy_delay),
            ("replay_capacity", self.replay_capacity),
            ("il_batch", self.il_batch),
        ];
        for (k, v) in positive {
            if v == 0 {
                return Err(ConfigError::Constraint(format!("{k} must be positive")));
            }
        }
        if self.policy_dim % self.policy_heads != 0 || self.reward_dim % self.reward_heads != 0 {
            return Err(ConfigError::Constraint("model width must be divisible by the head count".into()));
        }
        if self.reward_passes < 2 {
            return Err(ConfigError::Constraint("reward_passes must be at least 2".into()));
        }
        if !(0.0..1.0).contains(&self.reward_dropout) {
            return Err(ConfigError::Constraint("reward_dropout must lie in [0, 1)".into()));
        }
        if self.reward_base <= 1.0 {
            return Err(ConfigError::Constraint("reward_base must exceed 1".into()));
        }
        if !(0.0..=1.0).contains(&self.gamma) || !(0.0..=1.0).contains(&self.xi) {
            return Err(ConfigError::Constraint("gamma and xi must lie in [0, 1]".into()));
        }
        Ok(())
    }

    pub fn kinds(&self) -> Result<Vec<ScenarioKind>, ConfigError> {
        parse_kinds(&self.scenario_kinds)
    }

    /// Without critic ranking the policy plans 1 s ahead and no sampler
    /// candidates are generated.
    pub fn effective_plan_steps(&self) -> usize {
        if self.msr {
            self.plan_steps
        } else {
            self.plan_steps.min(10)
        }
    }

    pub fn policy(&self) -> PolicyConfig {
        PolicyConfig {
            dim: self.policy_dim,
            heads: self.policy_heads,
            bands: self.policy_bands,
            modes: self.policy_modes,
            history: self.history_steps,
            plan_steps: self.effective_plan_steps(),
        }
    }

    pub fn reward(&self) -> RewardConfig {
        RewardConfig {
            dim: self.reward_dim,
            heads: self.reward_heads,
            bands: self.policy_bands,
            dropout: self.reward_dropout,
            base: self.reward_base,
            candidates: self.reward_candidates,
            passes: self.reward_passes,
            lambda: self.reward_lambda,
            tau: self.reward_tau,
            sigma: self.reward_sigma,
            reg_scale: self.reward_reg_scale,
        }
    }

    pub fn il(&self) -> IlConfig {
        IlConfig {
            steps: self.il_steps,
            batch: self.il_batch,
            lr: self.il_lr,
            weight_decay: self.il_weight_decay,
            mas: self.mas,
            seed: self.seed.wrapping_add(11),
        }
    }

    pub fn irl(&self) -> IrlConfig {
        IrlConfig {
            steps: self.irl_steps,
            lr: self.irl_lr,
            seed: self.seed.wrapping_add(13),
        }
    }

    pub fn trainer(&self) -> TrainerConfig {
        TrainerConfig {
            total_steps: self.rl_steps,
            collect_envs: self.collect_envs,
            batch: self.batch_size,
            gamma: self.gamma,
            xi: self.xi,
            delay: self.policy_delay,
            noise: NoiseParams {
                beta: self.beta,
                beta_prime: self.beta_prime,
                clip_c: self.clip_c,
            },
            actor_lr: self.actor_lr,
            critic_lr: self.critic_lr,
            weight_decay: self.weight_decay,
            warmup: self.warmup,
            normalize_rewards: self.normalize_rewards,
            replay_capacity: self.replay_capacity,
            sampler_cap: if self.msr { self.sampler_cap } else { 0 },
            msr: self.msr,
            mas: self.mas,
            replan_period: self.replan_period,
            log_every: self.log_every,
            eval_every: self.eval_every,
            checkpoint_every: self.checkpoint_every,
            seed: self.seed,
        }
    }

    pub fn sim(&self) -> SimConfig {
        SimConfig {
            history_steps: self.history_steps,
            plan_steps: self.effective_plan_steps(),
            replan_period: self.replan_period,
        }
    }

    /// Canonical JSON, the input of the manifest hash.
    pub fn canonical_json(&self) -> String {
        serde_json::to_string(self).expect("config serializes")
    }

    /// Ablation flags in `name=value` form.
    pub fn ablations(&self) -> Vec<String> {
        [("msr", self.msr), ("ws", self.ws), ("mas", self.mas), ("hybrid", self.hybrid)]
            .iter()
            .map(|(k, v)| format!("{k}={v}"))
            .collect()
    }
}

pub fn parse_kinds(text: &str) -> Result<Vec<ScenarioKind>, ConfigError> {
    if text.trim() == "all" {
        return Ok(ScenarioKind::ALL.to_vec());
    }
    let kinds = text
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| {
            ScenarioKind::ALL
                .iter()
                .copied()
                .find(|k| k.name() == s)
                .ok_or_else(|| ConfigError::Constraint(format!("unknown scenario kind '{s}'")))
        })
        .collect::<Result<Vec<_>, _>>()?;
    if kinds.is_empty() {
        return Err(ConfigError::Constraint("no scenario kinds given".into()));
    }
    Ok(kinds)
}

/// An override before it is typed against the preset.
#[derive(Debug, Clone, PartialEq)]
pub enum RawValue {
    Text(String),
    Json(Value),
}

impl RawValue {
    fn as_text(&self) -> String {
        match self {
            RawValue::Text(s) => s.clone(),
            RawValue::Json(Value::String(s)) => s.clone(),
            RawValue::Json(v) => v.to_string(),
        }
    }
}

/// Splits `key=value` into a raw override.
pub fn parse_assignment(text: &str) -> Option<(String, RawValue)> {
    let (k, v) = text.split_once('=')?;
    let k = k.trim();
    if k.is_empty() {
        return None;
    }
    Some((k.to_string(), RawValue::Text(v.trim().to_string())))
}

pub fn parse_pairs(text: &str) -> Result<Vec<(String, RawValue)>, ConfigError> {
    if text.trim_start().starts_with('{') {
        let v: Map<String, Value> = serde_json::from_str(text).map_err(|e| ConfigError::Invalid {
            path: ".".into(),
            message: e.to_string(),
        })?;
        return Ok(v.into_iter().map(|(k, v)| (k, RawValue::Json(v))).collect());
    }
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        out.push(parse_assignment(line).ok_or_else(|| ConfigError::Syntax {
            line: i + 1,
            text: line.to_string(),
        })?);
    }
    Ok(out)
}

fn apply(map: &mut Map<String, Value>, key: &str, raw: &RawValue) -> Result<(), ConfigError> {
    let slot = map.get_mut(key).ok_or_else(|| ConfigError::UnknownKey(key.into()))?;
    let text = match raw {
        RawValue::Json(v) => {
            *slot = v.clone();
            return Ok(());
        }
        RawValue::Text(t) => t,
    };
    let bad = |expected| ConfigError::Value {
        key: key.into(),
        value: text.clone(),
        expected,
    };
    *slot = match slot {
        Value::Bool(_) => Value::Bool(match text.as_str() {
            "true" | "1" | "on" | "yes" => true,
            "false" | "0" | "off" | "no" => false,
            _ => return Err(bad("a boolean")),
        }),
        Value::Number(n) if n.is_u64() => Value::from(text.parse::<u64>().map_err(|_| bad("a non-negative integer"))?),
        Value::Number(_) => {
            let x: f64 = text.parse().map_err(|_| bad("a number"))?;
            serde_json::Number::from_f64(x).map(Value::Number).ok_or_else(|| bad("a finite number"))?
        }
        _ => Value::String(text.clone()),
    };
    Ok(())
}
