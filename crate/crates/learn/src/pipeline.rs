//! Stage wiring: reward, imitation pretraining, reinforced imitation and
//! closed-loop evaluation.

use std::io::Write;
use std::sync::atomic::AtomicBool;
use std::time::Instant;

use ritp_core::metrics::{batch_evaluate, BatchReport};
use ritp_core::par::Parallelism;
use ritp_core::scenario_gen::{generate_corpus, ScenarioKind};
use ritp_core::scene::Scenario;
use ritp_core::sim::{Planner, SimMode};
use serde::Serialize;

use crate::config::RunConfig;
use crate::motionformer::MotionFormer;
use crate::planners::{RitpHybrid, RitpPlanner};
use crate::reward::RewardNet;
use crate::stages::{pretrain_policy, train_reward};
use crate::trainer::{RitpModels, TrainHooks, TrainSummary, Trainer};
use crate::LearnError;

pub fn build_corpus(cfg: &RunConfig) -> Result<Vec<Scenario>, LearnError> {
    let kinds = cfg.kinds().map_err(|e| LearnError::Input(e.to_string()))?;
    Ok(generate_corpus(&kinds, cfg.scenario_count, cfg.scenario_seed))
}

pub fn train_reward_stage(cfg: &RunConfig, corpus: &[Scenario], log: &mut dyn Write) -> Result<RewardNet, LearnError> {
    let mut net = RewardNet::new(cfg.reward(), cfg.seed.wrapping_add(1));
    train_reward(&mut net, corpus, &cfg.irl(), cfg.effective_plan_steps(), cfg.history_steps, log)?;
    Ok(net)
}

pub fn fresh_policy(cfg: &RunConfig) -> MotionFormer {
    MotionFormer::new(cfg.policy(), cfg.seed.wrapping_add(2))
}

pub fn pretrain_stage(cfg: &RunConfig, corpus: &[Scenario], log: &mut dyn Write) -> Result<MotionFormer, LearnError> {
    let mut policy = fresh_policy(cfg);
    pretrain_policy(&mut policy, corpus, &cfg.il(), log)?;
    Ok(policy)
}

/// RL starts from `warm` when warm starting is on, from a fresh policy otherwise.
#[allow(clippy::too_many_arguments)]
pub fn train_ritp_stage(
    cfg: &RunConfig,
    corpus: &[Scenario],
    reward: &RewardNet,
    warm: Option<MotionFormer>,
    parallelism: Parallelism,
    log: &mut dyn Write,
    hooks: &mut dyn TrainHooks,
    stop: Option<&AtomicBool>,
) -> Result<(RitpModels, TrainSummary), LearnError> {
    let actor = match (cfg.ws, warm) {
        (true, Some(p)) => p,
        (true, None) => return Err(LearnError::Input("warm start needs a pretrained policy (run pretrain-policy first)".into())),
        (false, _) => fresh_policy(cfg),
    };
    if actor.config != cfg.policy() {
        return Err(LearnError::Input("policy checkpoint does not match the configured architecture".into()));
    }
    let mut trainer = Trainer::new(cfg.trainer(), corpus, actor, reward, parallelism)?;
    let summary = trainer.run(log, hooks, stop)?;
    Ok((trainer.into_models(), summary))
}

/// The configured learned planner.
pub fn learned_planner(cfg: &RunConfig, actor: MotionFormer, parallelism: Parallelism) -> Box<dyn Planner + Send> {
    if cfg.hybrid {
        Box::new(RitpHybrid::new(actor, parallelism))
    } else {
        Box::new(RitpPlanner { actor })
    }
}

pub fn evaluate(
    cfg: &RunConfig,
    planner: &dyn Planner,
    scenarios: &[Scenario],
    modes: &[SimMode],
    parallelism: Parallelism,
) -> BatchReport {
    batch_evaluate(planner, scenarios, modes, cfg.sim(), parallelism)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScenarioDelta {
    pub scenario_id: String,
    pub baseline: f64,
    pub candidate: f64,
    pub delta: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PairedDeltas {
    pub baseline: String,
    pub candidate: String,
    pub mode: SimMode,
    pub mean_delta: f64,
    pub scenarios: Vec<ScenarioDelta>,
}

/// Per-scenario composite differences `candidate − baseline`, paired by
/// scenario id and mode. Unscored runs count as 0.
pub fn paired_deltas(baseline: &BatchReport, candidate: &BatchReport) -> Vec<PairedDeltas> {
    let score = |r: &ritp_core::metrics::ScenarioResult| r.metrics.as_ref().map_or(0.0, |m| m.composite);
    let mut out = Vec::new();
    for s in &baseline.summaries {
        let rows: Vec<ScenarioDelta> = baseline
            .results
            .iter()
            .filter(|r| r.mode == s.mode)
            .filter_map(|b| {
                candidate
                    .results
                    .iter()
                    .find(|c| c.mode == s.mode && c.scenario_id == b.scenario_id)
                    .map(|c| ScenarioDelta {
                        scenario_id: b.scenario_id.clone(),
                        baseline: score(b),
                        candidate: score(c),
                        delta: score(c) - score(b),
                    })
            })
            .collect();
        let mean = if rows.is_empty() {
            0.0
        } else {
            rows.iter().map(|r| r.delta).sum::<f64>() / rows.len() as f64
        };
        out.push(PairedDeltas {
            baseline: baseline.planner.clone(),
            candidate: candidate.planner.clone(),
            mode: s.mode,
            mean_delta: mean,
            scenarios: rows,
        });
    }
    out
}

/// Success rate of `report` in `mode` restricted to one scenario kind.
pub fn kind_success_rate(report: &BatchReport, mode: SimMode, kind: ScenarioKind) -> Option<f64> {
    let rows: Vec<_> = report
        .results
        .iter()
        .filter(|r| r.mode == mode && ScenarioKind::of_id(&r.scenario_id) == Some(kind))
        .collect();
    if rows.is_empty() {
        return None;
    }
    let ok = rows.iter().filter(|r| r.metrics.as_ref().is_some_and(|m| m.success)).count();
    Some(ok as f64 / rows.len() as f64)
}

#[derive(Debug, Clone, Serialize)]
pub struct SmokeReport {
    pub warm_start: BatchReport,
    pub ritp: BatchReport,
    pub hybrid: BatchReport,
    pub train: TrainSummary,
    pub seconds: [f64; 5],
}

impl SmokeReport {
    pub fn mean(report: &BatchReport, mode: SimMode) -> f64 {
        report.summary(mode).map_or(f64::NAN, |s| s.mean_composite)
    }
}

/// The whole pipeline on the configured corpus, evaluated before and after
/// reinforced training, with and without post-optimization.
pub fn smoke(cfg: &RunConfig, mode: SimMode, parallelism: Parallelism, log: &mut dyn Write) -> Result<SmokeReport, LearnError> {
    let mut seconds = [0.0; 5];
    let mut clock = Instant::now();
    let mut lap = |i: usize| {
        seconds[i] = clock.elapsed().as_secs_f64();
        clock = Instant::now();
    };
    let corpus = build_corpus(cfg)?;
    let reward = train_reward_stage(cfg, &corpus, log)?;
    lap(0);
    let warm = if cfg.ws { pretrain_stage(cfg, &corpus, log)? } else { fresh_policy(cfg) };
    lap(1);
    let warm_start = evaluate(cfg, &RitpPlanner { actor: warm.clone() }, &corpus, &[mode], parallelism);
    lap(2);
    let cfg_ws = RunConfig { ws: true, ..cfg.clone() };
    let (models, train) = train_ritp_stage(&cfg_ws, &corpus, &reward, Some(warm), parallelism, log, &mut crate::trainer::NoHooks, None)?;
    lap(3);
    let actor = models.actor;
    let ritp = evaluate(cfg, &RitpPlanner { actor: actor.clone() }, &corpus, &[mode], parallelism);
    let hybrid = evaluate(cfg, &RitpHybrid::new(actor, parallelism), &corpus, &[mode], parallelism);
    lap(4);
    Ok(SmokeReport {
        warm_start,
        ritp,
        hybrid,
        train,
        seconds,
    })
}
