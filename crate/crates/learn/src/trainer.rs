//! Reinforced imitation: actor experience with trajectory noise, twin-critic
//! TD learning, critic-ranked target actions and delayed imitation updates.

use std::io::Write;
use std::path::Path;
use std::sync::atomic::{AtomicBool, Ordering};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use ritp_core::frenet::ReferenceLine;
use ritp_core::noise::{apply_clipped_trajectory_noise, apply_trajectory_noise, NoiseParams};
use ritp_core::par::{self, Parallelism};
use ritp_core::sampler::{sample_actions, SamplerConfig};
use ritp_core::scene::Scenario;
use ritp_core::sim::{ClosedLoop, SimConfig, SimMode};
use ritp_core::trajectory::TrajectoryAction;
use serde::{Deserialize, Serialize};

use crate::criticformer::{actions_tensor, detach_encoded, td_target, CriticFormer};
use crate::features::{log_future, polygons_of, PolygonInput, SceneInput};
use crate::motionformer::{argmax_first, MotionFormer};
use crate::nn::{AdamConfig, AdamW, Ctx, Graph, ParamStore, Var};
use crate::replay::{Experience, ReplayBuffer, StateRef, DEFAULT_CAPACITY};
use crate::reward::{rollout_predicted_states, RewardNet};
use crate::LearnError;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainerConfig {
    /// Environment steps (transitions) to collect.
    pub total_steps: usize,
    pub collect_envs: usize,
    pub batch: usize,
    pub gamma: f64,
    pub xi: f64,
    pub delay: usize,
    pub noise: NoiseParams,
    pub actor_lr: f64,
    pub critic_lr: f64,
    pub weight_decay: f64,
    /// Transitions gathered before the first update.
    pub warmup: usize,
    /// Standardize rewards with statistics frozen at the end of warmup.
    pub normalize_rewards: bool,
    pub replay_capacity: usize,
    /// Cap on sampler actions per state; zero disables the sampler.
    pub sampler_cap: usize,
    /// Imitate the critic-ranked action (otherwise ascend the critic).
    pub msr: bool,
    pub mas: bool,
    /// Simulation steps per environment step.
    pub replan_period: usize,
    pub log_every: usize,
    pub eval_every: usize,
    pub checkpoint_every: usize,
    pub seed: u64,
}

impl TrainerConfig {
    pub fn desk() -> Self {
        Self {
            total_steps: 5_000,
            collect_envs: 4,
            batch: 1,
            gamma: 0.99,
            xi: 0.005,
            delay: 2,
            noise: NoiseParams::default(),
            actor_lr: 2e-4,
            critic_lr: 1e-3,
            weight_decay: 1e-4,
            warmup: 64,
            normalize_rewards: true,
            replay_capacity: DEFAULT_CAPACITY,
            sampler_cap: 512,
            msr: true,
            mas: false,
            replan_period: 5,
            log_every: 50,
            eval_every: 0,
            checkpoint_every: 0,
            seed: 0,
        }
    }

    pub fn paper() -> Self {
        Self {
            total_steps: 100_000,
            actor_lr: 5e-5,
            critic_lr: 5e-5,
            ..Self::desk()
        }
    }
}

/// Online and target networks.
#[derive(Debug, Clone)]
pub struct RitpModels {
    pub actor: MotionFormer,
    pub actor_target: MotionFormer,
    pub critics: [CriticFormer; 2],
    pub critic_targets: [CriticFormer; 2],
}

pub const CHECKPOINT_FILES: [&str; 6] = [
    "actor.json",
    "actor_target.json",
    "critic1.json",
    "critic2.json",
    "critic1_target.json",
    "critic2_target.json",
];

impl RitpModels {
    pub fn new(actor: MotionFormer, seed: u64) -> Self {
        let c1 = CriticFormer::new(&actor.config, "critic", seed.wrapping_mul(7).wrapping_add(1));
        let c2 = CriticFormer::new(&actor.config, "critic", seed.wrapping_mul(7).wrapping_add(2));
        Self {
            actor_target: actor.clone(),
            critic_targets: [c1.clone(), c2.clone()],
            critics: [c1, c2],
            actor,
        }
    }

    fn stores(&self) -> [&ParamStore; 6] {
        [
            &self.actor.store,
            &self.actor_target.store,
            &self.critics[0].store,
            &self.critics[1].store,
            &self.critic_targets[0].store,
            &self.critic_targets[1].store,
        ]
    }

    pub fn save(&self, dir: &Path) -> Result<(), LearnError> {
        std::fs::create_dir_all(dir).map_err(|source| LearnError::Io {
            path: dir.display().to_string(),
            source,
        })?;
        for (name, store) in CHECKPOINT_FILES.iter().zip(self.stores()) {
            let path = dir.join(name);
            std::fs::write(&path, store.to_json()).map_err(|source| LearnError::Io {
                path: path.display().to_string(),
                source,
            })?;
        }
        Ok(())
    }

    pub fn load(&mut self, dir: &Path) -> Result<(), LearnError> {
        let [c1, c2] = &mut self.critics;
        let [t1, t2] = &mut self.critic_targets;
        let stores = [
            &mut self.actor.store,
            &mut self.actor_target.store,
            &mut c1.store,
            &mut c2.store,
            &mut t1.store,
            &mut t2.store,
        ];
        for (name, store) in CHECKPOINT_FILES.iter().zip(stores) {
            let path = dir.join(name);
            let text = std::fs::read_to_string(&path).map_err(|source| LearnError::Io {
                path: path.display().to_string(),
                source,
            })?;
            store.load_json(&text)?;
        }
        Ok(())
    }
}

struct Env<'a> {
    scenario: usize,
    sim: ClosedLoop<'a>,
    rng: ChaCha8Rng,
}

fn open_sim<'a>(scenario: &'a Scenario, cfg: SimConfig) -> Result<ClosedLoop<'a>, LearnError> {
    ClosedLoop::new(scenario, SimMode::Nonreactive, cfg, "ritp-train").map_err(|e| LearnError::Input(e.to_string()))
}

fn state_of(env: &Env) -> StateRef {
    let obs = env.sim.observe();
    StateRef {
        scenario: env.scenario,
        step: obs.step,
        ego: obs.ego,
        ego_history: obs.ego_history.states,
    }
}

/// Fixed affine map applied to stored rewards.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RewardNorm {
    pub mean: f64,
    pub std: f64,
}

impl RewardNorm {
    pub fn apply(&self, r: f64) -> f64 {
        (r - self.mean) / self.std
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LogLine {
    pub step: usize,
    pub critic_loss: [f64; 2],
    pub actor_loss: f64,
    pub switch_rate: f64,
    pub reward_mean: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub eval: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrainSummary {
    pub env_steps: usize,
    pub critic_updates: usize,
    pub actor_updates: usize,
    pub reward_norm: Option<RewardNorm>,
    pub interrupted: bool,
}

/// Periodic evaluation and checkpoint callbacks.
pub trait TrainHooks {
    fn evaluate(&mut self, _actor: &MotionFormer) -> Result<Option<f64>, LearnError> {
        Ok(None)
    }

    fn checkpoint(&mut self, _models: &RitpModels, _step: usize) -> Result<(), LearnError> {
        Ok(())
    }
}

pub struct NoHooks;

impl TrainHooks for NoHooks {}

pub struct Trainer<'a> {
    pub config: TrainerConfig,
    pub models: RitpModels,
    pub buffer: ReplayBuffer<Experience>,
    corpus: &'a [Scenario],
    polygons: Vec<Vec<PolygonInput>>,
    lines: Vec<Option<ReferenceLine>>,
    reward: &'a RewardNet,
    sampler: SamplerConfig,
    sim_config: SimConfig,
    opt_actor: AdamW,
    opt_critics: [AdamW; 2],
    envs: Vec<Env<'a>>,
    rng: ChaCha8Rng,
    parallelism: Parallelism,
    norm: Option<RewardNorm>,
    warmup_rewards: Vec<f64>,
    pub env_steps: usize,
    pub critic_updates: usize,
    pub actor_updates: usize,
}

fn non_finite(what: &str, batch: &[&Experience]) -> LearnError {
    LearnError::NonFinite {
        what: what.into(),
        dump: serde_json::to_string(batch).unwrap_or_else(|e| format!("unserializable batch: {e}")),
    }
}

impl<'a> Trainer<'a> {
    pub fn new(
        config: TrainerConfig,
        corpus: &'a [Scenario],
        actor: MotionFormer,
        reward: &'a RewardNet,
        parallelism: Parallelism,
    ) -> Result<Self, LearnError> {
        if corpus.is_empty() {
            return Err(LearnError::Input("empty training corpus".into()));
        }
        if config.collect_envs == 0 || config.batch == 0 || config.delay == 0 {
            return Err(LearnError::Input("collect_envs, batch and delay must be positive".into()));
        }
        let plan_steps = actor.config.plan_steps;
        let sim_config = SimConfig {
            history_steps: actor.config.history,
            plan_steps,
            replan_period: config.replan_period,
        };
        let models = RitpModels::new(actor, config.seed);
        let opt_actor = AdamW::new(AdamConfig::adamw(config.actor_lr, config.weight_decay).with_clip(10.0), &models.actor.store);
        let copt = AdamConfig::adamw(config.critic_lr, config.weight_decay).with_clip(10.0);
        let opt_critics = [AdamW::new(copt, &models.critics[0].store), AdamW::new(copt, &models.critics[1].store)];
        let envs = (0..config.collect_envs)
            .map(|slot| {
                let scenario = slot % corpus.len();
                Ok(Env {
                    scenario,
                    sim: open_sim(&corpus[scenario], sim_config)?,
                    rng: ChaCha8Rng::seed_from_u64(config.seed.wrapping_mul(1_000_003).wrapping_add(slot as u64 + 1)),
                })
            })
            .collect::<Result<Vec<_>, LearnError>>()?;
        let mut sampler = SamplerConfig::desk(plan_steps);
        sampler.max_samples = config.sampler_cap.max(1);
        Ok(Self {
            config,
            models,
            buffer: ReplayBuffer::new(config.replay_capacity),
            corpus,
            polygons: corpus.iter().map(polygons_of).collect(),
            lines: corpus.iter().map(|s| ReferenceLine::from_route(s).ok()).collect(),
            reward,
            sampler,
            sim_config,
            opt_actor,
            opt_critics,
            envs,
            rng: ChaCha8Rng::seed_from_u64(config.seed),
            parallelism,
            norm: None,
            warmup_rewards: Vec::new(),
            env_steps: 0,
            critic_updates: 0,
            actor_updates: 0,
        })
    }

    pub fn reward_norm(&self) -> Option<RewardNorm> {
        self.norm
    }

    /// Sampler actions from the state's ego, in sampler order.
    pub fn sampler_actions(&self, s: &StateRef) -> Vec<TrajectoryAction> {
        if self.config.sampler_cap == 0 {
            return Vec::new();
        }
        match &self.lines[s.scenario] {
            Some(line) => sample_actions(&s.ego, line, &self.sampler).unwrap_or_default(),
            None => Vec::new(),
        }
    }

    /// One environment step in every collector; terminal environments reset
    /// without storing. Returns the raw rewards of the stored transitions.
    pub fn collect(&mut self) -> Result<Vec<f64>, LearnError> {
        let actor = &self.models.actor;
        let reward = self.reward;
        let corpus = self.corpus;
        let polygons = &self.polygons;
        let noise = self.config.noise;
        let period = self.config.replan_period;
        let sim_config = self.sim_config;
        let n_envs = self.envs.len();
        let results = par::map_mut(self.parallelism, &mut self.envs, |env| -> Result<Option<Experience>, LearnError> {
            if env.sim.done() {
                env.scenario = (env.scenario + n_envs) % corpus.len();
                env.sim = open_sim(&corpus[env.scenario], sim_config)?;
                return Ok(None);
            }
            let state = state_of(env);
            let scene = state.scene(corpus)?;
            let a = actor.select_action(&scene)?;
            let a0 = apply_trajectory_noise(&a, state.ego.position, noise.beta, &mut env.rng);
            let predicted = rollout_predicted_states(&corpus[env.scenario], state.step, &state.ego, &a0);
            let r = reward.uncertainty_penalized_reward(&polygons[env.scenario], &predicted, &mut env.rng)?;
            let start = env.sim.step();
            for _ in 0..period {
                env.sim.advance(&a0, start);
            }
            let next = state_of(env);
            Ok(Some(Experience {
                state,
                action: a0,
                reward: r,
                next,
                terminal: env.sim.done(),
            }))
        });
        let mut stored = Vec::new();
        for r in results {
            if let Some(e) = r? {
                if !e.reward.is_finite() {
                    return Err(non_finite("reward", &[&e]));
                }
                if self.config.normalize_rewards && self.norm.is_none() {
                    self.warmup_rewards.push(e.reward);
                }
                stored.push(e.reward);
                self.buffer.push(e);
                self.env_steps += 1;
            }
        }
        if self.config.normalize_rewards && self.norm.is_none() && self.warmup_rewards.len() >= self.config.warmup.max(2) {
            let n = self.warmup_rewards.len() as f64;
            let mean = self.warmup_rewards.iter().sum::<f64>() / n;
            let var = self.warmup_rewards.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / n;
            self.norm = Some(RewardNorm {
                mean,
                std: var.sqrt().max(1e-6),
            });
        }
        Ok(stored)
    }

    fn stored_reward(&self, r: f64) -> f64 {
        match (self.config.normalize_rewards, self.norm) {
            (true, Some(n)) => n.apply(r),
            _ => r,
        }
    }

    /// Regression targets for a batch.
    pub fn targets(&mut self, batch: &[&Experience]) -> Result<Vec<f64>, LearnError> {
        let m = &self.models;
        let mut out = Vec::with_capacity(batch.len());
        for e in batch {
            let r = self.stored_reward(e.reward);
            if e.terminal {
                out.push(r);
                continue;
            }
            let scene = e.next.scene(self.corpus)?;
            let a = m.actor_target.select_action(&scene)?;
            let noise = self.config.noise;
            let a = apply_clipped_trajectory_noise(&a, e.next.ego.position, noise.beta_prime, noise.clip_c, &mut self.rng);
            let q1 = m.critic_targets[0].evaluate(&m.actor_target, &scene, std::slice::from_ref(&a))?[0];
            let q2 = m.critic_targets[1].evaluate(&m.actor_target, &scene, std::slice::from_ref(&a))?[0];
            out.push(td_target(r, self.config.gamma, q1, q2, false));
        }
        Ok(out)
    }

    fn critic_loss(&self, i: usize, batch: &[&Experience], targets: &[f64]) -> Result<(f64, crate::nn::Gradients, Graph), LearnError> {
        let mut g = Graph::new();
        let critic = &self.models.critics[i];
        let actor = &self.models.actor;
        let mut terms: Vec<Var> = Vec::with_capacity(batch.len());
        for (e, y) in batch.iter().zip(targets) {
            let scene = e.state.scene(self.corpus)?;
            let enc = actor.encode_scene(&mut g, Ctx::frozen(&actor.store), &scene)?;
            let enc = detach_encoded(&mut g, &enc);
            let a = g.input(actions_tensor(&scene, std::slice::from_ref(&e.action)));
            let q = critic.q_values(&mut g, Ctx::new(&critic.store), &scene, &enc, a, 1)?;
            let d = g.add_scalar(q, -y);
            terms.push(g.mul(d, d)?);
        }
        let mut acc = terms[0];
        for t in &terms[1..] {
            acc = g.add(acc, *t)?;
        }
        let loss = g.scale(acc, 1.0 / batch.len() as f64);
        let grads = g.backward(loss)?;
        Ok((g.value(loss).item(), grads, g))
    }

    /// Both critics on one sampled batch; `None` while the buffer is underfull.
    pub fn critic_update(&mut self) -> Result<Option<[f64; 2]>, LearnError> {
        let n = self.config.batch;
        let Some(idx) = self.buffer.sample_indices(n, &mut self.rng) else {
            return Ok(None);
        };
        let batch_owned: Vec<Experience> = idx.iter().map(|i| self.buffer.get(*i).clone()).collect();
        let batch: Vec<&Experience> = batch_owned.iter().collect();
        let targets = self.targets(&batch)?;
        let mut losses = [0.0; 2];
        for (i, loss) in losses.iter_mut().enumerate() {
            let (l, grads, g) = self.critic_loss(i, &batch, &targets)?;
            if !l.is_finite() {
                return Err(non_finite("critic loss", &batch));
            }
            g.accumulate(&grads, &mut self.models.critics[i].store);
            self.opt_critics[i].step(&mut self.models.critics[i].store);
            if !self.models.critics[i].store.all_finite() {
                return Err(non_finite("critic parameters", &batch));
            }
            *loss = l;
        }
        self.critic_updates += 1;
        Ok(Some(losses))
    }

    /// Index of the best action under the first online critic.
    pub fn rank_actions(&self, scene: &SceneInput, actions: &[TrajectoryAction]) -> Result<usize, LearnError> {
        let q = self.models.critics[0].evaluate(&self.models.actor, scene, actions)?;
        Ok(argmax_first(&q))
    }

    fn mas_targets(&self, s: &StateRef) -> Vec<(usize, TrajectoryAction)> {
        if !self.config.mas {
            return Vec::new();
        }
        let sc = &self.corpus[s.scenario];
        sc.agent_tracks
            .iter()
            .enumerate()
            .filter_map(|(i, t)| {
                log_future(t, s.step, self.models.actor.config.plan_steps).map(|f| (i + 1, TrajectoryAction::new(f)))
            })
            .collect()
    }

    /// Returns `(loss, switch rate)`; the switch rate counts items whose
    /// critic-ranked action is not the executed one.
    pub fn actor_update(&mut self) -> Result<Option<(f64, f64)>, LearnError> {
        let n = self.config.batch;
        let Some(idx) = self.buffer.sample_indices(n, &mut self.rng) else {
            return Ok(None);
        };
        let batch_owned: Vec<Experience> = idx.iter().map(|i| self.buffer.get(*i).clone()).collect();
        let batch: Vec<&Experience> = batch_owned.iter().collect();
        let actor = &self.models.actor;
        let mut g = Graph::new();
        let ctx = Ctx::new(&actor.store);
        let mut terms: Vec<Var> = Vec::with_capacity(n);
        let mut switches = 0usize;
        for e in &batch {
            let scene = e.state.scene(self.corpus)?;
            if self.config.msr {
                let mut actions = vec![e.action.clone()];
                actions.extend(self.sampler_actions(&e.state));
                let k = self.rank_actions(&scene, &actions)?;
                switches += usize::from(k != 0);
                let mut targets = vec![(0, actions.swap_remove(k))];
                targets.extend(self.mas_targets(&e.state));
                let (l, _) = actor.il_loss(&mut g, ctx, &scene, &targets)?;
                terms.push(l);
            } else {
                let critic = &self.models.critics[0];
                let enc = actor.encode_scene(&mut g, ctx, &scene)?;
                let v = actor.decode_modes(&mut g, ctx, &scene, &enc, 0)?;
                let k = argmax_first(&g.value(v.rho).data);
                let row = g.gather(v.refined_loc, &[k])?;
                let pts = g.reshape(row, actor.config.plan_steps, 2)?;
                let enc = detach_encoded(&mut g, &enc);
                let q = critic.q_values(&mut g, Ctx::frozen(&critic.store), &scene, &enc, pts, 1)?;
                terms.push(g.scale(q, -1.0));
            }
        }
        let mut acc = terms[0];
        for t in &terms[1..] {
            acc = g.add(acc, *t)?;
        }
        let loss = g.scale(acc, 1.0 / n as f64);
        let l = g.value(loss).item();
        if !l.is_finite() {
            return Err(non_finite("actor loss", &batch));
        }
        let grads = g.backward(loss)?;
        g.accumulate(&grads, &mut self.models.actor.store);
        self.opt_actor.step(&mut self.models.actor.store);
        if !self.models.actor.store.all_finite() {
            return Err(non_finite("actor parameters", &batch));
        }
        self.actor_updates += 1;
        Ok(Some((l, switches as f64 / n as f64)))
    }

    pub fn soft_update_targets(&mut self) {
        let xi = self.config.xi;
        let m = &mut self.models;
        m.actor_target.store.soft_update_from(&m.actor.store, xi);
        for i in 0..2 {
            m.critic_targets[i].store.soft_update_from(&m.critics[i].store, xi);
        }
    }

    /// One critic update per stored transition, with the actor and targets
    /// updated every `delay` critic updates.
    pub fn run(
        &mut self,
        log: &mut dyn Write,
        hooks: &mut dyn TrainHooks,
        stop: Option<&AtomicBool>,
    ) -> Result<TrainSummary, LearnError> {
        let mut acc = Accum::default();
        let mut interrupted = false;
        let mut next_log = self.config.log_every.max(1);
        let mut next_eval = self.config.eval_every;
        let mut next_ckpt = self.config.checkpoint_every;
        while self.env_steps < self.config.total_steps {
            if stop.is_some_and(|s| s.load(Ordering::SeqCst)) {
                interrupted = true;
                break;
            }
            let stored = self.collect()?;
            acc.rewards.extend(&stored);
            if self.env_steps < self.config.warmup {
                continue;
            }
            for _ in 0..stored.len() {
                if let Some(c) = self.critic_update()? {
                    acc.critic.push(c);
                    if self.critic_updates % self.config.delay == 0 {
                        if let Some((l, s)) = self.actor_update()? {
                            acc.actor.push(l);
                            acc.switch.push(s);
                        }
                        self.soft_update_targets();
                    }
                }
            }
            let mut eval = None;
            if next_eval > 0 && self.env_steps >= next_eval {
                eval = hooks.evaluate(&self.models.actor)?;
                next_eval += self.config.eval_every;
            }
            if self.env_steps >= next_log || eval.is_some() {
                let line = acc.drain(self.env_steps, eval);
                writeln!(log, "{}", serde_json::to_string(&line).expect("log line serializes")).map_err(|source| LearnError::Io {
                    path: "training log".into(),
                    source,
                })?;
                log.flush().map_err(|source| LearnError::Io {
                    path: "training log".into(),
                    source,
                })?;
                while next_log <= self.env_steps {
                    next_log += self.config.log_every.max(1);
                }
            }
            if next_ckpt > 0 && self.env_steps >= next_ckpt {
                hooks.checkpoint(&self.models, self.env_steps)?;
                next_ckpt += self.config.checkpoint_every;
            }
        }
        Ok(TrainSummary {
            env_steps: self.env_steps,
            critic_updates: self.critic_updates,
            actor_updates: self.actor_updates,
            reward_norm: self.norm,
            interrupted,
        })
    }

    pub fn into_models(self) -> RitpModels {
        self.models
    }
}

#[derive(Default)]
struct Accum {
    critic: Vec<[f64; 2]>,
    actor: Vec<f64>,
    switch: Vec<f64>,
    rewards: Vec<f64>,
}

fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        0.0
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

impl Accum {
    fn drain(&mut self, step: usize, eval: Option<f64>) -> LogLine {
        let c0: Vec<f64> = self.critic.iter().map(|c| c[0]).collect();
        let c1: Vec<f64> = self.critic.iter().map(|c| c[1]).collect();
        let line = LogLine {
            step,
            critic_loss: [mean(&c0), mean(&c1)],
            actor_loss: mean(&self.actor),
            switch_rate: mean(&self.switch),
            reward_mean: mean(&self.rewards),
            eval,
        };
        *self = Self::default();
        line
    }
}
