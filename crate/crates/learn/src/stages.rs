//! Supervised stages: imitation pretraining of the policy and inverse-RL
//! training of the reward on logged demonstrations.

use std::io::Write;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use ritp_core::frenet::ReferenceLine;
use ritp_core::sampler::{sample_actions, SamplerConfig};
use ritp_core::scene::Scenario;
use ritp_core::trajectory::TrajectoryAction;
use serde::{Deserialize, Serialize};

use crate::features::{log_future, polygons_of, SceneInput};
use crate::motionformer::MotionFormer;
use crate::nn::{AdamConfig, AdamW, Ctx, Graph, Var};
use crate::reward::{bicycle_from_log, irl_log_term, logged_states, rollout_predicted_states, PredictedStates, RewardNet};
use crate::LearnError;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IlConfig {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub mas: bool,
    pub seed: u64,
}

impl Default for IlConfig {
    fn default() -> Self {
        Self {
            steps: 1_500,
            batch: 4,
            lr: 2e-3,
            weight_decay: 1e-4,
            mas: false,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IrlConfig {
    pub steps: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for IrlConfig {
    fn default() -> Self {
        Self {
            steps: 300,
            lr: 1e-3,
            seed: 0,
        }
    }
}

/// `(scenario, step)` pairs with a full history window and a full logged future.
pub fn demo_steps(corpus: &[Scenario], history: usize, plan_steps: usize) -> Vec<(usize, usize)> {
    corpus
        .iter()
        .enumerate()
        .flat_map(|(i, sc)| {
            let hi = sc.duration_steps.saturating_sub(plan_steps + 1);
            (history.saturating_sub(1)..=hi).map(move |s| (i, s))
        })
        .filter(|(i, s)| s + plan_steps < corpus[*i].duration_steps)
        .collect()
}

/// Ego future (and, with `mas`, every agent's future) from the log.
pub fn imitation_targets(sc: &Scenario, step: usize, plan_steps: usize, mas: bool) -> Vec<(usize, TrajectoryAction)> {
    let mut out = Vec::new();
    if let Some(f) = log_future(&sc.ego_track, step, plan_steps) {
        out.push((0, TrajectoryAction::new(f)));
    }
    if mas {
        for (i, t) in sc.agent_tracks.iter().enumerate() {
            if let Some(f) = log_future(t, step, plan_steps) {
                out.push((i + 1, TrajectoryAction::new(f)));
            }
        }
    }
    out
}

fn write_line(log: &mut dyn Write, line: &serde_json::Value) -> Result<(), LearnError> {
    writeln!(log, "{line}")
        .and_then(|_| log.flush())
        .map_err(|source| LearnError::Io {
            path: "training log".into(),
            source,
        })
}

/// Mean imitation loss over `batch` demonstrations in one graph.
pub fn il_batch_loss(
    policy: &MotionFormer,
    g: &mut Graph,
    corpus: &[Scenario],
    items: &[(usize, usize)],
    mas: bool,
) -> Result<Var, LearnError> {
    let c = policy.config;
    let ctx = Ctx::new(&policy.store);
    let mut acc: Option<Var> = None;
    for (i, step) in items {
        let sc = &corpus[*i];
        let scene = SceneInput::from_log(sc, *step, c.history)?;
        let targets = imitation_targets(sc, *step, c.plan_steps, mas);
        let (l, _) = policy.il_loss(g, ctx, &scene, &targets)?;
        acc = Some(match acc {
            Some(a) => g.add(a, l)?,
            None => l,
        });
    }
    let acc = acc.ok_or_else(|| LearnError::Input("empty imitation batch".into()))?;
    Ok(g.scale(acc, 1.0 / items.len() as f64))
}

/// Behavior cloning on logged futures; returns the per-step losses.
pub fn pretrain_policy(
    policy: &mut MotionFormer,
    corpus: &[Scenario],
    cfg: &IlConfig,
    log: &mut dyn Write,
) -> Result<Vec<f64>, LearnError> {
    let c = policy.config;
    let pool = demo_steps(corpus, c.history, c.plan_steps);
    if pool.is_empty() {
        return Err(LearnError::Input("no demonstrations with a full horizon".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = AdamW::new(AdamConfig::adamw(cfg.lr, cfg.weight_decay).with_clip(10.0), &policy.store);
    let mut losses = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let items: Vec<_> = (0..cfg.batch.max(1)).map(|_| pool[rng.random_range(0..pool.len())]).collect();
        let mut g = Graph::new();
        let loss = il_batch_loss(policy, &mut g, corpus, &items, cfg.mas)?;
        let l = g.value(loss).item();
        if !l.is_finite() {
            return Err(LearnError::NonFinite {
                what: "imitation loss".into(),
                dump: serde_json::to_string(&items).unwrap_or_default(),
            });
        }
        let grads = g.backward(loss)?;
        g.accumulate(&grads, &mut policy.store);
        opt.step(&mut policy.store);
        losses.push(l);
        if step % 50 == 0 || step + 1 == cfg.steps {
            write_line(log, &serde_json::json!({"stage": "pretrain", "step": step, "loss": l}))?;
        }
    }
    Ok(losses)
}

/// Predicted-state sets of up to `n` sampler actions from the logged ego
/// state, keeping only full-horizon rollouts.
pub fn irl_candidates(
    sc: &Scenario,
    line: &ReferenceLine,
    step: usize,
    plan_steps: usize,
    n: usize,
    rng: &mut ChaCha8Rng,
) -> Vec<PredictedStates> {
    let ego = bicycle_from_log(&sc.ego_track.states[step]);
    let mut cfg = SamplerConfig::desk(plan_steps);
    cfg.max_samples = usize::MAX;
    let actions = sample_actions(&ego, line, &cfg).unwrap_or_default();
    let pick: Vec<usize> = if actions.len() > n {
        let mut ix = index::sample(rng, actions.len(), n).into_vec();
        ix.sort_unstable();
        ix
    } else {
        (0..actions.len()).collect()
    };
    pick.into_iter()
        .map(|i| rollout_predicted_states(sc, step, &ego, &actions[i]))
        .filter(|p| !p.truncated)
        .collect()
}

/// One dropout sample per step; returns the per-step log terms.
pub fn train_reward(net: &mut RewardNet, corpus: &[Scenario], cfg: &IrlConfig, plan_steps: usize, history: usize, log: &mut dyn Write) -> Result<Vec<f64>, LearnError> {
    let pool = demo_steps(corpus, history, plan_steps);
    if pool.is_empty() {
        return Err(LearnError::Input("no demonstrations with a full horizon".into()));
    }
    let lines: Vec<Option<ReferenceLine>> = corpus.iter().map(|s| ReferenceLine::from_route(s).ok()).collect();
    let polys: Vec<_> = corpus.iter().map(polygons_of).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = AdamW::new(AdamConfig::adam(cfg.lr).with_clip(10.0), &net.store);
    let mut out = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let (i, s) = pool[rng.random_range(0..pool.len())];
        let Some(line) = &lines[i] else { continue };
        let cands = irl_candidates(&corpus[i], line, s, plan_steps, net.config.candidates, &mut rng);
        let demo = logged_states(&corpus[i], s, plan_steps);
        let masks = net.sample_masks(&mut rng);
        let mut g = Graph::new();
        let (loss, log_term) = net.irl_loss(&mut g, Ctx::with_masks(&net.store, &masks), &polys[i], &demo, &cands)?;
        let (l, lt) = (g.value(loss).item(), g.value(log_term).item());
        if !l.is_finite() {
            return Err(LearnError::NonFinite {
                what: "reward loss".into(),
                dump: format!("{{\"scenario\":\"{}\",\"step\":{s}}}", corpus[i].id),
            });
        }
        let grads = g.backward(loss)?;
        g.accumulate(&grads, &mut net.store);
        opt.step(&mut net.store);
        out.push(lt);
        if step % 25 == 0 || step + 1 == cfg.steps {
            write_line(log, &serde_json::json!({"stage": "train_reward", "step": step, "loss": l, "log_term": lt, "candidates": cands.len() + 1}))?;
        }
    }
    Ok(out)
}

/// Mean softmax probability of the demonstration (without dropout) and the
/// mean uniform baseline `1/|candidates|` over the given states.
pub fn demo_probability(
    net: &RewardNet,
    corpus: &[Scenario],
    states: &[(usize, usize)],
    plan_steps: usize,
    seed: u64,
) -> Result<(f64, f64), LearnError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut p, mut u, mut n) = (0.0, 0.0, 0usize);
    for (i, s) in states {
        let Ok(line) = ReferenceLine::from_route(&corpus[*i]) else { continue };
        let cands = irl_candidates(&corpus[*i], &line, *s, plan_steps, net.config.candidates, &mut rng);
        let demo = logged_states(&corpus[*i], *s, plan_steps);
        let mut sets: Vec<&PredictedStates> = cands.iter().collect();
        sets.push(&demo);
        let rets = net.trajectory_returns(&polygons_of(&corpus[*i]), &sets, None)?;
        p += (-irl_log_term(&rets, rets.len() - 1, net.config.base)).exp();
        u += 1.0 / rets.len() as f64;
        n += 1;
    }
    let n = n.max(1) as f64;
    Ok((p / n, u / n))
}
