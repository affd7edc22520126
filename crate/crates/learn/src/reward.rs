//! Dropout-Bayesian reward over predicted state snapshots, its inverse-RL
//! loss and the uncertainty-penalized return.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use ritp_core::dynamics::{rollout, BicycleState, LqrTracker};
use ritp_core::scene::{AgentState, AgentTrack, Scenario};
use ritp_core::sim::agent_state_of;
use ritp_core::trajectory::TrajectoryAction;
use serde::{Deserialize, Serialize};

use crate::encoder::SceneEncoder;
use crate::features::{PolygonInput, Snapshot, SnapshotAgent, SnapshotBatch};
use crate::nn::{dropout_sample, Ctx, DropoutMasks, DropoutSpec, Graph, Linear, Mlp, ParamStore, Var};
use crate::LearnError;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RewardConfig {
    pub dim: usize,
    pub heads: usize,
    pub bands: usize,
    pub dropout: f64,
    /// Base of the exponent in the demonstration likelihood.
    pub base: f64,
    pub candidates: usize,
    pub passes: usize,
    pub lambda: f64,
    pub tau: f64,
    pub sigma: f64,
    /// Multiplier on the weight regularizer.
    pub reg_scale: f64,
}

impl RewardConfig {
    pub fn desk() -> Self {
        Self {
            dim: 16,
            heads: 2,
            bands: 8,
            dropout: 0.1,
            base: 1.1,
            candidates: 64,
            passes: 10,
            lambda: 1.5,
            tau: 1.0,
            sigma: 1.0,
            reg_scale: 1e-3,
        }
    }

    pub fn paper() -> Self {
        Self { dim: 64, heads: 8, ..Self::desk() }
    }
}

/// Snapshots along one candidate action.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictedStates {
    pub snapshots: Vec<Snapshot>,
    /// The log ended before the full horizon.
    pub truncated: bool,
}

fn snapshot_agent(track: &AgentTrack, step: usize) -> SnapshotAgent {
    SnapshotAgent {
        kind: track.semantic,
        state: track.states[step],
        prev: step.checked_sub(1).map(|p| track.states[p]),
    }
}

/// Ego tracks `action` from `ego` with the LQR tracker; other agents replay
/// their logs.
pub fn rollout_predicted_states(
    scenario: &Scenario,
    step: usize,
    ego: &BicycleState,
    action: &TrajectoryAction,
) -> PredictedStates {
    let last = scenario.duration_steps.saturating_sub(1);
    let available = last.saturating_sub(step);
    let n = action.len().min(available);
    let states = rollout(LqrTracker::shared(), ego, action, n);
    let mut prev = agent_state_of(ego);
    let snapshots = states
        .iter()
        .enumerate()
        .map(|(j, (s, _))| {
            let t = step + j + 1;
            let cur = agent_state_of(s);
            let mut agents = vec![SnapshotAgent {
                kind: scenario.ego_track.semantic,
                state: cur,
                prev: Some(prev),
            }];
            agents.extend(scenario.agent_tracks.iter().map(|tr| snapshot_agent(tr, t)));
            prev = cur;
            Snapshot { step: t as i64, agents }
        })
        .collect();
    PredictedStates {
        snapshots,
        truncated: n < action.len(),
    }
}

/// Logged ego states as though they were tracked.
pub fn logged_states(scenario: &Scenario, step: usize, horizon: usize) -> PredictedStates {
    let last = scenario.duration_steps.saturating_sub(1);
    let n = horizon.min(last.saturating_sub(step));
    let snapshots = (step + 1..=step + n)
        .map(|t| {
            let mut agents = vec![snapshot_agent(&scenario.ego_track, t)];
            agents.extend(scenario.agent_tracks.iter().map(|tr| snapshot_agent(tr, t)));
            Snapshot { step: t as i64, agents }
        })
        .collect();
    PredictedStates {
        snapshots,
        truncated: n < horizon,
    }
}

pub fn bicycle_from_log(state: &AgentState) -> BicycleState {
    BicycleState::new(state.position, state.heading, state.speed())
}

/// `−log(b^{R_demo} / Σ b^{R_i})`, stabilized in the exponent.
pub fn irl_log_term(returns: &[f64], demo: usize, base: f64) -> f64 {
    let lb = base.ln();
    let m = returns.iter().fold(f64::NEG_INFINITY, |a, r| a.max(r * lb));
    let lse = m + returns.iter().map(|r| (r * lb - m).exp()).sum::<f64>().ln();
    lse - returns[demo] * lb
}

/// Sum over steps of `r̃ − λũ`, with `r̃` the per-step mean over passes and
/// `ũ = σ²/τ + mean(R²) − r̃²`, the last two terms taken as the centered
/// second moment so `ũ ≥ σ²/τ` holds in floating point. `per_pass[o][j]` is
/// pass `o`, step `j`.
pub fn penalized_return(per_pass: &[Vec<f64>], lambda: f64, tau: f64, sigma: f64) -> f64 {
    let o = per_pass.len() as f64;
    let steps = per_pass.first().map_or(0, |p| p.len());
    (0..steps)
        .map(|j| {
            let mean = per_pass.iter().map(|p| p[j]).sum::<f64>() / o;
            let var = per_pass.iter().map(|p| (p[j] - mean).powi(2)).sum::<f64>() / o;
            let u = sigma * sigma / tau + var;
            mean - lambda * u
        })
        .sum()
}

#[derive(Debug, Clone)]
pub struct RewardNet {
    pub config: RewardConfig,
    pub store: ParamStore,
    encoder: SceneEncoder,
    head: Mlp,
}

impl RewardNet {
    pub fn new(config: RewardConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let encoder = SceneEncoder::new(&mut store, "reward.enc", config.dim, config.heads, config.bands, false, &mut rng);
        let head = Mlp::new(&mut store, "reward.head", &[config.dim, config.dim, 1], &mut rng);
        Self {
            config,
            store,
            encoder,
            head,
        }
    }

    pub fn linears(&self) -> Vec<&Linear> {
        let mut v = self.encoder.linears();
        v.extend(self.head.layers.iter());
        v
    }

    pub fn dropout_spec(&self) -> DropoutSpec {
        DropoutSpec {
            layers: self.linears().iter().map(|l| l.dropout(self.config.dropout)).collect(),
        }
    }

    pub fn sample_masks(&self, rng: &mut ChaCha8Rng) -> DropoutMasks {
        dropout_sample(&self.dropout_spec(), &self.store, rng)
    }

    /// Zero output weights and a constant bias: every state gets `value`.
    pub fn set_constant(&mut self, value: f64) {
        let last = self.head.last().clone();
        self.store.value_mut(last.w).data.iter_mut().for_each(|v| *v = 0.0);
        if let Some(b) = last.b {
            self.store.value_mut(b).data[0] = value;
        }
    }

    /// `[Z, 1]` per-snapshot rewards.
    pub fn rewards(&self, g: &mut Graph, ctx: Ctx, polygons: &[PolygonInput], batch: &SnapshotBatch) -> Result<Var, LearnError> {
        let map = self.encoder.encode_map(g, ctx, polygons)?;
        let enc = self.encoder.encode_snapshots(g, ctx, polygons, map, batch)?;
        let ego = g.gather(enc.agents, &batch.offsets())?;
        Ok(self.head.forward(g, ctx, ego)?)
    }

    /// Per-step rewards of each set under one dropout sample.
    pub fn step_rewards(
        &self,
        polygons: &[PolygonInput],
        sets: &[&PredictedStates],
        masks: Option<&DropoutMasks>,
    ) -> Result<Vec<Vec<f64>>, LearnError> {
        let batch = SnapshotBatch {
            snapshots: sets.iter().flat_map(|s| s.snapshots.iter().cloned()).collect(),
        };
        if batch.snapshots.is_empty() {
            return Ok(sets.iter().map(|_| Vec::new()).collect());
        }
        let mut g = Graph::new();
        let ctx = Ctx {
            store: &self.store,
            masks,
            frozen: false,
        };
        let r = self.rewards(&mut g, ctx, polygons, &batch)?;
        let vals = &g.value(r).data;
        let mut out = Vec::with_capacity(sets.len());
        let mut i = 0;
        for s in sets {
            out.push(vals[i..i + s.snapshots.len()].to_vec());
            i += s.snapshots.len();
        }
        Ok(out)
    }

    /// `R(ζ | ω̂)` for each set under one dropout sample.
    pub fn trajectory_returns(
        &self,
        polygons: &[PolygonInput],
        sets: &[&PredictedStates],
        masks: Option<&DropoutMasks>,
    ) -> Result<Vec<f64>, LearnError> {
        Ok(self
            .step_rewards(polygons, sets, masks)?
            .iter()
            .map(|r| r.iter().sum())
            .collect())
    }

    /// `Σ_i (p_i/2 ‖M_i‖² + ½‖b_i‖²)`, scaled by `reg_scale`.
    pub fn regularizer(&self, g: &mut Graph, ctx: Ctx) -> Result<Var, LearnError> {
        let p = self.config.dropout;
        let mut terms = Vec::new();
        for l in self.linears() {
            let w = ctx.param(g, l.w);
            let w2 = g.mul(w, w)?;
            let s = g.sum(w2);
            terms.push(g.scale(s, 0.5 * p * self.config.reg_scale));
            if let Some(b) = l.b {
                let b = ctx.param(g, b);
                let b2 = g.mul(b, b)?;
                let s = g.sum(b2);
                terms.push(g.scale(s, 0.5 * self.config.reg_scale));
            }
        }
        let mut acc = terms[0];
        for t in &terms[1..] {
            acc = g.add(acc, *t)?;
        }
        Ok(acc)
    }

    /// Returns `(loss, log term)` with the demonstration appended last to the
    /// candidate set.
    pub fn irl_loss(
        &self,
        g: &mut Graph,
        ctx: Ctx,
        polygons: &[PolygonInput],
        demo: &PredictedStates,
        candidates: &[PredictedStates],
    ) -> Result<(Var, Var), LearnError> {
        let mut sets: Vec<&PredictedStates> = candidates.iter().collect();
        sets.push(demo);
        if sets.iter().any(|s| s.snapshots.is_empty()) {
            return Err(LearnError::Input("empty predicted state set".into()));
        }
        let mut seg = Vec::new();
        for (i, s) in sets.iter().enumerate() {
            seg.extend(std::iter::repeat_n(i, s.snapshots.len()));
        }
        let batch = SnapshotBatch {
            snapshots: sets.iter().flat_map(|s| s.snapshots.iter().cloned()).collect(),
        };
        let r = self.rewards(g, ctx, polygons, &batch)?;
        let returns = g.scatter_add(r, &seg, sets.len())?;
        let log_term = self.log_term(g, returns)?;
        let reg = self.regularizer(g, ctx)?;
        Ok((g.add(log_term, reg)?, log_term))
    }

    /// Graph form of [`irl_log_term`] over `[n, 1]` returns, demo last.
    pub fn log_term(&self, g: &mut Graph, returns: Var) -> Result<Var, LearnError> {
        let n = g.shape(returns)[0];
        if n == 0 {
            return Err(LearnError::Input("no candidates".into()));
        }
        let x = g.scale(returns, self.config.base.ln());
        let row = g.transpose(x);
        let lse = g.logsumexp_rows(row);
        let d = g.slice_rows(x, n - 1, 1)?;
        Ok(g.sub(lse, d)?)
    }

    /// `O` independent dropout samples, one rng stream each.
    pub fn uncertainty_penalized_reward(
        &self,
        polygons: &[PolygonInput],
        states: &PredictedStates,
        rng: &mut ChaCha8Rng,
    ) -> Result<f64, LearnError> {
        let c = &self.config;
        if c.passes < 2 {
            return Err(LearnError::Input(format!("{} dropout passes, need at least 2", c.passes)));
        }
        let seeds: Vec<u64> = (0..c.passes).map(|_| rng.random()).collect();
        let per_pass = seeds
            .iter()
            .map(|s| {
                let masks = self.sample_masks(&mut ChaCha8Rng::seed_from_u64(*s));
                self.step_rewards(polygons, &[states], Some(&masks)).map(|mut v| v.remove(0))
            })
            .collect::<Result<Vec<_>, _>>()?;
        Ok(penalized_return(&per_pass, c.lambda, c.tau, c.sigma))
    }
}
