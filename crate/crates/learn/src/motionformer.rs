//! Multimodal trajectory policy: scene encoder, mode queries, a Laplace
//! proposal head and one refinement pass with a mode-probability head.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use ritp_core::frenet::FrenetPose;
use ritp_core::geometry::{self, Point};
use ritp_core::scene::DT;
use ritp_core::trajectory::TrajectoryAction;
use serde::{Deserialize, Serialize};

use crate::encoder::{Encoded, SceneEncoder};
use crate::features::{replicate, SceneInput};
use crate::nn::{AttentionBlock, Ctx, Graph, Mlp, ParamId, ParamStore, Tensor, Var};
use crate::LearnError;

pub const SCALE_FLOOR: f64 = 1e-3;
/// Multiplier on raw location outputs, in meters.
const LOC_GAIN: f64 = 5.0;
/// Location heads emit coefficients of `(t/T)^k`, `k = 1..=BASIS`, per axis.
const BASIS: usize = 5;

/// `[2·BASIS, 2·T_p]` map from interleaved coefficients to interleaved points.
fn time_basis(steps: usize) -> Tensor {
    let mut b = Tensor::zeros(2 * BASIS, 2 * steps);
    for k in 0..BASIS {
        for j in 0..steps {
            let u = ((j + 1) as f64 / steps as f64).powi(k as i32 + 1);
            b.set(2 * k, 2 * j, u);
            b.set(2 * k + 1, 2 * j + 1, u);
        }
    }
    b
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PolicyConfig {
    pub dim: usize,
    pub heads: usize,
    pub bands: usize,
    pub modes: usize,
    pub history: usize,
    pub plan_steps: usize,
}

impl PolicyConfig {
    pub fn desk() -> Self {
        Self {
            dim: 16,
            heads: 2,
            bands: 8,
            modes: 3,
            history: 10,
            plan_steps: 20,
        }
    }

    pub fn paper() -> Self {
        Self {
            dim: 64,
            heads: 8,
            bands: 8,
            modes: 6,
            history: 50,
            plan_steps: 80,
        }
    }
}

/// Graph handles of one decoded agent. Locations and scales are `[K, 2·T_p]`
/// with columns `x₁, y₁, x₂, y₂, …` in the agent's current frame.
#[derive(Debug, Clone, Copy)]
pub struct ModeVars {
    pub proposal_loc: Var,
    pub proposal_scale: Var,
    pub refined_loc: Var,
    pub refined_scale: Var,
    /// `[1, K]`
    pub logits: Var,
    pub rho: Var,
}

/// Decoded values in the focal agent's frame.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyOutput {
    pub proposal_loc: Vec<Vec<Point>>,
    pub proposal_scale: Vec<Vec<Point>>,
    pub refined_loc: Vec<Vec<Point>>,
    pub refined_scale: Vec<Vec<Point>>,
    pub rho: Vec<f64>,
}

fn rows_as_points(t: &Tensor) -> Vec<Vec<Point>> {
    (0..t.rows()).map(|r| t.row(r).chunks(2).map(|c| [c[0], c[1]]).collect()).collect()
}

impl PolicyOutput {
    fn from_graph(g: &Graph, v: &ModeVars) -> Self {
        Self {
            proposal_loc: rows_as_points(g.value(v.proposal_loc)),
            proposal_scale: rows_as_points(g.value(v.proposal_scale)),
            refined_loc: rows_as_points(g.value(v.refined_loc)),
            refined_scale: rows_as_points(g.value(v.refined_scale)),
            rho: g.value(v.rho).data.clone(),
        }
    }

    pub fn best_mode(&self) -> usize {
        argmax_first(&self.rho)
    }
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax_first(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

/// Loss pieces of one agent.
#[derive(Debug, Clone, Copy)]
pub struct IlTerms {
    pub total: Var,
    pub classification: Var,
    pub proposal: Var,
    pub refinement: Var,
    pub winner: usize,
}

#[derive(Debug, Clone)]
pub struct MotionFormer {
    pub config: PolicyConfig,
    pub store: ParamStore,
    encoder: SceneEncoder,
    mode_embed: ParamId,
    decode: [AttentionBlock; 3],
    proposal_head: Mlp,
    refine_embed: Mlp,
    refine: [AttentionBlock; 3],
    refine_head: Mlp,
    rho_head: Mlp,
}

/// Time over which the ego anchor blends its lateral offset back to the route.
const RECOVERY_TIME: f64 = 2.0;
/// Farthest lateral distance from the route at which the ego anchor follows it.
const ROUTE_CORRIDOR: f64 = 6.0;

/// Row vector of anchor positions in the agent frame: constant speed along
/// the route with the lateral offset blended to zero for the ego, constant
/// velocity otherwise.
fn anchor(scene: &SceneInput, agent: usize, steps: usize) -> Tensor {
    let s = scene.current(agent);
    let route = if agent == 0 { route_anchor(scene, steps) } else { None };
    let pts = route.unwrap_or_else(|| {
        (1..=steps)
            .map(|j| geometry::add(s.position, geometry::scale(s.velocity, j as f64 * DT)))
            .collect()
    });
    Tensor::row_vector(
        pts.iter()
            .flat_map(|p| geometry::to_local(*p, s.position, s.heading))
            .collect(),
    )
}

fn route_anchor(scene: &SceneInput, steps: usize) -> Option<Vec<Point>> {
    let line = scene.route_line()?;
    let s = scene.current(0);
    let f = line.project_within(s.position, ROUTE_CORRIDOR).ok()?;
    let v = s.speed();
    let len = line.length();
    Some(
        (1..=steps)
            .map(|j| {
                let t = j as f64 * DT;
                let u = (t / RECOVERY_TIME).min(1.0);
                let keep = 1.0 - u * u * u * (10.0 - 15.0 * u + 6.0 * u * u);
                let along = f.s + v * t;
                let (p, _) = line.to_cartesian(FrenetPose::new(along.min(len), f.l * keep));
                if along > len {
                    // past the end of the route: straight extension
                    geometry::add(p, geometry::scale(geometry::heading_vector(line.heading_at(len)), along - len))
                } else {
                    p
                }
            })
            .collect(),
    )
}

/// Per-coordinate Laplace negative log-likelihood, `[K, 2·T_p]`.
fn laplace_nll(g: &mut Graph, loc: Var, scale: Var, target: Var) -> Result<Var, LearnError> {
    let d = g.sub(loc, target)?;
    let a = g.abs(d);
    let z = g.div(a, scale)?;
    let two = g.scale(scale, 2.0);
    let l = g.log(two);
    Ok(g.add(l, z)?)
}

/// `L_c + L_p + L_r` for one agent against `target` (agent-frame points).
pub fn il_terms(g: &mut Graph, v: &ModeVars, target: &[Point]) -> Result<IlTerms, LearnError> {
    let [k, w] = g.shape(v.proposal_loc);
    if target.len() * 2 != w {
        return Err(LearnError::Input(format!("target has {} steps, expected {}", target.len(), w / 2)));
    }
    let steps = target.len() as f64;
    let last = target[target.len() - 1];
    let prop = g.value(v.proposal_loc);
    let dists: Vec<f64> = (0..k)
        .map(|m| geometry::dist([prop.get(m, w - 2), prop.get(m, w - 1)], last))
        .collect();
    let winner = (0..k).fold(0, |b, m| if dists[m] < dists[b] { m } else { b });
    let t = g.input(Tensor::row_vector(target.iter().flat_map(|p| [p[0], p[1]]).collect()));

    let np = laplace_nll(g, v.proposal_loc, v.proposal_scale, t)?;
    let wp = g.gather(np, &[winner])?;
    let sp = g.sum(wp);
    let proposal = g.scale(sp, 1.0 / steps);

    let nr = laplace_nll(g, v.refined_loc, v.refined_scale, t)?;
    let wr = g.gather(nr, &[winner])?;
    let sr = g.sum(wr);
    let refinement = g.scale(sr, 1.0 / steps);

    let fin = g.slice_cols(nr, w - 2, 2)?;
    let fin = g.row_sum(fin);
    let fin = g.detach(fin);
    let fin = g.scale(fin, -1.0);
    let c = g.transpose(fin);
    let shifted = g.add(v.logits, c)?;
    let lse_all = g.logsumexp_rows(v.logits);
    let lse_c = g.logsumexp_rows(shifted);
    let classification = g.sub(lse_all, lse_c)?;

    let a = g.add(classification, proposal)?;
    let total = g.add(a, refinement)?;
    Ok(IlTerms {
        total,
        classification,
        proposal,
        refinement,
        winner,
    })
}

impl MotionFormer {
    pub fn new(config: PolicyConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let (d, h, b) = (config.dim, config.heads, config.bands);
        let out = 2 * BASIS + 2 * config.plan_steps;
        let encoder = SceneEncoder::new(&mut store, "policy.enc", d, h, b, true, &mut rng);
        let mode_embed = store.add_glorot("policy.modes", config.modes, d, &mut rng);
        let block = |store: &mut ParamStore, name: &str, rng: &mut ChaCha8Rng| {
            AttentionBlock::new(store, &format!("policy.{name}"), d, h, b, rng)
        };
        let decode = [
            block(&mut store, "dec_hist", &mut rng),
            block(&mut store, "dec_map", &mut rng),
            block(&mut store, "dec_agents", &mut rng),
        ];
        let proposal_head = Mlp::new(&mut store, "policy.proposal_head", &[d, d, out], &mut rng);
        let refine_embed = Mlp::new(&mut store, "policy.refine_embed", &[2 * config.plan_steps, d, d], &mut rng);
        let refine = [
            block(&mut store, "ref_hist", &mut rng),
            block(&mut store, "ref_map", &mut rng),
            block(&mut store, "ref_agents", &mut rng),
        ];
        let refine_head = Mlp::new(&mut store, "policy.refine_head", &[d, d, out], &mut rng);
        let rho_head = Mlp::new(&mut store, "policy.rho_head", &[d, d, 1], &mut rng);
        Self {
            config,
            store,
            encoder,
            mode_embed,
            decode,
            proposal_head,
            refine_embed,
            refine,
            refine_head,
            rho_head,
        }
    }

    pub fn encode_scene(&self, g: &mut Graph, ctx: Ctx, scene: &SceneInput) -> Result<Encoded, LearnError> {
        if scene.history() != self.config.history {
            return Err(LearnError::Input(format!(
                "history of {} steps, expected {}",
                scene.history(),
                self.config.history
            )));
        }
        self.encoder.encode(g, ctx, scene)
    }

    fn head(&self, g: &mut Graph, ctx: Ctx, mlp: &Mlp, q: Var) -> Result<(Var, Var), LearnError> {
        let w = 2 * self.config.plan_steps;
        let out = mlp.forward(g, ctx, q)?;
        let coef = g.slice_cols(out, 0, 2 * BASIS)?;
        let basis = g.input(time_basis(self.config.plan_steps));
        let loc = g.matmul(coef, basis)?;
        let loc = g.scale(loc, LOC_GAIN);
        let raw = g.slice_cols(out, 2 * BASIS, w)?;
        let sp = g.softplus(raw);
        Ok((loc, g.add_scalar(sp, SCALE_FLOOR)))
    }

    /// Modes of `agent`, whose queries read its history, nearby polygons and
    /// nearby agents twice: once for proposals, once for refinement.
    pub fn decode_modes(
        &self,
        g: &mut Graph,
        ctx: Ctx,
        scene: &SceneInput,
        enc: &Encoded,
        agent: usize,
    ) -> Result<ModeVars, LearnError> {
        let k = self.config.modes;
        let t_len = scene.history();
        let tok = g.gather(enc.agents, &[agent * t_len + t_len - 1])?;
        let modes = ctx.param(g, self.mode_embed);
        let mut q = g.add(modes, tok)?;
        let fc = scene.focal_context(agent);
        let edges = [replicate(&fc.history, k), replicate(&fc.map, k), replicate(&fc.agents, k)];
        let sources = [enc.agents, enc.map, enc.agents];
        for ((block, e), s) in self.decode.iter().zip(&edges).zip(sources) {
            q = block.forward(g, ctx, q, s, e)?;
        }
        let anchor = g.input(anchor(scene, agent, self.config.plan_steps));
        let (raw_loc, proposal_scale) = self.head(g, ctx, &self.proposal_head, q)?;
        let proposal_loc = g.add(raw_loc, anchor)?;

        let det = g.detach(proposal_loc);
        let rel = g.sub(det, anchor)?;
        let rel = g.scale(rel, 0.1);
        let emb = self.refine_embed.forward(g, ctx, rel)?;
        let mut q2 = g.add(q, emb)?;
        for ((block, e), s) in self.refine.iter().zip(&edges).zip(sources) {
            q2 = block.forward(g, ctx, q2, s, e)?;
        }
        let (offset, refined_scale) = self.head(g, ctx, &self.refine_head, q2)?;
        let refined_loc = g.add(det, offset)?;
        let logits = self.rho_head.forward(g, ctx, q2)?;
        let logits = g.transpose(logits);
        let rho = g.softmax_rows(logits);
        Ok(ModeVars {
            proposal_loc,
            proposal_scale,
            refined_loc,
            refined_scale,
            logits,
            rho,
        })
    }

    /// Ego-focal forward pass without recording gradients.
    pub fn forward(&self, scene: &SceneInput) -> Result<PolicyOutput, LearnError> {
        self.forward_agent(scene, 0)
    }

    pub fn forward_agent(&self, scene: &SceneInput, agent: usize) -> Result<PolicyOutput, LearnError> {
        let mut g = Graph::new();
        let ctx = Ctx::new(&self.store);
        let enc = self.encode_scene(&mut g, ctx, scene)?;
        let v = self.decode_modes(&mut g, ctx, scene, &enc, agent)?;
        Ok(PolicyOutput::from_graph(&g, &v))
    }

    /// The most probable refined ego mode, in world coordinates.
    pub fn select_action(&self, scene: &SceneInput) -> Result<TrajectoryAction, LearnError> {
        let out = self.forward(scene)?;
        Ok(self.to_world(scene, 0, &out.refined_loc[out.best_mode()]))
    }

    pub fn to_world(&self, scene: &SceneInput, agent: usize, local: &[Point]) -> TrajectoryAction {
        let s = scene.current(agent);
        TrajectoryAction::from_local(local, s.position, s.heading)
    }

    pub fn to_local(&self, scene: &SceneInput, agent: usize, action: &TrajectoryAction) -> Vec<Point> {
        let s = scene.current(agent);
        action.to_local(s.position, s.heading)
    }

    /// Sum of per-agent losses; `targets` pairs agent indices with world-frame
    /// futures. Only the ego entry is needed without multi-agent supervision.
    pub fn il_loss(
        &self,
        g: &mut Graph,
        ctx: Ctx,
        scene: &SceneInput,
        targets: &[(usize, TrajectoryAction)],
    ) -> Result<(Var, Vec<IlTerms>), LearnError> {
        let enc = self.encode_scene(g, ctx, scene)?;
        self.il_loss_encoded(g, ctx, scene, &enc, targets)
    }

    pub fn il_loss_encoded(
        &self,
        g: &mut Graph,
        ctx: Ctx,
        scene: &SceneInput,
        enc: &Encoded,
        targets: &[(usize, TrajectoryAction)],
    ) -> Result<(Var, Vec<IlTerms>), LearnError> {
        let mut terms = Vec::with_capacity(targets.len());
        let mut total: Option<Var> = None;
        for (agent, fut) in targets {
            let v = self.decode_modes(g, ctx, scene, enc, *agent)?;
            let t = il_terms(g, &v, &self.to_local(scene, *agent, fut))?;
            total = Some(match total {
                Some(acc) => g.add(acc, t.total)?,
                None => t.total,
            });
            terms.push(t);
        }
        let total = total.ok_or_else(|| LearnError::Input("no imitation targets".into()))?;
        Ok((total, terms))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ritp_core::scenario_gen::{generate_synthetic_scenario, ScenarioKind};

    fn scene() -> SceneInput {
        let sc = generate_synthetic_scenario(ScenarioKind::StraightFollow, 3);
        SceneInput::from_log(&sc, 20, 10).unwrap()
    }

    #[test]
    fn argmax_ties_go_low() {
        assert_eq!(argmax_first(&[0.1, 0.7, 0.2]), 1);
        assert_eq!(argmax_first(&[0.5, 0.5]), 0);
    }

    #[test]
    fn output_contract() {
        let p = MotionFormer::new(PolicyConfig::desk(), 1);
        let out = p.forward(&scene()).unwrap();
        assert_eq!(out.rho.len(), 3);
        assert!((out.rho.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        for m in 0..3 {
            assert_eq!(out.refined_loc[m].len(), 20);
            assert!(out.proposal_scale[m].iter().chain(&out.refined_scale[m]).all(|s| s[0] >= SCALE_FLOOR && s[1] >= SCALE_FLOOR));
        }
        for a in 0..3 {
            for b in a + 1..3 {
                assert!(geometry::dist(out.refined_loc[a][19], out.refined_loc[b][19]) > 1e-3);
            }
        }
    }

    #[test]
    fn single_mode_zero_residual() {
        let mut g = Graph::new();
        let loc = g.input(Tensor::zeros(1, 4));
        let scale = g.input(Tensor::filled(1, 4, 1.0));
        let logits = g.input(Tensor::scalar(0.3));
        let rho = g.softmax_rows(logits);
        let v = ModeVars {
            proposal_loc: loc,
            proposal_scale: scale,
            refined_loc: loc,
            refined_scale: scale,
            logits,
            rho,
        };
        let t = il_terms(&mut g, &v, &[[0.0, 0.0], [0.0, 0.0]]).unwrap();
        let l2 = 2.0 * 2f64.ln();
        for x in [t.classification, t.proposal, t.refinement] {
            assert!((g.value(x).item() - l2).abs() < 1e-12);
        }
        assert!((g.value(t.total).item() - 3.0 * l2).abs() < 1e-12);
    }

    #[test]
    fn history_length_checked() {
        let p = MotionFormer::new(PolicyConfig::desk(), 1);
        let sc = generate_synthetic_scenario(ScenarioKind::StraightFollow, 3);
        let s = SceneInput::from_log(&sc, 20, 5).unwrap();
        assert!(p.forward(&s).is_err());
    }
}
