//! Action-value network: an embedded, GRU-summarized trajectory that reads
//! the ego history, nearby polygons and nearby agents.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use ritp_core::trajectory::TrajectoryAction;

use crate::encoder::Encoded;
use crate::features::{replicate, SceneInput};
use crate::motionformer::{MotionFormer, PolicyConfig};
use crate::nn::{AttentionBlock, Ctx, FourierEmbedding, Graph, Gru, Mlp, ParamStore, Tensor, Var};
use crate::LearnError;

/// Scale applied to ego-frame positions before embedding.
const POSITION_SCALE: f64 = 0.1;

#[derive(Debug, Clone)]
pub struct CriticFormer {
    pub plan_steps: usize,
    pub store: ParamStore,
    action_embed: FourierEmbedding,
    gru: Gru,
    history: AttentionBlock,
    map: AttentionBlock,
    agents: AttentionBlock,
    head: Mlp,
}

/// Step-major ego-frame points `[T_p·B, 2]`, row `j·B + b`.
pub fn actions_tensor(scene: &SceneInput, actions: &[TrajectoryAction]) -> Tensor {
    let s = scene.current(0);
    let local: Vec<Vec<_>> = actions.iter().map(|a| a.to_local(s.position, s.heading)).collect();
    let steps = local.first().map_or(0, |l| l.len());
    let mut data = Vec::with_capacity(steps * actions.len() * 2);
    for j in 0..steps {
        for l in &local {
            data.extend(l[j]);
        }
    }
    Tensor {
        shape: [steps * actions.len(), 2],
        data,
    }
}

pub fn detach_encoded(g: &mut Graph, enc: &Encoded) -> Encoded {
    Encoded {
        map: g.detach(enc.map),
        agents: g.detach(enc.agents),
    }
}

/// `r` at terminal transitions, else `r + γ·min(Q₁′, Q₂′)`.
pub fn td_target(reward: f64, gamma: f64, q1: f64, q2: f64, terminal: bool) -> f64 {
    if terminal {
        reward
    } else {
        reward + gamma * q1.min(q2)
    }
}

impl CriticFormer {
    pub fn new(config: &PolicyConfig, name: &str, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let (d, h, b) = (config.dim, config.heads, config.bands);
        Self {
            plan_steps: config.plan_steps,
            action_embed: FourierEmbedding::new(&mut store, &format!("{name}.action"), 4, b, d, &mut rng),
            gru: Gru::new(&mut store, &format!("{name}.gru"), d, d, &mut rng),
            history: AttentionBlock::new(&mut store, &format!("{name}.hist"), d, h, b, &mut rng),
            map: AttentionBlock::new(&mut store, &format!("{name}.map"), d, h, b, &mut rng),
            agents: AttentionBlock::new(&mut store, &format!("{name}.agents"), d, h, b, &mut rng),
            head: Mlp::new(&mut store, &format!("{name}.head"), &[d, d, 1], &mut rng),
            store,
        }
    }

    /// `[B, 1]` values of `batch` step-major actions (see [`actions_tensor`]).
    pub fn q_values(
        &self,
        g: &mut Graph,
        ctx: Ctx,
        scene: &SceneInput,
        enc: &Encoded,
        actions: Var,
        batch: usize,
    ) -> Result<Var, LearnError> {
        let tp = self.plan_steps;
        if g.shape(actions) != [tp * batch, 2] {
            return Err(LearnError::Input(format!(
                "actions of shape {:?}, expected [{}, 2]",
                g.shape(actions),
                tp * batch
            )));
        }
        let zero = g.input(Tensor::zeros(batch, 2));
        let prev = if tp > 1 {
            let head = g.slice_rows(actions, 0, (tp - 1) * batch)?;
            g.concat_rows(&[zero, head])?
        } else {
            zero
        };
        let step = g.sub(actions, prev)?;
        let pos = g.scale(actions, POSITION_SCALE);
        let feats = g.concat_cols(&[pos, step])?;
        let emb = self.action_embed.forward(g, ctx, feats)?;
        let xs = (0..tp)
            .map(|j| g.slice_rows(emb, j * batch, batch))
            .collect::<Result<Vec<_>, _>>()?;
        let mut q = self.gru.run(g, ctx, &xs)?;
        let fc = scene.focal_context(0);
        q = self.history.forward(g, ctx, q, enc.agents, &replicate(&fc.history, batch))?;
        q = self.map.forward(g, ctx, q, enc.map, &replicate(&fc.map, batch))?;
        q = self.agents.forward(g, ctx, q, enc.agents, &replicate(&fc.agents, batch))?;
        Ok(self.head.forward(g, ctx, q)?)
    }

    /// Values of world-frame actions, reading the scene through `actor`'s encoder.
    pub fn evaluate(
        &self,
        actor: &MotionFormer,
        scene: &SceneInput,
        actions: &[TrajectoryAction],
    ) -> Result<Vec<f64>, LearnError> {
        let mut g = Graph::new();
        let enc = actor.encode_scene(&mut g, Ctx::new(&actor.store), scene)?;
        let enc = detach_encoded(&mut g, &enc);
        let a = g.input(actions_tensor(scene, actions));
        let q = self.q_values(&mut g, Ctx::new(&self.store), scene, &enc, a, actions.len())?;
        Ok(g.value(q).data.clone())
    }
}
