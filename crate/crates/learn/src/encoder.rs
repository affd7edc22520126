//! Shared scene encoder: Fourier token embeddings followed by relative
//! attention over map points, polygons, agent histories and neighbors.

use rand_chacha::ChaCha8Rng;

use crate::features::{
    map_map_edges, map_point_edges, point_features, polygon_features, PolygonInput, SceneInput, SnapshotBatch,
    AGENT_KINDS, DESC_FEATURES, POLYGON_FEATURES,
};
use crate::nn::{AttentionBlock, Ctx, Edges, FourierEmbedding, Graph, Linear, ParamStore, Tensor, Var};
use crate::LearnError;

type R = Result<Var, LearnError>;

#[derive(Debug, Clone)]
pub struct SceneEncoder {
    pub dim: usize,
    agent_embed: FourierEmbedding,
    kind_embed: Linear,
    point_embed: FourierEmbedding,
    point_class: Linear,
    polygon_class: Linear,
    map_points: AttentionBlock,
    map_map: AttentionBlock,
    temporal: Option<AttentionBlock>,
    agent_map: AttentionBlock,
    agent_agent: AttentionBlock,
}

/// `map: [M, D]` polygon tokens and `agents: [N, D]` agent tokens.
#[derive(Debug, Clone, Copy)]
pub struct Encoded {
    pub map: Var,
    pub agents: Var,
}

impl SceneEncoder {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        heads: usize,
        bands: usize,
        temporal: bool,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let block = |store: &mut ParamStore, part: &str, rng: &mut ChaCha8Rng| {
            AttentionBlock::new(store, &format!("{name}.{part}"), dim, heads, bands, rng)
        };
        Self {
            dim,
            agent_embed: FourierEmbedding::new(store, &format!("{name}.agent"), DESC_FEATURES, bands, dim, rng),
            kind_embed: Linear::new(store, &format!("{name}.kind"), AGENT_KINDS, dim, false, rng),
            point_embed: FourierEmbedding::new(store, &format!("{name}.point"), 1, bands, dim, rng),
            point_class: Linear::new(store, &format!("{name}.point_class"), POLYGON_FEATURES, dim, false, rng),
            polygon_class: Linear::new(store, &format!("{name}.polygon_class"), POLYGON_FEATURES, dim, true, rng),
            map_points: block(store, "map_points", rng),
            map_map: block(store, "map_map", rng),
            temporal: temporal.then(|| block(store, "temporal", rng)),
            agent_map: block(store, "agent_map", rng),
            agent_agent: block(store, "agent_agent", rng),
        }
    }

    pub fn has_temporal(&self) -> bool {
        self.temporal.is_some()
    }

    pub fn encode_map(&self, g: &mut Graph, ctx: Ctx, polygons: &[PolygonInput]) -> R {
        if polygons.is_empty() {
            return Ok(g.input(Tensor::zeros(0, self.dim)));
        }
        let pc = g.input(polygon_features(polygons));
        let m = self.polygon_class.forward(g, ctx, pc)?;
        let (seg, cls) = point_features(polygons);
        let seg = g.input(seg);
        let cls = g.input(cls);
        let pe = self.point_embed.forward(g, ctx, seg)?;
        let pcl = self.point_class.forward(g, ctx, cls)?;
        let pts = g.add(pe, pcl)?;
        let m = self.map_points.forward(g, ctx, m, pts, &map_point_edges(polygons))?;
        Ok(self.map_map.forward(g, ctx, m, m, &map_map_edges(polygons))?)
    }

    /// Agent tokens from `[N, 10]` descriptor and kind features.
    pub fn encode_agents(
        &self,
        g: &mut Graph,
        ctx: Ctx,
        features: Tensor,
        temporal: Option<&Edges>,
        map: Var,
        agent_map: &Edges,
        agent_agent: &Edges,
    ) -> R {
        let x = g.input(features);
        let desc = g.slice_cols(x, 0, DESC_FEATURES)?;
        let kind = g.slice_cols(x, DESC_FEATURES, AGENT_KINDS)?;
        let e = self.agent_embed.forward(g, ctx, desc)?;
        let k = self.kind_embed.forward(g, ctx, kind)?;
        let mut a = g.add(e, k)?;
        if let (Some(block), Some(edges)) = (&self.temporal, temporal) {
            a = block.forward(g, ctx, a, a, edges)?;
        }
        if g.shape(map)[0] > 0 {
            a = self.agent_map.forward(g, ctx, a, map, agent_map)?;
        }
        Ok(self.agent_agent.forward(g, ctx, a, a, agent_agent)?)
    }

    /// Agent rows are `a·T + t`.
    pub fn encode(&self, g: &mut Graph, ctx: Ctx, scene: &SceneInput) -> Result<Encoded, LearnError> {
        if scene.agents.is_empty() {
            return Err(crate::features::FeatureError::NoAgents.into());
        }
        let map = self.encode_map(g, ctx, &scene.polygons)?;
        let temporal = self.temporal.as_ref().map(|_| scene.temporal_edges());
        let agents = self.encode_agents(
            g,
            ctx,
            scene.agent_features(),
            temporal.as_ref(),
            map,
            &scene.agent_map_edges(),
            &scene.agent_agent_edges(),
        )?;
        Ok(Encoded { map, agents })
    }

    /// Snapshot tokens over an already encoded map; no temporal step.
    pub fn encode_snapshots(
        &self,
        g: &mut Graph,
        ctx: Ctx,
        polygons: &[PolygonInput],
        map: Var,
        batch: &SnapshotBatch,
    ) -> Result<Encoded, LearnError> {
        if batch.snapshots.iter().any(|s| s.agents.is_empty()) {
            return Err(crate::features::FeatureError::NoAgents.into());
        }
        let agents = self.encode_agents(
            g,
            ctx,
            batch.agent_features(),
            None,
            map,
            &batch.agent_map_edges(polygons),
            &batch.agent_agent_edges(),
        )?;
        Ok(Encoded { map, agents })
    }

    pub fn linears(&self) -> Vec<&Linear> {
        let mut v: Vec<&Linear> = self.agent_embed.linears().collect();
        v.push(&self.kind_embed);
        v.extend(self.point_embed.linears());
        v.push(&self.point_class);
        v.push(&self.polygon_class);
        for b in [&self.map_points, &self.map_map, &self.agent_map, &self.agent_agent] {
            v.extend(b.linears());
        }
        if let Some(t) = &self.temporal {
            v.extend(t.linears());
        }
        v
    }
}
