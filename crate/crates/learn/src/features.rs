//! Query-centric scene inputs: per-token local features and per-edge
//! relative encodings, all invariant to rigid motions of the scene.

use ritp_core::frenet::ReferenceLine;
use ritp_core::geometry::{self, Point, Rigid2};
use ritp_core::scene::{
    describe_state, rel_pos_encoding, AgentKind, AgentState, AgentTrack, Footprint, PolygonKind, Pose, Scenario,
    TrafficLight,
};
use ritp_core::sim::Observation;

use crate::nn::{Edges, Tensor};

/// Attention neighborhood radius in meters.
pub const RADIUS: f64 = 50.0;
/// Width of a relative-encoding row after angle expansion.
pub const REL_FEATURES: usize = 6;
/// Width of a descriptor row after angle expansion.
pub const DESC_FEATURES: usize = 6;
pub const AGENT_KINDS: usize = 4;
/// Polygon class one-hot (3 kinds, 3 light states) plus speed limit.
pub const POLYGON_FEATURES: usize = 7;
pub const TIE_TOLERANCE: f64 = 1e-7;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum FeatureError {
    #[error("step {step} leaves fewer than {history} history steps")]
    ShortHistory { step: usize, history: usize },
    #[error("scene has no agents")]
    NoAgents,
}

/// Angles become `(cos, sin)` pairs: `[d, b, h, dt] → [d, cos b, sin b, cos h, sin h, dt]`.
pub fn rel_features(v: [f64; 4]) -> [f64; REL_FEATURES] {
    [v[0], v[1].cos(), v[1].sin(), v[2].cos(), v[2].sin(), v[3]]
}

pub fn rel_tensor(edges: &Edges) -> Tensor {
    Tensor {
        shape: [edges.len(), REL_FEATURES],
        data: edges.rel.iter().flat_map(|r| rel_features(*r)).collect(),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AgentWindow {
    pub id: u32,
    pub kind: AgentKind,
    pub footprint: Footprint,
    pub states: Vec<AgentState>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PolygonInput {
    pub semantic: PolygonKind,
    pub light: TrafficLight,
    pub speed_limit: f64,
    pub points: Vec<(Point, f64)>,
}

impl PolygonInput {
    pub fn pose(&self) -> (Point, f64) {
        self.points[self.points.len() / 2]
    }

    pub fn class_features(&self) -> [f64; POLYGON_FEATURES] {
        let mut f = [0.0; POLYGON_FEATURES];
        f[self.semantic.index()] = 1.0;
        f[3 + self.light.index()] = 1.0;
        f[6] = self.speed_limit / 10.0;
        f
    }

    /// Index and distance of the sample point nearest to `p`. Points within
    /// `TIE_TOLERANCE` of the minimum count as tied and the lowest index wins,
    /// so round-off from a change of frame cannot flip the choice.
    pub fn nearest_point(&self, p: Point) -> (usize, f64) {
        let d: Vec<f64> = self.points.iter().map(|(q, _)| geometry::dist(p, *q)).collect();
        let min = d.iter().copied().fold(f64::INFINITY, f64::min);
        d.iter()
            .position(|x| *x <= min + TIE_TOLERANCE)
            .map_or((0, f64::INFINITY), |i| (i, d[i]))
    }
}

/// A history window ending at `step`, agent 0 being the focal (ego) agent.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneInput {
    pub step: i64,
    pub agents: Vec<AgentWindow>,
    pub polygons: Vec<PolygonInput>,
    /// Indices of the ego route's lanes in `polygons`, in route order.
    pub route: Vec<usize>,
}

pub fn route_indices(scenario: &Scenario) -> Vec<usize> {
    scenario
        .route_lane_ids
        .iter()
        .filter_map(|id| scenario.map_polygons.iter().position(|p| p.id == *id))
        .collect()
}

fn window(track: &AgentTrack, step: usize, history: usize) -> AgentWindow {
    AgentWindow {
        id: track.id,
        kind: track.semantic,
        footprint: track.footprint,
        states: track.states[step + 1 - history..=step].to_vec(),
    }
}

pub fn polygons_of(scenario: &Scenario) -> Vec<PolygonInput> {
    scenario
        .map_polygons
        .iter()
        .map(|p| PolygonInput {
            semantic: p.semantic,
            light: p.traffic_light,
            speed_limit: p.speed_limit,
            points: p.points.iter().map(|q| (q.position(), q.orientation)).collect(),
        })
        .collect()
}

impl SceneInput {
    /// Logged window for every agent.
    pub fn from_log(scenario: &Scenario, step: usize, history: usize) -> Result<Self, FeatureError> {
        if step + 1 < history || step >= scenario.duration_steps {
            return Err(FeatureError::ShortHistory { step, history });
        }
        let mut agents = vec![window(&scenario.ego_track, step, history)];
        agents.extend(scenario.agent_tracks.iter().map(|t| window(t, step, history)));
        Ok(Self {
            step: step as i64,
            agents,
            polygons: polygons_of(scenario),
            route: route_indices(scenario),
        })
    }

    /// Simulated ego history with logged agents.
    pub fn from_ego_window(scenario: &Scenario, step: usize, ego: &[AgentState]) -> Result<Self, FeatureError> {
        let mut s = Self::from_log(scenario, step, ego.len())?;
        s.agents[0].states = ego.to_vec();
        Ok(s)
    }

    pub fn from_observation(obs: &Observation) -> Self {
        let mut agents = vec![AgentWindow {
            id: obs.ego_history.id,
            kind: obs.ego_history.semantic,
            footprint: obs.ego_history.footprint,
            states: obs.ego_history.states.clone(),
        }];
        agents.extend(obs.agents.iter().map(|t| AgentWindow {
            id: t.id,
            kind: t.semantic,
            footprint: t.footprint,
            states: t.states.clone(),
        }));
        Self {
            step: obs.step as i64,
            agents,
            polygons: polygons_of(obs.scenario),
            route: route_indices(obs.scenario),
        }
    }

    pub fn history(&self) -> usize {
        self.agents[0].states.len()
    }

    pub fn current(&self, agent: usize) -> &AgentState {
        self.agents[agent].states.last().expect("non-empty window")
    }

    /// Pose of agent `a` at window index `t`.
    pub fn pose(&self, a: usize, t: usize) -> Pose {
        let s = &self.agents[a].states[t];
        Pose::new(s.position, s.heading, self.step - (self.history() - 1 - t) as i64)
    }

    pub fn current_pose(&self, a: usize) -> Pose {
        self.pose(a, self.history() - 1)
    }

    pub fn transformed(&self, tf: &Rigid2) -> Self {
        let mv = |s: &AgentState| transform_state(s, tf);
        Self {
            step: self.step,
            agents: self
                .agents
                .iter()
                .map(|a| AgentWindow {
                    states: a.states.iter().map(mv).collect(),
                    ..a.clone()
                })
                .collect(),
            polygons: self
                .polygons
                .iter()
                .map(|p| PolygonInput {
                    points: p.points.iter().map(|(q, h)| (tf.apply(*q), tf.apply_heading(*h))).collect(),
                    ..p.clone()
                })
                .collect(),
            route: self.route.clone(),
        }
    }

    /// Centerline through the route lanes, if any.
    pub fn route_line(&self) -> Option<ReferenceLine> {
        let pts: Vec<Point> = self.route.iter().flat_map(|i| self.polygons[*i].points.iter().map(|(p, _)| *p)).collect();
        ReferenceLine::from_polyline(&pts).ok()
    }

    /// `[A·T, 6 + 4]` descriptor and kind features, row `a·T + t`.
    pub fn agent_features(&self) -> Tensor {
        let t_len = self.history();
        let mut data = Vec::with_capacity(self.agents.len() * t_len * (DESC_FEATURES + AGENT_KINDS));
        for a in &self.agents {
            for t in 0..t_len {
                let prev = t.checked_sub(1).map(|p| &a.states[p]);
                let d = describe_state(&a.states[t], prev, a.kind);
                data.extend(descriptor_features(d.values()));
                data.extend(kind_one_hot(a.kind));
            }
        }
        Tensor {
            shape: [self.agents.len() * t_len, DESC_FEATURES + AGENT_KINDS],
            data,
        }
    }

    /// `(a, t)` ← `(a, t')` for `t' ≤ t`.
    pub fn temporal_edges(&self) -> Edges {
        let t_len = self.history();
        let mut e = Edges::default();
        for a in 0..self.agents.len() {
            for t in 0..t_len {
                let q = self.pose(a, t);
                for tp in 0..=t {
                    e.push(a * t_len + t, a * t_len + tp, rel_pos_encoding(&q, &self.pose(a, tp)).values());
                }
            }
        }
        e
    }

    /// `(a, t)` ← polygons within the radius.
    pub fn agent_map_edges(&self) -> Edges {
        let t_len = self.history();
        let mut e = Edges::default();
        for a in 0..self.agents.len() {
            for t in 0..t_len {
                let q = self.pose(a, t);
                for m in 0..self.polygons.len() {
                    if let Some(r) = polygon_rel(&self.polygons, &q, m) {
                        e.push(a * t_len + t, m, r);
                    }
                }
            }
        }
        e
    }

    /// `(a, t)` ← `(b, t)` for other agents within the radius.
    pub fn agent_agent_edges(&self) -> Edges {
        let t_len = self.history();
        let mut e = Edges::default();
        for t in 0..t_len {
            for a in 0..self.agents.len() {
                let q = self.pose(a, t);
                for b in 0..self.agents.len() {
                    if b == a {
                        continue;
                    }
                    let p = self.pose(b, t);
                    if geometry::dist(q.position, p.position) <= RADIUS {
                        e.push(a * t_len + t, b * t_len + t, rel_pos_encoding(&q, &p).values());
                    }
                }
            }
        }
        e
    }

    /// Context of a query anchored at agent `a`'s current pose: its own
    /// history tokens, nearby polygons and nearby agents' current tokens.
    pub fn focal_context(&self, a: usize) -> FocalContext {
        let t_len = self.history();
        let q = self.current_pose(a);
        let history = (0..t_len)
            .map(|t| (a * t_len + t, rel_pos_encoding(&q, &self.pose(a, t)).values()))
            .collect();
        let map = (0..self.polygons.len())
            .filter_map(|m| polygon_rel(&self.polygons, &q, m).map(|r| (m, r)))
            .collect();
        let agents = (0..self.agents.len())
            .filter(|b| *b != a)
            .filter_map(|b| {
                let p = self.current_pose(b);
                (geometry::dist(q.position, p.position) <= RADIUS)
                    .then(|| (b * t_len + t_len - 1, rel_pos_encoding(&q, &p).values()))
            })
            .collect();
        FocalContext { history, map, agents }
    }
}

pub fn descriptor_features(v: [f64; 4]) -> [f64; DESC_FEATURES] {
    [v[0], v[1].cos(), v[1].sin(), v[2], v[3].cos(), v[3].sin()]
}

pub fn polygon_features(polygons: &[PolygonInput]) -> Tensor {
    Tensor {
        shape: [polygons.len(), POLYGON_FEATURES],
        data: polygons.iter().flat_map(|p| p.class_features()).collect(),
    }
}

/// `[M·P, 1]` segment lengths and `[M·P, 7]` owning-polygon classes.
pub fn point_features(polygons: &[PolygonInput]) -> (Tensor, Tensor) {
    let mut seg = Vec::new();
    let mut cls = Vec::new();
    for p in polygons {
        for i in 0..p.points.len() {
            seg.push(if i == 0 { 0.0 } else { geometry::dist(p.points[i].0, p.points[i - 1].0) });
            cls.extend(p.class_features());
        }
    }
    let n = seg.len();
    (
        Tensor { shape: [n, 1], data: seg },
        Tensor {
            shape: [n, POLYGON_FEATURES],
            data: cls,
        },
    )
}

/// Polygon ← its own sample points.
pub fn map_point_edges(polygons: &[PolygonInput]) -> Edges {
    let mut e = Edges::default();
    let mut off = 0;
    for (m, p) in polygons.iter().enumerate() {
        let (c, h) = p.pose();
        let pc = Pose::new(c, h, 0);
        for (i, (q, hq)) in p.points.iter().enumerate() {
            e.push(m, off + i, rel_pos_encoding(&pc, &Pose::new(*q, *hq, 0)).values());
        }
        off += p.points.len();
    }
    e
}

/// Polygon ← every other polygon.
pub fn map_map_edges(polygons: &[PolygonInput]) -> Edges {
    let mut e = Edges::default();
    for (m, p) in polygons.iter().enumerate() {
        let (c, h) = p.pose();
        for (n, q) in polygons.iter().enumerate() {
            if n != m {
                let (cq, hq) = q.pose();
                e.push(m, n, rel_pos_encoding(&Pose::new(c, h, 0), &Pose::new(cq, hq, 0)).values());
            }
        }
    }
    e
}

/// Relative encoding of polygon `m` seen from `pose`, through the polygon
/// sample point nearest to it, when within the radius.
pub fn polygon_rel(polygons: &[PolygonInput], pose: &Pose, m: usize) -> Option<[f64; 4]> {
    let p = &polygons[m];
    let (i, d) = p.nearest_point(pose.position);
    (d <= RADIUS).then(|| {
        let (q, h) = p.points[i];
        rel_pos_encoding(pose, &Pose::new(q, h, pose.step)).values()
    })
}

pub fn kind_one_hot(kind: AgentKind) -> [f64; AGENT_KINDS] {
    let mut k = [0.0; AGENT_KINDS];
    k[kind.index()] = 1.0;
    k
}

/// One agent at one instant, with its predecessor state for the motion part
/// of the descriptor.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SnapshotAgent {
    pub kind: AgentKind,
    pub state: AgentState,
    pub prev: Option<AgentState>,
}

/// All agents at one instant, agent 0 being the ego.
#[derive(Debug, Clone, PartialEq)]
pub struct Snapshot {
    pub step: i64,
    pub agents: Vec<SnapshotAgent>,
}

impl Snapshot {
    pub fn pose(&self, a: usize) -> Pose {
        let s = &self.agents[a].state;
        Pose::new(s.position, s.heading, self.step)
    }

    pub fn transformed(&self, tf: &Rigid2) -> Self {
        Self {
            step: self.step,
            agents: self
                .agents
                .iter()
                .map(|a| SnapshotAgent {
                    kind: a.kind,
                    state: transform_state(&a.state, tf),
                    prev: a.prev.as_ref().map(|p| transform_state(p, tf)),
                })
                .collect(),
        }
    }
}

pub fn transform_state(s: &AgentState, tf: &Rigid2) -> AgentState {
    AgentState {
        position: tf.apply(s.position),
        heading: tf.apply_heading(s.heading),
        velocity: tf.apply_vector(s.velocity),
    }
}

/// Disjoint snapshots over one shared map, flattened for a single pass.
#[derive(Debug, Clone, PartialEq)]
pub struct SnapshotBatch {
    pub snapshots: Vec<Snapshot>,
}

impl SnapshotBatch {
    /// First token row of each snapshot, where its ego sits.
    pub fn offsets(&self) -> Vec<usize> {
        let mut acc = 0;
        self.snapshots
            .iter()
            .map(|s| {
                let o = acc;
                acc += s.agents.len();
                o
            })
            .collect()
    }

    pub fn tokens(&self) -> usize {
        self.snapshots.iter().map(|s| s.agents.len()).sum()
    }

    pub fn agent_features(&self) -> Tensor {
        let mut data = Vec::with_capacity(self.tokens() * (DESC_FEATURES + AGENT_KINDS));
        for s in &self.snapshots {
            for a in &s.agents {
                data.extend(descriptor_features(describe_state(&a.state, a.prev.as_ref(), a.kind).values()));
                data.extend(kind_one_hot(a.kind));
            }
        }
        Tensor {
            shape: [self.tokens(), DESC_FEATURES + AGENT_KINDS],
            data,
        }
    }

    pub fn agent_map_edges(&self, polygons: &[PolygonInput]) -> Edges {
        let mut e = Edges::default();
        for (s, off) in self.snapshots.iter().zip(self.offsets()) {
            for a in 0..s.agents.len() {
                let q = s.pose(a);
                for m in 0..polygons.len() {
                    if let Some(r) = polygon_rel(polygons, &q, m) {
                        e.push(off + a, m, r);
                    }
                }
            }
        }
        e
    }

    pub fn agent_agent_edges(&self) -> Edges {
        let mut e = Edges::default();
        for (s, off) in self.snapshots.iter().zip(self.offsets()) {
            for a in 0..s.agents.len() {
                let q = s.pose(a);
                for b in 0..s.agents.len() {
                    let p = s.pose(b);
                    if b != a && geometry::dist(q.position, p.position) <= RADIUS {
                        e.push(off + a, off + b, rel_pos_encoding(&q, &p).values());
                    }
                }
            }
        }
        e
    }
}

/// Source lists shared by every query anchored at one agent.
#[derive(Debug, Clone, PartialEq)]
pub struct FocalContext {
    pub history: Vec<(usize, [f64; 4])>,
    pub map: Vec<(usize, [f64; 4])>,
    pub agents: Vec<(usize, [f64; 4])>,
}

/// The same sources for each of `n` queries.
pub fn replicate(sources: &[(usize, [f64; 4])], n: usize) -> Edges {
    let mut e = Edges::default();
    for q in 0..n {
        for (s, r) in sources {
            e.push(q, *s, *r);
        }
    }
    e
}

/// Logged positions after `step` for `len` steps, when the log is long enough.
pub fn log_future(track: &AgentTrack, step: usize, len: usize) -> Option<Vec<Point>> {
    (step + len < track.states.len()).then(|| track.states[step + 1..=step + len].iter().map(|s| s.position).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use ritp_core::scenario_gen::{generate_synthetic_scenario, ScenarioKind};

    #[test]
    fn window_shapes() {
        let sc = generate_synthetic_scenario(ScenarioKind::StraightFollow, 1);
        let s = SceneInput::from_log(&sc, 9, 10).unwrap();
        assert_eq!(s.history(), 10);
        let n = s.agents.len();
        assert_eq!(s.agent_features().shape, [n * 10, 10]);
        assert_eq!(s.temporal_edges().len(), n * 55);
        assert!(SceneInput::from_log(&sc, 8, 10).is_err());
        assert_eq!(s.current_pose(0).step, 9);
        assert_eq!(s.pose(0, 0).step, 0);
    }

    #[test]
    fn rigid_motion_keeps_features() {
        let sc = generate_synthetic_scenario(ScenarioKind::UnprotectedTurn, 2);
        let s = SceneInput::from_log(&sc, 30, 10).unwrap();
        let t = s.transformed(&Rigid2::new(2.1, [-40.0, 13.0]));
        let close = |a: &Tensor, b: &Tensor| a.data.iter().zip(&b.data).all(|(x, y)| (x - y).abs() < 1e-9);
        assert!(close(&s.agent_features(), &t.agent_features()));
        for (a, b) in [
            (s.temporal_edges(), t.temporal_edges()),
            (s.agent_map_edges(), t.agent_map_edges()),
            (s.agent_agent_edges(), t.agent_agent_edges()),
            (map_point_edges(&s.polygons), map_point_edges(&t.polygons)),
            (map_map_edges(&s.polygons), map_map_edges(&t.polygons)),
        ] {
            assert_eq!(a.dst, b.dst);
            assert_eq!(a.src, b.src);
            assert!(close(&rel_tensor(&a), &rel_tensor(&b)));
        }
    }

    #[test]
    fn far_agents_leave_focal_context() {
        let sc = generate_synthetic_scenario(ScenarioKind::StraightFollow, 1);
        let mut s = SceneInput::from_log(&sc, 20, 10).unwrap();
        let before = s.focal_context(0);
        let mut far = s.agents[0].clone();
        for st in &mut far.states {
            st.position[0] += 500.0;
        }
        s.agents.push(far);
        assert_eq!(s.focal_context(0), before);
    }
}
