//! Scenario data model, query-centric descriptors and relative positional
//! encodings.
//!
//! Every agent state is described in its own local frame (step length, the
//! angle between heading and motion, speed, the angle between heading and
//! velocity) and every pair of scene elements by a relative encoding
//! (distance, bearing relative to the query heading, heading difference and
//! time gap). Both are invariant to rigid motions of the whole scene.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{self, angle_between, heading_vector, wrap_angle, Point};

/// Simulation period in seconds (10 Hz).
pub const DT: f64 = 0.1;

/// Default number of sample points per map polygon.
pub const DEFAULT_POINTS_PER_POLYGON: usize = 20;

#[derive(Debug, Error)]
pub enum SceneError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("parse error at `{field}`: {message}")]
    Parse { field: String, message: String },
    #[error("invalid scenario: {0}")]
    Invalid(String),
    #[error("unknown scenario kind `{0}`")]
    UnknownKind(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PolygonKind {
    Lane,
    StopLine,
    Crosswalk,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrafficLight {
    Green,
    Red,
    Unknown,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AgentKind {
    Vehicle,
    Pedestrian,
    Cyclist,
    Ego,
}

impl AgentKind {
    pub const ALL: [AgentKind; 4] = [
        AgentKind::Vehicle,
        AgentKind::Pedestrian,
        AgentKind::Cyclist,
        AgentKind::Ego,
    ];

    pub fn index(self) -> usize {
        self as usize
    }
}

impl PolygonKind {
    pub fn index(self) -> usize {
        self as usize
    }
}

impl TrafficLight {
    pub fn index(self) -> usize {
        self as usize
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MapPoint {
    pub x: f64,
    pub y: f64,
    pub orientation: f64,
}

impl MapPoint {
    pub fn position(&self) -> Point {
        [self.x, self.y]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MapPolygon {
    pub id: u32,
    pub semantic: PolygonKind,
    pub traffic_light: TrafficLight,
    /// m/s
    pub speed_limit: f64,
    /// Lateral extent of the element around its sample polyline (m).
    pub width: f64,
    pub points: Vec<MapPoint>,
}

impl MapPolygon {
    pub fn first_pose(&self) -> (Point, f64) {
        let p = self.points[0];
        (p.position(), p.orientation)
    }

    fn bounds(&self) -> [f64; 4] {
        let m = self.width / 2.0;
        self.points.iter().fold(
            [f64::INFINITY, f64::INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY],
            |b, p| [b[0].min(p.x - m), b[1].min(p.y - m), b[2].max(p.x + m), b[3].max(p.y + m)],
        )
    }

    /// Closest point on the sample polyline: (distance, orientation there).
    pub fn closest(&self, p: Point) -> (f64, f64) {
        let mut best = (f64::INFINITY, self.points[0].orientation);
        for w in self.points.windows(2) {
            let (d, t) = geometry::point_segment(p, w[0].position(), w[1].position());
            if d < best.0 {
                let h = w[0].orientation + wrap_angle(w[1].orientation - w[0].orientation) * t;
                best = (d, wrap_angle(h));
            }
        }
        best
    }

    pub fn contains(&self, p: Point) -> bool {
        let b = self.bounds();
        if p[0] < b[0] || p[0] > b[2] || p[1] < b[1] || p[1] > b[3] {
            return false;
        }
        self.closest(p).0 <= self.width / 2.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AgentState {
    pub position: Point,
    pub heading: f64,
    pub velocity: Point,
}

impl AgentState {
    pub fn speed(&self) -> f64 {
        geometry::norm(self.velocity)
    }

    fn is_finite(&self) -> bool {
        self.position.iter().chain(self.velocity.iter()).all(|v| v.is_finite())
            && self.heading.is_finite()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Footprint {
    pub length: f64,
    pub width: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentTrack {
    pub id: u32,
    pub semantic: AgentKind,
    pub footprint: Footprint,
    pub states: Vec<AgentState>,
}

impl AgentTrack {
    pub fn footprint_at(&self, step: usize) -> geometry::OrientedBox {
        let s = self.states[step];
        geometry::OrientedBox::new(
            s.position,
            s.heading,
            self.footprint.length,
            self.footprint.width,
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub id: String,
    pub map_polygons: Vec<MapPolygon>,
    pub agent_tracks: Vec<AgentTrack>,
    pub ego_track: AgentTrack,
    pub route_lane_ids: Vec<u32>,
    pub duration_steps: usize,
}

/// Limits a scenario must satisfy for a given history / planning horizon.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ScenarioLimits {
    pub history_steps: usize,
    pub plan_steps: usize,
    pub points_per_polygon: usize,
}

impl Default for ScenarioLimits {
    fn default() -> Self {
        Self {
            history_steps: 10,
            plan_steps: 20,
            points_per_polygon: DEFAULT_POINTS_PER_POLYGON,
        }
    }
}

impl Scenario {
    pub fn polygon(&self, id: u32) -> Option<&MapPolygon> {
        self.map_polygons.iter().find(|p| p.id == id)
    }

    pub fn lanes(&self) -> impl Iterator<Item = &MapPolygon> {
        self.map_polygons.iter().filter(|p| p.semantic == PolygonKind::Lane)
    }

    /// Whether `p` lies inside any lane corridor.
    pub fn is_drivable(&self, p: Point) -> bool {
        self.lanes().any(|lane| lane.contains(p))
    }

    /// Nearest lane at `p`: (polygon, distance to its polyline, local orientation).
    pub fn nearest_lane(&self, p: Point) -> Option<(&MapPolygon, f64, f64)> {
        self.lanes()
            .map(|lane| {
                let (d, h) = lane.closest(p);
                (lane, d, h)
            })
            .min_by(|a, b| a.1.total_cmp(&b.1))
    }

    /// Speed limit of the nearest lane centerline, `inf` without lanes.
    pub fn speed_limit_at(&self, p: Point) -> f64 {
        self.nearest_lane(p).map_or(f64::INFINITY, |(l, _, _)| l.speed_limit)
    }

    /// Red-light stop lines as (position of the line center, orientation).
    pub fn red_stop_lines(&self) -> Vec<&MapPolygon> {
        self.map_polygons
            .iter()
            .filter(|p| p.semantic == PolygonKind::StopLine && p.traffic_light == TrafficLight::Red)
            .collect()
    }

    pub fn validate(&self, limits: &ScenarioLimits) -> Result<(), SceneError> {
        let need = limits.history_steps + limits.plan_steps;
        if self.duration_steps < need {
            return Err(SceneError::Invalid(format!(
                "duration_steps {} < history + plan horizon {}",
                self.duration_steps, need
            )));
        }
        for poly in &self.map_polygons {
            if poly.points.len() != limits.points_per_polygon {
                return Err(SceneError::Invalid(format!(
                    "polygon {} has {} points, expected {}",
                    poly.id,
                    poly.points.len(),
                    limits.points_per_polygon
                )));
            }
            for w in poly.points.windows(2) {
                if geometry::dist(w[0].position(), w[1].position()) < 1e-9 {
                    return Err(SceneError::Invalid(format!(
                        "polygon {} has coincident consecutive points",
                        poly.id
                    )));
                }
            }
            if !(poly.width > 0.0) || !(poly.speed_limit > 0.0) {
                return Err(SceneError::Invalid(format!(
                    "polygon {} needs positive width and speed limit",
                    poly.id
                )));
            }
        }
        for id in &self.route_lane_ids {
            if self.polygon(*id).is_none() {
                return Err(SceneError::Invalid(format!("route references missing polygon {id}")));
            }
        }
        for track in self.agent_tracks.iter().chain(std::iter::once(&self.ego_track)) {
            if track.states.len() != self.duration_steps {
                return Err(SceneError::Invalid(format!(
                    "track {} has {} states, expected {}",
                    track.id,
                    track.states.len(),
                    self.duration_steps
                )));
            }
            if !(track.footprint.length > 0.0 && track.footprint.width > 0.0) {
                return Err(SceneError::Invalid(format!("track {} footprint not positive", track.id)));
            }
            if !track.states.iter().all(AgentState::is_finite) {
                return Err(SceneError::Invalid(format!("track {} has non-finite states", track.id)));
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("scenario serializes")
    }

    pub fn from_json(text: &str, limits: &ScenarioLimits) -> Result<Self, SceneError> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let scenario: Scenario = serde_path_to_error::deserialize(de).map_err(|e| {
            let field = e.path().to_string();
            let inner = e.into_inner().to_string();
            // Missing keys are reported by their own name rather than the parent path.
            let field = match inner.split('`').nth(1) {
                Some(name) if inner.starts_with("missing field") => {
                    if field == "." {
                        name.to_string()
                    } else {
                        format!("{field}.{name}")
                    }
                }
                _ => field,
            };
            SceneError::Parse { field, message: inner }
        })?;
        scenario.validate(limits)?;
        Ok(scenario)
    }
}

pub fn save_scenario(scenario: &Scenario, path: &Path) -> Result<(), SceneError> {
    fs::write(path, scenario.to_json()).map_err(|source| SceneError::Io {
        path: path.display().to_string(),
        source,
    })
}

pub fn load_scenario(path: &Path, limits: &ScenarioLimits) -> Result<Scenario, SceneError> {
    let text = fs::read_to_string(path).map_err(|source| SceneError::Io {
        path: path.display().to_string(),
        source,
    })?;
    Scenario::from_json(&text, limits)
}

/// Local motion descriptor of one agent at one step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AgentDescriptor {
    pub step_length: f64,
    pub motion_heading_angle: f64,
    pub speed: f64,
    pub velocity_heading_angle: f64,
    pub kind: AgentKind,
}

impl AgentDescriptor {
    pub fn values(&self) -> [f64; 4] {
        [
            self.step_length,
            self.motion_heading_angle,
            self.speed,
            self.velocity_heading_angle,
        ]
    }
}

/// Descriptor from a state and its predecessor (`None` at the start of a
/// track, which yields zero step length and motion angle).
pub fn describe_state(
    state: &AgentState,
    previous: Option<&AgentState>,
    kind: AgentKind,
) -> AgentDescriptor {
    let h = heading_vector(state.heading);
    let (step_length, motion_heading_angle) = match previous {
        Some(prev) => {
            let d = geometry::sub(state.position, prev.position);
            let len = geometry::norm(d);
            if len < 1e-9 {
                (len, 0.0)
            } else {
                (len, angle_between(h, d))
            }
        }
        None => (0.0, 0.0),
    };
    let speed = state.speed();
    let velocity_heading_angle = if speed < 1e-9 { 0.0 } else { angle_between(h, state.velocity) };
    AgentDescriptor {
        step_length,
        motion_heading_angle,
        speed,
        velocity_heading_angle,
        kind,
    }
}

pub fn agent_descriptor(track: &AgentTrack, step: usize) -> AgentDescriptor {
    let prev = step.checked_sub(1).map(|s| &track.states[s]);
    describe_state(&track.states[step], prev, track.semantic)
}

/// Descriptor of a map sample point: the length of the segment reaching it.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MapPointDescriptor {
    pub segment_length: f64,
    pub semantic: PolygonKind,
    pub traffic_light: TrafficLight,
}

pub fn map_point_descriptors(poly: &MapPolygon) -> Vec<MapPointDescriptor> {
    (0..poly.points.len())
        .map(|i| MapPointDescriptor {
            segment_length: if i == 0 {
                0.0
            } else {
                geometry::dist(poly.points[i].position(), poly.points[i - 1].position())
            },
            semantic: poly.semantic,
            traffic_light: poly.traffic_light,
        })
        .collect()
}

/// A spatio-temporal pose: position, heading and absolute step index.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose {
    pub position: Point,
    pub heading: f64,
    pub step: i64,
}

impl Pose {
    pub fn new(position: Point, heading: f64, step: i64) -> Self {
        Self { position, heading, step }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RelPosEncoding {
    pub distance: f64,
    pub bearing_minus_heading: f64,
    pub heading_diff: f64,
    /// Lag of `a` minus lag of `b`, i.e. `step_b - step_a`.
    pub time_gap: f64,
}

impl RelPosEncoding {
    pub fn values(&self) -> [f64; 4] {
        [self.distance, self.bearing_minus_heading, self.heading_diff, self.time_gap]
    }
}

/// Encodes `b` relative to the query pose `a`.
pub fn rel_pos_encoding(a: &Pose, b: &Pose) -> RelPosEncoding {
    let d = geometry::sub(b.position, a.position);
    let distance = geometry::norm(d);
    let bearing_minus_heading = if distance < 1e-12 {
        0.0
    } else {
        wrap_angle(d[1].atan2(d[0]) - a.heading)
    };
    RelPosEncoding {
        distance,
        bearing_minus_heading,
        heading_diff: wrap_angle(b.heading - a.heading),
        time_gap: (b.step - a.step) as f64,
    }
}

/// Encoding used for map elements, which carry no time.
pub fn rel_pos_encoding_static(a: (Point, f64), b: (Point, f64)) -> RelPosEncoding {
    rel_pos_encoding(&Pose::new(a.0, a.1, 0), &Pose::new(b.0, b.1, 0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    fn track(states: Vec<AgentState>) -> AgentTrack {
        AgentTrack {
            id: 1,
            semantic: AgentKind::Vehicle,
            footprint: Footprint { length: 4.5, width: 2.0 },
            states,
        }
    }

    #[test]
    fn aligned_motion_descriptor() {
        let s = |x: f64| AgentState { position: [x, 0.0], heading: 0.0, velocity: [10.0, 0.0] };
        let d = agent_descriptor(&track(vec![s(0.0), s(1.0)]), 1);
        assert_eq!(d.values(), [1.0, 0.0, 10.0, 0.0]);
    }

    #[test]
    fn stationary_descriptor_is_zero() {
        let s = AgentState { position: [2.0, 3.0], heading: 1.3, velocity: [0.0, 0.0] };
        let d = agent_descriptor(&track(vec![s, s]), 1);
        assert_eq!(d.values(), [0.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn lateral_motion_descriptor() {
        let a = AgentState { position: [0.0, 0.0], heading: 0.0, velocity: [0.0, 2.0] };
        let b = AgentState { position: [0.0, 1.0], heading: 0.0, velocity: [0.0, 2.0] };
        let d = agent_descriptor(&track(vec![a, b]), 1);
        let v = d.values();
        assert!((v[0] - 1.0).abs() < 1e-12);
        assert!((v[1] - PI / 2.0).abs() < 1e-12);
        assert!((v[2] - 2.0).abs() < 1e-12);
        assert!((v[3] - PI / 2.0).abs() < 1e-12);
    }

    #[test]
    fn first_step_is_degenerate() {
        let a = AgentState { position: [0.0, 0.0], heading: 0.0, velocity: [3.0, 0.0] };
        let d = agent_descriptor(&track(vec![a]), 0);
        assert_eq!(d.step_length, 0.0);
        assert_eq!(d.motion_heading_angle, 0.0);
        assert_eq!(d.speed, 3.0);
    }

    #[test]
    fn rel_pos_examples() {
        let o = Pose::new([0.0, 0.0], 0.0, 5);
        assert_eq!(rel_pos_encoding(&o, &o).values(), [0.0, 0.0, 0.0, 0.0]);
        let b = Pose::new([1.0, 0.0], 0.4, 5);
        let r = rel_pos_encoding(&o, &b);
        assert_eq!(r.values(), [1.0, 0.0, 0.4, 0.0]);
        let a = Pose::new([0.0, 0.0], PI / 2.0, 3);
        let b = Pose::new([0.0, 1.0], 0.0, 3);
        let r = rel_pos_encoding(&a, &b);
        assert!((r.distance - 1.0).abs() < 1e-12);
        assert!(r.bearing_minus_heading.abs() < 1e-12);
        let past = Pose::new([0.0, 0.0], 0.0, 2);
        assert_eq!(rel_pos_encoding(&o, &past).time_gap, -3.0);
    }
}
