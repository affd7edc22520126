//! Synthetic urban scenarios with rule-generated expert demonstrations.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::frenet::ReferenceLine;
use crate::geometry::{self, Point};
use crate::idm::{idm_accel, IdmParams};
use crate::scene::{
    AgentKind, AgentState, AgentTrack, Footprint, MapPoint, MapPolygon, PolygonKind, Scenario, SceneError,
    TrafficLight, DEFAULT_POINTS_PER_POLYGON, DT,
};

pub const SCENARIO_STEPS: usize = 150;
pub const LANE_WIDTH: f64 = 3.5;
pub const EGO_FOOTPRINT: Footprint = Footprint { length: 4.8, width: 2.0 };
const CAR: Footprint = Footprint { length: 4.6, width: 1.9 };

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScenarioKind {
    StraightFollow,
    StopAtIntersection,
    LaneChange,
    UnprotectedTurn,
}

impl ScenarioKind {
    pub const ALL: [ScenarioKind; 4] = [
        ScenarioKind::StraightFollow,
        ScenarioKind::StopAtIntersection,
        ScenarioKind::LaneChange,
        ScenarioKind::UnprotectedTurn,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ScenarioKind::StraightFollow => "straight_follow",
            ScenarioKind::StopAtIntersection => "stop_at_intersection",
            ScenarioKind::LaneChange => "lane_change",
            ScenarioKind::UnprotectedTurn => "unprotected_turn",
        }
    }

    /// Kind encoded in a generated scenario id.
    pub fn of_id(id: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| id.starts_with(k.name()))
    }
}

impl fmt::Display for ScenarioKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ScenarioKind {
    type Err = SceneError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| SceneError::UnknownKind(s.to_string()))
    }
}

fn lane_polygon(id: u32, kind: PolygonKind, light: TrafficLight, limit: f64, width: f64, path: &[Point]) -> MapPolygon {
    let line = ReferenceLine::with_resolution(path, 0.25).expect("generator paths are non-degenerate");
    let n = DEFAULT_POINTS_PER_POLYGON;
    let points = (0..n)
        .map(|i| {
            let s = line.length() * i as f64 / (n - 1) as f64;
            let (p, h) = line.pose_at(s);
            MapPoint { x: p[0], y: p[1], orientation: h }
        })
        .collect();
    MapPolygon {
        id,
        semantic: kind,
        traffic_light: light,
        speed_limit: limit,
        width,
        points,
    }
}

fn straight(from: Point, to: Point) -> Vec<Point> {
    vec![from, to]
}

fn arc(center: Point, radius: f64, start: f64, sweep: f64) -> Vec<Point> {
    (0..=64)
        .map(|i| {
            let a = start + sweep * i as f64 / 64.0;
            [center[0] + radius * a.cos(), center[1] + radius * a.sin()]
        })
        .collect()
}

/// Track from positions, with velocity by finite differences and heading
/// following the motion (held when nearly stationary).
fn track_from_positions(id: u32, kind: AgentKind, footprint: Footprint, pos: &[Point], heading0: f64) -> AgentTrack {
    let n = pos.len();
    let mut states = Vec::with_capacity(n);
    let mut heading = heading0;
    for k in 0..n {
        let (a, b) = (k.saturating_sub(1), (k + 1).min(n - 1));
        let v = geometry::scale(geometry::sub(pos[b], pos[a]), 1.0 / ((b - a) as f64 * DT));
        if geometry::norm(v) > 0.05 {
            heading = v[1].atan2(v[0]);
        }
        states.push(AgentState {
            position: pos[k],
            heading,
            velocity: v,
        });
    }
    AgentTrack {
        id,
        semantic: kind,
        footprint,
        states,
    }
}

/// Positions along `line` for per-step stations and lateral offsets.
fn along(line: &ReferenceLine, s: &[f64], l: &[f64]) -> Vec<Point> {
    s.iter()
        .zip(l)
        .map(|(s, l)| line.to_cartesian(crate::frenet::FrenetPose::new(*s, *l)).0)
        .collect()
}

/// Leader seen by a follower at station `s`: (bumper gap, leader speed).
type LeaderFn<'a> = dyn Fn(usize, f64) -> Option<(f64, f64)> + 'a;

/// Integrates IDM along a path for `SCENARIO_STEPS` steps.
fn idm_profile(s0: f64, v0: f64, params: &IdmParams, limit: &dyn Fn(f64) -> f64, leader: &LeaderFn) -> Vec<f64> {
    let mut s = s0;
    let mut v = v0;
    let mut out = Vec::with_capacity(SCENARIO_STEPS);
    for k in 0..SCENARIO_STEPS {
        out.push(s);
        let p = params.with_v0(limit(s));
        let a = match leader(k, s) {
            Some((gap, vl)) => idm_accel(v, v - vl, gap, &p),
            None => idm_accel(v, 0.0, f64::INFINITY, &p),
        };
        let vn = (v + a * DT).max(0.0);
        s += 0.5 * (v + vn) * DT;
        v = vn;
    }
    out
}

fn constant_profile(s0: f64, v: f64) -> Vec<f64> {
    (0..SCENARIO_STEPS).map(|k| s0 + v * k as f64 * DT).collect()
}

/// Lead speed profile with an optional braking episode.
fn braking_profile(s0: f64, v: f64, brake_at: Option<(f64, f64, f64)>) -> Vec<f64> {
    let mut s = s0;
    let mut speed = v;
    let mut out = Vec::with_capacity(SCENARIO_STEPS);
    for k in 0..SCENARIO_STEPS {
        out.push(s);
        let t = k as f64 * DT;
        let a = match brake_at {
            Some((t0, decel, floor)) if t >= t0 && speed > floor => -decel,
            _ => 0.0,
        };
        let vn = (speed + a * DT).max(0.0);
        s += 0.5 * (speed + vn) * DT;
        speed = vn;
    }
    out
}

fn gap_to(follower_s: f64, leader_s: f64) -> f64 {
    leader_s - follower_s - 0.5 * (EGO_FOOTPRINT.length + CAR.length)
}

fn speed_of(profile: &[f64], k: usize) -> f64 {
    let b = (k + 1).min(profile.len() - 1);
    let a = b.saturating_sub(1);
    (profile[b] - profile[a]) / DT
}

fn three_lane_road(limit: f64, x0: f64, x1: f64) -> Vec<MapPolygon> {
    [(-LANE_WIDTH, 1), (0.0, 2), (LANE_WIDTH, 3)]
        .into_iter()
        .map(|(y, id)| lane_polygon(id, PolygonKind::Lane, TrafficLight::Unknown, limit, LANE_WIDTH, &straight([x0, y], [x1, y])))
        .collect()
}

fn straight_follow(rng: &mut ChaCha8Rng, id: String) -> Scenario {
    let limit = rng.random_range(12.0..15.0);
    let map_polygons = three_lane_road(limit, -60.0, 340.0);
    let route = ReferenceLine::from_polyline(&straight([-60.0, 0.0], [340.0, 0.0])).unwrap();
    let ego_s0 = 60.0;
    let ego_v = rng.random_range(7.0..11.0);
    let lead_v = rng.random_range(5.0..9.0);
    let lead_s0 = ego_s0 + rng.random_range(22.0..35.0);
    let brake = if rng.random_bool(0.5) {
        Some((rng.random_range(4.0..8.0), rng.random_range(1.0..2.5), lead_v * 0.4))
    } else {
        None
    };
    let lead = braking_profile(lead_s0, lead_v, brake);
    let params = IdmParams::default();
    let ego = idm_profile(ego_s0, ego_v, &params, &|_| limit, &|k, s| Some((gap_to(s, lead[k]), speed_of(&lead, k))));
    let zeros = vec![0.0; SCENARIO_STEPS];
    let mut agents = vec![track_from_positions(1, AgentKind::Vehicle, CAR, &along(&route, &lead, &zeros), 0.0)];
    if rng.random_bool(0.5) {
        let side = if rng.random_bool(0.5) { LANE_WIDTH } else { -LANE_WIDTH };
        let s = constant_profile(ego_s0 + rng.random_range(-25.0..25.0), rng.random_range(6.0..11.0));
        let l = vec![side; SCENARIO_STEPS];
        agents.push(track_from_positions(2, AgentKind::Vehicle, CAR, &along(&route, &s, &l), 0.0));
    }
    Scenario {
        id,
        map_polygons,
        agent_tracks: agents,
        ego_track: track_from_positions(0, AgentKind::Ego, EGO_FOOTPRINT, &along(&route, &ego, &zeros), 0.0),
        route_lane_ids: vec![2],
        duration_steps: SCENARIO_STEPS,
    }
}

fn stop_at_intersection(rng: &mut ChaCha8Rng, id: String) -> Scenario {
    let limit = rng.random_range(11.0..14.0);
    let stop_x = rng.random_range(55.0..80.0);
    let cross_x = stop_x + 8.0;
    let mut map_polygons = vec![
        lane_polygon(1, PolygonKind::Lane, TrafficLight::Red, limit, LANE_WIDTH, &straight([-60.0, 0.0], [stop_x, 0.0])),
        lane_polygon(2, PolygonKind::Lane, TrafficLight::Unknown, limit, LANE_WIDTH, &straight([stop_x, 0.0], [260.0, 0.0])),
        lane_polygon(3, PolygonKind::Lane, TrafficLight::Green, limit, LANE_WIDTH, &straight([cross_x, -120.0], [cross_x, 120.0])),
    ];
    map_polygons.push(lane_polygon(
        4,
        PolygonKind::StopLine,
        TrafficLight::Red,
        limit,
        0.5,
        &straight([stop_x, -LANE_WIDTH / 2.0], [stop_x, LANE_WIDTH / 2.0]),
    ));
    map_polygons.push(lane_polygon(
        5,
        PolygonKind::Crosswalk,
        TrafficLight::Unknown,
        limit,
        3.0,
        &straight([stop_x + 2.0, -LANE_WIDTH], [stop_x + 2.0, LANE_WIDTH]),
    ));
    let route = ReferenceLine::from_polyline(&straight([-60.0, 0.0], [260.0, 0.0])).unwrap();
    let ego_s0 = 60.0 + rng.random_range(-5.0..5.0);
    let line_s = stop_x + 60.0;
    let ego_v = rng.random_range(7.0..10.0);
    let params = IdmParams::default();
    // the red line acts as a stationary leader whose rear sits 1 m before the line
    let ego = idm_profile(ego_s0, ego_v, &params, &|_| limit, &|_, s| {
        Some((line_s - 1.0 - s - EGO_FOOTPRINT.length / 2.0, 0.0))
    });
    let zeros = vec![0.0; SCENARIO_STEPS];
    let cross = ReferenceLine::from_polyline(&straight([cross_x, -120.0], [cross_x, 120.0])).unwrap();
    let mut agents = Vec::new();
    let n_cross = rng.random_range(1..=2);
    for i in 0..n_cross {
        let s = constant_profile(rng.random_range(20.0..100.0), rng.random_range(6.0..10.0));
        agents.push(track_from_positions(1 + i, AgentKind::Vehicle, CAR, &along(&cross, &s, &zeros), std::f64::consts::FRAC_PI_2));
    }
    Scenario {
        id,
        map_polygons,
        agent_tracks: agents,
        ego_track: track_from_positions(0, AgentKind::Ego, EGO_FOOTPRINT, &along(&route, &ego, &zeros), 0.0),
        route_lane_ids: vec![1, 2],
        duration_steps: SCENARIO_STEPS,
    }
}

fn lane_change(rng: &mut ChaCha8Rng, id: String) -> Scenario {
    let limit = rng.random_range(12.0..15.0);
    let map_polygons = three_lane_road(limit, -60.0, 340.0);
    let route = ReferenceLine::from_polyline(&straight([-60.0, 0.0], [340.0, 0.0])).unwrap();
    let ego_s0 = 60.0;
    let ego_v = rng.random_range(8.0..11.0);
    let lead_v = rng.random_range(3.0..5.0);
    let lead = constant_profile(ego_s0 + rng.random_range(30.0..45.0), lead_v);
    let t_start = rng.random_range(0.5..2.0);
    let t_dur = rng.random_range(3.5..5.0);
    let lat: Vec<f64> = (0..SCENARIO_STEPS)
        .map(|k| {
            let u = ((k as f64 * DT - t_start) / t_dur).clamp(0.0, 1.0);
            -LANE_WIDTH * (1.0 - (10.0 * u.powi(3) - 15.0 * u.powi(4) + 6.0 * u.powi(5)))
        })
        .collect();
    let params = IdmParams::default();
    let lat_ref = &lat;
    let ego = idm_profile(ego_s0, ego_v, &params, &|_| limit, &|k, s| {
        // the slow lead only matters while the ego is still mostly in its lane
        (lat_ref[k] < -LANE_WIDTH / 2.0).then(|| (gap_to(s, lead[k]), lead_v))
    });
    let right = vec![-LANE_WIDTH; SCENARIO_STEPS];
    let mut agents = vec![track_from_positions(1, AgentKind::Vehicle, CAR, &along(&route, &lead, &right), 0.0)];
    if rng.random_bool(0.5) {
        let s = constant_profile(ego_s0 + rng.random_range(45.0..70.0), rng.random_range(9.0..12.0));
        agents.push(track_from_positions(2, AgentKind::Vehicle, CAR, &along(&route, &s, &vec![0.0; SCENARIO_STEPS]), 0.0));
    }
    Scenario {
        id,
        map_polygons,
        agent_tracks: agents,
        ego_track: track_from_positions(0, AgentKind::Ego, EGO_FOOTPRINT, &along(&route, &ego, &lat), 0.0),
        route_lane_ids: vec![2],
        duration_steps: SCENARIO_STEPS,
    }
}

fn unprotected_turn(rng: &mut ChaCha8Rng, id: String) -> Scenario {
    let radius: f64 = rng.random_range(14.0..20.0);
    let limit = rng.random_range(10.0..13.0);
    let turn_limit = (2.0 * radius).sqrt().min(limit);
    let approach = straight([-80.0, 0.0], [0.0, 0.0]);
    let bend = arc([0.0, radius], radius, -std::f64::consts::FRAC_PI_2, std::f64::consts::FRAC_PI_2);
    let exit = straight([radius, radius], [radius, radius + 150.0]);
    let map_polygons = vec![
        lane_polygon(1, PolygonKind::Lane, TrafficLight::Unknown, limit, LANE_WIDTH, &approach),
        lane_polygon(2, PolygonKind::Lane, TrafficLight::Unknown, turn_limit, LANE_WIDTH, &bend),
        lane_polygon(3, PolygonKind::Lane, TrafficLight::Unknown, limit, LANE_WIDTH, &exit),
        lane_polygon(4, PolygonKind::Lane, TrafficLight::Unknown, limit, LANE_WIDTH, &straight([200.0, LANE_WIDTH], [-120.0, LANE_WIDTH])),
    ];
    let mut path = approach.clone();
    path.extend(bend.iter().skip(1));
    path.extend(exit.iter().skip(1));
    let route = ReferenceLine::from_polyline(&path).unwrap();
    let ego_s0 = 80.0 - rng.random_range(40.0..55.0);
    let ego_v = rng.random_range(6.0..9.0);
    let arc_start = 80.0;
    let arc_len = radius * std::f64::consts::FRAC_PI_2;
    // conflict: where the turn crosses the oncoming lane
    let conflict_s = arc_start + radius * (LANE_WIDTH / radius).asin();
    let conflict_x = radius * (LANE_WIDTH / radius).asin().sin();
    let on_v = rng.random_range(8.0..12.0);
    let on_x0 = rng.random_range(40.0..110.0);
    let oncoming: Vec<f64> = (0..SCENARIO_STEPS).map(|k| on_x0 - on_v * k as f64 * DT).collect();
    let params = IdmParams::default();
    let limit_at = |s: f64| {
        if s > arc_start - 15.0 && s < arc_start + arc_len {
            turn_limit
        } else {
            limit
        }
    };
    let ego = idm_profile(ego_s0, ego_v, &params, &limit_at, &|k, s| {
        // yield until the oncoming car has cleared the conflict point
        let clear = oncoming[k] < conflict_x - 8.0;
        let arriving = oncoming[k] - conflict_x < on_v * 5.0;
        (!clear && arriving && s < conflict_s - 3.0).then(|| (conflict_s - 4.0 - s - EGO_FOOTPRINT.length / 2.0, 0.0))
    });
    let zeros = vec![0.0; SCENARIO_STEPS];
    let on_pos: Vec<Point> = oncoming.iter().map(|x| [*x, LANE_WIDTH]).collect();
    Scenario {
        id,
        map_polygons,
        agent_tracks: vec![track_from_positions(1, AgentKind::Vehicle, CAR, &on_pos, std::f64::consts::PI)],
        ego_track: track_from_positions(0, AgentKind::Ego, EGO_FOOTPRINT, &along(&route, &ego, &zeros), 0.0),
        route_lane_ids: vec![1, 2, 3],
        duration_steps: SCENARIO_STEPS,
    }
}

/// Deterministic in `(kind, seed)`.
pub fn generate_synthetic_scenario(kind: ScenarioKind, seed: u64) -> Scenario {
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(4).wrapping_add(kind as u64));
    let id = format!("{}_{seed:04}", kind.name());
    match kind {
        ScenarioKind::StraightFollow => straight_follow(&mut rng, id),
        ScenarioKind::StopAtIntersection => stop_at_intersection(&mut rng, id),
        ScenarioKind::LaneChange => lane_change(&mut rng, id),
        ScenarioKind::UnprotectedTurn => unprotected_turn(&mut rng, id),
    }
}

/// `count` scenarios cycling through `kinds`, seeds derived from `seed`.
pub fn generate_corpus(kinds: &[ScenarioKind], count: usize, seed: u64) -> Vec<Scenario> {
    (0..count)
        .map(|i| generate_synthetic_scenario(kinds[i % kinds.len()], seed * 1000 + i as u64))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::ScenarioLimits;

    #[test]
    fn all_kinds_validate() {
        let limits = ScenarioLimits {
            history_steps: 50,
            plan_steps: 80,
            points_per_polygon: 20,
        };
        for kind in ScenarioKind::ALL {
            for seed in 0..10 {
                let s = generate_synthetic_scenario(kind, seed);
                s.validate(&limits).unwrap();
                assert_eq!(s.duration_steps, 150);
                ReferenceLine::from_route(&s).unwrap();
            }
        }
    }

    #[test]
    fn straight_follow_shape() {
        let s = generate_synthetic_scenario(ScenarioKind::StraightFollow, 0);
        assert_eq!(s.lanes().count(), 3);
        assert!(!s.agent_tracks.is_empty());
        let lead = &s.agent_tracks[0];
        assert!(lead.states[0].position[0] > s.ego_track.states[0].position[0]);
        assert!(lead.states[0].position[1].abs() < 1e-9);
    }

    #[test]
    fn deterministic_bytes() {
        for kind in ScenarioKind::ALL {
            assert_eq!(
                generate_synthetic_scenario(kind, 3).to_json(),
                generate_synthetic_scenario(kind, 3).to_json()
            );
        }
    }

    #[test]
    fn stop_demo_halts_before_line() {
        let s = generate_synthetic_scenario(ScenarioKind::StopAtIntersection, 7);
        let line = s.red_stop_lines()[0].points[0].x;
        let last = s.ego_track.states.last().unwrap();
        assert!(last.speed() < 0.5, "{}", last.speed());
        assert!(last.position[0] + EGO_FOOTPRINT.length / 2.0 < line);
    }

    #[test]
    fn demos_stay_clear_of_agents() {
        for kind in ScenarioKind::ALL {
            for seed in 0..20 {
                let s = generate_synthetic_scenario(kind, seed);
                for k in 0..s.duration_steps {
                    let ego = s.ego_track.footprint_at(k);
                    for a in &s.agent_tracks {
                        assert!(!ego.overlaps(&a.footprint_at(k)), "{} step {k} agent {}", s.id, a.id);
                    }
                    assert!(s.is_drivable(s.ego_track.states[k].position), "{} off-road at {k}", s.id);
                }
            }
        }
    }

    #[test]
    fn unknown_kind_rejected() {
        assert!(matches!("roundabout".parse::<ScenarioKind>(), Err(SceneError::UnknownKind(_))));
        assert_eq!("lane_change".parse::<ScenarioKind>().unwrap(), ScenarioKind::LaneChange);
    }
}
