//! Hybrid refinement of a learned action: rule-scored proposals, a
//! smoothing-spline QP for the path `l(s)` and another for the speed profile
//! `s(t)`, with a centerline + IDM fallback.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dynamics::{rollout, BicycleState, LqrTracker};
use crate::frenet::{FrenetPose, ReferenceLine};
use crate::geometry::{self, wrap_angle, OrientedBox, Point};
use crate::idm::{idm_accel, IdmParams};
use crate::metrics::{box_drivable, time_to_collision_with, MAX_ACCEL, MAX_JERK, TTC_BOUND, WEIGHTS};
use crate::par::{self, Parallelism};
use crate::qp::{self, QpProblem, QpStatus, QpTolerances};
use crate::sampler::{sample_actions, Maneuver, SamplerConfig, SpeedMode};
use crate::scene::{AgentState, AgentTrack, Footprint, Scenario, DT};
use crate::sim::{Observation, Plan, PlanError, Planner};
use crate::spline::{SplineProfile, SplineSpace, DEFAULT_DEGREE};
use crate::trajectory::TrajectoryAction;

pub const MAX_PROPOSALS: usize = 1500;

#[derive(Debug, Error, PartialEq)]
pub enum PostOptError {
    #[error("QP infeasible")]
    Infeasible,
    #[error("QP did not converge")]
    NotConverged,
    #[error("empty corridor at station {0:.1}")]
    EmptyCorridor(f64),
    #[error("bad input: {0}")]
    Input(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PostOptConfig {
    pub proposals: SamplerConfig,
    pub w_pref: f64,
    pub path_weights: [f64; 4],
    /// The first-derivative entry is ignored for speed.
    pub speed_weights: [f64; 4],
    pub path_knot_spacing: f64,
    pub speed_knot_spacing: f64,
    pub corridor_spacing: f64,
    pub agent_margin: f64,
    pub accel_bounds: (f64, f64),
    pub idm: IdmParams,
}

impl PostOptConfig {
    pub fn desk(plan_steps: usize) -> Self {
        let h = plan_steps as f64 * DT;
        Self {
            proposals: SamplerConfig {
                piece_durations: vec![0.3 * h],
                lateral_offsets: vec![-0.5, 0.0, 0.5],
                terminal_speeds: vec![-6.0, -3.0, -1.5, 0.0, 1.5],
                speed_mode: SpeedMode::Relative,
                maneuvers: vec![Maneuver::LaneKeep, Maneuver::ChangeLeft, Maneuver::ChangeRight],
                lane_width: 3.5,
                max_samples: MAX_PROPOSALS - 1,
                horizon_steps: plan_steps,
            },
            w_pref: 0.05,
            path_weights: [1.0, 0.1, 1.0, 1.0],
            speed_weights: [1.0, 0.0, 1.0, 1.0],
            path_knot_spacing: 5.0,
            speed_knot_spacing: 0.5,
            corridor_spacing: 2.0,
            agent_margin: 0.3,
            accel_bounds: (-6.0, 3.0),
            idm: IdmParams::default(),
        }
    }
}

/// Future states of another agent at `t = (j + 1) · 0.1 s`.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictedAgent {
    pub id: u32,
    pub footprint: Footprint,
    pub states: Vec<AgentState>,
}

impl PredictedAgent {
    pub fn at(&self, j: usize) -> &AgentState {
        &self.states[j.min(self.states.len() - 1)]
    }

    pub fn boxed(&self, j: usize) -> OrientedBox {
        let s = self.at(j);
        OrientedBox::new(s.position, s.heading, self.footprint.length, self.footprint.width)
    }
}

/// Constant-acceleration extrapolation along the current heading; speed
/// never drops below zero.
pub fn predict_constant_accel(track: &AgentTrack, steps: usize) -> PredictedAgent {
    let n = track.states.len();
    let cur = track.states[n - 1];
    let v = cur.speed();
    let a = if n >= 2 { (v - track.states[n - 2].speed()) / DT } else { 0.0 };
    let dir = if v > 0.05 {
        geometry::scale(cur.velocity, 1.0 / v)
    } else {
        geometry::heading_vector(cur.heading)
    };
    let mut p = cur.position;
    let mut speed = v;
    let states = (0..steps)
        .map(|_| {
            let vn = (speed + a * DT).max(0.0);
            p = geometry::add(p, geometry::scale(dir, 0.5 * (speed + vn) * DT));
            speed = vn;
            AgentState {
                position: p,
                heading: cur.heading,
                velocity: geometry::scale(dir, vn),
            }
        })
        .collect();
    PredictedAgent {
        id: track.id,
        footprint: track.footprint,
        states,
    }
}

pub fn predict_all(agents: &[AgentTrack], steps: usize) -> Vec<PredictedAgent> {
    agents.iter().map(|a| predict_constant_accel(a, steps)).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct RuleScore {
    pub collision: bool,
    pub drivable: bool,
    pub red_light: bool,
    pub progress: f64,
    pub max_accel: f64,
    pub max_jerk: f64,
    pub ttc_fraction: f64,
    pub speed_compliance: f64,
    pub composite: f64,
}

fn segments_cross(a: Point, b: Point, c: Point, d: Point) -> bool {
    let o = |p: Point, q: Point, r: Point| geometry::cross(geometry::sub(q, p), geometry::sub(r, p));
    let (d1, d2) = (o(c, d, a), o(c, d, b));
    let (d3, d4) = (o(a, b, c), o(a, b, d));
    (d1 > 0.0) != (d2 > 0.0) && (d3 > 0.0) != (d4 > 0.0)
}

/// Whether the front bumper path crosses any red stop line.
pub fn runs_red_light(scenario: &Scenario, fronts: &[Point]) -> bool {
    scenario.red_stop_lines().iter().any(|line| {
        let (a, b) = (line.points[0].position(), line.points[line.points.len() - 1].position());
        let dir = geometry::scale(geometry::sub(b, a), 0.5 / geometry::dist(a, b).max(1e-9));
        let (a, b) = (geometry::sub(a, dir), geometry::add(b, dir));
        fronts.windows(2).any(|w| segments_cross(w[0], w[1], a, b))
    })
}

fn front_of(s: &BicycleState, fp: &Footprint) -> Point {
    geometry::add(s.position, geometry::scale(geometry::heading_vector(s.heading), fp.length / 2.0))
}

/// Gated, weighted rule score before progress normalization.
fn raw_score(
    scenario: &Scenario,
    line: &ReferenceLine,
    start: &BicycleState,
    roll: &[(BicycleState, crate::dynamics::ControlInput)],
    predicted: &[PredictedAgent],
) -> RuleScore {
    let fp = scenario.ego_track.footprint;
    let mut collision = false;
    let mut drivable = true;
    let mut ttc_ok = 0usize;
    let mut within = 0usize;
    for (j, (s, _)) in roll.iter().enumerate() {
        let b = OrientedBox::new(s.position, s.heading, fp.length, fp.width);
        collision |= predicted.iter().any(|p| b.overlaps(&p.boxed(j)));
        drivable &= box_drivable(scenario, &b);
        let st = AgentState {
            position: s.position,
            heading: s.heading,
            velocity: s.velocity(),
        };
        let ttc = time_to_collision_with(fp, &st, predicted.iter().map(|p| (p.footprint, *p.at(j))));
        if s.speed < 0.1 || ttc >= TTC_BOUND {
            ttc_ok += 1;
        }
        if s.speed <= scenario.speed_limit_at(s.position) + 1e-9 {
            within += 1;
        }
    }
    let mut fronts = vec![front_of(start, &fp)];
    fronts.extend(roll.iter().map(|(s, _)| front_of(s, &fp)));
    let red_light = runs_red_light(scenario, &fronts);
    let accels: Vec<f64> = roll.iter().map(|(_, u)| u.accel).collect();
    let max_accel = accels.iter().fold(0.0f64, |m, a| m.max(a.abs()));
    let max_jerk = accels.windows(2).fold(0.0f64, |m, w| m.max(((w[1] - w[0]) / DT).abs()));
    let progress = match (line.project(start.position), roll.last().map(|(s, _)| line.project(s.position))) {
        (Ok(a), Some(Ok(b))) => b.s - a.s,
        _ => 0.0,
    };
    let n = roll.len().max(1) as f64;
    RuleScore {
        collision,
        drivable,
        red_light,
        progress,
        max_accel,
        max_jerk,
        ttc_fraction: ttc_ok as f64 / n,
        speed_compliance: within as f64 / n,
        composite: 0.0,
    }
}

/// Gate × weighted mean, with progress given relative to the best candidate.
pub fn rule_composite(s: &RuleScore, progress_norm: f64) -> f64 {
    let gate = if s.collision || !s.drivable || s.red_light { 0.0 } else { 1.0 };
    let comfort = if s.max_accel <= MAX_ACCEL && s.max_jerk <= MAX_JERK { 1.0 } else { 0.0 };
    let w = WEIGHTS;
    gate * (w[0] * s.ttc_fraction + w[1] * progress_norm.clamp(0.0, 1.0) + w[2] * s.speed_compliance + w[3] * comfort)
        / w.iter().sum::<f64>()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Proposal {
    /// 0 is the learned action itself.
    pub index: usize,
    pub action: TrajectoryAction,
    pub score: RuleScore,
    pub preference: f64,
    pub total: f64,
    pub rollout: Vec<Point>,
}

/// Scores the action (index 0) and the sampled alternatives.
pub fn score_proposals(
    action: &TrajectoryAction,
    state: &BicycleState,
    scenario: &Scenario,
    predicted: &[PredictedAgent],
    cfg: &PostOptConfig,
    parallelism: Parallelism,
) -> Vec<Proposal> {
    let Ok(line) = ReferenceLine::from_route(scenario) else {
        return Vec::new();
    };
    let steps = action.len();
    let mut candidates = vec![action.clone()];
    let mut grid = cfg.proposals.clone();
    grid.horizon_steps = steps;
    grid.max_samples = grid.max_samples.min(MAX_PROPOSALS - 1);
    if let Ok(extra) = sample_actions(state, &line, &grid) {
        candidates.extend(extra);
    }
    let tracker = LqrTracker::shared();
    let scored = par::map(parallelism, &candidates, |cand| {
        let roll = rollout(tracker, state, cand, steps);
        let score = raw_score(scenario, &line, state, &roll, predicted);
        (score, roll.iter().map(|(s, _)| s.position).collect::<Vec<_>>())
    });
    let best_progress = scored.iter().map(|(s, _)| s.progress).fold(0.0f64, f64::max);
    scored
        .into_iter()
        .zip(candidates)
        .enumerate()
        .map(|(i, ((mut score, roll), cand))| {
            let norm = if best_progress > 1e-9 { score.progress / best_progress } else { 1.0 };
            score.composite = rule_composite(&score, norm);
            let preference = -cfg.w_pref * action.rms_distance(&cand);
            Proposal {
                index: i,
                action: cand,
                score,
                preference,
                total: score.composite + preference,
                rollout: roll,
            }
        })
        .collect()
}

/// Highest total, lowest index on ties; `None` when every candidate collides.
pub fn generate_and_score_proposals(
    action: &TrajectoryAction,
    state: &BicycleState,
    scenario: &Scenario,
    predicted: &[PredictedAgent],
    cfg: &PostOptConfig,
    parallelism: Parallelism,
) -> Option<Proposal> {
    let all = score_proposals(action, state, scenario, predicted, cfg, parallelism);
    if all.iter().all(|p| p.score.collision) {
        return None;
    }
    let mut best: Option<Proposal> = None;
    for p in all {
        if best.as_ref().is_none_or(|b| p.total > b.total) {
            best = Some(p);
        }
    }
    best.filter(|b| !b.score.collision)
}

/// Inputs of the lateral path QP over stations `[s_start, s_end]`.
pub struct PathQpInput<'a> {
    pub s_start: f64,
    pub s_end: f64,
    pub target: &'a dyn Fn(f64) -> f64,
    /// `(station, lower, upper)` bounds on the lateral offset.
    pub corridor: Vec<(f64, f64, f64)>,
    /// Lateral offset and slope `dl/ds` at the start.
    pub start: Option<(f64, f64)>,
    pub knot_spacing: f64,
}

fn solve_spline_qp(
    space: &SplineSpace,
    target: &dyn Fn(f64) -> f64,
    weights: [f64; 4],
    skip_first_derivative: bool,
    eq_rows: Vec<(DVector<f64>, f64)>,
    in_rows: Vec<(DVector<f64>, f64)>,
) -> Result<SplineProfile, PostOptError> {
    let (h0, f0) = space.tracking(target);
    let mut h = h0 * (2.0 * weights[0]);
    for k in 1..=3 {
        if k == 1 && skip_first_derivative {
            continue;
        }
        if weights[k] != 0.0 {
            h += space.gram(k) * (2.0 * weights[k]);
        }
    }
    let h = (&h + h.transpose()) * 0.5;
    let f = f0 * (2.0 * weights[0]);
    let (cont, cb) = space.continuity();
    let n = space.dim();
    let m_eq = cont.nrows() + eq_rows.len();
    let mut a_eq = DMatrix::zeros(m_eq, n);
    let mut b_eq = DVector::zeros(m_eq);
    a_eq.view_mut((0, 0), (cont.nrows(), n)).copy_from(&cont);
    b_eq.rows_mut(0, cont.nrows()).copy_from(&cb);
    for (i, (r, b)) in eq_rows.iter().enumerate() {
        a_eq.set_row(cont.nrows() + i, &r.transpose());
        b_eq[cont.nrows() + i] = *b;
    }
    let mut a_in = DMatrix::zeros(in_rows.len(), n);
    let mut b_in = DVector::zeros(in_rows.len());
    for (i, (r, b)) in in_rows.iter().enumerate() {
        a_in.set_row(i, &r.transpose());
        b_in[i] = *b;
    }
    // the tracking quadrature alone is rank deficient per piece; adding the
    // equality penalty leaves the feasible-set objective unchanged
    let rho = h.diagonal().iter().fold(1.0f64, |m, d| m.max(d.abs()));
    let at = a_eq.transpose();
    let h = h + &at * &a_eq * rho;
    let f = f - &at * &b_eq * rho;
    let problem = QpProblem { h, f, a_eq, b_eq, a_in, b_in };
    let res = qp::solve(&problem, &QpTolerances::default()).map_err(|e| PostOptError::Input(e.to_string()))?;
    match res.status {
        QpStatus::Optimal => Ok(SplineProfile::from_stacked(space.knots.clone(), space.degree, &res.x.unwrap())),
        QpStatus::Infeasible => Err(PostOptError::Infeasible),
        QpStatus::MaxIter => Err(PostOptError::NotConverged),
    }
}

pub fn qp_path_plan(input: &PathQpInput, weights: [f64; 4]) -> Result<SplineProfile, PostOptError> {
    if !(input.s_end > input.s_start) {
        return Err(PostOptError::Input("empty station range".into()));
    }
    for (s, lo, hi) in &input.corridor {
        if lo > hi {
            return Err(PostOptError::EmptyCorridor(*s));
        }
    }
    let space = SplineSpace::uniform(input.s_start, input.s_end, input.knot_spacing, DEFAULT_DEGREE);
    let mut eq = Vec::new();
    if let Some((l0, dl0)) = input.start {
        eq.push((space.row(input.s_start, 0), l0));
        eq.push((space.row(input.s_start, 1), dl0));
    }
    let mut ineq = Vec::new();
    for (s, lo, hi) in &input.corridor {
        let r = space.row(*s, 0);
        ineq.push((r.clone(), *hi));
        ineq.push((-r, -*lo));
    }
    solve_spline_qp(&space, input.target, weights, false, eq, ineq)
}

/// Inputs of the longitudinal speed QP over `t ∈ [0, horizon]`.
pub struct SpeedQpInput<'a> {
    pub horizon: f64,
    pub target: &'a dyn Fn(f64) -> f64,
    /// Station and speed at `t = 0`.
    pub start: Option<(f64, f64)>,
    /// Speed cap at each constraint station.
    pub v_max: &'a dyn Fn(f64) -> f64,
    pub accel_bounds: Option<(f64, f64)>,
    /// `(t, s_max)` upper bounds on the station.
    pub cap: Vec<(f64, f64)>,
    pub knot_spacing: f64,
    pub station_dt: f64,
    /// Include `0 ≤ x' ≤ v_max` rows.
    pub speed_rows: bool,
}

pub fn qp_speed_plan(input: &SpeedQpInput, weights: [f64; 4]) -> Result<SplineProfile, PostOptError> {
    if !(input.horizon > 0.0) {
        return Err(PostOptError::Input("non-positive horizon".into()));
    }
    let space = SplineSpace::uniform(0.0, input.horizon, input.knot_spacing, DEFAULT_DEGREE);
    let mut eq = Vec::new();
    if let Some((s0, v0)) = input.start {
        eq.push((space.row(0.0, 0), s0));
        eq.push((space.row(0.0, 1), v0));
    }
    let mut ineq = Vec::new();
    let n = (input.horizon / input.station_dt).round() as usize;
    for j in 0..=n {
        let t = j as f64 * input.station_dt;
        if input.speed_rows && j > 0 {
            let r = space.row(t, 1);
            ineq.push((-r.clone(), 0.0));
            ineq.push((r, (input.v_max)(t)));
        }
        if let Some((lo, hi)) = input.accel_bounds {
            let r = space.row(t, 2);
            ineq.push((r.clone(), hi));
            ineq.push((-r, -lo));
        }
    }
    for (t, smax) in &input.cap {
        ineq.push((space.row(*t, 0), *smax));
    }
    solve_spline_qp(&space, input.target, weights, true, eq, ineq)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Fallback {
    /// QP path failed; centerline path with the QP speed.
    CenterlinePath,
    /// QP speed failed (or no proposal survived); IDM speed.
    IdmSpeed,
    /// Both.
    Full,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RefineOutcome {
    pub action: TrajectoryAction,
    pub fallback: Option<Fallback>,
    pub proposal_index: Option<usize>,
}

fn interp(xs: &[f64], ys: &[f64], x: f64) -> f64 {
    if x <= xs[0] {
        return ys[0];
    }
    for i in 1..xs.len() {
        if x <= xs[i] {
            let u = (x - xs[i - 1]) / (xs[i] - xs[i - 1]).max(1e-12);
            return ys[i - 1] + u * (ys[i] - ys[i - 1]);
        }
    }
    *ys.last().unwrap()
}

/// Lateral drivable interval at station `s` containing (or nearest to)
/// `l_hint`, shrunk for the ego body and cut by static obstacles.
fn corridor_at(
    scenario: &Scenario,
    line: &ReferenceLine,
    s: f64,
    l_hint: f64,
    obstacles: &[(f64, f64, f64, f64)],
) -> (f64, f64) {
    let step = 0.25;
    let half_w = scenario.ego_track.footprint.width / 2.0;
    let grid: Vec<f64> = (-40..=40).map(|i| i as f64 * step).collect();
    let ok: Vec<bool> = grid
        .iter()
        .map(|l| scenario.is_drivable(line.to_cartesian(FrenetPose::new(s, *l)).0))
        .collect();
    let mut intervals: Vec<(f64, f64)> = Vec::new();
    let mut i = 0;
    while i < grid.len() {
        if ok[i] {
            let a = i;
            while i + 1 < grid.len() && ok[i + 1] {
                i += 1;
            }
            intervals.push((grid[a] - step / 2.0, grid[i] + step / 2.0));
        }
        i += 1;
    }
    let Some(&(mut lo, mut hi)) = intervals.iter().min_by(|a, b| {
        let d = |iv: &(f64, f64)| if l_hint < iv.0 { iv.0 - l_hint } else if l_hint > iv.1 { l_hint - iv.1 } else { 0.0 };
        d(a).total_cmp(&d(b))
    }) else {
        return (1.0, -1.0);
    };
    lo += half_w;
    hi -= half_w;
    for &(s_lo, s_hi, l_lo, l_hi) in obstacles {
        if s >= s_lo && s <= s_hi && l_hi > lo && l_lo < hi {
            if l_hint < 0.5 * (l_lo + l_hi) {
                hi = hi.min(l_lo);
            } else {
                lo = lo.max(l_hi);
            }
        }
    }
    (lo, hi)
}

/// Frenet extents of near-stationary predicted agents, inflated by half the
/// ego width plus the margin.
fn static_obstacles(line: &ReferenceLine, predicted: &[PredictedAgent], inflate: f64) -> Vec<(f64, f64, f64, f64)> {
    predicted
        .iter()
        .filter(|p| p.states.first().is_some_and(|s| s.speed() < 0.5))
        .filter_map(|p| {
            let b = p.boxed(0).inflated(inflate);
            let fr: Vec<FrenetPose> = b.corners().iter().filter_map(|c| line.project(*c).ok()).collect();
            (fr.len() == 4).then(|| {
                fr.iter().fold((f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY), |a, f| {
                    (a.0.min(f.s), a.1.max(f.s), a.2.min(f.l), a.3.max(f.l))
                })
            })
        })
        .collect()
}

/// Station caps `(t_j, s_max)` from predicted agents on the path and red stop
/// lines ahead.
fn station_caps(
    scenario: &Scenario,
    line: &ReferenceLine,
    path: &dyn Fn(f64) -> f64,
    s0: f64,
    predicted: &[PredictedAgent],
    steps: usize,
    gap: f64,
    margin: f64,
) -> Vec<Option<f64>> {
    let fp = scenario.ego_track.footprint;
    let mut caps = vec![None::<f64>; steps];
    let mut tighten = |j: usize, v: f64| {
        caps[j] = Some(caps[j].map_or(v, |c: f64| c.min(v)));
    };
    for p in predicted {
        for j in 0..steps {
            let st = p.at(j);
            let Ok(f) = line.project_within(st.position, 10.0) else { continue };
            if f.s <= s0 {
                continue;
            }
            if (f.l - path(f.s)).abs() < 0.5 * (p.footprint.width + fp.width) + margin {
                tighten(j, f.s - 0.5 * (p.footprint.length + fp.length) - gap);
            }
        }
    }
    for stop in scenario.red_stop_lines() {
        let mid = stop.points[stop.points.len() / 2].position();
        if let Ok(f) = line.project_within(mid, 10.0) {
            if f.l.abs() < 3.0 && s0 + fp.length / 2.0 < f.s + 0.5 {
                for j in 0..steps {
                    tighten(j, f.s - fp.length / 2.0 - 1.0);
                }
            }
        }
    }
    caps
}

/// Path `l(s)` blending from the current offset onto the nearest lane center.
fn centerline_path(l0: f64, lane_width: f64) -> impl Fn(f64, f64) -> f64 {
    let lc = (l0 / lane_width).round() * lane_width;
    move |s: f64, s0: f64| lc + (l0 - lc) * (1.0 - (s - s0) / 10.0).max(0.0)
}

/// IDM stations for `steps` periods against the nearest capped obstacle.
fn idm_stations(s0: f64, v0: f64, v_limit: f64, caps: &[Option<f64>], params: &IdmParams, steps: usize) -> Vec<f64> {
    let p = params.with_v0(v_limit.max(0.1));
    let mut s = s0;
    let mut v = v0;
    let mut out = Vec::with_capacity(steps);
    for j in 0..steps {
        // the cap already subtracts the standstill gap, so add it back for IDM
        let a = match caps[j] {
            Some(c) => {
                let c_next = caps.get(j + 1).copied().flatten().unwrap_or(c);
                let v_lead = ((c_next - c) / DT).max(0.0);
                idm_accel(v, v - v_lead, c + p.s0 - s, &p)
            }
            None => idm_accel(v, 0.0, f64::INFINITY, &p),
        };
        let vn = (v + a * DT).max(0.0);
        s += 0.5 * (v + vn) * DT;
        v = vn;
        out.push(s);
    }
    out
}

/// Full refinement chain; always returns an action of the same length.
pub fn refine(
    action: &TrajectoryAction,
    state: &BicycleState,
    scenario: &Scenario,
    predicted: &[PredictedAgent],
    cfg: &PostOptConfig,
    parallelism: Parallelism,
) -> RefineOutcome {
    let steps = action.len();
    let horizon = steps as f64 * DT;
    let Ok(line) = ReferenceLine::from_route(scenario) else {
        return RefineOutcome {
            action: action.clone(),
            fallback: Some(Fallback::Full),
            proposal_index: None,
        };
    };
    let Ok(start) = line.project(state.position) else {
        return RefineOutcome {
            action: action.clone(),
            fallback: Some(Fallback::Full),
            proposal_index: None,
        };
    };
    let (s0, l0) = (start.s, start.l);
    let dh = wrap_angle(state.heading - line.heading_at(s0));
    let slope0 = dh.tan().clamp(-0.5, 0.5);
    let v_limit = scenario.speed_limit_at(state.position);
    let centerline = centerline_path(l0, cfg.proposals.lane_width);

    let proposal = generate_and_score_proposals(action, state, scenario, predicted, cfg, parallelism);
    let frenet: Option<Vec<FrenetPose>> = proposal
        .as_ref()
        .and_then(|p| p.action.points.iter().map(|q| line.project(*q).ok()).collect());

    let mut fallback_path = false;
    let mut fallback_speed = proposal.is_none();

    // path profile
    let path_fn: Box<dyn Fn(f64) -> f64> = match &frenet {
        Some(fr) => {
            let mut pairs: Vec<(f64, f64)> = std::iter::once((s0, l0)).chain(fr.iter().map(|f| (f.s, f.l))).collect();
            pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
            pairs.dedup_by(|a, b| (a.0 - b.0).abs() < 1e-6);
            let xs: Vec<f64> = pairs.iter().map(|p| p.0).collect();
            let ys: Vec<f64> = pairs.iter().map(|p| p.1).collect();
            let target = move |s: f64| interp(&xs, &ys, s);
            let s_reach = fr.iter().map(|f| f.s).fold(s0, f64::max);
            let s_end = s0 + (s_reach - s0).max(v_limit * horizon).max(cfg.path_knot_spacing);
            let inflate = scenario.ego_track.footprint.width / 2.0 + cfg.agent_margin;
            let obstacles = static_obstacles(&line, predicted, inflate);
            let n_st = ((s_end - s0) / cfg.corridor_spacing).floor() as usize;
            let corridor: Vec<(f64, f64, f64)> = (1..=n_st)
                .map(|i| {
                    let s = s0 + i as f64 * cfg.corridor_spacing;
                    let (lo, hi) = corridor_at(scenario, &line, s, target(s), &obstacles);
                    (s, lo, hi)
                })
                .collect();
            let input = PathQpInput {
                s_start: s0,
                s_end,
                target: &target,
                corridor,
                start: Some((l0, slope0)),
                knot_spacing: cfg.path_knot_spacing,
            };
            match qp_path_plan(&input, cfg.path_weights) {
                Ok(sp) => Box::new(move |s: f64| sp.eval(s.clamp(s0, s_end))[0]),
                Err(e) => {
                    log::debug!("path QP fallback: {e}");
                    fallback_path = true;
                    Box::new(move |s: f64| centerline(s, s0))
                }
            }
        }
        None => {
            fallback_path = true;
            Box::new(move |s: f64| centerline(s, s0))
        }
    };

    let caps = station_caps(scenario, &line, &*path_fn, s0, predicted, steps, cfg.idm.s0, cfg.agent_margin);
    let stations: Vec<f64> = match (&frenet, fallback_speed) {
        (Some(fr), false) => {
            let ts: Vec<f64> = (0..=steps).map(|j| j as f64 * DT).collect();
            let ss: Vec<f64> = std::iter::once(s0).chain(fr.iter().map(|f| f.s)).collect();
            let target = move |t: f64| interp(&ts, &ss, t);
            let limit_at = |t: f64| {
                let s = target(t);
                let p = line.to_cartesian(FrenetPose::new(s, path_fn(s))).0;
                scenario
                    .speed_limit_at(p)
                    .max(state.speed + cfg.accel_bounds.0 * t)
            };
            let cap: Vec<(f64, f64)> = caps
                .iter()
                .enumerate()
                .filter_map(|(j, c)| c.map(|c| ((j + 1) as f64 * DT, c)))
                .collect();
            let input = SpeedQpInput {
                horizon,
                target: &target,
                start: Some((s0, state.speed)),
                v_max: &limit_at,
                accel_bounds: Some(cfg.accel_bounds),
                cap,
                knot_spacing: cfg.speed_knot_spacing,
                station_dt: DT,
                speed_rows: true,
            };
            match qp_speed_plan(&input, cfg.speed_weights) {
                Ok(sp) => (1..=steps).map(|j| sp.eval(j as f64 * DT)[0]).collect(),
                Err(e) => {
                    log::debug!("speed QP fallback: {e}");
                    fallback_speed = true;
                    idm_stations(s0, state.speed, v_limit, &caps, &cfg.idm, steps)
                }
            }
        }
        _ => {
            fallback_speed = true;
            idm_stations(s0, state.speed, v_limit, &caps, &cfg.idm, steps)
        }
    };
    let points = stations
        .iter()
        .map(|s| line.to_cartesian(FrenetPose::new(*s, path_fn(*s))).0)
        .collect();
    let fallback = match (fallback_path, fallback_speed) {
        (false, false) => None,
        (true, false) => Some(Fallback::CenterlinePath),
        (false, true) => Some(Fallback::IdmSpeed),
        (true, true) => Some(Fallback::Full),
    };
    if fallback.is_some() {
        log::debug!("refine fallback {fallback:?} for {}", scenario.id);
    }
    RefineOutcome {
        action: TrajectoryAction::new(points),
        fallback,
        proposal_index: proposal.map(|p| p.index),
    }
}

/// Centerline + IDM trajectory from the current state.
pub fn idm_fallback(
    state: &BicycleState,
    scenario: &Scenario,
    predicted: &[PredictedAgent],
    cfg: &PostOptConfig,
    steps: usize,
) -> Option<TrajectoryAction> {
    let line = ReferenceLine::from_route(scenario).ok()?;
    let f = line.project(state.position).ok()?;
    let centerline = centerline_path(f.l, cfg.proposals.lane_width);
    let path = |s: f64| centerline(s, f.s);
    let caps = station_caps(scenario, &line, &path, f.s, predicted, steps, cfg.idm.s0, cfg.agent_margin);
    let v_limit = scenario.speed_limit_at(state.position);
    let stations = idm_stations(f.s, state.speed, v_limit, &caps, &cfg.idm, steps);
    Some(TrajectoryAction::new(
        stations.iter().map(|s| line.to_cartesian(FrenetPose::new(*s, path(*s))).0).collect(),
    ))
}

/// Centerline path with IDM speed against constant-acceleration predictions.
pub struct IdmOnly {
    pub config: PostOptConfig,
}

impl Planner for IdmOnly {
    fn name(&self) -> &str {
        "idm-only"
    }

    fn plan(&self, obs: &Observation) -> Result<Plan, PlanError> {
        let predicted = predict_all(&obs.agents, obs.plan_steps);
        idm_fallback(&obs.ego, obs.scenario, &predicted, &self.config, obs.plan_steps)
            .map(Plan::new)
            .ok_or_else(|| PlanError("ego is off the route".into()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::{AgentKind, MapPoint, MapPolygon, PolygonKind, TrafficLight};

    fn road(lanes: &[f64], length: f64) -> Scenario {
        let map_polygons = lanes
            .iter()
            .enumerate()
            .map(|(i, y)| MapPolygon {
                id: i as u32 + 1,
                semantic: PolygonKind::Lane,
                traffic_light: TrafficLight::Unknown,
                speed_limit: 15.0,
                width: 3.5,
                points: (0..20)
                    .map(|k| MapPoint {
                        x: -20.0 + length * k as f64 / 19.0,
                        y: *y,
                        orientation: 0.0,
                    })
                    .collect(),
            })
            .collect();
        let route = lanes.iter().position(|y| *y == 0.0).unwrap() as u32 + 1;
        Scenario {
            id: "test".into(),
            map_polygons,
            agent_tracks: vec![],
            ego_track: AgentTrack {
                id: 0,
                semantic: AgentKind::Ego,
                footprint: Footprint { length: 4.8, width: 2.0 },
                states: vec![],
            },
            route_lane_ids: vec![route],
            duration_steps: 0,
        }
    }

    fn straight_action(x0: f64, v: f64, steps: usize) -> TrajectoryAction {
        TrajectoryAction::new((1..=steps).map(|j| [x0 + v * j as f64 * DT, 0.0]).collect())
    }

    fn stopped(id: u32, x: f64, steps: usize) -> PredictedAgent {
        PredictedAgent {
            id,
            footprint: Footprint { length: 4.6, width: 1.9 },
            states: vec![
                AgentState {
                    position: [x, 0.0],
                    heading: 0.0,
                    velocity: [0.0, 0.0],
                };
                steps
            ],
        }
    }

    #[test]
    fn winner_is_argmax_and_own_action_unpenalized() {
        let sc = road(&[-3.5, 0.0, 3.5], 400.0);
        let cfg = PostOptConfig::desk(20);
        let state = BicycleState::new([0.0, 0.0], 0.0, 8.0);
        let a = straight_action(0.0, 8.0, 20);
        let all = score_proposals(&a, &state, &sc, &[], &cfg, Parallelism::default());
        assert!(all.len() > 1);
        assert_eq!(all[0].preference, 0.0);
        assert!(all[0].score.composite > 0.0);
        assert!(all[1..].iter().all(|p| p.preference < 0.0));
        let best = generate_and_score_proposals(&a, &state, &sc, &[], &cfg, Parallelism::default()).unwrap();
        let max = all.iter().map(|p| p.total).fold(f64::NEG_INFINITY, f64::max);
        assert_eq!(best.total, max);
        assert_eq!(best.index, all.iter().position(|p| p.total == max).unwrap());
    }

    #[test]
    fn wall_crossing_gated() {
        let sc = road(&[0.0], 400.0);
        let line = ReferenceLine::from_route(&sc).unwrap();
        let state = BicycleState::new([0.0, 0.0], 0.0, 8.0);
        let off = TrajectoryAction::new((1..=20).map(|j| [0.8 * j as f64, 0.4 * j as f64]).collect());
        let roll = rollout(LqrTracker::shared(), &state, &off, 20);
        let s = raw_score(&sc, &line, &state, &roll, &[]);
        assert!(!s.drivable);
        assert_eq!(rule_composite(&s, 1.0), 0.0);
    }

    #[test]
    fn composite_monotone_in_components() {
        let base = RuleScore {
            collision: false,
            drivable: true,
            red_light: false,
            progress: 10.0,
            max_accel: 1.0,
            max_jerk: 1.0,
            ttc_fraction: 0.8,
            speed_compliance: 0.9,
            composite: 0.0,
        };
        let c0 = rule_composite(&base, 0.7);
        assert!(rule_composite(&RuleScore { ttc_fraction: 0.5, ..base }, 0.7) <= c0);
        assert!(rule_composite(&RuleScore { speed_compliance: 0.2, ..base }, 0.7) <= c0);
        assert!(rule_composite(&RuleScore { max_jerk: 9.0, ..base }, 0.7) <= c0);
        assert!(rule_composite(&base, 0.3) <= c0);
        assert_eq!(rule_composite(&RuleScore { collision: true, ..base }, 0.7), 0.0);
    }

    #[test]
    fn braking_lead_proposal_keeps_gap() {
        let sc = road(&[0.0], 400.0);
        let cfg = PostOptConfig::desk(30);
        let state = BicycleState::new([0.0, 0.0], 0.0, 10.0);
        let lead_track = AgentTrack {
            id: 1,
            semantic: AgentKind::Vehicle,
            footprint: Footprint { length: 4.6, width: 1.9 },
            states: vec![
                AgentState { position: [20.0, 0.0], heading: 0.0, velocity: [8.0, 0.0] },
                AgentState { position: [20.8, 0.0], heading: 0.0, velocity: [7.7, 0.0] },
            ],
        };
        let pred = predict_all(&[lead_track], 30);
        let a = straight_action(0.0, 10.0, 30);
        let p = generate_and_score_proposals(&a, &state, &sc, &pred, &cfg, Parallelism::default()).unwrap();
        assert!(!p.score.collision);
        for (j, q) in p.rollout.iter().enumerate() {
            let gap = pred[0].at(j).position[0] - q[0] - 4.7;
            assert!(gap >= 0.0, "step {j}: {gap}");
        }
    }

    #[test]
    fn zero_target_path_is_zero() {
        let target = |_: f64| 0.0;
        let corridor = (1..10).map(|i| (i as f64 * 2.0, -1.5, 1.5)).collect();
        let input = PathQpInput {
            s_start: 0.0,
            s_end: 20.0,
            target: &target,
            corridor,
            start: None,
            knot_spacing: 5.0,
        };
        let sp = qp_path_plan(&input, [1.0, 0.1, 1.0, 1.0]).unwrap();
        for i in 0..=40 {
            assert!(sp.eval(i as f64 * 0.5)[0].abs() < 1e-8);
        }
        assert!(sp.continuity_residual() < 1e-8);
    }

    #[test]
    fn heavy_tracking_weight_follows_target() {
        let target = |s: f64| 0.8 * (s / 6.0).sin();
        let corridor = (1..10).map(|i| (i as f64 * 2.0, -3.0, 3.0)).collect();
        let input = PathQpInput {
            s_start: 0.0,
            s_end: 20.0,
            target: &target,
            corridor,
            start: None,
            knot_spacing: 5.0,
        };
        let sp = qp_path_plan(&input, [1e6, 0.1, 1.0, 1.0]).unwrap();
        for i in 1..10 {
            let s = i as f64 * 2.0;
            assert!((sp.eval(s)[0] - target(s)).abs() < 1e-4, "s={s}");
        }
    }

    #[test]
    fn crossed_corridor_infeasible() {
        let target = |_: f64| 0.0;
        let input = PathQpInput {
            s_start: 0.0,
            s_end: 10.0,
            target: &target,
            corridor: vec![(4.0, 1.0, -1.0)],
            start: None,
            knot_spacing: 5.0,
        };
        assert_eq!(qp_path_plan(&input, [1.0, 0.1, 1.0, 1.0]), Err(PostOptError::EmptyCorridor(4.0)));
        // contradictory but individually valid rows are detected by the solver
        let cons = PathQpInput {
            corridor: vec![(4.0, 1.0, 2.0), (4.0, -2.0, -1.5)],
            ..input
        };
        assert_eq!(qp_path_plan(&cons, [1.0, 0.1, 1.0, 1.0]), Err(PostOptError::Infeasible));
    }

    fn no_limit(_: f64) -> f64 {
        100.0
    }

    #[test]
    fn speed_plan_matches_feasible_target() {
        let target = |t: f64| 7.0 * t;
        let input = SpeedQpInput {
            horizon: 4.0,
            target: &target,
            start: Some((0.0, 7.0)),
            v_max: &no_limit,
            accel_bounds: Some((-6.0, 3.0)),
            cap: vec![],
            knot_spacing: 0.5,
            station_dt: 0.1,
            speed_rows: true,
        };
        let sp = qp_speed_plan(&input, [1.0, 0.0, 1.0, 1.0]).unwrap();
        for j in 0..=40 {
            let t = j as f64 * 0.1;
            assert!((sp.eval(t)[0] - target(t)).abs() < 1e-4);
        }
    }

    #[test]
    fn speed_plan_respects_cap() {
        let target = |t: f64| 7.0 * t;
        let cap: Vec<(f64, f64)> = (0..=40).map(|j| (j as f64 * 0.1, target(j as f64 * 0.1) - 5.0)).collect();
        let input = SpeedQpInput {
            horizon: 4.0,
            target: &target,
            start: None,
            v_max: &no_limit,
            accel_bounds: None,
            cap: cap.clone(),
            knot_spacing: 0.5,
            station_dt: 0.1,
            speed_rows: true,
        };
        let sp = qp_speed_plan(&input, [1.0, 0.0, 1.0, 1.0]).unwrap();
        for (t, c) in cap {
            assert!(sp.eval(t)[0] <= c + 1e-6);
        }
    }

    #[test]
    fn tracking_only_has_no_speed_bias() {
        for v in [0.5, 5.0, 25.0] {
            let target = move |t: f64| v * t + 3.0;
            let input = SpeedQpInput {
                horizon: 2.0,
                target: &target,
                start: None,
                v_max: &no_limit,
                accel_bounds: None,
                cap: vec![],
                knot_spacing: 0.5,
                station_dt: 0.1,
                speed_rows: false,
            };
            // a large first-derivative weight must be ignored
            let sp = qp_speed_plan(&input, [1.0, 50.0, 0.0, 0.0]).unwrap();
            for j in 0..=20 {
                let t = j as f64 * 0.1;
                assert!((sp.eval(t)[0] - target(t)).abs() < 1e-6, "v={v} t={t}");
            }
        }
    }

    #[test]
    fn refine_keeps_clean_centerline_action() {
        let sc = road(&[-3.5, 0.0, 3.5], 400.0);
        let cfg = PostOptConfig::desk(20);
        let state = BicycleState::new([0.0, 0.0], 0.0, 8.0);
        let a = straight_action(0.0, 8.0, 20);
        let out = refine(&a, &state, &sc, &[], &cfg, Parallelism::default());
        assert_eq!(out.fallback, None);
        assert_eq!(out.action.len(), 20);
        for (p, q) in out.action.points.iter().zip(&a.points) {
            assert!(geometry::dist(*p, *q) < 0.1, "{p:?} vs {q:?}");
        }
    }

    #[test]
    fn refine_pulls_swerve_back_inside() {
        let sc = road(&[0.0], 400.0);
        let cfg = PostOptConfig::desk(20);
        let state = BicycleState::new([0.0, 0.0], 0.0, 8.0);
        let swerve = TrajectoryAction::new((1..=20).map(|j| [0.8 * j as f64, 0.25 * j as f64]).collect());
        let out = refine(&swerve, &state, &sc, &[], &cfg, Parallelism::default());
        for p in &out.action.points {
            assert!(p[1].abs() <= 1.75 - 1.0 + 1e-6, "{p:?}");
        }
    }

    #[test]
    fn refine_stops_for_stopped_lead() {
        let sc = road(&[0.0], 400.0);
        let cfg = PostOptConfig::desk(80);
        let state = BicycleState::new([0.0, 0.0], 0.0, 8.0);
        let lead = stopped(1, 20.0, 80);
        let a = straight_action(0.0, 8.0, 80);
        let out = refine(&a, &state, &sc, std::slice::from_ref(&lead), &cfg, Parallelism::default());
        let pts = &out.action.points;
        let v_end = geometry::dist(pts[79], pts[78]) / DT;
        assert!(v_end < 1.0, "{v_end}");
        for p in pts {
            let gap = 20.0 - p[0] - 0.5 * (4.6 + 4.8);
            assert!(gap >= 2.0 - 1e-6, "{gap}");
        }
    }

    #[test]
    fn fallback_is_deterministic() {
        let sc = road(&[0.0], 400.0);
        let cfg = PostOptConfig::desk(20);
        let state = BicycleState::new([0.0, 0.0], 0.0, 8.0);
        let lead = stopped(1, 5.5, 20);
        let a = straight_action(0.0, 8.0, 20);
        let x = refine(&a, &state, &sc, std::slice::from_ref(&lead), &cfg, Parallelism::Sequential);
        let y = refine(&a, &state, &sc, std::slice::from_ref(&lead), &cfg, Parallelism::Parallel);
        assert_eq!(x, y);
        assert!(x.fallback.is_some());
    }
}
