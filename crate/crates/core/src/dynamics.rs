//! Kinematic bicycle propagation and an error-state LQR trajectory tracker.

use std::sync::OnceLock;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{self, wrap_angle, Point};
use crate::scene::DT;
use crate::trajectory::TrajectoryAction;

pub const SUBSTEPS: usize = 4;
pub const DEFAULT_WHEELBASE: f64 = 2.9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VehicleLimits {
    pub max_steering: f64,
    pub max_accel: f64,
    pub max_steering_rate: f64,
}

impl Default for VehicleLimits {
    fn default() -> Self {
        Self {
            max_steering: 0.6,
            max_accel: 4.0,
            max_steering_rate: 0.5,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BicycleState {
    pub position: Point,
    pub heading: f64,
    pub speed: f64,
    pub steering: f64,
    pub wheelbase: f64,
}

impl BicycleState {
    pub fn new(position: Point, heading: f64, speed: f64) -> Self {
        Self {
            position,
            heading,
            speed,
            steering: 0.0,
            wheelbase: DEFAULT_WHEELBASE,
        }
    }

    pub fn velocity(&self) -> Point {
        geometry::scale(geometry::heading_vector(self.heading), self.speed)
    }

    pub fn transformed(&self, tf: &geometry::Rigid2) -> Self {
        Self {
            position: tf.apply(self.position),
            heading: tf.apply_heading(self.heading),
            ..*self
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ControlInput {
    /// m/s^2
    pub accel: f64,
    /// rad/s
    pub steering_rate: f64,
}

impl ControlInput {
    pub fn clamped(&self, limits: &VehicleLimits) -> Self {
        Self {
            accel: self.accel.clamp(-limits.max_accel, limits.max_accel),
            steering_rate: self
                .steering_rate
                .clamp(-limits.max_steering_rate, limits.max_steering_rate),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Saturation {
    pub control: bool,
    pub speed: bool,
    pub steering: bool,
}

impl Saturation {
    pub fn any(&self) -> bool {
        self.control || self.speed || self.steering
    }
}

/// Forward-Euler integration with [`SUBSTEPS`] sub-steps. Controls outside
/// the limits are clamped first; speed and steering are clamped after every
/// sub-step. Each clamp is reported rather than treated as an error.
pub fn step_bicycle_with(
    state: &BicycleState,
    control: &ControlInput,
    dt: f64,
    limits: &VehicleLimits,
) -> (BicycleState, Saturation) {
    let u = control.clamped(limits);
    let mut sat = Saturation {
        control: u != *control,
        ..Default::default()
    };
    let h = dt / SUBSTEPS as f64;
    let mut s = *state;
    for _ in 0..SUBSTEPS {
        let (sin, cos) = s.heading.sin_cos();
        let x = s.position[0] + h * s.speed * cos;
        let y = s.position[1] + h * s.speed * sin;
        let heading = s.heading + h * s.speed * s.steering.tan() / s.wheelbase;
        let mut speed = s.speed + h * u.accel;
        let mut steering = s.steering + h * u.steering_rate;
        if speed < 0.0 {
            speed = 0.0;
            sat.speed = true;
        }
        if steering.abs() > limits.max_steering {
            steering = steering.clamp(-limits.max_steering, limits.max_steering);
            sat.steering = true;
        }
        s = BicycleState {
            position: [x, y],
            heading: wrap_angle(heading),
            speed,
            steering,
            wheelbase: s.wheelbase,
        };
    }
    (s, sat)
}

pub fn step_bicycle(state: &BicycleState, control: &ControlInput, dt: f64) -> BicycleState {
    step_bicycle_with(state, control, dt, &VehicleLimits::default()).0
}

#[derive(Debug, Error, PartialEq)]
pub enum LqrError {
    #[error("Riccati iteration did not converge (residual {residual:e})")]
    NonConvergence { residual: f64 },
    #[error("matrix dimensions do not match")]
    Shape,
}

pub const RICCATI_TOL: f64 = 1e-10;
pub const RICCATI_MAX_ITER: usize = 10_000;

fn inf_norm(m: &DMatrix<f64>) -> f64 {
    m.iter().fold(0.0_f64, |acc, v| acc.max(v.abs()))
}

/// Discrete-time infinite-horizon LQR gain from the Riccati fixed point.
/// Also returns the converged cost-to-go matrix.
pub fn lqr_solve(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    q: &DMatrix<f64>,
    r: &DMatrix<f64>,
) -> Result<(DMatrix<f64>, DMatrix<f64>), LqrError> {
    let n = a.nrows();
    let m = b.ncols();
    if a.ncols() != n || b.nrows() != n || q.shape() != (n, n) || r.shape() != (m, m) {
        return Err(LqrError::Shape);
    }
    let at = a.transpose();
    let bt = b.transpose();
    let mut p = q.clone();
    let mut residual = f64::INFINITY;
    for _ in 0..RICCATI_MAX_ITER {
        let btp = &bt * &p;
        let s = r + &btp * b;
        let Some(s_inv) = s.try_inverse() else {
            return Err(LqrError::NonConvergence { residual });
        };
        let next = q + &at * &p * a - &at * &p * b * &s_inv * &btp * a;
        residual = inf_norm(&(&next - &p));
        p = next;
        if !residual.is_finite() {
            return Err(LqrError::NonConvergence { residual });
        }
        if residual < RICCATI_TOL {
            let k = (r + &bt * &p * b)
                .try_inverse()
                .ok_or(LqrError::NonConvergence { residual })?
                * &bt
                * &p
                * a;
            return Ok((k, p));
        }
    }
    Err(LqrError::NonConvergence { residual })
}

pub fn lqr_gain(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    q: &DMatrix<f64>,
    r: &DMatrix<f64>,
) -> Result<DMatrix<f64>, LqrError> {
    lqr_solve(a, b, q, r).map(|(k, _)| k)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrackerConfig {
    /// Weights on (lateral, heading, speed, station) error.
    pub q: [f64; 4],
    /// Weights on (acceleration, steering) deviation.
    pub r: [f64; 2],
    pub limits: VehicleLimits,
    pub wheelbase: f64,
}

impl Default for TrackerConfig {
    fn default() -> Self {
        Self {
            q: [1.0, 10.0, 1.0, 1.0],
            r: [1.0, 10.0],
            limits: VehicleLimits::default(),
            wheelbase: DEFAULT_WHEELBASE,
        }
    }
}

const SPEED_BIN: f64 = 0.5;
const SPEED_BINS: usize = 81;

/// Linearized error dynamics at `speed`; state (lateral, heading, speed,
/// station), input (acceleration, steering).
pub fn error_model(speed: f64, wheelbase: f64) -> (DMatrix<f64>, DMatrix<f64>) {
    let mut a = DMatrix::<f64>::identity(4, 4);
    a[(0, 1)] = DT * speed;
    a[(3, 2)] = DT;
    let mut b = DMatrix::<f64>::zeros(4, 2);
    b[(1, 1)] = DT * speed / wheelbase;
    b[(2, 0)] = DT;
    (a, b)
}

/// Interpolated reference sample of a planned trajectory.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReferenceSample {
    pub position: Point,
    pub heading: f64,
    pub speed: f64,
    pub accel: f64,
    pub curvature: f64,
}

/// Kinematic profile of an action: knots at t = 0..N (the t = 0 knot is
/// extrapolated from the first two points).
fn knot_profile(action: &TrajectoryAction, fallback_heading: f64) -> Option<Vec<ReferenceSample>> {
    let pts = &action.points;
    if pts.is_empty() {
        return None;
    }
    let mut knots: Vec<Point> = Vec::with_capacity(pts.len() + 1);
    let p0 = if pts.len() >= 2 {
        geometry::sub(geometry::scale(pts[0], 2.0), pts[1])
    } else {
        pts[0]
    };
    knots.push(p0);
    knots.extend_from_slice(pts);
    let spread = knots.iter().map(|p| geometry::dist(*p, knots[0])).fold(0.0, f64::max);
    if spread < 1e-6 {
        return None;
    }
    let n = knots.len();
    let vel: Vec<Point> = (0..n)
        .map(|i| {
            let (a, b) = (i.saturating_sub(1), (i + 1).min(n - 1));
            geometry::scale(geometry::sub(knots[b], knots[a]), 1.0 / (DT * (b - a) as f64))
        })
        .collect();
    let speed: Vec<f64> = vel.iter().map(|v| geometry::norm(*v)).collect();
    let mut heading: Vec<Option<f64>> = vel
        .iter()
        .zip(&speed)
        .map(|(v, s)| (*s > 0.05).then(|| v[1].atan2(v[0])))
        .collect();
    // Fill headings of near-stationary knots from their neighbours.
    let first = heading.iter().flatten().next().copied().unwrap_or(fallback_heading);
    let mut last = first;
    for h in heading.iter_mut() {
        match h {
            Some(v) => last = *v,
            None => *h = Some(last),
        }
    }
    let heading: Vec<f64> = heading.into_iter().map(|h| h.unwrap()).collect();
    Some(
        (0..n)
            .map(|i| {
                let (a, b) = (i.saturating_sub(1), (i + 1).min(n - 1));
                let dt = DT * (b - a) as f64;
                let accel = (speed[b] - speed[a]) / dt;
                let ds = 0.5 * (speed[a] + speed[b]) * dt;
                let curvature = if ds > 1e-3 { wrap_angle(heading[b] - heading[a]) / ds } else { 0.0 };
                ReferenceSample {
                    position: knots[i],
                    heading: heading[i],
                    speed: speed[i],
                    accel,
                    curvature,
                }
            })
            .collect(),
    )
}

fn sample_at(knots: &[ReferenceSample], time: f64) -> ReferenceSample {
    let f = (time / DT).clamp(0.0, (knots.len() - 1) as f64);
    let i = (f.floor() as usize).min(knots.len().saturating_sub(2));
    let u = (f - i as f64).clamp(0.0, 1.0);
    let (a, b) = (&knots[i], &knots[(i + 1).min(knots.len() - 1)]);
    ReferenceSample {
        position: geometry::lerp(a.position, b.position, u),
        heading: wrap_angle(a.heading + wrap_angle(b.heading - a.heading) * u),
        speed: a.speed + (b.speed - a.speed) * u,
        accel: a.accel + (b.accel - a.accel) * u,
        curvature: a.curvature + (b.curvature - a.curvature) * u,
    }
}

/// Reference pose of `action` at `time` seconds after the planning instant.
pub fn reference_at(action: &TrajectoryAction, time: f64, fallback_heading: f64) -> Option<ReferenceSample> {
    knot_profile(action, fallback_heading).map(|k| sample_at(&k, time))
}

/// Speed-scheduled error-state LQR tracker.
#[derive(Debug, Clone)]
pub struct LqrTracker {
    config: TrackerConfig,
    gains: Vec<DMatrix<f64>>,
}

impl LqrTracker {
    pub fn new(config: TrackerConfig) -> Result<Self, LqrError> {
        let q = DMatrix::from_diagonal(&nalgebra::DVector::from_row_slice(&config.q));
        let r = DMatrix::from_diagonal(&nalgebra::DVector::from_row_slice(&config.r));
        let gains = (0..SPEED_BINS)
            .map(|i| {
                let v = (i as f64 * SPEED_BIN).max(SPEED_BIN);
                let (a, b) = error_model(v, config.wheelbase);
                lqr_gain(&a, &b, &q, &r)
            })
            .collect::<Result<_, _>>()?;
        Ok(Self { config, gains })
    }

    /// Shared tracker with the default configuration.
    pub fn shared() -> &'static LqrTracker {
        static TRACKER: OnceLock<LqrTracker> = OnceLock::new();
        TRACKER.get_or_init(|| LqrTracker::new(TrackerConfig::default()).expect("default LQR converges"))
    }

    pub fn config(&self) -> &TrackerConfig {
        &self.config
    }

    fn gain(&self, speed: f64) -> &DMatrix<f64> {
        let i = ((speed / SPEED_BIN).round().max(0.0) as usize).min(SPEED_BINS - 1);
        &self.gains[i]
    }

    /// Control that tracks `action`, `step_in_plan` periods after it was
    /// issued. A degenerate action (no motion) yields a full brake.
    pub fn track(&self, state: &BicycleState, action: &TrajectoryAction, step_in_plan: usize) -> ControlInput {
        let limits = &self.config.limits;
        let Some(knots) = knot_profile(action, state.heading) else {
            return ControlInput {
                accel: -limits.max_accel,
                steering_rate: 0.0,
            };
        };
        let r = sample_at(&knots, step_in_plan as f64 * DT);
        let d = geometry::sub(state.position, r.position);
        let t = geometry::heading_vector(r.heading);
        let n = [-t[1], t[0]];
        let err = nalgebra::DVector::from_row_slice(&[
            geometry::dot(d, n),
            wrap_angle(state.heading - r.heading),
            state.speed - r.speed,
            geometry::dot(d, t),
        ]);
        let u = -(self.gain(r.speed) * err);
        let steer_ff = (state.wheelbase * r.curvature).atan();
        let accel = r.accel + u[0];
        let steer_cmd = (steer_ff + u[1]).clamp(-limits.max_steering, limits.max_steering);
        ControlInput {
            accel,
            steering_rate: (steer_cmd - state.steering) / DT,
        }
        .clamped(limits)
    }
}

pub fn track_trajectory(state: &BicycleState, action: &TrajectoryAction, step_in_plan: usize) -> ControlInput {
    LqrTracker::shared().track(state, action, step_in_plan)
}

/// Open-loop rollout of `action` with the tracker for `steps` periods.
pub fn rollout(
    tracker: &LqrTracker,
    start: &BicycleState,
    action: &TrajectoryAction,
    steps: usize,
) -> Vec<(BicycleState, ControlInput)> {
    let mut out = Vec::with_capacity(steps);
    let mut s = *start;
    for k in 0..steps {
        let u = tracker.track(&s, action, k);
        s = step_bicycle_with(&s, &u, DT, &tracker.config.limits).0;
        out.push((s, u));
    }
    out
}
