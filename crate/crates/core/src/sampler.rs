//! Candidate trajectories from piecewise polynomials in the Frenet frame.
//!
//! Longitudinal pieces are quartics (terminal position free), lateral pieces
//! quintics. Every piece starts from the evaluated end state of its
//! predecessor, so position, velocity and acceleration are continuous at the
//! knots. Lane keeping uses three pieces, lane changes two.

use nalgebra::{Matrix2, Matrix3, Vector2, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dynamics::BicycleState;
use crate::frenet::{FrenetError, FrenetPose, ReferenceLine};
use crate::geometry::wrap_angle;
use crate::scene::DT;
use crate::trajectory::TrajectoryAction;

#[derive(Debug, Error, PartialEq)]
pub enum SamplerError {
    #[error("piece duration {0} too small for a well-posed fit")]
    Singular(f64),
    #[error("sampler grids produced no admissible action; widen the grids")]
    Empty,
    #[error("invalid sampler config: {0}")]
    Config(String),
    #[error(transparent)]
    Frenet(#[from] FrenetError),
}

const MIN_DURATION: f64 = 1e-6;

/// Quartic `x(t)` with `x(0), x'(0), x''(0)` from `start` and `x'(T), x''(T)`
/// from `end`. Coefficients in ascending powers.
pub fn fit_longitudinal_piece(start: [f64; 3], end: [f64; 2], duration: f64) -> Result<[f64; 5], SamplerError> {
    if !(duration > MIN_DURATION) {
        return Err(SamplerError::Singular(duration));
    }
    let t = duration;
    let [x0, v0, a0] = start;
    let c2 = a0 / 2.0;
    let m = Matrix2::new(3.0 * t * t, 4.0 * t.powi(3), 6.0 * t, 12.0 * t * t);
    let rhs = Vector2::new(end[0] - v0 - a0 * t, end[1] - a0);
    let sol = m.lu().solve(&rhs).ok_or(SamplerError::Singular(duration))?;
    Ok([x0, v0, c2, sol[0], sol[1]])
}

/// Quintic `y(t)` matching position, velocity and acceleration at both ends.
pub fn fit_lateral_piece(start: [f64; 3], end: [f64; 3], duration: f64) -> Result<[f64; 6], SamplerError> {
    if !(duration > MIN_DURATION) {
        return Err(SamplerError::Singular(duration));
    }
    let t = duration;
    let [y0, v0, a0] = start;
    let (t2, t3, t4, t5) = (t * t, t.powi(3), t.powi(4), t.powi(5));
    let m = Matrix3::new(
        t3, t4, t5, //
        3.0 * t2, 4.0 * t3, 5.0 * t4, //
        6.0 * t, 12.0 * t2, 20.0 * t3,
    );
    let rhs = Vector3::new(
        end[0] - y0 - v0 * t - 0.5 * a0 * t2,
        end[1] - v0 - a0 * t,
        end[2] - a0,
    );
    let sol = m.lu().solve(&rhs).ok_or(SamplerError::Singular(duration))?;
    Ok([y0, v0, a0 / 2.0, sol[0], sol[1], sol[2]])
}

/// Value, first and second derivative of an ascending-power polynomial.
pub fn eval_poly(c: &[f64], t: f64) -> [f64; 3] {
    let mut v = [0.0; 3];
    for ck in c.iter().rev() {
        v[2] = v[2] * t + 2.0 * v[1];
        v[1] = v[1] * t + v[0];
        v[0] = v[0] * t + ck;
    }
    v
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Piece {
    pub duration: f64,
    pub lon: [f64; 5],
    pub lat: [f64; 6],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PiecewisePolyTrajectory {
    pub pieces: Vec<Piece>,
    pub frame: String,
}

impl PiecewisePolyTrajectory {
    pub fn total_duration(&self) -> f64 {
        self.pieces.iter().map(|p| p.duration).sum()
    }

    /// `(longitudinal, lateral)` derivatives up to second order at `t`;
    /// the last piece is extrapolated beyond its end.
    pub fn eval(&self, t: f64) -> ([f64; 3], [f64; 3]) {
        let mut start = 0.0;
        for (i, p) in self.pieces.iter().enumerate() {
            if t < start + p.duration || i + 1 == self.pieces.len() {
                let u = t - start;
                return (eval_poly(&p.lon, u), eval_poly(&p.lat, u));
            }
            start += p.duration;
        }
        unreachable!("trajectory has at least one piece")
    }

    /// Largest mismatch in value / first / second derivative across knots.
    pub fn knot_residual(&self) -> f64 {
        self.pieces
            .windows(2)
            .map(|w| {
                let lon_end = eval_poly(&w[0].lon, w[0].duration);
                let lat_end = eval_poly(&w[0].lat, w[0].duration);
                let lon_start = eval_poly(&w[1].lon, 0.0);
                let lat_start = eval_poly(&w[1].lat, 0.0);
                (0..3)
                    .map(|k| (lon_end[k] - lon_start[k]).abs().max((lat_end[k] - lat_start[k]).abs()))
                    .fold(0.0, f64::max)
            })
            .fold(0.0, f64::max)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Maneuver {
    LaneKeep,
    ChangeLeft,
    ChangeRight,
}

impl Maneuver {
    pub fn pieces(self) -> usize {
        match self {
            Maneuver::LaneKeep => 3,
            _ => 2,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SpeedMode {
    Absolute,
    /// Grid entries are offsets added to the current speed.
    Relative,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplerConfig {
    /// Duration of the first piece(s), seconds.
    pub piece_durations: Vec<f64>,
    /// Terminal lateral offsets from the target lane center, m.
    pub lateral_offsets: Vec<f64>,
    pub terminal_speeds: Vec<f64>,
    pub speed_mode: SpeedMode,
    pub maneuvers: Vec<Maneuver>,
    pub lane_width: f64,
    /// Cap on returned samples.
    pub max_samples: usize,
    pub horizon_steps: usize,
}

impl SamplerConfig {
    /// Dense training-time grid.
    pub fn desk(horizon_steps: usize) -> Self {
        let h = horizon_steps as f64 * DT;
        Self {
            piece_durations: vec![0.3 * h, 0.4 * h],
            lateral_offsets: vec![-0.8, -0.4, 0.0, 0.4, 0.8],
            terminal_speeds: vec![-4.0, -2.0, -1.0, 0.0, 1.0, 2.0],
            speed_mode: SpeedMode::Relative,
            maneuvers: vec![Maneuver::LaneKeep, Maneuver::ChangeLeft, Maneuver::ChangeRight],
            lane_width: 3.5,
            max_samples: 512,
            horizon_steps,
        }
    }

    pub fn validate(&self) -> Result<(), SamplerError> {
        if self.piece_durations.is_empty()
            || self.lateral_offsets.is_empty()
            || self.terminal_speeds.is_empty()
            || self.maneuvers.is_empty()
        {
            return Err(SamplerError::Config("grids must be non-empty".into()));
        }
        if self.max_samples == 0 || self.horizon_steps < 2 {
            return Err(SamplerError::Config("need max_samples >= 1 and horizon >= 2".into()));
        }
        let h = self.horizon_steps as f64 * DT;
        for d in &self.piece_durations {
            if !(*d > 0.0 && 2.0 * d < h) {
                return Err(SamplerError::Config(format!(
                    "piece duration {d} must satisfy 0 < 2d < horizon {h}"
                )));
            }
        }
        Ok(())
    }

    pub fn grid_size(&self) -> usize {
        self.maneuvers.len() * self.piece_durations.len() * self.lateral_offsets.len() * self.terminal_speeds.len()
    }
}

/// Initial Frenet state of the ego: `(s, s', s'')` and `(l, l', l'')`.
pub fn frenet_state(ego: &BicycleState, line: &ReferenceLine) -> Result<([f64; 3], [f64; 3]), FrenetError> {
    let pose = line.project(ego.position)?;
    let dh = wrap_angle(ego.heading - line.heading_at(pose.s));
    Ok((
        [pose.s, ego.speed * dh.cos(), 0.0],
        [pose.l, ego.speed * dh.sin(), 0.0],
    ))
}

/// Minimum-jerk rest-to-rest lateral profile from 0 to `delta` over `tau`,
/// evaluated at `t`.
fn min_jerk(delta: f64, tau: f64, t: f64) -> [f64; 3] {
    let u = (t / tau).clamp(0.0, 1.0);
    [
        delta * (10.0 * u.powi(3) - 15.0 * u.powi(4) + 6.0 * u.powi(5)),
        delta * (30.0 * u.powi(2) - 60.0 * u.powi(3) + 30.0 * u.powi(4)) / tau,
        delta * (60.0 * u - 180.0 * u.powi(2) + 120.0 * u.powi(3)) / (tau * tau),
    ]
}

#[derive(Debug, Clone, PartialEq)]
pub struct Candidate {
    pub action: TrajectoryAction,
    pub poly: PiecewisePolyTrajectory,
    pub maneuver: Maneuver,
    pub target_offset: f64,
    pub target_speed: f64,
}

#[allow(clippy::too_many_arguments)]
fn build(
    lon0: [f64; 3],
    lat0: [f64; 3],
    maneuver: Maneuver,
    d: f64,
    target_l: f64,
    lane_center: f64,
    lane_width: f64,
    v_t: f64,
    horizon: f64,
) -> Result<PiecewisePolyTrajectory, SamplerError> {
    let delta = target_l - lat0[0];
    // knot times and lateral knot states
    let (times, lat_knots): (Vec<f64>, Vec<[f64; 3]>) = match maneuver {
        Maneuver::LaneKeep => {
            let mid = min_jerk(delta, 2.0 * d, d);
            (
                vec![d, 2.0 * d, horizon],
                vec![[lat0[0] + mid[0], mid[1], mid[2]], [target_l, 0.0, 0.0], [target_l, 0.0, 0.0]],
            )
        }
        Maneuver::ChangeLeft | Maneuver::ChangeRight => {
            let tau = horizon - d;
            let side = if maneuver == Maneuver::ChangeLeft { 1.0 } else { -1.0 };
            let boundary = lane_center + side * lane_width / 2.0;
            let crossed = |t: f64| (lat0[0] + min_jerk(delta, tau, t)[0] - boundary) * side >= 0.0;
            let t_b = if crossed(0.0) || !crossed(tau) {
                tau / 2.0
            } else {
                let (mut a, mut b) = (0.0, tau);
                for _ in 0..60 {
                    let m = 0.5 * (a + b);
                    if crossed(m) {
                        b = m
                    } else {
                        a = m
                    }
                }
                0.5 * (a + b)
            };
            let k = min_jerk(delta, tau, t_b);
            (vec![t_b, horizon], vec![[lat0[0] + k[0], k[1], k[2]], [target_l, 0.0, 0.0]])
        }
    };
    let v0 = lon0[1];
    let slope = (v_t - v0) / horizon;
    let mut pieces = Vec::with_capacity(times.len());
    let (mut lon_start, mut lat_start, mut t_prev) = (lon0, lat0, 0.0);
    for (i, (&t, lat_end)) in times.iter().zip(&lat_knots).enumerate() {
        let dur = t - t_prev;
        let last = i + 1 == times.len();
        let lon_end = if last { [v_t, 0.0] } else { [v0 + slope * t, slope] };
        let lon = fit_longitudinal_piece(lon_start, lon_end, dur)?;
        let lat = fit_lateral_piece(lat_start, *lat_end, dur)?;
        lon_start = eval_poly(&lon, dur);
        lat_start = eval_poly(&lat, dur);
        pieces.push(Piece { duration: dur, lon, lat });
        t_prev = t;
    }
    Ok(PiecewisePolyTrajectory {
        pieces,
        frame: "route".into(),
    })
}

/// Enumerates the grid product, drops samples with backward motion and
/// subsamples evenly down to `max_samples`.
pub fn sample_candidates(
    ego: &BicycleState,
    line: &ReferenceLine,
    cfg: &SamplerConfig,
) -> Result<Vec<Candidate>, SamplerError> {
    cfg.validate()?;
    let (lon0, lat0) = frenet_state(ego, line)?;
    let horizon = cfg.horizon_steps as f64 * DT;
    let lane_center = (lat0[0] / cfg.lane_width).round() * cfg.lane_width;
    let mut out = Vec::new();
    for &maneuver in &cfg.maneuvers {
        let lane = match maneuver {
            Maneuver::LaneKeep => lane_center,
            Maneuver::ChangeLeft => lane_center + cfg.lane_width,
            Maneuver::ChangeRight => lane_center - cfg.lane_width,
        };
        for &d in &cfg.piece_durations {
            for &offset in &cfg.lateral_offsets {
                for &speed in &cfg.terminal_speeds {
                    let v_t = match cfg.speed_mode {
                        SpeedMode::Absolute => speed,
                        SpeedMode::Relative => lon0[1] + speed,
                    }
                    .max(0.0);
                    let target_l = lane + offset;
                    let poly = build(lon0, lat0, maneuver, d, target_l, lane_center, cfg.lane_width, v_t, horizon)?;
                    let times: Vec<f64> = (1..=cfg.horizon_steps).map(|j| j as f64 * DT).collect();
                    let backward = times
                        .iter()
                        .chain(poly.pieces.iter().scan(0.0, |acc, p| {
                            *acc += p.duration;
                            Some(*acc)
                        }).collect::<Vec<_>>().iter())
                        .any(|&t| poly.eval(t).0[1] < -1e-9);
                    if backward {
                        continue;
                    }
                    let samples: Vec<FrenetPose> = times
                        .iter()
                        .map(|&t| {
                            let (lon, lat) = poly.eval(t);
                            FrenetPose::new(lon[0], lat[0])
                        })
                        .collect();
                    let (action, _) = line.trajectory_to_cartesian(&samples)?;
                    out.push(Candidate {
                        action,
                        poly,
                        maneuver,
                        target_offset: target_l,
                        target_speed: v_t,
                    });
                }
            }
        }
    }
    if out.is_empty() {
        return Err(SamplerError::Empty);
    }
    if out.len() > cfg.max_samples {
        let n = out.len();
        let keep: Vec<usize> = (0..cfg.max_samples).map(|i| i * n / cfg.max_samples).collect();
        let mut it = keep.into_iter().peekable();
        out = out
            .into_iter()
            .enumerate()
            .filter_map(|(i, c)| {
                if it.peek() == Some(&i) {
                    it.next();
                    Some(c)
                } else {
                    None
                }
            })
            .collect();
    }
    Ok(out)
}

pub fn sample_actions(
    ego: &BicycleState,
    line: &ReferenceLine,
    cfg: &SamplerConfig,
) -> Result<Vec<TrajectoryAction>, SamplerError> {
    Ok(sample_candidates(ego, line, cfg)?.into_iter().map(|c| c.action).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Dense Gaussian elimination with partial pivoting, kept separate from
    /// the reduced solves used by the fitting routines.
    fn dense_solve(mut a: Vec<Vec<f64>>, mut b: Vec<f64>) -> Vec<f64> {
        let n = b.len();
        for c in 0..n {
            let p = (c..n).max_by(|&i, &j| a[i][c].abs().total_cmp(&a[j][c].abs())).unwrap();
            a.swap(c, p);
            b.swap(c, p);
            for r in c + 1..n {
                let f = a[r][c] / a[c][c];
                for k in c..n {
                    a[r][k] -= f * a[c][k];
                }
                b[r] -= f * b[c];
            }
        }
        let mut x = vec![0.0; n];
        for r in (0..n).rev() {
            let s: f64 = (r + 1..n).map(|k| a[r][k] * x[k]).sum();
            x[r] = (b[r] - s) / a[r][r];
        }
        x
    }

    fn deriv_row(n: usize, t: f64, order: usize) -> Vec<f64> {
        (0..n)
            .map(|k| {
                if k < order {
                    0.0
                } else {
                    let f: f64 = (0..order).map(|i| (k - i) as f64).product();
                    f * t.powi((k - order) as i32)
                }
            })
            .collect()
    }

    #[test]
    fn constant_speed_quartic() {
        for t in [0.5, 2.0, 7.0] {
            let c = fit_longitudinal_piece([0.0, 5.0, 0.0], [5.0, 0.0], t).unwrap();
            for (got, want) in c.iter().zip([0.0, 5.0, 0.0, 0.0, 0.0]) {
                assert!((got - want).abs() < 1e-12);
            }
        }
        let c = fit_longitudinal_piece([0.0, 0.0, 0.0], [0.0, 0.0], 3.0).unwrap();
        assert!(c.iter().all(|v| v.abs() < 1e-15));
    }

    #[test]
    fn quartic_matches_dense_oracle() {
        let t = 5.0;
        let rows = vec![
            deriv_row(5, 0.0, 0),
            deriv_row(5, 0.0, 1),
            deriv_row(5, 0.0, 2),
            deriv_row(5, t, 1),
            deriv_row(5, t, 2),
        ];
        let oracle = dense_solve(rows, vec![0.0, 0.0, 0.0, 10.0, 0.0]);
        let c = fit_longitudinal_piece([0.0, 0.0, 0.0], [10.0, 0.0], t).unwrap();
        for (a, b) in c.iter().zip(&oracle) {
            assert!((a - b).abs() < 1e-10, "{c:?} vs {oracle:?}");
        }
    }

    #[test]
    fn quintic_min_jerk() {
        let c = fit_lateral_piece([0.0, 0.0, 0.0], [1.0, 0.0, 0.0], 1.0).unwrap();
        for (a, b) in c.iter().zip([0.0, 0.0, 0.0, 10.0, -15.0, 6.0]) {
            assert!((a - b).abs() < 1e-9);
        }
        let n = fit_lateral_piece([0.0, 0.0, 0.0], [-1.0, 0.0, 0.0], 1.0).unwrap();
        for (a, b) in c.iter().zip(&n) {
            assert!((a + b).abs() < 1e-12);
        }
        let k = fit_lateral_piece([2.5, 0.0, 0.0], [2.5, 0.0, 0.0], 1.7).unwrap();
        assert_eq!(k[0], 2.5);
        assert!(k[1..].iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn singular_duration_rejected() {
        assert_eq!(
            fit_lateral_piece([0.0; 3], [1.0, 0.0, 0.0], 0.0),
            Err(SamplerError::Singular(0.0))
        );
        assert!(fit_longitudinal_piece([0.0; 3], [1.0, 0.0], 1e-9).is_err());
    }

    #[test]
    fn poly_derivatives_match_finite_differences() {
        let c = [0.3, -1.2, 0.7, 0.25, -0.04, 0.002];
        let h = 1e-5;
        for t in [0.1, 0.9, 2.3] {
            let v = eval_poly(&c, t);
            let f = |t: f64| eval_poly(&c, t)[0];
            let d1 = (f(t + h) - f(t - h)) / (2.0 * h);
            let g = |t: f64| eval_poly(&c, t)[1];
            let d2 = (g(t + h) - g(t - h)) / (2.0 * h);
            assert!((v[1] - d1).abs() <= 1e-6 * v[1].abs().max(1.0));
            assert!((v[2] - d2).abs() <= 1e-6 * v[2].abs().max(1.0));
        }
    }

    fn line() -> ReferenceLine {
        ReferenceLine::from_polyline(&[[0.0, 0.0], [300.0, 0.0]]).unwrap()
    }

    #[test]
    fn single_entry_follows_centerline() {
        let cfg = SamplerConfig {
            piece_durations: vec![0.6],
            lateral_offsets: vec![0.0],
            terminal_speeds: vec![8.0],
            speed_mode: SpeedMode::Absolute,
            maneuvers: vec![Maneuver::LaneKeep],
            lane_width: 3.5,
            max_samples: 512,
            horizon_steps: 20,
        };
        let ego = BicycleState::new([10.0, 0.0], 0.0, 8.0);
        let acts = sample_actions(&ego, &line(), &cfg).unwrap();
        assert_eq!(acts.len(), 1);
        for (j, p) in acts[0].points.iter().enumerate() {
            assert!((p[0] - (10.0 + 8.0 * DT * (j + 1) as f64)).abs() < 1e-9);
            assert!(p[1].abs() < 1e-12);
        }
    }

    #[test]
    fn counting_grid() {
        let cfg = SamplerConfig {
            piece_durations: vec![0.6],
            lateral_offsets: vec![-0.5, 0.0, 0.5],
            terminal_speeds: vec![4.0, 5.0, 6.0],
            speed_mode: SpeedMode::Absolute,
            maneuvers: vec![Maneuver::LaneKeep],
            lane_width: 3.5,
            max_samples: 512,
            horizon_steps: 20,
        };
        let ego = BicycleState::new([10.0, 0.0], 0.0, 5.0);
        assert_eq!(sample_actions(&ego, &line(), &cfg).unwrap().len(), 9);
        let capped = SamplerConfig { max_samples: 4, ..cfg.clone() };
        assert_eq!(sample_actions(&ego, &line(), &capped).unwrap().len(), 4);
    }

    #[test]
    fn backward_samples_filtered_and_empty_is_error() {
        let cfg = SamplerConfig {
            piece_durations: vec![0.6],
            lateral_offsets: vec![0.0],
            terminal_speeds: vec![0.0],
            speed_mode: SpeedMode::Absolute,
            maneuvers: vec![Maneuver::LaneKeep],
            lane_width: 3.5,
            max_samples: 512,
            horizon_steps: 20,
        };
        // going 0 -> 0 speed is fine (stays still)
        let ego = BicycleState::new([10.0, 0.0], 0.0, 0.0);
        assert_eq!(sample_actions(&ego, &line(), &cfg).unwrap().len(), 1);
        // an ego driving backwards relative to the line cannot satisfy x' >= 0
        let ego = BicycleState::new([10.0, 0.0], std::f64::consts::PI, 6.0);
        assert_eq!(sample_actions(&ego, &line(), &cfg), Err(SamplerError::Empty));
    }

    #[test]
    fn knots_are_continuous_and_start_matches_ego() {
        let cfg = SamplerConfig::desk(20);
        let mut ego = BicycleState::new([20.0, 0.7], 0.05, 9.0);
        ego.steering = 0.01;
        let line = line();
        let cands = sample_candidates(&ego, &line, &cfg).unwrap();
        assert!(cands.len() > 50);
        let (lon0, lat0) = frenet_state(&ego, &line).unwrap();
        for c in &cands {
            assert!(c.poly.knot_residual() < 1e-9);
            let (lon, lat) = c.poly.eval(0.0);
            assert!((lon[0] - lon0[0]).abs() < 1e-12 && (lon[1] - lon0[1]).abs() < 1e-12);
            assert!((lat[0] - lat0[0]).abs() < 1e-12 && (lat[1] - lat0[1]).abs() < 1e-12);
            assert_eq!(c.action.len(), 20);
            assert_eq!(c.poly.pieces.len(), c.maneuver.pieces());
        }
    }
}
