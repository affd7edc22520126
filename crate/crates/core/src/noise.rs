//! Rotational exploration noise on trajectory actions.
//!
//! A single radial magnitude and direction are drawn per call; the
//! perturbation grows linearly along the horizon so the first point barely
//! moves and the last point moves by the full offset.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::geometry::{self, Point};
use crate::trajectory::TrajectoryAction;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseParams {
    /// Exploration scale for actions sent to the environment.
    pub beta: f64,
    /// Target-policy smoothing scale.
    pub beta_prime: f64,
    /// Clip factor for the smoothing noise.
    pub clip_c: f64,
}

impl Default for NoiseParams {
    fn default() -> Self {
        Self {
            beta: 0.1,
            beta_prime: 0.2,
            clip_c: 0.5,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoiseDraw {
    pub epsilon: f64,
    pub theta: f64,
}

fn displacement(action: &TrajectoryAction, origin: Point) -> f64 {
    if action.is_empty() {
        0.0
    } else {
        action.reach(origin)
    }
}

/// Draws `eps ~ N(0, beta * d^2)` and `theta ~ U[0, 2pi)`; `d` is the
/// displacement from `origin` to the final point.
pub fn draw<R: Rng + ?Sized>(action: &TrajectoryAction, origin: Point, beta: f64, rng: &mut R) -> NoiseDraw {
    let d = displacement(action, origin);
    let var = beta * d * d;
    let epsilon = if var > 0.0 {
        Normal::new(0.0, var.sqrt()).expect("finite std").sample(rng)
    } else {
        0.0
    };
    let theta = rng.random_range(0.0..std::f64::consts::TAU);
    NoiseDraw { epsilon, theta }
}

/// Point `j` (1-based) moves by `eps * j / T_p` along direction `theta`.
pub fn apply_draw(action: &TrajectoryAction, draw: NoiseDraw) -> TrajectoryAction {
    let n = action.len() as f64;
    let dir = geometry::heading_vector(draw.theta);
    TrajectoryAction::new(
        action
            .points
            .iter()
            .enumerate()
            .map(|(j, p)| geometry::add(*p, geometry::scale(dir, draw.epsilon * (j + 1) as f64 / n)))
            .collect(),
    )
}

pub fn apply_trajectory_noise<R: Rng + ?Sized>(
    action: &TrajectoryAction,
    origin: Point,
    beta: f64,
    rng: &mut R,
) -> TrajectoryAction {
    let d = draw(action, origin, beta, rng);
    apply_draw(action, d)
}

/// As [`apply_trajectory_noise`] with `eps` clipped to `[-c d^2, c d^2]`.
pub fn apply_clipped_trajectory_noise<R: Rng + ?Sized>(
    action: &TrajectoryAction,
    origin: Point,
    beta: f64,
    clip: f64,
    rng: &mut R,
) -> TrajectoryAction {
    let mut d = draw(action, origin, beta, rng);
    let disp = displacement(action, origin);
    let bound = clip * disp * disp;
    d.epsilon = d.epsilon.clamp(-bound, bound);
    apply_draw(action, d)
}
