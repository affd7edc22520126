use serde::{Deserialize, Serialize};

use crate::geometry::{self, Point};
use crate::scene::DT;

/// A planned trajectory: future positions at a fixed 0.1 s spacing, the first
/// point one period after the planning instant.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryAction {
    pub points: Vec<Point>,
}

impl TrajectoryAction {
    pub fn new(points: Vec<Point>) -> Self {
        Self { points }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn last(&self) -> Point {
        *self.points.last().expect("non-empty action")
    }

    /// Displacement from `origin` to the final point.
    pub fn reach(&self, origin: Point) -> f64 {
        geometry::dist(self.last(), origin)
    }

    pub fn transformed(&self, tf: &geometry::Rigid2) -> Self {
        Self::new(self.points.iter().map(|p| tf.apply(*p)).collect())
    }

    /// Root-mean-square pointwise distance; lengths must match.
    pub fn rms_distance(&self, other: &TrajectoryAction) -> f64 {
        debug_assert_eq!(self.len(), other.len());
        let sum: f64 = self
            .points
            .iter()
            .zip(&other.points)
            .map(|(a, b)| {
                let d = geometry::sub(*a, *b);
                geometry::dot(d, d)
            })
            .sum();
        (sum / self.len().max(1) as f64).sqrt()
    }

    /// Points expressed in the frame of `origin`/`heading`.
    pub fn to_local(&self, origin: Point, heading: f64) -> Vec<Point> {
        self.points.iter().map(|p| geometry::to_local(*p, origin, heading)).collect()
    }

    pub fn from_local(local: &[Point], origin: Point, heading: f64) -> Self {
        Self::new(local.iter().map(|p| geometry::to_world(*p, origin, heading)).collect())
    }

    pub fn horizon_seconds(&self) -> f64 {
        self.len() as f64 * DT
    }
}
