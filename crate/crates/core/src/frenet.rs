//! Arc-length parameterized reference lines and Cartesian/Frenet transforms.
//!
//! The line is a polyline resampled at a fixed resolution with linear
//! position interpolation. Tangent headings are interpolated linearly between
//! vertices so that the lateral direction varies continuously; this makes
//! `to_cartesian` the exact inverse of `project` wherever the projection is
//! unique.

use thiserror::Error;

use crate::geometry::{self, wrap_angle, Point};
use crate::scene::Scenario;
use crate::trajectory::TrajectoryAction;

pub const DEFAULT_RESOLUTION: f64 = 1.0;
pub const DEFAULT_CORRIDOR: f64 = 50.0;

#[derive(Debug, Error, PartialEq)]
pub enum FrenetError {
    #[error("reference line needs at least two distinct points")]
    Degenerate,
    #[error("point is {distance:.2} m from the reference line (corridor {corridor:.2} m)")]
    OutOfCorridor { distance: f64, corridor: f64 },
    #[error("route is empty or references unknown polygons")]
    BadRoute,
    #[error("need at least two samples")]
    TooFewSamples,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FrenetPose {
    pub s: f64,
    /// Lateral offset, positive to the left of the tangent.
    pub l: f64,
}

impl FrenetPose {
    pub fn new(s: f64, l: f64) -> Self {
        Self { s, l }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReferenceLine {
    points: Vec<Point>,
    s: Vec<f64>,
    headings: Vec<f64>,
    curvature: Vec<f64>,
}

impl ReferenceLine {
    pub fn from_polyline(input: &[Point]) -> Result<Self, FrenetError> {
        Self::with_resolution(input, DEFAULT_RESOLUTION)
    }

    pub fn with_resolution(input: &[Point], resolution: f64) -> Result<Self, FrenetError> {
        let mut pts: Vec<Point> = Vec::with_capacity(input.len());
        for p in input {
            if pts.last().is_none_or(|q| geometry::dist(*q, *p) > 1e-9) {
                pts.push(*p);
            }
        }
        if pts.len() < 2 {
            return Err(FrenetError::Degenerate);
        }
        let mut cum = vec![0.0];
        for w in pts.windows(2) {
            cum.push(cum.last().unwrap() + geometry::dist(w[0], w[1]));
        }
        let total = *cum.last().unwrap();
        let n = (total / resolution).ceil().max(1.0) as usize;
        let mut points = Vec::with_capacity(n + 1);
        let mut seg = 0;
        for i in 0..=n {
            let target = (i as f64 * resolution).min(total);
            while seg + 2 < cum.len() && cum[seg + 1] < target {
                seg += 1;
            }
            let len = cum[seg + 1] - cum[seg];
            let t = if len > 0.0 { ((target - cum[seg]) / len).clamp(0.0, 1.0) } else { 0.0 };
            points.push(geometry::lerp(pts[seg], pts[seg + 1], t));
        }
        // the last two samples can nearly coincide when total is almost a multiple
        if points.len() > 2 && geometry::dist(points[points.len() - 2], points[points.len() - 1]) < 1e-6 {
            let last = points.pop().unwrap();
            *points.last_mut().unwrap() = last;
        }
        Ok(Self::from_samples(points))
    }

    fn from_samples(points: Vec<Point>) -> Self {
        let n = points.len();
        let mut s = vec![0.0; n];
        for i in 1..n {
            s[i] = s[i - 1] + geometry::dist(points[i - 1], points[i]);
        }
        let seg_heading = |i: usize| {
            let d = geometry::sub(points[i + 1], points[i]);
            d[1].atan2(d[0])
        };
        let mut headings = vec![0.0; n];
        for i in 1..n - 1 {
            let d = geometry::sub(points[i + 1], points[i - 1]);
            headings[i] = d[1].atan2(d[0]);
        }
        // end tangents extrapolated so constant-curvature lines stay exact
        if n > 2 {
            headings[0] = wrap_angle(headings[1] - 2.0 * wrap_angle(headings[1] - seg_heading(0)));
            headings[n - 1] = wrap_angle(headings[n - 2] + 2.0 * wrap_angle(seg_heading(n - 2) - headings[n - 2]));
        } else {
            headings[0] = seg_heading(0);
            headings[1] = seg_heading(0);
        }
        let mut curvature = vec![0.0; n];
        for i in 0..n {
            let (a, b) = (i.saturating_sub(1), (i + 1).min(n - 1));
            let ds = s[b] - s[a];
            if ds > 0.0 {
                curvature[i] = wrap_angle(headings[b] - headings[a]) / ds;
            }
        }
        Self { points, s, headings, curvature }
    }

    /// Concatenates the route polygons' sample points.
    pub fn from_route(scenario: &Scenario) -> Result<Self, FrenetError> {
        let mut pts = Vec::new();
        for id in &scenario.route_lane_ids {
            let poly = scenario.polygon(*id).ok_or(FrenetError::BadRoute)?;
            pts.extend(poly.points.iter().map(|p| p.position()));
        }
        if pts.is_empty() {
            return Err(FrenetError::BadRoute);
        }
        Self::from_polyline(&pts)
    }

    pub fn length(&self) -> f64 {
        *self.s.last().unwrap()
    }

    pub fn samples(&self) -> &[Point] {
        &self.points
    }

    fn segment_at(&self, s: f64) -> (usize, f64) {
        let s = s.clamp(0.0, self.length());
        let i = match self.s.binary_search_by(|v| v.total_cmp(&s)) {
            Ok(i) => i.min(self.points.len() - 2),
            Err(i) => i.saturating_sub(1).min(self.points.len() - 2),
        };
        let len = self.s[i + 1] - self.s[i];
        (i, ((s - self.s[i]) / len).clamp(0.0, 1.0))
    }

    // cubic Hermite between samples, so arcs are followed far better than by the chord
    fn frame(&self, i: usize, u: f64) -> (Point, f64) {
        let (p0, p1) = (self.points[i], self.points[i + 1]);
        let len = self.s[i + 1] - self.s[i];
        let t0 = geometry::scale(geometry::heading_vector(self.headings[i]), len);
        let t1 = geometry::scale(geometry::heading_vector(self.headings[i + 1]), len);
        let (u2, u3) = (u * u, u * u * u);
        let w = [2.0 * u3 - 3.0 * u2 + 1.0, u3 - 2.0 * u2 + u, -2.0 * u3 + 3.0 * u2, u3 - u2];
        let p = [
            w[0] * p0[0] + w[1] * t0[0] + w[2] * p1[0] + w[3] * t1[0],
            w[0] * p0[1] + w[1] * t0[1] + w[2] * p1[1] + w[3] * t1[1],
        ];
        let h = self.headings[i] + wrap_angle(self.headings[i + 1] - self.headings[i]) * u;
        (p, h)
    }

    /// Position and tangent heading at arc length `s` (clamped).
    pub fn pose_at(&self, s: f64) -> (Point, f64) {
        let (i, u) = self.segment_at(s);
        let (p, h) = self.frame(i, u);
        (p, wrap_angle(h))
    }

    pub fn heading_at(&self, s: f64) -> f64 {
        self.pose_at(s).1
    }

    pub fn curvature_at(&self, s: f64) -> f64 {
        let (i, u) = self.segment_at(s);
        self.curvature[i] * (1.0 - u) + self.curvature[i + 1] * u
    }

    pub fn project(&self, p: Point) -> Result<FrenetPose, FrenetError> {
        self.project_within(p, DEFAULT_CORRIDOR)
    }

    pub fn project_within(&self, p: Point, corridor: f64) -> Result<FrenetPose, FrenetError> {
        let n = self.points.len();
        // candidates come from segments near the closest vertex
        let nearest = (0..n)
            .min_by(|&a, &b| {
                geometry::dist(self.points[a], p).total_cmp(&geometry::dist(self.points[b], p))
            })
            .unwrap();
        let lo = nearest.saturating_sub(4);
        let hi = (nearest + 4).min(n - 2);
        let mut best: Option<(f64, FrenetPose)> = None;
        fn consider(best: &mut Option<(f64, FrenetPose)>, pose: FrenetPose, d: f64) {
            if best.is_none_or(|(bd, _)| d < bd - 1e-12) {
                *best = Some((d, pose));
            }
        }
        for i in lo..=hi {
            let f = |u: f64| {
                let (q, h) = self.frame(i, u);
                geometry::dot(geometry::sub(p, q), geometry::heading_vector(h))
            };
            let (f0, f1) = (f(0.0), f(1.0));
            if f0 == 0.0 || f0.signum() != f1.signum() || f1 == 0.0 {
                let u = if f0 == 0.0 {
                    0.0
                } else if f1 == 0.0 {
                    1.0
                } else {
                    let (mut a, mut b, mut fa) = (0.0, 1.0, f0);
                    for _ in 0..80 {
                        let m = 0.5 * (a + b);
                        let fm = f(m);
                        if fm == 0.0 {
                            a = m;
                            b = m;
                            break;
                        }
                        if fm.signum() == fa.signum() {
                            a = m;
                            fa = fm;
                        } else {
                            b = m;
                        }
                    }
                    0.5 * (a + b)
                };
                let (q, h) = self.frame(i, u);
                let d = geometry::sub(p, q);
                let l = geometry::dot(d, [-h.sin(), h.cos()]);
                let s = self.s[i] + u * (self.s[i + 1] - self.s[i]);
                consider(&mut best, FrenetPose::new(s, l), geometry::norm(d));
            }
        }
        // beyond either end: clamp to the endpoint and keep the lateral part
        if best.is_none() {
            for (i, u, s) in [(0, 0.0, 0.0), (n - 2, 1.0, self.length())] {
                let (q, h) = self.frame(i, u);
                let d = geometry::sub(p, q);
                let l = geometry::dot(d, [-h.sin(), h.cos()]);
                consider(&mut best, FrenetPose::new(s, l), geometry::norm(d));
            }
        }
        let (d, pose) = best.unwrap();
        if d > corridor {
            return Err(FrenetError::OutOfCorridor { distance: d, corridor });
        }
        Ok(pose)
    }

    /// Inverse transform. The flag reports whether `s` had to be clamped.
    pub fn to_cartesian(&self, pose: FrenetPose) -> (Point, bool) {
        let clamped = pose.s < 0.0 || pose.s > self.length();
        let (q, h) = self.pose_at(pose.s);
        let p = geometry::add(q, geometry::scale([-h.sin(), h.cos()], pose.l));
        (p, clamped)
    }

    /// Pointwise conversion of Frenet samples; the flag is set when any
    /// sample was clamped.
    pub fn trajectory_to_cartesian(
        &self,
        samples: &[FrenetPose],
    ) -> Result<(TrajectoryAction, bool), FrenetError> {
        if samples.len() < 2 {
            return Err(FrenetError::TooFewSamples);
        }
        let mut any = false;
        let pts = samples
            .iter()
            .map(|p| {
                let (q, c) = self.to_cartesian(*p);
                any |= c;
                q
            })
            .collect();
        Ok((TrajectoryAction::new(pts), any))
    }
}
