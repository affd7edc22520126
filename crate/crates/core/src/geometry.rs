//! Planar geometry helpers shared by the scene model, simulator and planners.

use std::f64::consts::PI;

pub type Point = [f64; 2];

/// Wraps an angle into `(-pi, pi]`.
pub fn wrap_angle(angle: f64) -> f64 {
    if !angle.is_finite() {
        return angle;
    }
    let mut a = angle % (2.0 * PI);
    if a <= -PI {
        a += 2.0 * PI;
    } else if a > PI {
        a -= 2.0 * PI;
    }
    a
}

pub fn sub(a: Point, b: Point) -> Point {
    [a[0] - b[0], a[1] - b[1]]
}

pub fn add(a: Point, b: Point) -> Point {
    [a[0] + b[0], a[1] + b[1]]
}

pub fn scale(a: Point, k: f64) -> Point {
    [a[0] * k, a[1] * k]
}

pub fn dot(a: Point, b: Point) -> f64 {
    a[0] * b[0] + a[1] * b[1]
}

pub fn cross(a: Point, b: Point) -> f64 {
    a[0] * b[1] - a[1] * b[0]
}

pub fn norm(a: Point) -> f64 {
    a[0].hypot(a[1])
}

pub fn dist(a: Point, b: Point) -> f64 {
    norm(sub(a, b))
}

pub fn lerp(a: Point, b: Point, t: f64) -> Point {
    [a[0] + (b[0] - a[0]) * t, a[1] + (b[1] - a[1]) * t]
}

pub fn heading_vector(heading: f64) -> Point {
    [heading.cos(), heading.sin()]
}

/// Signed angle from `a` to `b` in `(-pi, pi]`; zero when either vector is
/// degenerate.
pub fn angle_between(a: Point, b: Point) -> f64 {
    if norm(a) < 1e-12 || norm(b) < 1e-12 {
        return 0.0;
    }
    wrap_angle(cross(a, b).atan2(dot(a, b)))
}

/// Expresses a world point in the frame anchored at `origin` with `heading`.
pub fn to_local(point: Point, origin: Point, heading: f64) -> Point {
    let d = sub(point, origin);
    let (s, c) = heading.sin_cos();
    [c * d[0] + s * d[1], -s * d[0] + c * d[1]]
}

pub fn to_world(local: Point, origin: Point, heading: f64) -> Point {
    let (s, c) = heading.sin_cos();
    [
        origin[0] + c * local[0] - s * local[1],
        origin[1] + s * local[0] + c * local[1],
    ]
}

/// Rigid transform: rotation about the origin then translation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Rigid2 {
    pub rotation: f64,
    pub translation: Point,
}

impl Rigid2 {
    pub fn new(rotation: f64, translation: Point) -> Self {
        Self { rotation, translation }
    }

    pub fn apply(&self, p: Point) -> Point {
        to_world(p, self.translation, self.rotation)
    }

    pub fn apply_vector(&self, v: Point) -> Point {
        let (s, c) = self.rotation.sin_cos();
        [c * v[0] - s * v[1], s * v[0] + c * v[1]]
    }

    pub fn apply_heading(&self, h: f64) -> f64 {
        wrap_angle(h + self.rotation)
    }
}

/// Oriented rectangle used for agent footprints.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OrientedBox {
    pub center: Point,
    pub heading: f64,
    pub length: f64,
    pub width: f64,
}

impl OrientedBox {
    pub fn new(center: Point, heading: f64, length: f64, width: f64) -> Self {
        Self { center, heading, length, width }
    }

    /// Corners in counter-clockwise order starting front-left.
    pub fn corners(&self) -> [Point; 4] {
        let hl = self.length / 2.0;
        let hw = self.width / 2.0;
        [[hl, hw], [-hl, hw], [-hl, -hw], [hl, -hw]]
            .map(|c| to_world(c, self.center, self.heading))
    }

    pub fn inflated(&self, margin: f64) -> Self {
        Self {
            length: self.length + 2.0 * margin,
            width: self.width + 2.0 * margin,
            ..*self
        }
    }

    pub fn contains(&self, p: Point) -> bool {
        let l = to_local(p, self.center, self.heading);
        l[0].abs() <= self.length / 2.0 + 1e-12 && l[1].abs() <= self.width / 2.0 + 1e-12
    }

    /// Separating-axis overlap test. Touching boxes count as overlapping.
    pub fn overlaps(&self, other: &OrientedBox) -> bool {
        let a = self.corners();
        let b = other.corners();
        let axes = [
            heading_vector(self.heading),
            heading_vector(self.heading + PI / 2.0),
            heading_vector(other.heading),
            heading_vector(other.heading + PI / 2.0),
        ];
        for axis in axes {
            let (amin, amax) = project(&a, axis);
            let (bmin, bmax) = project(&b, axis);
            if amax < bmin - 1e-12 || bmax < amin - 1e-12 {
                return false;
            }
        }
        true
    }
}

fn project(corners: &[Point; 4], axis: Point) -> (f64, f64) {
    corners.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), c| {
        let d = dot(*c, axis);
        (lo.min(d), hi.max(d))
    })
}

/// Distance from `p` to segment `ab` together with the segment parameter of
/// the closest point.
pub fn point_segment(p: Point, a: Point, b: Point) -> (f64, f64) {
    let ab = sub(b, a);
    let len2 = dot(ab, ab);
    let t = if len2 < 1e-18 {
        0.0
    } else {
        (dot(sub(p, a), ab) / len2).clamp(0.0, 1.0)
    };
    (dist(p, lerp(a, b, t)), t)
}
