use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IdmParams {
    pub v0: f64,
    pub headway: f64,
    pub s0: f64,
    pub a_max: f64,
    pub b: f64,
    pub delta: f64,
    pub b_hard: f64,
}

impl Default for IdmParams {
    fn default() -> Self {
        Self {
            v0: 15.0,
            headway: 1.5,
            s0: 2.0,
            a_max: 2.0,
            b: 3.0,
            delta: 4.0,
            b_hard: 8.0,
        }
    }
}

impl IdmParams {
    pub fn with_v0(self, v0: f64) -> Self {
        Self { v0, ..self }
    }
}

/// Desired gap. The dynamic term is floored at zero so a fast-receding
/// leader never shrinks the gap below `s0`.
pub fn desired_gap(v: f64, dv: f64, p: &IdmParams) -> f64 {
    p.s0 + (v * p.headway + v * dv / (2.0 * (p.a_max * p.b).sqrt())).max(0.0)
}

/// `dv` is own speed minus leader speed; a free road is `gap = ∞`.
pub fn idm_accel(v: f64, dv: f64, gap: f64, p: &IdmParams) -> f64 {
    if gap <= 0.0 {
        return -p.b_hard;
    }
    let free = if p.v0 > 0.0 { (v.max(0.0) / p.v0).powf(p.delta) } else { 1.0 };
    let interaction = if gap.is_infinite() { 0.0 } else { (desired_gap(v, dv, p) / gap).powi(2) };
    (p.a_max * (1.0 - free - interaction)).clamp(-p.b_hard, p.a_max)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn equilibrium_and_free_start() {
        let p = IdmParams::default();
        assert!(idm_accel(15.0, 0.0, f64::INFINITY, &p).abs() < 1e-15);
        assert_eq!(idm_accel(0.0, 0.0, f64::INFINITY, &p), p.a_max);
        assert_eq!(idm_accel(5.0, 0.0, 0.0, &p), -8.0);
        assert_eq!(idm_accel(5.0, 0.0, -1.0, &p), -8.0);
    }

    #[test]
    fn worked_example() {
        let p = IdmParams::default();
        // s* = 2 + 15 = 17; (10/15)^4 = 16/81; (17/20)^2 = 0.7225
        let want = 2.0 * (1.0 - 16.0 / 81.0 - 0.7225);
        assert!((idm_accel(10.0, 0.0, 20.0, &p) - want).abs() < 1e-12);
    }

    #[test]
    fn closing_gap_brakes_harder() {
        let p = IdmParams::default();
        let a = idm_accel(10.0, 0.0, 20.0, &p);
        let b = idm_accel(10.0, 5.0, 20.0, &p);
        assert!(b < a);
        assert!(idm_accel(10.0, 10.0, 3.0, &p) >= -8.0);
    }
}
