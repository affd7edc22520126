//! Central finite-difference checks against the tape.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::graph::{Graph, Var};
use super::params::{ParamId, ParamStore};
use super::NnError;

pub const FD_STEP: f64 = 1e-5;

/// Denominator floor per unit of loss: central-difference round-off at
/// `FD_STEP` is a few times 1e-11 |loss|, so exactly-zero gradients such
/// as an attention key bias measure below 1e-4 against it.
pub const ZERO_FLOOR: f64 = 1e-6;

/// `|a − n| / max(|a|, |n|, floor)`; the floor keeps coordinates whose
/// gradient is numerically zero from dividing by round-off.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheck {
    pub max_rel_error: f64,
    pub checked: usize,
}

/// Compares tape gradients of `loss` with central differences on up to
/// `coords` randomly chosen parameter scalars (all of them when smaller).
/// Detached values are held at their unperturbed values during the
/// differences, so stop-gradients are respected. The floor is scaled by
/// `max(1, |loss|)`.
pub fn check_params(
    store: &ParamStore,
    loss: &dyn Fn(&mut Graph, &ParamStore) -> Result<Var, NnError>,
    coords: usize,
    floor: f64,
    rng: &mut ChaCha8Rng,
) -> Result<GradCheck, NnError> {
    let mut work = store.clone();
    work.zero_grads();
    let mut g = Graph::new();
    let out = loss(&mut g, &work)?;
    let floor = floor * g.value(out).item().abs().max(1.0);
    let grads = g.backward(out)?;
    g.accumulate(&grads, &mut work);
    let frozen = g.detached_values();
    let mut all: Vec<(ParamId, usize)> = Vec::new();
    for id in store.ids() {
        for k in 0..store.value(id).len() {
            all.push((id, k));
        }
    }
    let picks: Vec<(ParamId, usize)> = if all.len() <= coords {
        all
    } else {
        (0..coords).map(|_| all[rng.random_range(0..all.len())]).collect()
    };
    let eval = |s: &ParamStore| -> Result<f64, NnError> {
        let mut g = Graph::with_frozen(frozen.clone());
        let out = loss(&mut g, s)?;
        Ok(g.value(out).item())
    };
    let mut max_rel: f64 = 0.0;
    for (id, k) in &picks {
        let analytic = work.grad(*id).data[*k];
        let mut p = store.clone();
        p.value_mut(*id).data[*k] += FD_STEP;
        let up = eval(&p)?;
        p.value_mut(*id).data[*k] -= 2.0 * FD_STEP;
        let down = eval(&p)?;
        let numeric = (up - down) / (2.0 * FD_STEP);
        max_rel = max_rel.max(relative_error(analytic, numeric, floor));
    }
    Ok(GradCheck {
        max_rel_error: max_rel,
        checked: picks.len(),
    })
}

/// Central differences of a plain function.
pub fn numeric_gradient(f: &dyn Fn(&[f64]) -> f64, x: &[f64]) -> Vec<f64> {
    let mut p = x.to_vec();
    (0..x.len())
        .map(|i| {
            p[i] = x[i] + FD_STEP;
            let up = f(&p);
            p[i] = x[i] - FD_STEP;
            let down = f(&p);
            p[i] = x[i];
            (up - down) / (2.0 * FD_STEP)
        })
        .collect()
}
