use rand::seq::index::sample;

use super::{Graph, ParamStore, Real, RngSeed, Var};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    /// Max of `|analytic − central| / (|analytic| + |central| + 1e-12)`.
    pub max_rel_error: f64,
    /// Coordinates with a non-negligible analytic gradient that were probed.
    pub probes: usize,
    /// Largest `|central|` seen at coordinates whose analytic gradient is zero.
    pub zero_grad_max_abs: f64,
}

const MIN_ANALYTIC: f64 = 1e-7;

/// Compares the tape's gradients of the scalar `f` against central
/// differences at randomly drawn parameter coordinates.
///
/// Coordinates whose analytic gradient is below `1e-7` in magnitude are
/// checked separately (their finite difference must be near zero too) so
/// that rounding noise on structurally zero gradients does not dominate
/// the relative error.
pub fn grad_check<T, F>(
    store: &mut ParamStore<T>,
    f: F,
    h: f64,
    probes: usize,
    seed: RngSeed,
) -> Result<GradCheckReport>
where
    T: Real,
    F: Fn(&mut Graph<'_, T>) -> Result<Var>,
{
    if !(1e-6..=1e-3).contains(&h) {
        return Err(Error::config(format!("finite-difference step {h} outside [1e-6, 1e-3]")));
    }
    let eval = |store: &ParamStore<T>| -> Result<f64> {
        let mut g = Graph::new(store);
        let out = f(&mut g)?;
        let v = g.scalar(out).to_f64_lossy();
        if !v.is_finite() {
            return Err(Error::NonFinite(format!("objective evaluated to {v}")));
        }
        Ok(v)
    };

    let grads = {
        let mut g = Graph::new(&*store);
        let out = f(&mut g)?;
        let v = g.scalar(out).to_f64_lossy();
        if !v.is_finite() {
            return Err(Error::NonFinite(format!("objective evaluated to {v}")));
        }
        g.backward(out)?
    };

    let mut live = Vec::new();
    let mut dead = Vec::new();
    for id in store.ids() {
        if !store.get(id).trainable {
            continue;
        }
        let n = store.value(id).len();
        for k in 0..n {
            let a = grads.get(id).map_or(0.0, |m| m.as_slice()[k].to_f64_lossy());
            if a.abs() >= MIN_ANALYTIC {
                live.push((id, k, a));
            } else {
                dead.push((id, k, a));
            }
        }
    }

    let mut rng = seed.stream(7);
    let central = |store: &mut ParamStore<T>, id, k: usize| -> Result<f64> {
        let orig = store.value(id).as_slice()[k];
        store.value_mut(id).as_mut_slice()[k] = T::from_f64_lossy(orig.to_f64_lossy() + h);
        let plus = eval(store);
        store.value_mut(id).as_mut_slice()[k] = T::from_f64_lossy(orig.to_f64_lossy() - h);
        let minus = eval(store);
        store.value_mut(id).as_mut_slice()[k] = orig;
        Ok((plus? - minus?) / (2.0 * h))
    };

    let mut max_rel_error: f64 = 0.0;
    let picks = sample(&mut rng, live.len(), probes.min(live.len()));
    for i in picks.iter() {
        let (id, k, a) = live[i];
        let c = central(store, id, k)?;
        max_rel_error = max_rel_error.max((a - c).abs() / (a.abs() + c.abs() + 1e-12));
    }

    let mut zero_grad_max_abs: f64 = 0.0;
    let picks = sample(&mut rng, dead.len(), probes.min(dead.len()));
    for i in picks.iter() {
        let (id, k, _) = dead[i];
        zero_grad_max_abs = zero_grad_max_abs.max(central(store, id, k)?.abs());
    }

    Ok(GradCheckReport {
        max_rel_error,
        probes: probes.min(live.len()),
        zero_grad_max_abs,
    })
}
