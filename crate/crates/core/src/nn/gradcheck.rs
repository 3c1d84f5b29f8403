//! Central-difference gradient checking.

use super::params::{Gradients, ParamId, ParamStore};
use super::tensor::Tensor;

/// `max |a - n| / max(max |n|, 1e-10)`.
pub fn max_rel_error(analytic: &Tensor, numeric: &Tensor) -> f64 {
    let diff = analytic.data().iter().zip(numeric.data()).fold(0.0f64, |m, (a, n)| m.max((a - n).abs()));
    diff / numeric.max_abs().max(1e-10)
}

/// Central-difference gradient of `f` with respect to parameter `id`.
pub fn numeric_gradient(store: &ParamStore, id: ParamId, step: f64, f: &impl Fn(&ParamStore) -> f64) -> Tensor {
    let mut work = store.clone();
    let n = store.get(id).len();
    let mut g = Tensor::zeros(store.get(id).shape());
    for i in 0..n {
        let orig = work.get(id).data()[i];
        work.get_mut(id).data_mut()[i] = orig + step;
        let up = f(&work);
        work.get_mut(id).data_mut()[i] = orig - step;
        let down = f(&work);
        work.get_mut(id).data_mut()[i] = orig;
        g.data_mut()[i] = (up - down) / (2.0 * step);
    }
    g
}

/// Largest per-tensor relative error between `grads` and central differences
/// of `f` over the parameters in `ids`.
pub fn check_params(
    store: &ParamStore,
    grads: &Gradients,
    ids: &[ParamId],
    step: f64,
    f: impl Fn(&ParamStore) -> f64,
) -> f64 {
    ids.iter()
        .map(|&id| max_rel_error(grads.get(id), &numeric_gradient(store, id, step, &f)))
        .fold(0.0, f64::max)
}
