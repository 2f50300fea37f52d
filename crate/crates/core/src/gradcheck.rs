//! Central finite differences over model parameters.
//!
//! The numerical gradient here never touches the tape: it evaluates a
//! forward-only loss at perturbed parameters, so it is an independent
//! check of `Tape::backward`.

use alloc::vec::Vec;

use crate::math;
use crate::model::ModelParams;
use crate::tensor::Tensor;
use crate::Result;

/// d loss / d theta for every parameter element via `(f(x+h) - f(x-h)) / 2h`.
pub fn finite_difference_grads<F>(
    params: &ModelParams,
    step: f64,
    mut loss: F,
) -> Result<Vec<Tensor>>
where
    F: FnMut(&ModelParams) -> Result<f64>,
{
    let mut grads = Vec::with_capacity(params.len());
    let mut work = params.clone();
    for pi in 0..params.len() {
        let numel = params.tensor_at(pi).numel();
        let mut grad = Tensor::zeros(params.tensor_at(pi).shape());
        for j in 0..numel {
            let base = params.tensor_at(pi).data()[j];
            work.tensor_at_mut(pi).data_mut()[j] = base + step;
            let plus = loss(&work)?;
            work.tensor_at_mut(pi).data_mut()[j] = base - step;
            let minus = loss(&work)?;
            work.tensor_at_mut(pi).data_mut()[j] = base;
            grad.data_mut()[j] = (plus - minus) / (2.0 * step);
        }
        grads.push(grad);
    }
    Ok(grads)
}

/// `max_i |a_i - b_i| / max(|a_i|, |b_i|, floor)` over all elements of all
/// aligned tensors.
pub fn max_relative_error(a: &[Tensor], b: &[Tensor], floor: f64) -> f64 {
    let mut worst: f64 = 0.0;
    for (ta, tb) in a.iter().zip(b) {
        for (&x, &y) in ta.data().iter().zip(tb.data()) {
            let denom = math::abs(x).max(math::abs(y)).max(floor);
            let rel = math::abs(x - y) / denom;
            if rel > worst {
                worst = rel;
            }
        }
    }
    worst
}
