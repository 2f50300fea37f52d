//! Adam with global-norm gradient clipping.

use alloc::format;
use alloc::vec::Vec;

use crate::error::Error;
use crate::math;
use crate::model::ModelParams;
use crate::tensor::Tensor;
use crate::Result;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// First/second moment estimates, aligned with the parameter order. The
/// state persists across steps and is part of a checkpoint.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub step: u64,
}

impl AdamState {
    pub fn new(params: &ModelParams) -> AdamState {
        AdamState {
            config: AdamConfig::default(),
            m: params.iter().map(|(_, t)| Tensor::zeros(t.shape())).collect(),
            v: params.iter().map(|(_, t)| Tensor::zeros(t.shape())).collect(),
            step: 0,
        }
    }
}

/// What clipping did to this step's gradients.
#[derive(Debug, Clone, Copy)]
pub struct ClipReport {
    pub grad_norm: f64,
    pub scale: f64,
}

/// One optimizer step: clip the global gradient norm to `clip_norm`
/// (disabled when `clip_norm <= 0`), then apply the Adam update in place.
#[allow(clippy::needless_range_loop)]
pub fn adam_step(
    params: &mut ModelParams,
    grads: &[Tensor],
    state: &mut AdamState,
    lr: f64,
    clip_norm: f64,
) -> Result<ClipReport> {
    if grads.len() != params.len() {
        return Err(Error::contract(format!(
            "gradient count {} does not match parameter count {}",
            grads.len(),
            params.len()
        )));
    }
    let mut sq_sum = 0.0;
    for (i, g) in grads.iter().enumerate() {
        if g.shape() != params.tensor_at(i).shape() {
            return Err(Error::shape(
                "adam_step",
                format!(
                    "gradient for {} has shape {:?}, parameter is {:?}",
                    params.name_at(i),
                    g.shape(),
                    params.tensor_at(i).shape()
                ),
            ));
        }
        for &x in g.data() {
            if !x.is_finite() {
                return Err(Error::domain(
                    "adam_step",
                    format!("non-finite gradient in parameter {}", params.name_at(i)),
                ));
            }
            sq_sum += x * x;
        }
    }
    let grad_norm = math::sqrt(sq_sum);
    let scale = if clip_norm > 0.0 && grad_norm > clip_norm { clip_norm / grad_norm } else { 1.0 };

    state.step += 1;
    let t = state.step;
    let AdamConfig { beta1, beta2, eps } = state.config;
    let bc1 = 1.0 - libm::pow(beta1, t as f64);
    let bc2 = 1.0 - libm::pow(beta2, t as f64);
    for i in 0..grads.len() {
        let g = grads[i].data();
        let m = state.m[i].data_mut();
        let v = state.v[i].data_mut();
        let p = params.tensor_at_mut(i).data_mut();
        for j in 0..g.len() {
            let gj = g[j] * scale;
            m[j] = beta1 * m[j] + (1.0 - beta1) * gj;
            v[j] = beta2 * v[j] + (1.0 - beta2) * gj * gj;
            let m_hat = m[j] / bc1;
            let v_hat = v[j] / bc2;
            p[j] -= lr * m_hat / (math::sqrt(v_hat) + eps);
        }
    }
    Ok(ClipReport { grad_norm, scale })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use alloc::vec::Vec;

    fn params() -> ModelParams {
        let cfg = ModelConfig {
            src_vocab: 5,
            tgt_vocab: 5,
            d_emb: 2,
            d_hidden: 2,
            enc_layers: 1,
            dec_layers: 1,
            init_range: 0.1,
        };
        ModelParams::init(&cfg, 1).unwrap()
    }

    fn zero_grads(p: &ModelParams) -> Vec<Tensor> {
        p.iter().map(|(_, t)| Tensor::zeros(t.shape())).collect()
    }

    #[test]
    fn zero_gradients_leave_parameters_unchanged() {
        let mut p = params();
        let before = p.clone();
        let mut state = AdamState::new(&p);
        let grads = zero_grads(&p);
        adam_step(&mut p, &grads, &mut state, 0.002, 1.0).unwrap();
        assert_eq!(p, before);
    }

    #[test]
    fn clipping_scales_by_clip_over_norm() {
        let mut p = params();
        let mut grads = zero_grads(&p);
        // A single gradient entry of 10 gives global norm 10.
        grads[0].data_mut()[0] = 10.0;
        let mut state = AdamState::new(&p);
        let report = adam_step(&mut p, &grads, &mut state, 0.002, 1.0).unwrap();
        assert!((report.grad_norm - 10.0).abs() < 1e-12);
        assert!((report.scale - 0.1).abs() < 1e-12);
        // Effective gradient is 1.0; first moment picks up (1-beta1) * 1.
        assert!((state.m[0].data()[0] - 0.1).abs() < 1e-12);
    }

    #[test]
    fn two_steps_match_the_scalar_adam_recurrence() {
        let mut p = params();
        let x0 = p.tensor_at(0).data()[0];
        let mut state = AdamState::new(&p);
        let (b1, b2, eps, lr) = (0.9, 0.999, 1e-8, 0.002);

        // Hand-evaluated recurrence on one scalar with g = 0.5 then 0.25,
        // clipping disabled.
        let (mut m, mut v, mut x) = (0.0, 0.0, x0);
        for (t, g) in [(1, 0.5), (2, 0.25)] {
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            let m_hat = m / (1.0 - libm::pow(b1, t as f64));
            let v_hat = v / (1.0 - libm::pow(b2, t as f64));
            x -= lr * m_hat / (math::sqrt(v_hat) + eps);
        }

        for g in [0.5, 0.25] {
            let mut grads = zero_grads(&p);
            grads[0].data_mut()[0] = g;
            adam_step(&mut p, &grads, &mut state, lr, 0.0).unwrap();
        }
        let got = p.tensor_at(0).data()[0];
        assert!((got - x).abs() < 1e-15, "got {got}, want {x}");
    }

    #[test]
    fn non_finite_gradient_names_the_parameter() {
        let mut p = params();
        let mut grads = zero_grads(&p);
        let idx = p.position("att.w").unwrap();
        grads[idx].data_mut()[0] = f64::NAN;
        let mut state = AdamState::new(&p);
        let err = adam_step(&mut p, &grads, &mut state, 0.002, 1.0).unwrap_err();
        let msg = format!("{err}");
        assert!(msg.contains("att.w"), "{msg}");
    }

    #[test]
    fn moment_state_persists_across_calls() {
        let mut p = params();
        let mut state = AdamState::new(&p);
        let mut grads = zero_grads(&p);
        grads[0].data_mut()[0] = 1.0;
        adam_step(&mut p, &grads, &mut state, 0.002, 0.0).unwrap();
        assert_eq!(state.step, 1);
        let m_after_one = state.m[0].data()[0];
        adam_step(&mut p, &grads, &mut state, 0.002, 0.0).unwrap();
        assert_eq!(state.step, 2);
        assert!(state.m[0].data()[0] > m_after_one);
    }
}
