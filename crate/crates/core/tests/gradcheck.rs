//! Finite-difference oracles for the tape gradients, from single ops up
//! to the full per-sequence losses of every training regime.

use seqlab_core::autodiff::Tape;
use seqlab_core::gradcheck::{finite_difference_grads, max_relative_error};
use seqlab_core::model::{ModelConfig, ModelParams};
use seqlab_core::regimes::{generated_history, sequence_loss_fixed_history, teacher_alignments};
use seqlab_core::tensor::Tensor;

const OP_STEP: f64 = 1e-6;
const TOL: f64 = 1e-4;
const FLOOR: f64 = 1e-6;

// The per-sequence losses sum several cross-entropies (magnitude ~6), so
// the difference quotient carries ~1e-9 of cancellation noise at step
// 1e-6; a 1e-5 step and a floor on the denominator keep the comparison
// meaningful for near-zero gradient elements.
const MODEL_STEP: f64 = 1e-5;
const MODEL_FLOOR: f64 = 1e-3;

/// Central differences of a scalar function of one flat input.
fn fd_flat(x: &[f64], mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut grad = vec![0.0; x.len()];
    let mut work = x.to_vec();
    for j in 0..x.len() {
        work[j] = x[j] + OP_STEP;
        let plus = f(&work);
        work[j] = x[j] - OP_STEP;
        let minus = f(&work);
        work[j] = x[j];
        grad[j] = (plus - minus) / (2.0 * OP_STEP);
    }
    grad
}

fn assert_close(tape_grad: &[f64], fd_grad: &[f64], what: &str) {
    for (i, (&t, &f)) in tape_grad.iter().zip(fd_grad).enumerate() {
        let denom = t.abs().max(f.abs()).max(FLOOR);
        let rel = (t - f).abs() / denom;
        assert!(rel < TOL, "{what}[{i}]: tape {t} vs fd {f} (rel {rel:.2e})");
    }
}

#[test]
fn matmul_gradient_matches_finite_differences() {
    let a0 = [0.3, -1.1, 0.7, 2.0, 0.4, -0.6];
    let b = Tensor::matrix(3, 2, vec![1.5, -0.2, 0.8, 0.3, -1.0, 0.9]).unwrap();
    let loss = |a: &[f64]| {
        let mut tape = Tape::new();
        let av = tape.leaf(Tensor::matrix(2, 3, a.to_vec()).unwrap());
        let bv = tape.leaf(b.clone());
        let prod = tape.matmul(av, bv).unwrap();
        let s = tape.sum(prod);
        tape.scalar_value(s).unwrap()
    };
    let fd = fd_flat(&a0, loss);

    let mut tape = Tape::new();
    let av = tape.param(Tensor::matrix(2, 3, a0.to_vec()).unwrap());
    let bv = tape.leaf(b.clone());
    let prod = tape.matmul(av, bv).unwrap();
    let s = tape.sum(prod);
    let grads = tape.backward(s).unwrap();
    assert_close(grads.get(av).unwrap().data(), &fd, "matmul dA");

    // Every row of dA is the vector of B's row sums, broadcast down A.
    let row_sums: Vec<f64> = (0..3).map(|r| b.row(r).iter().sum()).collect();
    for row in 0..2 {
        assert_close(&grads.get(av).unwrap().data()[row * 3..(row + 1) * 3], &row_sums, "dA row");
    }
}

#[test]
fn cross_entropy_gradient_matches_finite_differences() {
    let logits0 = [0.2, -0.7, 1.3, 0.05, -0.4];
    let target = 2usize;
    let loss = |x: &[f64]| {
        let mut tape = Tape::new();
        let v = tape.leaf(Tensor::vector(x.to_vec()));
        let ce = tape.cross_entropy_from_logits(v, target).unwrap();
        tape.scalar_value(ce).unwrap()
    };
    let fd = fd_flat(&logits0, loss);
    let mut tape = Tape::new();
    let v = tape.param(Tensor::vector(logits0.to_vec()));
    let ce = tape.cross_entropy_from_logits(v, target).unwrap();
    let grads = tape.backward(ce).unwrap();
    let tape_grad = grads.get(v).unwrap().data();
    for (i, (&t, &f)) in tape_grad.iter().zip(&fd).enumerate() {
        let rel = (t - f).abs() / t.abs().max(f.abs()).max(1e-8);
        assert!(rel < 1e-5, "ce grad[{i}]: {t} vs {f}");
    }
}

#[test]
fn smoothed_kl_through_softmax_matches_finite_differences() {
    // Gradient flows through the q side; staying behind a softmax keeps
    // the finite-difference path on the simplex.
    let scores0 = [0.5, -0.3, 0.9, 0.1];
    let p_ref = Tensor::vector(vec![0.6, 0.2, 0.15, 0.05]);
    let eps = seqlab_core::math::exp(-10.0);
    let loss = |x: &[f64]| {
        let mut tape = Tape::new();
        let s = tape.leaf(Tensor::vector(x.to_vec()));
        let q = tape.softmax(s).unwrap();
        let q = tape.affine_scalar(q, 1.0 - eps, eps / 4.0);
        let p = tape.leaf(p_ref.clone());
        let p = tape.affine_scalar(p, 1.0 - eps, eps / 4.0);
        let kl = tape.kl_categorical(p, q).unwrap();
        tape.scalar_value(kl).unwrap()
    };
    let fd = fd_flat(&scores0, loss);
    let mut tape = Tape::new();
    let s = tape.param(Tensor::vector(scores0.to_vec()));
    let q = tape.softmax(s).unwrap();
    let q = tape.affine_scalar(q, 1.0 - eps, eps / 4.0);
    let p = tape.leaf(p_ref.clone());
    let p = tape.affine_scalar(p, 1.0 - eps, eps / 4.0);
    let kl = tape.kl_categorical(p, q).unwrap();
    let grads = tape.backward(kl).unwrap();
    assert_close(grads.get(s).unwrap().data(), &fd, "kl via softmax");
}

fn tiny_model(seed: u64) -> ModelParams {
    let cfg = ModelConfig {
        src_vocab: 7,
        tgt_vocab: 7,
        d_emb: 4,
        d_hidden: 4,
        enc_layers: 1,
        dec_layers: 1,
        init_range: 0.4,
    };
    ModelParams::init(&cfg, seed).unwrap()
}

const SRC: [u32; 3] = [4, 5, 6];
const TGT: [u32; 3] = [5, 4, 2]; // two tokens then EOS
const REF_HISTORY: [u32; 3] = [1, 5, 4]; // BOS then the reference prefix

/// LSTM-cell composite: a length-1 sequence exercises both encoder
/// directions and one decoder step end to end.
#[test]
fn lstm_cell_composite_matches_finite_differences() {
    let params = tiny_model(21);
    let (value, grads) =
        sequence_loss_fixed_history(&params, &[4], &[2], &[1], None, 0.0, 1e-6, true).unwrap();
    assert!(value.is_finite());
    let fd = finite_difference_grads(&params, MODEL_STEP, |p| {
        sequence_loss_fixed_history(p, &[4], &[2], &[1], None, 0.0, 1e-6, false).map(|(v, _)| v)
    })
    .unwrap();
    let err = max_relative_error(&grads.unwrap(), &fd, MODEL_FLOOR);
    assert!(err < TOL, "max relative error {err:.3e}");
}

#[test]
fn teacher_forcing_loss_gradient_matches_finite_differences() {
    let params = tiny_model(31);
    let (_, grads) =
        sequence_loss_fixed_history(&params, &SRC, &TGT, &REF_HISTORY, None, 0.0, 1e-6, true)
            .unwrap();
    let fd = finite_difference_grads(&params, MODEL_STEP, |p| {
        sequence_loss_fixed_history(p, &SRC, &TGT, &REF_HISTORY, None, 0.0, 1e-6, false)
            .map(|(v, _)| v)
    })
    .unwrap();
    let err = max_relative_error(&grads.unwrap(), &fd, MODEL_FLOOR);
    assert!(err < TOL, "max relative error {err:.3e}");
}

#[test]
fn vaf_joint_loss_gradient_matches_finite_differences() {
    // Teacher fixed, student differentiated; the generated rollout is
    // frozen at the base parameters, which is exactly the function the
    // tape differentiates.
    let student = tiny_model(41);
    let teacher = tiny_model(42);
    let eps = seqlab_core::math::exp(-10.0);
    let alphas = teacher_alignments(&teacher, &SRC, &TGT).unwrap();
    let history = generated_history(&student, &teacher, &SRC, &TGT, eps).unwrap();
    let (_, grads) = sequence_loss_fixed_history(
        &student,
        &SRC,
        &TGT,
        &history,
        Some(&alphas),
        10.0,
        eps,
        true,
    )
    .unwrap();
    let fd = finite_difference_grads(&student, MODEL_STEP, |p| {
        sequence_loss_fixed_history(p, &SRC, &TGT, &history, Some(&alphas), 10.0, eps, false)
            .map(|(v, _)| v)
    })
    .unwrap();
    let err = max_relative_error(&grads.unwrap(), &fd, MODEL_FLOOR);
    assert!(err < TOL, "max relative error {err:.3e}");
}

#[test]
fn aaf_branch_losses_gradients_match_finite_differences() {
    let student = tiny_model(51);
    let teacher = tiny_model(52);
    let eps = seqlab_core::math::exp(-10.0);
    let alphas = teacher_alignments(&teacher, &SRC, &TGT).unwrap();

    // Branch A: generated history. Branch B: reference history.
    let history_a = generated_history(&student, &teacher, &SRC, &TGT, eps).unwrap();
    let branches = [("pass A", history_a), ("pass B", REF_HISTORY.to_vec())];
    for (name, history) in branches {
        let (_, grads) = sequence_loss_fixed_history(
            &student,
            &SRC,
            &TGT,
            &history,
            Some(&alphas),
            10.0,
            eps,
            true,
        )
        .unwrap();
        let fd = finite_difference_grads(&student, MODEL_STEP, |p| {
            sequence_loss_fixed_history(p, &SRC, &TGT, &history, Some(&alphas), 10.0, eps, false)
                .map(|(v, _)| v)
        })
        .unwrap();
        let err = max_relative_error(&grads.unwrap(), &fd, MODEL_FLOOR);
        assert!(err < TOL, "{name}: max relative error {err:.3e}");
    }
}

#[test]
fn multi_layer_model_gradient_matches_finite_differences() {
    // Two encoder and two decoder layers exercise the inter-layer wiring
    // (layer stacking, per-layer decoder init).
    let cfg = ModelConfig {
        src_vocab: 7,
        tgt_vocab: 7,
        d_emb: 3,
        d_hidden: 3,
        enc_layers: 2,
        dec_layers: 2,
        init_range: 0.4,
    };
    let params = ModelParams::init(&cfg, 61).unwrap();
    let (value, grads) =
        sequence_loss_fixed_history(&params, &SRC, &TGT, &REF_HISTORY, None, 0.0, 1e-6, true)
            .unwrap();
    assert!(value.is_finite());
    let fd = finite_difference_grads(&params, MODEL_STEP, |p| {
        sequence_loss_fixed_history(p, &SRC, &TGT, &REF_HISTORY, None, 0.0, 1e-6, false)
            .map(|(v, _)| v)
    })
    .unwrap();
    let err = max_relative_error(&grads.unwrap(), &fd, MODEL_FLOOR);
    assert!(err < TOL, "max relative error {err:.3e}");
}
