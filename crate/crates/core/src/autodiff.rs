//! Reverse-mode automatic differentiation over dense `f64` tensors.
//!
//! A [`Tape`] is rebuilt per forward pass (define-by-run). Operations
//! record just enough to compute vector-Jacobian products; [`Tape::backward`]
//! replays the record in reverse. Gradients flow only into nodes that
//! (transitively) depend on a parameter leaf, so constant inputs — e.g.
//! reference alignments from a frozen teacher — cost nothing at backward
//! time.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::Error;
use crate::math;
use crate::tensor::{self, Tensor};
use crate::Result;

/// Handle to a node on a tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var {
    id: usize,
}

impl Var {
    #[inline]
    pub fn id(&self) -> usize {
        self.id
    }
}

/// Tolerance for the simplex precondition of `kl_categorical`.
pub const SIMPLEX_TOL: f64 = 1e-8;

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul { a: usize, b: usize },
    Add { a: usize, b: usize },
    Sub { a: usize, b: usize },
    Mul { a: usize, b: usize },
    AffineScalar { x: usize, mul: f64 },
    Tanh { x: usize },
    Sigmoid { x: usize },
    Ln { x: usize },
    Concat { parts: Vec<usize> },
    StackRows { rows: Vec<usize> },
    GatherRow { table: usize, row: usize },
    ApplyMask { x: usize, mask: Tensor },
    Sum { x: usize },
    Mean { x: usize },
    Softmax { x: usize },
    KlCategorical { p: usize, q: usize },
    CrossEntropyLogits { logits: usize, target: usize },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    param: bool,
}

/// Ordered operation record for one forward pass.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Result of a backward pass: one gradient per parameter leaf (zeros if the
/// loss does not depend on it); interior gradients are discarded.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.id).and_then(|g| g.as_ref())
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Register a constant input. It never receives a gradient.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false, false)
    }

    /// Register a parameter leaf. After `backward` it always has a gradient.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true, true)
    }

    #[inline]
    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.id].value
    }

    /// Scalar value of a one-element node.
    pub fn scalar_value(&self, v: Var) -> Result<f64> {
        self.value(v).item()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool, param: bool) -> Var {
        let id = self.nodes.len();
        self.nodes.push(Node { value, op, requires_grad, param });
        Var { id }
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.id].requires_grad
    }

    // ── forward operations ───────────────────────────────────────────

    /// `[m,k]x[k,n]`, `[m,k]x[k]` or `[k]x[k,n]` product.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = tensor::matmul(self.value(a), self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::MatMul { a: a.id, b: b.id }, rg, false))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.elementwise("add", a, b, |x, y| x + y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::Add { a: a.id, b: b.id }, rg, false))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.elementwise("sub", a, b, |x, y| x - y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::Sub { a: a.id, b: b.id }, rg, false))
    }

    /// Elementwise (Hadamard) product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.elementwise("mul", a, b, |x, y| x * y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::Mul { a: a.id, b: b.id }, rg, false))
    }

    fn elementwise(
        &self,
        op: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Tensor> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Error::shape(
                op,
                format!("operand shapes differ: {:?} vs {:?}", ta.shape(), tb.shape()),
            ));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::from_vec(ta.shape(), data)
    }

    /// `mul * x + add`, elementwise with scalar coefficients.
    pub fn affine_scalar(&mut self, x: Var, mul: f64, add: f64) -> Var {
        let t = self.value(x);
        let data = t.data().iter().map(|&v| mul * v + add).collect();
        let value = Tensor::from_vec(t.shape(), data).expect("same shape");
        let rg = self.rg(x);
        self.push(value, Op::AffineScalar { x: x.id, mul }, rg, false)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        self.affine_scalar(x, c, 0.0)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let value = self.map(x, math::tanh);
        let rg = self.rg(x);
        self.push(value, Op::Tanh { x: x.id }, rg, false)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let value = self.map(x, math::sigmoid);
        let rg = self.rg(x);
        self.push(value, Op::Sigmoid { x: x.id }, rg, false)
    }

    /// Natural log, elementwise. Inputs must be strictly positive.
    pub fn ln(&mut self, x: Var) -> Result<Var> {
        if self.value(x).data().iter().any(|&v| v <= 0.0) {
            return Err(Error::domain("ln", "non-positive input"));
        }
        let value = self.map(x, math::ln);
        let rg = self.rg(x);
        Ok(self.push(value, Op::Ln { x: x.id }, rg, false))
    }

    fn map(&self, x: Var, f: impl Fn(f64) -> f64) -> Tensor {
        let t = self.value(x);
        let data = t.data().iter().map(|&v| f(v)).collect();
        Tensor::from_vec(t.shape(), data).expect("same shape")
    }

    /// Concatenate rank-1 tensors along their only axis.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::contract("concat of zero parts"));
        }
        let mut data = Vec::new();
        let mut rg = false;
        for &p in parts {
            let t = self.value(p);
            if t.rank() != 1 {
                return Err(Error::shape("concat", format!("rank-1 expected, got {:?}", t.shape())));
            }
            data.extend_from_slice(t.data());
            rg |= self.rg(p);
        }
        let value = Tensor::vector(data);
        Ok(self.push(value, Op::Concat { parts: parts.iter().map(|v| v.id).collect() }, rg, false))
    }

    /// Stack rank-1 tensors of equal length into a `[n, d]` matrix.
    pub fn stack_rows(&mut self, rows: &[Var]) -> Result<Var> {
        if rows.is_empty() {
            return Err(Error::contract("stack_rows of zero rows"));
        }
        let d = self.value(rows[0]).numel();
        let mut data = Vec::with_capacity(rows.len() * d);
        let mut rg = false;
        for &r in rows {
            let t = self.value(r);
            if t.rank() != 1 || t.numel() != d {
                return Err(Error::shape(
                    "stack_rows",
                    format!("expected rank-1 of len {d}, got {:?}", t.shape()),
                ));
            }
            data.extend_from_slice(t.data());
            rg |= self.rg(r);
        }
        let value = Tensor::from_vec(&[rows.len(), d], data)?;
        Ok(self.push(value, Op::StackRows { rows: rows.iter().map(|v| v.id).collect() }, rg, false))
    }

    /// Embedding lookup: row `row` of a `[v, d]` table, as a rank-1 tensor.
    pub fn gather_row(&mut self, table: Var, row: usize) -> Result<Var> {
        let t = self.value(table);
        if t.rank() != 2 {
            return Err(Error::shape("gather_row", format!("table must be rank-2, got {:?}", t.shape())));
        }
        if row >= t.shape()[0] {
            return Err(Error::index(
                "gather_row",
                format!("row {row} out of range for table with {} rows", t.shape()[0]),
            ));
        }
        let value = Tensor::vector(t.row(row).to_vec());
        let rg = self.rg(table);
        Ok(self.push(value, Op::GatherRow { table: table.id, row }, rg, false))
    }

    /// Elementwise product with a constant mask (inverted-dropout masks).
    pub fn apply_mask(&mut self, x: Var, mask: Tensor) -> Result<Var> {
        let t = self.value(x);
        if t.shape() != mask.shape() {
            return Err(Error::shape(
                "apply_mask",
                format!("mask shape {:?} vs input {:?}", mask.shape(), t.shape()),
            ));
        }
        let data = t.data().iter().zip(mask.data()).map(|(&x, &m)| x * m).collect();
        let value = Tensor::from_vec(t.shape(), data)?;
        let rg = self.rg(x);
        Ok(self.push(value, Op::ApplyMask { x: x.id, mask }, rg, false))
    }

    /// Sum of all elements, as a scalar node.
    pub fn sum(&mut self, x: Var) -> Var {
        let s: f64 = self.value(x).data().iter().sum();
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::Sum { x: x.id }, rg, false)
    }

    /// Mean of all elements, as a scalar node.
    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let m: f64 = t.data().iter().sum::<f64>() / t.numel() as f64;
        let rg = self.rg(x);
        self.push(Tensor::scalar(m), Op::Mean { x: x.id }, rg, false)
    }

    /// Max-subtracted softmax of a rank-1 tensor.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        if t.rank() != 1 || t.numel() == 0 {
            return Err(Error::shape(
                "softmax",
                format!("nonempty rank-1 input required, got {:?}", t.shape()),
            ));
        }
        let value = Tensor::vector(tensor::softmax_slice(t.data()));
        let rg = self.rg(x);
        Ok(self.push(value, Op::Softmax { x: x.id }, rg, false))
    }

    /// `KL(p || q) = sum_i p_i (ln p_i - ln q_i)` with the `0 ln 0 = 0`
    /// convention. Both arguments must lie on the probability simplex
    /// within [`SIMPLEX_TOL`]. If some `q_i = 0` where `p_i > 0` the result
    /// is `+inf`; training always smooths `q` away from zero first.
    pub fn kl_categorical(&mut self, p: Var, q: Var) -> Result<Var> {
        let (tp, tq) = (self.value(p), self.value(q));
        if tp.shape() != tq.shape() || tp.rank() != 1 {
            return Err(Error::shape(
                "kl_categorical",
                format!("rank-1 operands of equal shape required: {:?} vs {:?}", tp.shape(), tq.shape()),
            ));
        }
        validate_simplex("kl_categorical", tp.data())?;
        validate_simplex("kl_categorical", tq.data())?;
        let mut acc = 0.0;
        for (&pi, &qi) in tp.data().iter().zip(tq.data()) {
            if pi > 0.0 {
                if qi > 0.0 {
                    acc += pi * (math::ln(pi) - math::ln(qi));
                } else {
                    acc = f64::INFINITY;
                    break;
                }
            }
        }
        let rg = self.rg(p) || self.rg(q);
        Ok(self.push(Tensor::scalar(acc), Op::KlCategorical { p: p.id, q: q.id }, rg, false))
    }

    /// `-ln softmax(logits)[target]`, evaluated in log-space.
    pub fn cross_entropy_from_logits(&mut self, logits: Var, target: usize) -> Result<Var> {
        let t = self.value(logits);
        if t.rank() != 1 {
            return Err(Error::shape(
                "cross_entropy_from_logits",
                format!("rank-1 logits required, got {:?}", t.shape()),
            ));
        }
        if target >= t.numel() {
            return Err(Error::index(
                "cross_entropy_from_logits",
                format!("target {target} out of vocabulary range {}", t.numel()),
            ));
        }
        let lse = tensor::log_sum_exp(t.data());
        let loss = lse - t.data()[target];
        let rg = self.rg(logits);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropyLogits { logits: logits.id, target },
            rg,
            false,
        ))
    }

    // ── backward ─────────────────────────────────────────────────────

    /// Reverse sweep from a scalar loss node. Every parameter leaf ends up
    /// with a gradient (zeros when the loss does not reach it); constant
    /// leaves receive none. The sweep is a pure function of the tape, so
    /// repeated calls return bit-identical gradients.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if !self.value(loss).is_scalar() {
            return Err(Error::contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.id] = Some(vec![1.0]);

        for id in (0..=loss.id).rev() {
            let g = match grads[id].take() {
                Some(g) => g,
                None => continue,
            };
            if !self.nodes[id].requires_grad {
                continue;
            }
            self.backprop_node(id, &g, &mut grads);
            if self.nodes[id].param {
                grads[id] = Some(g); // keep parameter gradients
            }
        }

        let grads = self
            .nodes
            .iter()
            .enumerate()
            .map(|(id, node)| {
                if node.param {
                    let data = grads[id].take().unwrap_or_else(|| vec![0.0; node.value.numel()]);
                    Some(Tensor::from_vec(node.value.shape(), data).expect("grad shape"))
                } else {
                    None
                }
            })
            .collect();
        Ok(Gradients { grads })
    }

    fn backprop_node(&self, id: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[id];
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b } => {
                let (ta, tb) = (&self.nodes[*a].value, &self.nodes[*b].value);
                let (m, k, n) = match (ta.rank(), tb.rank()) {
                    (2, 2) => (ta.shape()[0], ta.shape()[1], tb.shape()[1]),
                    (2, 1) => (ta.shape()[0], ta.shape()[1], 1),
                    (1, 2) => (1, ta.shape()[0], tb.shape()[1]),
                    _ => unreachable!("validated in forward"),
                };
                if self.nodes[*a].requires_grad {
                    let da = self.acc(grads, *a);
                    tensor::matmul_bt_into(g, tb.data(), da, m, k, n);
                }
                if self.nodes[*b].requires_grad {
                    let db = self.acc(grads, *b);
                    tensor::matmul_at_into(ta.data(), g, db, m, k, n);
                }
            }
            Op::Add { a, b } => {
                if self.nodes[*a].requires_grad {
                    accumulate(self.acc(grads, *a), g, 1.0);
                }
                if self.nodes[*b].requires_grad {
                    accumulate(self.acc(grads, *b), g, 1.0);
                }
            }
            Op::Sub { a, b } => {
                if self.nodes[*a].requires_grad {
                    accumulate(self.acc(grads, *a), g, 1.0);
                }
                if self.nodes[*b].requires_grad {
                    accumulate(self.acc(grads, *b), g, -1.0);
                }
            }
            Op::Mul { a, b } => {
                if self.nodes[*a].requires_grad {
                    let vb = self.nodes[*b].value.data();
                    let da = self.acc(grads, *a);
                    for ((d, &gv), &bv) in da.iter_mut().zip(g).zip(vb) {
                        *d += gv * bv;
                    }
                }
                if self.nodes[*b].requires_grad {
                    let va = self.nodes[*a].value.data();
                    let db = self.acc(grads, *b);
                    for ((d, &gv), &av) in db.iter_mut().zip(g).zip(va) {
                        *d += gv * av;
                    }
                }
            }
            Op::AffineScalar { x, mul } => {
                if self.nodes[*x].requires_grad {
                    accumulate(self.acc(grads, *x), g, *mul);
                }
            }
            Op::Tanh { x } => {
                if self.nodes[*x].requires_grad {
                    let y = node.value.data();
                    let dx = self.acc(grads, *x);
                    for ((d, &gv), &yv) in dx.iter_mut().zip(g).zip(y) {
                        *d += gv * (1.0 - yv * yv);
                    }
                }
            }
            Op::Sigmoid { x } => {
                if self.nodes[*x].requires_grad {
                    let y = node.value.data();
                    let dx = self.acc(grads, *x);
                    for ((d, &gv), &yv) in dx.iter_mut().zip(g).zip(y) {
                        *d += gv * yv * (1.0 - yv);
                    }
                }
            }
            Op::Ln { x } => {
                if self.nodes[*x].requires_grad {
                    let vx = self.nodes[*x].value.data();
                    let dx = self.acc(grads, *x);
                    for ((d, &gv), &xv) in dx.iter_mut().zip(g).zip(vx) {
                        *d += gv / xv;
                    }
                }
            }
            Op::Concat { parts } => {
                let mut offset = 0;
                for &p in parts {
                    let len = self.nodes[p].value.numel();
                    if self.nodes[p].requires_grad {
                        accumulate(self.acc(grads, p), &g[offset..offset + len], 1.0);
                    }
                    offset += len;
                }
            }
            Op::StackRows { rows } => {
                let d = self.nodes[rows[0]].value.numel();
                for (r, &row) in rows.iter().enumerate() {
                    if self.nodes[row].requires_grad {
                        accumulate(self.acc(grads, row), &g[r * d..(r + 1) * d], 1.0);
                    }
                }
            }
            Op::GatherRow { table, row } => {
                if self.nodes[*table].requires_grad {
                    let d = node.value.numel();
                    let dt = self.acc(grads, *table);
                    accumulate(&mut dt[row * d..(row + 1) * d], g, 1.0);
                }
            }
            Op::ApplyMask { x, mask } => {
                if self.nodes[*x].requires_grad {
                    let dx = self.acc(grads, *x);
                    for ((d, &gv), &mv) in dx.iter_mut().zip(g).zip(mask.data()) {
                        *d += gv * mv;
                    }
                }
            }
            Op::Sum { x } => {
                if self.nodes[*x].requires_grad {
                    let dx = self.acc(grads, *x);
                    for d in dx.iter_mut() {
                        *d += g[0];
                    }
                }
            }
            Op::Mean { x } => {
                if self.nodes[*x].requires_grad {
                    let n = self.nodes[*x].value.numel() as f64;
                    let dx = self.acc(grads, *x);
                    for d in dx.iter_mut() {
                        *d += g[0] / n;
                    }
                }
            }
            Op::Softmax { x } => {
                if self.nodes[*x].requires_grad {
                    let y = node.value.data();
                    let dot: f64 = g.iter().zip(y).map(|(&gv, &yv)| gv * yv).sum();
                    let dx = self.acc(grads, *x);
                    for ((d, &gv), &yv) in dx.iter_mut().zip(g).zip(y) {
                        *d += yv * (gv - dot);
                    }
                }
            }
            Op::KlCategorical { p, q } => {
                let gv = g[0];
                let (vp, vq) = (self.nodes[*p].value.data(), self.nodes[*q].value.data());
                if self.nodes[*p].requires_grad {
                    let dp = self.acc(grads, *p);
                    for ((d, &pi), &qi) in dp.iter_mut().zip(vp).zip(vq) {
                        if pi > 0.0 {
                            *d += gv * (math::ln(pi) - math::ln(qi) + 1.0);
                        }
                    }
                }
                if self.nodes[*q].requires_grad {
                    let dq = self.acc(grads, *q);
                    for ((d, &pi), &qi) in dq.iter_mut().zip(vp).zip(vq) {
                        if pi > 0.0 {
                            *d -= gv * pi / qi;
                        }
                    }
                }
            }
            Op::CrossEntropyLogits { logits, target } => {
                if self.nodes[*logits].requires_grad {
                    let probs = tensor::softmax_slice(self.nodes[*logits].value.data());
                    let gv = g[0];
                    let dl = self.acc(grads, *logits);
                    for (i, (d, &pi)) in dl.iter_mut().zip(&probs).enumerate() {
                        let delta = if i == *target { 1.0 } else { 0.0 };
                        *d += gv * (pi - delta);
                    }
                }
            }
        }
    }

    /// Gradient buffer for node `id`, created zeroed on first touch.
    #[allow(clippy::mut_from_ref)]
    fn acc<'g>(&self, grads: &'g mut [Option<Vec<f64>>], id: usize) -> &'g mut Vec<f64> {
        grads[id].get_or_insert_with(|| vec![0.0; self.nodes[id].value.numel()])
    }
}

fn accumulate(dst: &mut [f64], src: &[f64], scale: f64) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += scale * s;
    }
}

fn validate_simplex(op: &'static str, p: &[f64]) -> Result<()> {
    let sum: f64 = p.iter().sum();
    if math::abs(sum - 1.0) > SIMPLEX_TOL || p.iter().any(|&v| v < -SIMPLEX_TOL) {
        return Err(Error::domain(
            op,
            format!("input not on the probability simplex (sum = {sum})"),
        ));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        math::abs(a - b) < tol
    }

    #[test]
    fn softmax_examples() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::vector(vec![0.0, 0.0]));
        let y = tape.softmax(x).unwrap();
        assert_eq!(tape.value(y).data(), &[0.5, 0.5]);

        let x = tape.leaf(Tensor::vector(vec![0.0, math::ln(3.0)]));
        let y = tape.softmax(x).unwrap();
        assert!(close(tape.value(y).data()[0], 0.25, 1e-15));
        assert!(close(tape.value(y).data()[1], 0.75, 1e-15));
    }

    #[test]
    fn softmax_empty_input_is_an_error() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::vector(vec![]));
        assert!(tape.softmax(x).is_err());
    }

    #[test]
    fn kl_examples() {
        let mut tape = Tape::new();
        let p = tape.leaf(Tensor::vector(vec![1.0, 0.0]));
        let q = tape.leaf(Tensor::vector(vec![0.5, 0.5]));
        let kl = tape.kl_categorical(p, q).unwrap();
        assert!(close(tape.scalar_value(kl).unwrap(), math::ln(2.0), 1e-12));

        let p = tape.leaf(Tensor::vector(vec![0.25, 0.75]));
        let q = tape.leaf(Tensor::vector(vec![0.75, 0.25]));
        let kl = tape.kl_categorical(p, q).unwrap();
        assert!(close(tape.scalar_value(kl).unwrap(), 0.5 * math::ln(3.0), 1e-12));
    }

    #[test]
    fn kl_rejects_off_simplex_input() {
        let mut tape = Tape::new();
        let p = tape.leaf(Tensor::vector(vec![0.7, 0.7]));
        let q = tape.leaf(Tensor::vector(vec![0.5, 0.5]));
        assert!(matches!(tape.kl_categorical(p, q), Err(Error::Domain { .. })));
    }

    #[test]
    fn cross_entropy_examples() {
        let mut tape = Tape::new();
        let logits = tape.leaf(Tensor::vector(vec![1.0; 4]));
        let ce = tape.cross_entropy_from_logits(logits, 2).unwrap();
        assert!(close(tape.scalar_value(ce).unwrap(), math::ln(4.0), 1e-12));

        // ~2.06e-9; the log-sum-exp path keeps it positive and accurate to
        // the rounding of the `lse - logit` subtraction (~1e-16 absolute).
        let logits = tape.leaf(Tensor::vector(vec![10.0, -10.0]));
        let ce = tape.cross_entropy_from_logits(logits, 0).unwrap();
        let got = tape.scalar_value(ce).unwrap();
        assert!(close(got, math::ln_1p(math::exp(-20.0)), 1e-15), "got {got}");
    }

    #[test]
    fn cross_entropy_rejects_bad_target() {
        let mut tape = Tape::new();
        let logits = tape.leaf(Tensor::vector(vec![0.0; 3]));
        assert!(matches!(
            tape.cross_entropy_from_logits(logits, 3),
            Err(Error::Index { .. })
        ));
    }

    #[test]
    fn backward_of_sum_is_ones() {
        let mut tape = Tape::new();
        let w = tape.param(Tensor::vector(vec![1.0, -2.0, 3.0]));
        let loss = tape.sum(w);
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(w).unwrap().data(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn backward_of_squared_norm_is_2w() {
        let mut tape = Tape::new();
        let w = tape.param(Tensor::vector(vec![1.5, -0.5]));
        let sq = tape.mul(w, w).unwrap();
        let loss = tape.sum(sq);
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(w).unwrap().data(), &[3.0, -1.0]);
    }

    #[test]
    fn backward_requires_scalar_loss() {
        let mut tape = Tape::new();
        let w = tape.param(Tensor::vector(vec![1.0, 2.0]));
        assert!(matches!(tape.backward(w), Err(Error::Contract(_))));
    }

    #[test]
    fn constant_leaves_receive_no_gradient() {
        let mut tape = Tape::new();
        let w = tape.param(Tensor::vector(vec![2.0]));
        let c = tape.leaf(Tensor::vector(vec![5.0]));
        let prod = tape.mul(w, c).unwrap();
        let loss = tape.sum(prod);
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(w).unwrap().data(), &[5.0]);
        assert!(grads.get(c).is_none());
    }

    #[test]
    fn unreached_parameters_get_zero_gradients() {
        let mut tape = Tape::new();
        let w = tape.param(Tensor::vector(vec![1.0, 2.0]));
        let u = tape.param(Tensor::vector(vec![3.0]));
        let loss = tape.sum(w);
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(u).unwrap().data(), &[0.0]);
    }

    #[test]
    fn backward_is_bit_deterministic() {
        let mut tape = Tape::new();
        let w = tape.param(Tensor::matrix(2, 3, vec![0.3, -1.2, 0.7, 2.0, 0.1, -0.4]).unwrap());
        let x = tape.leaf(Tensor::vector(vec![0.5, -0.25, 1.5]));
        let y = tape.matmul(w, x).unwrap();
        let t = tape.tanh(y);
        let loss = tape.sum(t);
        let g1 = tape.backward(loss).unwrap();
        let g2 = tape.backward(loss).unwrap();
        assert_eq!(g1.get(w).unwrap().data(), g2.get(w).unwrap().data());
    }

    #[test]
    fn matmul_grad_of_sum_is_column_sums() {
        // d/dA sum(A x B) has every row equal to the column sums of B.
        let mut tape = Tape::new();
        let a = tape.param(Tensor::matrix(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let b = tape.leaf(Tensor::matrix(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap());
        let prod = tape.matmul(a, b).unwrap();
        let loss = tape.sum(prod);
        let grads = tape.backward(loss).unwrap();
        let expect = [6.0, 15.0, 6.0, 15.0]; // column sums of B per row of A
        assert_eq!(grads.get(a).unwrap().data(), &expect);
    }
}
