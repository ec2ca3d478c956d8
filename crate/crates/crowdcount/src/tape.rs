//! Reverse-mode autodiff on a flat Wengert tape.
//!
//! Ops append nodes carrying whatever forward values their backward rule
//! needs; `backward` replays the list once in reverse insertion order,
//! accumulating (summing) gradients across fan-out. Tapes are cheap and
//! single-use: build one per training step, run backward, read gradients,
//! drop it. A tensor recorded on an older tape is treated as untraced by a
//! newer one, so parameters can be reused across steps without cleanup.
//!
//! Elementwise and reduction ops live here; the structured layer ops (conv,
//! pooling, ...) are in `layers` and push their nodes through the same
//! mechanism.

use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Error, Result};
use crate::kernels::{self, ConvGeom, TconvGeom};
use crate::scalar::Scalar;
use crate::tensor::{TapeRef, Tensor};

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

/// Input slot of a node: `Some` if that argument was traced on this tape.
pub(crate) type In = Option<usize>;

pub(crate) enum Op<S: Scalar> {
    Leaf,
    Add { a: In, b: In },
    AddScalar { a: In },
    Mul { a: In, b: In, a_data: Vec<S>, b_data: Vec<S> },
    Scale { a: In, factor: S },
    Log { a: In, a_data: Vec<S> },
    Sum { a: In },
    Mean { a: In },
    /// y = (1/n) sum |a - b|; stores sign(a - b) with sign(0) = 0.
    AbsDiffMean { a: In, b: In, sign: Vec<i8> },
    /// y = (1/n) sum (a - b)^2; stores a - b.
    SqDiffMean { a: In, b: In, diff: Vec<S> },
    Relu { a: In, keep: Vec<bool> },
    PRelu { x: In, slope: In, x_data: Vec<S>, slope_data: Vec<S>, plane: usize },
    Sigmoid { a: In, y: Vec<S> },
    Conv { x: In, w: In, b: In, x_data: Vec<S>, w_data: Vec<S>, geom: ConvGeom },
    Tconv { x: In, w: In, b: In, x_data: Vec<S>, w_data: Vec<S>, geom: TconvGeom },
    MaxPool { x: In, argmax: Vec<u32> },
    Fc { x: In, w: In, b: In, x_data: Vec<S>, w_data: Vec<S>, m: usize, n: usize },
    Dropout { x: In, mask: Vec<S> },
    SoftmaxCe { logits: In, probs: Vec<S>, label: usize },
    ConcatC { parts: Vec<(In, usize)> },
    Reshape { a: In },
}

pub(crate) struct Node<S: Scalar> {
    pub op: Op<S>,
    pub numel: usize,
}

pub struct Tape<S: Scalar> {
    id: u64,
    nodes: Vec<Node<S>>,
    grads: Vec<Option<Vec<S>>>,
}

impl<S: Scalar> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Tape {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
            grads: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Node id of `t` if it was traced on *this* tape.
    pub(crate) fn lookup(&self, t: &Tensor<S>) -> In {
        match t.node() {
            Some(r) if r.tape_id == self.id => Some(r.node),
            _ => None,
        }
    }

    pub(crate) fn push(&mut self, op: Op<S>, numel: usize) -> TapeRef {
        let node = self.nodes.len();
        self.nodes.push(Node { op, numel });
        TapeRef { tape_id: self.id, node }
    }

    /// Register `t` as a traced leaf (parameter or input we want gradients
    /// for). Gradients accumulate at this node during `backward`.
    pub fn watch(&mut self, t: &mut Tensor<S>) {
        let r = self.push(Op::Leaf, t.numel());
        t.node = Some(r);
    }

    /// Gradient buffer for a tensor traced on this tape. Parameters the loss
    /// never touched get zeros (the accumulator was never written).
    pub fn grad_of(&self, t: &Tensor<S>) -> Result<Vec<S>> {
        let id = self
            .lookup(t)
            .ok_or_else(|| Error::invalid("grad_of: tensor is not traced on this tape"))?;
        Ok(match &self.grads.get(id) {
            Some(Some(g)) => g.clone(),
            _ => vec![S::ZERO; t.numel()],
        })
    }

    /// Run reverse-mode accumulation from a traced scalar loss. Visits each
    /// node exactly once, in reverse insertion order.
    pub fn backward(&mut self, loss: &Tensor<S>) -> Result<()> {
        let root = self
            .lookup(loss)
            .ok_or_else(|| Error::NonScalarLoss("an untraced tensor".into()))?;
        if !loss.is_scalar() {
            return Err(Error::NonScalarLoss(format!("{:?}", loss.shape())));
        }
        let n = self.nodes.len();
        self.grads = vec![None; n];
        self.grads[root] = Some(vec![S::ONE]);

        for i in (0..n).rev() {
            let Some(gy) = self.grads[i].take() else { continue };
            let (done, rest) = self.grads.split_at_mut(i);
            // `done` holds accumulators for nodes with id < i: exactly the
            // candidates this node's inputs can point at (append-only tape).
            let node = &self.nodes[i];
            step_backward(&node.op, &gy, done, &self.nodes);
            rest[0] = Some(gy);
        }
        Ok(())
    }
}

fn grad_buf<'a, S: Scalar>(
    grads: &'a mut [Option<Vec<S>>],
    nodes: &[Node<S>],
    id: usize,
) -> &'a mut [S] {
    grads[id].get_or_insert_with(|| vec![S::ZERO; nodes[id].numel])
}

fn step_backward<S: Scalar>(
    op: &Op<S>,
    gy: &[S],
    grads: &mut [Option<Vec<S>>],
    nodes: &[Node<S>],
) {
    match op {
        Op::Leaf => {}
        Op::Add { a, b } => {
            for id in [a, b].into_iter().flatten() {
                let dst = grad_buf(grads, nodes, *id);
                for (d, g) in dst.iter_mut().zip(gy) {
                    *d += *g;
                }
            }
        }
        Op::AddScalar { a } | Op::Reshape { a } => {
            if let Some(id) = a {
                let dst = grad_buf(grads, nodes, *id);
                for (d, g) in dst.iter_mut().zip(gy) {
                    *d += *g;
                }
            }
        }
        Op::Mul { a, b, a_data, b_data } => {
            if let Some(id) = a {
                let dst = grad_buf(grads, nodes, *id);
                for ((d, g), bv) in dst.iter_mut().zip(gy).zip(b_data) {
                    *d += *g * *bv;
                }
            }
            if let Some(id) = b {
                let dst = grad_buf(grads, nodes, *id);
                for ((d, g), av) in dst.iter_mut().zip(gy).zip(a_data) {
                    *d += *g * *av;
                }
            }
        }
        Op::Scale { a, factor } => {
            if let Some(id) = a {
                let dst = grad_buf(grads, nodes, *id);
                for (d, g) in dst.iter_mut().zip(gy) {
                    *d += *g * *factor;
                }
            }
        }
        Op::Log { a, a_data } => {
            if let Some(id) = a {
                let dst = grad_buf(grads, nodes, *id);
                for ((d, g), av) in dst.iter_mut().zip(gy).zip(a_data) {
                    *d += *g / *av;
                }
            }
        }
        Op::Sum { a } => {
            if let Some(id) = a {
                let g = gy[0];
                let dst = grad_buf(grads, nodes, *id);
                for d in dst.iter_mut() {
                    *d += g;
                }
            }
        }
        Op::Mean { a } => {
            if let Some(id) = a {
                let dst = grad_buf(grads, nodes, *id);
                let g = gy[0] / S::from_f64(dst.len() as f64);
                for d in dst.iter_mut() {
                    *d += g;
                }
            }
        }
        Op::AbsDiffMean { a, b, sign } => {
            let inv_n = S::ONE / S::from_f64(sign.len() as f64);
            if let Some(id) = a {
                let dst = grad_buf(grads, nodes, *id);
                for (d, s) in dst.iter_mut().zip(sign) {
                    *d += gy[0] * S::from_f64(*s as f64) * inv_n;
                }
            }
            if let Some(id) = b {
                let dst = grad_buf(grads, nodes, *id);
                for (d, s) in dst.iter_mut().zip(sign) {
                    *d -= gy[0] * S::from_f64(*s as f64) * inv_n;
                }
            }
        }
        Op::SqDiffMean { a, b, diff } => {
            let two_over_n = S::from_f64(2.0 / diff.len() as f64);
            if let Some(id) = a {
                let dst = grad_buf(grads, nodes, *id);
                for (d, dv) in dst.iter_mut().zip(diff) {
                    *d += gy[0] * two_over_n * *dv;
                }
            }
            if let Some(id) = b {
                let dst = grad_buf(grads, nodes, *id);
                for (d, dv) in dst.iter_mut().zip(diff) {
                    *d -= gy[0] * two_over_n * *dv;
                }
            }
        }
        Op::Relu { a, keep } => {
            if let Some(id) = a {
                let dst = grad_buf(grads, nodes, *id);
                for ((d, g), k) in dst.iter_mut().zip(gy).zip(keep) {
                    if *k {
                        *d += *g;
                    }
                }
            }
        }
        Op::PRelu { x, slope, x_data, slope_data, plane } => {
            if let Some(id) = x {
                let dst = grad_buf(grads, nodes, *id);
                for (i, (d, g)) in dst.iter_mut().zip(gy).enumerate() {
                    let c = i / plane;
                    if x_data[i] >= S::ZERO {
                        *d += *g;
                    } else {
                        *d += *g * slope_data[c];
                    }
                }
            }
            if let Some(id) = slope {
                let dst = grad_buf(grads, nodes, *id);
                for (i, g) in gy.iter().enumerate() {
                    if x_data[i] < S::ZERO {
                        dst[i / plane] += *g * x_data[i];
                    }
                }
            }
        }
        Op::Sigmoid { a, y } => {
            if let Some(id) = a {
                let dst = grad_buf(grads, nodes, *id);
                for ((d, g), yv) in dst.iter_mut().zip(gy).zip(y) {
                    *d += *g * *yv * (S::ONE - *yv);
                }
            }
        }
        Op::Conv { x, w, b, x_data, w_data, geom } => {
            if let Some(id) = x {
                kernels::conv2d_bwd_x(gy, w_data, geom, grad_buf(grads, nodes, *id));
            }
            if let Some(id) = w {
                kernels::conv2d_bwd_w(gy, x_data, geom, grad_buf(grads, nodes, *id));
            }
            if let Some(id) = b {
                kernels::conv2d_bwd_b(gy, geom, grad_buf(grads, nodes, *id));
            }
        }
        Op::Tconv { x, w, b, x_data, w_data, geom } => {
            if let Some(id) = x {
                kernels::tconv2d_bwd_x(gy, w_data, geom, grad_buf(grads, nodes, *id));
            }
            if let Some(id) = w {
                kernels::tconv2d_bwd_w(gy, x_data, geom, grad_buf(grads, nodes, *id));
            }
            if let Some(id) = b {
                kernels::tconv2d_bwd_b(gy, geom, grad_buf(grads, nodes, *id));
            }
        }
        Op::MaxPool { x, argmax } => {
            if let Some(id) = x {
                let dst = grad_buf(grads, nodes, *id);
                for (g, &src) in gy.iter().zip(argmax) {
                    dst[src as usize] += *g;
                }
            }
        }
        Op::Fc { x, w, b, x_data, w_data, m, n } => {
            // Grad buffers must be fetched one at a time (mutable aliasing),
            // so each input gets its own pass.
            if let Some(id) = x {
                kernels::fc_bwd(gy, x_data, w_data, *m, *n, Some(grad_buf(grads, nodes, *id)), None, None);
            }
            if let Some(id) = w {
                kernels::fc_bwd(gy, x_data, w_data, *m, *n, None, Some(grad_buf(grads, nodes, *id)), None);
            }
            if let Some(id) = b {
                kernels::fc_bwd(gy, x_data, w_data, *m, *n, None, None, Some(grad_buf(grads, nodes, *id)));
            }
        }
        Op::Dropout { x, mask } => {
            if let Some(id) = x {
                let dst = grad_buf(grads, nodes, *id);
                for ((d, g), m) in dst.iter_mut().zip(gy).zip(mask) {
                    *d += *g * *m;
                }
            }
        }
        Op::SoftmaxCe { logits, probs, label } => {
            if let Some(id) = logits {
                let dst = grad_buf(grads, nodes, *id);
                for (j, (d, p)) in dst.iter_mut().zip(probs).enumerate() {
                    let indicator = if j == *label { S::ONE } else { S::ZERO };
                    *d += gy[0] * (*p - indicator);
                }
            }
        }
        Op::ConcatC { parts } => {
            let mut off = 0;
            for (input, numel) in parts {
                if let Some(id) = input {
                    let dst = grad_buf(grads, nodes, *id);
                    for (d, g) in dst.iter_mut().zip(&gy[off..off + numel]) {
                        *d += *g;
                    }
                }
                off += numel;
            }
        }
    }
}

// ---- elementwise / reduction ops ------------------------------------------

fn check_same_shape<S: Scalar>(op: &'static str, a: &Tensor<S>, b: &Tensor<S>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(op, format!("{:?}", a.shape()), format!("{:?}", b.shape())));
    }
    Ok(())
}

pub fn add<S: Scalar>(tape: &mut Tape<S>, a: &Tensor<S>, b: &Tensor<S>) -> Result<Tensor<S>> {
    check_same_shape("tensor_add", a, b)?;
    let data = a.data().iter().zip(b.data()).map(|(x, y)| *x + *y).collect();
    let mut out = Tensor::from_vec(a.shape(), data)?;
    let (ia, ib) = (tape.lookup(a), tape.lookup(b));
    if ia.is_some() || ib.is_some() {
        out.node = Some(tape.push(Op::Add { a: ia, b: ib }, out.numel()));
    }
    Ok(out)
}

pub fn mul<S: Scalar>(tape: &mut Tape<S>, a: &Tensor<S>, b: &Tensor<S>) -> Result<Tensor<S>> {
    check_same_shape("tensor_mul", a, b)?;
    let data = a.data().iter().zip(b.data()).map(|(x, y)| *x * *y).collect();
    let mut out = Tensor::from_vec(a.shape(), data)?;
    let (ia, ib) = (tape.lookup(a), tape.lookup(b));
    if ia.is_some() || ib.is_some() {
        let op = Op::Mul {
            a: ia,
            b: ib,
            a_data: a.data().to_vec(),
            b_data: b.data().to_vec(),
        };
        out.node = Some(tape.push(op, out.numel()));
    }
    Ok(out)
}

pub fn scale<S: Scalar>(tape: &mut Tape<S>, a: &Tensor<S>, factor: S) -> Result<Tensor<S>> {
    let data = a.data().iter().map(|x| *x * factor).collect();
    let mut out = Tensor::from_vec(a.shape(), data)?;
    if let Some(ia) = tape.lookup(a) {
        out.node = Some(tape.push(Op::Scale { a: Some(ia), factor }, out.numel()));
    }
    Ok(out)
}

pub fn add_scalar<S: Scalar>(tape: &mut Tape<S>, a: &Tensor<S>, c: S) -> Result<Tensor<S>> {
    let data = a.data().iter().map(|x| *x + c).collect();
    let mut out = Tensor::from_vec(a.shape(), data)?;
    if let Some(ia) = tape.lookup(a) {
        out.node = Some(tape.push(Op::AddScalar { a: Some(ia) }, out.numel()));
    }
    Ok(out)
}

/// Elementwise natural log; caller guarantees strictly positive input
/// (here it is only applied to sigmoid outputs and their complements).
pub fn log<S: Scalar>(tape: &mut Tape<S>, a: &Tensor<S>) -> Result<Tensor<S>> {
    let data = a.data().iter().map(|x| x.ln()).collect();
    let mut out = Tensor::from_vec(a.shape(), data)?;
    if let Some(ia) = tape.lookup(a) {
        out.node = Some(tape.push(Op::Log { a: Some(ia), a_data: a.data().to_vec() }, out.numel()));
    }
    Ok(out)
}

pub fn sum<S: Scalar>(tape: &mut Tape<S>, a: &Tensor<S>) -> Result<Tensor<S>> {
    let mut acc = S::ZERO;
    for v in a.data() {
        acc += *v;
    }
    let mut out = Tensor::scalar(acc);
    if let Some(ia) = tape.lookup(a) {
        out.node = Some(tape.push(Op::Sum { a: Some(ia) }, 1));
    }
    Ok(out)
}

pub fn mean<S: Scalar>(tape: &mut Tape<S>, a: &Tensor<S>) -> Result<Tensor<S>> {
    if a.numel() == 0 {
        return Err(Error::invalid("mean: empty tensor"));
    }
    let mut acc = S::ZERO;
    for v in a.data() {
        acc += *v;
    }
    let mut out = Tensor::scalar(acc / S::from_f64(a.numel() as f64));
    if let Some(ia) = tape.lookup(a) {
        out.node = Some(tape.push(Op::Mean { a: Some(ia) }, 1));
    }
    Ok(out)
}

/// Mean absolute difference: (1/n) sum |a - b|.
pub fn abs_diff_mean<S: Scalar>(tape: &mut Tape<S>, a: &Tensor<S>, b: &Tensor<S>) -> Result<Tensor<S>> {
    check_same_shape("abs_diff_mean", a, b)?;
    if a.numel() == 0 {
        return Err(Error::invalid("abs_diff_mean: empty tensor"));
    }
    let mut acc = S::ZERO;
    let mut sign = Vec::new();
    let (ia, ib) = (tape.lookup(a), tape.lookup(b));
    let traced = ia.is_some() || ib.is_some();
    if traced {
        sign.reserve(a.numel());
    }
    for (x, y) in a.data().iter().zip(b.data()) {
        let d = *x - *y;
        acc += d.abs();
        if traced {
            sign.push(if d > S::ZERO {
                1
            } else if d < S::ZERO {
                -1
            } else {
                0
            });
        }
    }
    let mut out = Tensor::scalar(acc / S::from_f64(a.numel() as f64));
    if traced {
        out.node = Some(tape.push(Op::AbsDiffMean { a: ia, b: ib, sign }, 1));
    }
    Ok(out)
}

/// Mean squared difference: (1/n) sum (a - b)^2.
pub fn sq_diff_mean<S: Scalar>(tape: &mut Tape<S>, a: &Tensor<S>, b: &Tensor<S>) -> Result<Tensor<S>> {
    check_same_shape("sq_diff_mean", a, b)?;
    if a.numel() == 0 {
        return Err(Error::invalid("sq_diff_mean: empty tensor"));
    }
    let mut acc = S::ZERO;
    let mut diff = Vec::with_capacity(a.numel());
    for (x, y) in a.data().iter().zip(b.data()) {
        let d = *x - *y;
        acc += d * d;
        diff.push(d);
    }
    let mut out = Tensor::scalar(acc / S::from_f64(a.numel() as f64));
    let (ia, ib) = (tape.lookup(a), tape.lookup(b));
    if ia.is_some() || ib.is_some() {
        out.node = Some(tape.push(Op::SqDiffMean { a: ia, b: ib, diff }, 1));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::from_vec(shape, data.to_vec()).unwrap()
    }

    #[test]
    fn elementwise_forward_values() {
        let mut tape = Tape::new();
        let a = t(&[3], &[1.0, 2.0, 3.0]);
        let b = t(&[3], &[10.0, 20.0, 30.0]);
        assert_eq!(add(&mut tape, &a, &b).unwrap().data(), &[11.0, 22.0, 33.0]);
        assert_eq!(mul(&mut tape, &a, &b).unwrap().data(), &[10.0, 40.0, 90.0]);
        assert_eq!(scale(&mut tape, &a, 2.0).unwrap().data(), &[2.0, 4.0, 6.0]);
        // nothing was traced, so the tape stayed empty
        assert!(tape.is_empty());
    }

    #[test]
    fn add_rejects_mismatched_shapes() {
        let mut tape = Tape::new();
        let a = t(&[3], &[1.0, 2.0, 3.0]);
        let b = t(&[2], &[1.0, 2.0]);
        let err = add(&mut tape, &a, &b).unwrap_err();
        assert!(err.to_string().contains("[3]") && err.to_string().contains("[2]"));
    }

    #[test]
    fn backward_of_sum_is_ones() {
        let mut tape = Tape::new();
        let mut x = t(&[4], &[1.0, 2.0, 3.0, 4.0]);
        tape.watch(&mut x);
        let loss = sum(&mut tape, &x).unwrap();
        tape.backward(&loss).unwrap();
        assert_eq!(tape.grad_of(&x).unwrap(), vec![1.0; 4]);
    }

    #[test]
    fn backward_of_elementwise_square_is_2x() {
        let mut tape = Tape::new();
        let mut x = t(&[3], &[1.0, -2.0, 0.5]);
        tape.watch(&mut x);
        let sq = mul(&mut tape, &x, &x).unwrap();
        let loss = sum(&mut tape, &sq).unwrap();
        tape.backward(&loss).unwrap();
        assert_eq!(tape.grad_of(&x).unwrap(), vec![2.0, -4.0, 1.0]);
    }

    #[test]
    fn gradients_accumulate_across_fanout() {
        // y = sum(x + x): dy/dx = 2 per element, via two consumers of x
        let mut tape = Tape::new();
        let mut x = t(&[2], &[3.0, 4.0]);
        tape.watch(&mut x);
        let doubled = add(&mut tape, &x, &x).unwrap();
        let loss = sum(&mut tape, &doubled).unwrap();
        tape.backward(&loss).unwrap();
        assert_eq!(tape.grad_of(&x).unwrap(), vec![2.0, 2.0]);
    }

    #[test]
    fn non_scalar_loss_is_an_error() {
        let mut tape = Tape::new();
        let mut x = t(&[2], &[3.0, 4.0]);
        tape.watch(&mut x);
        let y = add(&mut tape, &x, &x).unwrap();
        let err = tape.backward(&y).unwrap_err();
        assert!(matches!(err, Error::NonScalarLoss(_)));
    }

    #[test]
    fn untraced_loss_is_an_error() {
        let mut tape: Tape<f64> = Tape::new();
        let loss = Tensor::scalar(1.0);
        assert!(tape.backward(&loss).is_err());
    }

    #[test]
    fn untouched_parameter_gets_zero_gradient() {
        let mut tape = Tape::new();
        let mut x = t(&[2], &[1.0, 2.0]);
        let mut unused = t(&[3], &[1.0, 1.0, 1.0]);
        tape.watch(&mut x);
        tape.watch(&mut unused);
        let loss = sum(&mut tape, &x).unwrap();
        tape.backward(&loss).unwrap();
        assert_eq!(tape.grad_of(&unused).unwrap(), vec![0.0; 3]);
    }

    #[test]
    fn stale_tape_refs_are_ignored() {
        let mut old = Tape::new();
        let mut x = t(&[2], &[1.0, 2.0]);
        old.watch(&mut x);

        let mut fresh: Tape<f64> = Tape::new();
        let y = add(&mut fresh, &x, &x).unwrap();
        assert!(fresh.is_empty(), "node from another tape must not record");
        assert!(y.node().is_none());
    }

    #[test]
    fn identical_graph_gives_identical_gradients() {
        let run = || {
            let mut tape = Tape::new();
            let mut x = t(&[3], &[0.3, -1.2, 2.5]);
            tape.watch(&mut x);
            let y = mul(&mut tape, &x, &x).unwrap();
            let z = scale(&mut tape, &y, 1.7).unwrap();
            let loss = mean(&mut tape, &z).unwrap();
            tape.backward(&loss).unwrap();
            (loss.item().unwrap(), tape.grad_of(&x).unwrap())
        };
        let (la, ga) = run();
        let (lb, gb) = run();
        assert!(la.to_bits() == lb.to_bits());
        assert!(ga.iter().zip(&gb).all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn abs_diff_mean_matches_hand_value_and_gradient() {
        let mut tape = Tape::new();
        let mut a = t(&[4], &[1.0, 5.0, 2.0, 2.0]);
        let b = t(&[4], &[2.0, 1.0, 2.0, -1.0]);
        tape.watch(&mut a);
        let loss = abs_diff_mean(&mut tape, &a, &b).unwrap();
        // |−1| + |4| + |0| + |3| = 8, /4 = 2
        assert_eq!(loss.item().unwrap(), 2.0);
        tape.backward(&loss).unwrap();
        assert_eq!(tape.grad_of(&a).unwrap(), vec![-0.25, 0.25, 0.0, 0.25]);
    }
}
