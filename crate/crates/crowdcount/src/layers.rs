//! Structured layer ops, recorded on the tape.
//!
//! Each op validates shapes (errors name the op and both shapes), computes the
//! forward pass via the kernels, and pushes a node when any traced input is
//! involved. With no traced inputs these are plain functions — inference runs
//! through the same code with an empty tape.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::kernels::{self, ConvGeom, TconvGeom};
use crate::scalar::Scalar;
use crate::tape::{Op, Tape};
use crate::tensor::Tensor;

fn chw<S: Scalar>(op: &'static str, t: &Tensor<S>) -> Result<(usize, usize, usize)> {
    match t.shape() {
        [c, h, w] => Ok((*c, *h, *w)),
        other => Err(Error::shape(op, "(C, H, W)", format!("{other:?}"))),
    }
}

/// 2-D convolution (cross-correlation): x (c_in, h, w), w (c_out, c_in, k, k),
/// b (c_out). Output dims must come out integral for the given stride/padding.
pub fn conv2d<S: Scalar>(
    tape: &mut Tape<S>,
    x: &Tensor<S>,
    w: &Tensor<S>,
    b: &Tensor<S>,
    stride: usize,
    pad: usize,
) -> Result<Tensor<S>> {
    let (c_in, h, width) = chw("conv2d", x)?;
    let (c_out, k) = match w.shape() {
        [co, ci, kh, kw] if *ci == c_in && kh == kw => (*co, *kh),
        other => {
            return Err(Error::shape(
                "conv2d",
                format!("weights (c_out, {c_in}, k, k)"),
                format!("{other:?}"),
            ))
        }
    };
    if b.shape() != [c_out] {
        return Err(Error::shape("conv2d", format!("bias [{c_out}]"), format!("{:?}", b.shape())));
    }
    let geom = ConvGeom::new(c_in, h, width, c_out, k, stride, pad)?;
    let mut out = Tensor::zeros(&[c_out, geom.h_out, geom.w_out]);
    kernels::conv2d_fwd(x.data(), w.data(), b.data(), &geom, out.data_mut());

    let (ix, iw, ib) = (tape.lookup(x), tape.lookup(w), tape.lookup(b));
    if ix.is_some() || iw.is_some() || ib.is_some() {
        let op = Op::Conv {
            x: ix,
            w: iw,
            b: ib,
            x_data: x.data().to_vec(),
            w_data: w.data().to_vec(),
            geom,
        };
        out.node = Some(tape.push(op, out.numel()));
    }
    Ok(out)
}

/// Convolution with "same" padding ((k-1)/2) and stride 1.
pub fn conv2d_same<S: Scalar>(
    tape: &mut Tape<S>,
    x: &Tensor<S>,
    w: &Tensor<S>,
    b: &Tensor<S>,
) -> Result<Tensor<S>> {
    let k = match w.shape() {
        [_, _, kh, _] => *kh,
        other => return Err(Error::shape("conv2d", "rank-4 weights", format!("{other:?}"))),
    };
    conv2d(tape, x, w, b, 1, (k - 1) / 2)
}

/// Transposed convolution fixed at k=4, s=2, p=1: doubles H and W exactly.
/// Weights are (c_in, c_out, 4, 4) and the op is the adjoint of the matching
/// stride-2 convolution.
pub fn transposed_conv2d<S: Scalar>(
    tape: &mut Tape<S>,
    x: &Tensor<S>,
    w: &Tensor<S>,
    b: &Tensor<S>,
) -> Result<Tensor<S>> {
    let (c_in, h, width) = chw("transposed_conv2d", x)?;
    let c_out = match w.shape() {
        [ci, co, 4, 4] if *ci == c_in => *co,
        other => {
            return Err(Error::shape(
                "transposed_conv2d",
                format!("weights ({c_in}, c_out, 4, 4)"),
                format!("{other:?}"),
            ))
        }
    };
    if b.shape() != [c_out] {
        return Err(Error::shape(
            "transposed_conv2d",
            format!("bias [{c_out}]"),
            format!("{:?}", b.shape()),
        ));
    }
    let geom = TconvGeom::new(c_in, h, width, c_out, 4, 2, 1)?;
    let mut out = Tensor::zeros(&[c_out, geom.h_out, geom.w_out]);
    kernels::tconv2d_fwd(x.data(), w.data(), b.data(), &geom, out.data_mut());

    let (ix, iw, ib) = (tape.lookup(x), tape.lookup(w), tape.lookup(b));
    if ix.is_some() || iw.is_some() || ib.is_some() {
        let op = Op::Tconv {
            x: ix,
            w: iw,
            b: ib,
            x_data: x.data().to_vec(),
            w_data: w.data().to_vec(),
            geom,
        };
        out.node = Some(tape.push(op, out.numel()));
    }
    Ok(out)
}

/// 2x2/stride-2 max pooling; odd dims replicate the trailing edge and ties
/// resolve to the first candidate in row-major window order.
pub fn maxpool2<S: Scalar>(tape: &mut Tape<S>, x: &Tensor<S>) -> Result<Tensor<S>> {
    let (c, h, w) = chw("maxpool2", x)?;
    if h == 0 || w == 0 {
        return Err(Error::shape("maxpool2", "non-empty input", format!("{:?}", x.shape())));
    }
    let (h_out, w_out) = ((h + 1) / 2, (w + 1) / 2);
    let mut out = Tensor::zeros(&[c, h_out, w_out]);
    let mut argmax = vec![0u32; out.numel()];
    kernels::maxpool2_fwd(x.data(), c, h, w, out.data_mut(), &mut argmax);
    if let Some(ix) = tape.lookup(x) {
        out.node = Some(tape.push(Op::MaxPool { x: Some(ix), argmax }, out.numel()));
    }
    Ok(out)
}

pub fn relu<S: Scalar>(tape: &mut Tape<S>, x: &Tensor<S>) -> Result<Tensor<S>> {
    let data: Vec<S> = x.data().iter().map(|v| v.max_s(S::ZERO)).collect();
    let mut out = Tensor::from_vec(x.shape(), data)?;
    if let Some(ix) = tape.lookup(x) {
        let keep = x.data().iter().map(|v| *v >= S::ZERO).collect();
        out.node = Some(tape.push(Op::Relu { a: Some(ix), keep }, out.numel()));
    }
    Ok(out)
}

/// PReLU with one learnable slope per channel of a (C, H, W) input.
pub fn prelu<S: Scalar>(tape: &mut Tape<S>, x: &Tensor<S>, slope: &Tensor<S>) -> Result<Tensor<S>> {
    let (c, h, w) = chw("prelu", x)?;
    if slope.shape() != [c] {
        return Err(Error::shape("prelu", format!("slope [{c}]"), format!("{:?}", slope.shape())));
    }
    let plane = h * w;
    let data: Vec<S> = x
        .data()
        .iter()
        .enumerate()
        .map(|(i, v)| if *v >= S::ZERO { *v } else { slope.data()[i / plane] * *v })
        .collect();
    let mut out = Tensor::from_vec(x.shape(), data)?;
    let (ix, is) = (tape.lookup(x), tape.lookup(slope));
    if ix.is_some() || is.is_some() {
        let op = Op::PRelu {
            x: ix,
            slope: is,
            x_data: x.data().to_vec(),
            slope_data: slope.data().to_vec(),
            plane,
        };
        out.node = Some(tape.push(op, out.numel()));
    }
    Ok(out)
}

pub fn sigmoid<S: Scalar>(tape: &mut Tape<S>, x: &Tensor<S>) -> Result<Tensor<S>> {
    let data: Vec<S> = x.data().iter().map(|v| kernels::sigmoid_one(*v)).collect();
    let mut out = Tensor::from_vec(x.shape(), data)?;
    if let Some(ix) = tape.lookup(x) {
        let y = out.data().to_vec();
        out.node = Some(tape.push(Op::Sigmoid { a: Some(ix), y }, out.numel()));
    }
    Ok(out)
}

/// Fully connected layer: x [n], w (m, n), b [m] -> [m].
pub fn fully_connected<S: Scalar>(
    tape: &mut Tape<S>,
    x: &Tensor<S>,
    w: &Tensor<S>,
    b: &Tensor<S>,
) -> Result<Tensor<S>> {
    let n = match x.shape() {
        [n] => *n,
        other => return Err(Error::shape("fully_connected", "[n]", format!("{other:?}"))),
    };
    let m = match w.shape() {
        [m, wn] if *wn == n => *m,
        other => {
            return Err(Error::shape("fully_connected", format!("weights (m, {n})"), format!("{other:?}")))
        }
    };
    if b.shape() != [m] {
        return Err(Error::shape("fully_connected", format!("bias [{m}]"), format!("{:?}", b.shape())));
    }
    let mut out = Tensor::zeros(&[m]);
    kernels::fc_fwd(x.data(), w.data(), b.data(), m, n, out.data_mut());
    let (ix, iw, ib) = (tape.lookup(x), tape.lookup(w), tape.lookup(b));
    if ix.is_some() || iw.is_some() || ib.is_some() {
        let op = Op::Fc {
            x: ix,
            w: iw,
            b: ib,
            x_data: x.data().to_vec(),
            w_data: w.data().to_vec(),
            m,
            n,
        };
        out.node = Some(tape.push(op, out.numel()));
    }
    Ok(out)
}

/// Inverted dropout. In training mode each value is zeroed with probability
/// `rate` and survivors are scaled by 1/(1-rate); eval mode is the identity.
pub fn dropout<S: Scalar>(
    tape: &mut Tape<S>,
    x: &Tensor<S>,
    rate: f64,
    train: bool,
    rng: &mut ChaCha8Rng,
) -> Result<Tensor<S>> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::invalid(format!("dropout: rate {rate} outside [0, 1)")));
    }
    if !train || rate == 0.0 {
        return Ok(x.clone());
    }
    let keep_scale = S::from_f64(1.0 / (1.0 - rate));
    let mask: Vec<S> = (0..x.numel())
        .map(|_| if rng.gen::<f64>() >= rate { keep_scale } else { S::ZERO })
        .collect();
    let data: Vec<S> = x.data().iter().zip(&mask).map(|(v, m)| *v * *m).collect();
    let mut out = Tensor::from_vec(x.shape(), data)?;
    if let Some(ix) = tape.lookup(x) {
        out.node = Some(tape.push(Op::Dropout { x: Some(ix), mask }, out.numel()));
    }
    Ok(out)
}

/// Softmax cross-entropy against an integer label; returns a scalar loss.
/// Stable under large logits (max-shifted exponentials).
pub fn softmax_cross_entropy<S: Scalar>(
    tape: &mut Tape<S>,
    logits: &Tensor<S>,
    label: usize,
) -> Result<Tensor<S>> {
    let n = match logits.shape() {
        [n] if *n > 0 => *n,
        other => return Err(Error::shape("softmax_cross_entropy", "[n], n > 0", format!("{other:?}"))),
    };
    if label >= n {
        return Err(Error::invalid(format!(
            "softmax_cross_entropy: label {label} out of range for {n} classes"
        )));
    }
    let mut max = logits.data()[0];
    for v in logits.data() {
        max = max.max_s(*v);
    }
    let mut denom = S::ZERO;
    let mut probs = Vec::with_capacity(n);
    for v in logits.data() {
        let e = (*v - max).exp();
        probs.push(e);
        denom += e;
    }
    for p in &mut probs {
        *p /= denom;
    }
    let loss = -(probs[label].ln());
    let mut out = Tensor::scalar(loss);
    if let Some(il) = tape.lookup(logits) {
        out.node = Some(tape.push(Op::SoftmaxCe { logits: Some(il), probs, label }, 1));
    }
    Ok(out)
}

/// Softmax probabilities without a loss head (used for reporting only).
pub fn softmax_probs<S: Scalar>(logits: &Tensor<S>) -> Result<Vec<S>> {
    let mut max = match logits.shape() {
        [n] if *n > 0 => logits.data()[0],
        other => return Err(Error::shape("softmax", "[n], n > 0", format!("{other:?}"))),
    };
    for v in logits.data() {
        max = max.max_s(*v);
    }
    let mut probs: Vec<S> = logits.data().iter().map(|v| (*v - max).exp()).collect();
    let mut denom = S::ZERO;
    for p in &probs {
        denom += *p;
    }
    for p in &mut probs {
        *p /= denom;
    }
    Ok(probs)
}

/// Concatenate (C_i, H, W) tensors along the channel axis.
pub fn concat_channels<S: Scalar>(tape: &mut Tape<S>, parts: &[&Tensor<S>]) -> Result<Tensor<S>> {
    if parts.is_empty() {
        return Err(Error::invalid("concat_channels: no inputs"));
    }
    let (c0, h, w) = chw("concat_channels", parts[0])?;
    let mut c_total = c0;
    for p in &parts[1..] {
        let (c, ph, pw) = chw("concat_channels", p)?;
        if (ph, pw) != (h, w) {
            return Err(Error::shape(
                "concat_channels",
                format!("(_, {h}, {w})"),
                format!("{:?}", p.shape()),
            ));
        }
        c_total += c;
    }
    let mut data = Vec::with_capacity(c_total * h * w);
    for p in parts {
        data.extend_from_slice(p.data());
    }
    let mut out = Tensor::from_vec(&[c_total, h, w], data)?;
    let ins: Vec<(Option<usize>, usize)> =
        parts.iter().map(|p| (tape.lookup(p), p.numel())).collect();
    if ins.iter().any(|(i, _)| i.is_some()) {
        out.node = Some(tape.push(Op::ConcatC { parts: ins }, out.numel()));
    }
    Ok(out)
}

/// Flatten (C, H, W) -> [C*H*W]; gradient passes straight through.
pub fn flatten<S: Scalar>(tape: &mut Tape<S>, x: &Tensor<S>) -> Result<Tensor<S>> {
    let n = x.numel();
    let mut out = Tensor::from_vec(&[n], x.data().to_vec())?;
    if let Some(ix) = tape.lookup(x) {
        out.node = Some(tape.push(Op::Reshape { a: Some(ix) }, n));
    }
    Ok(out)
}
