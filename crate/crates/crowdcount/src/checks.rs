//! Named gradient checks shared by the `gradcheck` command and the test
//! suite. Each layer check builds one small random instance of the op and
//! compares analytic gradients against central differences over every
//! coordinate — parameters and inputs alike. The composite check probes the
//! full generator; see [`crate::pipeline::generator_gradcheck`].

use rand::Rng;

use crate::gradcheck::{compare_grads, CheckOutcome, FD_STEP, TOL_LAYER};
use crate::layers::{
    concat_channels, conv2d, dropout, flatten, fully_connected, maxpool2, prelu, relu, sigmoid,
    softmax_cross_entropy, transposed_conv2d,
};
use crate::pipeline;
use crate::rng;
use crate::tape::{self, Tape};
use crate::tensor::Tensor;
use crate::Result;

fn randv(seed: u64, name: &str, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    let mut r = rng::stream(seed, name);
    (0..n).map(|_| r.gen_range(lo..hi)).collect()
}

/// FD-check a scalar loss built from a set of watched tensors; every
/// coordinate of every part is probed.
fn fd_check(
    name: &str,
    parts: &[(&[usize], Vec<f64>)],
    build: impl Fn(&mut Tape<f64>, &[Tensor<f64>]) -> Result<Tensor<f64>>,
) -> Result<CheckOutcome> {
    let make = |flat: &[f64]| -> Result<Vec<Tensor<f64>>> {
        let mut off = 0;
        parts
            .iter()
            .map(|(shape, data)| {
                let t = Tensor::from_vec(shape, flat[off..off + data.len()].to_vec());
                off += data.len();
                t
            })
            .collect()
    };
    let flat: Vec<f64> = parts.iter().flat_map(|(_, d)| d.iter().copied()).collect();

    let mut tape = Tape::new();
    let mut tensors = make(&flat)?;
    for t in &mut tensors {
        tape.watch(t);
    }
    let loss = build(&mut tape, &tensors)?;
    tape.backward(&loss)?;
    let mut analytic = Vec::with_capacity(flat.len());
    for t in &tensors {
        analytic.extend(tape.grad_of(t)?);
    }

    let f = |p: &[f64]| -> f64 {
        let mut t = Tape::new();
        build(&mut t, &make(p).expect("same shapes"))
            .and_then(|l| l.item())
            .expect("same shapes")
    };
    Ok(compare_grads(name, &flat, &analytic, f, FD_STEP, TOL_LAYER, None))
}

/// Fixed random projection of the output to a scalar, so each output element
/// receives a distinct gradient.
fn project(tape: &mut Tape<f64>, y: &Tensor<f64>, salt: &str) -> Result<Tensor<f64>> {
    let mut r = rng::stream(0x70726f6a, salt);
    let w: Vec<f64> = (0..y.numel()).map(|_| r.gen_range(-1.0..1.0)).collect();
    let w = Tensor::from_vec(y.shape(), w)?;
    let prod = tape::mul(tape, y, &w)?;
    tape::sum(tape, &prod)
}

/// One finite-difference check per layer type and loss reduction.
pub fn layer_checks(seed: u64) -> Result<Vec<CheckOutcome>> {
    let mut out = Vec::new();

    out.push(fd_check(
        "conv 3x3 pad 1",
        &[
            (&[2, 6, 6], randv(seed, "c1.x", 72, -1.0, 1.0)),
            (&[3, 2, 3, 3], randv(seed, "c1.w", 54, -0.5, 0.5)),
            (&[3], randv(seed, "c1.b", 3, -0.2, 0.2)),
        ],
        |tape, t| {
            let y = conv2d(tape, &t[0], &t[1], &t[2], 1, 1)?;
            project(tape, &y, "c1")
        },
    )?);

    out.push(fd_check(
        "conv 3x3 stride 2",
        &[
            (&[2, 7, 7], randv(seed, "c2.x", 98, -1.0, 1.0)),
            (&[2, 2, 3, 3], randv(seed, "c2.w", 36, -0.5, 0.5)),
            (&[2], randv(seed, "c2.b", 2, -0.2, 0.2)),
        ],
        |tape, t| {
            let y = conv2d(tape, &t[0], &t[1], &t[2], 2, 0)?;
            project(tape, &y, "c2")
        },
    )?);

    out.push(fd_check(
        "tconv 4x4 stride 2",
        &[
            (&[2, 3, 3], randv(seed, "tc.x", 18, -1.0, 1.0)),
            (&[2, 2, 4, 4], randv(seed, "tc.w", 64, -0.5, 0.5)),
            (&[2], randv(seed, "tc.b", 2, -0.2, 0.2)),
        ],
        |tape, t| {
            let y = transposed_conv2d(tape, &t[0], &t[1], &t[2])?;
            project(tape, &y, "tc")
        },
    )?);

    out.push(fd_check(
        "fully connected",
        &[
            (&[8], randv(seed, "fc.x", 8, -1.0, 1.0)),
            (&[5, 8], randv(seed, "fc.w", 40, -0.5, 0.5)),
            (&[5], randv(seed, "fc.b", 5, -0.2, 0.2)),
        ],
        |tape, t| {
            let y = fully_connected(tape, &t[0], &t[1], &t[2])?;
            project(tape, &y, "fc")
        },
    )?);

    out.push(fd_check("relu", &[(&[24], randv(seed, "re.x", 24, -1.0, 1.0))], |tape, t| {
        let y = relu(tape, &t[0])?;
        project(tape, &y, "re")
    })?);

    out.push(fd_check(
        "prelu",
        &[
            (&[3, 4, 4], randv(seed, "pr.x", 48, -1.0, 1.0)),
            (&[3], randv(seed, "pr.a", 3, 0.1, 0.4)),
        ],
        |tape, t| {
            let y = prelu(tape, &t[0], &t[1])?;
            project(tape, &y, "pr")
        },
    )?);

    out.push(fd_check("sigmoid", &[(&[24], randv(seed, "sg.x", 24, -3.0, 3.0))], |tape, t| {
        let y = sigmoid(tape, &t[0])?;
        project(tape, &y, "sg")
    })?);

    out.push(fd_check("maxpool 2x2", &[(&[2, 6, 6], randv(seed, "mp.x", 72, -1.0, 1.0))], |tape, t| {
        let y = maxpool2(tape, &t[0])?;
        project(tape, &y, "mp")
    })?);

    out.push(fd_check("dropout", &[(&[30], randv(seed, "dr.x", 30, -1.0, 1.0))], |tape, t| {
        // a fresh stream per evaluation makes the mask a constant of the check
        let mut mask_rng = rng::stream(seed, "dr.mask");
        let y = dropout(tape, &t[0], 0.3, true, &mut mask_rng)?;
        project(tape, &y, "dr")
    })?);

    out.push(fd_check(
        "softmax cross-entropy",
        &[(&[5], randv(seed, "ce.x", 5, -2.0, 2.0))],
        |tape, t| softmax_cross_entropy(tape, &t[0], 2),
    )?);

    out.push(fd_check(
        "concat channels",
        &[
            (&[1, 3, 3], randv(seed, "cc.a", 9, -1.0, 1.0)),
            (&[2, 3, 3], randv(seed, "cc.b", 18, -1.0, 1.0)),
        ],
        |tape, t| {
            let y = concat_channels(tape, &[&t[0], &t[1]])?;
            project(tape, &y, "cc")
        },
    )?);

    out.push(fd_check("flatten", &[(&[2, 3, 3], randv(seed, "fl.x", 18, -1.0, 1.0))], |tape, t| {
        let y = flatten(tape, &t[0])?;
        project(tape, &y, "fl")
    })?);

    out.push(fd_check(
        "absolute pixel loss",
        &[(&[1, 4, 4], randv(seed, "ab.x", 16, -1.0, 1.0))],
        |tape, t| {
            let gt = Tensor::from_vec(&[1, 4, 4], randv(seed, "ab.gt", 16, -1.0, 1.0))?;
            tape::abs_diff_mean(tape, &t[0], &gt)
        },
    )?);

    out.push(fd_check(
        "squared pixel loss",
        &[(&[1, 4, 4], randv(seed, "sq.x", 16, -1.0, 1.0))],
        |tape, t| {
            let gt = Tensor::from_vec(&[1, 4, 4], randv(seed, "sq.gt", 16, -1.0, 1.0))?;
            tape::sq_diff_mean(tape, &t[0], &gt)
        },
    )?);

    out.push(fd_check(
        "adversarial loss",
        &[(&[1, 4, 4], randv(seed, "ad.x", 16, 0.05, 0.95))],
        |tape, t| pipeline::adversarial_loss(tape, &t[0]),
    )?);

    out.push(fd_check(
        "discriminator loss",
        &[
            (&[1, 4, 4], randv(seed, "dl.r", 16, 0.05, 0.95)),
            (&[1, 4, 4], randv(seed, "dl.f", 16, 0.05, 0.95)),
        ],
        |tape, t| pipeline::discriminator_loss(tape, &t[0], &t[1]),
    )?);

    Ok(out)
}

/// Every layer check plus the whole-generator probe.
pub fn all_checks(seed: u64) -> Result<Vec<CheckOutcome>> {
    let mut out = layer_checks(seed)?;
    out.push(pipeline::generator_gradcheck(120, seed)?);
    Ok(out)
}
