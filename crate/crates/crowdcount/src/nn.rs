//! Sequential networks over the layer ops.
//!
//! A network is a flat layer list; parameters are visited in layer order with
//! stable names (`l03.w`, `l03.b`, ...) so optimizer state and serialized
//! bundles line up across runs. Freezing is expressed as a layer prefix:
//! watching/stepping from layer `k` leaves everything before `k` untouched
//! (bit-identical, not merely zero-updated).

use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::layers;
use crate::scalar::Scalar;
use crate::tape::Tape;
use crate::tensor::Tensor;

pub enum Layer<S: Scalar> {
    Conv { stride: usize, pad: usize, w: Tensor<S>, b: Tensor<S> },
    Tconv { w: Tensor<S>, b: Tensor<S> },
    MaxPool,
    Relu,
    PRelu { slope: Tensor<S> },
    Sigmoid,
    Flatten,
    Fc { w: Tensor<S>, b: Tensor<S> },
    Dropout { rate: f64 },
}

/// Per-forward context: training toggles dropout, which then needs a stream.
pub struct FwdCtx<'r> {
    pub train: bool,
    pub rng: Option<&'r mut ChaCha8Rng>,
}

impl<'r> FwdCtx<'r> {
    pub fn eval() -> Self {
        FwdCtx { train: false, rng: None }
    }
    pub fn train(rng: &'r mut ChaCha8Rng) -> Self {
        FwdCtx { train: true, rng: Some(rng) }
    }
}

impl<S: Scalar> Layer<S> {
    fn forward(&self, tape: &mut Tape<S>, x: &Tensor<S>, ctx: &mut FwdCtx) -> Result<Tensor<S>> {
        match self {
            Layer::Conv { stride, pad, w, b } => layers::conv2d(tape, x, w, b, *stride, *pad),
            Layer::Tconv { w, b } => layers::transposed_conv2d(tape, x, w, b),
            Layer::MaxPool => layers::maxpool2(tape, x),
            Layer::Relu => layers::relu(tape, x),
            Layer::PRelu { slope } => layers::prelu(tape, x, slope),
            Layer::Sigmoid => layers::sigmoid(tape, x),
            Layer::Flatten => layers::flatten(tape, x),
            Layer::Fc { w, b } => layers::fully_connected(tape, x, w, b),
            Layer::Dropout { rate } => {
                if !ctx.train || *rate == 0.0 {
                    return Ok(x.clone());
                }
                let rng = ctx
                    .rng
                    .as_deref_mut()
                    .ok_or_else(|| Error::invalid("dropout in train mode needs an rng"))?;
                layers::dropout(tape, x, *rate, true, rng)
            }
        }
    }

    fn params(&self) -> Vec<(&'static str, &Tensor<S>)> {
        match self {
            Layer::Conv { w, b, .. } | Layer::Tconv { w, b } | Layer::Fc { w, b } => {
                vec![("w", w), ("b", b)]
            }
            Layer::PRelu { slope } => vec![("slope", slope)],
            _ => vec![],
        }
    }

    fn params_mut(&mut self) -> Vec<(&'static str, &mut Tensor<S>)> {
        match self {
            Layer::Conv { w, b, .. } | Layer::Tconv { w, b } | Layer::Fc { w, b } => {
                vec![("w", w), ("b", b)]
            }
            Layer::PRelu { slope } => vec![("slope", slope)],
            _ => vec![],
        }
    }
}

pub struct Sequential<S: Scalar> {
    pub layers: Vec<Layer<S>>,
}

impl<S: Scalar> Sequential<S> {
    pub fn new(layers: Vec<Layer<S>>) -> Self {
        Sequential { layers }
    }

    pub fn forward(&self, tape: &mut Tape<S>, x: &Tensor<S>, ctx: &mut FwdCtx) -> Result<Tensor<S>> {
        let mut cur = x.clone();
        for layer in &self.layers {
            cur = layer.forward(tape, &cur, ctx)?;
        }
        Ok(cur)
    }

    /// Register parameters of layers[from..] as traced leaves.
    pub fn watch(&mut self, tape: &mut Tape<S>, from: usize) {
        for layer in self.layers.iter_mut().skip(from) {
            for (_, p) in layer.params_mut() {
                tape.watch(p);
            }
        }
    }

    /// Gradients for layers[from..] in the same order as `params_mut(from)`.
    pub fn grads(&self, tape: &Tape<S>, from: usize) -> Result<Vec<Vec<S>>> {
        let mut out = Vec::new();
        for layer in self.layers.iter().skip(from) {
            for (_, p) in layer.params() {
                out.push(tape.grad_of(p)?);
            }
        }
        Ok(out)
    }

    pub fn params_mut(&mut self, from: usize) -> Vec<&mut Tensor<S>> {
        self.layers
            .iter_mut()
            .skip(from)
            .flat_map(|l| l.params_mut().into_iter().map(|(_, p)| p))
            .collect()
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().flat_map(|l| l.params()).map(|(_, p)| p.numel()).sum()
    }

    /// Stable `prefix.lNN.name` listing of every parameter.
    pub fn named_params(&self, prefix: &str) -> Vec<(String, &Tensor<S>)> {
        let mut out = Vec::new();
        for (i, layer) in self.layers.iter().enumerate() {
            for (name, p) in layer.params() {
                out.push((format!("{prefix}.l{i:02}.{name}"), p));
            }
        }
        out
    }

    /// Fill parameters from `(name, tensor)` records produced by
    /// `named_params`; shapes must match exactly and no record may be missing.
    pub fn load_named(
        &mut self,
        prefix: &str,
        lookup: &mut impl FnMut(&str) -> Option<Tensor<S>>,
    ) -> Result<()> {
        for (i, layer) in self.layers.iter_mut().enumerate() {
            for (name, p) in layer.params_mut() {
                let key = format!("{prefix}.l{i:02}.{name}");
                let t = lookup(&key)
                    .ok_or_else(|| Error::invalid(format!("bundle is missing record '{key}'")))?;
                if t.shape() != p.shape() {
                    return Err(Error::shape(
                        "load_named",
                        format!("{key} {:?}", p.shape()),
                        format!("{:?}", t.shape()),
                    ));
                }
                *p = t;
            }
        }
        Ok(())
    }
}

// ---- initialized layer constructors ----------------------------------------

/// He-normal conv layer (std = sqrt(2 / fan_in)), zero bias.
pub fn conv<S: Scalar>(
    c_in: usize,
    c_out: usize,
    k: usize,
    stride: usize,
    pad: usize,
    rng: &mut ChaCha8Rng,
) -> Layer<S> {
    let std = (2.0 / (c_in * k * k) as f64).sqrt();
    Layer::Conv {
        stride,
        pad,
        w: Tensor::randn(&[c_out, c_in, k, k], std, rng),
        b: Tensor::zeros(&[c_out]),
    }
}

/// Same-padding stride-1 conv.
pub fn conv_same<S: Scalar>(c_in: usize, c_out: usize, k: usize, rng: &mut ChaCha8Rng) -> Layer<S> {
    conv(c_in, c_out, k, 1, (k - 1) / 2, rng)
}

pub fn tconv<S: Scalar>(c_in: usize, c_out: usize, rng: &mut ChaCha8Rng) -> Layer<S> {
    let std = (2.0 / (c_in * 16) as f64).sqrt();
    Layer::Tconv { w: Tensor::randn(&[c_in, c_out, 4, 4], std, rng), b: Tensor::zeros(&[c_out]) }
}

pub fn fc<S: Scalar>(n_in: usize, n_out: usize, rng: &mut ChaCha8Rng) -> Layer<S> {
    let std = (2.0 / n_in as f64).sqrt();
    Layer::Fc { w: Tensor::randn(&[n_out, n_in], std, rng), b: Tensor::zeros(&[n_out]) }
}

/// PReLU with the customary 0.25 initial slope.
pub fn prelu_layer<S: Scalar>(channels: usize) -> Layer<S> {
    Layer::PRelu { slope: Tensor::filled(&[channels], S::from_f64(0.25)) }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;
    use crate::tape;

    fn tiny_net(rng: &mut ChaCha8Rng) -> Sequential<f64> {
        Sequential::new(vec![
            conv_same(1, 2, 3, rng),
            Layer::Relu,
            Layer::MaxPool,
            Layer::Flatten,
            fc(2 * 2 * 2, 3, rng),
        ])
    }

    #[test]
    fn forward_shapes_compose() {
        let mut rng = stream(1, "init");
        let net = tiny_net(&mut rng);
        let mut tape = Tape::new();
        let x = Tensor::<f64>::zeros(&[1, 4, 4]);
        let y = net.forward(&mut tape, &x, &mut FwdCtx::eval()).unwrap();
        assert_eq!(y.shape(), &[3]);
    }

    #[test]
    fn watch_from_prefix_skips_frozen_parameters() {
        let mut rng = stream(2, "init");
        let mut net = tiny_net(&mut rng);
        let mut tape = Tape::new();
        net.watch(&mut tape, 4); // only the fc layer
        let x = Tensor::<f64>::filled(&[1, 4, 4], 0.5);
        let y = net.forward(&mut tape, &x, &mut FwdCtx::eval()).unwrap();
        let loss = tape::sum(&mut tape, &y).unwrap();
        tape.backward(&loss).unwrap();
        // conv params untraced: grad_of must error; fc params have gradients
        let conv_w = net.layers[0].params()[0].1;
        assert!(tape.grad_of(conv_w).is_err());
        let grads = net.grads(&tape, 4).unwrap();
        assert_eq!(grads.len(), 2);
        assert!(grads[0].iter().any(|g| *g != 0.0));
    }

    #[test]
    fn named_params_round_trip() {
        let mut rng = stream(3, "init");
        let net = tiny_net(&mut rng);
        let named = net.named_params("net");
        let names: Vec<&str> = named.iter().map(|(n, _)| n.as_str()).collect();
        assert_eq!(names, ["net.l00.w", "net.l00.b", "net.l04.w", "net.l04.b"]);

        let stash: Vec<(String, Tensor<f64>)> =
            named.into_iter().map(|(n, t)| (n, t.clone())).collect();
        let mut other = tiny_net(&mut stream(4, "init"));
        other
            .load_named("net", &mut |key| {
                stash.iter().find(|(n, _)| n == key).map(|(_, t)| t.clone())
            })
            .unwrap();
        for ((_, a), (n, b)) in other.named_params("net").iter().zip(&stash) {
            assert_eq!(a.data(), b.data(), "{n}");
        }
    }

    #[test]
    fn load_named_reports_missing_and_mismatched_records() {
        let mut rng = stream(5, "init");
        let mut net = tiny_net(&mut rng);
        let err = net.load_named("net", &mut |_| None).unwrap_err();
        assert!(err.to_string().contains("net.l00.w"), "{err}");

        let err = net
            .load_named("net", &mut |_| Some(Tensor::zeros(&[1])))
            .unwrap_err();
        assert!(err.to_string().contains("shape mismatch"), "{err}");
    }
}
