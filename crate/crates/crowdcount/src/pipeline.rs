//! The full counting pipeline: multi-column feature extractor, fusion
//! network, patch discriminator, the loss family, end-to-end training, and
//! inference.
//!
//! The generator maps an image to a density map. Its feature extractor runs
//! three parallel columns with kernel sizes 9/7/5 (two 2x2 max-pools each,
//! so features land at quarter resolution), concatenated along channels and
//! joined by the five-plane global/local context maps. The fusion network
//! CR(64,9)-CR(32,7)-TR(32)-CR(16,5)-TR(16)-C(1,1) upsamples back to input
//! resolution. The baseline configuration skips fusion and reduces features
//! with a single 1x1 conv at quarter resolution.
//!
//! Training minimizes L_T = L_E + lambda_a * L_A, where L_E is the mean
//! per-pixel absolute difference and L_A = -log(mean D(pred)) is the
//! adversarial term; the discriminator trains on the standard two-term
//! binary objective with generator samples detached.

use rand::seq::SliceRandom;

use crate::context::{
    build_global_context_infer, build_global_context_train, build_local_context, Classifier,
    ContextMap, NUM_CLASSES,
};
use crate::density::DensityMap;
use crate::error::{Error, Result};
use crate::image;
use crate::nn::{self, FwdCtx, Layer, Sequential};
use crate::optim::SgdMomentum;
use crate::rng;
use crate::scalar::Scalar;
use crate::synth::DmePatch;
use crate::tape::{self, Tape};
use crate::tensor::Tensor;

/// Per-column conv kernel sizes of the feature extractor.
pub const COLUMN_KERNELS: [usize; 3] = [9, 7, 5];
/// Per-column channel widths.
pub const COLUMN_WIDTHS: [usize; 3] = [16, 12, 8];
/// Concatenated feature channels (sum of the column widths).
pub const DME_CHANNELS: usize = 36;
/// Default adversarial-loss weight.
pub const DEFAULT_LAMBDA_A: f32 = 1e-3;

/// Which pipeline pieces a run uses. The four ablation rows are
/// feature-only, +global, +global+local, and +global+local+adversarial.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AblationConfig {
    pub use_gce: bool,
    pub use_lce: bool,
    pub use_adversarial: bool,
}

impl AblationConfig {
    /// The four evaluated rows, in ablation order.
    pub const ALL: [AblationConfig; 4] = [
        AblationConfig { use_gce: false, use_lce: false, use_adversarial: false },
        AblationConfig { use_gce: true, use_lce: false, use_adversarial: false },
        AblationConfig { use_gce: true, use_lce: true, use_adversarial: false },
        AblationConfig { use_gce: true, use_lce: true, use_adversarial: true },
    ];

    pub fn validate(&self) -> Result<()> {
        if self.use_lce && !self.use_gce {
            return Err(Error::invalid(
                "ablation: local context without global context is not one of the evaluated rows",
            ));
        }
        if self.use_adversarial && !(self.use_gce && self.use_lce) {
            return Err(Error::invalid(
                "ablation: the adversarial row builds on both context estimators",
            ));
        }
        Ok(())
    }

    /// 1-based row number (1 = feature-only baseline, 4 = full pipeline).
    pub fn index(&self) -> usize {
        1 + Self::ALL.iter().position(|c| c == self).expect("validated config")
    }

    pub fn from_index(i: usize) -> Result<AblationConfig> {
        Self::ALL
            .get(i.wrapping_sub(1))
            .copied()
            .ok_or_else(|| Error::invalid(format!("ablation config {i} (valid: 1..=4)")))
    }

    pub fn context_channels(&self) -> usize {
        NUM_CLASSES * (self.use_gce as usize + self.use_lce as usize)
    }

    /// The baseline has no fusion network; it reduces features with a 1x1
    /// conv and predicts at quarter resolution.
    pub fn quarter_output(&self) -> bool {
        !self.use_gce && !self.use_lce
    }
}

/// Generator: three-column feature extractor plus fusion (or 1x1) head.
pub struct Generator<S: Scalar = f32> {
    pub columns: Vec<Sequential<S>>,
    pub head: Sequential<S>,
    pub config: AblationConfig,
}

fn build_column<S: Scalar>(k: usize, width: usize, rng: &mut rand_chacha::ChaCha8Rng) -> Sequential<S> {
    Sequential::new(vec![
        nn::conv_same(1, width, k, rng),
        Layer::Relu,
        Layer::MaxPool,
        nn::conv_same(width, width, k, rng),
        Layer::Relu,
        Layer::MaxPool,
        nn::conv_same(width, width, k, rng),
        Layer::Relu,
    ])
}

impl<S: Scalar> Generator<S> {
    pub fn new(config: AblationConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut r = rng::stream(seed, "init.generator");
        let columns = COLUMN_KERNELS
            .iter()
            .zip(COLUMN_WIDTHS)
            .map(|(k, w)| build_column(*k, w, &mut r))
            .collect();
        let head = if config.quarter_output() {
            Sequential::new(vec![nn::conv_same(DME_CHANNELS, 1, 1, &mut r)])
        } else {
            let c_in = DME_CHANNELS + config.context_channels();
            Sequential::new(vec![
                nn::conv_same(c_in, 64, 9, &mut r),
                Layer::Relu,
                nn::conv_same(64, 32, 7, &mut r),
                Layer::Relu,
                nn::tconv(32, 32, &mut r),
                Layer::Relu,
                nn::conv_same(32, 16, 5, &mut r),
                Layer::Relu,
                nn::tconv(16, 16, &mut r),
                Layer::Relu,
                nn::conv_same(16, 1, 1, &mut r),
            ])
        };
        Ok(Generator { columns, head, config })
    }

    /// Multi-column features at quarter resolution, concatenated channelwise.
    pub fn dme_forward(&self, tape: &mut Tape<S>, image: &Tensor<S>) -> Result<Tensor<S>> {
        let (h, w) = image::image_dims(image)?;
        if h % 4 != 0 || w % 4 != 0 {
            return Err(Error::shape("dme_forward", "dims divisible by 4", format!("{w}x{h}")));
        }
        let mut ctx = FwdCtx::eval();
        let outs = self
            .columns
            .iter()
            .map(|c| c.forward(tape, image, &mut ctx))
            .collect::<Result<Vec<_>>>()?;
        let refs: Vec<&Tensor<S>> = outs.iter().collect();
        layers_concat(tape, &refs)
    }

    /// Full forward pass. Context tensors must be (5, H/4, W/4) and are
    /// required exactly when the configuration enables them.
    pub fn forward(
        &self,
        tape: &mut Tape<S>,
        image: &Tensor<S>,
        gc: Option<&Tensor<S>>,
        lc: Option<&Tensor<S>>,
    ) -> Result<Tensor<S>> {
        let (h, w) = image::image_dims(image)?;
        let feats = self.dme_forward(tape, image)?;
        let mut parts: Vec<&Tensor<S>> = vec![&feats];
        for (enabled, ctx, name) in
            [(self.config.use_gce, gc, "global"), (self.config.use_lce, lc, "local")]
        {
            match (enabled, ctx) {
                (true, Some(t)) => {
                    if t.shape() != [NUM_CLASSES, h / 4, w / 4] {
                        return Err(Error::shape(
                            "generator_forward",
                            format!("{name} context (5, {}, {})", h / 4, w / 4),
                            format!("{:?}", t.shape()),
                        ));
                    }
                    parts.push(t);
                }
                (false, None) => {}
                (true, None) => {
                    return Err(Error::Contract(format!(
                        "generator_forward: configuration uses {name} context but none was supplied"
                    )))
                }
                (false, Some(_)) => {
                    return Err(Error::Contract(format!(
                        "generator_forward: {name} context supplied but disabled by the configuration"
                    )))
                }
            }
        }
        let x = if parts.len() == 1 { feats } else { layers_concat(tape, &parts)? };
        self.head.forward(tape, &x, &mut FwdCtx::eval())
    }

    pub fn watch(&mut self, tape: &mut Tape<S>) {
        for c in &mut self.columns {
            c.watch(tape, 0);
        }
        self.head.watch(tape, 0);
    }

    pub fn grads(&self, tape: &Tape<S>) -> Result<Vec<Vec<S>>> {
        let mut out = Vec::new();
        for c in &self.columns {
            out.extend(c.grads(tape, 0)?);
        }
        out.extend(self.head.grads(tape, 0)?);
        Ok(out)
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor<S>> {
        let mut out = Vec::new();
        for c in &mut self.columns {
            out.extend(c.params_mut(0));
        }
        out.extend(self.head.params_mut(0));
        out
    }

    pub fn param_count(&self) -> usize {
        self.columns.iter().map(|c| c.param_count()).sum::<usize>() + self.head.param_count()
    }

    pub fn named_params(&self) -> Vec<(String, &Tensor<S>)> {
        let mut out = Vec::new();
        for (i, c) in self.columns.iter().enumerate() {
            out.extend(c.named_params(&format!("gen.col{i}")));
        }
        out.extend(self.head.named_params("gen.head"));
        out
    }

    pub fn load_named(&mut self, lookup: &mut impl FnMut(&str) -> Option<Tensor<S>>) -> Result<()> {
        for (i, c) in self.columns.iter_mut().enumerate() {
            c.load_named(&format!("gen.col{i}"), lookup)?;
        }
        self.head.load_named("gen.head", lookup)
    }
}

// small indirection so Generator methods read cleanly above
fn layers_concat<S: Scalar>(tape: &mut Tape<S>, parts: &[&Tensor<S>]) -> Result<Tensor<S>> {
    crate::layers::concat_channels(tape, parts)
}

/// Patch discriminator CP(64)-CP(128)-M-CP(256)-M-CP(256)-CP(256)-M-C(1)-S:
/// 3x3 conv + PReLU blocks with three max-pools, a 1x1 conv, and a sigmoid.
/// Fully convolutional, so any input size >= 8 yields a score map in (0,1).
pub struct Discriminator<S: Scalar = f32> {
    pub net: Sequential<S>,
}

pub fn build_discriminator<S: Scalar>(seed: u64) -> Discriminator<S> {
    let mut r = rng::stream(seed, "init.discriminator");
    let mut layers = Vec::new();
    let mut c_in = 1usize;
    for (c_out, pool_after) in [(64, false), (128, true), (256, true), (256, false), (256, true)] {
        layers.push(nn::conv_same(c_in, c_out, 3, &mut r));
        layers.push(nn::prelu_layer(c_out));
        if pool_after {
            layers.push(Layer::MaxPool);
        }
        c_in = c_out;
    }
    layers.push(nn::conv_same(c_in, 1, 1, &mut r));
    layers.push(Layer::Sigmoid);
    Discriminator { net: Sequential::new(layers) }
}

impl<S: Scalar> Discriminator<S> {
    pub fn forward(&self, tape: &mut Tape<S>, map: &Tensor<S>) -> Result<Tensor<S>> {
        let (h, w) = image::image_dims(map)?;
        if h < 8 || w < 8 {
            return Err(Error::shape("discriminator", "at least 8x8", format!("{w}x{h}")));
        }
        self.net.forward(tape, map, &mut FwdCtx::eval())
    }
}

// ---- losses -----------------------------------------------------------------

/// L_E: mean over pixels of the per-pixel absolute difference.
pub fn euclidean_loss<S: Scalar>(
    tape: &mut Tape<S>,
    pred: &Tensor<S>,
    gt: &Tensor<S>,
) -> Result<Tensor<S>> {
    tape::abs_diff_mean(tape, pred, gt)
}

/// Optional squared pixel loss: mean over pixels of the squared difference.
/// Unlike the absolute default, its gradient scales with the residual, which
/// trains the deep fusion rows much faster on sparse full-resolution maps.
pub fn squared_pixel_loss<S: Scalar>(
    tape: &mut Tape<S>,
    pred: &Tensor<S>,
    gt: &Tensor<S>,
) -> Result<Tensor<S>> {
    tape::sq_diff_mean(tape, pred, gt)
}

/// L_A = -log(mean of the discriminator's score map).
pub fn adversarial_loss<S: Scalar>(tape: &mut Tape<S>, d_out: &Tensor<S>) -> Result<Tensor<S>> {
    let m = tape::mean(tape, d_out)?;
    let lg = tape::log(tape, &m)?;
    tape::scale(tape, &lg, -S::ONE)
}

/// L_T = L_E + lambda_a * L_A. With lambda_a = 0 this is exactly L_E.
pub fn total_loss<S: Scalar>(
    tape: &mut Tape<S>,
    l_e: &Tensor<S>,
    l_a: &Tensor<S>,
    lambda_a: S,
) -> Result<Tensor<S>> {
    if lambda_a < S::ZERO {
        return Err(Error::invalid("total_loss: lambda_a must be non-negative"));
    }
    let weighted = tape::scale(tape, l_a, lambda_a)?;
    tape::add(tape, l_e, &weighted)
}

/// Two-term binary discriminator objective:
/// -log D(real) - log(1 - D(fake)); both terms use map means.
pub fn discriminator_loss<S: Scalar>(
    tape: &mut Tape<S>,
    d_real: &Tensor<S>,
    d_fake: &Tensor<S>,
) -> Result<Tensor<S>> {
    let m_real = tape::mean(tape, d_real)?;
    let log_real = tape::log(tape, &m_real)?;
    let real_term = tape::scale(tape, &log_real, -S::ONE)?;
    let m_fake = tape::mean(tape, d_fake)?;
    let neg_fake = tape::scale(tape, &m_fake, -S::ONE)?;
    let one_minus = tape::add_scalar(tape, &neg_fake, S::ONE)?;
    let log_one_minus = tape::log(tape, &one_minus)?;
    let fake_term = tape::scale(tape, &log_one_minus, -S::ONE)?;
    tape::add(tape, &real_term, &fake_term)
}

/// One discriminator update on a (real, fake) pair. `fake` must be detached
/// (a plain tensor, not a node of some generator tape). Returns the loss.
pub fn discriminator_step<S: Scalar>(
    disc: &mut Discriminator<S>,
    optim: &mut SgdMomentum<S>,
    real: &Tensor<S>,
    fake: &Tensor<S>,
) -> Result<f64> {
    if real.shape() != fake.shape() {
        return Err(Error::shape(
            "discriminator_step",
            format!("{:?}", real.shape()),
            format!("{:?}", fake.shape()),
        ));
    }
    let mut tape = Tape::new();
    disc.net.watch(&mut tape, 0);
    let d_real = disc.forward(&mut tape, real)?;
    let d_fake = disc.forward(&mut tape, fake)?;
    let loss = discriminator_loss(&mut tape, &d_real, &d_fake)?;
    tape.backward(&loss)?;
    let grads = disc.net.grads(&tape, 0)?;
    let mut params = disc.net.params_mut(0);
    optim.step(&mut params, &grads)?;
    Ok(loss.item()?.to_f64())
}

// ---- end-to-end training -----------------------------------------------------

/// Knobs for the end-to-end stage.
#[derive(Debug, Clone)]
pub struct TrainOptions {
    pub epochs: usize,
    pub lr: f32,
    pub momentum: f32,
    pub lambda_a: f32,
    /// Local-context sliding window (pixels) and stride.
    pub lce_window: usize,
    pub lce_stride: usize,
    /// Train the pixel term with [`squared_pixel_loss`] instead of the
    /// absolute default.
    pub squared_loss: bool,
    pub seed: u64,
}

impl Default for TrainOptions {
    fn default() -> Self {
        TrainOptions {
            epochs: 2,
            lr: 1e-4,
            momentum: 0.9,
            lambda_a: DEFAULT_LAMBDA_A,
            lce_window: 12,
            lce_stride: 6,
            squared_loss: false,
            seed: 7,
        }
    }
}

/// Per-epoch loss traces from end-to-end training.
#[derive(Debug, Clone)]
pub struct TrainStats {
    /// Mean pixel loss per epoch (absolute by default, squared when enabled).
    pub epoch_euclidean: Vec<f64>,
    /// Mean L_T per epoch (equals L_E when no adversarial term is active).
    pub epoch_total: Vec<f64>,
    pub discriminator_steps: usize,
}

fn require_frozen(name: &'static str, cls: &Classifier) -> Result<()> {
    if cls.frozen_prefix != cls.net.num_layers() {
        return Err(Error::Contract(format!(
            "end-to-end training requires a fully frozen {name} (frozen_prefix {} of {} layers)",
            cls.frozen_prefix,
            cls.net.num_layers()
        )));
    }
    Ok(())
}

struct PreparedSample {
    image: Tensor<f32>,
    gt: Tensor<f32>,
    gc: Option<Tensor<f32>>,
    lc: Option<Tensor<f32>>,
}

fn prepare_samples(
    patches: &[DmePatch],
    gce: Option<&Classifier>,
    lce: Option<&Classifier>,
    config: AblationConfig,
    opts: &TrainOptions,
) -> Result<Vec<PreparedSample>> {
    let mut out = Vec::with_capacity(patches.len());
    for p in patches {
        let gc = match (config.use_gce, gce) {
            (true, Some(g)) => Some(build_global_context_train(&p.image, g)?.to_tensor()),
            (false, _) => None,
            (true, None) => {
                return Err(Error::Contract(
                    "configuration uses global context but no trained GCE was supplied".into(),
                ))
            }
        };
        let lc = match (config.use_lce, lce) {
            (true, Some(l)) => {
                Some(build_local_context(&p.image, l, opts.lce_window, opts.lce_stride)?.to_tensor())
            }
            (false, _) => None,
            (true, None) => {
                return Err(Error::Contract(
                    "configuration uses local context but no trained LCE was supplied".into(),
                ))
            }
        };
        let gt = if config.quarter_output() {
            p.density.downsample_sum(4)?.to_tensor()
        } else {
            p.density.to_tensor()
        };
        out.push(PreparedSample { image: p.image.clone(), gt, gc, lc });
    }
    Ok(out)
}

/// Train the generator (and, on the adversarial row, the discriminator) on a
/// patch dataset. Context estimators are used forward-only and must be fully
/// frozen; their parameters are bit-identical afterwards. Alternates one
/// generator step and one discriminator step per sample when adversarial.
pub fn train_end_to_end(
    patches: &[DmePatch],
    gce: Option<&Classifier>,
    lce: Option<&Classifier>,
    generator: &mut Generator<f32>,
    mut discriminator: Option<&mut Discriminator<f32>>,
    opts: &TrainOptions,
) -> Result<TrainStats> {
    if patches.is_empty() {
        return Err(Error::invalid("train_end_to_end: empty dataset"));
    }
    let config = generator.config;
    config.validate()?;
    if config.use_adversarial != discriminator.is_some() {
        return Err(Error::Contract(if config.use_adversarial {
            "adversarial configuration needs a discriminator".into()
        } else {
            "a discriminator was supplied but the configuration has no adversarial term".into()
        }));
    }
    if let Some(g) = gce {
        require_frozen("GCE", g)?;
    }
    if let Some(l) = lce {
        require_frozen("LCE", l)?;
    }

    // frozen estimators make context maps constants: build them once
    let samples = prepare_samples(patches, gce, lce, config, opts)?;

    let mut g_optim = SgdMomentum::new(opts.lr, opts.momentum);
    let mut d_optim = SgdMomentum::new(opts.lr, opts.momentum);
    let mut shuffle_rng = rng::stream(opts.seed, "e2e.shuffle");
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut stats = TrainStats {
        epoch_euclidean: Vec::with_capacity(opts.epochs),
        epoch_total: Vec::with_capacity(opts.epochs),
        discriminator_steps: 0,
    };

    for _ in 0..opts.epochs {
        order.shuffle(&mut shuffle_rng);
        let (mut sum_e, mut sum_t) = (0.0f64, 0.0f64);
        for &i in &order {
            let s = &samples[i];
            // generator step: minimize L_T
            let mut tape = Tape::new();
            generator.watch(&mut tape);
            let pred = generator.forward(&mut tape, &s.image, s.gc.as_ref(), s.lc.as_ref())?;
            let l_e = if opts.squared_loss {
                squared_pixel_loss(&mut tape, &pred, &s.gt)?
            } else {
                euclidean_loss(&mut tape, &pred, &s.gt)?
            };
            let l_t = if let Some(disc) = discriminator.as_deref() {
                let d_out = disc.forward(&mut tape, &pred)?;
                let l_a = adversarial_loss(&mut tape, &d_out)?;
                total_loss(&mut tape, &l_e, &l_a, opts.lambda_a)?
            } else {
                l_e.clone()
            };
            sum_e += l_e.item()? as f64;
            sum_t += l_t.item()? as f64;
            tape.backward(&l_t)?;
            let grads = generator.grads(&tape)?;
            let mut params = generator.params_mut();
            g_optim.step(&mut params, &grads)?;

            // discriminator step on (real gt, detached prediction)
            if let Some(disc) = discriminator.as_deref_mut() {
                let fake = Tensor::from_vec(pred.shape(), pred.data().to_vec())?;
                discriminator_step(disc, &mut d_optim, &s.gt, &fake)?;
                stats.discriminator_steps += 1;
            }
        }
        stats.epoch_euclidean.push(sum_e / samples.len() as f64);
        stats.epoch_total.push(sum_t / samples.len() as f64);
    }
    Ok(stats)
}

/// Mean L_E of the generator over a patch dataset, with no updates. Context
/// maps are built exactly as in training.
pub fn mean_euclidean_loss(
    patches: &[DmePatch],
    gce: Option<&Classifier>,
    lce: Option<&Classifier>,
    generator: &Generator<f32>,
    opts: &TrainOptions,
) -> Result<f64> {
    if patches.is_empty() {
        return Err(Error::invalid("mean_euclidean_loss: empty dataset"));
    }
    let samples = prepare_samples(patches, gce, lce, generator.config, opts)?;
    let mut sum = 0.0f64;
    for s in &samples {
        let mut tape = Tape::new();
        let pred = generator.forward(&mut tape, &s.image, s.gc.as_ref(), s.lc.as_ref())?;
        sum += euclidean_loss(&mut tape, &pred, &s.gt)?.item()? as f64;
    }
    Ok(sum / samples.len() as f64)
}

// ---- inference ----------------------------------------------------------------

/// Run the trained pipeline on one image: assemble inference-variant context
/// maps, run the generator, clamp negatives to zero, and sum for the count.
/// The returned map is at the generator's native resolution (quarter size on
/// the baseline row, input size otherwise).
pub fn infer(
    image: &Tensor<f32>,
    gce: Option<&Classifier>,
    lce: Option<&Classifier>,
    generator: &Generator<f32>,
    lce_window: usize,
    lce_stride: usize,
) -> Result<(DensityMap, f64)> {
    let config = generator.config;
    let gc = match (config.use_gce, gce) {
        (true, Some(g)) => Some(build_global_context_infer(image, g)?.to_tensor()),
        (false, _) => None,
        (true, None) => {
            return Err(Error::Contract("inference needs the GCE this configuration uses".into()))
        }
    };
    let lc = match (config.use_lce, lce) {
        (true, Some(l)) => Some(build_local_context(image, l, lce_window, lce_stride)?.to_tensor()),
        (false, _) => None,
        (true, None) => {
            return Err(Error::Contract("inference needs the LCE this configuration uses".into()))
        }
    };
    let mut tape = Tape::new();
    let pred = generator.forward(&mut tape, image, gc.as_ref(), lc.as_ref())?;
    let shape = pred.shape().to_vec();
    let data: Vec<f32> = pred.data().iter().map(|v| v.max(0.0)).collect();
    let map = DensityMap::new(shape[2], shape[1], data)?;
    let count = map.count();
    Ok((map, count))
}

/// Convert a context map to the tensor layout the generator consumes.
pub fn context_tensor(map: &ContextMap) -> Tensor<f32> {
    map.to_tensor()
}

// ---- whole-pipeline gradient check -------------------------------------------

/// Check the analytic gradient of L_E through the full fusion generator
/// against central finite differences, in 64-bit, on a 16x16 input with
/// random context planes. `probes` parameters are sampled (the full
/// parameter set would need two forward passes per parameter).
pub fn generator_gradcheck(probes: usize, seed: u64) -> Result<crate::gradcheck::CheckOutcome> {
    use crate::gradcheck;

    let config = AblationConfig { use_gce: true, use_lce: true, use_adversarial: false };
    let reference = Generator::<f64>::new(config, seed)?;
    let mut r = rng::stream(seed, "gradcheck.inputs");
    let img = Tensor::<f64>::randn(&[1, 16, 16], 0.5, &mut r);
    let unit = |r: &mut rand_chacha::ChaCha8Rng| {
        use rand::Rng;
        let d: Vec<f64> = (0..NUM_CLASSES * 16).map(|_| r.gen_range(0.0..1.0)).collect();
        Tensor::from_vec(&[NUM_CLASSES, 4, 4], d).expect("static dims")
    };
    let gc = unit(&mut r);
    let lc = unit(&mut r);
    let gt = Tensor::<f64>::randn(&[1, 16, 16], 0.3, &mut r);

    // analytic gradients at the reference parameters
    let mut work = Generator::<f64>::new(config, seed)?;
    let mut tape = Tape::new();
    work.watch(&mut tape);
    let pred = work.forward(&mut tape, &img, Some(&gc), Some(&lc))?;
    let loss = euclidean_loss(&mut tape, &pred, &gt)?;
    tape.backward(&loss)?;
    let analytic: Vec<f64> = work.grads(&tape)?.into_iter().flatten().collect();
    let flat: Vec<f64> = reference
        .named_params()
        .iter()
        .flat_map(|(_, t)| t.data().to_vec())
        .collect();

    let mut idx: Vec<usize> = (0..flat.len()).collect();
    idx.shuffle(&mut rng::stream(seed, "gradcheck.probes"));
    idx.truncate(probes.min(flat.len()));

    let f = move |p: &[f64]| -> f64 {
        let mut at = 0usize;
        for param in work.params_mut() {
            let n = param.numel();
            param.data_mut().copy_from_slice(&p[at..at + n]);
            at += n;
        }
        let mut tape = Tape::new();
        let pred = work.forward(&mut tape, &img, Some(&gc), Some(&lc)).expect("same shapes");
        euclidean_loss(&mut tape, &pred, &gt)
            .and_then(|l| l.item())
            .expect("scalar loss")
    };

    Ok(gradcheck::compare_grads(
        "generator/L_E",
        &flat,
        &analytic,
        f,
        gradcheck::FD_STEP,
        gradcheck::TOL_COMPOSITE,
        Some(&idx),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::context::{build_gce, build_lce};
    use crate::density::{render_density, DotScene};
    use crate::synth::{self, DmeAug};
    use rand::Rng;

    fn rand_image(seed: u64, h: usize, w: usize) -> Tensor<f32> {
        let mut r = rng::stream(seed, "pipe.img");
        let data: Vec<f32> = (0..h * w).map(|_| r.gen_range(0.0..1.0f32)).collect();
        Tensor::from_vec(&[1, h, w], data).unwrap()
    }

    fn rand_context(seed: u64, h: usize, w: usize) -> Tensor<f32> {
        let mut r = rng::stream(seed, "pipe.ctx");
        let data: Vec<f32> = (0..NUM_CLASSES * h * w).map(|_| r.gen_range(0.0..1.0f32)).collect();
        Tensor::from_vec(&[NUM_CLASSES, h, w], data).unwrap()
    }

    #[test]
    fn ablation_rows_validate_and_index() {
        for (i, c) in AblationConfig::ALL.iter().enumerate() {
            c.validate().unwrap();
            assert_eq!(c.index(), i + 1);
            assert_eq!(AblationConfig::from_index(i + 1).unwrap(), *c);
        }
        assert!(AblationConfig { use_gce: false, use_lce: true, use_adversarial: false }
            .validate()
            .is_err());
        assert!(AblationConfig { use_gce: true, use_lce: false, use_adversarial: true }
            .validate()
            .is_err());
        assert!(AblationConfig::from_index(0).is_err());
        assert!(AblationConfig::from_index(5).is_err());
    }

    #[test]
    fn dme_features_are_quarter_resolution_with_36_channels() {
        let gen = Generator::<f32>::new(AblationConfig::ALL[0], 3).unwrap();
        let mut tape = Tape::new();
        let feats = gen.dme_forward(&mut tape, &rand_image(3, 64, 64)).unwrap();
        assert_eq!(feats.shape(), [DME_CHANNELS, 16, 16]);
        assert!(gen.dme_forward(&mut tape, &rand_image(3, 30, 64)).is_err());
    }

    #[test]
    fn zeroed_dme_weights_give_zero_features() {
        let mut gen = Generator::<f32>::new(AblationConfig::ALL[0], 5).unwrap();
        for p in gen.params_mut() {
            *p = Tensor::zeros(p.shape());
        }
        let mut tape = Tape::new();
        let feats = gen.dme_forward(&mut tape, &rand_image(5, 32, 32)).unwrap();
        assert!(feats.data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn generator_resolution_contract_holds_for_fusion_rows() {
        for side in [32usize, 48, 64, 128] {
            let gen = Generator::<f32>::new(AblationConfig::ALL[2], 7).unwrap();
            let img = rand_image(7, side, side);
            let gc = rand_context(7, side / 4, side / 4);
            let lc = rand_context(8, side / 4, side / 4);
            let mut tape = Tape::new();
            let out = gen.forward(&mut tape, &img, Some(&gc), Some(&lc)).unwrap();
            assert_eq!(out.shape(), [1, side, side], "side {side}");
        }
        // non-square too
        let gen = Generator::<f32>::new(AblationConfig::ALL[1], 7).unwrap();
        let out = gen
            .forward(&mut Tape::new(), &rand_image(9, 32, 48), Some(&rand_context(9, 8, 12)), None)
            .unwrap();
        assert_eq!(out.shape(), [1, 32, 48]);
    }

    #[test]
    fn baseline_row_outputs_quarter_resolution() {
        let gen = Generator::<f32>::new(AblationConfig::ALL[0], 11).unwrap();
        let out = gen.forward(&mut Tape::new(), &rand_image(11, 64, 64), None, None).unwrap();
        assert_eq!(out.shape(), [1, 16, 16]);
    }

    #[test]
    fn context_channel_bookkeeping_fails_loudly() {
        let gen = Generator::<f32>::new(AblationConfig::ALL[2], 13).unwrap();
        let img = rand_image(13, 32, 32);
        let gc = rand_context(13, 8, 8);
        let lc = rand_context(14, 8, 8);
        // the matching pair is fine
        assert!(gen.forward(&mut Tape::new(), &img, Some(&gc), Some(&lc)).is_ok());
        // missing local context
        assert!(matches!(
            gen.forward(&mut Tape::new(), &img, Some(&gc), None),
            Err(Error::Contract(_))
        ));
        // wrong context dims
        let bad = rand_context(15, 4, 4);
        assert!(gen.forward(&mut Tape::new(), &img, Some(&gc), Some(&bad)).is_err());
        // context supplied though disabled
        let base = Generator::<f32>::new(AblationConfig::ALL[0], 13).unwrap();
        assert!(matches!(
            base.forward(&mut Tape::new(), &img, Some(&gc), None),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn generator_forward_is_deterministic() {
        let a = Generator::<f32>::new(AblationConfig::ALL[1], 17).unwrap();
        let b = Generator::<f32>::new(AblationConfig::ALL[1], 17).unwrap();
        let img = rand_image(17, 32, 32);
        let gc = rand_context(17, 8, 8);
        let oa = a.forward(&mut Tape::new(), &img, Some(&gc), None).unwrap();
        let ob = b.forward(&mut Tape::new(), &img, Some(&gc), None).unwrap();
        assert!(oa.data().iter().zip(ob.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    #[test]
    fn euclidean_loss_matches_brute_force_and_offsets() {
        let mut tape = Tape::new();
        let a = rand_image(19, 12, 12);
        let b = rand_image(20, 12, 12);
        let loss = euclidean_loss(&mut tape, &a, &b).unwrap().item().unwrap();
        let brute: f64 = a
            .data()
            .iter()
            .zip(b.data())
            .map(|(x, y)| (x - y).abs() as f64)
            .sum::<f64>()
            / 144.0;
        assert!((loss as f64 - brute).abs() < 1e-6);

        let same = euclidean_loss(&mut tape, &a, &a).unwrap().item().unwrap();
        assert_eq!(same, 0.0);

        let shifted =
            Tensor::from_vec(&[1, 12, 12], a.data().iter().map(|v| v + 0.25).collect()).unwrap();
        let off = euclidean_loss(&mut tape, &shifted, &a).unwrap().item().unwrap();
        assert!((off - 0.25).abs() < 1e-6);
    }

    #[test]
    fn adversarial_loss_limiting_cases() {
        let mut tape = Tape::new();
        let half = Tensor::filled(&[1, 4, 4], 0.5f32);
        let l = adversarial_loss(&mut tape, &half).unwrap().item().unwrap();
        assert!((l - std::f32::consts::LN_2).abs() < 1e-6);

        let e_inv = Tensor::filled(&[1, 4, 4], (-1.0f32).exp());
        let l = adversarial_loss(&mut tape, &e_inv).unwrap().item().unwrap();
        assert!((l - 1.0).abs() < 1e-6);

        let near_one = Tensor::filled(&[1, 4, 4], 0.999f32);
        let l = adversarial_loss(&mut tape, &near_one).unwrap().item().unwrap();
        assert!((l - 1.0005e-3).abs() < 1e-5, "{l}");
        assert!(l > 0.0, "strictly positive below 1");
    }

    #[test]
    fn total_loss_composes_exactly() {
        let mut tape = Tape::new();
        let le = Tensor::scalar(2.0f32);
        let la = Tensor::scalar(4.0f32);
        let t = total_loss(&mut tape, &le, &la, 0.5).unwrap().item().unwrap();
        assert_eq!(t, 4.0);

        let t0 = total_loss(&mut tape, &le, &la, 0.0).unwrap().item().unwrap();
        assert_eq!(t0, 2.0, "lambda 0 must recover L_E exactly");

        let le = Tensor::scalar(0.1f32);
        let la = Tensor::scalar(0.7f32);
        let t = total_loss(&mut tape, &le, &la, 1e-3).unwrap().item().unwrap();
        assert!((t - 0.1007).abs() < 1e-7);

        assert!(total_loss(&mut tape, &le, &la, -0.1).is_err());

        // monotone nondecreasing in lambda for fixed L_A >= 0
        let mut prev = f32::MIN;
        for lambda in [0.0f32, 1e-4, 1e-2, 0.5, 2.0] {
            let t = total_loss(&mut tape, &le, &la, lambda).unwrap().item().unwrap();
            assert!(t >= prev);
            prev = t;
        }
    }

    #[test]
    fn discriminator_output_is_a_unit_interval_map() {
        let d = build_discriminator::<f32>(21);
        let out = d.forward(&mut Tape::new(), &rand_image(21, 24, 24)).unwrap();
        assert_eq!(out.shape(), [1, 3, 3]);
        assert!(out.data().iter().all(|v| *v > 0.0 && *v < 1.0));
        assert!(d.forward(&mut Tape::new(), &rand_image(21, 4, 4)).is_err());
    }

    #[test]
    fn discriminator_learns_to_separate_a_fixed_pair() {
        let mut d = build_discriminator::<f32>(23);
        let mut optim = SgdMomentum::new(2e-3, 0.9);
        let real = rand_image(23, 16, 16);
        let fake =
            Tensor::from_vec(&[1, 16, 16], real.data().iter().map(|v| 1.0 - v).collect()).unwrap();
        let mean = |t: &Tensor<f32>| t.sum_f64() / t.numel() as f64;
        for _ in 0..100 {
            let loss = discriminator_step(&mut d, &mut optim, &real, &fake).unwrap();
            assert!(loss.is_finite());
        }
        let dr = mean(&d.forward(&mut Tape::new(), &real).unwrap());
        let df = mean(&d.forward(&mut Tape::new(), &fake).unwrap());
        assert!(dr > df, "D(real) {dr} should exceed D(fake) {df}");
    }

    fn tiny_patches(n_scenes: usize, seed: u64) -> Vec<DmePatch> {
        let spec = synth::SceneSpec {
            width: 32,
            height: 32,
            count_range: (4, 20),
            cluster_count: 2,
            cluster_spread: 6.0,
            seed,
        };
        let items: Vec<synth::CorpusItem> = (0..n_scenes)
            .map(|i| {
                let s = synth::SceneSpec { seed: rng::item_seed(seed, i as u64), ..spec.clone() };
                let scene = synth::generate_scene(&s).unwrap();
                synth::CorpusItem {
                    id: i,
                    image: synth::render_image(&scene, s.seed).unwrap(),
                    density: render_density(&scene, synth::GT_SIGMA).unwrap(),
                    scene,
                    class: 0,
                }
            })
            .collect();
        synth::build_dme_dataset(&items, 2, seed).unwrap()
    }

    fn frozen_gce(input: usize, seed: u64) -> Classifier {
        let mut g = build_gce(input, seed).unwrap();
        g.frozen_prefix = g.net.num_layers();
        g
    }

    fn frozen_lce(patch: usize, seed: u64) -> Classifier {
        let mut l = build_lce(patch, seed).unwrap();
        l.frozen_prefix = l.net.num_layers();
        l
    }

    #[test]
    fn unfrozen_estimators_are_a_contract_violation() {
        let patches = tiny_patches(1, 31);
        let gce = build_gce(16, 31).unwrap(); // frozen_prefix = 6, not all
        let lce = frozen_lce(8, 31);
        let mut gen = Generator::<f32>::new(AblationConfig::ALL[2], 31).unwrap();
        let opts = TrainOptions { epochs: 1, lce_window: 8, lce_stride: 4, ..Default::default() };
        let err = train_end_to_end(&patches, Some(&gce), Some(&lce), &mut gen, None, &opts)
            .unwrap_err();
        assert!(matches!(err, Error::Contract(_)), "{err}");
    }

    #[test]
    fn adversarial_config_requires_discriminator_and_vice_versa() {
        let patches = tiny_patches(1, 33);
        let gce = frozen_gce(16, 33);
        let lce = frozen_lce(8, 33);
        let opts = TrainOptions { epochs: 1, lce_window: 8, lce_stride: 4, ..Default::default() };

        let mut gen = Generator::<f32>::new(AblationConfig::ALL[3], 33).unwrap();
        let err = train_end_to_end(&patches, Some(&gce), Some(&lce), &mut gen, None, &opts)
            .unwrap_err();
        assert!(matches!(err, Error::Contract(_)));

        let mut gen = Generator::<f32>::new(AblationConfig::ALL[2], 33).unwrap();
        let mut d = build_discriminator(33);
        let err = train_end_to_end(&patches, Some(&gce), Some(&lce), &mut gen, Some(&mut d), &opts)
            .unwrap_err();
        assert!(matches!(err, Error::Contract(_)));
    }

    #[test]
    fn euclidean_training_reduces_loss_and_keeps_estimators_frozen() {
        let patches = tiny_patches(4, 35);
        let gce = frozen_gce(16, 35);
        let lce = frozen_lce(8, 35);
        let before: Vec<Vec<u32>> = gce
            .net
            .named_params("g")
            .iter()
            .map(|(_, t)| t.data().iter().map(|v| v.to_bits()).collect())
            .collect();
        let mut gen = Generator::<f32>::new(AblationConfig::ALL[2], 35).unwrap();
        let opts = TrainOptions {
            epochs: 4,
            lr: 1e-3,
            lce_window: 8,
            lce_stride: 4,
            seed: 35,
            ..Default::default()
        };
        let untrained =
            mean_euclidean_loss(&patches, Some(&gce), Some(&lce), &gen, &opts).unwrap();
        let stats =
            train_end_to_end(&patches, Some(&gce), Some(&lce), &mut gen, None, &opts).unwrap();
        assert_eq!(stats.discriminator_steps, 0, "no adversarial term, no D steps");
        assert_eq!(stats.epoch_euclidean, stats.epoch_total, "L_T must equal L_E here");
        let trained = mean_euclidean_loss(&patches, Some(&gce), Some(&lce), &gen, &opts).unwrap();
        assert!(
            trained < untrained,
            "training should improve the fit: {trained} vs untrained {untrained}"
        );
        let after: Vec<Vec<u32>> = gce
            .net
            .named_params("g")
            .iter()
            .map(|(_, t)| t.data().iter().map(|v| v.to_bits()).collect())
            .collect();
        assert_eq!(before, after, "frozen GCE must be bit-identical");
    }

    #[test]
    fn adversarial_training_runs_and_updates_discriminator() {
        let patches = tiny_patches(2, 37);
        let gce = frozen_gce(16, 37);
        let lce = frozen_lce(8, 37);
        let mut gen = Generator::<f32>::new(AblationConfig::ALL[3], 37).unwrap();
        let mut d = build_discriminator(37);
        let d_before: Vec<f32> = d.net.named_params("d")[0].1.data().to_vec();
        let opts = TrainOptions {
            epochs: 1,
            lce_window: 8,
            lce_stride: 4,
            seed: 37,
            ..Default::default()
        };
        let stats =
            train_end_to_end(&patches, Some(&gce), Some(&lce), &mut gen, Some(&mut d), &opts)
                .unwrap();
        assert_eq!(stats.discriminator_steps, patches.len());
        assert!(stats.epoch_total[0] >= stats.epoch_euclidean[0], "L_T = L_E + positive term");
        let d_after: Vec<f32> = d.net.named_params("d")[0].1.data().to_vec();
        assert!(d_before != d_after, "discriminator should have moved");
    }

    #[test]
    fn infer_clamps_and_counts() {
        let scene = DotScene::new(32, 32, vec![(8.0, 8.0), (20.0, 24.0), (25.0, 9.0)]).unwrap();
        let img = synth::render_image(&scene, 41).unwrap();
        let gce = frozen_gce(16, 41);
        let lce = frozen_lce(8, 41);
        let gen = Generator::<f32>::new(AblationConfig::ALL[2], 41).unwrap();
        let (map, count) = infer(&img, Some(&gce), Some(&lce), &gen, 8, 4).unwrap();
        assert_eq!((map.width, map.height), (32, 32));
        assert!(map.values().iter().all(|v| *v >= 0.0));
        assert!((count - map.count()).abs() < 1e-9);
        assert!(count >= 0.0);

        let base = Generator::<f32>::new(AblationConfig::ALL[0], 41).unwrap();
        let (qmap, _) = infer(&img, None, None, &base, 8, 4).unwrap();
        assert_eq!((qmap.width, qmap.height), (8, 8));
    }

    /// The whole-generator gradient check: L_E through the full fusion stack
    /// in f64 against central differences on a 16x16 input.
    #[test]
    fn composite_generator_gradient_matches_finite_differences() {
        let outcome = generator_gradcheck(120, 43).unwrap();
        assert!(
            outcome.passed(),
            "composite rel err {} > {}",
            outcome.max_rel_err,
            outcome.tol
        );
    }

    #[test]
    fn dme_dataset_feeds_training_without_surprises() {
        // smoke check that the real patch pipeline composes with training
        let patches = tiny_patches(2, 45);
        assert!(patches.iter().any(|p| p.aug == DmeAug::Flipped));
        let mut gen = Generator::<f32>::new(AblationConfig::ALL[0], 45).unwrap();
        let opts = TrainOptions { epochs: 1, seed: 45, ..Default::default() };
        let stats = train_end_to_end(&patches, None, None, &mut gen, None, &opts).unwrap();
        assert!(stats.epoch_euclidean[0].is_finite());
    }
}
