//! Density-level classification and context-map assembly.
//!
//! Two small classifiers estimate how crowded an input looks on a five-level
//! scale: a global estimator (GCE) that sees a resized whole image or image
//! block, and a local estimator (LCE) that sees fixed-size patches. Their
//! sigmoid scores are broadcast into 5-plane context maps at quarter
//! resolution, which the fusion network consumes alongside appearance
//! features. Class boundaries are equal-frequency quintiles of the training
//! counts, so the five classes stay balanced on any corpus.

use rand::seq::SliceRandom;

use crate::error::{Error, Result};
use crate::image;
use crate::layers;
use crate::nn::{self, FwdCtx, Layer, Sequential};
use crate::optim::SgdMomentum;
use crate::rng;
use crate::tape::Tape;
use crate::tensor::Tensor;

/// Number of density levels (extremely low, low, medium, high, extremely high).
pub const NUM_CLASSES: usize = 5;

/// Count thresholds separating the five density levels.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DensityClass {
    boundaries: [f32; 4],
}

/// Linear-interpolation percentile (the numpy default): index p/100 * (n-1).
fn percentile_linear(sorted: &[f64], p: f64) -> f64 {
    let pos = p / 100.0 * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let frac = pos - lo as f64;
    if frac == 0.0 || lo + 1 == sorted.len() {
        sorted[lo]
    } else {
        sorted[lo] + frac * (sorted[lo + 1] - sorted[lo])
    }
}

impl DensityClass {
    pub fn new(boundaries: [f32; 4]) -> Result<Self> {
        let increasing = boundaries.windows(2).all(|w| w[0] < w[1]);
        if !increasing || boundaries.iter().any(|b| !b.is_finite()) {
            return Err(Error::DegenerateBoundaries(boundaries));
        }
        Ok(DensityClass { boundaries })
    }

    /// Equal-frequency quintiles: 20/40/60/80th percentiles of the counts.
    pub fn fit(counts: &[f64]) -> Result<Self> {
        let mut sorted: Vec<f64> = counts.to_vec();
        sorted.sort_by(|a, b| a.partial_cmp(b).expect("counts must not be NaN"));
        let mut distinct = 0usize;
        for (i, v) in sorted.iter().enumerate() {
            if i == 0 || *v != sorted[i - 1] {
                distinct += 1;
            }
        }
        if distinct < NUM_CLASSES {
            return Err(Error::TooFewDistinctCounts(distinct));
        }
        let b = [20.0, 40.0, 60.0, 80.0].map(|p| percentile_linear(&sorted, p) as f32);
        DensityClass::new(b)
    }

    pub fn boundaries(&self) -> [f32; 4] {
        self.boundaries
    }

    /// Total over non-negative counts: class j iff b[j-1] <= count < b[j].
    pub fn classify(&self, count: f64) -> usize {
        self.boundaries.iter().position(|b| count < *b as f64).unwrap_or(4)
    }
}

/// Five score planes in [0,1] at some (width, height).
#[derive(Debug, Clone, PartialEq)]
pub struct ContextMap {
    pub width: usize,
    pub height: usize,
    data: Vec<f32>, // plane-major (5, height, width)
}

impl ContextMap {
    pub fn new(width: usize, height: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != NUM_CLASSES * width * height {
            return Err(Error::shape(
                "context_map",
                format!("5x{height}x{width} = {}", NUM_CLASSES * width * height),
                format!("{}", data.len()),
            ));
        }
        if data.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::invalid("context map values must lie in [0,1]"));
        }
        Ok(ContextMap { width, height, data })
    }

    pub fn constant(width: usize, height: usize, scores: [f32; NUM_CLASSES]) -> Result<Self> {
        let mut data = Vec::with_capacity(NUM_CLASSES * width * height);
        for s in scores {
            data.extend(std::iter::repeat(s).take(width * height));
        }
        ContextMap::new(width, height, data)
    }

    pub fn plane(&self, j: usize) -> &[f32] {
        &self.data[j * self.width * self.height..(j + 1) * self.width * self.height]
    }

    pub fn to_tensor(&self) -> Tensor<f32> {
        Tensor::from_vec(&[NUM_CLASSES, self.height, self.width], self.data.clone())
            .expect("dims consistent by construction")
    }
}

/// A density-level classifier: a small convnet with an optional frozen prefix
/// (leading layers that training must leave bit-identical).
pub struct Classifier {
    pub net: Sequential<f32>,
    pub frozen_prefix: usize,
    pub input_size: usize,
}

/// Global estimator: 4 conv-ReLU-pool blocks, then 2 fully-connected layers.
/// The first two blocks form the frozen prefix (fine-tune only the deeper
/// half, mirroring transfer-learning practice at toy scale).
pub fn build_gce(input_size: usize, seed: u64) -> Result<Classifier> {
    if input_size < 16 || input_size % 16 != 0 {
        return Err(Error::invalid(format!(
            "gce input size {input_size} must be a positive multiple of 16"
        )));
    }
    let mut r = rng::stream(seed, "init.gce");
    let s16 = input_size / 16;
    let net = Sequential::new(vec![
        nn::conv_same(1, 8, 3, &mut r),
        Layer::Relu,
        Layer::MaxPool,
        nn::conv_same(8, 16, 3, &mut r),
        Layer::Relu,
        Layer::MaxPool,
        nn::conv_same(16, 32, 3, &mut r),
        Layer::Relu,
        Layer::MaxPool,
        nn::conv_same(32, 32, 3, &mut r),
        Layer::Relu,
        Layer::MaxPool,
        Layer::Flatten,
        nn::fc(32 * s16 * s16, 64, &mut r),
        Layer::Relu,
        nn::fc(64, NUM_CLASSES, &mut r),
    ]);
    Ok(Classifier { net, frozen_prefix: 6, input_size })
}

/// Local estimator: 2 conv-ReLU-pool blocks, then 3 fully-connected layers
/// with dropout after the first two. Trained from scratch (no frozen prefix).
pub fn build_lce(patch: usize, seed: u64) -> Result<Classifier> {
    if patch < 4 || patch % 4 != 0 {
        return Err(Error::invalid(format!("lce patch size {patch} must be a positive multiple of 4")));
    }
    let mut r = rng::stream(seed, "init.lce");
    let s4 = patch / 4;
    let net = Sequential::new(vec![
        nn::conv_same(1, 8, 3, &mut r),
        Layer::Relu,
        Layer::MaxPool,
        nn::conv_same(8, 16, 3, &mut r),
        Layer::Relu,
        Layer::MaxPool,
        Layer::Flatten,
        nn::fc(16 * s4 * s4, 128, &mut r),
        Layer::Relu,
        Layer::Dropout { rate: 0.5 },
        nn::fc(128, 64, &mut r),
        Layer::Relu,
        Layer::Dropout { rate: 0.5 },
        nn::fc(64, NUM_CLASSES, &mut r),
    ]);
    Ok(Classifier { net, frozen_prefix: 0, input_size: patch })
}

impl Classifier {
    fn check_input(&self, x: &Tensor<f32>) -> Result<()> {
        let s = self.input_size;
        if x.shape() != [1, s, s] {
            return Err(Error::shape(
                "classifier_forward",
                format!("(1, {s}, {s})"),
                format!("{:?}", x.shape()),
            ));
        }
        Ok(())
    }

    /// Raw class logits (recorded on `tape` when inputs or params are traced).
    pub fn logits(&self, tape: &mut Tape<f32>, x: &Tensor<f32>, ctx: &mut FwdCtx) -> Result<Tensor<f32>> {
        self.check_input(x)?;
        self.net.forward(tape, x, ctx)
    }

    /// Sigmoid scores in [0,1], eval mode (dropout off, nothing recorded).
    pub fn scores(&self, x: &Tensor<f32>) -> Result<[f32; NUM_CLASSES]> {
        let mut tape = Tape::new();
        let logits = self.logits(&mut tape, x, &mut FwdCtx::eval())?;
        let mut out = [0.0f32; NUM_CLASSES];
        for (o, l) in out.iter_mut().zip(logits.data()) {
            *o = crate::kernels::sigmoid_one(*l);
        }
        Ok(out)
    }

    /// Predicted level: argmax score (equivalently argmax logit).
    pub fn predict(&self, x: &Tensor<f32>) -> Result<usize> {
        let scores = self.scores(x)?;
        let mut best = 0usize;
        for j in 1..NUM_CLASSES {
            if scores[j] > scores[best] {
                best = j;
            }
        }
        Ok(best)
    }
}

fn check_quarterable(op: &'static str, w: usize, h: usize) -> Result<(usize, usize)> {
    if w == 0 || h == 0 || w % 4 != 0 || h % 4 != 0 {
        return Err(Error::shape(op, "dims divisible by 4", format!("{w}x{h}")));
    }
    Ok((w / 4, h / 4))
}

/// Training-time global context: the whole image's scores broadcast over
/// constant planes at quarter resolution.
pub fn build_global_context_train(image: &Tensor<f32>, gce: &Classifier) -> Result<ContextMap> {
    let (h, w) = image::image_dims(image)?;
    let (qw, qh) = check_quarterable("global_context_train", w, h)?;
    let resized = image::resize_bilinear(image, gce.input_size, gce.input_size)?;
    let scores = gce.scores(&resized)?;
    ContextMap::constant(qw, qh, scores)
}

/// Inference-time global context: the image is split into a 4x4 grid of
/// blocks, each block is scored separately, and each plane is filled
/// blockwise at quarter resolution.
pub fn build_global_context_infer(image: &Tensor<f32>, gce: &Classifier) -> Result<ContextMap> {
    let (h, w) = image::image_dims(image)?;
    let (qw, qh) = check_quarterable("global_context_infer", w, h)?;
    let (bw, bh) = (w / 4, h / 4);
    let mut block_scores = [[0.0f32; NUM_CLASSES]; 16];
    for by in 0..4 {
        for bx in 0..4 {
            let block = image::crop(image, by * bh, bx * bw, bh, bw)?;
            let resized = image::resize_bilinear(&block, gce.input_size, gce.input_size)?;
            block_scores[by * 4 + bx] = gce.scores(&resized)?;
        }
    }
    let mut data = vec![0.0f32; NUM_CLASSES * qw * qh];
    for j in 0..NUM_CLASSES {
        for cy in 0..qh {
            let by = cy * 4 / qh;
            for cx in 0..qw {
                let bx = cx * 4 / qw;
                data[(j * qh + cy) * qw + cx] = block_scores[by * 4 + bx][j];
            }
        }
    }
    ContextMap::new(qw, qh, data)
}

/// Window start offsets covering [0, n): 0, s, 2s, ... plus a tail window
/// ending exactly at n so no pixel is left uncovered.
pub(crate) fn window_offsets(n: usize, p: usize, s: usize) -> Vec<usize> {
    let mut offs = Vec::new();
    let mut o = 0usize;
    while o + p <= n {
        offs.push(o);
        o += s;
    }
    if *offs.last().expect("p <= n guarantees at least one window") != n - p {
        offs.push(n - p);
    }
    offs
}

/// Local context: a PxP sliding window is scored at each offset, scores are
/// accumulated at full resolution (overlaps averaged), and the result is
/// box-downsampled to quarter resolution.
pub fn build_local_context(
    image: &Tensor<f32>,
    lce: &Classifier,
    window: usize,
    stride: usize,
) -> Result<ContextMap> {
    let (h, w) = image::image_dims(image)?;
    let (qw, qh) = check_quarterable("local_context", w, h)?;
    let p = window;
    if p == 0 || p > w.min(h) {
        return Err(Error::invalid(format!(
            "local_context: window {p} must be in 1..={} for a {w}x{h} image",
            w.min(h)
        )));
    }
    if stride == 0 {
        return Err(Error::invalid("local_context: stride must be >= 1"));
    }
    if p != lce.input_size {
        return Err(Error::shape("local_context", format!("window {}", lce.input_size), format!("{p}")));
    }

    let mut sums = vec![0.0f64; NUM_CLASSES * w * h];
    let mut cover = vec![0u32; w * h];
    for &oy in &window_offsets(h, p, stride) {
        for &ox in &window_offsets(w, p, stride) {
            let patch = image::crop(image, oy, ox, p, p)?;
            let scores = lce.scores(&patch)?;
            for y in oy..oy + p {
                for x in ox..ox + p {
                    cover[y * w + x] += 1;
                    for (j, sc) in scores.iter().enumerate() {
                        sums[(j * h + y) * w + x] += *sc as f64;
                    }
                }
            }
        }
    }

    // average overlaps, then 4x4 box-average down to quarter resolution
    let mut data = vec![0.0f32; NUM_CLASSES * qw * qh];
    for j in 0..NUM_CLASSES {
        for cy in 0..qh {
            for cx in 0..qw {
                let mut acc = 0.0f64;
                for y in cy * 4..cy * 4 + 4 {
                    for x in cx * 4..cx * 4 + 4 {
                        debug_assert!(cover[y * w + x] >= 1, "tiling must cover every pixel");
                        acc += sums[(j * h + y) * w + x] / cover[y * w + x] as f64;
                    }
                }
                data[(j * qh + cy) * qw + cx] = (acc / 16.0).clamp(0.0, 1.0) as f32;
            }
        }
    }
    ContextMap::new(qw, qh, data)
}

/// Per-sample SGD training with softmax cross-entropy on the logits.
/// Layers before `frozen_prefix` are never watched, so their parameters stay
/// bit-identical. Returns the mean loss of each epoch.
pub fn train_classifier(
    cls: &mut Classifier,
    data: &[(Tensor<f32>, usize)],
    epochs: usize,
    lr: f32,
    seed: u64,
) -> Result<Vec<f64>> {
    if data.is_empty() {
        return Err(Error::invalid("train_classifier: dataset is empty"));
    }
    for (x, label) in data {
        cls.check_input(x)?;
        if *label >= NUM_CLASSES {
            return Err(Error::invalid(format!("train_classifier: label {label} out of range")));
        }
    }
    let mut optim = SgdMomentum::new(lr, 0.9);
    let mut shuffle_rng = rng::stream(seed, "classifier.shuffle");
    let mut dropout_rng = rng::stream(seed, "classifier.dropout");
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut epoch_losses = Vec::with_capacity(epochs);
    // with every layer frozen there is nothing to differentiate; training
    // degenerates to loss bookkeeping (the freeze contract still holds)
    let has_trainable = !cls.net.params_mut(cls.frozen_prefix).is_empty();

    for _ in 0..epochs {
        order.shuffle(&mut shuffle_rng);
        let mut total = 0.0f64;
        for &i in &order {
            let (x, label) = &data[i];
            let mut tape = Tape::new();
            cls.net.watch(&mut tape, cls.frozen_prefix);
            let logits = {
                let mut ctx = FwdCtx::train(&mut dropout_rng);
                cls.net.forward(&mut tape, x, &mut ctx)?
            };
            let loss = layers::softmax_cross_entropy(&mut tape, &logits, *label)?;
            total += loss.item()? as f64;
            if has_trainable {
                tape.backward(&loss)?;
                let grads = cls.net.grads(&tape, cls.frozen_prefix)?;
                let mut params = cls.net.params_mut(cls.frozen_prefix);
                optim.step(&mut params, &grads)?;
            }
        }
        epoch_losses.push(total / data.len() as f64);
    }
    Ok(epoch_losses)
}

/// Fraction of samples whose predicted level matches the label.
pub fn classifier_accuracy(cls: &Classifier, data: &[(Tensor<f32>, usize)]) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::invalid("classifier_accuracy: dataset is empty"));
    }
    let mut hits = 0usize;
    for (x, label) in data {
        if cls.predict(x)? == *label {
            hits += 1;
        }
    }
    Ok(hits as f64 / data.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quintile_boundaries_match_percentile_oracle() {
        let counts: Vec<f64> = (1..=100).map(|v| v as f64).collect();
        let b = DensityClass::fit(&counts).unwrap().boundaries();
        let want = [20.8f32, 40.6, 60.4, 80.2];
        for (got, want) in b.iter().zip(want) {
            assert!((got - want).abs() < 1e-5, "{b:?}");
        }
    }

    #[test]
    fn five_spread_counts_land_in_distinct_classes() {
        let counts = [0.0, 10.0, 20.0, 30.0, 40.0];
        let cls = DensityClass::fit(&counts).unwrap();
        let assigned: Vec<usize> = counts.iter().map(|c| cls.classify(*c)).collect();
        assert_eq!(assigned, vec![0, 1, 2, 3, 4]);
    }

    #[test]
    fn classify_is_total_and_ordered() {
        let cls = DensityClass::new([1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(cls.classify(0.0), 0);
        assert_eq!(cls.classify(0.999), 0);
        assert_eq!(cls.classify(1.0), 1);
        assert_eq!(cls.classify(3.5), 3);
        assert_eq!(cls.classify(4.0), 4);
        assert_eq!(cls.classify(1e9), 4);
    }

    #[test]
    fn degenerate_counts_are_rejected() {
        assert!(matches!(
            DensityClass::fit(&[7.0; 40]),
            Err(Error::TooFewDistinctCounts { .. })
        ));
        assert!(matches!(
            DensityClass::fit(&[1.0, 2.0, 3.0, 4.0]),
            Err(Error::TooFewDistinctCounts { .. })
        ));
        // five distinct values but quintiles collapse onto the repeated one
        let mut counts = vec![5.0f64; 96];
        counts.extend([1.0, 2.0, 3.0, 4.0]);
        assert!(matches!(
            DensityClass::fit(&counts),
            Err(Error::DegenerateBoundaries(_))
        ));
        assert!(DensityClass::new([1.0, 1.0, 2.0, 3.0]).is_err());
    }

    #[test]
    fn quintile_fit_balances_class_frequencies() {
        let mut r = rng::stream(3, "ctx.balance");
        use rand::Rng;
        for trial in 0..10 {
            let n = 50 + trial * 17;
            let mut counts: Vec<f64> = Vec::with_capacity(n);
            while counts.len() < n {
                let c = r.gen_range(0.0..400.0f64).round();
                if !counts.contains(&c) {
                    counts.push(c); // distinct counts per the stated property
                }
            }
            let cls = DensityClass::fit(&counts).unwrap();
            let mut freq = [0usize; NUM_CLASSES];
            for c in &counts {
                freq[cls.classify(*c)] += 1;
            }
            let (lo, hi) = (n / 5 - 1, n.div_ceil(5) + 1);
            for (j, f) in freq.iter().enumerate() {
                assert!((lo..=hi).contains(f), "trial {trial}: class {j} got {f}, want {lo}..={hi}");
            }
        }
    }

    #[test]
    fn zero_image_with_zero_head_scores_half() {
        let mut gce = build_gce(32, 9).unwrap();
        if let Some(Layer::Fc { w, b }) = gce.net.layers.last_mut() {
            *w = Tensor::zeros(w.shape());
            *b = Tensor::zeros(b.shape());
        } else {
            panic!("last layer should be fc");
        }
        let scores = gce.scores(&Tensor::zeros(&[1, 32, 32])).unwrap();
        assert_eq!(scores, [0.5; NUM_CLASSES]);
    }

    #[test]
    fn classifier_rejects_wrong_input_size() {
        let gce = build_gce(32, 9).unwrap();
        assert!(gce.scores(&Tensor::zeros(&[1, 16, 16])).is_err());
        let lce = build_lce(16, 9).unwrap();
        assert!(lce.scores(&Tensor::zeros(&[1, 16, 32])).is_err());
        assert!(build_gce(24, 1).is_err(), "24 is not a multiple of 16");
        assert!(build_lce(10, 1).is_err(), "10 is not a multiple of 4");
    }

    #[test]
    fn scores_are_probability_like() {
        let gce = build_gce(16, 5).unwrap();
        let mut r = rng::stream(5, "ctx.scorerange");
        let x = Tensor::<f32>::randn(&[1, 16, 16], 1.0, &mut r);
        let scores = gce.scores(&x).unwrap();
        assert!(scores.iter().all(|s| (0.0..=1.0).contains(s)), "{scores:?}");
    }

    #[test]
    fn global_train_map_is_constant_per_plane() {
        let gce = build_gce(16, 7).unwrap();
        let mut r = rng::stream(7, "ctx.gtrain");
        let img = Tensor::<f32>::randn(&[1, 24, 36], 0.3, &mut r);
        let map = build_global_context_train(&img, &gce).unwrap();
        assert_eq!((map.width, map.height), (9, 6));
        let scores = gce.scores(&image::resize_bilinear(&img, 16, 16).unwrap()).unwrap();
        for j in 0..NUM_CLASSES {
            let plane = map.plane(j);
            assert!(plane.iter().all(|v| *v == scores[j]), "plane {j} not constant");
        }
        assert!(build_global_context_train(&Tensor::zeros(&[1, 18, 24]), &gce).is_err());
    }

    #[test]
    fn global_infer_on_uniform_image_equals_train_variant() {
        let gce = build_gce(16, 11).unwrap();
        let img = Tensor::filled(&[1, 32, 32], 0.37f32);
        let train = build_global_context_train(&img, &gce).unwrap();
        let infer = build_global_context_infer(&img, &gce).unwrap();
        assert_eq!(train, infer);
    }

    #[test]
    fn global_infer_blocks_take_their_own_scores() {
        let gce = build_gce(16, 13).unwrap();
        let mut r = rng::stream(13, "ctx.ginfer");
        let img = Tensor::<f32>::randn(&[1, 32, 32], 0.3, &mut r);
        let map = build_global_context_infer(&img, &gce).unwrap();
        assert_eq!((map.width, map.height), (8, 8));
        // oracle: score each 8x8 block independently
        for by in 0..4 {
            for bx in 0..4 {
                let block = image::crop(&img, by * 8, bx * 8, 8, 8).unwrap();
                let scores = gce.scores(&image::resize_bilinear(&block, 16, 16).unwrap()).unwrap();
                for j in 0..NUM_CLASSES {
                    for cy in by * 2..by * 2 + 2 {
                        for cx in bx * 2..bx * 2 + 2 {
                            assert_eq!(map.plane(j)[cy * 8 + cx], scores[j]);
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn window_offsets_cover_with_tail() {
        assert_eq!(window_offsets(64, 32, 16), vec![0, 16, 32]);
        assert_eq!(window_offsets(60, 32, 16), vec![0, 16, 28]);
        assert_eq!(window_offsets(32, 32, 16), vec![0]);
        // every pixel covered when stride <= window
        for n in [32usize, 40, 52, 64] {
            let offs = window_offsets(n, 16, 8);
            let mut covered = vec![false; n];
            for o in offs {
                for c in covered.iter_mut().skip(o).take(16) {
                    *c = true;
                }
            }
            assert!(covered.iter().all(|c| *c), "n={n}");
        }
    }

    #[test]
    fn single_window_local_context_is_constant() {
        let lce = build_lce(32, 17).unwrap();
        let mut r = rng::stream(17, "ctx.local1");
        let img = Tensor::<f32>::randn(&[1, 32, 32], 0.3, &mut r);
        let map = build_local_context(&img, &lce, 32, 16).unwrap();
        let scores = lce.scores(&img).unwrap();
        for j in 0..NUM_CLASSES {
            for v in map.plane(j) {
                assert!((v - scores[j]).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn two_disjoint_windows_fill_their_halves() {
        let lce = build_lce(16, 19).unwrap();
        let mut r = rng::stream(19, "ctx.local2");
        let img = Tensor::<f32>::randn(&[1, 16, 32], 0.5, &mut r);
        // stride == window -> two non-overlapping windows, left and right
        let map = build_local_context(&img, &lce, 16, 16).unwrap();
        assert_eq!((map.width, map.height), (8, 4));
        let left = lce.scores(&image::crop(&img, 0, 0, 16, 16).unwrap()).unwrap();
        let right = lce.scores(&image::crop(&img, 0, 16, 16, 16).unwrap()).unwrap();
        for j in 0..NUM_CLASSES {
            let plane = map.plane(j);
            for cy in 0..4 {
                for cx in 0..4 {
                    assert!((plane[cy * 8 + cx] - left[j]).abs() < 1e-6);
                    assert!((plane[cy * 8 + cx + 4] - right[j]).abs() < 1e-6);
                }
            }
        }
    }

    #[test]
    fn local_context_rejects_oversized_window() {
        let lce = build_lce(32, 23).unwrap();
        let img = Tensor::zeros(&[1, 16, 16]);
        assert!(build_local_context(&img, &lce, 32, 16).is_err());
    }

    fn toy_level_dataset(side: usize, per_class: usize, seed: u64) -> Vec<(Tensor<f32>, usize)> {
        // brightness encodes the density level: trivially separable
        let mut r = rng::stream(seed, "ctx.toyset");
        use rand::Rng;
        let mut data = Vec::new();
        for class in 0..NUM_CLASSES {
            for _ in 0..per_class {
                let base = 0.1 + 0.2 * class as f32;
                let vals: Vec<f32> = (0..side * side)
                    .map(|_| (base + r.gen_range(-0.04..0.04f32)).clamp(0.0, 1.0))
                    .collect();
                data.push((Tensor::from_vec(&[1, side, side], vals).unwrap(), class));
            }
        }
        data
    }

    #[test]
    fn training_reduces_loss_and_overfits_single_sample() {
        let mut lce = build_lce(16, 29).unwrap();
        let data = toy_level_dataset(16, 6, 29);
        let losses = train_classifier(&mut lce, &data, 8, 5e-3, 29).unwrap();
        assert!(
            losses.last().unwrap() < losses.first().unwrap(),
            "losses did not decrease: {losses:?}"
        );

        let mut gce = build_gce(16, 31).unwrap();
        let sample = toy_level_dataset(16, 1, 31).swap_remove(3); // one class-3 image
        let label = sample.1;
        let x = sample.0.clone();
        train_classifier(&mut gce, &[sample], 200, 5e-3, 31).unwrap();
        assert_eq!(gce.predict(&x).unwrap(), label);
    }

    #[test]
    fn frozen_prefix_parameters_are_bit_identical_after_training() {
        let mut gce = build_gce(16, 37).unwrap();
        let before: Vec<(String, Vec<u32>)> = gce
            .net
            .named_params("gce")
            .into_iter()
            .map(|(n, t)| (n, t.data().iter().map(|v| v.to_bits()).collect()))
            .collect();
        let data = toy_level_dataset(16, 3, 37);
        train_classifier(&mut gce, &data, 3, 1e-2, 37).unwrap();

        // first two blocks = layers 0..6 -> params gce.l00.* and gce.l03.*
        let frozen_names = ["gce.l00.w", "gce.l00.b", "gce.l03.w", "gce.l03.b"];
        let mut frozen_seen = 0;
        let mut trained_changed = 0;
        for (name, t) in gce.net.named_params("gce") {
            let old = &before.iter().find(|(n, _)| *n == name).unwrap().1;
            let new: Vec<u32> = t.data().iter().map(|v| v.to_bits()).collect();
            if frozen_names.contains(&name.as_str()) {
                assert_eq!(&new, old, "frozen param {name} changed");
                frozen_seen += 1;
            } else if &new != old {
                trained_changed += 1;
            }
        }
        assert_eq!(frozen_seen, 4);
        assert!(trained_changed > 0, "no trainable parameter moved");
    }

    #[test]
    fn fully_frozen_classifier_is_bit_identical_after_training() {
        let mut lce = build_lce(16, 41).unwrap();
        lce.frozen_prefix = lce.net.num_layers();
        let before: Vec<Vec<u32>> = lce
            .net
            .named_params("x")
            .into_iter()
            .map(|(_, t)| t.data().iter().map(|v| v.to_bits()).collect())
            .collect();
        let data = toy_level_dataset(16, 2, 41);
        train_classifier(&mut lce, &data, 2, 1e-2, 41).unwrap();
        let after: Vec<Vec<u32>> = lce
            .net
            .named_params("x")
            .into_iter()
            .map(|(_, t)| t.data().iter().map(|v| v.to_bits()).collect())
            .collect();
        assert_eq!(before, after);
    }

    #[test]
    fn empty_dataset_is_rejected() {
        let mut gce = build_gce(16, 43).unwrap();
        assert!(train_classifier(&mut gce, &[], 1, 1e-2, 43).is_err());
    }
}
