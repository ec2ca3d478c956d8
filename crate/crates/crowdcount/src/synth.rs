//! Synthetic crowd scenes and the patch datasets built from them.
//!
//! Scenes place dots with a mixture of uniform clusters and render a blob
//! image whose brightness tracks local density, so both the count regressor
//! and the density-level classifiers have real signal to learn. A corpus is
//! a directory of scene/image/density triples plus a `manifest.csv`; the two
//! training datasets are built by random cropping with flip/noise
//! augmentation (density ground truth is flipped alongside images but never
//! noised).

use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::context::{DensityClass, NUM_CLASSES};
use crate::density::{render_density, DensityMap, DotScene};
use crate::error::{Error, Result};
use crate::image;
use crate::rng;
use crate::tensor::Tensor;

/// Ground-truth Gaussian spread (pixels) used for rendered density maps.
pub const GT_SIGMA: f64 = 2.0;
/// Additive image-noise level for augmentation, in [0,1] units.
pub const NOISE_STD: f64 = 0.02;
/// Patches produced per source image by the density-map-estimator dataset.
pub const DME_PER_IMAGE: usize = 300;
/// Patches produced per source image by the local-classifier dataset.
pub const LOCAL_PER_IMAGE: usize = 100;

const BLOB_SIGMA: f64 = 2.5;
const BLOB_GAIN: f32 = 25.0;

/// Parameters for one synthetic scene.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneSpec {
    pub width: usize,
    pub height: usize,
    /// Inclusive people-count range.
    pub count_range: (usize, usize),
    pub cluster_count: usize,
    /// Half-width of the uniform box around each cluster center, in pixels.
    pub cluster_spread: f32,
    pub seed: u64,
}

impl SceneSpec {
    fn validate(&self) -> Result<()> {
        if self.width == 0 || self.height == 0 {
            return Err(Error::invalid("scene spec: dimensions must be positive"));
        }
        if self.count_range.0 > self.count_range.1 {
            return Err(Error::invalid(format!(
                "scene spec: count range {}..={} is reversed",
                self.count_range.0, self.count_range.1
            )));
        }
        if self.count_range.1 > 0 && self.cluster_count == 0 {
            return Err(Error::invalid("scene spec: positive counts need at least one cluster"));
        }
        if !(self.cluster_spread > 0.0) {
            return Err(Error::invalid("scene spec: cluster spread must be > 0"));
        }
        Ok(())
    }
}

/// Sample dot positions: pick a cluster, offset uniformly, clamp into frame.
pub fn generate_scene(spec: &SceneSpec) -> Result<DotScene> {
    spec.validate()?;
    let mut r = rng::stream(spec.seed, "scene.layout");
    let count = r.gen_range(spec.count_range.0..=spec.count_range.1);
    let (wf, hf) = (spec.width as f32, spec.height as f32);
    let centers: Vec<(f32, f32)> = (0..spec.cluster_count)
        .map(|_| (r.gen_range(0.0..wf), r.gen_range(0.0..hf)))
        .collect();
    let eps = 1e-3f32;
    let mut dots = Vec::with_capacity(count);
    for _ in 0..count {
        let (cx, cy) = centers[r.gen_range(0..centers.len())];
        let s = spec.cluster_spread;
        let x = (cx + r.gen_range(-s..s)).clamp(0.0, wf - eps);
        let y = (cy + r.gen_range(-s..s)).clamp(0.0, hf - eps);
        dots.push((x, y));
    }
    DotScene::new(spec.width, spec.height, dots)
}

/// Quantize to the 8-bit grid PGM files use, so in-memory images match what
/// a written-then-read corpus yields byte for byte.
fn quantize_u8(img: &mut Tensor<f32>) {
    for v in img.data_mut() {
        *v = (v.clamp(0.0, 1.0) * 255.0).round() / 255.0;
    }
}

/// Render the observable image for a scene: soft blobs around each dot plus
/// Gaussian pixel noise, clamped to [0,1] and quantized to 8-bit levels.
pub fn render_image(scene: &DotScene, seed: u64) -> Result<Tensor<f32>> {
    let blobs = render_density(scene, BLOB_SIGMA)?;
    let mut noise_rng = rng::stream(seed, "scene.noise");
    let mut data = Vec::with_capacity(blobs.values().len());
    for v in blobs.values() {
        let noisy = (v * BLOB_GAIN) as f64 + NOISE_STD * crate::tensor::gauss(&mut noise_rng);
        data.push(noisy.clamp(0.0, 1.0) as f32);
    }
    let mut img = Tensor::from_vec(&[1, scene.height, scene.width], data)?;
    quantize_u8(&mut img);
    Ok(img)
}

/// One corpus entry, fully materialized.
#[derive(Debug, Clone)]
pub struct CorpusItem {
    pub id: usize,
    pub scene: DotScene,
    pub image: Tensor<f32>,
    pub density: DensityMap,
    pub class: usize,
}

fn corpus_paths(dir: &Path, id: usize) -> (PathBuf, PathBuf, PathBuf) {
    (
        dir.join(format!("scenes/{id:04}.txt")),
        dir.join(format!("images/{id:04}.pgm")),
        dir.join(format!("density/{id:04}.cpdm")),
    )
}

/// Generate `n` scenes from `template` (per-item seeds derived from
/// `template.seed`), render images and ground truth, classify image counts by
/// fitted quintiles, and write the corpus layout under `dir`:
/// `scenes/NNNN.txt`, `images/NNNN.pgm`, `density/NNNN.cpdm`, `manifest.csv`.
pub fn generate_corpus(
    dir: &Path,
    n: usize,
    template: &SceneSpec,
    sigma: f64,
) -> Result<Vec<CorpusItem>> {
    if n == 0 {
        return Err(Error::invalid("generate_corpus: need at least one scene"));
    }
    template.validate()?;
    let mut scenes = Vec::with_capacity(n);
    for i in 0..n {
        let spec = SceneSpec { seed: rng::item_seed(template.seed, i as u64), ..template.clone() };
        scenes.push((generate_scene(&spec)?, spec.seed));
    }
    let counts: Vec<f64> = scenes.iter().map(|(s, _)| s.count() as f64).collect();
    let classes = DensityClass::fit(&counts)?;

    for sub in ["scenes", "images", "density"] {
        let p = dir.join(sub);
        fs::create_dir_all(&p).map_err(|e| Error::io(p.display().to_string(), e))?;
    }
    let mut manifest = String::from("id,count,class\n");
    let mut items = Vec::with_capacity(n);
    for (id, (scene, seed)) in scenes.into_iter().enumerate() {
        let image = render_image(&scene, seed)?;
        let density = render_density(&scene, sigma)?;
        let class = classes.classify(scene.count() as f64);
        let (sp, ip, dp) = corpus_paths(dir, id);
        scene.save(&sp)?;
        image::write_pgm(&ip, &image)?;
        density.save(&dp)?;
        manifest.push_str(&format!("{id},{},{class}\n", scene.count()));
        items.push(CorpusItem { id, scene, image, density, class });
    }
    let mp = dir.join("manifest.csv");
    fs::write(&mp, manifest).map_err(|e| Error::io(mp.display().to_string(), e))?;
    Ok(items)
}

/// Load a corpus written by [`generate_corpus`].
pub fn read_corpus(dir: &Path) -> Result<Vec<CorpusItem>> {
    let mp = dir.join("manifest.csv");
    let text = fs::read_to_string(&mp).map_err(|e| Error::io(mp.display().to_string(), e))?;
    let mpath = mp.display().to_string();
    let mut lines = text.lines();
    match lines.next() {
        Some("id,count,class") => {}
        other => {
            return Err(Error::format(
                mpath,
                format!("expected header 'id,count,class', found {other:?}"),
            ))
        }
    }
    let mut items = Vec::new();
    for (lineno, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let mut fields = line.split(',');
        let mut field = |name: &str| -> Result<&str> {
            fields.next().ok_or_else(|| {
                Error::format(mpath.clone(), format!("line {}: missing {name}", lineno + 2))
            })
        };
        let id: usize = field("id")?
            .parse()
            .map_err(|e| Error::format(mpath.clone(), format!("line {}: id: {e}", lineno + 2)))?;
        let count: usize = field("count")?
            .parse()
            .map_err(|e| Error::format(mpath.clone(), format!("line {}: count: {e}", lineno + 2)))?;
        let class: usize = field("class")?
            .parse()
            .map_err(|e| Error::format(mpath.clone(), format!("line {}: class: {e}", lineno + 2)))?;
        if class >= NUM_CLASSES {
            return Err(Error::format(
                mpath.clone(),
                format!("line {}: class {class} out of range", lineno + 2),
            ));
        }
        let (sp, ip, dp) = corpus_paths(dir, id);
        let scene = DotScene::load(&sp)?;
        if scene.count() != count {
            return Err(Error::format(
                sp.display().to_string(),
                format!("scene has {} dots but manifest says {count}", scene.count()),
            ));
        }
        let image = image::read_pgm(&ip)?;
        let density = DensityMap::load(&dp)?;
        items.push(CorpusItem { id, scene, image, density, class });
    }
    if items.is_empty() {
        return Err(Error::format(mpath, "manifest has no data rows".to_string()));
    }
    Ok(items)
}

/// How a density-estimator patch was produced.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DmeAug {
    Plain,
    Flipped,
    Noised,
}

/// One (image patch, density patch) training pair.
#[derive(Debug, Clone)]
pub struct DmePatch {
    pub image: Tensor<f32>,
    pub density: DensityMap,
    pub source: usize,
    /// (y0, x0) of the crop in the source image.
    pub rect: (usize, usize),
    pub aug: DmeAug,
}

fn random_rect(r: &mut ChaCha8Rng, h: usize, w: usize, ph: usize, pw: usize) -> (usize, usize) {
    (r.gen_range(0..=h - ph), r.gen_range(0..=w - pw))
}

fn crop_pair(
    item: &CorpusItem,
    rect: (usize, usize),
    ph: usize,
    pw: usize,
) -> Result<(Tensor<f32>, DensityMap)> {
    let img = image::crop(&item.image, rect.0, rect.1, ph, pw)?;
    let den = item.density.crop(rect.1, rect.0, pw, ph)?;
    Ok((img, den))
}

/// Density-estimator training set: per source image, 100 random quarter-area
/// crops (width/2 x height/2), then 100 horizontally flipped fresh crops
/// (density flipped alongside), then 100 noise-augmented fresh crops (noise
/// on the image only).
pub fn build_dme_dataset(items: &[CorpusItem], per_kind: usize, seed: u64) -> Result<Vec<DmePatch>> {
    let mut out = Vec::with_capacity(items.len() * per_kind * 3);
    for item in items {
        let (h, w) = image::image_dims(&item.image)?;
        if h < 8 || w < 8 {
            return Err(Error::invalid(format!(
                "build_dme_dataset: image {} is {w}x{h}, need at least 8x8",
                item.id
            )));
        }
        let (ph, pw) = (h / 2, w / 2);
        let mut r = rng::indexed_stream(seed, "dme.crops", item.id as u64);
        for _ in 0..per_kind {
            let rect = random_rect(&mut r, h, w, ph, pw);
            let (image, density) = crop_pair(item, rect, ph, pw)?;
            out.push(DmePatch { image, density, source: item.id, rect, aug: DmeAug::Plain });
        }
        for _ in 0..per_kind {
            let rect = random_rect(&mut r, h, w, ph, pw);
            let (image, density) = crop_pair(item, rect, ph, pw)?;
            out.push(DmePatch {
                image: image::hflip(&image)?,
                density: density.hflip(),
                source: item.id,
                rect,
                aug: DmeAug::Flipped,
            });
        }
        for _ in 0..per_kind {
            let rect = random_rect(&mut r, h, w, ph, pw);
            let (image, density) = crop_pair(item, rect, ph, pw)?;
            out.push(DmePatch {
                image: image::add_noise(&image, NOISE_STD, &mut r)?,
                density,
                source: item.id,
                rect,
                aug: DmeAug::Noised,
            });
        }
    }
    Ok(out)
}

/// Full-scene training pairs: each source image paired with its complete
/// density map, repeated `per_item` times.
///
/// Quarter-area crops alone leave the generator tuned to feature maps where
/// the large fusion kernels overlap the zero padding far more than they do on
/// a whole scene, and the learned weights then overshoot at inference time.
/// Mixing full-size scenes into the training set keeps the training and
/// inference input distributions aligned.
pub fn whole_scene_patches(items: &[CorpusItem], per_item: usize) -> Vec<DmePatch> {
    let mut out = Vec::with_capacity(items.len() * per_item);
    for item in items {
        for _ in 0..per_item {
            out.push(DmePatch {
                image: item.image.clone(),
                density: item.density.clone(),
                source: item.id,
                rect: (0, 0),
                aug: DmeAug::Plain,
            });
        }
    }
    out
}

/// One labeled patch for the local density-level classifier.
#[derive(Debug, Clone)]
pub struct LocalPatch {
    pub image: Tensor<f32>,
    pub label: usize,
    pub count: f64,
    pub source: usize,
    pub rect: (usize, usize),
}

/// Local-classifier training set: 100 random PxP patches per image, labeled
/// by quintile-classifying each patch's ground-truth count. Returns the
/// patches together with the fitted boundaries (needed again at inference).
pub fn build_local_dataset(
    items: &[CorpusItem],
    p: usize,
    per_image: usize,
    seed: u64,
) -> Result<(Vec<LocalPatch>, DensityClass)> {
    let mut raw: Vec<(Tensor<f32>, f64, usize, (usize, usize))> = Vec::new();
    for item in items {
        let (h, w) = image::image_dims(&item.image)?;
        if p == 0 || p > h.min(w) {
            return Err(Error::invalid(format!(
                "build_local_dataset: patch size {p} exceeds image {} ({w}x{h})",
                item.id
            )));
        }
        let mut r = rng::indexed_stream(seed, "local.crops", item.id as u64);
        for _ in 0..per_image {
            let rect = random_rect(&mut r, h, w, p, p);
            let img = image::crop(&item.image, rect.0, rect.1, p, p)?;
            let count = item.density.crop(rect.1, rect.0, p, p)?.count();
            raw.push((img, count, item.id, rect));
        }
    }
    let counts: Vec<f64> = raw.iter().map(|(_, c, _, _)| *c).collect();
    let classes = DensityClass::fit(&counts)?;
    let patches = raw
        .into_iter()
        .map(|(image, count, source, rect)| LocalPatch {
            image,
            label: classes.classify(count),
            count,
            source,
            rect,
        })
        .collect();
    Ok((patches, classes))
}

/// Global-classifier training set: every image resized whole, plus random
/// half-size and quarter-size views, each view labeled by its area-scaled
/// count against whole-image quintile boundaries. The scale mix matters: the
/// trained GCE later scores half-size crops (end-to-end training) and
/// quarter-size blocks (inference), and its scores are only meaningful on
/// views it has seen the likes of.
pub fn build_gce_dataset(
    items: &[CorpusItem],
    input: usize,
    per_scale: usize,
    seed: u64,
) -> Result<(Vec<(Tensor<f32>, usize)>, DensityClass)> {
    if items.is_empty() {
        return Err(Error::invalid("build_gce_dataset: no corpus items"));
    }
    let counts: Vec<f64> = items.iter().map(|it| it.scene.count() as f64).collect();
    let classes = DensityClass::fit(&counts)?;
    let mut out = Vec::with_capacity(items.len() * (1 + 2 * per_scale));
    for item in items {
        let (h, w) = image::image_dims(&item.image)?;
        out.push((image::resize_bilinear(&item.image, input, input)?, item.class));
        let mut r = rng::indexed_stream(seed, "gce.views", item.id as u64);
        for div in [2usize, 4] {
            let (ch, cw) = (h / div, w / div);
            if ch == 0 || cw == 0 {
                return Err(Error::invalid(format!(
                    "build_gce_dataset: image {} ({w}x{h}) has no 1/{div} views",
                    item.id
                )));
            }
            for _ in 0..per_scale {
                let rect = random_rect(&mut r, h, w, ch, cw);
                let view = image::crop(&item.image, rect.0, rect.1, ch, cw)?;
                let count =
                    item.density.crop(rect.1, rect.0, cw, ch)?.count() * (div * div) as f64;
                out.push((image::resize_bilinear(&view, input, input)?, classes.classify(count)));
            }
        }
    }
    Ok((out, classes))
}
