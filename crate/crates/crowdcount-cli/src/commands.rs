//! The five operator commands: corpus synthesis, staged training, inference,
//! evaluation, and the gradient self-check. Every command is deterministic
//! under the configured seed; nothing here reads the clock.

use std::fs;
use std::path::{Path, PathBuf};

use crowdcount::bundle;
use crowdcount::checks;
use crowdcount::context::{build_gce, build_lce, train_classifier, Classifier};
use crowdcount::error::Error;
use crowdcount::image;
use crowdcount::metrics::{self, EvalReport};
use crowdcount::pipeline::{
    build_discriminator, infer, train_end_to_end, AblationConfig, Generator, TrainOptions,
};
use crowdcount::synth::{build_dme_dataset, build_gce_dataset, build_local_dataset,
    generate_corpus, read_corpus, whole_scene_patches, CorpusItem, SceneSpec};
use crowdcount::tensor::Tensor;

use crate::config::{RunConfig, UsageError};

/// Command failures split by exit class: usage errors exit 1, data and
/// pipeline-contract errors exit 2.
#[derive(Debug)]
pub enum AppError {
    Usage(UsageError),
    Data(Error),
}

impl From<UsageError> for AppError {
    fn from(e: UsageError) -> Self {
        AppError::Usage(e)
    }
}

impl From<Error> for AppError {
    fn from(e: Error) -> Self {
        AppError::Data(e)
    }
}

pub type AppResult<T> = Result<T, AppError>;

// ---- artifact paths --------------------------------------------------------------

pub fn corpus_dir(cfg: &RunConfig) -> PathBuf {
    cfg.out.join("corpus")
}

pub fn gce_bundle(cfg: &RunConfig) -> PathBuf {
    cfg.out.join("gce.cpnw")
}

pub fn lce_bundle(cfg: &RunConfig) -> PathBuf {
    cfg.out.join("lce.cpnw")
}

pub fn full_bundle(cfg: &RunConfig, row: AblationConfig) -> PathBuf {
    cfg.out.join(format!("full{}.cpnw", row.index()))
}

pub fn losses_csv(cfg: &RunConfig) -> PathBuf {
    cfg.out.join("losses.csv")
}

pub fn eval_csv(cfg: &RunConfig) -> PathBuf {
    cfg.out.join("eval.csv")
}

fn write_losses(path: &Path, losses: &[f64]) -> Result<(), Error> {
    let mut s = String::from("epoch,loss\n");
    for (i, l) in losses.iter().enumerate() {
        s.push_str(&format!("{},{l:.6e}\n", i + 1));
    }
    fs::write(path, s).map_err(|e| Error::io(path.display().to_string(), e))
}

fn scalar_record(v: f32) -> Tensor<f32> {
    Tensor::from_vec(&[1], vec![v]).expect("static shape")
}

// ---- synth -----------------------------------------------------------------------

pub fn cmd_synth(cfg: &RunConfig, n: Option<usize>, force: bool) -> AppResult<()> {
    let n = n.unwrap_or(cfg.corpus_n);
    let dir = corpus_dir(cfg);
    if dir.exists() && dir.read_dir().map(|mut d| d.next().is_some()).unwrap_or(false) {
        if !force {
            return Err(Error::invalid(format!(
                "corpus directory {} already has contents; pass --force to regenerate",
                dir.display()
            ))
            .into());
        }
        fs::remove_dir_all(&dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
    }
    let template = SceneSpec {
        width: cfg.scene_width,
        height: cfg.scene_height,
        count_range: (cfg.count_min, cfg.count_max),
        cluster_count: cfg.clusters,
        cluster_spread: cfg.cluster_spread,
        seed: cfg.seed,
    };
    let items = generate_corpus(&dir, n, &template, cfg.sigma)?;
    let mut per_class = [0usize; 5];
    for item in &items {
        per_class[item.class] += 1;
    }
    println!("wrote {} scenes to {}", items.len(), dir.display());
    for (c, k) in per_class.iter().enumerate() {
        println!("class {c}: {k}");
    }
    Ok(())
}

// ---- bundle save/load ------------------------------------------------------------

fn save_classifier(path: &Path, prefix: &str, cls: &Classifier, meta: &[(&str, f32)]) -> Result<(), Error> {
    let metas: Vec<(String, Tensor<f32>)> =
        meta.iter().map(|(k, v)| (format!("meta.{k}"), scalar_record(*v))).collect();
    let mut records: Vec<(String, &Tensor<f32>)> = cls.net.named_params(prefix);
    records.extend(metas.iter().map(|(k, t)| (k.clone(), t)));
    bundle::save_records(path, &records)
}

fn meta_usize(map: &std::collections::HashMap<String, Tensor<f32>>, path: &Path, key: &str) -> Result<usize, Error> {
    let t = map.get(key).ok_or_else(|| {
        Error::format(path.display().to_string(), format!("missing record '{key}'"))
    })?;
    match t.data() {
        [v] if *v >= 0.0 && v.fract() == 0.0 => Ok(*v as usize),
        _ => Err(Error::format(
            path.display().to_string(),
            format!("record '{key}' is not a whole scalar"),
        )),
    }
}

fn reject_unknown(map: &std::collections::HashMap<String, Tensor<f32>>, path: &Path) -> Result<(), Error> {
    if let Some(k) = map.keys().find(|k| !k.starts_with("meta.")) {
        return Err(Error::format(
            path.display().to_string(),
            format!("unexpected record '{k}'"),
        ));
    }
    Ok(())
}

fn missing(stage: &'static str, what: &'static str, cmd: &str) -> Error {
    Error::MissingStage { stage, missing: what, hint: format!("run `crowdcount {cmd}` first") }
}

/// Load a trained, fully frozen GCE for forward-only use.
fn load_gce(cfg: &RunConfig, stage: &'static str) -> Result<Classifier, Error> {
    let path = gce_bundle(cfg);
    if !path.exists() {
        return Err(missing(stage, "gce", "train --stage gce"));
    }
    let mut map = bundle::load_record_map(&path)?;
    let input = meta_usize(&map, &path, "meta.input")?;
    let mut cls = build_gce(input, 0)?;
    cls.net.load_named("gce", &mut |k| map.remove(k))?;
    reject_unknown(&map, &path)?;
    cls.frozen_prefix = cls.net.num_layers();
    Ok(cls)
}

/// Load a trained, fully frozen LCE for forward-only use.
fn load_lce(cfg: &RunConfig, stage: &'static str) -> Result<Classifier, Error> {
    let path = lce_bundle(cfg);
    if !path.exists() {
        return Err(missing(stage, "lce", "train --stage lce"));
    }
    let mut map = bundle::load_record_map(&path)?;
    let patch = meta_usize(&map, &path, "meta.patch")?;
    let mut cls = build_lce(patch, 0)?;
    cls.net.load_named("lce", &mut |k| map.remove(k))?;
    reject_unknown(&map, &path)?;
    cls.frozen_prefix = cls.net.num_layers();
    Ok(cls)
}

/// Load the end-to-end generator for one ablation row, plus the local-window
/// geometry it was trained with.
fn load_full(
    cfg: &RunConfig,
    row: AblationConfig,
    stage: &'static str,
) -> Result<(Generator<f32>, usize, usize), Error> {
    let path = full_bundle(cfg, row);
    if !path.exists() {
        return Err(missing(stage, "full", "train --stage full"));
    }
    let mut map = bundle::load_record_map(&path)?;
    let flags = map.get("meta.flags").map(|t| t.data().to_vec()).ok_or_else(|| {
        Error::format(path.display().to_string(), "missing record 'meta.flags'")
    })?;
    let stored = match flags.as_slice() {
        [g, l, a] => AblationConfig {
            use_gce: *g != 0.0,
            use_lce: *l != 0.0,
            use_adversarial: *a != 0.0,
        },
        _ => {
            return Err(Error::format(
                path.display().to_string(),
                "record 'meta.flags' must hold three values",
            ))
        }
    };
    if stored != row {
        return Err(Error::format(
            path.display().to_string(),
            format!("bundle holds configuration {} but {} was requested", stored.index(), row.index()),
        ));
    }
    let window = meta_usize(&map, &path, "meta.lce_window")?;
    let stride = meta_usize(&map, &path, "meta.lce_stride")?;
    let mut gen = Generator::<f32>::new(row, 0)?;
    gen.load_named(&mut |k| map.remove(k))?;
    reject_unknown(&map, &path)?;
    Ok((gen, window, stride))
}

// ---- train -----------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Gce,
    Lce,
    Full,
}

fn load_corpus(cfg: &RunConfig, stage: &'static str) -> Result<Vec<CorpusItem>, Error> {
    let dir = corpus_dir(cfg);
    if !dir.join("manifest.csv").exists() {
        return Err(missing(stage, "corpus", "synth"));
    }
    read_corpus(&dir)
}

/// Training prefix of the corpus; scenes reserved for `eval` never reach a
/// training stage.
fn load_train_corpus(cfg: &RunConfig, stage: &'static str) -> Result<Vec<CorpusItem>, Error> {
    let mut items = load_corpus(cfg, stage)?;
    let cut = split_point(items.len(), cfg.eval_holdout);
    if cut == 0 {
        return Err(Error::invalid(
            "corpus is too small to reserve a held-out slice; synthesize at least 2 scenes",
        ));
    }
    items.truncate(cut);
    Ok(items)
}

pub fn cmd_train(cfg: &RunConfig, stage: Stage) -> AppResult<()> {
    fs::create_dir_all(&cfg.out).map_err(|e| Error::io(cfg.out.display().to_string(), e))?;
    match stage {
        Stage::Gce => {
            let items = load_train_corpus(cfg, "train --stage gce")?;
            let (data, _) =
                build_gce_dataset(&items, cfg.gce_input, cfg.gce_views_per_scale, cfg.seed)?;
            let mut cls = build_gce(cfg.gce_input, cfg.seed)?;
            let losses =
                train_classifier(&mut cls, &data, cfg.epochs_gce, cfg.lr_context, cfg.seed)?;
            save_classifier(
                &gce_bundle(cfg),
                "gce",
                &cls,
                &[("input", cfg.gce_input as f32)],
            )?;
            write_losses(&losses_csv(cfg), &losses)?;
            println!(
                "gce: {} samples, {} epochs, loss {:.4} -> {:.4}, wrote {}",
                data.len(),
                losses.len(),
                losses.first().unwrap_or(&f64::NAN),
                losses.last().unwrap_or(&f64::NAN),
                gce_bundle(cfg).display()
            );
        }
        Stage::Lce => {
            let items = load_train_corpus(cfg, "train --stage lce")?;
            let (patches, bounds) =
                build_local_dataset(&items, cfg.lce_patch, cfg.local_per_image, cfg.seed)?;
            let data: Vec<(Tensor<f32>, usize)> =
                patches.into_iter().map(|p| (p.image, p.label)).collect();
            let mut cls = build_lce(cfg.lce_patch, cfg.seed)?;
            let losses =
                train_classifier(&mut cls, &data, cfg.epochs_lce, cfg.lr_context, cfg.seed)?;
            let path = lce_bundle(cfg);
            let b = bounds.boundaries();
            let btensor = Tensor::from_vec(&[4], b.to_vec())?;
            let meta_patch = scalar_record(cfg.lce_patch as f32);
            let mut records: Vec<(String, &Tensor<f32>)> = cls.net.named_params("lce");
            records.push(("meta.patch".into(), &meta_patch));
            records.push(("meta.boundaries".into(), &btensor));
            bundle::save_records(&path, &records)?;
            write_losses(&losses_csv(cfg), &losses)?;
            println!(
                "lce: {} patches, {} epochs, loss {:.4} -> {:.4}, wrote {}",
                data.len(),
                losses.len(),
                losses.first().unwrap_or(&f64::NAN),
                losses.last().unwrap_or(&f64::NAN),
                path.display()
            );
        }
        Stage::Full => {
            let row = cfg.ablation()?;
            let items = load_train_corpus(cfg, "train --stage full")?;
            let gce = if row.use_gce { Some(load_gce(cfg, "train --stage full")?) } else { None };
            let lce = if row.use_lce { Some(load_lce(cfg, "train --stage full")?) } else { None };
            let mut patches = build_dme_dataset(&items, cfg.dme_per_kind, cfg.seed)?;
            patches.extend(whole_scene_patches(&items, cfg.whole_per_item));
            let mut gen = Generator::<f32>::new(row, cfg.seed)?;
            let mut disc = row.use_adversarial.then(|| build_discriminator::<f32>(cfg.seed));
            let opts = TrainOptions {
                epochs: cfg.epochs_full,
                lr: cfg.lr_full,
                momentum: cfg.momentum,
                lambda_a: cfg.lambda_a,
                lce_window: cfg.lce_patch,
                lce_stride: cfg.lce_stride,
                squared_loss: cfg.squared_pixel_loss,
                seed: cfg.seed,
            };
            let stats =
                train_end_to_end(&patches, gce.as_ref(), lce.as_ref(), &mut gen, disc.as_mut(), &opts)?;

            let path = full_bundle(cfg, row);
            let meta_flags = Tensor::from_vec(
                &[3],
                vec![
                    row.use_gce as u8 as f32,
                    row.use_lce as u8 as f32,
                    row.use_adversarial as u8 as f32,
                ],
            )?;
            let meta_window = scalar_record(cfg.lce_patch as f32);
            let meta_stride = scalar_record(cfg.lce_stride as f32);
            let mut records: Vec<(String, &Tensor<f32>)> = gen.named_params();
            records.push(("meta.flags".into(), &meta_flags));
            records.push(("meta.lce_window".into(), &meta_window));
            records.push(("meta.lce_stride".into(), &meta_stride));
            bundle::save_records(&path, &records)?;
            write_losses(&losses_csv(cfg), &stats.epoch_total)?;
            println!(
                "full (config{}): {} patches, {} epochs, L_T {:.5} -> {:.5}, wrote {}",
                row.index(),
                patches.len(),
                stats.epoch_total.len(),
                stats.epoch_total.first().unwrap_or(&f64::NAN),
                stats.epoch_total.last().unwrap_or(&f64::NAN),
                path.display()
            );
        }
    }
    Ok(())
}

// ---- infer -----------------------------------------------------------------------

pub fn cmd_infer(cfg: &RunConfig, image_path: &Path) -> AppResult<()> {
    let row = cfg.ablation()?;
    let img = image::read_pgm(image_path)?;
    let (h, w) = image::image_dims(&img)?;
    if h % 4 != 0 || w % 4 != 0 {
        return Err(Error::invalid(format!(
            "input image must have dimensions divisible by 4 (two 2x2 pooling stages), got {w}x{h}"
        ))
        .into());
    }
    let (gen, window, stride) = load_full(cfg, row, "infer")?;
    let gce = if row.use_gce { Some(load_gce(cfg, "infer")?) } else { None };
    let lce = if row.use_lce { Some(load_lce(cfg, "infer")?) } else { None };
    let (map, count) = infer(&img, gce.as_ref(), lce.as_ref(), &gen, window, stride)?;

    fs::create_dir_all(&cfg.out).map_err(|e| Error::io(cfg.out.display().to_string(), e))?;
    let stem = image_path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "density".into());
    let cpdm = cfg.out.join(format!("{stem}.cpdm"));
    let pgm = cfg.out.join(format!("{stem}_density.pgm"));
    map.save(&cpdm)?;
    image::write_pgm_scaled(&pgm, &map.to_tensor())?;
    println!("count={count:.2}");
    println!("wrote {} and {}", cpdm.display(), pgm.display());
    Ok(())
}

// ---- eval ------------------------------------------------------------------------

/// Index splitting the corpus into a training prefix and held-out suffix:
/// the last `ceil(n * holdout)` scenes (at least one) are held out.
fn split_point(n: usize, holdout: f64) -> usize {
    let k = ((n as f64 * holdout).ceil() as usize).clamp(1, n);
    n - k
}

/// Training slice of the corpus (everything before the held-out suffix).
pub fn train_slice(items: &[CorpusItem], holdout: f64) -> &[CorpusItem] {
    &items[..split_point(items.len(), holdout)]
}

/// Held-out slice of the corpus, used only by `eval`.
pub fn heldout(items: &[CorpusItem], holdout: f64) -> &[CorpusItem] {
    &items[split_point(items.len(), holdout)..]
}

/// Evaluate one trained row on held-out scenes: counting error over scenes,
/// plus mean density-map quality against ground truth (quarter-resolution
/// outputs are spread back to full resolution first, preserving mass).
fn eval_row(cfg: &RunConfig, row: AblationConfig, held: &[CorpusItem]) -> Result<EvalReport, Error> {
    let (gen, window, stride) = load_full(cfg, row, "eval")?;
    let gce = if row.use_gce { Some(load_gce(cfg, "eval")?) } else { None };
    let lce = if row.use_lce { Some(load_lce(cfg, "eval")?) } else { None };

    let mut pred_counts = Vec::with_capacity(held.len());
    let mut gt_counts = Vec::with_capacity(held.len());
    let (mut psnr_sum, mut ssim_sum) = (0.0f64, 0.0f64);
    for item in held {
        let (map, count) = infer(&item.image, gce.as_ref(), lce.as_ref(), &gen, window, stride)?;
        let full = if row.quarter_output() { map.upsample_share(4)? } else { map };
        pred_counts.push(count);
        gt_counts.push(item.scene.count() as f64);
        psnr_sum += metrics::psnr(&full, &item.density)?;
        ssim_sum += metrics::ssim(&full, &item.density)?;
    }
    let (mae, mse) = metrics::mae_mse(&pred_counts, &gt_counts)?;
    Ok(EvalReport {
        n: held.len(),
        mae,
        mse,
        mean_psnr: psnr_sum / held.len() as f64,
        mean_ssim: ssim_sum / held.len() as f64,
    })
}

pub fn cmd_eval(cfg: &RunConfig, all_rows: bool) -> AppResult<()> {
    let items = load_corpus(cfg, "eval")?;
    let held = heldout(&items, cfg.eval_holdout);
    let rows: Vec<AblationConfig> =
        if all_rows { AblationConfig::ALL.to_vec() } else { vec![cfg.ablation()?] };

    let mut csv = format!("config,{}\n", EvalReport::CSV_HEADER);
    let mut first_err: Option<Error> = None;
    for row in rows {
        match eval_row(cfg, row, held) {
            Ok(report) => {
                println!(
                    "config{}: n={} mae={:.3} mse={:.3} psnr={:.2} ssim={:.4}",
                    row.index(),
                    report.n,
                    report.mae,
                    report.mse,
                    report.mean_psnr,
                    report.mean_ssim
                );
                csv.push_str(&format!("config{},{}\n", row.index(), report.csv_row()));
            }
            Err(e) => {
                eprintln!("config{}: {e}", row.index());
                first_err.get_or_insert(e);
            }
        }
    }
    fs::create_dir_all(&cfg.out).map_err(|e| Error::io(cfg.out.display().to_string(), e))?;
    let path = eval_csv(cfg);
    fs::write(&path, csv).map_err(|e| Error::io(path.display().to_string(), e))?;
    println!("wrote {}", path.display());
    match first_err {
        None => Ok(()),
        Some(e) => Err(e.into()),
    }
}

// ---- gradcheck -------------------------------------------------------------------

pub fn cmd_gradcheck(cfg: &RunConfig) -> AppResult<()> {
    let all = checks::all_checks(cfg.seed)?;
    let mut failed = 0usize;
    for c in &all {
        let verdict = if c.passed() { "PASS" } else { "FAIL" };
        println!(
            "{verdict}  {:<24} probes {:>5}  max rel err {:.3e}  (tol {:.0e})",
            c.name, c.probes, c.max_rel_err, c.tol
        );
        if !c.passed() {
            failed += 1;
        }
    }
    if failed > 0 {
        return Err(Error::Contract(format!("{failed} gradient check(s) failed")).into());
    }
    println!("all {} checks passed", all.len());
    Ok(())
}
