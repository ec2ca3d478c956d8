//! Run configuration: a UTF-8 `key = value` file with `#` comments, the same
//! format for every command. Command-line flags override file values.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};

use crowdcount::pipeline::AblationConfig;

/// A malformed invocation (bad flag, bad config file, contradictory values);
/// exits with code 1 as opposed to data/contract failures, which exit with 2.
#[derive(Debug)]
pub struct UsageError(pub String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

impl std::error::Error for UsageError {}

fn usage(msg: impl Into<String>) -> UsageError {
    UsageError(msg.into())
}

/// Everything a run needs: the seed, scene recipe, class count (fixed at 5),
/// ground-truth sigma, loss weight, learning rates, stage epochs, ablation
/// flags, and paths.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub out: PathBuf,
    // scene recipe
    pub scene_width: usize,
    pub scene_height: usize,
    pub count_min: usize,
    pub count_max: usize,
    pub clusters: usize,
    pub cluster_spread: f32,
    pub corpus_n: usize,
    // density ground truth
    pub classes: usize,
    pub sigma: f64,
    // training
    pub lambda_a: f32,
    pub lr_context: f32,
    pub lr_full: f32,
    pub momentum: f32,
    pub epochs_gce: usize,
    pub epochs_lce: usize,
    pub epochs_full: usize,
    pub gce_input: usize,
    /// Random half- and quarter-size views per scale added to the GCE
    /// training set (the GCE must understand block-size views at inference).
    pub gce_views_per_scale: usize,
    pub lce_patch: usize,
    pub lce_stride: usize,
    pub dme_per_kind: usize,
    /// Whole-scene pairs added per image to the end-to-end training set so
    /// the generator also sees inference-size inputs, not only crops.
    pub whole_per_item: usize,
    pub local_per_image: usize,
    /// Train the end-to-end pixel term with the squared loss instead of the
    /// absolute default.
    pub squared_pixel_loss: bool,
    // ablation flags
    pub use_gce: bool,
    pub use_lce: bool,
    pub use_adversarial: bool,
    // evaluation
    pub eval_holdout: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 7,
            out: PathBuf::from("runs"),
            scene_width: 48,
            scene_height: 48,
            count_min: 4,
            count_max: 60,
            clusters: 3,
            cluster_spread: 6.0,
            corpus_n: 200,
            classes: 5,
            sigma: 2.0,
            lambda_a: 1e-3,
            lr_context: 1e-3,
            lr_full: 1e-4,
            momentum: 0.9,
            epochs_gce: 10,
            epochs_lce: 10,
            epochs_full: 2,
            gce_input: 32,
            gce_views_per_scale: 2,
            lce_patch: 16,
            lce_stride: 8,
            dme_per_kind: 6,
            whole_per_item: 2,
            local_per_image: 30,
            squared_pixel_loss: false,
            use_gce: true,
            use_lce: true,
            use_adversarial: false,
            eval_holdout: 0.2,
        }
    }
}

fn parse_as<T: std::str::FromStr>(key: &str, v: &str) -> Result<T, UsageError> {
    v.parse().map_err(|_| usage(format!("config: cannot parse '{v}' for key '{key}'")))
}

fn parse_bool(key: &str, v: &str) -> Result<bool, UsageError> {
    match v {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(usage(format!("config: key '{key}' wants true/false, got '{v}'"))),
    }
}

impl RunConfig {
    /// Parse a `key = value` file (UTF-8, `#` comments) over the defaults.
    pub fn from_file(path: &Path) -> Result<Self, UsageError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| usage(format!("config: cannot read {}: {e}", path.display())))?;
        Self::from_str_pairs(&text, &path.display().to_string())
    }

    fn from_str_pairs(text: &str, origin: &str) -> Result<Self, UsageError> {
        let mut pairs: BTreeMap<String, String> = BTreeMap::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| usage(format!("{origin}:{}: expected key = value", lineno + 1)))?;
            let (k, v) = (k.trim().to_string(), v.trim().to_string());
            if pairs.insert(k.clone(), v).is_some() {
                return Err(usage(format!("{origin}:{}: duplicate key '{k}'", lineno + 1)));
            }
        }

        let mut c = RunConfig::default();
        for (k, v) in &pairs {
            match k.as_str() {
                "seed" => c.seed = parse_as(k, v)?,
                "out" => c.out = PathBuf::from(v),
                "scene_width" => c.scene_width = parse_as(k, v)?,
                "scene_height" => c.scene_height = parse_as(k, v)?,
                "count_min" => c.count_min = parse_as(k, v)?,
                "count_max" => c.count_max = parse_as(k, v)?,
                "clusters" => c.clusters = parse_as(k, v)?,
                "cluster_spread" => c.cluster_spread = parse_as(k, v)?,
                "corpus_n" => c.corpus_n = parse_as(k, v)?,
                "classes" => c.classes = parse_as(k, v)?,
                "sigma" => c.sigma = parse_as(k, v)?,
                "lambda_a" => c.lambda_a = parse_as(k, v)?,
                "lr_context" => c.lr_context = parse_as(k, v)?,
                "lr_full" => c.lr_full = parse_as(k, v)?,
                "momentum" => c.momentum = parse_as(k, v)?,
                "epochs_gce" => c.epochs_gce = parse_as(k, v)?,
                "epochs_lce" => c.epochs_lce = parse_as(k, v)?,
                "epochs_full" => c.epochs_full = parse_as(k, v)?,
                "gce_input" => c.gce_input = parse_as(k, v)?,
                "gce_views_per_scale" => c.gce_views_per_scale = parse_as(k, v)?,
                "lce_patch" => c.lce_patch = parse_as(k, v)?,
                "lce_stride" => c.lce_stride = parse_as(k, v)?,
                "dme_per_kind" => c.dme_per_kind = parse_as(k, v)?,
                "whole_per_item" => c.whole_per_item = parse_as(k, v)?,
                "local_per_image" => c.local_per_image = parse_as(k, v)?,
                "squared_pixel_loss" => c.squared_pixel_loss = parse_bool(k, v)?,
                "use_gce" => c.use_gce = parse_bool(k, v)?,
                "use_lce" => c.use_lce = parse_bool(k, v)?,
                "use_adversarial" => c.use_adversarial = parse_bool(k, v)?,
                "eval_holdout" => c.eval_holdout = parse_as(k, v)?,
                _ => return Err(usage(format!("{origin}: unknown config key '{k}'"))),
            }
        }
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<(), UsageError> {
        if self.classes != 5 {
            return Err(usage(format!(
                "config: the density pipeline is built around exactly 5 classes, got {}",
                self.classes
            )));
        }
        if self.scene_width == 0 || self.scene_width % 8 != 0 || self.scene_height % 8 != 0 {
            return Err(usage(format!(
                "config: scene dims must be positive multiples of 8 (half-size crops must stay \
                 divisible by 4), got {}x{}",
                self.scene_width, self.scene_height
            )));
        }
        if self.count_min > self.count_max {
            return Err(usage(format!(
                "config: count_min {} > count_max {}",
                self.count_min, self.count_max
            )));
        }
        if !(self.cluster_spread > 0.0) {
            return Err(usage("config: cluster_spread must be > 0"));
        }
        if self.corpus_n == 0 {
            return Err(usage("config: corpus_n must be >= 1"));
        }
        if !(self.sigma > 0.0) {
            return Err(usage("config: sigma must be > 0"));
        }
        if self.lambda_a < 0.0 {
            return Err(usage("config: lambda_a must be >= 0"));
        }
        if !(self.lr_context > 0.0) || !(self.lr_full > 0.0) {
            return Err(usage("config: learning rates must be > 0"));
        }
        if !(0.0..1.0).contains(&(self.momentum as f64)) {
            return Err(usage("config: momentum must be in [0, 1)"));
        }
        if self.epochs_gce == 0 || self.epochs_lce == 0 || self.epochs_full == 0 {
            return Err(usage("config: every stage needs at least one epoch"));
        }
        if self.gce_input == 0 || self.gce_input % 16 != 0 {
            return Err(usage(format!(
                "config: gce_input must be a positive multiple of 16, got {}",
                self.gce_input
            )));
        }
        if self.lce_patch == 0 || self.lce_patch % 4 != 0 {
            return Err(usage(format!(
                "config: lce_patch must be a positive multiple of 4, got {}",
                self.lce_patch
            )));
        }
        if self.lce_patch > self.scene_width.min(self.scene_height) / 2 {
            return Err(usage(format!(
                "config: lce_patch {} exceeds the half-size training crops ({}x{})",
                self.lce_patch,
                self.scene_width / 2,
                self.scene_height / 2
            )));
        }
        if self.lce_stride == 0 || self.lce_stride > self.lce_patch {
            return Err(usage(format!(
                "config: lce_stride must be in 1..={}, got {}",
                self.lce_patch, self.lce_stride
            )));
        }
        if self.dme_per_kind == 0 || self.local_per_image == 0 {
            return Err(usage("config: per-image patch counts must be >= 1"));
        }
        if !(self.eval_holdout > 0.0 && self.eval_holdout < 1.0) {
            return Err(usage("config: eval_holdout must be strictly between 0 and 1"));
        }
        Ok(())
    }

    /// The ablation row selected by the flags.
    pub fn ablation(&self) -> Result<AblationConfig, UsageError> {
        let a = AblationConfig {
            use_gce: self.use_gce,
            use_lce: self.use_lce,
            use_adversarial: self.use_adversarial,
        };
        a.validate().map_err(|e| usage(format!("config: {e}")))?;
        Ok(a)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate() {
        RunConfig::default().validate().unwrap();
    }

    #[test]
    fn file_overrides_and_comments_parse() {
        let c = RunConfig::from_str_pairs(
            "# comment\nseed = 11\n  corpus_n=40 # trailing\n\nuse_adversarial = true\n",
            "test",
        )
        .unwrap();
        assert_eq!(c.seed, 11);
        assert_eq!(c.corpus_n, 40);
        assert!(c.use_adversarial);
    }

    #[test]
    fn wrong_class_count_is_rejected_at_parse() {
        let err = RunConfig::from_str_pairs("classes = 4\n", "test").unwrap_err();
        assert!(err.0.contains("5 classes"), "{err}");
    }

    #[test]
    fn unknown_keys_and_bad_values_are_usage_errors() {
        assert!(RunConfig::from_str_pairs("sede = 7\n", "test").is_err());
        assert!(RunConfig::from_str_pairs("seed = banana\n", "test").is_err());
        assert!(RunConfig::from_str_pairs("seed\n", "test").is_err());
        assert!(RunConfig::from_str_pairs("seed = 1\nseed = 2\n", "test").is_err());
    }

    #[test]
    fn contradictory_ablation_flags_are_rejected() {
        let c = RunConfig::from_str_pairs("use_gce = false\nuse_lce = true\n", "test").unwrap();
        assert!(c.ablation().is_err());
    }
}
