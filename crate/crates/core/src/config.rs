//! Run configuration: a flat `section.key = value` text file.
//!
//! Parsing starts from a profile ([`RunConfig::desk`] or [`RunConfig::paper`])
//! and applies every assignment in the file on top of it. Unknown keys,
//! duplicate keys and unparsable values are all reported together. Lines
//! beginning with `#` are comments.
//!
//! [`RunConfig::to_text`] emits every key in a fixed order; the SHA-256 of
//! that canonical text is the config digest stored in checkpoints.
//!
//! | key | meaning |
//! |---|---|
//! | `seed` | root seed; all other streams are derived from it |
//! | `output.dir` | run directory; empty means `$BYOL_OUTPUT_ROOT/run-<digest>` |
//! | `model.preset` | `tiny-cnn` or `resnet18` |
//! | `model.norm` | `batch`, `layer`, `group[:G]` or `none` |
//! | `model.weight_standardize` | standardize conv weights |
//! | `model.placement` | `everywhere`, `encoder-only`, `none` |
//! | `model.dropout` | dropout between encoder stages |
//! | `model.width` | tiny-cnn representation width |
//! | `model.tau` | EMA decay |
//! | `loss.variant` | `byol`, `ccsl`, `ccsl-with-repulsion`, `cssl` |
//! | `loss.lambda`, `loss.theta_p`, `loss.theta_n` | refinement weight and thresholds |
//! | `loss.sigmoid_temperature`, `loss.nt_xent_temperature` | temperatures |
//! | `optim.lr`, `optim.momentum` | SGD settings |
//! | `train.batch_size`, `train.epochs`, `train.max_steps` | budget; `max_steps = 0` means epochs only |
//! | `train.checkpoint_every`, `train.log_every` | cadences in steps (0 disables periodic checkpoints) |
//! | `train.deterministic` | zero the wall-clock column so metrics are reproducible |
//! | `train.strict_collapse` | abort when the collapse alarm fires |
//! | `train.collapse_floor`, `train.collapse_patience` | alarm: metric below floor x initial for patience steps |
//! | `train.freeze_stats` | do not update batch-norm running statistics |
//! | `train.warm_start` | checkpoint to initialize from (empty for none) |
//! | `data.source` | `synthetic` or `stl10` |
//! | `data.path` | STL10 directory |
//! | `data.classes`, `data.per_class`, `data.test_per_class`, `data.image_size` | synthetic dataset |
//! | `data.crop_size` | augmented view size |
//! | `data.mean`, `data.std` | per-channel normalization, `auto` to compute from data |
//! | `augment.*` | view pipelines, see [`AugmentConfig`] |
//! | `eval.*` | linear probe settings |

use std::fmt::Display;
use std::path::PathBuf;
use std::str::FromStr;

use thiserror::Error;

use crate::augment::AugmentConfig;
use crate::loss::LossConfig;
use crate::model::checkpoint::{hex, sha256};
use crate::model::{EncoderConfig, NormPlacement, Preset, DEFAULT_TAU};
use crate::nn::NormKind;

pub const OUTPUT_ROOT_ENV: &str = "BYOL_OUTPUT_ROOT";

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ConfigError {
    #[error("unknown config keys: {}", .0.join(", "))]
    UnknownKeys(Vec<String>),
    #[error("{}", .0.join("; "))]
    Invalid(Vec<String>),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Profile {
    Desk,
    Paper,
}

impl FromStr for Profile {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "desk" => Ok(Profile::Desk),
            "paper" => Ok(Profile::Paper),
            other => Err(format!("unknown profile `{other}` (desk, paper)")),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DataSource {
    Synthetic,
    Stl10,
}

impl Display for DataSource {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            DataSource::Synthetic => "synthetic",
            DataSource::Stl10 => "stl10",
        })
    }
}

impl FromStr for DataSource {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "synthetic" => Ok(DataSource::Synthetic),
            "stl10" => Ok(DataSource::Stl10),
            other => Err(format!("unknown data source `{other}` (synthetic, stl10)")),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct OptimConfig {
    pub lr: f64,
    pub momentum: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub max_steps: usize,
    pub checkpoint_every: usize,
    pub log_every: usize,
    pub deterministic: bool,
    pub strict_collapse: bool,
    pub collapse_floor: f64,
    pub collapse_patience: usize,
    pub freeze_stats: bool,
    pub warm_start: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DataConfig {
    pub source: DataSource,
    pub path: Option<PathBuf>,
    pub classes: usize,
    pub per_class: usize,
    pub test_per_class: usize,
    pub image_size: usize,
    pub crop_size: usize,
    pub mean: Option<[f64; 3]>,
    pub std: Option<[f64; 3]>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalConfig {
    pub lr: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    /// Standardize probe inputs with train-set feature statistics.
    pub standardize_features: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            lr: 0.008,
            momentum: 0.9,
            batch_size: 64,
            max_epochs: 100,
            patience: 10,
            standardize_features: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub output_dir: Option<PathBuf>,
    pub model: EncoderConfig,
    pub tau: f64,
    pub loss: LossConfig,
    pub optim: OptimConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
    pub augment: AugmentConfig,
    pub eval: EvalConfig,
}

impl RunConfig {
    /// Desk-scale defaults: tiny-cnn on synthetic 32x32 data, batch 64.
    pub fn desk() -> Self {
        Self {
            seed: 0,
            output_dir: None,
            model: EncoderConfig::default(),
            tau: DEFAULT_TAU,
            loss: LossConfig::default(),
            optim: OptimConfig { lr: 0.008, momentum: 0.9 },
            train: TrainConfig {
                batch_size: 64,
                epochs: 100,
                max_steps: 2000,
                checkpoint_every: 500,
                log_every: 1,
                deterministic: false,
                strict_collapse: false,
                collapse_floor: 1e-3,
                collapse_patience: 100,
                freeze_stats: false,
                warm_start: None,
            },
            data: DataConfig {
                source: DataSource::Synthetic,
                path: None,
                classes: 4,
                per_class: 500,
                test_per_class: 200,
                image_size: 32,
                crop_size: 32,
                mean: None,
                std: None,
            },
            augment: AugmentConfig::default(),
            eval: EvalConfig::default(),
        }
    }

    /// Settings of the STL10 experiments: ResNet-18, batch 512, SGD with
    /// learning rate 0.008 and momentum 0.9, dropout 0.1, 96x96 views.
    pub fn paper() -> Self {
        let mut c = Self::desk();
        c.model = EncoderConfig {
            preset: Preset::ResNet18,
            dropout: 0.1,
            width: 512,
            ..EncoderConfig::default()
        };
        c.train.batch_size = 512;
        c.train.max_steps = 0;
        c.train.checkpoint_every = 1000;
        c.data.source = DataSource::Stl10;
        c.data.image_size = 96;
        c.data.crop_size = 96;
        c.eval.batch_size = 512;
        c
    }

    pub fn profile(profile: Profile) -> Self {
        match profile {
            Profile::Desk => Self::desk(),
            Profile::Paper => Self::paper(),
        }
    }

    /// Applies the assignments in `text` on top of `self`.
    pub fn parse_onto(mut self, text: &str) -> Result<Self, ConfigError> {
        let mut unknown = Vec::new();
        let mut invalid = Vec::new();
        let mut seen = std::collections::HashSet::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                invalid.push(format!("line {}: expected `key = value`", lineno + 1));
                continue;
            };
            let (key, value) = (key.trim(), value.trim());
            if !seen.insert(key.to_string()) {
                invalid.push(format!("line {}: duplicate key `{key}`", lineno + 1));
                continue;
            }
            match self.set(key, value) {
                Ok(true) => {}
                Ok(false) => unknown.push(key.to_string()),
                Err(e) => invalid.push(format!("line {}: {key}: {e}", lineno + 1)),
            }
        }
        if !unknown.is_empty() {
            return Err(ConfigError::UnknownKeys(unknown));
        }
        if !invalid.is_empty() {
            return Err(ConfigError::Invalid(invalid));
        }
        self.validate()?;
        Ok(self)
    }

    pub fn parse(text: &str, profile: Profile) -> Result<Self, ConfigError> {
        Self::profile(profile).parse_onto(text)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let mut errors = Vec::new();
        if let Err(e) = self.model.validate() {
            errors.push(e.to_string());
        }
        if let Err(e) = self.loss.validate() {
            errors.push(e.to_string());
        }
        if let Err(e) = self.augment.validate() {
            errors.push(e);
        }
        if !(0.0..=1.0).contains(&self.tau) {
            errors.push(format!("model.tau must be in [0, 1], got {}", self.tau));
        }
        if self.optim.lr < 0.0 || !(0.0..1.0).contains(&self.optim.momentum) {
            errors.push("optim.lr must be >= 0 and optim.momentum in [0, 1)".into());
        }
        if self.train.batch_size < 2 {
            errors.push("train.batch_size must be at least 2".into());
        }
        if self.train.log_every == 0 {
            errors.push("train.log_every must be at least 1".into());
        }
        if self.data.classes == 0 || self.data.per_class == 0 {
            errors.push("data.classes and data.per_class must be positive".into());
        }
        if self.data.crop_size == 0 || self.data.image_size == 0 {
            errors.push("data.image_size and data.crop_size must be positive".into());
        }
        if self.data.source == DataSource::Stl10 && self.data.path.is_none() {
            errors.push("data.path is required for data.source = stl10".into());
        }
        if self.eval.batch_size == 0 || self.eval.max_epochs == 0 {
            errors.push("eval.batch_size and eval.max_epochs must be positive".into());
        }
        if errors.is_empty() {
            Ok(())
        } else {
            Err(ConfigError::Invalid(errors))
        }
    }

    /// Canonical text: every key, fixed order, one per line.
    pub fn to_text(&self) -> String {
        self.entries()
            .into_iter()
            .map(|(k, v)| format!("{k} = {v}\n"))
            .collect()
    }

    pub fn digest(&self) -> [u8; 32] {
        sha256(&self.to_text())
    }

    pub fn digest_hex(&self) -> String {
        hex(&self.digest())
    }

    /// Run directory: `output.dir`, or `$BYOL_OUTPUT_ROOT/run-<digest>`
    /// (root defaults to `runs`).
    pub fn resolved_output_dir(&self) -> PathBuf {
        match &self.output_dir {
            Some(dir) => dir.clone(),
            None => {
                let root = std::env::var_os(OUTPUT_ROOT_ENV)
                    .map(PathBuf::from)
                    .unwrap_or_else(|| PathBuf::from("runs"));
                root.join(format!("run-{}", &self.digest_hex()[..12]))
            }
        }
    }

    /// Entries under `model.`; two configs with equal model sections build
    /// structurally identical networks.
    pub fn model_entries(&self) -> Vec<(&'static str, String)> {
        self.entries()
            .into_iter()
            .filter(|(k, _)| k.starts_with("model.") && *k != "model.tau")
            .collect()
    }

    fn entries(&self) -> Vec<(&'static str, String)> {
        let path = |p: &Option<PathBuf>| p.as_ref().map(|p| p.display().to_string()).unwrap_or_default();
        let triple = |t: &Option<[f64; 3]>| match t {
            Some([a, b, c]) => format!("{a},{b},{c}"),
            None => "auto".into(),
        };
        let m = &self.model;
        let l = &self.loss;
        let t = &self.train;
        let d = &self.data;
        let a = &self.augment;
        let e = &self.eval;
        vec![
            ("seed", self.seed.to_string()),
            ("output.dir", path(&self.output_dir)),
            ("model.preset", m.preset.to_string()),
            ("model.norm", m.norm.to_string()),
            ("model.weight_standardize", m.weight_standardize.to_string()),
            ("model.placement", m.placement.to_string()),
            ("model.dropout", m.dropout.to_string()),
            ("model.width", m.width.to_string()),
            ("model.tau", self.tau.to_string()),
            ("loss.variant", l.variant.to_string()),
            ("loss.lambda", l.lambda.to_string()),
            ("loss.theta_p", l.theta_p.to_string()),
            ("loss.theta_n", l.theta_n.to_string()),
            ("loss.sigmoid_temperature", l.sigmoid_temperature.to_string()),
            ("loss.nt_xent_temperature", l.nt_xent_temperature.to_string()),
            ("optim.lr", self.optim.lr.to_string()),
            ("optim.momentum", self.optim.momentum.to_string()),
            ("train.batch_size", t.batch_size.to_string()),
            ("train.epochs", t.epochs.to_string()),
            ("train.max_steps", t.max_steps.to_string()),
            ("train.checkpoint_every", t.checkpoint_every.to_string()),
            ("train.log_every", t.log_every.to_string()),
            ("train.deterministic", t.deterministic.to_string()),
            ("train.strict_collapse", t.strict_collapse.to_string()),
            ("train.collapse_floor", t.collapse_floor.to_string()),
            ("train.collapse_patience", t.collapse_patience.to_string()),
            ("train.freeze_stats", t.freeze_stats.to_string()),
            ("train.warm_start", path(&t.warm_start)),
            ("data.source", d.source.to_string()),
            ("data.path", path(&d.path)),
            ("data.classes", d.classes.to_string()),
            ("data.per_class", d.per_class.to_string()),
            ("data.test_per_class", d.test_per_class.to_string()),
            ("data.image_size", d.image_size.to_string()),
            ("data.crop_size", d.crop_size.to_string()),
            ("data.mean", triple(&d.mean)),
            ("data.std", triple(&d.std)),
            ("augment.crop_scale_min", a.crop_scale.0.to_string()),
            ("augment.crop_scale_max", a.crop_scale.1.to_string()),
            ("augment.flip_p", a.flip_p.to_string()),
            ("augment.jitter_p", a.jitter_p.to_string()),
            ("augment.brightness", a.brightness.to_string()),
            ("augment.contrast", a.contrast.to_string()),
            ("augment.saturation", a.saturation.to_string()),
            ("augment.grayscale_p", a.grayscale_p.to_string()),
            ("augment.blur_kernel", a.blur_kernel.to_string()),
            ("augment.blur_sigma_min", a.blur_sigma.0.to_string()),
            ("augment.blur_sigma_max", a.blur_sigma.1.to_string()),
            ("augment.blur_p", a.blur_p.0.to_string()),
            ("augment.blur_p_prime", a.blur_p.1.to_string()),
            ("eval.lr", e.lr.to_string()),
            ("eval.momentum", e.momentum.to_string()),
            ("eval.batch_size", e.batch_size.to_string()),
            ("eval.max_epochs", e.max_epochs.to_string()),
            ("eval.patience", e.patience.to_string()),
            ("eval.standardize_features", e.standardize_features.to_string()),
        ]
    }

    /// Returns `Ok(false)` for an unknown key.
    fn set(&mut self, key: &str, v: &str) -> Result<bool, String> {
        fn p<T: FromStr>(v: &str) -> Result<T, String>
        where
            T::Err: Display,
        {
            v.parse::<T>().map_err(|e| format!("`{v}`: {e}"))
        }
        let path = |v: &str| (!v.is_empty()).then(|| PathBuf::from(v));
        let triple = |v: &str| -> Result<Option<[f64; 3]>, String> {
            if v == "auto" {
                return Ok(None);
            }
            let parts: Vec<f64> = v.split(',').map(|s| p::<f64>(s.trim())).collect::<Result<_, _>>()?;
            <[f64; 3]>::try_from(parts)
                .map(Some)
                .map_err(|_| format!("`{v}`: expected three comma-separated numbers or `auto`"))
        };
        let m = &mut self.model;
        let l = &mut self.loss;
        let t = &mut self.train;
        let d = &mut self.data;
        let a = &mut self.augment;
        let e = &mut self.eval;
        match key {
            "seed" => self.seed = p(v)?,
            "output.dir" => self.output_dir = path(v),
            "model.preset" => m.preset = p(v)?,
            "model.norm" => m.norm = p::<NormKind>(v)?,
            "model.weight_standardize" => m.weight_standardize = p(v)?,
            "model.placement" => m.placement = p::<NormPlacement>(v)?,
            "model.dropout" => m.dropout = p(v)?,
            "model.width" => m.width = p(v)?,
            "model.tau" => self.tau = p(v)?,
            "loss.variant" => l.variant = p(v)?,
            "loss.lambda" => l.lambda = p(v)?,
            "loss.theta_p" => l.theta_p = p(v)?,
            "loss.theta_n" => l.theta_n = p(v)?,
            "loss.sigmoid_temperature" => l.sigmoid_temperature = p(v)?,
            "loss.nt_xent_temperature" => l.nt_xent_temperature = p(v)?,
            "optim.lr" => self.optim.lr = p(v)?,
            "optim.momentum" => self.optim.momentum = p(v)?,
            "train.batch_size" => t.batch_size = p(v)?,
            "train.epochs" => t.epochs = p(v)?,
            "train.max_steps" => t.max_steps = p(v)?,
            "train.checkpoint_every" => t.checkpoint_every = p(v)?,
            "train.log_every" => t.log_every = p(v)?,
            "train.deterministic" => t.deterministic = p(v)?,
            "train.strict_collapse" => t.strict_collapse = p(v)?,
            "train.collapse_floor" => t.collapse_floor = p(v)?,
            "train.collapse_patience" => t.collapse_patience = p(v)?,
            "train.freeze_stats" => t.freeze_stats = p(v)?,
            "train.warm_start" => t.warm_start = path(v),
            "data.source" => d.source = p(v)?,
            "data.path" => d.path = path(v),
            "data.classes" => d.classes = p(v)?,
            "data.per_class" => d.per_class = p(v)?,
            "data.test_per_class" => d.test_per_class = p(v)?,
            "data.image_size" => d.image_size = p(v)?,
            "data.crop_size" => d.crop_size = p(v)?,
            "data.mean" => d.mean = triple(v)?,
            "data.std" => d.std = triple(v)?,
            "augment.crop_scale_min" => a.crop_scale.0 = p(v)?,
            "augment.crop_scale_max" => a.crop_scale.1 = p(v)?,
            "augment.flip_p" => a.flip_p = p(v)?,
            "augment.jitter_p" => a.jitter_p = p(v)?,
            "augment.brightness" => a.brightness = p(v)?,
            "augment.contrast" => a.contrast = p(v)?,
            "augment.saturation" => a.saturation = p(v)?,
            "augment.grayscale_p" => a.grayscale_p = p(v)?,
            "augment.blur_kernel" => a.blur_kernel = p(v)?,
            "augment.blur_sigma_min" => a.blur_sigma.0 = p(v)?,
            "augment.blur_sigma_max" => a.blur_sigma.1 = p(v)?,
            "augment.blur_p" => a.blur_p.0 = p(v)?,
            "augment.blur_p_prime" => a.blur_p.1 = p(v)?,
            "eval.lr" => e.lr = p(v)?,
            "eval.momentum" => e.momentum = p(v)?,
            "eval.batch_size" => e.batch_size = p(v)?,
            "eval.max_epochs" => e.max_epochs = p(v)?,
            "eval.patience" => e.patience = p(v)?,
            "eval.standardize_features" => e.standardize_features = p(v)?,
            _ => return Ok(false),
        }
        Ok(true)
    }
}
