//! Flat `key = value` run configuration with validation and hashing.

mod ablation;

use std::collections::HashSet;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use sha2::{Digest, Sha256};

use crate::data::{AugmentConfig, Normalization};
use crate::error::{Error, Result};
use crate::nn::{BnPhase, EncoderDef, HeadDef};
use crate::patch::{binomial, CombinationPlan, CombineOp, CombineStage};
use crate::pipeline::{Pipeline, PipelineSpec};
use crate::tensor::DType;

pub use ablation::{AblationMatrix, Cell, CellOutcome, SUMMARY_HEADER};

/// Environment variable naming the default dataset root.
pub const DATA_DIR_ENV: &str = "FASTMOCO_DATA_DIR";

/// Writes via a sibling temporary file and a rename, so readers never see a
/// partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(format!(".tmp{}", std::process::id()));
    let tmp = PathBuf::from(tmp);
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DatasetKind {
    Synth,
    Cifar,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub pipeline: Pipeline,
    pub divide_m: usize,
    pub combine_n: usize,
    pub combine_op: String,
    pub combine_stage: CombineStage,
    /// `None` selects every combination.
    pub pairs_used: Option<usize>,
    pub weighted_gamma: f64,
    pub beta_alpha: f64,
    pub same_view_positive: bool,
    pub multicrop: bool,
    pub target_bn_train: bool,
    pub tau: f64,
    pub alpha: f64,
    /// Skip the moving-average update (a deliberately broken setup).
    pub freeze_target: bool,
    pub lr0: f64,
    pub lr_warmup_start: f64,
    pub warmup_epochs: usize,
    pub momentum: f64,
    pub weight_decay: f64,
    pub wd_norm_bias: bool,
    pub clip_norm: f64,
    pub batch: usize,
    pub epochs: usize,
    pub max_steps: usize,
    pub seed: u64,
    pub deterministic: bool,
    pub dtype: DType,
    pub dataset: DatasetKind,
    pub data_dir: String,
    pub synth_train: usize,
    pub synth_test: usize,
    pub train_subset: usize,
    pub encoder_width: usize,
    pub crop_scale_min: f64,
    pub flip_p: f64,
    pub jitter_p: f64,
    pub gray_p: f64,
    pub probe_epochs: usize,
    pub probe_lr: f64,
    pub probe_batch: usize,
    pub knn_k: usize,
    pub log_every: usize,
    pub checkpoint_every: usize,
    pub output_dir: String,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            pipeline: Pipeline::FastMoco,
            divide_m: 2,
            combine_n: 2,
            combine_op: "mean".into(),
            combine_stage: CombineStage::FINAL,
            pairs_used: Some(6),
            weighted_gamma: 0.7,
            beta_alpha: 1.0,
            same_view_positive: false,
            multicrop: false,
            target_bn_train: true,
            tau: 1.0,
            alpha: 0.99,
            freeze_target: false,
            lr0: 0.025,
            lr_warmup_start: 0.00625,
            warmup_epochs: 1,
            momentum: 0.9,
            weight_decay: 1e-4,
            wd_norm_bias: false,
            clip_norm: 1.0,
            batch: 128,
            epochs: 30,
            max_steps: 0,
            seed: 0,
            deterministic: true,
            dtype: DType::F32,
            dataset: DatasetKind::Synth,
            data_dir: String::new(),
            synth_train: 5000,
            synth_test: 1000,
            train_subset: 0,
            encoder_width: 64,
            crop_scale_min: 0.2,
            flip_p: 0.5,
            jitter_p: 0.8,
            gray_p: 0.2,
            probe_epochs: 30,
            probe_lr: 0.1,
            probe_batch: 256,
            knn_k: 20,
            log_every: 10,
            checkpoint_every: 0,
            output_dir: "runs/default".into(),
        }
    }
}

/// Every key with its legal values, in serialisation order.
pub const KEYS: &[(&str, &str)] = &[
    ("pipeline", "fastmoco | sec | encode_only | divide_combine_encode | sample_combine_encode | montage"),
    ("divide_m", "integer 1..=4 (grid side)"),
    ("combine_n", "integer 1..=divide_m^2"),
    ("combine_op", "mean | weighted | beta | max (weighted and beta need combine_n=2)"),
    ("combine_stage", "input | stage1 | stage2 | stage3 | final | proj | pred (input..stage3 need m=2, n=2, mean)"),
    ("pairs_used", "all | integer 1..=C(divide_m^2, combine_n)"),
    ("weighted_gamma", "real in [0.5, 1)"),
    ("beta_alpha", "real > 0"),
    ("same_view_positive", "true | false (fastmoco and divide_combine_encode only)"),
    ("multicrop_mode", "off | extra_full_crop"),
    ("target_bn_mode", "train | eval"),
    ("tau", "real > 0"),
    ("alpha", "real in (0, 1), target moving-average momentum"),
    ("freeze_target", "true | false, keep the target at its initial weights"),
    ("lr0", "real > 0, peak learning rate"),
    ("lr_warmup_start", "real >= 0"),
    ("warmup_epochs", "integer >= 0, < epochs"),
    ("momentum", "real in [0, 1)"),
    ("weight_decay", "real >= 0"),
    ("wd_norm_bias", "true | false, decay norm and bias parameters too"),
    ("clip_norm", "real > 0, global gradient-norm clip"),
    ("batch", "integer >= 2"),
    ("epochs", "integer >= 1"),
    ("max_steps", "integer >= 0, 0 = no cap"),
    ("seed", "unsigned integer"),
    ("deterministic", "true | false (false also records wall-clock time)"),
    ("dtype", "f32 | f64"),
    ("dataset", "synth | cifar"),
    ("data_dir", "path to CIFAR-10 binary batches; empty = $FASTMOCO_DATA_DIR"),
    ("synth_train", "integer >= 10, synthetic training images"),
    ("synth_test", "integer >= 10, synthetic held-out images"),
    ("train_subset", "integer >= 0, use the first N training images, 0 = all"),
    ("encoder_width", "integer >= 1, stem width; stages use 1x, 2x, 4x"),
    ("crop_scale_min", "real in (0, 1]"),
    ("flip_p", "real in [0, 1]"),
    ("jitter_p", "real in [0, 1]"),
    ("gray_p", "real in [0, 1]"),
    ("gaussian_blur", "off (omitted at 32x32)"),
    ("probe_optimizer", "sgd (momentum 0.9, cosine, no weight decay)"),
    ("probe_epochs", "integer >= 1"),
    ("probe_lr", "real > 0"),
    ("probe_batch", "integer >= 1"),
    ("knn_k", "integer >= 1"),
    ("log_every", "integer >= 1, steps between metrics rows"),
    ("checkpoint_every", "integer >= 0, epochs between checkpoints, 0 = end only"),
    ("output_dir", "path"),
];

fn parse_value<V: FromStr>(key: &str, value: &str) -> Result<V> {
    value.parse().map_err(|_| Error::config(key, format!("cannot parse `{value}`")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(Error::config(key, format!("expected true or false, got `{value}`"))),
    }
}

fn choice<'a>(key: &str, value: &str, options: &[&'a str]) -> Result<&'a str> {
    options
        .iter()
        .copied()
        .find(|o| *o == value)
        .ok_or_else(|| Error::config(key, format!("`{value}` is not one of {}", options.join(", "))))
}

impl RunConfig {
    /// Sets one key from its textual value (no range checks; see
    /// [`RunConfig::validate`]).
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value;
        match key {
            "pipeline" => self.pipeline = v.parse().map_err(|e: Error| Error::config(key, e.to_string()))?,
            "divide_m" => self.divide_m = parse_value(key, v)?,
            "combine_n" => self.combine_n = parse_value(key, v)?,
            "combine_op" => self.combine_op = choice(key, v, &["mean", "weighted", "beta", "max"])?.into(),
            "combine_stage" => self.combine_stage = v.parse().map_err(|e: Error| Error::config(key, e.to_string()))?,
            "pairs_used" => self.pairs_used = if v == "all" { None } else { Some(parse_value(key, v)?) },
            "weighted_gamma" => self.weighted_gamma = parse_value(key, v)?,
            "beta_alpha" => self.beta_alpha = parse_value(key, v)?,
            "same_view_positive" => self.same_view_positive = parse_bool(key, v)?,
            "multicrop_mode" => self.multicrop = choice(key, v, &["off", "extra_full_crop"])? == "extra_full_crop",
            "target_bn_mode" => self.target_bn_train = choice(key, v, &["train", "eval"])? == "train",
            "tau" => self.tau = parse_value(key, v)?,
            "alpha" => self.alpha = parse_value(key, v)?,
            "freeze_target" => self.freeze_target = parse_bool(key, v)?,
            "lr0" => self.lr0 = parse_value(key, v)?,
            "lr_warmup_start" => self.lr_warmup_start = parse_value(key, v)?,
            "warmup_epochs" => self.warmup_epochs = parse_value(key, v)?,
            "momentum" => self.momentum = parse_value(key, v)?,
            "weight_decay" => self.weight_decay = parse_value(key, v)?,
            "wd_norm_bias" => self.wd_norm_bias = parse_bool(key, v)?,
            "clip_norm" => self.clip_norm = parse_value(key, v)?,
            "batch" => self.batch = parse_value(key, v)?,
            "epochs" => self.epochs = parse_value(key, v)?,
            "max_steps" => self.max_steps = parse_value(key, v)?,
            "seed" => self.seed = parse_value(key, v)?,
            "deterministic" => self.deterministic = parse_bool(key, v)?,
            "dtype" => {
                self.dtype = match choice(key, v, &["f32", "f64"])? {
                    "f32" => DType::F32,
                    _ => DType::F64,
                }
            }
            "dataset" => {
                self.dataset = match choice(key, v, &["synth", "cifar"])? {
                    "synth" => DatasetKind::Synth,
                    _ => DatasetKind::Cifar,
                }
            }
            "data_dir" => self.data_dir = v.into(),
            "synth_train" => self.synth_train = parse_value(key, v)?,
            "synth_test" => self.synth_test = parse_value(key, v)?,
            "train_subset" => self.train_subset = parse_value(key, v)?,
            "encoder_width" => self.encoder_width = parse_value(key, v)?,
            "crop_scale_min" => self.crop_scale_min = parse_value(key, v)?,
            "flip_p" => self.flip_p = parse_value(key, v)?,
            "jitter_p" => self.jitter_p = parse_value(key, v)?,
            "gray_p" => self.gray_p = parse_value(key, v)?,
            "gaussian_blur" => {
                choice(key, v, &["off"])?;
            }
            "probe_optimizer" => {
                choice(key, v, &["sgd"])?;
            }
            "probe_epochs" => self.probe_epochs = parse_value(key, v)?,
            "probe_lr" => self.probe_lr = parse_value(key, v)?,
            "probe_batch" => self.probe_batch = parse_value(key, v)?,
            "knn_k" => self.knn_k = parse_value(key, v)?,
            "log_every" => self.log_every = parse_value(key, v)?,
            "checkpoint_every" => self.checkpoint_every = parse_value(key, v)?,
            "output_dir" => self.output_dir = v.into(),
            _ => return Err(Error::config(key, "unknown key")),
        }
        Ok(())
    }

    /// Textual value of `key`, as written by [`RunConfig::to_text`].
    pub fn get(&self, key: &str) -> Option<String> {
        let b = |x: bool| x.to_string();
        Some(match key {
            "pipeline" => self.pipeline.to_string(),
            "divide_m" => self.divide_m.to_string(),
            "combine_n" => self.combine_n.to_string(),
            "combine_op" => self.combine_op.clone(),
            "combine_stage" => self.combine_stage.to_string(),
            "pairs_used" => self.pairs_used.map_or_else(|| "all".into(), |k| k.to_string()),
            "weighted_gamma" => self.weighted_gamma.to_string(),
            "beta_alpha" => self.beta_alpha.to_string(),
            "same_view_positive" => b(self.same_view_positive),
            "multicrop_mode" => (if self.multicrop { "extra_full_crop" } else { "off" }).into(),
            "target_bn_mode" => (if self.target_bn_train { "train" } else { "eval" }).into(),
            "tau" => self.tau.to_string(),
            "alpha" => self.alpha.to_string(),
            "freeze_target" => b(self.freeze_target),
            "lr0" => self.lr0.to_string(),
            "lr_warmup_start" => self.lr_warmup_start.to_string(),
            "warmup_epochs" => self.warmup_epochs.to_string(),
            "momentum" => self.momentum.to_string(),
            "weight_decay" => self.weight_decay.to_string(),
            "wd_norm_bias" => b(self.wd_norm_bias),
            "clip_norm" => self.clip_norm.to_string(),
            "batch" => self.batch.to_string(),
            "epochs" => self.epochs.to_string(),
            "max_steps" => self.max_steps.to_string(),
            "seed" => self.seed.to_string(),
            "deterministic" => b(self.deterministic),
            "dtype" => self.dtype.to_string(),
            "dataset" => (if self.dataset == DatasetKind::Synth { "synth" } else { "cifar" }).into(),
            "data_dir" => self.data_dir.clone(),
            "synth_train" => self.synth_train.to_string(),
            "synth_test" => self.synth_test.to_string(),
            "train_subset" => self.train_subset.to_string(),
            "encoder_width" => self.encoder_width.to_string(),
            "crop_scale_min" => self.crop_scale_min.to_string(),
            "flip_p" => self.flip_p.to_string(),
            "jitter_p" => self.jitter_p.to_string(),
            "gray_p" => self.gray_p.to_string(),
            "gaussian_blur" => "off".into(),
            "probe_optimizer" => "sgd".into(),
            "probe_epochs" => self.probe_epochs.to_string(),
            "probe_lr" => self.probe_lr.to_string(),
            "probe_batch" => self.probe_batch.to_string(),
            "knn_k" => self.knn_k.to_string(),
            "log_every" => self.log_every.to_string(),
            "checkpoint_every" => self.checkpoint_every.to_string(),
            "output_dir" => self.output_dir.clone(),
            _ => return None,
        })
    }

    /// Applies `key=value` overrides in order.
    pub fn apply_overrides<S: AsRef<str>>(&mut self, overrides: &[S]) -> Result<()> {
        for o in overrides {
            let o = o.as_ref();
            let (k, v) = o
                .split_once('=')
                .ok_or_else(|| Error::config(o, "override must look like key=value"))?;
            self.set(k.trim(), v.trim())?;
        }
        Ok(())
    }

    /// Parses config text over the defaults and validates the result.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        cfg.parse_onto(text, &mut HashSet::new())?;
        cfg.validate()?;
        Ok(cfg)
    }

    fn parse_onto(&mut self, text: &str, seen: &mut HashSet<String>) -> Result<()> {
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::config(format!("line {}", lineno + 1), format!("expected key = value, got `{line}`")))?;
            let k = k.trim();
            if !seen.insert(k.to_string()) {
                return Err(Error::config(k, "given more than once"));
            }
            self.set(k, v.trim())?;
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    /// Canonical text: every key in [`KEYS`] order.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (k, _) in KEYS {
            let _ = writeln!(out, "{k} = {}", self.get(k).expect("listed key"));
        }
        out
    }

    /// SHA-256 of the canonical text without `output_dir`, hex encoded.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        for line in self.to_text().lines().filter(|l| !l.starts_with("output_dir ")) {
            h.update(line.as_bytes());
            h.update(b"\n");
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Short form of [`RunConfig::hash`] for file names and tables.
    pub fn short_hash(&self) -> String {
        self.hash()[..16].to_string()
    }

    pub fn combine_op(&self) -> CombineOp {
        match self.combine_op.as_str() {
            "weighted" => CombineOp::Weighted(self.weighted_gamma),
            "beta" => CombineOp::Beta(self.beta_alpha),
            "max" => CombineOp::Max,
            _ => CombineOp::Mean,
        }
    }

    pub fn plan(&self) -> Result<CombinationPlan> {
        let total = binomial(self.divide_m * self.divide_m, self.combine_n);
        CombinationPlan::new(
            self.divide_m,
            self.combine_n,
            self.combine_op(),
            self.combine_stage,
            self.pairs_used.unwrap_or(total),
        )
    }

    pub fn pipeline_spec(&self) -> Result<PipelineSpec> {
        PipelineSpec::new(
            self.pipeline,
            self.plan()?,
            self.same_view_positive,
            self.multicrop,
            self.tau,
            if self.target_bn_train { BnPhase::Train } else { BnPhase::Eval },
        )
    }

    pub fn encoder_def(&self) -> EncoderDef {
        let w = self.encoder_width;
        EncoderDef {
            stem_channels: w,
            stage_channels: vec![w, 2 * w, 4 * w],
            ..EncoderDef::default()
        }
    }

    pub fn head_def(&self) -> HeadDef {
        HeadDef {
            in_dim: self.encoder_def().embedding_dim(),
            ..HeadDef::default()
        }
    }

    pub fn augment(&self) -> AugmentConfig {
        AugmentConfig {
            crop_scale: (self.crop_scale_min, 1.0),
            flip_p: self.flip_p,
            jitter_p: self.jitter_p,
            gray_p: self.gray_p,
            ..AugmentConfig::default()
        }
    }

    pub fn normalization(&self) -> Normalization {
        match self.dataset {
            DatasetKind::Synth => Normalization::SYNTH,
            DatasetKind::Cifar => Normalization::CIFAR,
        }
    }

    /// `data_dir`, falling back to `$FASTMOCO_DATA_DIR`.
    pub fn resolve_data_dir(&self) -> Result<PathBuf> {
        if !self.data_dir.is_empty() {
            return Ok(PathBuf::from(&self.data_dir));
        }
        std::env::var_os(DATA_DIR_ENV)
            .map(PathBuf::from)
            .ok_or_else(|| Error::config("data_dir", format!("empty and ${DATA_DIR_ENV} is not set")))
    }

    /// Checks every field against its legal range.
    pub fn validate(&self) -> Result<()> {
        let check = |ok: bool, key: &str| -> Result<()> {
            if ok {
                Ok(())
            } else {
                let legal = KEYS.iter().find(|(k, _)| *k == key).map_or("", |(_, r)| r);
                Err(Error::config(key, format!("`{}` out of range ({legal})", self.get(key).unwrap_or_default())))
            }
        };
        check((1..=4).contains(&self.divide_m), "divide_m")?;
        let cells = self.divide_m * self.divide_m;
        check((1..=cells).contains(&self.combine_n), "combine_n")
            .map_err(|_| Error::config("combine_n", format!("n={} exceeds m^2={cells} (or is zero)", self.combine_n)))?;
        let total = binomial(cells, self.combine_n);
        check(self.pairs_used.is_none_or(|k| (1..=total).contains(&k)), "pairs_used")?;
        check((0.5..1.0).contains(&self.weighted_gamma), "weighted_gamma")?;
        check(self.beta_alpha > 0.0 && self.beta_alpha.is_finite(), "beta_alpha")?;
        check(self.tau > 0.0 && self.tau.is_finite(), "tau")?;
        check(self.alpha > 0.0 && self.alpha < 1.0, "alpha")?;
        check(self.lr0 > 0.0 && self.lr0.is_finite(), "lr0")?;
        check(self.lr_warmup_start >= 0.0 && self.lr_warmup_start.is_finite(), "lr_warmup_start")?;
        check((0.0..1.0).contains(&self.momentum), "momentum")?;
        check(self.weight_decay >= 0.0 && self.weight_decay.is_finite(), "weight_decay")?;
        check(self.clip_norm > 0.0, "clip_norm")?;
        check(self.batch >= 2, "batch")?;
        check(self.epochs >= 1, "epochs")?;
        check(self.warmup_epochs < self.epochs, "warmup_epochs")?;
        check(self.synth_train >= 10, "synth_train")?;
        check(self.synth_test >= 10, "synth_test")?;
        check(self.encoder_width >= 1, "encoder_width")?;
        check(self.crop_scale_min > 0.0 && self.crop_scale_min <= 1.0, "crop_scale_min")?;
        for key in ["flip_p", "jitter_p", "gray_p"] {
            let p: f64 = self.get(key).and_then(|s| s.parse().ok()).unwrap_or(-1.0);
            check((0.0..=1.0).contains(&p), key)?;
        }
        check(self.probe_epochs >= 1, "probe_epochs")?;
        check(self.probe_lr > 0.0, "probe_lr")?;
        check(self.probe_batch >= 1, "probe_batch")?;
        check(self.knn_k >= 1, "knn_k")?;
        check(self.log_every >= 1, "log_every")?;
        check(!self.output_dir.is_empty(), "output_dir")?;
        let plan_err = |e: Error| Error::config("combine_stage", e.to_string());
        if self.pipeline.uses_plan() {
            self.pipeline_spec().map_err(plan_err)?;
        } else if self.same_view_positive {
            return Err(Error::config("same_view_positive", format!("not available for {}", self.pipeline)));
        }
        Ok(())
    }
}
