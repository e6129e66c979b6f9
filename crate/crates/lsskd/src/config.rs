//! Flat `key = value` run configuration. `#` starts a comment; every key
//! is optional, unknown or repeated keys are rejected, and values are
//! type-checked while parsing.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use lsskd_core::data::Normalization;
use lsskd_core::distill::Hyperparams;
use lsskd_core::network::BackboneConfig;
use lsskd_core::ss_task::ROTATIONS;
use lsskd_core::train::{Objective, TrainConfig};
use sha2::{Digest, Sha256};

use crate::dataset::default_normalization;
use crate::error::{CliError, CliResult};

pub const KEYS: [&str; 22] = [
    "dataset.name",
    "dataset.dir",
    "dataset.mean",
    "dataset.std",
    "fewshot.fraction",
    "model.stages",
    "model.channels",
    "model.blocks",
    "train.epochs",
    "train.batch",
    "train.lr0",
    "train.momentum",
    "train.wd",
    "train.milestones",
    "train.decay",
    "distill.alpha",
    "distill.beta",
    "distill.gamma",
    "distill.tau_kd",
    "distill.alpha_warmup",
    "seed",
    "out.dir",
];

#[derive(Debug, Clone, PartialEq)]
pub struct ConfigFile {
    pub dataset_name: String,
    pub dataset_dir: PathBuf,
    /// Resolved from the dataset name when the key is absent.
    pub dataset_mean: Vec<f64>,
    pub dataset_std: Vec<f64>,
    pub fewshot_fraction: f64,
    pub model_stages: usize,
    pub model_channels: Vec<usize>,
    pub model_blocks: usize,
    pub train_epochs: u32,
    pub train_batch: usize,
    pub train_lr0: f64,
    pub train_momentum: f64,
    pub train_wd: f64,
    pub train_milestones: Vec<u32>,
    pub train_decay: f64,
    pub distill_alpha: f64,
    pub distill_beta: f64,
    pub distill_gamma: f64,
    pub distill_tau_kd: f64,
    pub distill_alpha_warmup: bool,
    pub seed: u64,
    pub out_dir: PathBuf,
}

impl Default for ConfigFile {
    fn default() -> Self {
        let t = TrainConfig::default();
        let norm = Normalization::cifar100();
        ConfigFile {
            dataset_name: "cifar100".into(),
            dataset_dir: "data".into(),
            dataset_mean: norm.means,
            dataset_std: norm.stds,
            fewshot_fraction: t.fewshot_fraction,
            model_stages: 3,
            model_channels: vec![16, 32, 64],
            model_blocks: 2,
            train_epochs: t.epochs,
            train_batch: t.batch_size,
            train_lr0: t.lr0,
            train_momentum: t.momentum,
            train_wd: t.weight_decay,
            train_milestones: t.milestones,
            train_decay: t.decay,
            distill_alpha: t.hyper.alpha,
            distill_beta: t.hyper.beta,
            distill_gamma: t.hyper.gamma,
            distill_tau_kd: t.hyper.tau_kd,
            distill_alpha_warmup: t.hyper.alpha_warmup,
            seed: t.seed,
            out_dir: "runs".into(),
        }
    }
}

fn scalar<T: FromStr>(key: &str, v: &str) -> Result<T, String> {
    v.parse().map_err(|_| format!("{key}: cannot parse {v:?}"))
}

fn list<T: FromStr>(key: &str, v: &str) -> Result<Vec<T>, String> {
    if v.is_empty() {
        return Ok(Vec::new());
    }
    v.split(',').map(|s| scalar(key, s.trim())).collect()
}

fn join<T: ToString>(v: &[T]) -> String {
    v.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}

impl ConfigFile {
    pub fn parse(text: &str) -> Result<Self, String> {
        let mut c = ConfigFile::default();
        let mut seen: Vec<&str> = Vec::new();
        let (mut mean, mut std) = (None, None);
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| format!("line {}: expected key = value", n + 1))?;
            let (key, v) = (key.trim(), value.trim());
            let known = KEYS.iter().find(|&&k| k == key).ok_or_else(|| format!("line {}: unknown key {key:?}", n + 1))?;
            if seen.contains(known) {
                return Err(format!("line {}: duplicate key {key:?}", n + 1));
            }
            seen.push(known);
            match key {
                "dataset.name" => c.dataset_name = v.to_string(),
                "dataset.dir" => c.dataset_dir = v.into(),
                "dataset.mean" => mean = Some(list(key, v)?),
                "dataset.std" => std = Some(list(key, v)?),
                "fewshot.fraction" => c.fewshot_fraction = scalar(key, v)?,
                "model.stages" => c.model_stages = scalar(key, v)?,
                "model.channels" => c.model_channels = list(key, v)?,
                "model.blocks" => c.model_blocks = scalar(key, v)?,
                "train.epochs" => c.train_epochs = scalar(key, v)?,
                "train.batch" => c.train_batch = scalar(key, v)?,
                "train.lr0" => c.train_lr0 = scalar(key, v)?,
                "train.momentum" => c.train_momentum = scalar(key, v)?,
                "train.wd" => c.train_wd = scalar(key, v)?,
                "train.milestones" => c.train_milestones = list(key, v)?,
                "train.decay" => c.train_decay = scalar(key, v)?,
                "distill.alpha" => c.distill_alpha = scalar(key, v)?,
                "distill.beta" => c.distill_beta = scalar(key, v)?,
                "distill.gamma" => c.distill_gamma = scalar(key, v)?,
                "distill.tau_kd" => c.distill_tau_kd = scalar(key, v)?,
                "distill.alpha_warmup" => c.distill_alpha_warmup = scalar(key, v)?,
                "seed" => c.seed = scalar(key, v)?,
                "out.dir" => c.out_dir = v.into(),
                _ => unreachable!("key list and match arms agree"),
            }
        }
        let shipped = default_normalization(&c.dataset_name);
        let resolve = |given: Option<Vec<f64>>, pick: fn(Normalization) -> Vec<f64>, key: &str| {
            given.or_else(|| shipped.clone().map(pick)).ok_or_else(|| format!("{key} is required for dataset {:?}", c.dataset_name))
        };
        c.dataset_mean = resolve(mean, |n| n.means, "dataset.mean")?;
        c.dataset_std = resolve(std, |n| n.stds, "dataset.std")?;
        c.validate()?;
        Ok(c)
    }

    pub fn from_file(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config { path: path.to_path_buf(), detail: format!("cannot read: {e}") })?;
        Self::parse(&text).map_err(|detail| CliError::Config { path: path.to_path_buf(), detail })
    }

    fn validate(&self) -> Result<(), String> {
        if self.model_stages != self.model_channels.len() {
            return Err(format!("model.stages {} but {} channel widths", self.model_stages, self.model_channels.len()));
        }
        if self.model_blocks == 0 || self.model_channels.contains(&0) {
            return Err("model.blocks and model.channels must be positive".into());
        }
        self.normalization()?;
        self.train_config(Objective::Lsskd).validate().map_err(|e| e.to_string())
    }

    /// Every key, one per line, in canonical order.
    pub fn serialize(&self) -> String {
        let mut s = String::new();
        let mut put = |k: &str, v: String| writeln!(s, "{k} = {v}").unwrap();
        put("dataset.name", self.dataset_name.clone());
        put("dataset.dir", self.dataset_dir.display().to_string());
        put("dataset.mean", join(&self.dataset_mean));
        put("dataset.std", join(&self.dataset_std));
        put("fewshot.fraction", self.fewshot_fraction.to_string());
        put("model.stages", self.model_stages.to_string());
        put("model.channels", join(&self.model_channels));
        put("model.blocks", self.model_blocks.to_string());
        put("train.epochs", self.train_epochs.to_string());
        put("train.batch", self.train_batch.to_string());
        put("train.lr0", self.train_lr0.to_string());
        put("train.momentum", self.train_momentum.to_string());
        put("train.wd", self.train_wd.to_string());
        put("train.milestones", join(&self.train_milestones));
        put("train.decay", self.train_decay.to_string());
        put("distill.alpha", self.distill_alpha.to_string());
        put("distill.beta", self.distill_beta.to_string());
        put("distill.gamma", self.distill_gamma.to_string());
        put("distill.tau_kd", self.distill_tau_kd.to_string());
        put("distill.alpha_warmup", self.distill_alpha_warmup.to_string());
        put("seed", self.seed.to_string());
        put("out.dir", self.out_dir.display().to_string());
        s
    }

    pub fn normalization(&self) -> Result<Normalization, String> {
        Normalization::new(self.dataset_mean.clone(), self.dataset_std.clone()).map_err(|e| e.to_string())
    }

    pub fn backbone(&self, classes: usize, input_shape: [usize; 3]) -> BackboneConfig {
        BackboneConfig { input_shape, classes, transforms: ROTATIONS, channels: self.model_channels.clone(), blocks: self.model_blocks }
    }

    pub fn train_config(&self, objective: Objective) -> TrainConfig {
        TrainConfig {
            epochs: self.train_epochs,
            batch_size: self.train_batch,
            lr0: self.train_lr0,
            momentum: self.train_momentum,
            weight_decay: self.train_wd,
            milestones: self.train_milestones.clone(),
            decay: self.train_decay,
            seed: self.seed,
            fewshot_fraction: self.fewshot_fraction,
            hyper: Hyperparams {
                alpha: self.distill_alpha,
                beta: self.distill_beta,
                gamma: self.distill_gamma,
                tau_kd: self.distill_tau_kd,
                alpha_warmup: self.distill_alpha_warmup,
                ..Hyperparams::default()
            },
            objective,
            augment: true,
        }
    }

    /// SHA-256 over the keys that fix the parameter set and the input
    /// pipeline; training-only keys (schedule, seed, paths) are excluded so
    /// a checkpoint evaluates under any run configuration of the same model.
    pub fn digest(&self) -> [u8; 32] {
        let identity = format!(
            "dataset.name={}\ndataset.mean={}\ndataset.std={}\nmodel.stages={}\nmodel.channels={}\nmodel.blocks={}\ntransforms={ROTATIONS}\n",
            self.dataset_name,
            join(&self.dataset_mean),
            join(&self.dataset_std),
            self.model_stages,
            join(&self.model_channels),
            self.model_blocks,
        );
        Sha256::digest(identity.as_bytes()).into()
    }
}
