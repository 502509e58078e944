//! The `mmel` command line: dataset loading, group generation, training,
//! evaluation and the verification suites.
//!
//! Configuration is a flat JSON object; a preset supplies the starting
//! values, a `--config` file overrides any subset of keys and `--seed`
//! overrides the seed. Unknown keys are rejected.

use std::ffi::OsString;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::augment::{self, AugmentedGroup, Kind, Payload, UnigramPredictor};
use crate::data::{self, Dataset, InputEncoder, TextTask};
use crate::diffcore::{checkpoint, DType, LrSchedule, Model, ModelSpec, Real};
use crate::engine::{self, TrainConfig, TrainData, TrainMode};
use crate::error::{Error, Result};
use crate::oracle;
use crate::reweight::{LossMode, MmelConfig};
use crate::teacher::{self, TeacherHandle};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_RUNTIME: i32 = 2;
pub const EXIT_VERIFY: i32 = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetKind {
    /// Gaussian blobs as feature vectors.
    Blobs,
    /// CIFAR-10 binary files at `train_path` / `eval_path`.
    Cifar,
    /// Generated CIFAR-format images, passed through the binary codec.
    SyntheticCifar,
    /// IDX image and label files.
    Idx,
    /// The synthetic keyword text task.
    Text,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Linear,
    Mlp,
    Cnn,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Precision {
    F32,
    F64,
}

/// Every configurable key. Paths are relative to the working directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Config {
    pub dataset: DatasetKind,
    pub train_path: Option<PathBuf>,
    pub eval_path: Option<PathBuf>,
    pub train_labels_path: Option<PathBuf>,
    pub eval_labels_path: Option<PathBuf>,
    /// Sizes of generated datasets.
    pub train_size: usize,
    pub eval_size: usize,
    pub classes: usize,
    pub blob_dim: usize,
    pub text_length: usize,
    pub text_fillers: usize,
    pub text_keywords: usize,

    pub model: ModelKind,
    pub hidden: usize,
    pub cnn_pre_pool: usize,
    pub cnn_channels: [usize; 2],
    pub precision: Precision,

    pub n_aug: usize,
    pub crop_pad: usize,
    pub jitter: f64,
    pub mask_ratio: f64,
    /// Read groups from this JSON-lines file instead of generating them.
    pub groups_path: Option<PathBuf>,

    pub mode: TrainMode,
    pub batch_size: usize,
    pub epochs: usize,
    pub lr: f64,
    pub lr_milestones: Vec<usize>,
    pub lr_factor: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub lambda_p: f64,
    pub lambda_t: f64,
    pub detach_weights: bool,
    /// Soft targets never receive gradient; only `false` is accepted.
    pub differentiate_target: bool,
    pub regression_threshold: f64,
    pub teacher: Option<PathBuf>,
    pub seed: u64,
    pub strict_determinism: bool,

    pub instances: usize,
    pub grad_check_seeds: usize,
    pub out_dir: PathBuf,
}

impl Default for Config {
    fn default() -> Self {
        let train = TrainConfig::default();
        Config {
            dataset: DatasetKind::Blobs,
            train_path: None,
            eval_path: None,
            train_labels_path: None,
            eval_labels_path: None,
            train_size: 400,
            eval_size: 200,
            classes: 2,
            blob_dim: 2,
            text_length: 12,
            text_fillers: 24,
            text_keywords: 6,
            model: ModelKind::Mlp,
            hidden: 16,
            cnn_pre_pool: 2,
            cnn_channels: [8, 16],
            precision: Precision::F32,
            n_aug: train.n_aug,
            crop_pad: 4,
            jitter: 0.3,
            mask_ratio: 0.4,
            groups_path: None,
            mode: train.mode,
            batch_size: train.batch_size,
            epochs: train.epochs,
            lr: train.schedule.base,
            lr_milestones: train.schedule.milestones,
            lr_factor: train.schedule.factor,
            momentum: train.momentum,
            weight_decay: train.weight_decay,
            lambda_p: train.mmel.lambda_p,
            lambda_t: train.mmel.lambda_t,
            detach_weights: true,
            differentiate_target: false,
            regression_threshold: 0.5,
            teacher: None,
            seed: 0,
            strict_determinism: false,
            instances: 1000,
            grad_check_seeds: 20,
            out_dir: PathBuf::from("mmel-out"),
        }
    }
}

pub const PRESETS: [&str; 3] = ["blobs-smoke", "cifar-desk", "verify"];

impl Config {
    pub fn preset(name: &str) -> Result<Self> {
        let base = Config::default();
        match name {
            "blobs-smoke" => Ok(Config {
                dataset: DatasetKind::Blobs,
                train_size: 400,
                eval_size: 200,
                classes: 3,
                blob_dim: 2,
                model: ModelKind::Mlp,
                hidden: 16,
                n_aug: 4,
                mode: TrainMode::Uniform,
                batch_size: 32,
                epochs: 30,
                lr: 0.05,
                lr_milestones: vec![20],
                out_dir: PathBuf::from("mmel-out/blobs-smoke"),
                ..base
            }),
            "cifar-desk" => Ok(Config {
                dataset: DatasetKind::SyntheticCifar,
                train_size: 5000,
                eval_size: 1000,
                classes: 10,
                model: ModelKind::Cnn,
                cnn_pre_pool: 1,
                cnn_channels: [8, 16],
                n_aug: 4,
                crop_pad: 1,
                mode: TrainMode::MmelHard,
                batch_size: 64,
                epochs: 30,
                lr: 0.02,
                lr_milestones: vec![20],
                lr_factor: 0.2,
                lambda_p: 1.0,
                out_dir: PathBuf::from("mmel-out/cifar-desk"),
                ..base
            }),
            "verify" => Ok(Config {
                instances: 1000,
                grad_check_seeds: 20,
                out_dir: PathBuf::from("mmel-out/verify"),
                ..base
            }),
            other => Err(Error::Config(format!(
                "unknown preset {:?}; available: {}",
                other,
                PRESETS.join(", ")
            ))),
        }
    }

    /// Applies the keys of a JSON object on top of `self`.
    pub fn overlay(&self, overrides: &Value) -> Result<Self> {
        let Value::Object(map) = overrides else {
            return Err(Error::Config("config must be a JSON object".into()));
        };
        let mut merged = serde_json::to_value(self)?;
        let Value::Object(base) = &mut merged else {
            unreachable!()
        };
        for (k, v) in map {
            base.insert(k.clone(), v.clone());
        }
        serde_json::from_value(merged).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn train_config(&self) -> Result<TrainConfig> {
        if self.differentiate_target {
            return Err(Error::Config("differentiate_target=true is not supported".into()));
        }
        let cfg = TrainConfig {
            mode: self.mode,
            batch_size: self.batch_size,
            epochs: self.epochs,
            schedule: LrSchedule::new(self.lr, self.lr_milestones.clone(), self.lr_factor)
                .map_err(|e| Error::Config(e.to_string()))?,
            momentum: self.momentum,
            weight_decay: self.weight_decay,
            seed: self.seed,
            mmel: MmelConfig {
                lambda_p: self.lambda_p,
                lambda_t: self.lambda_t,
                mode: if self.mode == TrainMode::MmelSoft {
                    LossMode::Soft
                } else {
                    LossMode::Hard
                },
                detach_weights: self.detach_weights,
                regression_threshold: self.regression_threshold,
            },
            n_aug: self.n_aug,
            threads: if self.strict_determinism { 0 } else { worker_threads()? },
        };
        cfg.validate()?;
        Ok(cfg)
    }

    fn text_task(&self) -> TextTask {
        TextTask {
            classes: self.classes,
            fillers: self.text_fillers,
            keywords_per_class: self.text_keywords,
            length: self.text_length,
        }
    }

    /// Checks everything that can be checked without touching data.
    pub fn validate(&self) -> Result<()> {
        self.train_config()?;
        let need = |p: &Option<PathBuf>, key: &str| -> Result<()> {
            match p {
                Some(p) if p.exists() => Ok(()),
                Some(p) => Err(Error::Config(format!("{} {} does not exist", key, p.display()))),
                None => Err(Error::Config(format!("dataset {:?} needs {}", self.dataset, key))),
            }
        };
        match self.dataset {
            DatasetKind::Cifar => need(&self.train_path, "train_path")?,
            DatasetKind::Idx => {
                need(&self.train_path, "train_path")?;
                need(&self.train_labels_path, "train_labels_path")?;
            }
            _ => {}
        }
        if let Some(g) = &self.groups_path {
            need(&Some(g.clone()), "groups_path")?;
        }
        if let Some(t) = &self.teacher {
            need(&Some(t.clone()), "teacher")?;
        }
        if !(self.mask_ratio > 0.0 && self.mask_ratio <= 1.0) {
            return Err(Error::Config(format!("mask_ratio {} outside (0, 1]", self.mask_ratio)));
        }
        Ok(())
    }
}

/// Worker count from `MMEL_THREADS`; unset means one per core.
pub fn worker_threads() -> Result<usize> {
    match std::env::var("MMEL_THREADS") {
        Ok(v) => v
            .trim()
            .parse()
            .map_err(|_| Error::Config(format!("MMEL_THREADS={:?} is not a number", v))),
        Err(_) => Ok(std::thread::available_parallelism().map_or(1, |n| n.get())),
    }
}

/// Train and eval splits with the files they were read from.
pub struct LoadedData {
    pub train: Dataset,
    pub eval: Option<Dataset>,
    pub inputs: Vec<PathBuf>,
    pub vocab: usize,
}

pub fn load_data(cfg: &Config) -> Result<LoadedData> {
    let mut inputs = Vec::new();
    let mut vocab = 0;
    let (train, eval) = match cfg.dataset {
        DatasetKind::Blobs => {
            let all = data::make_blobs(cfg.train_size + cfg.eval_size, cfg.classes, cfg.blob_dim, cfg.seed)?;
            let mut samples = all.samples;
            let eval = samples.split_off(cfg.train_size);
            let classes = all.classes;
            (
                Dataset { samples, classes },
                (!eval.is_empty()).then_some(Dataset { samples: eval, classes }),
            )
        }
        DatasetKind::SyntheticCifar => {
            let gen = |n, split: &str| -> Result<Dataset> {
                let bytes = data::encode_cifar(&data::synthetic_cifar(n, cfg.seed, split))?;
                data::decode_cifar(&bytes, &format!("{}-", split))
            };
            let eval = if cfg.eval_size > 0 {
                Some(gen(cfg.eval_size, "eval")?)
            } else {
                None
            };
            (gen(cfg.train_size, "train")?, eval)
        }
        DatasetKind::Cifar => {
            let path = cfg
                .train_path
                .clone()
                .ok_or_else(|| Error::Config("cifar needs train_path".into()))?;
            let train = data::load_cifar_binary(&path)?;
            inputs.push(path);
            let eval = match &cfg.eval_path {
                Some(p) => {
                    inputs.push(p.clone());
                    Some(data::load_cifar_binary(p)?)
                }
                None => None,
            };
            (train, eval)
        }
        DatasetKind::Idx => {
            let (Some(img), Some(lab)) = (&cfg.train_path, &cfg.train_labels_path) else {
                return Err(Error::Config("idx needs train_path and train_labels_path".into()));
            };
            let train = data::load_idx(img, lab)?;
            inputs.extend([img.clone(), lab.clone()]);
            let eval = match (&cfg.eval_path, &cfg.eval_labels_path) {
                (Some(i), Some(l)) => {
                    inputs.extend([i.clone(), l.clone()]);
                    Some(data::load_idx(i, l)?)
                }
                _ => None,
            };
            (train, eval)
        }
        DatasetKind::Text => {
            let task = cfg.text_task();
            vocab = task.vocab();
            let eval = if cfg.eval_size > 0 {
                Some(task.generate(cfg.eval_size, cfg.seed, "eval")?)
            } else {
                None
            };
            (task.generate(cfg.train_size, cfg.seed, "train")?, eval)
        }
    };
    if train.is_empty() {
        return Err(Error::Dataset("training split is empty".into()));
    }
    Ok(LoadedData {
        train,
        eval,
        inputs,
        vocab,
    })
}

pub fn model_spec(cfg: &Config, input_shape: &[usize], classes: usize) -> Result<ModelSpec> {
    let width: usize = input_shape.iter().product();
    let spec = match (cfg.model, input_shape) {
        (ModelKind::Cnn, [c, h, w]) => ModelSpec::cnn(
            [*c, *h, *w],
            cfg.cnn_pre_pool,
            cfg.cnn_channels[0],
            cfg.cnn_channels[1],
            classes,
        ),
        (ModelKind::Cnn, other) => {
            return Err(Error::Config(format!("cnn needs [C, H, W] inputs, got {:?}", other)));
        }
        (ModelKind::Mlp, _) | (ModelKind::Linear, _) => {
            let mut spec = if cfg.model == ModelKind::Mlp {
                ModelSpec::mlp(width, cfg.hidden, classes)
            } else {
                ModelSpec::linear(width, classes)
            };
            if input_shape.len() > 1 {
                spec.input_shape = input_shape.to_vec();
                spec.layers.insert(0, crate::diffcore::Layer::Flatten);
            }
            spec
        }
    };
    spec.output_shape()?;
    Ok(spec)
}

/// Builds the augmentation group of every training sample.
pub fn build_groups(cfg: &Config, train: &Dataset) -> Result<Vec<AugmentedGroup>> {
    let predictor = match train.samples.first().map(|s| s.payload.kind()) {
        Some(Kind::Text) => {
            let vocab = cfg.text_task().vocab();
            let seqs = train.samples.iter().filter_map(|s| match &s.payload {
                Payload::Text { tokens } => Some(tokens.as_slice()),
                _ => None,
            });
            Some(UnigramPredictor::from_corpus(vocab, seqs)?)
        }
        _ => None,
    };
    train
        .samples
        .iter()
        .map(|s| match s.payload.kind() {
            Kind::Image => augment::build_image_group(s, cfg.n_aug, cfg.crop_pad, cfg.seed),
            Kind::Vector => augment::build_vector_group(s, cfg.n_aug, cfg.jitter, cfg.seed),
            Kind::Text => augment::build_text_group(
                s,
                cfg.n_aug,
                cfg.mask_ratio,
                predictor.as_ref().expect("predictor built for text"),
                cfg.seed,
            ),
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FileDigest {
    pub path: PathBuf,
    pub sha256: String,
}

impl FileDigest {
    /// Digest of `path`, recorded with its absolute path.
    pub fn of(path: &Path) -> Result<Self> {
        let abs = path
            .canonicalize()
            .map_err(|e| Error::io(format!("resolving {}", path.display()), e))?;
        Ok(FileDigest {
            path: abs,
            sha256: sha256_file(path)?,
        })
    }
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    Ok(Sha256::digest(&bytes).iter().map(|b| format!("{:02x}", b)).collect())
}

/// Record of one command invocation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub toolkit_version: String,
    pub seed: u64,
    pub config: Value,
    pub inputs: Vec<FileDigest>,
    pub outputs: Vec<FileDigest>,
    #[serde(default)]
    pub results: Value,
}

impl RunManifest {
    pub fn new(command: &str, seed: u64, config: Value) -> Self {
        RunManifest {
            command: command.into(),
            toolkit_version: env!("CARGO_PKG_VERSION").into(),
            seed,
            config,
            inputs: Vec::new(),
            outputs: Vec::new(),
            results: Value::Null,
        }
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text + "\n").map_err(|e| Error::io(format!("writing {}", path.display()), e))
    }

    /// Reads a manifest and checks every recorded digest against the file
    /// on disk.
    pub fn read_verified(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        let m: RunManifest = serde_json::from_str(&text)?;
        for d in m.inputs.iter().chain(&m.outputs) {
            let now = sha256_file(&d.path)?;
            if now != d.sha256 {
                return Err(Error::Config(format!("digest mismatch for {}", d.path.display())));
            }
        }
        Ok(m)
    }
}

#[derive(Debug, Parser)]
#[command(name = "mmel", version, about = "Reweighted training over augmentation groups")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args, Clone, Default)]
pub struct Common {
    /// JSON file whose keys override the preset.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Starting configuration: blobs-smoke, cifar-desk or verify.
    #[arg(long)]
    pub preset: Option<String>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Validate the configuration and exit without writing anything.
    #[arg(long)]
    pub dry_run: bool,
    /// Output directory; overrides `out_dir`.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate augmentation groups and write them as JSON lines.
    GenAugment {
        #[command(flatten)]
        common: Common,
    },
    /// Train a model; writes a checkpoint, a metrics CSV and a manifest.
    Train {
        #[command(flatten)]
        common: Common,
        /// Teacher checkpoint for relabeling augmented samples.
        #[arg(long)]
        teacher: Option<PathBuf>,
        /// Single-threaded, fixed-order reductions; zero `seconds` column.
        #[arg(long)]
        strict_determinism: bool,
    },
    /// Evaluate a checkpoint on the configured evaluation split.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Compare closed-form weights with a numerical maximizer on random
    /// instances.
    VerifyTheorem {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        instances: Option<usize>,
    },
    /// Compare group-step gradients with finite differences.
    GradCheck {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        seeds: Option<usize>,
    },
}

/// Resolves preset, config file and flags into one configuration.
pub fn resolve(common: &Common) -> Result<Config> {
    let mut cfg = match &common.preset {
        Some(p) => Config::preset(p)?,
        None => Config::default(),
    };
    if let Some(path) = &common.config {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        let v: Value = serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {}", path.display(), e)))?;
        cfg = cfg.overlay(&v)?;
    }
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    if let Some(o) = &common.out {
        cfg.out_dir = o.clone();
    }
    Ok(cfg)
}

/// Writes a line to stdout; a closed pipe is not an error.
fn emit(line: String) {
    let mut out = std::io::stdout().lock();
    let _ = writeln!(out, "{}", line);
}

fn ensure_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(format!("creating {}", dir.display()), e))
}

/// Outcome of a command that completed without a runtime error.
pub enum Outcome {
    Done,
    VerificationFailed,
}

pub fn cmd_gen_augment(cfg: &Config, dry_run: bool) -> Result<Outcome> {
    cfg.validate()?;
    if dry_run {
        return Ok(Outcome::Done);
    }
    let data = load_data(cfg)?;
    let groups = build_groups(cfg, &data.train)?;
    ensure_dir(&cfg.out_dir)?;
    let path = cfg.out_dir.join("groups.jsonl");
    augment::write_groups(&path, &groups)?;
    let mut m = RunManifest::new("gen-augment", cfg.seed, serde_json::to_value(cfg)?);
    m.inputs = data.inputs.iter().map(|p| FileDigest::of(p)).collect::<Result<_>>()?;
    m.outputs.push(FileDigest::of(&path)?);
    m.results = json!({ "groups": groups.len(), "members_per_group": cfg.n_aug + 1 });
    m.write(&cfg.out_dir.join("gen-augment.manifest.json"))?;
    emit(format!("wrote {} groups to {}", groups.len(), path.display()));
    Ok(Outcome::Done)
}

fn prepare_groups(cfg: &Config, data: &LoadedData, teacher: Option<&TeacherHandle>) -> Result<Vec<AugmentedGroup>> {
    let mut groups = match &cfg.groups_path {
        Some(p) => augment::load_offline_groups(p)?,
        None => build_groups(cfg, &data.train)?,
    };
    let is_text = data
        .train
        .samples
        .first()
        .is_some_and(|s| s.payload.kind() == Kind::Text);
    if is_text && cfg.mode == TrainMode::MmelSoft && teacher.is_none() {
        return Err(Error::Config("mmel_soft on a text task needs --teacher".into()));
    }
    if let (Some(t), true, TrainMode::MmelHard | TrainMode::Uniform) = (teacher, is_text, cfg.mode) {
        groups = groups
            .iter()
            .map(|g| teacher::relabel_hard(g, t))
            .collect::<Result<_>>()?;
    }
    Ok(groups)
}

/// Everything a training run produces.
pub struct TrainRun {
    pub metrics: Vec<engine::MetricsRecord>,
    pub checkpoint: PathBuf,
    pub metrics_path: PathBuf,
    pub manifest: RunManifest,
}

pub fn run_training(cfg: &Config) -> Result<TrainRun> {
    cfg.validate()?;
    let train_cfg = cfg.train_config()?;
    let data = load_data(cfg)?;
    let teacher = cfg.teacher.as_deref().map(TeacherHandle::load).transpose()?;
    let groups = prepare_groups(cfg, &data, teacher.as_ref())?;
    let input_shape = data.train.input_shape(data.vocab)?;
    let classes = data.train.classes.unwrap_or(1);
    let spec = model_spec(cfg, &input_shape, classes)?;
    let normalization = data::compute_normalization(&data.train.samples);
    let encoder = InputEncoder::new(input_shape, normalization.clone());
    let train_data = TrainData {
        spec,
        encoder,
        samples: &data.train.samples,
        groups: &groups,
        eval: data.eval.as_ref().map(|d| d.samples.as_slice()),
        teacher: teacher.as_ref(),
        init: None,
    };
    ensure_dir(&cfg.out_dir)?;
    let ckpt = cfg.out_dir.join("model.ckpt");
    let metrics = match cfg.precision {
        Precision::F32 => {
            let out = engine::train::<f32>(&train_cfg, train_data)?;
            checkpoint::save(&ckpt, &out.model, normalization.as_ref())?;
            out.metrics
        }
        Precision::F64 => {
            let out = engine::train::<f64>(&train_cfg, train_data)?;
            checkpoint::save(&ckpt, &out.model, normalization.as_ref())?;
            out.metrics
        }
    };
    let metrics_path = cfg.out_dir.join("metrics.csv");
    engine::write_metrics_csv(&metrics_path, &metrics, cfg.strict_determinism)?;
    let mut m = RunManifest::new("train", cfg.seed, json!({ "config": cfg, "train": train_cfg }));
    let mut inputs = data.inputs.clone();
    inputs.extend(cfg.groups_path.clone());
    inputs.extend(cfg.teacher.clone());
    m.inputs = inputs.iter().map(|p| FileDigest::of(p)).collect::<Result<_>>()?;
    m.outputs = vec![FileDigest::of(&ckpt)?, FileDigest::of(&metrics_path)?];
    let last = metrics.last().expect("at least one epoch");
    m.results = json!({ "final_train_acc": last.train_acc, "final_eval_acc": last.eval_acc });
    m.write(&cfg.out_dir.join("train.manifest.json"))?;
    Ok(TrainRun {
        metrics,
        checkpoint: ckpt,
        metrics_path,
        manifest: m,
    })
}

pub fn cmd_train(cfg: &Config, dry_run: bool) -> Result<Outcome> {
    cfg.validate()?;
    if dry_run {
        return Ok(Outcome::Done);
    }
    let run = run_training(cfg)?;
    let last = run.metrics.last().expect("at least one epoch");
    emit(serde_json::to_string(last)?);
    emit(format!("checkpoint {}", run.checkpoint.display()));
    Ok(Outcome::Done)
}

fn evaluate_as<T: Real>(path: &Path, samples: &[crate::augment::Sample], threshold: f64) -> Result<engine::Evaluation> {
    let (model, header): (Model<T>, _) = checkpoint::load(path)?;
    let encoder = InputEncoder::new(header.model.input_shape.clone(), header.normalization);
    engine::evaluate(&model, &encoder, samples, threshold)
}

/// Evaluates a checkpoint in the precision it was saved in.
pub fn evaluate_checkpoint(
    path: &Path,
    samples: &[crate::augment::Sample],
    threshold: f64,
) -> Result<engine::Evaluation> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    match checkpoint::peek_dtype(&bytes)? {
        DType::F32 => evaluate_as::<f32>(path, samples, threshold),
        DType::F64 => evaluate_as::<f64>(path, samples, threshold),
    }
}

pub fn cmd_eval(cfg: &Config, checkpoint_path: &Path, dry_run: bool) -> Result<Outcome> {
    cfg.validate()?;
    if dry_run {
        return Ok(Outcome::Done);
    }
    let data = load_data(cfg)?;
    let eval = data.eval.as_ref().unwrap_or(&data.train);
    let e = evaluate_checkpoint(checkpoint_path, &eval.samples, cfg.regression_threshold)?;
    emit(format!("score {:.6}", e.score));
    emit(serde_json::to_string(&e)?);
    ensure_dir(&cfg.out_dir)?;
    let mut m = RunManifest::new("eval", cfg.seed, serde_json::to_value(cfg)?);
    let mut inputs = data.inputs.clone();
    inputs.push(checkpoint_path.to_path_buf());
    m.inputs = inputs.iter().map(|p| FileDigest::of(p)).collect::<Result<_>>()?;
    m.results = serde_json::to_value(&e)?;
    m.write(&cfg.out_dir.join("eval.manifest.json"))?;
    Ok(Outcome::Done)
}

pub fn cmd_verify(cfg: &Config, dry_run: bool) -> Result<Outcome> {
    if dry_run {
        return Ok(Outcome::Done);
    }
    let started = Instant::now();
    let reports = oracle::verify_theorem1(cfg.instances, cfg.seed)?;
    let summary = oracle::summarize(&reports);
    ensure_dir(&cfg.out_dir)?;
    let path = cfg.out_dir.join("verify-theorem.jsonl");
    let file = File::create(&path).map_err(|e| Error::io(format!("creating {}", path.display()), e))?;
    let mut out = BufWriter::new(file);
    for r in &reports {
        serde_json::to_writer(&mut out, r)?;
        out.write_all(b"\n").map_err(|e| Error::io("writing reports", e))?;
    }
    out.flush().map_err(|e| Error::io("writing reports", e))?;
    drop(out);
    let seconds = started.elapsed().as_secs_f64();
    emit(serde_json::to_string(
        &json!({ "summary": summary, "seconds": seconds }),
    )?);
    let mut m = RunManifest::new("verify-theorem", cfg.seed, json!({ "instances": cfg.instances }));
    m.outputs.push(FileDigest::of(&path)?);
    m.results = serde_json::to_value(&summary)?;
    m.write(&cfg.out_dir.join("verify-theorem.manifest.json"))?;
    Ok(if summary.passed {
        Outcome::Done
    } else {
        Outcome::VerificationFailed
    })
}

pub fn cmd_grad_check(cfg: &Config, dry_run: bool) -> Result<Outcome> {
    if dry_run {
        return Ok(Outcome::Done);
    }
    let mut checks = Vec::new();
    for mode in [TrainMode::MmelHard, TrainMode::MmelSoft] {
        for s in 0..cfg.grad_check_seeds as u64 {
            let c = oracle::grad_check_group(cfg.seed.wrapping_add(s), mode)?;
            emit(serde_json::to_string(&c)?);
            checks.push(c);
        }
    }
    let worst = checks.iter().map(|c| c.max_rel_error).fold(0.0, f64::max);
    let passed = checks.iter().all(|c| c.passed);
    emit(json!({ "checks": checks.len(), "max_rel_error": worst, "passed": passed }).to_string());
    ensure_dir(&cfg.out_dir)?;
    let mut m = RunManifest::new("grad-check", cfg.seed, json!({ "seeds": cfg.grad_check_seeds }));
    m.results = json!({ "checks": checks, "max_rel_error": worst, "passed": passed });
    m.write(&cfg.out_dir.join("grad-check.manifest.json"))?;
    Ok(if passed {
        Outcome::Done
    } else {
        Outcome::VerificationFailed
    })
}

fn dispatch(cli: Cli) -> Result<Outcome> {
    match cli.command {
        Command::GenAugment { common } => cmd_gen_augment(&resolve(&common)?, common.dry_run),
        Command::Train {
            common,
            teacher,
            strict_determinism,
        } => {
            let mut cfg = resolve(&common)?;
            if teacher.is_some() {
                cfg.teacher = teacher;
            }
            cfg.strict_determinism |= strict_determinism;
            cmd_train(&cfg, common.dry_run)
        }
        Command::Eval { common, checkpoint } => cmd_eval(&resolve(&common)?, &checkpoint, common.dry_run),
        Command::VerifyTheorem { common, instances } => {
            let mut cfg = resolve(&common)?;
            if let Some(n) = instances {
                cfg.instances = n;
            }
            cmd_verify(&cfg, common.dry_run)
        }
        Command::GradCheck { common, seeds } => {
            let mut cfg = resolve(&common)?;
            if let Some(n) = seeds {
                cfg.grad_check_seeds = n;
            }
            cmd_grad_check(&cfg, common.dry_run)
        }
    }
}

/// Parses `args` and runs the command; returns the process exit code.
pub fn run<I, S>(args: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli) {
        Ok(Outcome::Done) => EXIT_OK,
        Ok(Outcome::VerificationFailed) => {
            eprintln!("verification failed");
            EXIT_VERIFY
        }
        Err(e @ Error::Config(_)) => {
            eprintln!("error: {}", e);
            EXIT_USAGE
        }
        Err(e) => {
            eprintln!("error: {}", e);
            EXIT_RUNTIME
        }
    }
}
