//! Flat `key=value` run specification.
//!
//! One entry per line, `#` starts a comment, keys are dotted
//! (`accordion.eta=0.5`). Every key has a default, so an empty file is the
//! canonical desk run. Unknown keys are rejected.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use accordion_core::model::{gen_least_squares, gen_two_gaussian};
use accordion_core::presets::{self, sparse_mean};
use accordion_core::simulator::Policy;
use accordion_core::{AccordionConfig, Dataset, Level, Model, ModelKind, Scheme, TrainConfig};

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("unknown config key `{0}`")]
    UnknownKey(String),
    #[error("invalid value `{value}` for `{key}`: {reason}")]
    InvalidValue { key: String, value: String, reason: String },
    #[error("line {line}: expected `key=value`, got `{text}`")]
    Syntax { line: usize, text: String },
    #[error("{0}")]
    Invalid(String),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Generator {
    TwoGaussian,
    LeastSquares,
}

impl Generator {
    pub fn name(self) -> &'static str {
        match self {
            Generator::TwoGaussian => "two_gaussian",
            Generator::LeastSquares => "least_squares",
        }
    }
}

impl FromStr for Generator {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "two_gaussian" => Ok(Generator::TwoGaussian),
            "least_squares" => Ok(Generator::LeastSquares),
            _ => Err("expected two_gaussian or least_squares".into()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PolicyKind {
    Accordion,
    /// Always the low-compression (more communication) level.
    Low,
    /// Always the high-compression level.
    High,
}

impl PolicyKind {
    pub fn name(self) -> &'static str {
        match self {
            PolicyKind::Accordion => "accordion",
            PolicyKind::Low => "low",
            PolicyKind::High => "high",
        }
    }
}

impl FromStr for PolicyKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "accordion" => Ok(PolicyKind::Accordion),
            "low" => Ok(PolicyKind::Low),
            "high" => Ok(PolicyKind::High),
            _ => Err("expected accordion, low or high".into()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Format {
    Csv,
    Json,
}

impl FromStr for Format {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "csv" => Ok(Format::Csv),
            "json" => Ok(Format::Json),
            _ => Err("expected csv or json".into()),
        }
    }
}

/// Which inputs `verify` uses: the spec itself or a small hand-checkable toy.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Fixture {
    Spec,
    Toy,
}

impl FromStr for Fixture {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "spec" => Ok(Fixture::Spec),
            "toy" => Ok(Fixture::Toy),
            _ => Err("expected spec or toy".into()),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunSpec {
    pub model: ModelKind,
    pub hidden: usize,
    pub lambda: f64,

    pub generator: Generator,
    pub dim: usize,
    pub samples: usize,
    pub sigma: f64,
    pub mu_nonzeros: usize,
    pub mu_scale: f64,
    pub noise: f64,

    pub workers: usize,
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    pub lr_reference_batch: Option<usize>,
    pub warmup: usize,
    pub decay_epochs: Vec<usize>,
    pub decay_factor: f64,
    pub momentum: f64,

    pub scheme: Scheme,
    pub low_rank: usize,
    pub high_rank: usize,
    pub low_fraction: f64,
    pub high_fraction: f64,
    pub low_batch: usize,
    pub high_batch: usize,

    pub policy: PolicyKind,
    pub eta: f64,
    pub period: usize,
    pub monotone: bool,

    pub seed: u64,
    pub output_path: Option<PathBuf>,
    pub format: Format,

    pub verify_fixture: Fixture,
    pub verify_trials: usize,
    pub verify_samples: usize,
    pub verify_k2: usize,
    pub verify_gradients: usize,
    pub verify_fraction: f64,
    pub verify_window: usize,
    pub verify_eigs: usize,
    pub verify_hessian_samples: usize,
}

impl Default for RunSpec {
    /// The canonical desk run.
    fn default() -> Self {
        let base = presets::canonical_train_config(Policy::Static(Level::Dense), 0);
        let acc = presets::canonical_accordion();
        Self {
            model: ModelKind::Mlp,
            hidden: presets::CANONICAL_HIDDEN,
            lambda: 0.1,
            generator: Generator::TwoGaussian,
            dim: presets::CANONICAL_DIM,
            samples: presets::CANONICAL_SAMPLES,
            sigma: presets::CANONICAL_SIGMA,
            mu_nonzeros: presets::CANONICAL_MU_NONZEROS,
            mu_scale: presets::CANONICAL_MU_SCALE,
            noise: 0.1,
            workers: base.workers,
            epochs: base.epochs,
            batch: base.batch_per_worker,
            lr: base.base_lr,
            lr_reference_batch: base.lr_reference_batch,
            warmup: base.warmup_epochs,
            decay_epochs: base.decay_epochs,
            decay_factor: base.decay_factor,
            momentum: base.momentum,
            scheme: Scheme::PowerSgd,
            low_rank: 2,
            high_rank: 1,
            low_fraction: 0.1,
            high_fraction: 0.01,
            low_batch: 512,
            high_batch: 4096,
            policy: PolicyKind::Accordion,
            eta: acc.eta,
            period: acc.period_epochs,
            monotone: true,
            seed: 0,
            output_path: None,
            format: Format::Csv,
            verify_fixture: Fixture::Spec,
            verify_trials: 100,
            verify_samples: 1000,
            verify_k2: 5,
            verify_gradients: 200,
            verify_fraction: 0.1,
            verify_window: 3,
            verify_eigs: 1,
            verify_hessian_samples: 1024,
        }
    }
}

/// Every accepted key, in serialization order.
pub const KEYS: &[&str] = &[
    "model.kind",
    "model.hidden",
    "model.lambda",
    "data.generator",
    "data.dim",
    "data.samples",
    "data.sigma",
    "data.mu_nonzeros",
    "data.mu_scale",
    "data.noise",
    "train.workers",
    "train.epochs",
    "train.batch",
    "train.lr",
    "train.lr_reference_batch",
    "train.warmup",
    "train.decay_epochs",
    "train.decay_factor",
    "train.momentum",
    "compressor.scheme",
    "compressor.low.rank",
    "compressor.high.rank",
    "compressor.low.fraction",
    "compressor.high.fraction",
    "compressor.low.batch",
    "compressor.high.batch",
    "policy",
    "accordion.eta",
    "accordion.period",
    "accordion.monotone",
    "seed",
    "output.path",
    "output.format",
    "verify.fixture",
    "verify.trials",
    "verify.samples",
    "verify.k2",
    "verify.gradients",
    "verify.fraction",
    "verify.window",
    "verify.eigs",
    "verify.hessian_samples",
];

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T, ConfigError>
where
    T::Err: fmt::Display,
{
    value.parse().map_err(|e: T::Err| ConfigError::InvalidValue {
        key: key.to_string(),
        value: value.to_string(),
        reason: e.to_string(),
    })
}

fn parse_list(key: &str, value: &str) -> Result<Vec<usize>, ConfigError> {
    if value.trim().is_empty() {
        return Ok(Vec::new());
    }
    value.split(',').map(|v| parse(key, v.trim())).collect()
}

fn optional<T: FromStr>(key: &str, value: &str) -> Result<Option<T>, ConfigError>
where
    T::Err: fmt::Display,
{
    match value {
        "" | "auto" => Ok(None),
        v => parse(key, v).map(Some),
    }
}

impl RunSpec {
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        let v = value.trim();
        match key {
            "model.kind" => self.model = parse(key, v)?,
            "model.hidden" => self.hidden = parse(key, v)?,
            "model.lambda" => self.lambda = parse(key, v)?,
            "data.generator" => self.generator = parse(key, v)?,
            "data.dim" => self.dim = parse(key, v)?,
            "data.samples" => self.samples = parse(key, v)?,
            "data.sigma" => self.sigma = parse(key, v)?,
            "data.mu_nonzeros" => self.mu_nonzeros = parse(key, v)?,
            "data.mu_scale" => self.mu_scale = parse(key, v)?,
            "data.noise" => self.noise = parse(key, v)?,
            "train.workers" => self.workers = parse(key, v)?,
            "train.epochs" => self.epochs = parse(key, v)?,
            "train.batch" => self.batch = parse(key, v)?,
            "train.lr" => self.lr = parse(key, v)?,
            "train.lr_reference_batch" => self.lr_reference_batch = optional(key, v)?,
            "train.warmup" => self.warmup = parse(key, v)?,
            "train.decay_epochs" => self.decay_epochs = parse_list(key, v)?,
            "train.decay_factor" => self.decay_factor = parse(key, v)?,
            "train.momentum" => self.momentum = parse(key, v)?,
            "compressor.scheme" => self.scheme = parse(key, v)?,
            "compressor.low.rank" => self.low_rank = parse(key, v)?,
            "compressor.high.rank" => self.high_rank = parse(key, v)?,
            "compressor.low.fraction" => self.low_fraction = parse(key, v)?,
            "compressor.high.fraction" => self.high_fraction = parse(key, v)?,
            "compressor.low.batch" => self.low_batch = parse(key, v)?,
            "compressor.high.batch" => self.high_batch = parse(key, v)?,
            "policy" => self.policy = parse(key, v)?,
            "accordion.eta" => self.eta = parse(key, v)?,
            "accordion.period" => self.period = parse(key, v)?,
            "accordion.monotone" => self.monotone = parse(key, v)?,
            "seed" => self.seed = parse(key, v)?,
            "output.path" => self.output_path = if v.is_empty() { None } else { Some(PathBuf::from(v)) },
            "output.format" => self.format = parse(key, v)?,
            "verify.fixture" => self.verify_fixture = parse(key, v)?,
            "verify.trials" => self.verify_trials = parse(key, v)?,
            "verify.samples" => self.verify_samples = parse(key, v)?,
            "verify.k2" => self.verify_k2 = parse(key, v)?,
            "verify.gradients" => self.verify_gradients = parse(key, v)?,
            "verify.fraction" => self.verify_fraction = parse(key, v)?,
            "verify.window" => self.verify_window = parse(key, v)?,
            "verify.eigs" => self.verify_eigs = parse(key, v)?,
            "verify.hessian_samples" => self.verify_hessian_samples = parse(key, v)?,
            _ => return Err(ConfigError::UnknownKey(key.to_string())),
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<String> {
        let list = |v: &[usize]| v.iter().map(usize::to_string).collect::<Vec<_>>().join(",");
        Some(match key {
            "model.kind" => self.model.name().to_string(),
            "model.hidden" => self.hidden.to_string(),
            "model.lambda" => self.lambda.to_string(),
            "data.generator" => self.generator.name().to_string(),
            "data.dim" => self.dim.to_string(),
            "data.samples" => self.samples.to_string(),
            "data.sigma" => self.sigma.to_string(),
            "data.mu_nonzeros" => self.mu_nonzeros.to_string(),
            "data.mu_scale" => self.mu_scale.to_string(),
            "data.noise" => self.noise.to_string(),
            "train.workers" => self.workers.to_string(),
            "train.epochs" => self.epochs.to_string(),
            "train.batch" => self.batch.to_string(),
            "train.lr" => self.lr.to_string(),
            "train.lr_reference_batch" => self.lr_reference_batch.map_or("auto".into(), |b| b.to_string()),
            "train.warmup" => self.warmup.to_string(),
            "train.decay_epochs" => list(&self.decay_epochs),
            "train.decay_factor" => self.decay_factor.to_string(),
            "train.momentum" => self.momentum.to_string(),
            "compressor.scheme" => self.scheme.name().to_string(),
            "compressor.low.rank" => self.low_rank.to_string(),
            "compressor.high.rank" => self.high_rank.to_string(),
            "compressor.low.fraction" => self.low_fraction.to_string(),
            "compressor.high.fraction" => self.high_fraction.to_string(),
            "compressor.low.batch" => self.low_batch.to_string(),
            "compressor.high.batch" => self.high_batch.to_string(),
            "policy" => self.policy.name().to_string(),
            "accordion.eta" => self.eta.to_string(),
            "accordion.period" => self.period.to_string(),
            "accordion.monotone" => self.monotone.to_string(),
            "seed" => self.seed.to_string(),
            "output.path" => self
                .output_path
                .as_ref()
                .map_or(String::new(), |p| p.display().to_string()),
            "output.format" => match self.format {
                Format::Csv => "csv".into(),
                Format::Json => "json".into(),
            },
            "verify.fixture" => match self.verify_fixture {
                Fixture::Spec => "spec".into(),
                Fixture::Toy => "toy".into(),
            },
            "verify.trials" => self.verify_trials.to_string(),
            "verify.samples" => self.verify_samples.to_string(),
            "verify.k2" => self.verify_k2.to_string(),
            "verify.gradients" => self.verify_gradients.to_string(),
            "verify.fraction" => self.verify_fraction.to_string(),
            "verify.window" => self.verify_window.to_string(),
            "verify.eigs" => self.verify_eigs.to_string(),
            "verify.hessian_samples" => self.verify_hessian_samples.to_string(),
            _ => return None,
        })
    }

    /// Parses config text on top of the defaults.
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut spec = Self::default();
        spec.apply_text(text)?;
        Ok(spec)
    }

    pub fn apply_text(&mut self, text: &str) -> Result<(), ConfigError> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            self.apply_assignment(line).map_err(|e| match e {
                ConfigError::Syntax { text, .. } => ConfigError::Syntax { line: i + 1, text },
                other => other,
            })?;
        }
        Ok(())
    }

    /// Applies one `key=value` pair.
    pub fn apply_assignment(&mut self, assignment: &str) -> Result<(), ConfigError> {
        let (key, value) = assignment.split_once('=').ok_or_else(|| ConfigError::Syntax {
            line: 0,
            text: assignment.to_string(),
        })?;
        self.set(key.trim(), value)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::parse(&text)
    }

    pub fn serialize(&self) -> String {
        KEYS.iter()
            .map(|k| format!("{k}={}\n", self.get(k).expect("every listed key is readable")))
            .collect()
    }

    /// Data parameters and seed; runs are only comparable when these agree.
    pub fn data_key(&self) -> Vec<String> {
        KEYS.iter()
            .filter(|k| k.starts_with("data.") || **k == "seed")
            .map(|k| self.get(k).unwrap_or_default())
            .collect()
    }

    /// The (low, high) levels for the configured scheme.
    pub fn levels(&self) -> (Level, Level) {
        match self.scheme {
            Scheme::Dense => (Level::Dense, Level::Dense),
            Scheme::PowerSgd => (
                Level::PowerSgd { rank: self.low_rank },
                Level::PowerSgd { rank: self.high_rank },
            ),
            Scheme::TopK => (
                Level::TopK {
                    fraction: self.low_fraction,
                },
                Level::TopK {
                    fraction: self.high_fraction,
                },
            ),
            Scheme::BatchSize => (
                Level::BatchSize { batch: self.low_batch },
                Level::BatchSize { batch: self.high_batch },
            ),
        }
    }

    pub fn policy(&self) -> Result<Policy, ConfigError> {
        let (low, high) = self.levels();
        Ok(match self.policy {
            PolicyKind::Low => Policy::Static(low),
            PolicyKind::High => Policy::Static(high),
            PolicyKind::Accordion => {
                let acc = match self.scheme {
                    Scheme::Dense => {
                        return Err(ConfigError::Invalid(
                            "policy=accordion needs a compressing scheme, not dense".into(),
                        ))
                    }
                    Scheme::BatchSize => AccordionConfig {
                        batch_monotone_increase: self.monotone,
                        ..AccordionConfig::batch_size(self.low_batch, self.high_batch)
                    },
                    _ => AccordionConfig::compression(low, high),
                };
                Policy::Accordion(AccordionConfig {
                    eta: self.eta,
                    period_epochs: self.period,
                    ..acc
                })
            }
        })
    }

    pub fn train_config(&self) -> Result<TrainConfig, ConfigError> {
        // in batch-size mode the per-worker batch is the scheduled one
        let batch = if self.scheme == Scheme::BatchSize {
            self.low_batch
        } else {
            self.batch
        };
        let config = TrainConfig {
            workers: self.workers,
            epochs: self.epochs,
            batch_per_worker: batch,
            base_lr: self.lr,
            lr_reference_batch: self.lr_reference_batch,
            warmup_epochs: self.warmup,
            decay_epochs: self.decay_epochs.clone(),
            decay_factor: self.decay_factor,
            momentum: self.momentum,
            policy: self.policy()?,
            seed: self.seed,
        };
        config.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        Ok(config)
    }

    pub fn dataset(&self) -> Result<Dataset, ConfigError> {
        let invalid = |e: accordion_core::Error| ConfigError::Invalid(e.to_string());
        match self.generator {
            Generator::TwoGaussian => {
                if self.mu_nonzeros > self.dim {
                    return Err(ConfigError::Invalid(format!(
                        "data.mu_nonzeros = {} exceeds data.dim = {}",
                        self.mu_nonzeros, self.dim
                    )));
                }
                let mu = sparse_mean(self.dim, self.mu_nonzeros, self.mu_scale);
                gen_two_gaussian(&mu, self.sigma, self.samples, self.seed).map_err(invalid)
            }
            Generator::LeastSquares => {
                if self.dim == 0 || self.samples == 0 {
                    return Err(ConfigError::Invalid(
                        "data.dim and data.samples must be positive".into(),
                    ));
                }
                Ok(gen_least_squares(self.dim, self.samples, self.noise, self.seed).0)
            }
        }
    }

    pub fn build_model(&self) -> Result<Model, ConfigError> {
        // classifiers need ±1 labels; regression models accept either generator
        let classifier = self.model.is_classifier();
        if classifier && self.generator != Generator::TwoGaussian {
            return Err(ConfigError::Invalid(format!(
                "model.kind={} does not fit data.generator={}",
                self.model.name(),
                self.generator.name()
            )));
        }
        if self.model == ModelKind::Mlp && self.hidden == 0 {
            return Err(ConfigError::Invalid("model.hidden must be positive".into()));
        }
        Ok(Model::build(self.model, self.dim, self.hidden, self.lambda, self.seed))
    }
}
