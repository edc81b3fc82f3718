//! Experiment configuration: named recipes, JSON files, dotted-key overrides
//! and the seed streams every subsystem draws from.

use std::fs;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::data::RingMixtureSpec;
use crate::error::{Error, Result};
use crate::mcmc::RevisionConfig;
use crate::nets::{preset, LayerSpec, NetPreset};
use crate::train::{OptimizerKind, SaSchedule, SslWeights, TrainConfig, TrainMode};

pub const RECIPE_NAMES: [&str; 3] = ["toy32-unsup", "toy2circ-ssl", "mnist-smoke"];

/// Where training and test data come from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "lowercase", deny_unknown_fields)]
pub enum DataConfig {
    /// Synthetic ring mixture; a second independent draw serves as the test set.
    Rings {
        spec: RingMixtureSpec,
        labels_per_class: usize,
        test_samples: usize,
    },
    /// IDX image files, optionally truncated to their first rows.
    Idx {
        train_images: PathBuf,
        train_labels: PathBuf,
        test_images: PathBuf,
        test_labels: PathBuf,
        train_limit: Option<usize>,
        test_limit: Option<usize>,
        labels_per_class: usize,
    },
}

impl DataConfig {
    pub fn labels_per_class(&self) -> usize {
        match self {
            DataConfig::Rings { labels_per_class, .. } | DataConfig::Idx { labels_per_class, .. } => *labels_per_class,
        }
    }

    fn dim(&self) -> usize {
        match self {
            DataConfig::Rings { .. } => 2,
            DataConfig::Idx { .. } => 784,
        }
    }

    fn classes(&self) -> usize {
        match self {
            DataConfig::Rings { spec, .. } => spec.classes(),
            DataConfig::Idx { .. } => 10,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridConfig {
    pub x_range: (f64, f64),
    pub y_range: (f64, f64),
    pub resolution: (usize, usize),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    /// Distance below which a sample covers a mode.
    pub coverage_threshold: f64,
    pub repetitions: usize,
    pub samples_per_rep: usize,
    /// Add observation noise to generated samples before evaluation.
    pub generate_with_noise: bool,
    /// Kernel used to revise generated samples at evaluation time.
    pub revision: RevisionConfig,
    /// Proposals compared before and after revision.
    pub energy_batch: usize,
    /// Potential grid; only meaningful for 2-D data.
    pub grid: Option<GridConfig>,
    /// Samples requested per class from conditional generation (0 disables it).
    pub conditional_samples: usize,
    pub conditional_cap: usize,
    pub interpolation_steps: usize,
}

impl EvalConfig {
    fn validate(&self) -> Result<()> {
        if !(self.coverage_threshold > 0.0 && self.coverage_threshold.is_finite()) {
            return Err(Error::Config(format!(
                "eval.coverage_threshold must be > 0, got {}",
                self.coverage_threshold
            )));
        }
        if self.repetitions == 0 || self.samples_per_rep == 0 || self.energy_batch == 0 {
            return Err(Error::Config(
                "eval.repetitions, eval.samples_per_rep and eval.energy_batch must be >= 1".into(),
            ));
        }
        if let Some(g) = &self.grid {
            if g.resolution.0 < 2 || g.resolution.1 < 2 || g.x_range.0.partial_cmp(&g.x_range.1) != Some(std::cmp::Ordering::Less) || g.y_range.0.partial_cmp(&g.y_range.1) != Some(std::cmp::Ordering::Less) {
                return Err(Error::Config("eval.grid needs increasing ranges and resolution >= 2".into()));
            }
        }
        if self.interpolation_steps < 2 {
            return Err(Error::Config("eval.interpolation_steps must be >= 2".into()));
        }
        self.revision.validate()
    }
}

/// A complete, self-describing experiment.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub recipe: String,
    pub mode: TrainMode,
    pub seed: u64,
    /// Worker threads for revision; results do not depend on it.
    pub threads: usize,
    pub data: DataConfig,
    pub nets: NetPreset,
    /// Kernel used during training.
    pub revision: RevisionConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

fn ring_eval(threshold: f64, grid: GridConfig, revision: RevisionConfig) -> EvalConfig {
    EvalConfig {
        coverage_threshold: threshold,
        repetitions: 100,
        samples_per_rep: 100,
        generate_with_noise: false,
        revision,
        energy_batch: 1000,
        grid: Some(grid),
        conditional_samples: 0,
        conditional_cap: 0,
        interpolation_steps: 10,
    }
}

impl ExperimentConfig {
    /// Built-in recipe by name.
    pub fn recipe(name: &str) -> Result<Self> {
        match name {
            "toy32-unsup" => {
                let spec = RingMixtureSpec::toy32();
                let threshold = 3.0 * spec.component_std;
                let revision = RevisionConfig::sgld(30, 0.01, 0.0);
                Ok(ExperimentConfig {
                    recipe: name.into(),
                    mode: TrainMode::Unsup,
                    seed: 0,
                    threads: 1,
                    data: DataConfig::Rings {
                        spec,
                        labels_per_class: 0,
                        test_samples: 0,
                    },
                    nets: preset("toy32")?,
                    revision: revision.clone(),
                    train: TrainConfig {
                        iterations: 20_000,
                        batch_unsup: 100,
                        batch_sup: 0,
                        theta_rate: SaSchedule::new(3e-4, 10_000),
                        phi_rate: SaSchedule::new(3e-4, 10_000),
                        weights: SslWeights {
                            alpha: 0.0,
                            lambda_c: 0.0,
                            lambda_s: 0.0,
                        },
                        ..TrainConfig::default()
                    },
                    eval: ring_eval(
                        threshold,
                        GridConfig {
                            x_range: (-5.0, 5.0),
                            y_range: (-5.0, 5.0),
                            resolution: (101, 101),
                        },
                        revision,
                    ),
                })
            }
            "toy2circ-ssl" => {
                let spec = RingMixtureSpec::toy2circ();
                let threshold = 3.0 * spec.component_std;
                let revision = RevisionConfig::sgld(30, 0.01, 0.0);
                let mut eval = ring_eval(
                    threshold,
                    GridConfig {
                        x_range: (-5.0, 5.0),
                        y_range: (-5.0, 5.0),
                        resolution: (101, 101),
                    },
                    revision.clone(),
                );
                eval.conditional_samples = 200;
                eval.conditional_cap = 20_000;
                Ok(ExperimentConfig {
                    recipe: name.into(),
                    mode: TrainMode::Ssl,
                    seed: 0,
                    threads: 1,
                    data: DataConfig::Rings {
                        spec,
                        labels_per_class: 4,
                        test_samples: 2000,
                    },
                    nets: preset("toy2circ")?,
                    revision,
                    train: TrainConfig {
                        iterations: 10_000,
                        batch_unsup: 100,
                        batch_sup: 8,
                        theta_rate: SaSchedule::new(3e-4, 10_000),
                        phi_rate: SaSchedule::new(3e-4, 10_000),
                        weights: SslWeights {
                            alpha: 1.0,
                            lambda_c: 0.3,
                            lambda_s: 0.1,
                        },
                        ..TrainConfig::default()
                    },
                    eval,
                })
            }
            "mnist-smoke" => {
                let root = PathBuf::from("data/mnist-5k");
                let revision = RevisionConfig::sgld(20, 0.01, 0.0);
                Ok(ExperimentConfig {
                    recipe: name.into(),
                    mode: TrainMode::Ssl,
                    seed: 0,
                    threads: 1,
                    data: DataConfig::Idx {
                        train_images: root.join("train-images-idx3-ubyte.gz"),
                        train_labels: root.join("train-labels-idx1-ubyte.gz"),
                        test_images: root.join("t10k-images-idx3-ubyte.gz"),
                        test_labels: root.join("t10k-labels-idx1-ubyte.gz"),
                        train_limit: Some(1000),
                        test_limit: None,
                        labels_per_class: 10,
                    },
                    nets: preset("mnist-mlp")?,
                    revision: revision.clone(),
                    train: TrainConfig {
                        iterations: 2000,
                        batch_unsup: 30,
                        batch_sup: 10,
                        theta_optimizer: OptimizerKind::RmsProp,
                        phi_optimizer: OptimizerKind::RmsProp,
                        theta_rate: SaSchedule::new(3e-4, 10_000),
                        phi_rate: SaSchedule::new(3e-4, 10_000),
                        weights: SslWeights {
                            alpha: 1.0,
                            lambda_c: 0.3,
                            lambda_s: 0.0,
                        },
                        ..TrainConfig::default()
                    },
                    eval: EvalConfig {
                        coverage_threshold: 1.0,
                        repetitions: 1,
                        samples_per_rep: 100,
                        generate_with_noise: false,
                        revision,
                        energy_batch: 100,
                        grid: None,
                        conditional_samples: 0,
                        conditional_cap: 0,
                        interpolation_steps: 10,
                    },
                })
            }
            other => Err(Error::Config(format!(
                "unknown recipe {other:?} (expected one of {})",
                RECIPE_NAMES.join(", ")
            ))),
        }
    }

    pub fn from_json_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        let v: Value = serde_json::from_str(&text)?;
        Self::from_value(v)
    }

    /// Parses a JSON value. An object without a `data` section names a recipe
    /// and may carry dotted-key overrides next to it.
    pub fn from_value(v: Value) -> Result<Self> {
        let v = expand(v)?;
        let cfg: ExperimentConfig = serde_json::from_value(v).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Applies `key=value` overrides with dotted keys; values parse as JSON
    /// and fall back to plain strings.
    pub fn with_overrides<S: AsRef<str>>(&self, overrides: &[S]) -> Result<Self> {
        let mut v = serde_json::to_value(self)?;
        for o in overrides {
            let (key, raw) = o
                .as_ref()
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override {:?} is not of the form key=value", o.as_ref())))?;
            let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
            set_dotted(&mut v, key.trim(), value)?;
        }
        Self::from_value(v)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Training settings with the experiment's revision kernel and thread count.
    pub fn train_config(&self) -> TrainConfig {
        let mut t = self.train.clone();
        t.revision = self.revision.clone();
        t.revision.threads = self.threads;
        t
    }

    pub fn eval_revision(&self) -> RevisionConfig {
        let mut r = self.eval.revision.clone();
        r.threads = self.threads;
        r
    }

    pub fn streams(&self) -> SeedStreams {
        SeedStreams::new(self.seed)
    }

    pub fn validate(&self) -> Result<()> {
        if self.threads == 0 {
            return Err(Error::Config("threads must be >= 1".into()));
        }
        if let DataConfig::Rings { spec, .. } = &self.data {
            spec.validate()?;
        }
        self.revision.validate()?;
        self.train.validate(self.mode)?;
        self.eval.validate()?;
        let labels = self.data.labels_per_class();
        if self.mode == TrainMode::Ssl && labels == 0 {
            return Err(Error::Config(
                "mode = \"ssl\" conflicts with data.labels_per_class = 0; ssl training needs labels".into(),
            ));
        }
        let input = first_width(&self.nets.energy);
        if input != Some(self.data.dim()) {
            return Err(Error::Config(format!(
                "nets.energy input width {input:?} conflicts with data.source dimension {}",
                self.data.dim()
            )));
        }
        let classes = last_width(&self.nets.energy);
        if self.mode == TrainMode::Ssl && classes != Some(self.data.classes()) {
            return Err(Error::Config(format!(
                "nets.energy output width {classes:?} conflicts with {} classes in data.source",
                self.data.classes()
            )));
        }
        if last_width(&self.nets.generator) != Some(self.data.dim()) {
            return Err(Error::Config(format!(
                "nets.generator output width {:?} conflicts with data.source dimension {}",
                last_width(&self.nets.generator),
                self.data.dim()
            )));
        }
        if self.eval.grid.is_some() && self.data.dim() != 2 {
            return Err(Error::Config("eval.grid conflicts with data.source: grids need 2-D data".into()));
        }
        Ok(())
    }
}

fn first_width(specs: &[LayerSpec]) -> Option<usize> {
    specs.iter().find_map(|s| match s {
        LayerSpec::Dense { input, .. } => Some(*input),
        LayerSpec::BatchNorm { .. } => None,
    })
}

fn last_width(specs: &[LayerSpec]) -> Option<usize> {
    specs.iter().rev().find_map(|s| match s {
        LayerSpec::Dense { output, .. } => Some(*output),
        LayerSpec::BatchNorm { .. } => None,
    })
}

fn expand(v: Value) -> Result<Value> {
    let Value::Object(map) = &v else {
        return Ok(v);
    };
    if map.contains_key("data") {
        return Ok(v);
    }
    let name = map
        .get("recipe")
        .and_then(Value::as_str)
        .ok_or_else(|| Error::Config("config needs either a data section or a recipe name".into()))?;
    let mut base = serde_json::to_value(ExperimentConfig::recipe(name)?)?;
    for (k, val) in map.iter().filter(|(k, _)| k.as_str() != "recipe") {
        set_dotted(&mut base, k, val.clone())?;
    }
    Ok(base)
}

/// Replaces the value at a dotted path; every segment must already exist,
/// except that `null` optional fields may be filled in.
pub fn set_dotted(root: &mut Value, key: &str, value: Value) -> Result<()> {
    if key.is_empty() {
        return Err(Error::Config("empty override key".into()));
    }
    let mut cur = root;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let slot = match cur {
            Value::Object(map) => map.get_mut(*part),
            Value::Array(items) => part.parse::<usize>().ok().and_then(|k| items.get_mut(k)),
            _ => None,
        };
        let slot = slot.ok_or_else(|| Error::Config(format!("unknown config key {key:?}")))?;
        if i + 1 == parts.len() {
            *slot = value;
            return Ok(());
        }
        cur = slot;
    }
    unreachable!("loop returns on the last segment")
}

/// Named random streams derived from one seed.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stream {
    Data,
    Init,
    Proposal,
    Revision,
    Eval,
    Batch,
}

#[derive(Clone, Copy, Debug)]
pub struct SeedStreams {
    seed: u64,
}

impl SeedStreams {
    pub fn new(seed: u64) -> Self {
        SeedStreams { seed }
    }

    /// Independent generator for `s`: same seed, distinct ChaCha stream.
    pub fn rng(&self, s: Stream) -> ChaCha8Rng {
        let mut r = ChaCha8Rng::seed_from_u64(self.seed);
        r.set_stream(s as u64 + 1);
        r
    }
}
