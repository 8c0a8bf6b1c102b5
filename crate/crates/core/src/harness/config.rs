use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::analysis::REPORT_DELTAS;
use crate::compander::{DecayMode, ReparamPolicy};
use crate::error::{Error, Result};
use crate::harness::data::SynthSpec;
use crate::nn::{Architecture, InitScheme};
use crate::optim::{LrSchedule, OptimizerConfig};
use crate::reparam::ReparamSpec;
use crate::tensor::Dtype;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ModelConfig {
    Mlp { sizes: Vec<usize> },
    /// Two conv blocks and a linear head, shaped from the dataset.
    SmallCnn,
    Custom { architecture: Architecture },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum DatasetConfig {
    Synthetic {
        #[serde(flatten)]
        spec: SynthSpec,
        #[serde(default = "test_fraction")]
        test_fraction: f64,
    },
    Mnist {
        images: PathBuf,
        labels: PathBuf,
        #[serde(default)]
        subset_size: Option<usize>,
        /// Separate test files; without them a fraction of the subset is held out.
        #[serde(default)]
        test_images: Option<PathBuf>,
        #[serde(default)]
        test_labels: Option<PathBuf>,
        #[serde(default = "test_fraction")]
        test_fraction: f64,
    },
    Cifar10 {
        train: Vec<PathBuf>,
        #[serde(default)]
        test: Vec<PathBuf>,
        #[serde(default)]
        subset_size: Option<usize>,
        #[serde(default = "test_fraction")]
        test_fraction: f64,
        #[serde(default = "cifar_mean")]
        mean: [f64; 3],
        #[serde(default = "cifar_std")]
        std: [f64; 3],
    },
}

fn test_fraction() -> f64 {
    0.2
}

pub fn cifar_mean() -> [f64; 3] {
    [0.4914, 0.4822, 0.4465]
}

pub fn cifar_std() -> [f64; 3] {
    [0.2470, 0.2435, 0.2616]
}

impl DatasetConfig {
    /// Resolves relative paths against `base`.
    pub fn rebase(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        match self {
            DatasetConfig::Synthetic { .. } => {}
            DatasetConfig::Mnist {
                images,
                labels,
                test_images,
                test_labels,
                ..
            } => {
                fix(images);
                fix(labels);
                test_images.iter_mut().for_each(fix);
                test_labels.iter_mut().for_each(fix);
            }
            DatasetConfig::Cifar10 { train, test, .. } => {
                train.iter_mut().chain(test.iter_mut()).for_each(fix);
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnalysisConfig {
    /// Layer indices whose weight is traced; empty traces every weighted layer.
    #[serde(default)]
    pub trace_layers: Vec<usize>,
    #[serde(default = "deltas")]
    pub deltas: Vec<f64>,
}

fn deltas() -> Vec<f64> {
    REPORT_DELTAS.to_vec()
}

impl Default for AnalysisConfig {
    fn default() -> Self {
        AnalysisConfig {
            trace_layers: Vec::new(),
            deltas: deltas(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub model: ModelConfig,
    pub dataset: DatasetConfig,
    #[serde(default = "seeds")]
    pub seeds: Vec<u64>,
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: OptimizerConfig,
    #[serde(default = "LrSchedule::constant")]
    pub schedule: LrSchedule,
    #[serde(default)]
    pub lambda: f64,
    #[serde(default = "ReparamSpec::identity")]
    pub reparam: ReparamSpec,
    #[serde(default)]
    pub policy: ReparamPolicy,
    #[serde(default)]
    pub init: InitScheme,
    #[serde(default)]
    pub decay: DecayMode,
    #[serde(default)]
    pub analysis: AnalysisConfig,
    #[serde(default = "validation_split")]
    pub validation_split: f64,
    /// Seed of dataset subsampling and the test hold-out, shared by all runs.
    #[serde(default)]
    pub data_seed: u64,
    #[serde(default = "precision")]
    pub precision: Dtype,
    /// Batch size used for validation and test evaluation.
    #[serde(default = "eval_batch")]
    pub eval_batch_size: usize,
}

fn seeds() -> Vec<u64> {
    vec![0]
}
fn validation_split() -> f64 {
    0.1
}
fn precision() -> Dtype {
    Dtype::F64
}
fn eval_batch() -> usize {
    500
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let c: ExperimentConfig = serde_json::from_str(text)?;
        c.validate()?;
        Ok(c)
    }

    /// Reads a config file; relative dataset paths are taken from its directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        let mut c: ExperimentConfig = serde_json::from_str(&text)?;
        if let Some(dir) = path.parent() {
            c.dataset.rebase(dir);
        }
        c.validate()?;
        Ok(c)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs < 1 {
            return Err(Error::Config("epochs must be >= 1".into()));
        }
        if self.batch_size < 1 || self.eval_batch_size < 1 {
            return Err(Error::Config("batch sizes must be >= 1".into()));
        }
        if !(self.validation_split > 0.0 && self.validation_split < 1.0) {
            return Err(Error::Config(format!(
                "validation_split {} outside (0, 1)",
                self.validation_split
            )));
        }
        if self.seeds.is_empty() {
            return Err(Error::Config("at least one seed is required".into()));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::Config(format!("lambda {}", self.lambda)));
        }
        if self.analysis.deltas.iter().any(|&d| !(d > 0.0)) {
            return Err(Error::Config("deltas must be positive".into()));
        }
        self.schedule.validate()?;
        self.reparam.validate()?;
        match &self.dataset {
            DatasetConfig::Synthetic { test_fraction, .. }
            | DatasetConfig::Mnist { test_fraction, .. }
            | DatasetConfig::Cifar10 { test_fraction, .. } => {
                if !(*test_fraction > 0.0 && *test_fraction < 1.0) {
                    return Err(Error::Config(format!(
                        "test_fraction {test_fraction} outside (0, 1)"
                    )));
                }
            }
        }
        Ok(())
    }

    /// Builds the architecture for samples of `sample_shape` and `classes` labels.
    pub fn architecture(&self, sample_shape: &[usize], classes: usize) -> Result<Architecture> {
        match &self.model {
            ModelConfig::Mlp { sizes } => {
                let n: usize = sample_shape.iter().product();
                if sizes.first() != Some(&n) || sizes.last() != Some(&classes) {
                    return Err(Error::Config(format!(
                        "mlp sizes {sizes:?} do not fit inputs of {n} features and {classes} classes"
                    )));
                }
                Architecture::mlp(sizes)
            }
            ModelConfig::SmallCnn => match *sample_shape {
                [c, h, w] => Architecture::small_cnn(c, h, w, classes),
                [h, w] => Architecture::small_cnn(1, h, w, classes),
                _ => Err(Error::Config(format!(
                    "small_cnn needs image samples, got shape {sample_shape:?}"
                ))),
            },
            ModelConfig::Custom { architecture } => {
                Architecture::new(architecture.input_shape.clone(), architecture.layers.clone())
            }
        }
    }
}
