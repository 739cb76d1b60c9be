use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{load_cifar10, CifarSplit, Dataset, SyntheticSpec};
use crate::error::{Error, Result};
use crate::optimizer::{AdmmHyper, EtaPlacement};
use crate::ranking::RankingConfig;
use crate::vit::VitConfig;

/// Environment variable naming the directory that holds the CIFAR-10 binaries
/// when a config does not give a path.
pub const DATA_ROOT_ENV: &str = "VITPRUNE_DATA_ROOT";

/// Fraction of the training data held out, taken from the tail by index.
pub const VALIDATION_FRACTION: f64 = 0.1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum DataSpec {
    Cifar10 {
        #[serde(default)]
        path: Option<PathBuf>,
        /// Use only the first `train_samples` training images.
        #[serde(default)]
        train_samples: Option<usize>,
        #[serde(default)]
        test_samples: Option<usize>,
    },
    Synthetic {
        #[serde(flatten)]
        spec: SyntheticSpec,
        #[serde(default = "default_test_samples")]
        test_samples: usize,
    },
}

fn default_test_samples() -> usize {
    500
}

impl Default for DataSpec {
    fn default() -> Self {
        DataSpec::Synthetic {
            spec: SyntheticSpec::new(0, 10, 2000),
            test_samples: default_test_samples(),
        }
    }
}

/// Training and test data.
#[derive(Debug, Clone)]
pub struct Splits {
    pub train: Dataset,
    pub val: Dataset,
    pub test: Dataset,
}

impl DataSpec {
    pub fn load(&self) -> Result<Splits> {
        let (full, test) = match self {
            DataSpec::Cifar10 {
                path,
                train_samples,
                test_samples,
            } => {
                let root = resolve_data_root(path.as_deref())?;
                let mut train = load_cifar10(&root, CifarSplit::Train)?;
                let mut test = load_cifar10(&root, CifarSplit::Test)?;
                if let Some(n) = train_samples {
                    train = train.slice(0, *n);
                }
                if let Some(n) = test_samples {
                    test = test.slice(0, *n);
                }
                (train, test)
            }
            DataSpec::Synthetic { spec, test_samples } => {
                // One draw so both parts share the class prototypes.
                let all = SyntheticSpec {
                    samples: spec.samples + test_samples,
                    ..spec.clone()
                }
                .generate()?;
                (all.slice(0, spec.samples), all.slice(spec.samples, all.len()))
            }
        };
        let (train, val) = full.split_validation(VALIDATION_FRACTION);
        if train.is_empty() || val.is_empty() || test.is_empty() {
            return Err(Error::Data(format!(
                "empty split: {} train, {} validation, {} test",
                train.len(),
                val.len(),
                test.len()
            )));
        }
        Ok(Splits { train, val, test })
    }

    pub fn image_size(&self) -> usize {
        match self {
            DataSpec::Cifar10 { .. } => 32,
            DataSpec::Synthetic { spec, .. } => spec.image_size,
        }
    }

    pub fn classes(&self) -> usize {
        match self {
            DataSpec::Cifar10 { .. } => 10,
            DataSpec::Synthetic { spec, .. } => spec.classes,
        }
    }
}

fn resolve_data_root(path: Option<&Path>) -> Result<PathBuf> {
    if let Some(p) = path {
        return Ok(p.to_path_buf());
    }
    std::env::var_os(DATA_ROOT_ENV)
        .map(PathBuf::from)
        .ok_or_else(|| Error::Config(format!("no CIFAR-10 path given and {DATA_ROOT_ENV} is unset")))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimizerConfig {
    pub rho: f64,
    pub lambda: f64,
    pub eta: f64,
    pub eta_placement: EtaPlacement,
    /// Soft-pruning epochs `E`.
    pub epochs: usize,
    pub batch_size: usize,
    /// Defaults to a fifth of `E`, rounded up.
    pub finetune_epochs: Option<usize>,
    pub dense_epochs: usize,
    /// Dense-training learning rate; defaults to `eta`.
    pub dense_eta: Option<f64>,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            rho: 1e-3,
            lambda: 1e-2,
            eta: 0.05,
            eta_placement: EtaPlacement::Full,
            epochs: 10,
            batch_size: 128,
            finetune_epochs: None,
            dense_epochs: 10,
            dense_eta: None,
        }
    }
}

impl OptimizerConfig {
    pub fn hyper(&self) -> AdmmHyper {
        AdmmHyper {
            rho: self.rho,
            lambda: self.lambda,
            eta: self.eta,
            eta_placement: self.eta_placement,
        }
    }

    pub fn finetune_epochs(&self) -> usize {
        self.finetune_epochs.unwrap_or(self.epochs.div_ceil(5))
    }

    pub fn dense_eta(&self) -> f64 {
        self.dense_eta.unwrap_or(self.eta)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub model: VitConfig,
    pub data: DataSpec,
    /// Overall fraction of parameters to remove; 0 disables pruning.
    pub sparsity: f64,
    pub ranking: RankingConfig,
    pub optimizer: OptimizerConfig,
    /// Start from this dense checkpoint instead of training one.
    pub baseline: Option<PathBuf>,
    pub output_dir: Option<PathBuf>,
    pub seed: u64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            model: VitConfig::desk(),
            data: DataSpec::default(),
            sparsity: 0.4,
            ranking: RankingConfig::default(),
            optimizer: OptimizerConfig::default(),
            baseline: None,
            output_dir: None,
            seed: 0,
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate().map_err(|e| Error::Config(e.to_string()))?;
        self.ranking.validate()?;
        if !(0.0..1.0).contains(&self.sparsity) {
            return Err(Error::Config(format!("sparsity {} outside [0, 1)", self.sparsity)));
        }
        let o = &self.optimizer;
        if !(o.rho > 0.0 && o.eta > 0.0 && o.lambda >= 0.0 && o.dense_eta() > 0.0) {
            return Err(Error::Config("need rho > 0, eta > 0, lambda >= 0".into()));
        }
        if o.batch_size == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        if self.data.image_size() != self.model.image_size {
            return Err(Error::Config(format!(
                "data images are {} px, model expects {}",
                self.data.image_size(),
                self.model.image_size
            )));
        }
        if self.data.classes() != self.model.num_classes {
            return Err(Error::Config(format!(
                "data has {} classes, model has {}",
                self.data.classes(),
                self.model.num_classes
            )));
        }
        Ok(())
    }

    /// Seeds for the independent random streams of a run.
    pub(crate) fn stream_seed(&self, stream: Stream) -> u64 {
        self.seed
            .wrapping_mul(0x9E37_79B9_7F4A_7C15)
            .wrapping_add(stream as u64)
    }
}

#[derive(Debug, Clone, Copy)]
pub(crate) enum Stream {
    Init = 1,
    Dense = 2,
    Soft = 3,
    Finetune = 4,
    RankingBatch = 5,
}
