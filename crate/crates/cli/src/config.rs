use std::fmt;
use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context, Result};
use ipa_core::data::{load_idx, synth_blobs, Dataset};
use ipa_core::federation::FederationConfig;
use ipa_core::metrics::Criterion;
use ipa_core::partition::PartitionSpec;
use serde::{Deserialize, Serialize};

/// Default data directory for IDX sources that don't name one.
pub const DATA_DIR_ENV: &str = "IPA_DATA_DIR";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Algorithm {
    #[default]
    Ipa,
    Fedavg,
    Standalone,
}

impl fmt::Display for Algorithm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Algorithm::Ipa => "ipa",
            Algorithm::Fedavg => "fedavg",
            Algorithm::Standalone => "standalone",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "lowercase", deny_unknown_fields)]
pub enum DataConfig {
    /// MNIST-style IDX files. Relative paths resolve against `dir`, which
    /// defaults to `$IPA_DATA_DIR`, then `data/mnist`.
    Idx {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        dir: Option<PathBuf>,
        #[serde(default = "train_images")]
        train_images: PathBuf,
        #[serde(default = "train_labels")]
        train_labels: PathBuf,
        #[serde(default = "test_images")]
        test_images: PathBuf,
        #[serde(default = "test_labels")]
        test_labels: PathBuf,
        /// Keep only the first n training samples.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        train_limit: Option<usize>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        test_limit: Option<usize>,
    },
    /// Gaussian blobs; train and test share the class centers.
    Synthetic {
        classes: usize,
        dims: usize,
        train_per_class: usize,
        test_per_class: usize,
        spread: f32,
        #[serde(default)]
        seed: u64,
    },
}

fn train_images() -> PathBuf {
    "train-images-idx3-ubyte".into()
}
fn train_labels() -> PathBuf {
    "train-labels-idx1-ubyte".into()
}
fn test_images() -> PathBuf {
    "t10k-images-idx3-ubyte".into()
}
fn test_labels() -> PathBuf {
    "t10k-labels-idx1-ubyte".into()
}

impl DataConfig {
    pub fn mnist() -> Self {
        DataConfig::Idx {
            dir: None,
            train_images: train_images(),
            train_labels: train_labels(),
            test_images: test_images(),
            test_labels: test_labels(),
            train_limit: None,
            test_limit: None,
        }
    }

    /// The four IDX paths (train images, train labels, test images, test labels).
    pub fn idx_paths(&self) -> Option<[PathBuf; 4]> {
        match self {
            DataConfig::Idx {
                dir,
                train_images,
                train_labels,
                test_images,
                test_labels,
                ..
            } => {
                let base = dir
                    .clone()
                    .or_else(|| std::env::var_os(DATA_DIR_ENV).map(PathBuf::from))
                    .unwrap_or_else(|| PathBuf::from("data/mnist"));
                Some([train_images, train_labels, test_images, test_labels].map(|p| base.join(p)))
            }
            DataConfig::Synthetic { .. } => None,
        }
    }

    /// Load (train, test).
    pub fn load(&self) -> Result<(Dataset, Dataset)> {
        match self {
            DataConfig::Idx {
                train_limit,
                test_limit,
                ..
            } => {
                let [tri, trl, tei, tel] = self.idx_paths().expect("idx source");
                let train = load_idx(&tri, &trl).with_context(|| format!("loading {}", tri.display()))?;
                let test = load_idx(&tei, &tel).with_context(|| format!("loading {}", tei.display()))?;
                let train = match train_limit {
                    Some(n) => train.head(*n),
                    None => train,
                };
                let test = match test_limit {
                    Some(n) => test.head(*n),
                    None => test,
                };
                Ok((train, test))
            }
            DataConfig::Synthetic {
                classes,
                dims,
                train_per_class,
                test_per_class,
                spread,
                seed,
            } => {
                let per = train_per_class + test_per_class;
                let all = synth_blobs(*classes, *dims, per, *spread, *seed)?;
                // samples are stored class by class
                let (mut tr, mut te) = (Vec::new(), Vec::new());
                for c in 0..*classes {
                    tr.extend(c * per..c * per + train_per_class);
                    te.extend(c * per + train_per_class..(c + 1) * per);
                }
                Ok((all.subset(&tr)?, all.subset(&te)?))
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    /// Hidden layer widths; input and output sizes come from the data.
    #[serde(default = "default_hidden")]
    pub hidden: Vec<usize>,
}

fn default_hidden() -> Vec<usize> {
    vec![200]
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            hidden: default_hidden(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FairnessConfig {
    /// Inclusive 1-based round window.
    pub window: (usize, usize),
    #[serde(default = "default_criterion")]
    pub criterion: Criterion,
}

fn default_criterion() -> Criterion {
    Criterion::Loss
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricsConfig {
    /// Rounds at which every peer pair is compared. The final round is
    /// always compared, as is the end of the fairness window.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub comparison_rounds: Vec<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fairness: Option<FairnessConfig>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub algorithm: Algorithm,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
    pub data: DataConfig,
    #[serde(default)]
    pub model: ModelConfig,
    pub partition: PartitionSpec,
    pub federation: FederationConfig,
    #[serde(default)]
    pub metrics: MetricsConfig,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        Ok(toml::from_str(text)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        Self::from_toml(&text).with_context(|| format!("parsing {}", path.display()))
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string(self)?)
    }

    /// Layer sizes for data with `features` inputs and `classes` outputs.
    pub fn dims(&self, features: usize, classes: usize) -> Vec<usize> {
        let mut d = vec![features];
        d.extend(&self.model.hidden);
        d.push(classes);
        d
    }

    /// Checks that don't need the data; class-dependent partition checks
    /// happen once the data is loaded.
    pub fn validate(&self) -> Result<()> {
        self.federation.validate()?;
        let fed = &self.federation;
        ensure!(
            self.partition.num_peers == fed.num_peers,
            "partition has {} peers, federation has {}",
            self.partition.num_peers,
            fed.num_peers
        );
        ensure!(self.model.hidden.iter().all(|&h| h > 0), "hidden layer widths must be positive");
        if self.algorithm == Algorithm::Ipa {
            ensure!(fed.num_peers >= 2, "ipa needs at least two peers");
        }
        for &r in &self.metrics.comparison_rounds {
            ensure!(r >= 1 && r <= fed.rounds, "comparison round {r} outside 1..={}", fed.rounds);
        }
        if let Some(f) = &self.metrics.fairness {
            let (s, e) = f.window;
            ensure!(s >= 1 && s <= e, "empty fairness window {s}..={e}");
            ensure!(e <= fed.rounds, "fairness window ends at {e}, run has {} rounds", fed.rounds);
            ensure!(fed.num_peers >= 3, "fairness needs at least 3 peers");
        }
        if let Some(paths) = self.data.idx_paths() {
            for p in &paths {
                if !p.is_file() {
                    bail!("missing data file {}", p.display());
                }
            }
        }
        Ok(())
    }
}
