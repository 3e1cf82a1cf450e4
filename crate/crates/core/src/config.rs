//! Run configuration: JSON with every field defaulted, unknown keys
//! rejected, and range checks that name the offending field.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::baselines::SgdConfig;
use crate::error::{Error, Result};
use crate::metrics::SelectionCriterion;
use crate::nn::InitScheme;
use crate::protocol::ProtocolConfig;
use crate::topology::TopologyKind;

/// Environment variable holding the default dataset root.
pub const DATA_DIR_ENV: &str = "NTKDFL_DATA_DIR";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetName {
    Mnist,
    FashionMnist,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    pub name: DatasetName,
    /// Directory holding the four IDX files. Defaults to `$NTKDFL_DATA_DIR`,
    /// then `data`.
    #[serde(default = "default_root")]
    pub root: PathBuf,
    #[serde(default = "default_train_images")]
    pub train_images: PathBuf,
    #[serde(default = "default_train_labels")]
    pub train_labels: PathBuf,
    #[serde(default = "default_test_images")]
    pub test_images: PathBuf,
    #[serde(default = "default_test_labels")]
    pub test_labels: PathBuf,
    /// Keep only the first `n` training samples.
    #[serde(default)]
    pub train_limit: Option<usize>,
    #[serde(default)]
    pub test_limit: Option<usize>,
    /// Average-pooling factor applied to each image side.
    #[serde(default = "one")]
    pub downsample: usize,
}

impl DatasetConfig {
    pub fn new(name: DatasetName, root: impl Into<PathBuf>) -> Self {
        Self {
            name,
            root: root.into(),
            train_images: default_train_images(),
            train_labels: default_train_labels(),
            test_images: default_test_images(),
            test_labels: default_test_labels(),
            train_limit: None,
            test_limit: None,
            downsample: 1,
        }
    }

    /// `file` resolved against `root` unless already absolute.
    pub fn resolve(&self, file: &Path) -> PathBuf {
        if file.is_absolute() {
            file.to_path_buf()
        } else {
            self.root.join(file)
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Heterogeneity {
    Iid {},
    Dirichlet { alpha: f64 },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Algorithm {
    NtkDfl,
    Dpsgd,
    Dfedavg,
    Dfedavgm,
}

impl Algorithm {
    pub fn default_sgd(self) -> Option<SgdConfig> {
        match self {
            Algorithm::NtkDfl => None,
            Algorithm::Dpsgd => Some(SgdConfig::dpsgd()),
            Algorithm::Dfedavg => Some(SgdConfig::dfedavg()),
            Algorithm::Dfedavgm => Some(SgdConfig::dfedavgm()),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub dataset: DatasetConfig,
    #[serde(default = "default_clients")]
    pub num_clients: usize,
    #[serde(default = "default_heterogeneity")]
    pub heterogeneity: Heterogeneity,
    #[serde(default = "default_topology")]
    pub topology: TopologyKind,
    /// Draw a fresh graph every round.
    #[serde(default = "yes")]
    pub dynamic_topology: bool,
    #[serde(default = "default_algorithm")]
    pub algorithm: Algorithm,
    /// Communication rounds `K`.
    #[serde(default = "default_rounds")]
    pub rounds: usize,
    #[serde(default = "default_hidden")]
    pub hidden_dim: usize,
    #[serde(default = "default_eta")]
    pub eta: f64,
    #[serde(default = "default_t_grid")]
    pub t_grid: Vec<usize>,
    #[serde(default = "one")]
    pub jacobian_batches: usize,
    #[serde(default = "default_init")]
    pub init: InitScheme,
    #[serde(default = "yes")]
    pub per_round_averaging: bool,
    /// Ordering that decides which clients join the reported final model.
    #[serde(default = "default_selection")]
    pub selection: SelectionCriterion,
    /// Number of clients in the reported final model; all when absent.
    #[serde(default)]
    pub selection_size: Option<usize>,
    /// Fraction of the test set used for validation; the rest is the
    /// holdout on which accuracies are reported.
    #[serde(default = "default_validation_ratio")]
    pub validation_ratio: f64,
    /// One run per seed, each in its own subdirectory.
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default = "default_bytes")]
    pub bytes_per_scalar: usize,
    /// SGD settings for the baselines; the algorithm's preset when absent.
    #[serde(default)]
    pub sgd: Option<SgdConfig>,
    /// Worker threads; all available cores when absent.
    #[serde(default)]
    pub workers: Option<usize>,
    #[serde(default = "default_output")]
    pub output_dir: PathBuf,
    /// Write the graph of every round as an edge list.
    #[serde(default)]
    pub dump_edges: bool,
}

fn default_root() -> PathBuf {
    std::env::var_os(DATA_DIR_ENV)
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("data"))
}
fn default_train_images() -> PathBuf {
    "train-images-idx3-ubyte.gz".into()
}
fn default_train_labels() -> PathBuf {
    "train-labels-idx1-ubyte.gz".into()
}
fn default_test_images() -> PathBuf {
    "t10k-images-idx3-ubyte.gz".into()
}
fn default_test_labels() -> PathBuf {
    "t10k-labels-idx1-ubyte.gz".into()
}
fn one() -> usize {
    1
}
fn yes() -> bool {
    true
}
fn default_clients() -> usize {
    300
}
fn default_heterogeneity() -> Heterogeneity {
    Heterogeneity::Dirichlet { alpha: 0.1 }
}
fn default_topology() -> TopologyKind {
    TopologyKind::Regular { kappa: 5 }
}
fn default_algorithm() -> Algorithm {
    Algorithm::NtkDfl
}
fn default_rounds() -> usize {
    200
}
fn default_hidden() -> usize {
    100
}
fn default_eta() -> f64 {
    ProtocolConfig::default().eta
}
fn default_t_grid() -> Vec<usize> {
    ProtocolConfig::default().t_grid
}
fn default_init() -> InitScheme {
    InitScheme::Shared
}
fn default_selection() -> SelectionCriterion {
    SelectionCriterion::HighToLow
}
fn default_validation_ratio() -> f64 {
    0.5
}
fn default_seeds() -> Vec<u64> {
    vec![0]
}
fn default_bytes() -> usize {
    ProtocolConfig::default().bytes_per_scalar
}
fn default_output() -> PathBuf {
    "runs".into()
}

fn field(name: &str, message: impl Into<String>) -> Error {
    Error::Config {
        field: name.to_string(),
        message: message.into(),
    }
}

impl RunConfig {
    /// A config with every default applied.
    pub fn with_dataset(dataset: DatasetConfig) -> Self {
        let json = serde_json::json!({ "dataset": dataset });
        serde_json::from_value(json).expect("defaults deserialize")
    }

    pub fn parse(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text).map_err(|e| Error::ConfigParse {
            line: e.line(),
            column: e.column(),
            message: e.to_string(),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn protocol(&self) -> ProtocolConfig {
        ProtocolConfig {
            eta: self.eta,
            t_grid: self.t_grid.clone(),
            jacobian_batches: self.jacobian_batches,
            per_round_averaging: self.per_round_averaging,
            bytes_per_scalar: self.bytes_per_scalar,
        }
    }

    /// SGD settings in effect for a baseline run.
    pub fn effective_sgd(&self) -> Option<SgdConfig> {
        self.sgd.clone().or_else(|| self.algorithm.default_sgd())
    }

    pub fn validate(&self) -> Result<()> {
        let m = self.num_clients;
        if m == 0 {
            return Err(field("num_clients", "must be at least 1"));
        }
        if let Heterogeneity::Dirichlet { alpha } = self.heterogeneity {
            if !(alpha > 0.0 && alpha.is_finite()) {
                return Err(field("heterogeneity.alpha", format!("must be positive, got {alpha}")));
            }
        }
        match self.topology {
            TopologyKind::Regular { kappa } => {
                if kappa >= m {
                    return Err(field(
                        "topology.kappa",
                        format!("must be below num_clients ({m}), got {kappa}"),
                    ));
                }
                if (kappa * m) % 2 == 1 {
                    return Err(field(
                        "topology.kappa",
                        format!("kappa · num_clients must be even, got {kappa} · {m}"),
                    ));
                }
            }
            TopologyKind::Ring {} if m < 3 => {
                return Err(field("topology.kind", "a ring needs at least 3 clients"));
            }
            TopologyKind::ErdosRenyi { mean_degree } if !(0.0..=(m - 1) as f64).contains(&mean_degree) => {
                return Err(field(
                    "topology.mean_degree",
                    format!("must lie in [0, {}], got {mean_degree}", m - 1),
                ));
            }
            _ => {}
        }
        if self.hidden_dim == 0 {
            return Err(field("hidden_dim", "must be at least 1"));
        }
        if !(self.eta > 0.0 && self.eta.is_finite()) {
            return Err(field("eta", format!("must be positive, got {}", self.eta)));
        }
        if self.t_grid.is_empty() {
            return Err(field("t_grid", "must not be empty"));
        }
        if self.t_grid.windows(2).any(|w| w[0] >= w[1]) {
            return Err(field("t_grid", "must be strictly ascending"));
        }
        if self.jacobian_batches == 0 {
            return Err(field("jacobian_batches", "must be at least 1"));
        }
        if let Some(k) = self.selection_size {
            if k == 0 || k > m {
                return Err(field("selection_size", format!("must lie in [1, {m}], got {k}")));
            }
        }
        if !(self.validation_ratio > 0.0 && self.validation_ratio < 1.0) {
            return Err(field(
                "validation_ratio",
                format!("must lie in (0, 1), got {}", self.validation_ratio),
            ));
        }
        if self.seeds.is_empty() {
            return Err(field("seeds", "must list at least one seed"));
        }
        if self.bytes_per_scalar == 0 {
            return Err(field("bytes_per_scalar", "must be at least 1"));
        }
        if self.workers == Some(0) {
            return Err(field("workers", "must be at least 1"));
        }
        if self.dataset.downsample == 0 {
            return Err(field("dataset.downsample", "must be at least 1"));
        }
        if let Some(sgd) = &self.sgd {
            sgd.validate().map_err(|e| match e {
                Error::InvalidParameter { name, message } => field(&format!("sgd.{name}"), message),
                other => other,
            })?;
        }
        Ok(())
    }
}
