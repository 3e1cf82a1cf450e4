//! Decentralized federated learning driven by neural tangent kernel dynamics,
//! plus the weight-averaging baselines it is compared against.

pub mod baselines;
pub mod config;
pub mod data;
pub mod error;
pub mod experiment;
pub mod metrics;
pub mod nn;
pub mod ntk;
pub mod protocol;
pub mod seed;
pub mod topology;

pub use error::{Error, Result};
pub use nn::{Batch, InitScheme, JacobianOperator, Loss, Mlp, ModelDims, WeightVector};
pub use topology::{Topology, TopologyKind, TopologySchedule};
pub use config::{Algorithm, DatasetConfig, DatasetName, Heterogeneity, RunConfig};
pub use data::Dataset;
pub use experiment::{run_experiment, run_seed, simulate, Artifacts, RoundRecord, SimulationOutcome};
pub use metrics::SelectionCriterion;
pub use protocol::ProtocolConfig;
