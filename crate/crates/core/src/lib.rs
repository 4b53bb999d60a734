//! Neural-network pricing of swing contracts.

pub mod contract;
pub mod error;
pub mod experiment;
pub mod ls;
pub mod market;
pub mod nn;
pub mod policy;
pub mod trainer;
pub mod valuation;
pub mod volume;
pub mod weighting;

pub use contract::{ContractKind, ContractSpec};
pub use error::{Error, Result};
pub use market::{FactorModel, FactorModelParams, PathBatch, StateProcess, TrinomialFactor};
pub use volume::{QGrid, VolumeConstraints};
