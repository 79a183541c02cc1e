//! Deterministic federated-learning strategy laboratory.
//!
//! Small explicit models, synthetic datasets with analytic optima, and a
//! catalog of federated optimization strategies behind one four-hook
//! interface. Every run is a pure function of its configuration: client
//! work is scheduled in parallel but reduced in a fixed order, so the
//! worker count never changes a single output byte.

pub mod config;
pub mod data;
pub mod engine;
pub mod error;
pub mod gradcheck;
pub mod model;
pub mod param;
pub mod rng;
pub mod strategies;

pub use config::ExperimentConfig;
pub use data::{ClientDataset, FederatedDataset};
pub use engine::{run_federation, RoundRecord, RunOutput};
pub use error::{FedError, Result};
pub use gradcheck::{run_gradcheck, GradCheckReport};
pub use model::{DataSplit, ModelSpec, Targets};
pub use param::{cosine_similarity, weighted_average, LayerLayout, ParamVector};
pub use rng::substream;
pub use strategies::{build as build_strategy, registry, Strategy};
