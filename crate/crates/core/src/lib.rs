//! Clustered preference learning from offline BTL comparisons, with an
//! optional active-augmentation phase for the test user.

// `!(x > 0.0)` checks reject NaN along with out-of-range values.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod active;
pub mod baselines;
pub mod btl;
pub mod clustering;
pub mod error;
pub mod evaluate;
pub mod experiment;
pub mod io;
pub mod linalg;
pub mod mle;
pub mod offline;
pub mod seeding;

pub use btl::{FeatureMap, Population, PreferenceSample, Triple, UserDataset};
pub use clustering::{ClusterGraph, ClusterMode, ClusterParams, ItemRegularityParams};
pub use error::{Error, Result};
pub use experiment::{Axis, ExperimentSpec, Method, SuboptReport};
pub use linalg::{SymMat, Vector};
pub use mle::{GramianState, MleConfig};
pub use offline::{OfflineConfig, PipelineReport, Policy};
