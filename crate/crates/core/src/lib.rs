//! Linear Meta-LoRA: standard retraining versus retraining for low-rank
//! adaptability, on a synthetic multi-task linear model.
//!
//! The crate is organized bottom-up:
//!
//! * [`task_model`]: ground truth and synthetic task data,
//! * [`objectives`]: population and empirical losses with analytic gradients,
//! * [`solvers`]: closed-form standard retraining, gradient descent, LoRA fine-tuning,
//! * [`landscape`]: Hessians, stationary-point classification, spurious-minimum search,
//! * [`harness`]: ablation sweeps, theorem checks and result files.

// Negated comparisons are how NaN is rejected.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod error;
pub mod harness;
pub mod landscape;
pub mod linalg;
pub mod objectives;
pub mod rng;
pub mod schema;
pub mod solvers;
pub mod task_model;

pub use error::{Error, Result};
pub use objectives::{EmpiricalObjective, MetaGradient, MetaObjective, MetaParams, PopulationObjective};
pub use rng::RngSpec;
pub use solvers::{Adapter, TrainConfig, TrainTrace};
pub use task_model::{GroundTruth, TaskDataset};
