//! Order-averaged SGD, its modified losses, and the numerical checks that
//! tie one to the other.
//!
//! Everything numeric is generic over [`Scalar`] (implemented for `f64` and
//! `f32`); the aliases at the bottom fix the scalar to `f64`, which is what
//! the verification experiments use.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod batching;
pub mod dataset;
pub mod error;
pub mod flow;
pub mod model;
pub mod optim;
pub mod params;
pub mod scalar;
pub mod seed;
pub mod verify;

pub use batching::{BatchPartition, EpochSchedule, ScheduleKind};
pub use dataset::{Dataset, GaussianClusters};
pub use error::{Error, Result};
pub use flow::{FlowLoss, FlowSpec};
pub use model::{Activation, MlpArch, Model, ModelKind, QuadraticEnsemble, QuadraticTerm};
pub use optim::{LrDecay, RunRecord, ScheduleMode, TrainConfig};
pub use params::ParamVector;
pub use scalar::Scalar;
pub use seed::derive_seed;
pub use verify::{FlowTarget, ScalingReport, ScalingSetup, TwoEpochSchedule};

pub type Params = ParamVector<f64>;
pub type ModelF64 = Model<f64>;
pub type DatasetF64 = Dataset<f64>;
pub type FlowLossF64 = FlowLoss<f64>;
pub type TrainConfigF64 = TrainConfig<f64>;
pub type RunRecordF64 = RunRecord<f64>;
