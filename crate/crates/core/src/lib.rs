//! Tri-matrix low-rank adapters (`ΔW = CBA`) with per-factor learning-rate
//! scaling, and a small deterministic harness for training them on synthetic
//! tasks.

// `!(x > 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod adapter;
pub mod checkpoint;
pub mod config;
pub mod error;
pub mod experiments;
pub mod grad;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod task;
pub mod tensor;
pub mod train;

pub use adapter::{AdapterSpec, Factor, FrozenLinear, InitScheme, LoraAdapter, ShapeClass, TrainMode, TriAdapter};
pub use error::{Error, Result};
pub use grad::{FactorRates, GradTriple};
pub use optim::{OptimizerConfig, OptimizerState, RatioMode};
pub use tensor::{Matrix, SeededRng};
