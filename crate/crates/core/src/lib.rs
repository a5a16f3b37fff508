//! Instrumented training of small fully-connected ReLU networks.
//!
//! The crate trains scalar-output MLPs with MSE while tracking the empirical
//! neural tangent kernel (NTK): its spectrum, the split of the loss into the
//! top-`s` eigenspace and its complement, batch-wise critical learning rates,
//! and catapult events (loss spikes triggered by a learning rate above the
//! critical rate). Feature learning is measured by the cosine alignment between
//! a model's average gradient outer product (AGOP) and the expected gradient
//! outer product (EGOP) of the target function.
//!
//! Module map:
//!
//! * [`linalg`]: dense symmetric eigendecomposition, spectral norm, projections.
//! * [`rng`]: the reproducible generator every random draw goes through.
//! * [`network`]: MLPs under NTK, standard and near-zero parameterizations.
//! * [`data`]: synthetic targets, EGOP oracles, CSV ingestion, splits.
//! * [`kernel`]: NTK matrices, loss decomposition, critical learning rates.
//! * [`trainer`]: optimizers, schedules, the instrumented loop, event statistics.
//! * [`agop`]: AGOP matrices and alignment.
//! * [`experiment`]: JSON experiment configs and the canned experiment suites.

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod agop;
pub mod data;
pub mod error;
pub mod experiment;
pub mod kernel;
pub mod linalg;
pub mod network;
pub mod rng;
pub mod trainer;

pub use agop::{agop, alignment, AgopMatrix};
pub use data::{Dataset, Provenance, Split, TargetFunction};
pub use error::{Error, Result};
pub use kernel::{LossDecomposition, NtkMatrix};
pub use linalg::{DenseMatrix, EigenBasis};
pub use network::{Mlp, MlpConfig, Parameterization};
pub use rng::ShiftRng;
pub use trainer::{OptimizerKind, OptimizerSpec, RunLog, Schedule, StepRecord, TerminalStatus};
