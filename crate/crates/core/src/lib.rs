//! Federated-learning simulator plus a verifiable gradient inversion attack
//! engine for fully connected ReLU networks.
//!
//! The crate is organised around the attack pipeline:
//!
//! - [`nn`]: exact double-precision forward/backward for dense ReLU stacks.
//! - [`fl`]: the server/client round exchange (FedSGD full batch, FedAvg).
//! - [`attack`]: parameter crafting, adaptive hyperplane placement, slice
//!   vectors, the subspace isolation certificate, and exact reconstruction.
//! - [`ctp`]: the epsilon-stopping bisection baseline built on the same
//!   slice machinery.
//! - [`data`]: synthetic batch generation and CSV ingestion with scaling.
//! - [`eval`]: ground-truth scoring, paired experiments, seed sweeps, and
//!   CSV/JSON result export.
//!
//! All numeric work is IEEE-754 double precision with fixed summation order,
//! so identical inputs and seeds reproduce identical results bit for bit.

pub mod attack;
pub mod ctp;
pub mod data;
pub mod error;
pub mod eval;
pub mod fl;
pub mod linalg;
pub mod nn;

pub use attack::{
    AttackConfig, AttackOutcome, Certificate, Hyperplane, ReconstructionRecord, RoundTrace,
    SearchState, SliceRecord,
};
pub use ctp::CtpConfig;
pub use data::{DatasetSpec, ScalingKind};
pub use error::{Error, Result};
pub use fl::{ClientConfig, ClientMode, RoundMessageDown, RoundMessageUp};
pub use nn::{
    Batch, DenseModel, FeatureBox, GradientReport, LossKind, ModelShape, Targets, TargetValue,
};
