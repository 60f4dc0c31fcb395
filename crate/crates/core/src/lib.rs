//! Tensorized marginal structural models.
//!
//! Potential outcomes indexed by the last `k` treatments of each unit are
//! stored as an `N × T × 2^k` tensor and estimated by weighted low-rank
//! approximation, with a classical per-period MSM as a baseline.

pub mod causal;
pub mod cli;
pub mod config;
pub mod cp;
pub mod error;
pub mod estimator;
mod linalg;
pub mod msm;
pub mod rng;
pub mod simulation;
pub mod tensor;
pub mod weights;

pub use cp::{cp_als, reconstruct, spectral_clip, CpDecomposition};
pub use error::{Error, Result};
pub use tensor::{khatri_rao, weighted_frobenius_sq, DenseTensor3, Matrix};
