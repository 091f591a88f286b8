//! Transfer learning for scalar-on-function linear regression.
//!
//! Curves observed on an even grid are smoothed onto a Fourier basis, a
//! penalized local fit is computed per dataset, and the target fit is
//! improved with source datasets through offset transfer ([`estimators`],
//! [`aotl`]) or through control variates built from summary statistics only
//! ([`cvs`], [`pcvs`]). [`simbench`] runs the Monte-Carlo comparison.

pub mod aotl;
pub mod basis;
pub mod cvs;
pub mod error;
pub mod estimators;
pub mod linalg;
pub mod pcvs;
pub mod rng;
pub mod simbench;
pub mod smoothing;
pub mod workflow;

pub use basis::{default_m, fourier_basis, legendre_pair, BasisSystem};
pub use error::{Error, Result};
pub use smoothing::{
    empirical_cov_norm_sq, predict, smooth, smooth_with, CoefEstimate, Method, RawDataset,
    RhoChoice, SmoothedDataset,
};
pub use estimators::{
    fit_local, fit_local_with, fit_offset, fit_otl, fit_pooled, LambdaChoice, LambdaConfig,
    LocalFit, VarianceMode,
};
pub use cvs::{assemble_cvs, cvs_estimate, delta_precision, partitioned_inverse_blocks, CvsSystem};
pub use pcvs::{group_lasso_solve, pcvs_estimate, zeta_path, GroupLassoProblem, GroupLassoSolution};
pub use aotl::{run_aotl, AggregationConstants, AotlOutcome, SplitPlan};
pub use rng::stream_rng;
