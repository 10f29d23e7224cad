//! Parameter estimation for the stochastic predictors.

mod frk;
mod gmrf;
mod ltk;
mod mpp;
mod spd;
mod ssp;
mod trend;
mod tsk;

pub use frk::{em_fit_frk, em_initial, project_psd, EmOptions, EmProblem, EmState, FrkFit, FrkParams};
pub use gmrf::{GmrfEval, GmrfProblem};
pub use ltk::{ml_fit_ltk, sar_matrix, LtkFit, LtkOptions, LtkParams, SarPrecision};
pub use mpp::{
    default_knots, mcmc_fit_mpp, split_rhat, MppChain, MppFit, MppMode, MppOptions, MppParams, MppPriors, DELTA_EPS,
};
pub use spd::{eb_fit_spd, spd_default_mesh, spd_mesh_target, SpdFit, SpdOperator, SpdOptions, SpdParams};
pub use ssp::{default_ssp_grid, loocv_select_ssp, ssp_coefficients, tps_matrix, LoocvSystem, SspFit, SspParam};
pub use trend::{ols_beta, residuals, sample_variance};
pub use tsk::{
    check_dense_size, distance_matrix, ml_fit_tsk, tsk_covariance, tsk_loglik, TskFit, TskOptions, TskParams, DENSE_LIMIT,
};
