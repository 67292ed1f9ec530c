//! Mixture of locally-linear inverse regressions with block-diagonal residual
//! covariances.
//!
//! The response `y` (dimension L) and covariates `x` (dimension D) are modeled
//! jointly as a Gaussian mixture. Each cluster is estimated in the inverse
//! direction (`x` regressed on `y`), which keeps the parameter count low when
//! D is much larger than L, and mapped to the forward direction for
//! prediction. Residual covariances are block-diagonal; the blocks, the number
//! of clusters and the penalty strength are chosen from the data.

pub mod bench;
pub mod blocks;
pub mod em;
pub mod error;
pub mod io;
pub mod linalg;
pub mod model;
pub mod selection;
pub mod sim;
pub mod structure;

mod kmeans;

pub use em::{
    e_step, fit, fit_from, initialize, m_step, m_step_with, residual_covariance_full, EmConfig,
    FitResult, Responsibilities,
};
pub use error::{BllimError, Result};
pub use linalg::log_gaussian_density;
pub use model::{
    forward_from_inverse, joint_gmm_params, model_dimension, predict, Dataset, ForwardComponent,
    ForwardParams, InverseComponent, InverseParams, Prediction, Predictor,
};
pub use structure::{BlockStructure, Partition};
