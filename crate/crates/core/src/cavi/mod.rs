//! Coordinate-ascent variational inference under the three factorizations.

mod engine;
mod fit;
mod init;
mod state;

pub use engine::{expected_log_det, iw_log_normalizer, pxvb_reduce, Cavi};
pub use fit::{fit, fit_from, iterate, Acceleration, ConvergedBy, FitOptions, FitReport, InitMethod, StageTimings};
pub use init::{init_em, init_em_with, init_random, penalized_irls, DEFAULT_RIDGE, IRLS_ITERATIONS};
pub use state::{Covariance, Scheme, VariationalState};
