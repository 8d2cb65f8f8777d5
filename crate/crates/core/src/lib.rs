//! Polya-Gamma coordinate-ascent variational inference for binomial logistic
//! models with crossed random effects.

pub mod cavi;
pub mod design;
pub mod draws;
pub mod error;
pub mod evalkit;
pub mod formula;
pub mod gibbs;
pub mod linalg;
pub mod mavb;
pub mod normal_eq;
pub mod pgamma;
pub mod prior;
pub mod simlab;
pub mod sparse;
pub mod table;

pub use error::{Error, Result};
