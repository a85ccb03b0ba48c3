//! Semi-parametric estimation of finite translation mixtures with dependent
//! regimes, such as hidden Markov models with a common unknown noise law.
//!
//! The parametric part (number of regimes, translations, pair law of two
//! consecutive regimes) is estimated by minimizing a weighted L² contrast
//! between empirical characteristic functions; the noise density is then
//! estimated by penalized marginal likelihood over Gaussian-mixture sieves.

// `!(x > 0.0)` is used deliberately so that NaN fails validation, and index
// loops mirror the matrix formulas.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod contrast;
pub mod density;
pub mod ecf;
pub mod error;
pub mod estimate;
pub mod inference;
pub mod model;
pub mod optimize;
pub mod pipeline;
pub mod rng;
pub mod simulate;

pub use error::{Error, Result};
