//! Gradient-based meta-learning viewed as empirical Bayes in a
//! hierarchical model.

pub mod adapt;
pub mod curvature;
pub mod error;
pub mod laplace;
pub mod metatrain;
pub mod model;
pub mod numcore;
pub mod posterior;
pub mod quadprior;
pub mod tasks;

pub use error::{Error, Result};
