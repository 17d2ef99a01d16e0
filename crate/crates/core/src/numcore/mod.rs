//! Dense linear algebra and reverse-mode automatic differentiation.

mod autodiff;
pub mod linalg;
mod matrix;

pub use autodiff::{Node, Tape};
pub use linalg::{block_diag, cholesky, inverse_spd, kron, logdet_spd, solve_spd, sym_eig, SymEig};
pub use matrix::Matrix;
