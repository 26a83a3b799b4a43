//! Small dense complex linear algebra shared by the rest of the crate.
//!
//! Sizes stay in the low hundreds (at most `N²` for the Fisher matrix), so
//! everything is plain row-major storage and O(n³) kernels.

mod eig;
mod matrix;
mod rng;

pub use eig::{
    hermitian_eig, inv_sqrt, numerical_rank, pinv, psd_eig, sqrt_psd, HermitianEigen, HERMITIAN_TOL,
    MIN_EIG_RATIO, PSD_CLAMP,
};
pub use matrix::{dot_h, norm, norm_sqr, normalized, ComplexMatrix, C64, ONE, ZERO};
pub use rng::{sample_complex_gaussian, RngStream};
