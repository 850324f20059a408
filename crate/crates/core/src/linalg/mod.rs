//! Dense matrix primitives, thin SVD, numerical rank and subspace geometry.

mod columns;
mod dense;
mod geometry;
mod matrix;
mod svd;

pub use columns::ColumnSelect;
pub use dense::{determinant, qr_thin, Lu};
pub use geometry::{default_rank_tol, numerical_rank, orthogonality_defect, principal_angles, ORTHONORMAL_TOL};
pub use matrix::Matrix;
pub(crate) use matrix::{dot, norm2};
pub use svd::{
    randomized_svd, reconstruct, svd_thin, svd_thin_with_stats, RandomizedSvd, SpectralDecomposition, SvdStats,
    MAX_SWEEPS_PER_VALUE,
};
