//! Deterministic numerical kernels shared by every stage.

pub mod kernel;
pub mod linalg;
pub mod matrix;
pub mod rng;

pub use kernel::{cosine_similarity, dot, max_similarity_blocked, norm, row_norms};
pub use linalg::{cholesky, covariance_of, mvn_sample, CholeskyFactor, GaussianModel};
pub use matrix::{FeatureVector, RowMatrix};
pub use rng::RngState;
