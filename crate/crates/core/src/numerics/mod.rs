//! Dense linear algebra, Gaussian densities and reverse-mode differentiation.

mod gaussian;
mod linalg;
mod matrix;
mod mlp;
mod tape;

pub use gaussian::{gaussian_log_prob, kl_diag, reparam_sample, DiagGaussian, LN_2PI};
pub use linalg::{cholesky, solve_lower, solve_upper_t, JITTER_LADDER};
pub use matrix::{dot, euclidean_distance, norm, Matrix};
pub use mlp::{Activation, BoundMlp, Dense, MlpParams, LEAKY_SLOPE};
pub use tape::{pairwise_sum, Gradients, Tape, Var};
pub(crate) use tape::HingeState;
