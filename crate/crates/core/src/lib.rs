//! Meta-learned feature networks with a matrix-normal prior over the last
//! layer, exact online Bayesian linear regression in feature space, a
//! squared-exponential GP baseline, and the experiment harness around them.

pub mod api;
pub mod bayes;
pub mod config;
pub mod corpus;
pub mod error;
pub mod eval;
pub mod gp;
pub mod linalg;
pub mod model;
pub mod net;
pub mod tape;
pub mod tasks;
pub mod train;

pub use error::{Error, Result};
pub use linalg::Matrix;

/// Deterministic generator used wherever a command takes `--seed`.
pub type SeededRng = rand_chacha::ChaCha8Rng;

pub fn seeded_rng(seed: u64) -> SeededRng {
    rand::SeedableRng::seed_from_u64(seed)
}
