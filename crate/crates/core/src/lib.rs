//! Numerical laboratory for magnitude-aware angular-margin losses.
//!
//! The crate has five parts:
//!
//! - [`params`]: loss hyperparameters with the linear margin `m(a)`, the
//!   hyperbolic regularizer `g(a)`, and the lower bound on the regularizer
//!   weight that makes the theoretical guarantees hold;
//! - [`loss`]: batched forward/backward passes for the fixed-margin and
//!   magnitude-aware loss variants, checked against a finite-difference
//!   gradient oracle;
//! - [`theory`]: numerical certificates for the scalar loss in the magnitude
//!   variable: strict convexity, endpoint derivative signs, a unique
//!   optimum found by golden-section search, monotonicity of the optimum in
//!   the target angle and in the inter-class mass, and the binomial
//!   angle-range probability bound;
//! - [`trainer`]: synthetic quality-controlled datasets and a small,
//!   deterministic SGD trainer that exhibits the magnitude-as-quality
//!   phenomenon at desk scale;
//! - [`eval`]: verification metrics (TAR@FAR, FNMR@FMR), error-versus-reject
//!   quality curves, feature aggregation, and clustering scored by NMI and
//!   BCubed F.

pub mod error;
pub mod eval;
pub mod loss;
pub mod params;
pub mod theory;
pub mod trainer;

pub use error::{Error, Result};
pub use params::MagParams;
