//! Probabilistic verification of decoder networks with Gaussian latent inputs.
//!
//! Given a decoder `f(x, z)` with `z ~ N(0, I)`, a linear specification
//! `(c, d)` and a box of conditioning inputs, the library computes an upper
//! bound on `sup_x P(cᵀ f(x, z) + d ≥ 0)` that holds rigorously. The bound
//! combines a Lagrangian dual relaxation of the network (conditioned on a
//! latent box), a Gaussian tail for the latent part of the dual function,
//! and the probability mass outside the latent box.

pub mod dual;
pub mod error;
pub mod interval;
pub mod model;
pub mod normal;
pub mod optimizer;
pub mod oracle;
pub mod spec;
pub mod sweep;
#[doc(hidden)]
pub mod testing;

pub use dual::{assemble_bound, Certificate, DualVariables};
pub use error::{Error, Result};
pub use interval::{propagate, IntervalBounds, LatentBox};
pub use model::{load_model, DecoderModel, Layer, Linear};
pub use optimizer::{optimize, optimize_from, OptimizerConfig};
pub use spec::{build, InputBox, PropertySpec, VerificationProblem};
