//! Deterministic dense numeric substrate: matrices with a signed
//! log-determinant, a small MLP with exact first- and second-order gradient
//! passes, a finite-difference oracle, and a seeded RNG.

pub mod fd;
pub mod matrix;
pub mod mlp;
pub mod rng;

pub use fd::{grad_oracle, FdError};
pub use matrix::{axpy, dot, norm2, sub, Matrix, NumError};
pub use mlp::{cross_entropy_from_logits, Activation, Mlp, MlpCache, MlpGrads, TangentCache};
pub use rng::Rng;
