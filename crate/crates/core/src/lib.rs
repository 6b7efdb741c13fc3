//! Lipschitz-private embedding release for tabular data.
//!
//! A client learns a privatization network whose output embeddings carry a
//! calibrated Lipschitz/differential-privacy level, ships the surviving
//! embeddings to a server in a single round, and the server trains whatever
//! model it likes on them. The crate covers the whole path:
//!
//! - [`numkit`]: matrices, log-determinants, a small MLP with exact
//!   gradients, a finite-difference oracle, and a seeded RNG.
//! - [`dataio`]: CSV ingestion, encoding, and deterministic 80/20 splits.
//! - [`density`]: Gaussian-kernel density estimation with score vectors,
//!   confidence intervals, and empirical Fisher information.
//! - [`privatizer`]: the power mechanism `z = H(x)^p x` and its two-layer
//!   tanh variant, with Jacobian log-determinant gradients.
//! - [`trainer`]: joint privacy/utility minimization plus the smoothness and
//!   SGD-rate bounds.
//! - [`calibrator`]: per-sample epsilon bounds with confidence, conversion
//!   to (epsilon, delta)-DP, and release filtering.
//! - [`reconbound`]: reconstruction-error lower bounds.
//! - [`protocol`]: the bit-exact single-round release bundle and its TCP
//!   transport.
//! - [`serverside`]: MLP, random-forest, and gradient-boosting learners that
//!   see nothing but a decoded bundle.
//! - [`attack`]: a decoder-style reconstruction adversary for leakage
//!   measurement.
//! - [`harness`]: the end-to-end pipeline driver used by the CLI.
//!
//! The math layers are generic over the scalar type via [`scalar::Real`];
//! the pipeline runs in `f64` through the aliases below.

pub mod attack;
pub mod calibrator;
pub mod dataio;
pub mod density;
pub mod privatizer;
pub mod protocol;
pub mod reconbound;
pub mod serverside;
pub mod synth;
pub mod trainer;
pub mod harness;
pub mod numkit;
pub mod scalar;

pub use scalar::Real;

/// Dense `f64` matrix used throughout the pipeline.
pub type Matrix = numkit::Matrix<f64>;
/// `f64` multilayer perceptron used throughout the pipeline.
pub type Mlp = numkit::Mlp<f64>;
/// `f64` parameter-gradient buffers.
pub type MlpGrads = numkit::MlpGrads<f64>;
/// `f64` kernel density model used throughout the pipeline.
pub type DensityModel = density::DensityModel<f64>;
