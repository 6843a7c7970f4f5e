//! Statistical watermarking for autoregressive token generation.
//!
//! The crate embeds watermarks by keying each generation step on a hash of the
//! previous `h` tokens, detects them with exact non-asymptotic tests (binomial
//! for the greenlist scheme, gamma for exponential sampling), decodes multi-bit
//! messages via cyclically shifted secret vectors, and ships a Monte-Carlo
//! harness that validates the false-positive guarantees empirically.
//!
//! Modules:
//! - [`keying`]: master keys, window-seed derivation, secret vectors.
//! - [`statfun`]: regularized incomplete beta/gamma, normal survival function.
//! - [`samplers`]: softmax + nucleus, greenlist shift, exponential selection,
//!   the generation loop, and the logit-provider contract.
//! - [`detectors`]: scores, dedup rules, exact p-values, Z-test baseline,
//!   Neyman-Pearson score with Chernoff bound.
//! - [`multibit`]: message embedding and cyclic-correlation decoding.
//! - [`toylm`]: seedable Dirichlet toy language model.
//! - [`harness`]: batch calibration/robustness/identification experiments.

pub mod detectors;
pub mod error;
pub mod harness;
pub mod keying;
pub mod multibit;
pub mod rng;
pub mod samplers;
pub mod statfun;
pub mod toylm;

pub use detectors::{DedupRule, DetectConfig, DetectionReport, ScoringContext, TestKind};
pub use error::{Error, Result};
pub use keying::{MasterKey, SecretVector, WindowSeed};
pub use multibit::{IdentificationReport, MessageSpace};
pub use samplers::{LogitProvider, LogitVector, ProbVector, SamplerParams, Scheme, TokenSequence};
pub use toylm::ToyModel;
