//! ASR-free pronunciation proficiency scoring.
//!
//! The crate covers the whole scoring chain: goodness-of-pronunciation (GOP)
//! from phone posteriorgrams, marginal density models over acoustic frames
//! (diagonal GMM, i-vector, affine-coupling normalizing flow and its
//! discriminative variant), utterance embeddings inferred from those models,
//! an ε-SVR score predictor, score/feature fusion and Pearson-correlation
//! evaluation. A seeded synthetic corpus generator provides data with a known
//! proficiency oracle.

// `!(x > 0.0)` rejects NaN along with non-positive values.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod assess;
pub mod binio;
pub mod corpus;
pub mod dnf;
pub mod error;
pub mod flow;
pub mod gmm;
pub mod gop;
pub mod ivector;
pub mod matrix;
pub mod pipeline;
pub mod regress;

pub use error::{Error, Result};
pub use matrix::Matrix;

/// Fixed-dimension utterance representation.
pub type Embedding = Vec<f64>;
