// SPDX-License-Identifier: MIT OR Apache-2.0

//! Detection, measurement, steering and ablation of the log-linear encoding
//! of averaged next-token probabilities in a language model's output
//! embedding, together with a small reference language model to test it on.
//!
//! * [`store`]: binary records for matrices, statistics, fits and checkpoints
//! * [`probe`]: averaged probabilities and the least-squares encoding fit
//! * [`steer`]: editing single embedding rows to rescale a token's probability
//! * [`prune`]: saliency-ordered removal of embedding dimensions
//! * [`microlm`]: the reference causal language model
//! * [`dynamics`]: encoding and convergence across training checkpoints
//! * [`pipeline`]: the end-to-end study on the reference model

pub mod dynamics;
pub mod error;
pub mod microlm;
pub mod pipeline;
pub mod probe;
pub mod prune;
pub mod steer;
pub mod store;

pub use error::{Error, Result};
pub use probe::{fit_encoding, EncodingFit, DEFAULT_FLOOR};
pub use store::{read_record, write_record, CorpusFreq, EmbeddingMatrix, ProbStats, Record};
