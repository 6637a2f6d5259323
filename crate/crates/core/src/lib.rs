//! Feature fusion and feature-gated recurrent cells for classifying
//! sequences of irregularly timed multimodal events.
//!
//! The crate is layered bottom-up:
//!
//! - [`numerics`]: tensors, a reverse-mode tape, Adam, gradient checks, RNG.
//! - [`events`]: the event/sequence data model, record parsing, vocabularies.
//! - [`synth`]: a deterministic generator of labelled irregular event streams.
//! - [`encoders`]: type embeddings, value encoding, sinusoidal and learned time encodings.
//! - [`fusion`]: non-temporal and temporal fusion pipelines.
//! - [`cells`]: LSTM, Phased LSTM and FG-LSTM cells, classifier head, loss.
//! - [`metrics`]: exact AUC and average precision.
//! - [`harness`]: config, model assembly, training, evaluation, comparison.

pub mod cells;
pub mod encoders;
pub mod error;
pub mod events;
pub mod fusion;
pub mod harness;
pub mod metrics;
pub mod numerics;
pub mod synth;

pub use error::{Error, Result};
