//! Speech and text as one token stream.
//!
//! Audio is turned into log-mel frames, quantized against a k-means codebook
//! and mapped into a vocabulary shared with bytes of text. Tasks are
//! serialized as tagged prompts with loss-masked targets, mixed across
//! datasets, and used to finetune a small decoder-only transformer.

pub mod audio;
mod binio;
pub mod error;
pub mod experiments;
pub mod metrics;
pub mod mixture;
pub mod model;
pub mod quantizer;
pub mod synth;
pub mod tasks;
pub mod vocab;

pub use error::{Error, Result};
