//! Dynamic language-group mixture-of-experts for bilingual and
//! code-switching sequence recognition.
//!
//! A shared language router assigns every frame to a language expert group;
//! inside each group a per-group router gates the top-k experts. The crate
//! carries its own small reverse-mode tape, a CTC implementation, a
//! conformer-lite encoder, a synthetic bilingual corpus, chunked streaming
//! inference and a training/evaluation harness.

pub mod ctc;
pub mod data;
pub mod error;
pub mod exec;
pub mod group;
pub mod harness;
pub mod model;
pub mod nn;
pub mod router;
pub mod streaming;
pub mod tensor;

pub use error::{Error, Result};
