//! Desk-scale joint speech-and-text training for a streaming transducer.
//!
//! `duet` trains a small cascaded-encoder transducer on synthetic paired
//! speech and on unpaired text rendered as up-sampled, masked token streams.
//! The crate covers the whole loop: a reverse-mode autodiff core, the text
//! injection frontend (tokenizers, duration models, masking), the model,
//! transducer and expected-word-error losses, streaming beam search, quality
//! and latency metrics, a synthetic corpus generator, and a config-driven
//! experiment harness with a CLI.
//!
//! The narrative guide lives in `book/` and its code snippets run as
//! doc-tests through [`guide`].

pub mod autodiff;
pub mod decode;
pub mod loss;
pub mod metrics;
pub mod model;
pub mod synth;
pub mod text;

pub mod harness;

pub mod guide;
