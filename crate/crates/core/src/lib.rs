//! From-scratch joint CTC-attention toolkit for end-to-end sequence
//! transcription.
//!
//! The crate trains a shared bidirectional recurrent encoder under a convex
//! combination of two objectives: a connectionist temporal classification
//! (CTC) loss computed by log-space forward-backward dynamic programming, and
//! a teacher-forced cross-entropy loss from a location-aware attention
//! decoder. Decoding uses beam search with a length penalty, or the CTC
//! head's greedy collapse. Everything numeric is built on a small
//! reverse-mode tape whose gradients are validated end to end by a central
//! finite-difference harness.

pub mod attention;
pub mod beam;
pub mod ctc;
pub mod data;
pub mod encoder;
pub mod error;
pub mod model;
pub mod mtl;
pub mod nn;
pub mod numgrad;

pub use error::{Error, Result};
