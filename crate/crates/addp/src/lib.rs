//! ADDP: domain-incremental continual learning for rPPG signal regression.
//!
//! The crate provides a desk-scale spatiotemporal regression backbone with a
//! difference-normalization input module and per-block parallel adapters, a
//! synthetic multi-domain task generator, style/noise domain prototypes with
//! AdaIN-based feature augmentation and inference simplification, and a full
//! domain-incremental-learning evaluation harness.

pub mod augment;
pub mod error;
pub mod io;
pub mod model;
pub mod nn;
pub mod proto;
pub mod protocol;
pub mod signal;
pub mod simplify;
pub mod synth;

pub use error::{Error, Result};
