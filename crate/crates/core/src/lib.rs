//! Weak-signal learning on stellar spectra: a synthetic spectrum
//! generator, the preprocessing pipeline, the dual-view (vector plus
//! time-frequency) representation, the fusion network, its objectives, and
//! training and evaluation.

pub mod catalog;
pub mod corpus;
pub mod dualview;
pub mod error;
pub mod kv;
pub mod objectives;
pub mod pdvfn;
pub mod preprocess;
pub mod spectra_synth;
pub mod train_eval;

pub use error::{Error, Result};
