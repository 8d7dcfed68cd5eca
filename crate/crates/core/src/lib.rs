//! Conv-FSENet speech enhancement with dynamic channel pruning.
//!
//! The crate covers the whole pipeline: STFT front end ([`dsp`]), a small
//! reverse-mode autodiff engine ([`tensor`]), the network and its gating
//! subnets ([`model`], [`gating`]), training ([`training`]), a frame-by-frame
//! runtime that skips pruned filters and counts MACs ([`runtime`]), quality
//! and dynamism metrics ([`metrics`]), and file formats ([`io`]).

pub mod dsp;
pub mod error;
pub mod gating;
pub mod io;
pub mod metrics;
pub mod model;
pub mod runtime;
pub mod tensor;
pub mod training;

pub use error::{Error, ErrorKind, Result};
