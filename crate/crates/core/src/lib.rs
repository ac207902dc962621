//! Feature-attribution engine, evaluation battery, and saliency-card toolchain.
//!
//! The crate is organized around a small dense-tensor autodiff engine
//! ([`tensor`], [`autodiff`]), sequential models with desk-scale training
//! ([`model`], [`train`]), dataset handling ([`data`]), eleven attribution
//! methods behind one signature ([`saliency`]), executable sensitivity and
//! perceptibility metrics ([`eval`]), a methodology profiler ([`profiler`]),
//! and the saliency-card document model ([`card`]). [`battery`] ties the
//! metrics together into card-producing evaluation runs.

pub mod autodiff;
pub mod battery;
pub mod card;
pub mod config;
pub mod data;
pub mod error;
pub mod fixtures;
pub mod linalg;
pub mod model;
pub mod profiler;
pub mod rng;
pub mod saliency;
pub mod tensor;
pub mod train;

pub mod eval;

pub use error::{CoreError, Result};
pub use tensor::Tensor;
