//! Self-supervised point cloud completion.
//!
//! The pipeline: a partial cloud is re-rendered from random viewpoints into
//! sparser partials ([`synth`]), every partial is encoded by a
//! Hilbert-serialized selective state-space encoder ([`encoder`]) and decoded
//! into a fixed-size completion ([`generator`]), and the model is trained by
//! a weighted Chamfer loss against the input plus a consistency loss across
//! views ([`metrics`], [`train`]).

pub mod autodiff;
pub mod cloud;
pub mod encoder;
pub mod error;
pub mod generator;
pub mod io;
pub mod metrics;
pub mod model;
pub mod shapes;
pub mod synth;
pub mod train;

pub use error::{Error, Result};
