//! Class-prompted segmentation with a diffusion-conditioned prompt encoder.

pub mod decoder;
pub mod encoders;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod kernels;
pub mod layers;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod param;
pub mod pgm;
pub mod phantom;
pub mod prompt;
pub mod real;
pub mod study;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use graph::{Graph, Var};
pub use param::{ParamId, ParamStore, Parameter};
pub use real::Real;
pub use tensor::Tensor;
