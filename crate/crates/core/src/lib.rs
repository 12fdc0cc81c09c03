//! Infrared tiny-target segmentation: a multi-level ViT/CNN hybrid network
//! with its training losses, connected-component post-processing, detection
//! metrics and a synthetic-scene data pipeline.

pub mod error;
pub mod datapipe;
pub mod inference;
pub mod io;
pub mod loss;
pub mod metrics;
pub mod model;
pub mod postprocess;
pub mod raster;
pub mod scalar;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use model::{ModelConfig, ModelVariant, MtuNet};
pub use raster::{BinaryMask, ProbabilityMap, Raster};
pub use scalar::Scalar;
pub use tensor::{Graph, Tensor, Var};

pub type Tensor64 = Tensor<f64>;
pub type Tensor32 = Tensor<f32>;
pub type MtuNet64 = MtuNet<f64>;
pub type MtuNet32 = MtuNet<f32>;
pub type ProbabilityMap64 = ProbabilityMap<f64>;
pub type ProbabilityMap32 = ProbabilityMap<f32>;
