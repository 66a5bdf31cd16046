//! HeLoFusion-style trajectory prediction at desk scale: multi-scale local
//! interaction graphs, heterogeneous message passing, local-attention context
//! fusion, an anchor-based decoder, and the standard motion-forecasting
//! metric suite, all on top of a small deterministic autodiff kernel.

pub mod decoder;
pub mod encoder;
pub mod error;
pub mod fusion;
pub mod graph;
pub mod kmeans;
pub mod message;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod scene;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
