//! Joint moment retrieval and highlight detection on a small reverse-mode
//! autodiff engine.

pub mod bicmf;
pub mod config;
pub mod data;
pub mod error;
pub mod fra;
pub mod gradcheck;
pub mod graph;
pub mod heads;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod params;
pub mod tensor;
pub mod train;

pub use config::{CrossModal, ModelConfig};
pub use error::{Error, Result};
pub use graph::{Flag, Gradients, Graph, Var};
pub use losses::LossWeights;
pub use model::VideoLights;
pub use params::{ParamStore, Parameter};
pub use tensor::Tensor;
