//! Intervertebral disc labeling with a stacked hierarchical-context-attention
//! network: heatmap codec, multi-scale large kernel attention, the stacked
//! network, geometric losses, synthetic and volumetric data, training and
//! evaluation.

pub mod autograd;
pub mod cli;
pub mod checkpoint;
pub mod config;
pub mod conv;
pub mod data;
pub mod error;
pub mod eval;
pub mod heatmap;
pub mod losses;
pub mod mlka;
pub mod network;
pub mod params;
pub mod predict;
pub mod tensor;
pub mod trainer;

pub use error::{HcaError, Result};
pub use heatmap::{HeatmapRole, HeatmapStack, KeypointSet, ProbabilityMap};
pub use network::{Model, ModelConfig, NetworkOutput};
pub use tensor::Tensor;
