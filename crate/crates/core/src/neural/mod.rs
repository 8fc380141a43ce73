//! A small neural-network engine with hand-written gradients.
//!
//! Tensors are row-major `f64`. Image-like data is `[batch, maps, height,
//! width]`; sequences are `[batch, length, width]`.

pub mod attention;
pub mod gradcheck;
pub mod layers;
pub mod loss;
pub mod model;
pub mod optim;
pub mod tensor;
pub mod train;

pub use layers::{ForwardCtx, Layer, Padding, Param};
pub use model::{preset, EegnetParams, LayerSpec, Model, ModelKind, ModelSpec, ParameterSet};
pub use tensor::Tensor;
pub use train::{evaluate, predictions, train, Dataset, EpochRecord, TrainConfig};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum NeuralError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("layer {index} ({kind}): {source}")]
    InLayer {
        index: usize,
        kind: String,
        #[source]
        source: Box<NeuralError>,
    },
    #[error("backward called on {0} without a preceding forward")]
    NoForward(String),
    #[error("label {label} outside 0..{classes}")]
    Label { label: usize, classes: usize },
    #[error("loss became {loss} at epoch {epoch}, batch {batch}")]
    Diverged { epoch: usize, batch: usize, loss: f64 },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("parameter file: {0}")]
    Parameters(String),
}

impl NeuralError {
    pub(crate) fn in_layer(self, index: usize, spec: &LayerSpec) -> NeuralError {
        let kind = serde_json::to_value(spec)
            .ok()
            .and_then(|v| v.get("type").and_then(|t| t.as_str()).map(str::to_string))
            .unwrap_or_default();
        NeuralError::InLayer { index, kind, source: Box::new(self) }
    }
}
