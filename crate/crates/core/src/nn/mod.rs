//! Hand-written forward and backward passes for the trajectory model.
//!
//! Histories go through a bidirectional LSTM, node embeddings are refined by
//! lane-biased multi-head attention on the anchor graph, and one MLP head
//! per horizon emits a bivariate Gaussian per future step.

pub mod checkpoint;
pub mod decoder;
pub mod gat;
pub mod linear;
pub mod lstm;
pub mod model;
pub mod params;
pub mod standardize;
pub mod tensor;

pub use checkpoint::{Checkpoint, CheckpointMeta};
pub use decoder::{Decoder, GaussianRow, RowGrad};
pub use gat::{apply_lane_bias, GatEdge, GatLayer};
pub use linear::Linear;
pub use lstm::{Encoder, Lstm};
pub use model::{backward, forward, predict_targets, scene_view, InputEdge, Mode, Prediction, SceneInput};
pub use params::{ModelConfig, ParamStore, Params};
pub use standardize::Standardizer;
pub use tensor::Tensor;
