//! Minimal deterministic tensor and gradient engine.

pub mod adam;
pub mod gradcheck;
pub mod layers;
pub mod loss;
pub mod lstm;
pub mod tape;
pub mod tensor;

pub use adam::{AdamConfig, AdamState};
pub use layers::{dense, dot_product, DenseLayer, DotProductLayer};
pub use loss::smooth_l1;
pub use lstm::{lstm_cell, lstm_cell_forward, LstmWeights};
pub use tape::{Activation, Gradients, Tape, Var};
pub use tensor::Tensor;
