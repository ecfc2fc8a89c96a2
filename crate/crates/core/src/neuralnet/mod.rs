//! A from-scratch convolutional classifier.
//!
//! Convolutions are cross-correlations over `[batch, channels, height,
//! width]` tensors. Layers are generic over [`Scalar`] so the same code runs
//! in `f32` for training and in `f64` for gradient checks.

pub mod adam;
pub mod checkpoint;
pub mod layers;
pub mod loss;
pub mod network;
pub mod tensor;

pub use adam::{AdamConfig, AdamState};
pub use layers::{
    conv2d_backward, conv2d_forward, conv_output_size, dense_backward, dense_forward, dropout_backward,
    dropout_forward, flatten, flatten_backward, relu_backward, relu_forward, Phase,
};
pub use loss::{softmax, softmax_cross_entropy};
pub use network::{
    build_network, count_dense_connections, l2_penalty, ForwardPass, Gradients, Layer, LayerSpec, NetConfig,
    Network, StepLoss,
};
pub use tensor::{Scalar, Tensor};
