//! Forward and backward kernels for every layer type in the network, plus the loss.

pub mod batchnorm;
pub mod conv;
pub mod loss;
pub mod merge;
pub mod prelu;

pub use batchnorm::{batchnorm_backward, batchnorm_eval, batchnorm_forward, BnCache, BnGrads, Mode, RunningStats};
pub use conv::{conv2d_backward, conv2d_forward, transposed_conv2d_backward, transposed_conv2d_forward, ConvCache, ConvGrads, UpConvCache};
pub use loss::{softmax_channels, weighted_ce_loss, ClassWeights};
pub use merge::{add_backward, add_elementwise, concat_channels, split_channels};
pub use prelu::{prelu_backward, prelu_forward, PreluCache};
