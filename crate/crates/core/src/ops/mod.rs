//! Layer kernels with analytic backward passes.
//!
//! Every function is pure apart from the explicit RNG handed to dropout, and
//! is generic over [`Scalar`](crate::tensor::Scalar) so the same code runs
//! at `f64` for finite-difference checks.

pub mod activation;
pub mod conv;
pub mod norm;

pub use activation::{
    concat_channels, dropout_backward, dropout_forward, relu_backward, relu_forward,
    softmax_backward, softmax_channels, split_channels, DropoutMask, Mode,
};
pub use conv::{
    conv1x1_backward, conv1x1_forward, conv2d_backward, conv2d_forward, dilated_conv2d_backward,
    dilated_conv2d_forward, ConvGrads, ConvParams,
};
pub use norm::{
    block_backward, block_forward, instance_norm_backward, instance_norm_forward,
    norm_skip_block_backward, norm_skip_block_forward, BlockCache, BlockKind, NormCache,
    NormGrads, NormParams,
};
