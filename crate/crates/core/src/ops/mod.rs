//! Forward and backward kernels of every primitive the network uses.

pub mod conv;
pub mod elementwise;
pub mod norm;
pub mod pool;
pub mod resize;

pub use conv::{conv2d, conv2d_backward, ConvGeometry, ConvGrads, ConvParams};
pub use elementwise::{
    activate, activate_backward, binary, binary_backward, broadcast_shape, concat_channels,
    reduce_to, relu_margin, sigmoid, split_channels, Activation, BinaryOp,
};
pub use norm::{
    batch_norm_infer, batch_norm_infer_backward, batch_norm_train, batch_norm_train_backward,
    BatchNormCache, BatchNormGrads, BatchNormState,
};
pub use pool::{pool, pool_backward, pool_with_indices, PoolKind, Pooled};
pub use resize::{upsample_bilinear, upsample_bilinear_backward};
