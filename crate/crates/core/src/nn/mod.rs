//! 3-D network kernels with explicit forward and backward passes.

pub mod checkpoint;
pub mod conv;
pub mod layers;
pub mod norm;
pub mod optim;
pub mod pool;
pub mod tensor;

pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use conv::{conv3d_backward, conv3d_forward, deconv3d_x2_backward, deconv3d_x2_forward, Conv3d, ConvConfig, Deconv3dX2};
pub use layers::{concat_channels, linear_backward, linear_forward, relu_backward, relu_forward, split_channels, Linear, Relu};
pub use norm::{BatchNorm3d, NormConfig};
pub use optim::{sgd_step, SgdConfig};
pub use pool::{pool3d_backward, pool3d_forward, Pool3d, PoolMode};
pub use tensor::{HasParams, Mode, Param, Scalar, Tensor};
