//! The spatial-temporal network: graph convolution blocks, pooling, the
//! classifier and multi-stream fusion, each with an exact backward pass.

mod block;
mod layers;
mod model;
mod streams;
mod tensor;

pub use block::{Block, BlockConfig};
pub use layers::{
    global_average_pool, global_average_pool_backward, softmax, BatchNorm, Dropout, Linear, Mode, Param,
    Propagations, Relu, Rng, SpatialConv, TemporalConv, BN_EPSILON, BN_MOMENTUM,
};
pub use model::{
    CgcnModel, ChannelPlan, ModelConfig, PropagationId, BLOCK_STRIDES, CHECKPOINT_FORMAT, DESK_CHANNELS,
    PAPER_CHANNELS,
};
pub use streams::{argmax, four_stream_predict, propagation_for, StreamScores};
pub use tensor::FeatureTensor;
