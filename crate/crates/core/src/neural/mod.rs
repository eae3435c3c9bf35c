//! Reverse-mode tensor engine and miniature segmentation networks.

pub mod gradcheck;
mod graph;
mod loss;
mod network;
mod optim;
mod tensor;
mod train;

pub use graph::{Gradients, Graph, Var};
pub use loss::{ce_parts, weighted_ce_loss, CeParts};
pub use network::{
    build_network, load_weights, predict_tiles, save_weights, Arch, LayerSpec, LayerVars, NetworkParams,
    DEFAULT_PATCH, DEFAULT_WIDTH, PYRAMID_BINS,
};
pub use optim::{adam_step, sgd_momentum_step, AdamState, Optimizer, OptimizerState};
pub use tensor::{
    avg_pool_bins, concat, conv2d, max_unpool, maxpool_argmax, relu, softmax, upsample_nearest, Tensor,
};
pub use train::{input_statistics, train, write_loss_curve, EpochRecord, TrainConfig, TrainOutcome, TrainSample, Trainer};
