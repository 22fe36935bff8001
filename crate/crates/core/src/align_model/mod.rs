//! Learnable refinement of the closed-form similarity fit.
//!
//! The closed-form transform maps the driven sequence to an intermediate
//! pose. Two token encoders embed the (reference, driven) correspondences
//! and the intermediate pose, a stack of cross-attention blocks fuses them
//! and a small head predicts a residual rotation, log-scale and translation
//! that is composed onto the closed-form estimate. With the initial
//! zero-output head the model reproduces the closed-form fit exactly.

mod model;
mod train;

pub use model::{
    AlignModel, Features, PreparedItem, ENCODER_M_BLOCKS, ENCODER_SVD_BLOCKS, FUSION_BLOCKS, HEAD_HIDDEN, HEAD_OUTPUTS,
    M_FEATURES, SVD_FEATURES,
};
pub use train::{
    batch_loss_and_grad, evaluate, history_csv, mean_loss, prepare_items, train, train_with, HistoryRow, Method, MetricsReport,
    MetricsRow, TrainConfig, TrainOutcome,
};
