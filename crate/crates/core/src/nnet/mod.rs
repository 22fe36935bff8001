//! Small dense-network toolkit: parameter storage, linear and normalization
//! layers, multi-head attention, transformer blocks, Adam and gradient
//! checking. Everything is `f64` with exact reverse-mode gradients.

pub mod adam;
pub mod attention;
pub mod block;
pub mod gradcheck;
pub mod layers;
pub mod params;

pub use adam::{adam_step, AdamState};
pub use attention::{attention, softmax_rows, MultiHeadAttention};
pub use block::{Block, BlockCache};
pub use gradcheck::{grad_check, FD_STEP, MAX_CHECKED_COORDS};
pub use layers::{gelu, gelu_grad, FeedForward, LayerNorm, Linear};
pub use params::{Layout, ParamId, ParamSet, WEIGHTS_FORMAT};

/// Row-major dense matrix.
pub type Tensor2 = ndarray::Array2<f64>;

pub const D_MODEL: usize = 64;
pub const HEADS: usize = 4;
pub const FFN_HIDDEN: usize = 4 * D_MODEL;
