//! Attention, recurrent and multi-path sequence blocks.

mod attention;
mod layers;
mod lstm;
mod paths;

pub use attention::{
    causal_mask, relative_position_bucket, AttentionOutput, MultiHeadAttention, RelativePositionBias,
};
pub use layers::{LayerSpec, LstmAttentionBlock, TransformerLayer};
pub use lstm::{BiLstmModule, BiLstmStates, LstmWeights};
pub use paths::{DualPathBlock, TriplePathBlock};
