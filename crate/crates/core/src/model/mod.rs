//! Gated and stacked blocks with SSM or attention routing, plus embeddings and the MLM head.

mod attention;
mod blocks;
pub mod checkpoint;
mod config;
mod count;
mod network;

pub use attention::{attention, attention_probs};
pub use blocks::{gated_block, stacked_block};
pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
pub use config::{Arch, ModelConfig, Routing};
pub use count::{param_count, ParamCount};
pub use network::{
    BlockIds, Direction, EmbeddingIds, GatedIds, GatedRoute, LayerNormIds, Linear, Model,
    RouteIds, SsmIds, StackedIds, PAD_ID,
};

use crate::error::Result;
use crate::numerics::{Graph, Var};

/// Reverse the order of rows within each sequence of `seq_len` rows.
pub fn flip(g: &mut Graph, x: Var, seq_len: usize) -> Result<Var> {
    g.flip(x, seq_len)
}
