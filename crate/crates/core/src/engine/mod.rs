//! The three-stage sparse decode pipeline.
//!
//! 1. [`estimate_scores`] scores every centroid of every head in one pass over
//!    the flattened, prefix-sum indexed store.
//! 2. [`select_topk`] keeps `ceil(T / B_h)` blocks per head, so each head
//!    attends to the same number of tokens whatever its block size.
//! 3. [`sparse_attention`] reads the selected blocks in place through their
//!    page spans.
//!
//! [`full_attention_oracle`] is the exact reference every stage is checked
//! against.

mod attention;
mod decode;
mod estimate;
mod topk;

pub use attention::{
    attention_weights, full_attention_oracle, sparse_attention, sparse_attention_gather,
    AttentionOutput,
};
pub use decode::{DecodeEngine, DecodeStep, TokenQkv};
pub use estimate::{estimate_scores, estimate_scores_naive, CentroidScorer, Scores};
pub use topk::{
    blocks_per_head, select_head, select_topk, select_topk_naive, HeadSelection, SelectionResult,
};
