//! Block-sparse attention decoding with per-head block sizes.
//!
//! Keys are summarized into one centroid per block; at every decode step
//! each head scores its centroids against the query, keeps the best blocks
//! under a shared token budget and attends only over their pages. Block
//! sizes differ per head and are chosen offline from measured recall.

pub mod calibrator;
pub mod centroids;
pub mod config;
pub mod engine;
pub mod error;
pub mod kernels;
pub mod kvstore;
pub mod quantizer;
pub mod report;
pub mod timing;
pub mod workload;

pub use calibrator::{
    assign_block_sizes, attention_recall, calibrate, format_assignment, normalized_recall,
    parse_assignment, profile_sensitivity, transfer_check, CalibrationReport, RecallTable,
    TransferReport,
};
pub use centroids::{BlockAssignment, CentroidStore};
pub use config::{CentroidMethod, EngineConfig};
pub use engine::{
    estimate_scores, full_attention_oracle, select_topk, sparse_attention, AttentionOutput,
    DecodeEngine, SelectionResult, TokenQkv,
};
pub use error::{Error, Result};
pub use kvstore::{init_cache, DenseKeys, KeyRows, KvRows, PageSpan, PagedKVCache};
pub use quantizer::{QuantMode, QuantSpec, QuantizedCentroidStore};
pub use workload::{
    generate_synthetic, load_trace, save_trace, CalibrationSample, HeadProfile, Trace, WorkloadSpec,
};
