//! Dense, tiled, and dilated attention.
//!
//! Dilated attention splits a length-`N` sequence into segments of `w`
//! consecutive rows, keeps every `r`-th row of each segment starting at a
//! per-head offset `γ`, attends within each sparsified segment, and scatters
//! the segment outputs back to their original row positions. Rows a head
//! does not select stay zero for that head; giving the heads offsets
//! `0..r` covers every row.

mod config;
mod dilated;
mod flops;
mod kernels;

pub use config::{AttentionConfig, Kernel, SegmentView};
pub use dilated::{
    dilated_attention, dilated_attention_with, inject_recompose_fault, multi_head_dilated,
    recompose, row_provenance, segment_attention, sparsify_segment, worker_pool, Exec,
    MultiHeadWeights, SegmentRows,
};
pub use flops::{flop_count, FlopCount};
pub use kernels::{
    attend, naive_attention, naive_attention_scaled, tiled_attention, tiled_attention_scaled,
    TiledStats,
};
