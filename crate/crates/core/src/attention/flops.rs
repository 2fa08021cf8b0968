//! Analytic multiplication counts for dense and dilated attention.
//!
//! Only scalar multiplications in the score product `q kᵀ` and the value
//! product `P v` are counted; additions, softmax, and projections are not.
//! An `m`-row block with head dimension `d` costs `2 m² d`.

use serde::Serialize;

use super::AttentionConfig;
use crate::error::Result;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FlopCount {
    #[serde(rename = "N")]
    pub seq_len: usize,
    #[serde(rename = "w")]
    pub segment_len: usize,
    #[serde(rename = "r")]
    pub interval: usize,
    #[serde(rename = "h")]
    pub num_heads: usize,
    #[serde(rename = "d")]
    pub head_dim: usize,
    pub dense_mults: u64,
    pub dilated_mults: u64,
    /// `dense_mults / dilated_mults`.
    pub ratio: f64,
}

impl FlopCount {
    pub const CSV_HEADER: [&'static str; 8] =
        ["N", "w", "r", "h", "d", "dense_mults", "dilated_mults", "ratio"];

    /// `N r² / w`, what the count reduces to when `w | N` and `r | w`.
    pub fn closed_form_ratio(&self) -> f64 {
        let (n, w, r) = (self.seq_len as f64, self.segment_len as f64, self.interval as f64);
        n * r * r / w
    }

    /// `N / (w r²)`, the factor sometimes quoted for this construction. It is
    /// smaller than the counted ratio by exactly `r⁴` and drops below 1
    /// whenever `w r² > N`.
    pub fn quoted_factor(&self) -> f64 {
        let (n, w, r) = (self.seq_len as f64, self.segment_len as f64, self.interval as f64);
        n / (w * r * r)
    }
}

pub fn flop_count(cfg: &AttentionConfig) -> Result<FlopCount> {
    cfg.validate()?;
    let n = cfg.seq_len as u64;
    let d = cfg.head_dim as u64;
    let heads = cfg.num_heads as u64;
    let dense = heads * 2 * n * n * d;
    let mut dilated = 0u64;
    for &offset in &cfg.head_offsets {
        for segment in 0..cfg.num_segments() {
            let m = cfg.segment_view(segment, offset)?.len() as u64;
            dilated += 2 * m * m * d;
        }
    }
    Ok(FlopCount {
        seq_len: cfg.seq_len,
        segment_len: cfg.segment_len,
        interval: cfg.interval,
        num_heads: cfg.num_heads,
        head_dim: cfg.head_dim,
        dense_mults: dense,
        dilated_mults: dilated,
        ratio: dense as f64 / dilated as f64,
    })
}
