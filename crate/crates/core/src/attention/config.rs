use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Kernel used for each dense attention call.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Kernel {
    /// Materializes the full score matrix and applies a stabilized softmax.
    Naive,
    /// Streams key tiles through an online softmax.
    Tiled { tile_size: usize },
}

impl Kernel {
    pub fn name(self) -> &'static str {
        match self {
            Kernel::Naive => "naive",
            Kernel::Tiled { .. } => "tiled",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionConfig {
    pub seq_len: usize,
    pub segment_len: usize,
    pub interval: usize,
    pub num_heads: usize,
    pub head_dim: usize,
    /// Offset of each head's strided selection inside every segment.
    pub head_offsets: Vec<usize>,
    pub kernel: Kernel,
    /// Require the head offsets to cover every residue class mod `interval`.
    pub full_coverage: bool,
    /// Multiply scores by `1/√head_dim`. Off only for literal unscaled runs.
    pub scale_scores: bool,
}

impl AttentionConfig {
    /// Offsets default to `head mod interval`.
    pub fn new(
        seq_len: usize,
        segment_len: usize,
        interval: usize,
        num_heads: usize,
        head_dim: usize,
    ) -> Result<Self> {
        let cfg = AttentionConfig {
            seq_len,
            segment_len,
            interval,
            num_heads,
            head_dim,
            head_offsets: (0..num_heads).map(|h| h % interval.max(1)).collect(),
            kernel: Kernel::Naive,
            full_coverage: false,
            scale_scores: true,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn with_kernel(mut self, kernel: Kernel) -> Self {
        self.kernel = kernel;
        self
    }

    pub fn with_full_coverage(mut self) -> Result<Self> {
        self.full_coverage = true;
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        let (n, w, r) = (self.seq_len, self.segment_len, self.interval);
        if !(1 <= r && r <= w && w <= n) {
            return Err(Error::Config(format!(
                "need 1 <= interval <= segment_len <= seq_len, got r={r}, w={w}, N={n}"
            )));
        }
        if self.num_heads == 0 || self.head_dim == 0 {
            return Err(Error::Config("num_heads and head_dim must be positive".into()));
        }
        if self.head_offsets.len() != self.num_heads {
            return Err(Error::Config(format!(
                "{} head offsets for {} heads",
                self.head_offsets.len(),
                self.num_heads
            )));
        }
        if let Some(&bad) = self.head_offsets.iter().find(|&&g| g >= r) {
            return Err(Error::Config(format!("head offset {bad} not in [0, {r})")));
        }
        if let Kernel::Tiled { tile_size: 0 } = self.kernel {
            return Err(Error::Config("tile_size must be positive".into()));
        }
        if self.full_coverage {
            self.check_coverage()?;
        }
        Ok(())
    }

    /// Every residue class mod `interval` must be some head's offset.
    pub fn check_coverage(&self) -> Result<()> {
        let mut seen = vec![false; self.interval];
        for &g in &self.head_offsets {
            seen[g % self.interval] = true;
        }
        match seen.iter().position(|s| !s) {
            None => Ok(()),
            Some(missing) => Err(Error::Config(format!(
                "head offsets {:?} leave residue {missing} mod {} uncovered (needs num_heads >= interval)",
                self.head_offsets, self.interval
            ))),
        }
    }

    pub fn num_segments(&self) -> usize {
        self.seq_len.div_ceil(self.segment_len)
    }

    /// Row range `[start, end)` of segment `i`; the last segment may be short.
    pub fn segment_bounds(&self, i: usize) -> (usize, usize) {
        let start = i * self.segment_len;
        (start, (start + self.segment_len).min(self.seq_len))
    }

    pub fn score_scale(&self) -> f64 {
        if self.scale_scores {
            1.0 / (self.head_dim as f64).sqrt()
        } else {
            1.0
        }
    }

    /// Rows of segment `i` selected at offset `offset`. May be empty for a
    /// short tail segment.
    pub fn segment_view(&self, i: usize, offset: usize) -> Result<SegmentView> {
        if i >= self.num_segments() {
            return Err(Error::Index {
                what: "segment",
                index: i,
                limit: self.num_segments(),
            });
        }
        if offset >= self.interval {
            return Err(Error::Index {
                what: "segment offset",
                index: offset,
                limit: self.interval,
            });
        }
        let (start, end) = self.segment_bounds(i);
        let first = start + offset;
        let row_indices = (first..end).step_by(self.interval).collect();
        Ok(SegmentView {
            segment_index: i,
            offset: first,
            stride: self.interval,
            row_indices,
        })
    }
}

/// The global rows one sparsified segment covers.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SegmentView {
    pub segment_index: usize,
    /// Global index of the first selected row.
    pub offset: usize,
    pub stride: usize,
    pub row_indices: Vec<usize>,
}

impl SegmentView {
    pub fn len(&self) -> usize {
        self.row_indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.row_indices.is_empty()
    }
}
