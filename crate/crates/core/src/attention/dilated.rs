use std::sync::atomic::{AtomicBool, Ordering};

use rand::Rng;
use rayon::prelude::*;

use super::{attend, AttentionConfig, SegmentView};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

static RECOMPOSE_FAULT: AtomicBool = AtomicBool::new(false);

/// Test hook: while set, [`recompose`] silently drops the last segment.
/// Lets verification drivers prove they catch a broken placement.
#[doc(hidden)]
pub fn inject_recompose_fault(enabled: bool) {
    RECOMPOSE_FAULT.store(enabled, Ordering::SeqCst);
}

/// Where segment work runs.
#[derive(Clone, Copy)]
pub enum Exec<'a> {
    Serial,
    Pool(&'a rayon::ThreadPool),
}

pub fn worker_pool(workers: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| Error::Config(format!("cannot start {workers} workers: {e}")))
}

/// Sparsified rows of one segment, tagged with the rows they came from.
#[derive(Debug, Clone, PartialEq)]
pub struct SegmentRows<T> {
    pub rows: Tensor<T>,
    pub view: SegmentView,
}

/// Selects rows `iw + γ, iw + γ + r, …` of segment `i`.
pub fn sparsify_segment<T: Scalar>(
    x: &Tensor<T>,
    cfg: &AttentionConfig,
    segment: usize,
    offset: usize,
) -> Result<SegmentRows<T>> {
    let (n, _) = x.dims2()?;
    if n != cfg.seq_len {
        return Err(Error::dim("sparsify_segment", x.shape(), &[cfg.seq_len]));
    }
    let view = cfg.segment_view(segment, offset)?;
    if view.is_empty() {
        return Err(Error::Contract(format!(
            "segment {segment} has no rows at offset {offset}"
        )));
    }
    let rows = x.slice_rows_strided(view.offset, view.stride, view.len())?;
    Ok(SegmentRows { rows, view })
}

/// Attention among the sparsified rows of a single segment.
pub fn segment_attention<T: Scalar>(
    q: &SegmentRows<T>,
    k: &SegmentRows<T>,
    v: &SegmentRows<T>,
    cfg: &AttentionConfig,
) -> Result<SegmentRows<T>> {
    if q.view != k.view || q.view != v.view {
        return Err(Error::Contract(format!(
            "q/k/v come from different segment views ({:?}, {:?}, {:?})",
            q.view.row_indices, k.view.row_indices, v.view.row_indices
        )));
    }
    let scale = T::from_f64_lossy(cfg.score_scale());
    let out = attend(&q.rows, &k.rows, &v.rows, scale, cfg.kernel)?;
    Ok(SegmentRows {
        rows: out,
        view: q.view.clone(),
    })
}

/// Places every segment output at its original rows of an `N × d` zero
/// matrix. Views must be pairwise disjoint; unselected rows stay zero.
pub fn recompose<T: Scalar>(outputs: &[SegmentRows<T>], seq_len: usize, dim: usize) -> Result<Tensor<T>> {
    let mut owner: Vec<Option<usize>> = vec![None; seq_len];
    for out in outputs {
        let (m, d) = out.rows.dims2()?;
        if d != dim || m != out.view.len() {
            return Err(Error::dim("recompose", out.rows.shape(), &[out.view.len(), dim]));
        }
        for &row in &out.view.row_indices {
            let slot = owner.get_mut(row).ok_or(Error::Index {
                what: "recompose row",
                index: row,
                limit: seq_len,
            })?;
            if let Some(prev) = slot.replace(out.view.segment_index) {
                return Err(Error::Contract(format!(
                    "row {row} written by segments {prev} and {}",
                    out.view.segment_index
                )));
            }
        }
    }

    let kept = if RECOMPOSE_FAULT.load(Ordering::SeqCst) {
        &outputs[..outputs.len().saturating_sub(1)]
    } else {
        outputs
    };
    let mut data = vec![T::zero(); seq_len * dim];
    for out in kept {
        for (k, &row) in out.view.row_indices.iter().enumerate() {
            data[row * dim..(row + 1) * dim].copy_from_slice(out.rows.row(k));
        }
    }
    Tensor::new(vec![seq_len, dim], data)
}

pub fn dilated_attention<T: Scalar>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    cfg: &AttentionConfig,
    offset: usize,
) -> Result<Tensor<T>> {
    dilated_attention_with(q, k, v, cfg, offset, Exec::Serial)
}

/// One head stream of dilated attention. Segments are independent; with a
/// pool they run concurrently and the result is bitwise identical to the
/// serial run.
pub fn dilated_attention_with<T: Scalar>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    cfg: &AttentionConfig,
    offset: usize,
    exec: Exec<'_>,
) -> Result<Tensor<T>> {
    cfg.validate()?;
    for t in [q, k, v] {
        if t.dims2()?.0 != cfg.seq_len {
            return Err(Error::dim("dilated_attention", t.shape(), &[cfg.seq_len]));
        }
    }
    if k.cols() != q.cols() {
        return Err(Error::dim("dilated_attention q/k", q.shape(), k.shape()));
    }

    let one = |segment: usize| -> Result<Option<SegmentRows<T>>> {
        if cfg.segment_view(segment, offset)?.is_empty() {
            return Ok(None);
        }
        let qs = sparsify_segment(q, cfg, segment, offset)?;
        let ks = sparsify_segment(k, cfg, segment, offset)?;
        let vs = sparsify_segment(v, cfg, segment, offset)?;
        segment_attention(&qs, &ks, &vs, cfg).map(Some)
    };

    let segments = 0..cfg.num_segments();
    let outputs: Vec<Option<SegmentRows<T>>> = match exec {
        Exec::Serial => segments.map(one).collect::<Result<_>>()?,
        Exec::Pool(pool) => pool.install(|| segments.into_par_iter().map(one).collect::<Result<_>>())?,
    };
    let outputs: Vec<SegmentRows<T>> = outputs.into_iter().flatten().collect();
    recompose(&outputs, cfg.seq_len, v.cols())
}

/// Projection weights of a multi-head attention layer over `D = h·d` channels.
#[derive(Debug, Clone, PartialEq)]
pub struct MultiHeadWeights<T> {
    pub wq: Tensor<T>,
    pub bq: Tensor<T>,
    pub wk: Tensor<T>,
    pub bk: Tensor<T>,
    pub wv: Tensor<T>,
    pub bv: Tensor<T>,
    pub wo: Tensor<T>,
    pub bo: Tensor<T>,
}

impl<T: Scalar> MultiHeadWeights<T> {
    pub fn random<R: Rng + ?Sized>(dim: usize, std: f64, rng: &mut R) -> Self {
        let mut w = || Tensor::trunc_normal(&[dim, dim], std, rng);
        let (wq, wk, wv, wo) = (w(), w(), w(), w());
        let z = || Tensor::zeros(&[dim]);
        MultiHeadWeights {
            wq,
            bq: z(),
            wk,
            bk: z(),
            wv,
            bv: z(),
            wo,
            bo: z(),
        }
    }
}

/// Multi-head dilated attention. Head `j` runs its own stream at offset
/// `head_offsets[j]`; the heads are concatenated and output-projected.
pub fn multi_head_dilated<T: Scalar>(
    x: &Tensor<T>,
    weights: &MultiHeadWeights<T>,
    cfg: &AttentionConfig,
    exec: Exec<'_>,
) -> Result<Tensor<T>> {
    cfg.validate()?;
    cfg.check_coverage()?;
    let (_, dim) = x.dims2()?;
    if dim != cfg.num_heads * cfg.head_dim {
        return Err(Error::dim(
            "multi_head_dilated",
            x.shape(),
            &[cfg.num_heads, cfg.head_dim],
        ));
    }
    let q = x.matmul(&weights.wq)?.add_rows(&weights.bq)?;
    let k = x.matmul(&weights.wk)?.add_rows(&weights.bk)?;
    let v = x.matmul(&weights.wv)?.add_rows(&weights.bv)?;
    let d = cfg.head_dim;
    let heads = cfg
        .head_offsets
        .iter()
        .enumerate()
        .map(|(j, &offset)| {
            dilated_attention_with(
                &q.slice_cols(j * d, d)?,
                &k.slice_cols(j * d, d)?,
                &v.slice_cols(j * d, d)?,
                cfg,
                offset,
                exec,
            )
        })
        .collect::<Result<Vec<_>>>()?;
    let refs: Vec<&Tensor<T>> = heads.iter().collect();
    Tensor::concat_cols(&refs)?
        .matmul(&weights.wo)?
        .add_rows(&weights.bo)
}

/// For every row, the heads whose stream writes it.
pub fn row_provenance(cfg: &AttentionConfig) -> Result<Vec<Vec<usize>>> {
    let mut writers = vec![Vec::new(); cfg.seq_len];
    for (head, &offset) in cfg.head_offsets.iter().enumerate() {
        for segment in 0..cfg.num_segments() {
            for row in cfg.segment_view(segment, offset)?.row_indices {
                writers[row].push(head);
            }
        }
    }
    Ok(writers)
}
