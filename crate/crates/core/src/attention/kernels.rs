use super::Kernel;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{dot, matmul_into, Tensor};

/// Transient score-buffer usage of one tiled call.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct TiledStats {
    /// Largest number of score scalars alive at once.
    pub peak_score_scalars: usize,
    pub tiles: usize,
}

fn check_qkv<T: Scalar>(q: &Tensor<T>, k: &Tensor<T>, v: &Tensor<T>) -> Result<(usize, usize, usize)> {
    let (n, d) = q.dims2()?;
    let (nk, dk) = k.dims2()?;
    let (nv, dv) = v.dims2()?;
    if dk != d {
        return Err(Error::dim("attention q/k", q.shape(), k.shape()));
    }
    if nv != nk {
        return Err(Error::dim("attention k/v", k.shape(), v.shape()));
    }
    Ok((n, nk, dv))
}

fn default_scale<T: Scalar>(q: &Tensor<T>) -> T {
    T::from_f64_lossy(1.0 / (q.cols() as f64).sqrt())
}

/// `softmax(q kᵀ / √d) v`, bidirectional.
pub fn naive_attention<T: Scalar>(q: &Tensor<T>, k: &Tensor<T>, v: &Tensor<T>) -> Result<Tensor<T>> {
    naive_attention_scaled(q, k, v, default_scale(q))
}

pub fn naive_attention_scaled<T: Scalar>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    scale: T,
) -> Result<Tensor<T>> {
    check_qkv(q, k, v)?;
    let probs = q.matmul_t(k)?.scale(scale).softmax_rows()?;
    probs.matmul(v)
}

pub fn tiled_attention<T: Scalar>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    tile_size: usize,
) -> Result<Tensor<T>> {
    tiled_attention_scaled(q, k, v, default_scale(q), tile_size).map(|(out, _)| out)
}

/// Online-softmax attention over key tiles of `tile_size` rows. Keeps a
/// running row max and normalizer per query row and rescales the partial
/// output whenever the max grows. The score buffer never exceeds
/// `N × tile_size` scalars. A single tile covering all keys runs the naive
/// kernel.
pub fn tiled_attention_scaled<T: Scalar>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    scale: T,
    tile_size: usize,
) -> Result<(Tensor<T>, TiledStats)> {
    let (n, nk, dv) = check_qkv(q, k, v)?;
    if tile_size == 0 {
        return Err(Error::Contract("tile_size must be >= 1".into()));
    }
    if tile_size >= nk {
        let out = naive_attention_scaled(q, k, v, scale)?;
        let stats = TiledStats {
            peak_score_scalars: n * nk,
            tiles: 1,
        };
        return Ok((out, stats));
    }

    let d = q.cols();
    let mut row_max = vec![T::neg_infinity(); n];
    let mut row_sum = vec![T::zero(); n];
    let mut acc = vec![T::zero(); n * dv];
    let mut scores: Vec<T> = Vec::with_capacity(n * tile_size);
    let mut stats = TiledStats::default();

    for tile_start in (0..nk).step_by(tile_size) {
        let tile_end = (tile_start + tile_size).min(nk);
        let width = tile_end - tile_start;
        scores.clear();
        for i in 0..n {
            let qi = &q.data()[i * d..(i + 1) * d];
            for j in tile_start..tile_end {
                scores.push(dot(qi, &k.data()[j * d..(j + 1) * d]) * scale);
            }
        }
        stats.peak_score_scalars = stats.peak_score_scalars.max(scores.len());
        stats.tiles += 1;

        for i in 0..n {
            let row = &mut scores[i * width..(i + 1) * width];
            let tile_max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let new_max = row_max[i].max(tile_max);
            let correction = if row_max[i] == T::neg_infinity() {
                T::zero()
            } else {
                (row_max[i] - new_max).exp()
            };
            let out_row = &mut acc[i * dv..(i + 1) * dv];
            if correction != T::one() {
                for o in out_row.iter_mut() {
                    *o = *o * correction;
                }
            }
            let mut sum = row_sum[i] * correction;
            for s in row.iter_mut() {
                *s = (*s - new_max).exp();
                sum = sum + *s;
            }
            // out_row += p · V[tile]
            matmul_into(row, &v.data()[tile_start * dv..tile_end * dv], out_row, 1, width, dv);
            row_sum[i] = sum;
            row_max[i] = new_max;
        }
    }

    for (row, &sum) in acc.chunks_exact_mut(dv).zip(&row_sum) {
        for o in row.iter_mut() {
            *o = *o / sum;
        }
    }
    Ok((Tensor::from_parts(vec![n, dv], acc), stats))
}

/// Dispatches one dense attention call to `kernel`.
pub fn attend<T: Scalar>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    scale: T,
    kernel: Kernel,
) -> Result<Tensor<T>> {
    match kernel {
        Kernel::Naive => naive_attention_scaled(q, k, v, scale),
        Kernel::Tiled { tile_size } => tiled_attention_scaled(q, k, v, scale, tile_size).map(|(o, _)| o),
    }
}
