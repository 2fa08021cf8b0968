//! Benchmark harness comparing dense naive attention against dilated
//! attention, with exact multiplication counts beside every timing.
//!
//! [`bench_attention`] times one configuration over several batch sizes;
//! [`sweep`] runs a list of configurations read from TOML and
//! [`write_report`] stores the CSV plus a JSON environment sidecar.

mod config;
mod report;
mod stats;
mod timing;

pub use config::{BenchCase, SweepConfig};
pub use report::{BenchReport, BenchRow, EnvMeta};
pub use stats::spearman;
pub use timing::{percentile, timer_resolution, Summary};

use std::path::{Path, PathBuf};
use std::time::Instant;

use dilattn_core::attention::{dilated_attention_with, flop_count, naive_attention, worker_pool, Exec};
use dilattn_core::{AttentionConfig, Scalar, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

pub const WARMUP: usize = 3;
pub const MIN_REPEATS: usize = 3;
/// A timed run must span at least this many timer ticks.
pub const MIN_TICKS: u32 = 3;

#[derive(Debug, thiserror::Error)]
pub enum BenchError {
    #[error(transparent)]
    Core(#[from] dilattn_core::Error),
    #[error("timer too coarse: a {kernel} run took {elapsed_ns} ns, below {MIN_TICKS} ticks of {resolution_ns} ns")]
    Timer {
        kernel: &'static str,
        elapsed_ns: u128,
        resolution_ns: u128,
    },
    #[error("invalid benchmark settings: {0}")]
    Config(String),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("cannot write report: {0}")]
    Csv(#[from] csv::Error),
}

pub type Result<T, E = BenchError> = std::result::Result<T, E>;

/// Run-wide harness settings.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HarnessOptions {
    pub repeats: usize,
    pub workers: usize,
    pub seed: u64,
}

impl Default for HarnessOptions {
    fn default() -> Self {
        HarnessOptions {
            repeats: 5,
            workers: 1,
            seed: 0,
        }
    }
}

/// One batch worth of per-head inputs.
struct Inputs<T> {
    /// `(q, k, v, head offset)` for every (sample, head).
    items: Vec<(Tensor<T>, Tensor<T>, Tensor<T>, usize)>,
}

impl<T: Scalar> Inputs<T> {
    fn random(cfg: &AttentionConfig, batch: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let shape = [cfg.seq_len, cfg.head_dim];
        let mut items = Vec::with_capacity(batch * cfg.num_heads);
        for _ in 0..batch {
            for &offset in &cfg.head_offsets {
                let q = Tensor::randn(&shape, 1.0, &mut rng);
                let k = Tensor::randn(&shape, 1.0, &mut rng);
                let v = Tensor::randn(&shape, 1.0, &mut rng);
                items.push((q, k, v, offset));
            }
        }
        Inputs { items }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Variant {
    Dense,
    Dilated,
}

fn run_once<T: Scalar>(
    variant: Variant,
    cfg: &AttentionConfig,
    inputs: &Inputs<T>,
    pool: Option<&rayon::ThreadPool>,
) -> Result<()> {
    let one = |(q, k, v, offset): &(Tensor<T>, Tensor<T>, Tensor<T>, usize)| -> Result<Tensor<T>> {
        Ok(match variant {
            Variant::Dense => naive_attention(q, k, v)?,
            Variant::Dilated => dilated_attention_with(q, k, v, cfg, *offset, Exec::Serial)?,
        })
    };
    let outputs: Vec<Tensor<T>> = match pool {
        None => inputs.items.iter().map(one).collect::<Result<_>>()?,
        Some(pool) => pool.install(|| inputs.items.par_iter().map(one).collect::<Result<_>>())?,
    };
    std::hint::black_box(outputs);
    Ok(())
}

fn time_variant<T: Scalar>(
    variant: Variant,
    cfg: &AttentionConfig,
    inputs: &Inputs<T>,
    opts: &HarnessOptions,
    pool: Option<&rayon::ThreadPool>,
    resolution_ns: u128,
) -> Result<Vec<f64>> {
    for _ in 0..WARMUP {
        run_once(variant, cfg, inputs, pool)?;
    }
    let mut samples = Vec::with_capacity(opts.repeats);
    for _ in 0..opts.repeats {
        let start = Instant::now();
        run_once(variant, cfg, inputs, pool)?;
        let elapsed = start.elapsed().as_nanos();
        if elapsed < MIN_TICKS as u128 * resolution_ns {
            return Err(BenchError::Timer {
                kernel: match variant {
                    Variant::Dense => "dense",
                    Variant::Dilated => "dilated",
                },
                elapsed_ns: elapsed,
                resolution_ns,
            });
        }
        samples.push(elapsed as f64 / 1e6);
    }
    Ok(samples)
}

/// Times dense naive attention and dilated attention (with `cfg.kernel`
/// inside each segment) for every batch size. Each (sample, head) pair is
/// one work item; with `workers > 1` items run on a pool of that size.
pub fn bench_attention<T: Scalar>(
    id: &str,
    cfg: &AttentionConfig,
    batch_sizes: &[usize],
    opts: &HarnessOptions,
) -> Result<BenchReport> {
    if opts.repeats < MIN_REPEATS {
        return Err(BenchError::Config(format!(
            "repeats must be at least {MIN_REPEATS}, got {}",
            opts.repeats
        )));
    }
    if batch_sizes.contains(&0) {
        return Err(BenchError::Config("batch sizes must be positive".into()));
    }
    cfg.validate()?;
    let flops = flop_count(cfg)?;
    let pool = if opts.workers > 1 {
        Some(worker_pool(opts.workers)?)
    } else {
        None
    };
    let resolution_ns = timer_resolution().as_nanos().max(1);
    let mut report = BenchReport::default();
    for &batch in batch_sizes {
        let inputs = Inputs::<T>::random(cfg, batch, opts.seed);
        let dense = time_variant(Variant::Dense, cfg, &inputs, opts, pool.as_ref(), resolution_ns)?;
        let dilated = time_variant(Variant::Dilated, cfg, &inputs, opts, pool.as_ref(), resolution_ns)?;
        let dense = Summary::of(&dense);
        let dilated = Summary::of(&dilated);
        report.rows.push(BenchRow {
            config_id: id.to_string(),
            n: cfg.seq_len,
            w: cfg.segment_len,
            r: cfg.interval,
            h: cfg.num_heads,
            d: cfg.head_dim,
            kernel: kernel_label(cfg),
            batch,
            median_ms: dilated.median,
            p10_ms: dilated.p10,
            p90_ms: dilated.p90,
            dense_mults: flops.dense_mults * batch as u64,
            dilated_mults: flops.dilated_mults * batch as u64,
            measured_speedup: dense.median / dilated.median,
        });
    }
    Ok(report)
}

fn kernel_label(cfg: &AttentionConfig) -> String {
    match cfg.kernel {
        dilattn_core::Kernel::Naive => "naive".into(),
        dilattn_core::Kernel::Tiled { tile_size } => format!("tiled{tile_size}"),
    }
}

/// Runs every configuration of `cfg` over its batch sizes, in file order.
pub fn sweep(cfg: &SweepConfig) -> Result<BenchReport> {
    cfg.validate()?;
    let opts = cfg.harness_options();
    let mut report = BenchReport::default();
    for case in &cfg.configs {
        let attn = case.attention_config()?;
        let part = match cfg.dtype {
            dilattn_core::DType::F32 => bench_attention::<f32>(&case.id, &attn, &cfg.batch_sizes, &opts)?,
            dilattn_core::DType::F64 => bench_attention::<f64>(&case.id, &attn, &cfg.batch_sizes, &opts)?,
        };
        report.rows.extend(part.rows);
    }
    Ok(report)
}

/// Writes `path` as CSV and `<stem>.meta.json` beside it.
pub fn write_report(report: &BenchReport, meta: &EnvMeta, path: impl AsRef<Path>) -> Result<PathBuf> {
    let path = path.as_ref();
    report.save_csv(path)?;
    let meta_path = EnvMeta::sidecar_path(path);
    let json = serde_json::to_string_pretty(meta).expect("metadata serializes");
    std::fs::write(&meta_path, json).map_err(|source| BenchError::Io {
        path: meta_path.clone(),
        source,
    })?;
    Ok(meta_path)
}
