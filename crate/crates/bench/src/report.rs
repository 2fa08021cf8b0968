//! Report rows, CSV output, and environment metadata.

use std::fs::File;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::{BenchError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    #[serde(rename = "config id")]
    pub config_id: String,
    #[serde(rename = "N")]
    pub n: usize,
    pub w: usize,
    pub r: usize,
    pub h: usize,
    pub d: usize,
    pub kernel: String,
    pub batch: usize,
    /// Dilated wall-clock, per batch.
    pub median_ms: f64,
    pub p10_ms: f64,
    pub p90_ms: f64,
    pub dense_mults: u64,
    pub dilated_mults: u64,
    /// Dense naive median over dilated median.
    pub measured_speedup: f64,
}

impl BenchRow {
    pub fn analytic_ratio(&self) -> f64 {
        self.dense_mults as f64 / self.dilated_mults as f64
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct BenchReport {
    pub rows: Vec<BenchRow>,
}

impl BenchReport {
    pub const HEADER: [&'static str; 14] = [
        "config id",
        "N",
        "w",
        "r",
        "h",
        "d",
        "kernel",
        "batch",
        "median_ms",
        "p10_ms",
        "p90_ms",
        "dense_mults",
        "dilated_mults",
        "measured_speedup",
    ];

    pub fn write_csv<W: std::io::Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(writer);
        w.write_record(Self::HEADER)?;
        for row in &self.rows {
            w.serialize(row)?;
        }
        w.flush().map_err(|e| BenchError::Csv(e.into()))
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|source| BenchError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        self.write_csv(file)
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        let mut r = csv::Reader::from_path(path)?;
        let rows = r.deserialize().collect::<std::result::Result<_, _>>()?;
        Ok(BenchReport { rows })
    }
}

/// Where and how a report was produced.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvMeta {
    pub workers: usize,
    pub dtype: String,
    pub repeats: usize,
    pub warmup: usize,
    pub seed: u64,
    pub available_cpus: usize,
    pub os: String,
    pub arch: String,
    pub timer_resolution_ns: u128,
}

impl EnvMeta {
    pub fn capture(workers: usize, dtype: dilattn_core::DType, repeats: usize, seed: u64) -> Self {
        EnvMeta {
            workers,
            dtype: dtype.to_string(),
            repeats,
            warmup: crate::WARMUP,
            seed,
            available_cpus: std::thread::available_parallelism().map_or(1, usize::from),
            os: std::env::consts::OS.into(),
            arch: std::env::consts::ARCH.into(),
            timer_resolution_ns: crate::timer_resolution().as_nanos(),
        }
    }

    /// `report.csv` → `report.meta.json`.
    pub fn sidecar_path(csv: &Path) -> PathBuf {
        let stem = csv.file_stem().map_or_else(|| "report".into(), |s| s.to_string_lossy().into_owned());
        csv.with_file_name(format!("{stem}.meta.json"))
    }
}
