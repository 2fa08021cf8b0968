//! Subcommand bodies. Each returns the text it prints on stdout.

use std::fs;
use std::path::{Path, PathBuf};

use dilattn_bench::{sweep, write_report, BenchCase, EnvMeta, SweepConfig};
use dilattn_core::attention::{inject_recompose_fault, worker_pool};
use dilattn_core::distill::{run_distillation, DistillConfig, LossHistory, OptimizerConfig, ScheduleParams, Weighting};
use dilattn_core::encoder::{EncoderConfig, ParamSet};
use dilattn_core::io::read_tensor;
use dilattn_core::segloss::{loss_report, MaskPair};
use dilattn_core::{DType, Scalar, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::verify::{self, Suite};
use crate::{datagen, CliError};

/// Flags shared by every subcommand.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub config: Option<PathBuf>,
    pub seed: u64,
    pub out: PathBuf,
    /// `None` keeps the config file's value (or 1).
    pub workers: Option<usize>,
    /// `None` keeps the config file's value (or f32).
    pub dtype: Option<DType>,
}

impl RunConfig {
    fn workers(&self) -> usize {
        self.workers.unwrap_or(1).max(1)
    }

    fn read_config(&self) -> Result<Option<String>, CliError> {
        match &self.config {
            None => Ok(None),
            Some(p) => fs::read_to_string(p).map(Some).map_err(|e| CliError::io(p, e)),
        }
    }
}

fn ensure_dir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))
}

pub fn cmd_verify(suites: &[Suite], inject_fault: bool) -> Result<String, CliError> {
    let suites = if suites.is_empty() { Suite::ALL.to_vec() } else { suites.to_vec() };
    inject_recompose_fault(inject_fault);
    let reports = verify::run(&suites);
    inject_recompose_fault(false);
    let table = verify::render(&reports);
    let failed: Vec<String> = reports.iter().filter(|r| !r.passed()).map(|r| r.suite.name().to_string()).collect();
    if failed.is_empty() {
        Ok(table)
    } else {
        Err(CliError::Verification { table, failed })
    }
}

pub fn cmd_gen_data(run: &RunConfig, count: usize, image_size: usize) -> Result<String, CliError> {
    let warning = match run.dtype.unwrap_or(DType::F32) {
        DType::F32 => datagen::write_dataset::<f32>(&run.out, count, image_size, run.seed)?,
        DType::F64 => datagen::write_dataset::<f64>(&run.out, count, image_size, run.seed)?,
    };
    if let Some(w) = warning {
        eprintln!("warning: {w}");
    }
    Ok(format!("wrote {count} images and masks to {}\n", run.out.display()))
}

/// An encoder given either by preset name or in full.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum EncoderChoice {
    Preset(String),
    Custom(EncoderConfig),
}

impl EncoderChoice {
    pub fn resolve(&self) -> Result<EncoderConfig, CliError> {
        match self {
            EncoderChoice::Preset(name) => Ok(EncoderConfig::preset(name)?),
            EncoderChoice::Custom(cfg) => Ok(cfg.clone()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSource {
    /// A `gen-data` output directory; synthetic images are generated if absent.
    #[serde(default)]
    pub dir: Option<PathBuf>,
    #[serde(default = "default_count")]
    pub count: usize,
    #[serde(default = "default_image_size")]
    pub image_size: usize,
}

fn default_count() -> usize {
    64
}
fn default_image_size() -> usize {
    32
}

impl Default for DataSource {
    fn default() -> Self {
        DataSource {
            dir: None,
            count: default_count(),
            image_size: default_image_size(),
        }
    }
}

/// The `distill` config file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DistillFile {
    #[serde(default = "default_teacher")]
    pub teacher: EncoderChoice,
    #[serde(default = "default_student")]
    pub student: EncoderChoice,
    /// Checkpoint directories; random initialization from the seed if absent.
    #[serde(default)]
    pub teacher_checkpoint: Option<PathBuf>,
    #[serde(default)]
    pub student_checkpoint: Option<PathBuf>,
    /// Defaults to Δt = 2, T_1 = 0, every student layer in focus.
    #[serde(default)]
    pub schedule: Option<ScheduleParams>,
    #[serde(default = "default_lambda")]
    pub lambda: f64,
    #[serde(default)]
    pub layer_map: Option<Vec<usize>>,
    #[serde(default)]
    pub optimizer: OptimizerConfig,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_accum")]
    pub grad_accum: usize,
    #[serde(default)]
    pub max_steps: Option<usize>,
    #[serde(default)]
    pub weighting: Weighting,
    /// Also run with every α fixed at 1 and log it beside the main run.
    #[serde(default)]
    pub ablation: bool,
    #[serde(default)]
    pub data: DataSource,
}

fn default_teacher() -> EncoderChoice {
    EncoderChoice::Preset("desk-teacher".into())
}
fn default_student() -> EncoderChoice {
    EncoderChoice::Preset("desk".into())
}
fn default_lambda() -> f64 {
    1.0
}
fn default_epochs() -> usize {
    10
}
fn default_batch() -> usize {
    32
}
fn default_accum() -> usize {
    1
}

impl Default for DistillFile {
    fn default() -> Self {
        toml::from_str("").expect("all fields default")
    }
}

impl DistillFile {
    pub fn distill_config(&self, seed: u64) -> Result<DistillConfig, CliError> {
        let student = self.student.resolve()?;
        let schedule = self.schedule.unwrap_or(ScheduleParams {
            delta_t: 2.0,
            t1: 0.0,
            num_focus_layers: student.num_layers.max(1),
        });
        let cfg = DistillConfig {
            teacher: self.teacher.resolve()?,
            student,
            schedule,
            lambda: self.lambda,
            layer_map: self.layer_map.clone(),
            optimizer: self.optimizer,
            epochs: self.epochs,
            batch_size: self.batch_size,
            grad_accum: self.grad_accum,
            max_steps: self.max_steps,
            weighting: self.weighting,
            seed,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Serialize)]
struct RunSummary {
    dtype: DType,
    seed: u64,
    steps: usize,
    initial_loss: f64,
    final_epoch_mean: f64,
    final_over_initial: f64,
    epochs: Vec<EpochLine>,
}

#[derive(Debug, Serialize)]
struct EpochLine {
    epoch: usize,
    mean_integrated: f64,
    alphas: Vec<f64>,
}

fn summarize(history: &LossHistory, dtype: DType, seed: u64) -> RunSummary {
    let initial = history.initial_loss().unwrap_or(f64::NAN);
    let last = history.final_epoch_mean().unwrap_or(f64::NAN);
    RunSummary {
        dtype,
        seed,
        steps: history.rows.len(),
        initial_loss: initial,
        final_epoch_mean: last,
        final_over_initial: last / initial,
        epochs: history
            .epoch_summaries()
            .into_iter()
            .map(|e| EpochLine {
                epoch: e.epoch,
                mean_integrated: e.mean_integrated,
                alphas: e.alphas,
            })
            .collect(),
    }
}

fn load_or_init<T: Scalar>(checkpoint: &Option<PathBuf>, cfg: &EncoderConfig, seed: u64) -> Result<ParamSet<T>, CliError> {
    match checkpoint {
        Some(dir) => Ok(ParamSet::load(dir)?),
        None => Ok(cfg.init_params(&mut ChaCha8Rng::seed_from_u64(seed))?),
    }
}

fn distill_typed<T: Scalar>(run: &RunConfig, file: &DistillFile) -> Result<String, CliError> {
    let cfg = file.distill_config(run.seed)?;
    // independent streams: teacher, student, data
    let teacher: ParamSet<T> = load_or_init(&file.teacher_checkpoint, &cfg.teacher, run.seed)?;
    let student: ParamSet<T> = load_or_init(&file.student_checkpoint, &cfg.student, run.seed.wrapping_add(1))?;
    let images: Vec<Tensor<T>> = match &file.data.dir {
        Some(dir) => datagen::load_images(dir)?,
        None => datagen::generate::<T>(file.data.count, file.data.image_size, run.seed.wrapping_add(2))
            .into_iter()
            .map(|(img, _)| img)
            .collect(),
    };
    ensure_dir(&run.out)?;
    let pool = worker_pool(run.workers())?;
    let outcome = pool.install(|| run_distillation(&teacher, student.clone(), &images, &cfg))?;

    if file.teacher_checkpoint.is_none() {
        teacher.save(run.out.join("teacher"))?;
    }
    outcome.student.save(run.out.join("student"))?;
    if !outcome.adapters.is_empty() {
        outcome.adapters.save(run.out.join("adapters"))?;
    }
    outcome.history.save_csv(run.out.join("loss_history.csv"))?;
    let summary = summarize(&outcome.history, T::DTYPE, run.seed);
    let mut text = format!(
        "steps {}  initial {:.6}  final epoch mean {:.6}  ratio {:.4}\n",
        summary.steps, summary.initial_loss, summary.final_epoch_mean, summary.final_over_initial
    );
    write_json(&run.out.join("summary.json"), &summary)?;

    if file.ablation {
        let mut uniform = cfg.clone();
        uniform.weighting = Weighting::Uniform;
        let ablated = pool.install(|| run_distillation(&teacher, student, &images, &uniform))?;
        ablated.history.save_csv(run.out.join("loss_history_uniform.csv"))?;
        let s = summarize(&ablated.history, T::DTYPE, run.seed);
        text.push_str(&format!(
            "uniform ablation: initial {:.6}  final epoch mean {:.6}  ratio {:.4}\n",
            s.initial_loss, s.final_epoch_mean, s.final_over_initial
        ));
        write_json(&run.out.join("summary_uniform.json"), &s)?;
    }
    Ok(text)
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<(), CliError> {
    let json = serde_json::to_string_pretty(value).expect("summary serializes");
    fs::write(path, json).map_err(|e| CliError::io(path, e))
}

pub fn cmd_distill(run: &RunConfig) -> Result<String, CliError> {
    let file: DistillFile = match run.read_config()? {
        Some(text) => toml::from_str(&text).map_err(|e| CliError::Config(e.to_string()))?,
        None => DistillFile::default(),
    };
    match run.dtype.unwrap_or(DType::F32) {
        DType::F32 => distill_typed::<f32>(run, &file),
        DType::F64 => distill_typed::<f64>(run, &file),
    }
}

/// The sweep used when no config is given: N = 2048, d = 64, one head,
/// spanning analytic ratios 1 through 128.
pub fn default_sweep() -> SweepConfig {
    let case = |id: &str, w: usize, r: usize| BenchCase {
        id: id.into(),
        seq_len: 2048,
        segment_len: w,
        interval: r,
        heads: 1,
        head_dim: 64,
        kernel: "naive".into(),
        tile_size: None,
    };
    SweepConfig {
        workers: 1,
        repeats: 5,
        batch_sizes: vec![1],
        seed: 0,
        dtype: DType::F32,
        configs: vec![
            case("w2048_r1", 2048, 1),
            case("w512_r1", 512, 1),
            case("w512_r2", 512, 2),
            case("w256_r2", 256, 2),
            case("w256_r4", 256, 4),
        ],
    }
}

pub fn cmd_bench(run: &RunConfig) -> Result<String, CliError> {
    let mut cfg = match run.read_config()? {
        Some(text) => SweepConfig::from_toml(&text)?,
        None => default_sweep(),
    };
    if let Some(w) = run.workers {
        cfg.workers = w;
    }
    if let Some(d) = run.dtype {
        cfg.dtype = d;
    }
    cfg.seed = run.seed;
    let report = sweep(&cfg)?;
    ensure_dir(&run.out)?;
    let path = run.out.join("bench.csv");
    let meta = EnvMeta::capture(cfg.workers, cfg.dtype, cfg.repeats, cfg.seed);
    write_report(&report, &meta, &path)?;
    let mut buf = Vec::new();
    report.write_csv(&mut buf)?;
    Ok(String::from_utf8(buf).expect("csv is utf-8"))
}

pub fn cmd_losses(pred: &Path, target: &Path) -> Result<String, CliError> {
    let p: Tensor<f64> = read_tensor(pred)?.into_tensor();
    let t: Tensor<f64> = read_tensor(target)?.into_tensor();
    let r = loss_report(&MaskPair::new(p, t)?)?;
    Ok(format!("iou,dice,focal,fine_tune\n{},{},{},{}\n", r.iou, r.dice, r.focal, r.fine_tune))
}
