//! Layer-wise feature distillation from a frozen dense teacher into a
//! dilated student.
//!
//! The objective is `L = L_P + λ·L_output`. `L_P` sums, over the focus
//! layers, `α_i(t)` times the batch-mean squared norm between mapped
//! teacher and student block outputs; `L_output` is the element-mean
//! squared error between final encoder outputs. Teacher features are
//! computed once and cached.

mod history;
mod optim;
mod schedule;

pub use history::{EpochSummary, HistoryRow, LossHistory};
pub use optim::{Optimizer, OptimizerConfig};
pub use schedule::{layer_weight, ScheduleParams};

use indexmap::IndexMap;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::encoder::{encoder_forward, forward_on_tape, patchify, BoundParams, EncoderConfig, ParamSet};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const ADAPTER_PREFIX: &str = "adapter.";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Weighting {
    /// `α_i(t)` from the schedule.
    #[default]
    Dynamic,
    /// Every focus layer weighted 1 throughout (ablation).
    Uniform,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistillConfig {
    pub teacher: EncoderConfig,
    pub student: EncoderConfig,
    pub schedule: ScheduleParams,
    #[serde(default = "default_lambda")]
    pub lambda: f64,
    /// Teacher layer (1-based) for each student layer; uniform stride if absent.
    #[serde(default)]
    pub layer_map: Option<Vec<usize>>,
    #[serde(default)]
    pub optimizer: OptimizerConfig,
    pub epochs: usize,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    /// Micro-batches averaged into one optimizer step.
    #[serde(default = "default_accum")]
    pub grad_accum: usize,
    #[serde(default)]
    pub max_steps: Option<usize>,
    #[serde(default)]
    pub weighting: Weighting,
    #[serde(default)]
    pub seed: u64,
}

fn default_lambda() -> f64 {
    1.0
}
fn default_batch() -> usize {
    32
}
fn default_accum() -> usize {
    1
}

/// Student layer `i` maps to teacher layer `⌈i·L_T/L_S⌉`, both 1-based.
pub fn uniform_layer_map(student_layers: usize, teacher_layers: usize) -> Vec<usize> {
    (1..=student_layers)
        .map(|i| (i * teacher_layers).div_ceil(student_layers))
        .collect()
}

impl DistillConfig {
    /// Adam(1e-3), λ = 1, Δt = 2, every student layer a focus layer.
    pub fn new(teacher: EncoderConfig, student: EncoderConfig, epochs: usize) -> Self {
        let k = student.num_layers.max(1);
        DistillConfig {
            teacher,
            student,
            schedule: ScheduleParams {
                delta_t: 2.0,
                t1: 0.0,
                num_focus_layers: k,
            },
            lambda: default_lambda(),
            layer_map: None,
            optimizer: OptimizerConfig::default(),
            epochs,
            batch_size: default_batch(),
            grad_accum: default_accum(),
            max_steps: None,
            weighting: Weighting::Dynamic,
            seed: 0,
        }
    }

    pub fn layer_map(&self) -> Vec<usize> {
        self.layer_map
            .clone()
            .unwrap_or_else(|| uniform_layer_map(self.student.num_layers, self.teacher.num_layers))
    }

    /// 1-based student layers receiving feature loss: the deepest `K`.
    /// Schedule index 1 is the shallowest of them.
    pub fn focus_layers(&self) -> Vec<usize> {
        let l = self.student.num_layers;
        let k = self.schedule.num_focus_layers.min(l);
        (l - k + 1..=l).collect()
    }

    /// `(student layer, teacher layer)` for each focus slot, 1-based.
    pub fn focus_pairs(&self) -> Vec<(usize, usize)> {
        let map = self.layer_map();
        self.focus_layers().into_iter().map(|i| (i, map[i - 1])).collect()
    }

    pub fn alphas(&self, epoch: f64) -> Vec<f64> {
        match self.weighting {
            Weighting::Dynamic => self.schedule.weights(epoch),
            Weighting::Uniform => vec![1.0; self.schedule.num_focus_layers],
        }
    }

    pub fn needs_adapters(&self) -> bool {
        self.student.embed_dim != self.teacher.embed_dim
    }

    pub fn validate(&self) -> Result<()> {
        self.teacher.validate()?;
        self.student.validate()?;
        self.schedule.validate()?;
        self.optimizer.validate()?;
        let (s, t) = (&self.student, &self.teacher);
        if (s.image_size, s.patch_size, s.in_channels) != (t.image_size, t.patch_size, t.in_channels) {
            return Err(Error::Config("teacher and student must share image, patch, and channel sizes".into()));
        }
        if self.schedule.num_focus_layers > s.num_layers {
            return Err(Error::Config(format!(
                "{} focus layers exceed student depth {}",
                self.schedule.num_focus_layers, s.num_layers
            )));
        }
        let map = self.layer_map();
        if map.len() != s.num_layers {
            return Err(Error::Config(format!(
                "layer map has {} entries for {} student layers",
                map.len(),
                s.num_layers
            )));
        }
        if map.iter().any(|&m| m < 1 || m > t.num_layers) || map.windows(2).any(|p| p[0] >= p[1]) {
            return Err(Error::Config(format!(
                "layer map {map:?} must be strictly increasing within 1..={}",
                t.num_layers
            )));
        }
        if !(self.lambda.is_finite() && self.lambda >= 0.0) {
            return Err(Error::Config(format!("lambda must be non-negative, got {}", self.lambda)));
        }
        if self.epochs == 0 || self.batch_size == 0 || self.grad_accum == 0 {
            return Err(Error::Config("epochs, batch_size, and grad_accum must be positive".into()));
        }
        Ok(())
    }

    /// Identity-initialized `D_S × D_T` maps, one per focus slot plus one for
    /// the output, present only when the widths differ.
    pub fn init_adapters<T: Scalar>(&self) -> ParamSet<T> {
        let mut p = ParamSet::new();
        if self.needs_adapters() {
            let (ds, dt) = (self.student.embed_dim, self.teacher.embed_dim);
            for k in 0..self.schedule.num_focus_layers {
                p.insert(format!("{ADAPTER_PREFIX}{k}.weight"), Tensor::rect_eye(ds, dt));
            }
            p.insert(format!("{ADAPTER_PREFIX}output.weight"), Tensor::rect_eye(ds, dt));
        }
        p
    }
}

/// `Σ_k α_k · (1/B) Σ_j ‖f_T(x_j) − f_S(x_j)‖²` over per-sample features.
/// `student[j].layers` and `teacher[j].layers` are indexed by 1-based
/// layer numbers through `layer_map`; focus slots are the deepest
/// `schedule.num_focus_layers` student layers.
pub fn focus_loss<T: Scalar>(
    student: &[crate::encoder::LayerFeatures<T>],
    teacher: &[crate::encoder::LayerFeatures<T>],
    layer_map: &[usize],
    t: f64,
    schedule: &ScheduleParams,
) -> Result<f64> {
    if student.len() != teacher.len() || student.is_empty() {
        return Err(Error::dim("focus_loss batch", &[student.len()], &[teacher.len()]));
    }
    let depth = student[0].layers.len();
    if layer_map.len() != depth || schedule.num_focus_layers > depth {
        return Err(Error::dim("focus_loss layers", &[layer_map.len()], &[depth]));
    }
    let first = depth - schedule.num_focus_layers;
    let mut total = 0.0;
    for (k, i) in (first..depth).enumerate() {
        let alpha = layer_weight(k + 1, t, schedule)?;
        let mut sq = 0.0;
        for (s, te) in student.iter().zip(teacher) {
            let fs = s.layers.get(i).ok_or(Error::Index { what: "student layer", index: i, limit: s.layers.len() })?;
            let ti = layer_map[i] - 1;
            let ft = te.layers.get(ti).ok_or(Error::Index { what: "teacher layer", index: ti, limit: te.layers.len() })?;
            let diff = ft.sub(fs)?;
            sq += diff.data().iter().map(|x| x.as_f64() * x.as_f64()).sum::<f64>();
        }
        total += alpha * sq / student.len() as f64;
    }
    Ok(total)
}

/// `L_P + λ·L_output`.
pub fn integrated_loss(focus: f64, output: f64, lambda: f64) -> Result<f64> {
    if !(focus.is_finite() && output.is_finite()) || !(lambda >= 0.0) {
        return Err(Error::Contract(format!(
            "integrated loss needs finite inputs and λ ≥ 0 (got {focus}, {output}, {lambda})"
        )));
    }
    Ok(focus + lambda * output)
}

/// Tape form of [`focus_loss`] over batch-stacked features.
pub fn focus_loss_on_tape<T: Scalar>(
    tape: &mut Tape<T>,
    student: &[Var],
    teacher: &[Var],
    alphas: &[f64],
    batch: usize,
) -> Result<Var> {
    if student.len() != teacher.len() || student.len() != alphas.len() || student.is_empty() {
        return Err(Error::dim("focus_loss_on_tape", &[student.len(), alphas.len()], &[teacher.len()]));
    }
    let mut total: Option<Var> = None;
    for ((&s, &t), &a) in student.iter().zip(teacher).zip(alphas) {
        let diff = tape.sub(t, s)?;
        let sq = tape.mul(diff, diff)?;
        let sum = tape.sum(sq);
        let term = tape.scale(sum, T::from_f64_lossy(a / batch as f64));
        total = Some(match total {
            None => term,
            Some(acc) => tape.add(acc, term)?,
        });
    }
    Ok(total.expect("non-empty"))
}

/// Vars for the three loss components of one recorded step.
#[derive(Debug, Clone, Copy)]
pub struct StepVars {
    pub focus: Var,
    pub output: Var,
    pub integrated: Var,
}

/// Records the student forward pass and the full objective against cached
/// teacher targets (batch-stacked, one per focus slot plus the output).
#[allow(clippy::too_many_arguments)]
pub fn distill_loss_on_tape<T: Scalar>(
    tape: &mut Tape<T>,
    cfg: &DistillConfig,
    params: &BoundParams,
    patches: Var,
    teacher_feats: &[Var],
    teacher_out: Var,
    alphas: &[f64],
    batch: usize,
) -> Result<StepVars> {
    let trace = forward_on_tape(tape, &cfg.student, params, patches, batch)?;
    let adapt = |tape: &mut Tape<T>, x: Var, name: String| -> Result<Var> {
        if cfg.needs_adapters() {
            let w = params.var(&format!("{ADAPTER_PREFIX}{name}.weight"))?;
            tape.matmul(x, w)
        } else {
            Ok(x)
        }
    };
    let mut student_feats = Vec::with_capacity(alphas.len());
    for (k, layer) in cfg.focus_layers().into_iter().enumerate() {
        let f = adapt(tape, trace.features[layer - 1], k.to_string())?;
        student_feats.push(f);
    }
    let focus = focus_loss_on_tape(tape, &student_feats, teacher_feats, alphas, batch)?;
    let out = adapt(tape, trace.output, "output".into())?;
    let output = tape.mse(out, teacher_out)?;
    let weighted = tape.scale(output, T::from_f64_lossy(cfg.lambda));
    let integrated = tape.add(focus, weighted)?;
    Ok(StepVars {
        focus,
        output,
        integrated,
    })
}

/// Frozen teacher targets for every dataset item.
#[derive(Debug, Clone)]
pub struct TeacherCache<T> {
    /// `features[j][k]`: image `j`, focus slot `k`.
    pub features: Vec<Vec<Tensor<T>>>,
    pub outputs: Vec<Tensor<T>>,
}

impl<T: Scalar> TeacherCache<T> {
    pub fn build(teacher: &ParamSet<T>, cfg: &DistillConfig, images: &[Tensor<T>]) -> Result<Self> {
        let layers: Vec<usize> = cfg.focus_pairs().into_iter().map(|(_, t)| t).collect();
        let per_image = images
            .par_iter()
            .map(|im| {
                let (out, feats) = encoder_forward(im, teacher, &cfg.teacher)?;
                let picked = layers.iter().map(|&l| feats.layers[l - 1].clone()).collect();
                Ok((picked, out))
            })
            .collect::<Result<Vec<_>>>()?;
        let (features, outputs) = per_image.into_iter().unzip();
        Ok(TeacherCache { features, outputs })
    }

    fn stacked(&self, idx: &[usize]) -> Result<(Vec<Tensor<T>>, Tensor<T>)> {
        let slots = self.features.first().map_or(0, Vec::len);
        let feats = (0..slots)
            .map(|k| Tensor::concat_rows(&idx.iter().map(|&j| &self.features[j][k]).collect::<Vec<_>>()))
            .collect::<Result<Vec<_>>>()?;
        let out = Tensor::concat_rows(&idx.iter().map(|&j| &self.outputs[j]).collect::<Vec<_>>())?;
        Ok((feats, out))
    }
}

#[derive(Debug, Clone)]
pub struct DistillOutcome<T> {
    pub student: ParamSet<T>,
    pub adapters: ParamSet<T>,
    pub history: LossHistory,
}

struct StepResult<T> {
    focus: f64,
    output: f64,
    integrated: f64,
    grads: IndexMap<String, Tensor<T>>,
}

fn micro_step<T: Scalar>(
    cfg: &DistillConfig,
    trainable: &ParamSet<T>,
    patches: &[Tensor<T>],
    cache: &TeacherCache<T>,
    idx: &[usize],
    alphas: &[f64],
) -> Result<StepResult<T>> {
    let mut tape = Tape::new();
    let bound = trainable.bind(&mut tape);
    let x = Tensor::concat_rows(&idx.iter().map(|&j| &patches[j]).collect::<Vec<_>>())?;
    let x = tape.leaf(x);
    let (feats, out) = cache.stacked(idx)?;
    let feats: Vec<Var> = feats.into_iter().map(|f| tape.leaf(f)).collect();
    let out = tape.leaf(out);
    let vars = distill_loss_on_tape(&mut tape, cfg, &bound, x, &feats, out, alphas, idx.len())?;
    let grads = tape.backward(vars.integrated)?;
    Ok(StepResult {
        focus: tape.value(vars.focus).item()?.as_f64(),
        output: tape.value(vars.output).item()?.as_f64(),
        integrated: tape.value(vars.integrated).item()?.as_f64(),
        grads: bound.iter().map(|(n, v)| (n.to_string(), grads.get(v))).collect(),
    })
}

/// Trains the student against the cached teacher. The schedule time is the
/// epoch index; each optimizer step averages `grad_accum` micro-batches.
pub fn run_distillation<T: Scalar>(
    teacher: &ParamSet<T>,
    student_init: ParamSet<T>,
    dataset: &[Tensor<T>],
    cfg: &DistillConfig,
) -> Result<DistillOutcome<T>> {
    cfg.validate()?;
    cfg.teacher.check_params(teacher)?;
    cfg.student.check_params(&student_init)?;
    if dataset.is_empty() {
        return Err(Error::Config("empty dataset".into()));
    }
    let cache = TeacherCache::build(teacher, cfg, dataset)?;
    let patches = dataset
        .iter()
        .map(|im| patchify(im, &cfg.student))
        .collect::<Result<Vec<_>>>()?;

    let mut trainable = student_init;
    let adapters = cfg.init_adapters::<T>();
    for (name, t) in adapters.iter() {
        trainable.insert(name, t.clone());
    }
    let mut opt = Optimizer::new(cfg.optimizer)?;
    let mut history = LossHistory::new(cfg.schedule.num_focus_layers);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let mut step = 0usize;

    'epochs: for epoch in 0..cfg.epochs {
        let alphas = cfg.alphas(epoch as f64);
        order.shuffle(&mut rng);
        let micro: Vec<&[usize]> = order.chunks(cfg.batch_size).collect();
        for group in micro.chunks(cfg.grad_accum) {
            if cfg.max_steps.is_some_and(|m| step >= m) {
                break 'epochs;
            }
            let total: usize = group.iter().map(|g| g.len()).sum();
            let mut acc: Option<StepResult<T>> = None;
            for idx in group {
                let r = micro_step(cfg, &trainable, &patches, &cache, idx, &alphas)?;
                let w = idx.len() as f64 / total as f64;
                let wt = T::from_f64_lossy(w);
                acc = Some(match acc {
                    None => StepResult {
                        focus: w * r.focus,
                        output: w * r.output,
                        integrated: w * r.integrated,
                        grads: r.grads.into_iter().map(|(n, g)| (n, g.scale(wt))).collect(),
                    },
                    Some(mut a) => {
                        a.focus += w * r.focus;
                        a.output += w * r.output;
                        a.integrated += w * r.integrated;
                        for (n, g) in r.grads {
                            let slot = a.grads.get_mut(&n).expect("same parameter names");
                            *slot = slot.add(&g.scale(wt))?;
                        }
                        a
                    }
                });
            }
            let acc = acc.expect("non-empty group");
            if !acc.integrated.is_finite() || acc.grads.values().any(|g| !g.all_finite()) {
                return Err(Error::Training {
                    step,
                    reason: format!("non-finite loss {}", acc.integrated),
                });
            }
            history.rows.push(HistoryRow {
                epoch,
                step,
                focus: acc.focus,
                output: acc.output,
                integrated: acc.integrated,
                alphas: alphas.clone(),
            });
            opt.step(&mut trainable, &acc.grads)?;
            step += 1;
        }
    }

    let mut student = ParamSet::new();
    let mut adapters = ParamSet::new();
    for (name, t) in trainable.iter() {
        if name.starts_with(ADAPTER_PREFIX) {
            adapters.insert(name, t.clone());
        } else {
            student.insert(name, t.clone());
        }
    }
    Ok(DistillOutcome {
        student,
        adapters,
        history,
    })
}
