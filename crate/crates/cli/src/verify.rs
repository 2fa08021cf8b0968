//! Self-check suites behind `dilattn verify`.

use std::fmt::Write as _;

use clap::ValueEnum;
use dilattn_core::attention::{
    dilated_attention, dilated_attention_with, flop_count, naive_attention, tiled_attention, worker_pool, Exec,
};
use dilattn_core::distill::{distill_loss_on_tape, layer_weight, DistillConfig, ScheduleParams};
use dilattn_core::encoder::{patchify_batch, AttentionMode, BoundParams, EncoderConfig, ParamSet};
use dilattn_core::segloss::{
    combine_fine_tune, dice_loss, fine_tune_on_tape, focal_loss, iou_loss, FocalParams, MaskPair,
};
use dilattn_core::{AttentionConfig, Kernel, Result, Tape, Tensor, Var};
use num_rational::Rational64;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::oracle::{dilated_mask, gradient_error, layer_weight_exact, masked_attention, rational_to_f64};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, ValueEnum)]
pub enum Suite {
    Attention,
    Gradients,
    Schedule,
    Losses,
}

impl Suite {
    pub const ALL: [Suite; 4] = [Suite::Attention, Suite::Gradients, Suite::Schedule, Suite::Losses];

    pub fn name(self) -> &'static str {
        match self {
            Suite::Attention => "attention",
            Suite::Gradients => "gradients",
            Suite::Schedule => "schedule",
            Suite::Losses => "losses",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SuiteReport {
    pub suite: Suite,
    pub checks: Vec<Check>,
}

impl SuiteReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }
}

struct Recorder {
    checks: Vec<Check>,
}

impl Recorder {
    fn new() -> Self {
        Recorder { checks: Vec::new() }
    }

    /// Records `value <= bound`; an error counts as a failure.
    fn within(&mut self, name: impl Into<String>, value: Result<f64>, bound: f64) {
        let (passed, detail) = match value {
            Ok(v) => (v <= bound, format!("{v:.3e} <= {bound:.0e}")),
            Err(e) => (false, e.to_string()),
        };
        self.checks.push(Check { name: name.into(), passed, detail });
    }

    fn holds(&mut self, name: impl Into<String>, value: Result<bool>, detail: impl Into<String>) {
        let (passed, detail) = match value {
            Ok(v) => (v, detail.into()),
            Err(e) => (false, e.to_string()),
        };
        self.checks.push(Check { name: name.into(), passed, detail });
    }
}

pub fn run(suites: &[Suite]) -> Vec<SuiteReport> {
    suites.iter().map(|&s| run_suite(s)).collect()
}

pub fn run_suite(suite: Suite) -> SuiteReport {
    let mut rec = Recorder::new();
    match suite {
        Suite::Attention => attention_suite(&mut rec),
        Suite::Gradients => gradient_suite(&mut rec),
        Suite::Schedule => schedule_suite(&mut rec),
        Suite::Losses => loss_suite(&mut rec),
    }
    SuiteReport { suite, checks: rec.checks }
}

pub fn render(reports: &[SuiteReport]) -> String {
    let mut out = String::new();
    let width = reports
        .iter()
        .flat_map(|r| r.checks.iter().map(|c| c.name.len()))
        .max()
        .unwrap_or(0)
        .max(5);
    for r in reports {
        for c in &r.checks {
            let status = if c.passed { "PASS" } else { "FAIL" };
            let _ = writeln!(out, "{:<10} {:<width$}  {status}  {}", r.suite.name(), c.name, c.detail);
        }
    }
    for r in reports {
        let failed = r.checks.iter().filter(|c| !c.passed).count();
        let status = if failed == 0 { "PASS" } else { "FAIL" };
        let _ = writeln!(out, "suite {:<10} {status} ({} checks, {failed} failed)", r.suite.name(), r.checks.len());
    }
    out
}

fn qkv(n: usize, d: usize, seed: u64) -> (Tensor<f64>, Tensor<f64>, Tensor<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (
        Tensor::randn(&[n, d], 1.0, &mut rng),
        Tensor::randn(&[n, d], 1.0, &mut rng),
        Tensor::randn(&[n, d], 1.0, &mut rng),
    )
}

fn attention_suite(rec: &mut Recorder) {
    for (n, w, r) in [(8, 2, 1), (8, 4, 2), (16, 4, 4), (16, 8, 2), (32, 8, 4), (32, 32, 1)] {
        let err = (|| {
            let cfg = AttentionConfig::new(n, w, r, 1, 4)?;
            let (q, k, v) = qkv(n, 4, (n * w * r) as u64);
            let mut worst = 0.0f64;
            for offset in 0..r {
                let got = dilated_attention(&q, &k, &v, &cfg, offset)?;
                let want = masked_attention(&q, &k, &v, &dilated_mask(n, w, r, offset), cfg.score_scale());
                worst = worst.max(got.max_abs_diff(&want)?);
            }
            Ok(worst)
        })();
        rec.within(format!("masked oracle N={n} w={w} r={r}"), err, 1e-10);
    }

    let tiled = (|| {
        let mut worst = 0.0f64;
        for seed in 0..10u64 {
            let n = 5 + 9 * seed as usize;
            let (q, k, v) = qkv(n, 4, seed);
            let reference = naive_attention(&q, &k, &v)?;
            for tile in [1, 2, 8, n] {
                worst = worst.max(tiled_attention(&q, &k, &v, tile)?.max_abs_diff(&reference)?);
            }
        }
        Ok(worst)
    })();
    rec.within("tiled vs naive", tiled, 1e-12);

    let collapse = (|| {
        let cfg = AttentionConfig::new(24, 24, 1, 1, 8)?;
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let q = Tensor::<f32>::randn(&[24, 8], 1.0, &mut rng);
        let k = Tensor::<f32>::randn(&[24, 8], 1.0, &mut rng);
        let v = Tensor::<f32>::randn(&[24, 8], 1.0, &mut rng);
        Ok(dilated_attention(&q, &k, &v, &cfg, 0)?.max_abs_diff(&naive_attention(&q, &k, &v)?)? as f64)
    })();
    rec.within("collapse w=N r=1", collapse, 1e-6);

    let deterministic = (|| {
        let pool = worker_pool(4)?;
        let cfg = AttentionConfig::new(64, 8, 2, 1, 4)?;
        let (q, k, v) = qkv(64, 4, 11);
        let serial = dilated_attention_with(&q, &k, &v, &cfg, 1, Exec::Serial)?;
        let parallel = dilated_attention_with(&q, &k, &v, &cfg, 1, Exec::Pool(&pool))?;
        Ok(serial == parallel)
    })();
    rec.holds("1 vs 4 workers bitwise", deterministic, "identical");

    let flops = (|| {
        for (n, w, r) in [(4096, 512, 2), (4096, 2048, 2), (1024, 256, 4), (256, 256, 1), (512, 64, 2)] {
            let c = flop_count(&AttentionConfig::new(n, w, r, 1, 64)?)?;
            if c.ratio != (n * r * r) as f64 / w as f64 {
                return Ok(false);
            }
        }
        Ok(true)
    })();
    rec.holds("flop ratio N r^2 / w", flops, "5 configs exact");
}

/// `Σ out ⊙ R` for a fixed random `R`, so every output element matters.
fn weighted_sum(tape: &mut Tape<f64>, out: Var, seed: u64) -> Result<Var> {
    let r = Tensor::randn(tape.value(out).shape(), 1.0, &mut ChaCha8Rng::seed_from_u64(seed));
    let r = tape.leaf(r);
    let p = tape.mul(out, r)?;
    Ok(tape.sum(p))
}

type OpBuild = fn(&mut Tape<f64>, &[Var]) -> Result<Var>;

fn gradient_suite(rec: &mut Recorder) {
    let ops: [(&str, Vec<Vec<usize>>, OpBuild); 9] = [
        ("matmul", vec![vec![3, 4], vec![4, 2]], |t, v| t.matmul(v[0], v[1])),
        ("add_rows", vec![vec![3, 4], vec![4]], |t, v| t.add_rows(v[0], v[1])),
        ("gelu", vec![vec![3, 4]], |t, v| Ok(t.gelu(v[0]))),
        ("layer_norm", vec![vec![3, 5], vec![5], vec![5]], |t, v| t.layer_norm(v[0], v[1], v[2], 1e-6)),
        ("softmax_rows", vec![vec![3, 4]], |t, v| t.softmax_rows(v[0])),
        ("attention naive", vec![vec![5, 3], vec![5, 3], vec![5, 3]], |t, v| {
            t.attention(v[0], v[1], v[2], 0.5, Kernel::Naive)
        }),
        ("attention tiled", vec![vec![6, 3], vec![6, 3], vec![6, 3]], |t, v| {
            t.attention(v[0], v[1], v[2], 0.5, Kernel::Tiled { tile_size: 2 })
        }),
        ("slice/scatter rows", vec![vec![6, 2], vec![6, 2]], |t, v| {
            let s = t.slice_rows_strided(v[0], 1, 2, 3)?;
            t.scatter_rows(v[1], s, &[5, 0, 2])
        }),
        ("slice/concat cols", vec![vec![3, 4], vec![3, 2]], |t, v| {
            let s = t.slice_cols(v[0], 1, 2)?;
            let c = t.concat_cols(&[s, v[1]])?;
            t.mse(c, v[0])
        }),
    ];
    for (name, shapes, build) in ops {
        let err = (|| {
            let mut worst = 0.0f64;
            for seed in 0..3u64 {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let inputs: Vec<Tensor<f64>> = shapes.iter().map(|s| Tensor::randn(s, 1.0, &mut rng)).collect();
                let wrt: Vec<usize> = (0..inputs.len()).collect();
                let e = gradient_error(&inputs, &wrt, &|t, v| {
                    let out = build(t, v)?;
                    weighted_sum(t, out, seed + 100)
                })?;
                worst = worst.max(e);
            }
            Ok(worst)
        })();
        rec.within(format!("grad {name}"), err, 1e-4);
    }

    let masks = (|| {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let p = Tensor::uniform(&[2, 3], 0.05, 0.95, &mut rng);
        let t = Tensor::new(vec![2, 3], vec![1.0, 0.0, 1.0, 0.0, 0.0, 1.0])?;
        gradient_error(&[p, t], &[0], &|tape, v| fine_tune_on_tape(tape, v[0], v[1]))
    })();
    rec.within("grad fine-tune loss", masks, 1e-4);
    rec.within("grad integrated loss", integrated_loss_gradient(), 1e-4);
}

fn integrated_loss_gradient() -> Result<f64> {
    let enc = |dim, attention| EncoderConfig {
        image_size: 4,
        patch_size: 2,
        in_channels: 1,
        embed_dim: dim,
        num_layers: 1,
        num_heads: 2,
        mlp_ratio: 1.0,
        attention,
        kernel: Kernel::Naive,
    };
    let student = enc(4, AttentionMode::Dilated { segment_len: 4, interval: 2 });
    let cfg = DistillConfig::new(enc(6, AttentionMode::Dense), student.clone(), 1);
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut params = ParamSet::new();
    for (name, t) in student.init_params::<f64, _>(&mut rng)?.iter() {
        params.insert(name, t.map(|x| x * 10.0));
    }
    for (name, t) in cfg.init_adapters::<f64>().iter() {
        params.insert(name, t.add(&Tensor::randn(t.shape(), 0.1, &mut rng))?);
    }
    let names: Vec<String> = params.names().map(str::to_string).collect();
    let mut inputs: Vec<Tensor<f64>> = names.iter().map(|n| params.get(n).cloned()).collect::<Result<_>>()?;
    let n_params = inputs.len();
    let image = Tensor::uniform(&[4, 4, 1], 0.0, 1.0, &mut rng);
    inputs.push(patchify_batch(&[&image], &student)?);
    inputs.push(Tensor::randn(&[4, 6], 1.0, &mut rng));
    inputs.push(Tensor::randn(&[4, 6], 1.0, &mut rng));
    let wrt: Vec<usize> = (0..n_params).collect();
    gradient_error(&inputs, &wrt, &|tape, v| {
        let bound = BoundParams::from_pairs(names.iter().cloned().zip(v[..n_params].iter().copied()));
        let s = distill_loss_on_tape(tape, &cfg, &bound, v[n_params], &v[n_params + 1..n_params + 2], v[n_params + 2], &[1.0], 1)?;
        Ok(s.integrated)
    })
}

fn schedule_suite(rec: &mut Recorder) {
    for (t1, dt) in [(0i64, 2i64), (0, 10), (5, 10)] {
        let ok = (|| {
            let s = ScheduleParams::new(dt as f64, t1 as f64, 6)?;
            for i in 1..=6i64 {
                let start = t1 + (i - 1) * dt;
                let probes = [
                    Rational64::from_integer(0),
                    Rational64::from_integer(start),
                    Rational64::new(2 * start + dt, 2),
                    Rational64::from_integer(start + dt),
                    Rational64::from_integer(start + 2 * dt),
                ];
                for t in probes {
                    let got = layer_weight(i as usize, rational_to_f64(t), &s)?;
                    if got != rational_to_f64(layer_weight_exact(i, t, t1, dt)) {
                        return Ok(false);
                    }
                }
            }
            Ok(true)
        })();
        rec.holds(format!("ramp T1={t1} dt={dt}"), ok, "breakpoints and midpoints exact");
    }
    let examples = (|| {
        let s = ScheduleParams::new(10.0, 0.0, 3)?;
        Ok(layer_weight(1, 77.0, &s)? == 1.0
            && layer_weight(2, 15.0, &s)? == 0.5
            && layer_weight(3, 19.0, &s)? == 0.0
            && layer_weight(3, 25.0, &s)? == 0.5
            && layer_weight(3, 30.0, &s)? == 1.0
            && layer_weight(0, 1.0, &s).is_err())
    })();
    rec.holds("reference weights", examples, "alpha_1 = 1, midpoints 0.5");
}

fn loss_suite(rec: &mut Recorder) {
    let pair = |p: Vec<f64>, t: Vec<f64>| MaskPair::new(Tensor::new(vec![1, p.len()], p)?, Tensor::new(vec![1, t.len()], t)?);
    rec.within("iou half", pair(vec![0.5; 4], vec![1.0; 4]).and_then(|m| iou_loss(&m)).map(|v| (v - 0.5).abs()), 1e-5);
    rec.within(
        "dice half",
        pair(vec![0.5; 4], vec![1.0; 4]).and_then(|m| dice_loss(&m)).map(|v| (v - 1.0 / 3.0).abs()),
        1e-5,
    );
    rec.within(
        "focal single pixel",
        pair(vec![0.5], vec![1.0]).and_then(|m| focal_loss(&m, FocalParams::default())).map(|v| (v - 0.0433).abs()),
        5e-5,
    );
    rec.within("fine-tune composition", Ok((combine_fine_tune(0.1f64, 0.2, 0.05) - 2.25).abs()), 1e-12);
    let bce = (|| {
        let (p, t) = (vec![0.9, 0.2, 0.6], vec![1.0, 0.0, 0.0]);
        let want: f64 = p.iter().zip(&t).map(|(&p, &t): (&f64, &f64)| -(t * p.ln() + (1.0 - t) * (1.0 - p).ln())).sum::<f64>() / 3.0;
        let got = focal_loss(&pair(p, t)?, FocalParams { gamma: 0.0, alpha: 1.0 })?;
        Ok((got - want).abs())
    })();
    rec.within("focal gamma=0 is bce", bce, 1e-12);
}
