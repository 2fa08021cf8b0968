//! End-to-end acceptance run: one PASS/FAIL line per criterion, nonzero exit
//! if any fails.

#[path = "../../core/tests/support/mod.rs"]
mod support;

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::process::ExitCode;
use std::time::{Duration, Instant};

use dilattn_bench::{bench_attention, spearman, HarnessOptions};
use dilattn_cli::datagen;
use dilattn_cli::oracle::{layer_weight_exact, rational_to_f64};
use dilattn_core::attention::{
    dilated_attention, dilated_attention_with, flop_count, naive_attention, tiled_attention, worker_pool, Exec,
};
use dilattn_core::distill::{layer_weight, run_distillation, DistillConfig, ScheduleParams};
use dilattn_core::encoder::{EncoderConfig, ParamSet};
use dilattn_core::segloss::{combine_fine_tune, dice_loss, focal_loss, iou_loss, FocalParams};
use dilattn_core::{AttentionConfig, MaskPair, Scalar, Tensor};
use num_rational::Rational64;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use support::gradcheck::{integrated_loss_case, op_cases, relative_error, TOLERANCE};
use support::oracle::{dilated_mask, masked_attention};

type Outcome = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn within_budget(name: &str, elapsed: Duration, budget: Duration) -> Result<(), String> {
    ensure(elapsed < budget, || format!("{name} took {elapsed:.1?}, budget {budget:?}"))
}

fn qkv<T: Scalar>(n: usize, d: usize, seed: u64) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (
        Tensor::randn(&[n, d], 1.0, &mut rng),
        Tensor::randn(&[n, d], 1.0, &mut rng),
        Tensor::randn(&[n, d], 1.0, &mut rng),
    )
}

fn err(e: impl std::fmt::Display) -> String {
    e.to_string()
}

fn masked_oracle() -> Outcome {
    let start = Instant::now();
    let (mut configs, mut worst) = (0, 0.0f64);
    for n in [8, 16, 32] {
        for w in [2, 4, 8] {
            for r in [1, 2, 4] {
                if r > w || w > n || n % w != 0 || w % r != 0 {
                    continue;
                }
                let cfg = AttentionConfig::new(n, w, r, 1, 4).map_err(err)?;
                let (q, k, v) = qkv::<f64>(n, 4, (n * 100 + w * 10 + r) as u64);
                for offset in 0..r {
                    let got = dilated_attention(&q, &k, &v, &cfg, offset).map_err(err)?;
                    let want = masked_attention(&q, &k, &v, &dilated_mask(n, w, r, offset), cfg.score_scale());
                    worst = worst.max(got.max_abs_diff(&want).map_err(err)?);
                }
                configs += 1;
            }
        }
    }
    ensure(worst <= 1e-10, || format!("max abs error {worst:e} > 1e-10"))?;
    within_budget("oracle grid", start.elapsed(), Duration::from_secs(30))?;
    Ok(format!("{configs} configs, max abs error {worst:.1e}, {:.2?}", start.elapsed()))
}

fn tiled_equivalence() -> Outcome {
    let (mut worst64, mut worst32) = (0.0f64, 0.0f64);
    for seed in 0..100u64 {
        let n = 1 + (seed as usize * 37) % 128;
        let d = 1 + seed as usize % 8;
        let (q, k, v) = qkv::<f64>(n, d, seed);
        let (qf, kf, vf) = qkv::<f32>(n, d, seed);
        let reference = naive_attention(&q, &k, &v).map_err(err)?;
        let reference_f = naive_attention(&qf, &kf, &vf).map_err(err)?;
        for tile in [1, 2, 8, n] {
            worst64 = worst64.max(tiled_attention(&q, &k, &v, tile).map_err(err)?.max_abs_diff(&reference).map_err(err)?);
            let got = tiled_attention(&qf, &kf, &vf, tile).map_err(err)?;
            worst32 = worst32.max(got.max_abs_diff(&reference_f).map_err(err)? as f64);
        }
    }
    ensure(worst64 <= 1e-12 && worst32 <= 1e-5, || format!("f64 {worst64:e} (≤1e-12), f32 {worst32:e} (≤1e-5)"))?;
    Ok(format!("100 seeds, f64 {worst64:.1e}, f32 {worst32:.1e}"))
}

fn collapse() -> Outcome {
    let mut worst = 0.0f32;
    for seed in 0..20u64 {
        let n = 16 + seed as usize;
        let cfg = AttentionConfig::new(n, n, 1, 1, 8).map_err(err)?;
        let (q, k, v) = qkv::<f32>(n, 8, seed);
        let got = dilated_attention(&q, &k, &v, &cfg, 0).map_err(err)?;
        worst = worst.max(got.max_abs_diff(&naive_attention(&q, &k, &v).map_err(err)?).map_err(err)?);
    }
    ensure(worst <= 1e-6, || format!("max abs error {worst:e} > 1e-6"))?;
    Ok(format!("20 seeds, f32 max abs error {worst:.1e}"))
}

fn flop_law() -> Outcome {
    let configs = [(64, 8, 2), (128, 16, 4), (256, 32, 2), (512, 64, 8), (4096, 512, 2), (1024, 1024, 1)];
    let mut lines = Vec::new();
    for (n, w, r) in configs {
        let cfg = AttentionConfig::new(n, w, r, 1, 64).map_err(err)?;
        let f = flop_count(&cfg).map_err(err)?;
        let exact = Rational64::new((n * r * r) as i64, w as i64);
        let counted = Rational64::new(f.dense_mults as i64, f.dilated_mults as i64);
        ensure(counted == exact, || format!("N={n} w={w} r={r}: counted {counted}, expected {exact}"))?;
        lines.push(format!(
            "N={n} w={w} r={r}: {counted} vs quoted N/(w r^2) = {:.4} (factor r^4 = {})",
            f.quoted_factor(),
            r.pow(4)
        ));
    }
    for l in &lines {
        println!("    {l}");
    }
    Ok(format!("{} configs exact; quoted factor is smaller by r^4", configs.len()))
}

fn schedule_law() -> Outcome {
    let mut probes = 0;
    for (t1, dt) in [(0i64, 2i64), (0, 10), (5, 10)] {
        let s = ScheduleParams::new(dt as f64, t1 as f64, 6).map_err(err)?;
        for i in 1..=6i64 {
            let start = t1 + (i - 1) * dt;
            let mut times = vec![Rational64::from_integer(0), Rational64::from_integer(start + 3 * dt)];
            for b in [start, start + dt] {
                times.push(Rational64::from_integer(b));
            }
            times.push(Rational64::new(2 * start + dt, 2));
            times.push(Rational64::new(2 * start - dt, 2));
            for t in times.into_iter().filter(|t| *t >= Rational64::from_integer(0)) {
                let want = layer_weight_exact(i, t, t1, dt);
                let got = layer_weight(i as usize, rational_to_f64(t), &s).map_err(err)?;
                ensure(got == rational_to_f64(want), || format!("T1={t1} dt={dt} i={i} t={t}: {got} vs {want}"))?;
                if i == 1 {
                    ensure(got == 1.0, || format!("alpha_1({t}) = {got}"))?;
                }
                probes += 1;
            }
        }
    }
    Ok(format!("{probes} probes exact"))
}

fn gradient_integrity() -> Outcome {
    let start = Instant::now();
    let (mut worst, mut checks) = (0.0f64, 0);
    for seed in 0..20u64 {
        let mut cases = op_cases(seed);
        cases.push(integrated_loss_case(seed));
        for case in &cases {
            let e = relative_error(case, seed).map_err(err)?;
            ensure(e < TOLERANCE, || format!("{} seed {seed}: relative error {e:e}", case.name))?;
            worst = worst.max(e);
            checks += 1;
        }
    }
    within_budget("gradient checks", start.elapsed(), Duration::from_secs(120))?;
    Ok(format!("{checks} checks over 20 seeds, worst {worst:.1e}, {:.1?}", start.elapsed()))
}

fn distillation_demo() -> Outcome {
    let start = Instant::now();
    let teacher_cfg = EncoderConfig::desk_teacher();
    let student_cfg = EncoderConfig::desk();
    ensure(teacher_cfg.embed_dim == 64 && teacher_cfg.num_layers == 4, || "teacher preset shape".into())?;
    student_cfg.attention_config().map_err(|e| format!("student heads do not cover every offset: {e}"))?;

    let mut cfg = DistillConfig::new(teacher_cfg.clone(), student_cfg.clone(), 62);
    cfg.batch_size = 8;
    cfg.max_steps = Some(500);
    let teacher: ParamSet<f32> = teacher_cfg.init_params(&mut ChaCha8Rng::seed_from_u64(0)).map_err(err)?;
    let student: ParamSet<f32> = student_cfg.init_params(&mut ChaCha8Rng::seed_from_u64(1)).map_err(err)?;
    let images: Vec<Tensor<f32>> = datagen::generate::<f32>(64, 32, 2).into_iter().map(|(img, _)| img).collect();
    let bits = |p: &ParamSet<f32>| -> Vec<u32> { p.iter().flat_map(|(_, t)| t.data().iter().map(|x| x.to_bits()).collect::<Vec<_>>()).collect() };
    let before = bits(&teacher);

    let outcome = run_distillation(&teacher, student, &images, &cfg).map_err(err)?;
    let elapsed = start.elapsed();

    ensure(bits(&teacher) == before, || "teacher parameters changed".into())?;
    let steps = outcome.history.rows.len();
    ensure(steps <= 500, || format!("{steps} steps > 500"))?;
    let first = outcome.history.initial_loss().ok_or("empty history")?;
    let last = outcome.history.final_epoch_mean().ok_or("empty history")?;
    let ratio = last / first;
    ensure(ratio <= 0.10, || format!("final {last:.4} / initial {first:.4} = {ratio:.4} > 0.10"))?;

    let (t1, dt) = (cfg.schedule.t1 as i64, cfg.schedule.delta_t as i64);
    for e in outcome.history.epoch_summaries() {
        for (k, &a) in e.alphas.iter().enumerate() {
            let want = rational_to_f64(layer_weight_exact(k as i64 + 1, Rational64::from_integer(e.epoch as i64), t1, dt));
            ensure(a == want, || format!("epoch {} alpha_{}: {a} vs {want}", e.epoch, k + 1))?;
        }
    }
    within_budget("distillation", elapsed, Duration::from_secs(300))?;
    Ok(format!("{steps} steps, loss {first:.3} -> {last:.4} ({:.2}%), {elapsed:.1?}", ratio * 100.0))
}

fn determinism() -> Outcome {
    let pool = worker_pool(4).map_err(err)?;
    for seed in 0..10u64 {
        let cfg = AttentionConfig::new(64, 8, 2, 1, 4).map_err(err)?;
        let (q, k, v) = qkv::<f64>(64, 4, seed);
        for offset in 0..2 {
            let serial = dilated_attention_with(&q, &k, &v, &cfg, offset, Exec::Serial).map_err(err)?;
            let parallel = dilated_attention_with(&q, &k, &v, &cfg, offset, Exec::Pool(&pool)).map_err(err)?;
            let same = serial.data().iter().zip(parallel.data()).all(|(a, b)| a.to_bits() == b.to_bits());
            ensure(same, || format!("seed {seed} offset {offset}: outputs differ"))?;
        }
    }
    Ok("10 seeds bitwise identical with 1 and 4 workers".into())
}

fn relative_speed() -> Outcome {
    let opts = HarnessOptions {
        repeats: 3,
        workers: 1,
        seed: 0,
    };
    let main = AttentionConfig::new(4096, 512, 2, 1, 64).map_err(err)?;
    let row = bench_attention::<f32>("headline", &main, &[1], &opts).map_err(err)?.rows.remove(0);
    ensure(row.measured_speedup >= 2.0, || format!("speedup {:.2} < 2", row.measured_speedup))?;

    let sweep = [(2048, 1), (512, 1), (256, 1), (512, 2), (256, 4), (128, 4)];
    let opts = HarnessOptions { repeats: 5, ..opts };
    let (mut analytic, mut measured) = (Vec::new(), Vec::new());
    for (w, r) in sweep {
        let cfg = AttentionConfig::new(2048, w, r, 1, 64).map_err(err)?;
        let row = bench_attention::<f32>("sweep", &cfg, &[1], &opts).map_err(err)?.rows.remove(0);
        println!("    N=2048 w={w} r={r}: analytic {:.0}, measured {:.2}", row.analytic_ratio(), row.measured_speedup);
        analytic.push(row.analytic_ratio());
        measured.push(row.measured_speedup);
    }
    let rho = spearman(&analytic, &measured).ok_or("rank correlation undefined")?;
    ensure(rho > 0.8, || format!("rank correlation {rho:.3} <= 0.8"))?;
    Ok(format!(
        "N=4096 w=512 r=2 speedup {:.1}x (median {:.1} ms); sweep rank correlation {rho:.3}",
        row.measured_speedup, row.median_ms
    ))
}

fn loss_values() -> Outcome {
    let pair = |p: Vec<f64>, t: Vec<f64>| MaskPair::new(Tensor::new(vec![1, p.len()], p)?, Tensor::new(vec![1, t.len()], t)?);
    let half = pair(vec![0.5; 4], vec![1.0; 4]).map_err(err)?;
    let single = pair(vec![0.5], vec![1.0]).map_err(err)?;
    let checks = [
        ("iou", iou_loss(&half).map_err(err)?, 0.5),
        ("dice", dice_loss(&half).map_err(err)?, 1.0 / 3.0),
        ("focal", focal_loss(&single, FocalParams::default()).map_err(err)?, 0.0433),
        ("fine-tune", combine_fine_tune(0.1, 0.2, 0.05), 2.25),
    ];
    for (name, got, want) in checks {
        ensure((got - want).abs() < 5e-5, || format!("{name}: {got} vs {want}"))?;
    }
    Ok(checks.iter().map(|(n, g, _)| format!("{n} {g:.4}")).collect::<Vec<_>>().join(", "))
}

fn main() -> ExitCode {
    let criteria: [(&str, fn() -> Outcome); 10] = [
        ("masked-oracle equivalence", masked_oracle),
        ("tiled-kernel equivalence", tiled_equivalence),
        ("collapse to dense", collapse),
        ("flop law", flop_law),
        ("schedule law", schedule_law),
        ("gradient integrity", gradient_integrity),
        ("distillation demo", distillation_demo),
        ("determinism under parallelism", determinism),
        ("relative speed", relative_speed),
        ("loss values", loss_values),
    ];
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let outcome = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|_| Err("panicked".into()));
        match outcome {
            Ok(detail) => println!("criterion {:>2} PASS  {name}: {detail}", i + 1),
            Err(reason) => {
                failed += 1;
                println!("criterion {:>2} FAIL  {name}: {reason}", i + 1);
            }
        }
    }
    println!("acceptance: {} of {} criteria passed", criteria.len() - failed, criteria.len());
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
