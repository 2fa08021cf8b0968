//! Central finite-difference checks for every recorded operation.

#![allow(dead_code)]

use dilattn_core::distill::{distill_loss_on_tape, DistillConfig};
use dilattn_core::encoder::{patchify_batch, AttentionMode, BoundParams, EncoderConfig, ParamSet};
use dilattn_core::segloss::{dice_on_tape, fine_tune_on_tape, focal_on_tape, iou_on_tape, FocalParams};
use dilattn_core::{Kernel, Result, Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const STEP: f64 = 1e-6;
pub const TOLERANCE: f64 = 1e-4;
/// Gradients smaller than this in norm (e.g. a key bias, which softmax
/// ignores) are compared absolutely: the difference must stay below
/// `TOLERANCE · NORM_FLOOR`.
pub const NORM_FLOOR: f64 = 1e-3;

type Build = Box<dyn Fn(&mut Tape<f64>, &[Var]) -> Result<Var>>;

pub struct Case {
    pub name: &'static str,
    pub inputs: Vec<Tensor<f64>>,
    /// Which inputs are differentiated; the rest are constants.
    pub wrt: Vec<usize>,
    pub build: Build,
}

fn case(name: &'static str, inputs: Vec<Tensor<f64>>, build: Build) -> Case {
    let wrt = (0..inputs.len()).collect();
    Case { name, inputs, wrt, build }
}

/// Reduces a non-scalar output to `Σ out ⊙ R` with fixed random `R`.
fn scalarize(tape: &mut Tape<f64>, out: Var, seed: u64) -> Result<Var> {
    if tape.value(out).numel() == 1 {
        return Ok(out);
    }
    let shape = tape.value(out).shape().to_vec();
    let r = Tensor::randn(&shape, 1.0, &mut ChaCha8Rng::seed_from_u64(seed ^ 0x5eed));
    let r = tape.leaf(r);
    let prod = tape.mul(out, r)?;
    Ok(tape.sum(prod))
}

fn evaluate(case: &Case, inputs: &[Tensor<f64>], seed: u64) -> Result<f64> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let out = (case.build)(&mut tape, &vars)?;
    let loss = scalarize(&mut tape, out, seed)?;
    tape.value(loss).item()
}

/// `‖g_analytic − g_numeric‖ / max(‖g_analytic‖, ‖g_numeric‖, NORM_FLOOR)`,
/// maximized over the differentiated inputs.
pub fn relative_error(case: &Case, seed: u64) -> Result<f64> {
    per_input_errors(case, seed).map(|v| v.into_iter().fold(0.0, f64::max))
}

/// The same measure for each differentiated input, in `wrt` order.
pub fn per_input_errors(case: &Case, seed: u64) -> Result<Vec<f64>> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = case.inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let out = (case.build)(&mut tape, &vars)?;
    let loss = scalarize(&mut tape, out, seed)?;
    let grads = tape.backward(loss)?;

    let mut errors = Vec::with_capacity(case.wrt.len());
    for &i in &case.wrt {
        let analytic = grads.get(vars[i]);
        let mut inputs = case.inputs.clone();
        let mut diff2 = 0.0;
        let mut a2 = 0.0;
        let mut n2 = 0.0;
        for e in 0..analytic.numel() {
            let base = case.inputs[i].data()[e];
            inputs[i] = with_element(&case.inputs[i], e, base + STEP);
            let up = evaluate(case, &inputs, seed)?;
            inputs[i] = with_element(&case.inputs[i], e, base - STEP);
            let down = evaluate(case, &inputs, seed)?;
            inputs[i] = case.inputs[i].clone();
            let numeric = (up - down) / (2.0 * STEP);
            let a = analytic.data()[e];
            diff2 += (a - numeric).powi(2);
            a2 += a * a;
            n2 += numeric * numeric;
        }
        let denom = a2.sqrt().max(n2.sqrt()).max(NORM_FLOOR);
        errors.push(diff2.sqrt() / denom);
    }
    Ok(errors)
}

fn with_element(t: &Tensor<f64>, index: usize, value: f64) -> Tensor<f64> {
    let mut data = t.data().to_vec();
    data[index] = value;
    Tensor::new(t.shape().to_vec(), data).expect("same shape")
}

fn randn(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::randn(shape, 1.0, rng)
}

fn uniform(shape: &[usize], lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::uniform(shape, lo, hi, rng)
}

/// Values in `(lo, hi)` kept at least `gap` away from both `a` and `b`.
fn away_from(shape: &[usize], lo: f64, hi: f64, a: f64, b: f64, gap: f64, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| loop {
            let x = rng.random_range(lo..hi);
            if (x - a).abs() > gap && (x - b).abs() > gap {
                break x;
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// One case per differentiable tape operation.
pub fn op_cases(seed: u64) -> Vec<Case> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = &mut rng;
    let mut cases = vec![
        case("matmul", vec![randn(&[3, 4], r), randn(&[4, 2], r)], Box::new(|t, v| t.matmul(v[0], v[1]))),
        case("transpose", vec![randn(&[3, 5], r)], Box::new(|t, v| t.transpose(v[0]))),
        case("add", vec![randn(&[2, 3], r), randn(&[2, 3], r)], Box::new(|t, v| t.add(v[0], v[1]))),
        case("sub", vec![randn(&[2, 3], r), randn(&[2, 3], r)], Box::new(|t, v| t.sub(v[0], v[1]))),
        case("mul", vec![randn(&[3, 3], r), randn(&[3, 3], r)], Box::new(|t, v| t.mul(v[0], v[1]))),
        case(
            "div",
            vec![randn(&[2, 3], r), uniform(&[2, 3], 0.5, 2.0, r)],
            Box::new(|t, v| t.div(v[0], v[1])),
        ),
        case("add_rows", vec![randn(&[4, 3], r), randn(&[3], r)], Box::new(|t, v| t.add_rows(v[0], v[1]))),
        case("add_rows_table", vec![randn(&[4, 3], r), randn(&[4, 3], r)], Box::new(|t, v| t.add_rows(v[0], v[1]))),
        case("scale", vec![randn(&[2, 4], r)], Box::new(|t, v| Ok(t.scale(v[0], -1.7)))),
        case("add_scalar", vec![randn(&[2, 4], r)], Box::new(|t, v| Ok(t.add_scalar(v[0], 0.3)))),
        case("gelu", vec![randn(&[3, 4], r)], Box::new(|t, v| Ok(t.gelu(v[0])))),
        case(
            "layer_norm",
            vec![randn(&[3, 5], r), randn(&[5], r), randn(&[5], r)],
            Box::new(|t, v| t.layer_norm(v[0], v[1], v[2], 1e-6)),
        ),
        case("softmax_rows", vec![randn(&[3, 4], r)], Box::new(|t, v| t.softmax_rows(v[0]))),
        case("mse", vec![randn(&[3, 4], r), randn(&[3, 4], r)], Box::new(|t, v| t.mse(v[0], v[1]))),
        case("sum", vec![randn(&[3, 4], r)], Box::new(|t, v| Ok(t.sum(v[0])))),
        case("mean", vec![randn(&[3, 4], r)], Box::new(|t, v| Ok(t.mean(v[0])))),
        case("ln", vec![uniform(&[2, 4], 0.3, 3.0, r)], Box::new(|t, v| Ok(t.ln(v[0])))),
        case("powf", vec![uniform(&[2, 4], 0.3, 2.0, r)], Box::new(|t, v| Ok(t.powf(v[0], 2.5)))),
        case(
            "clamp",
            vec![away_from(&[3, 4], -2.0, 2.0, -0.5, 0.7, 1e-3, r)],
            Box::new(|t, v| Ok(t.clamp(v[0], -0.5, 0.7))),
        ),
        case(
            "slice_rows_strided",
            vec![randn(&[7, 3], r)],
            Box::new(|t, v| t.slice_rows_strided(v[0], 1, 2, 3)),
        ),
        case(
            "scatter_rows",
            vec![randn(&[6, 2], r), randn(&[3, 2], r)],
            Box::new(|t, v| t.scatter_rows(v[0], v[1], &[4, 0, 3])),
        ),
        case("slice_cols", vec![randn(&[3, 5], r)], Box::new(|t, v| t.slice_cols(v[0], 1, 3))),
        case(
            "concat_cols",
            vec![randn(&[3, 2], r), randn(&[3, 3], r)],
            Box::new(|t, v| t.concat_cols(&[v[0], v[1]])),
        ),
        case(
            "attention_naive",
            vec![randn(&[5, 3], r), randn(&[5, 3], r), randn(&[5, 2], r)],
            Box::new(|t, v| t.attention(v[0], v[1], v[2], 0.6, Kernel::Naive)),
        ),
        case(
            "attention_tiled",
            vec![randn(&[6, 4], r), randn(&[6, 4], r), randn(&[6, 4], r)],
            Box::new(|t, v| t.attention(v[0], v[1], v[2], 0.5, Kernel::Tiled { tile_size: 2 })),
        ),
    ];
    cases.extend(mask_cases(r));
    cases
}

fn mask_cases(r: &mut ChaCha8Rng) -> Vec<Case> {
    let target = || -> Tensor<f64> {
        Tensor::new(vec![3, 3], vec![1.0, 0.0, 1.0, 1.0, 0.0, 0.0, 0.0, 1.0, 1.0]).unwrap()
    };
    let pred = |r: &mut ChaCha8Rng| uniform(&[3, 3], 0.05, 0.95, r);
    let mut out = Vec::new();
    for (name, build) in [
        ("iou_loss", Box::new(|t: &mut Tape<f64>, v: &[Var]| iou_on_tape(t, v[0], v[1])) as Build),
        ("dice_loss", Box::new(|t: &mut Tape<f64>, v: &[Var]| dice_on_tape(t, v[0], v[1]))),
        (
            "focal_loss",
            Box::new(|t: &mut Tape<f64>, v: &[Var]| focal_on_tape(t, v[0], v[1], FocalParams::default())),
        ),
        ("fine_tune_loss", Box::new(|t: &mut Tape<f64>, v: &[Var]| fine_tune_on_tape(t, v[0], v[1]))),
    ] {
        out.push(Case {
            name,
            inputs: vec![pred(r), target()],
            wrt: vec![0],
            build,
        });
    }
    out
}

fn tiny_encoder(dim: usize, layers: usize, attention: AttentionMode) -> EncoderConfig {
    EncoderConfig {
        image_size: 4,
        patch_size: 2,
        in_channels: 1,
        embed_dim: dim,
        num_layers: layers,
        num_heads: 2,
        mlp_ratio: 1.0,
        attention,
        kernel: Kernel::Naive,
    }
}

/// Full distillation objective of a tiny dilated student (with adapters)
/// against stand-in teacher targets, differentiated w.r.t. every student
/// and adapter parameter.
pub fn integrated_loss_case(seed: u64) -> Case {
    let teacher = tiny_encoder(6, 2, AttentionMode::Dense);
    let student = tiny_encoder(4, 2, AttentionMode::Dilated { segment_len: 4, interval: 2 });
    let mut cfg = DistillConfig::new(teacher, student.clone(), 1);
    cfg.lambda = 0.7;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params: ParamSet<f64> = student.init_params(&mut rng).unwrap();
    // larger weights keep the check away from the near-linear regime
    let names: Vec<String> = params.names().map(str::to_string).collect();
    for name in &names {
        let p = params.get_mut(name).unwrap();
        *p = p.map(|x| x * 10.0);
    }
    for (name, t) in cfg.init_adapters::<f64>().iter() {
        let noise = Tensor::randn(t.shape(), 0.1, &mut rng);
        params.insert(name, t.add(&noise).unwrap());
    }
    let batch = 2;
    let images: Vec<Tensor<f64>> = (0..batch).map(|_| Tensor::uniform(&[4, 4, 1], 0.0, 1.0, &mut rng)).collect();
    let refs: Vec<&Tensor<f64>> = images.iter().collect();
    let patches = patchify_batch(&refs, &student).unwrap();
    let rows = batch * student.num_tokens();
    let t_feats: Vec<Tensor<f64>> = (0..2).map(|_| Tensor::randn(&[rows, 6], 1.0, &mut rng)).collect();
    let t_out = Tensor::randn(&[rows, 6], 1.0, &mut rng);
    let alphas = vec![1.0, 0.5];

    let param_names: Vec<String> = params.names().map(str::to_string).collect();
    let mut inputs: Vec<Tensor<f64>> = param_names.iter().map(|n| params.get(n).unwrap().clone()).collect();
    let n_params = inputs.len();
    inputs.push(patches);
    inputs.extend(t_feats);
    inputs.push(t_out);

    let build: Build = Box::new(move |tape, vars| {
        let bound = BoundParams::from_pairs(param_names.iter().cloned().zip(vars[..n_params].iter().copied()));
        let feats = &vars[n_params + 1..n_params + 3];
        let steps = distill_loss_on_tape(tape, &cfg, &bound, vars[n_params], feats, vars[n_params + 3], &alphas, batch)?;
        Ok(steps.integrated)
    });
    Case {
        name: "integrated_loss",
        wrt: (0..n_params).collect(),
        inputs,
        build,
    }
}
