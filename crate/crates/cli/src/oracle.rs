//! Reference computations the verification suites compare against. None
//! of them reuse the library's kernels.

use dilattn_core::{Result, Tape, Tensor, Var};
use num_rational::Rational64;

/// Loop-level attention restricted by `mask[i][j]`; rows with no allowed
/// key are zero.
pub fn masked_attention(q: &Tensor<f64>, k: &Tensor<f64>, v: &Tensor<f64>, mask: &[Vec<bool>], scale: f64) -> Tensor<f64> {
    let (n, d, dv) = (q.rows(), q.cols(), v.cols());
    let mut out = vec![0.0; n * dv];
    for i in 0..n {
        let keys: Vec<usize> = (0..k.rows()).filter(|&j| mask[i][j]).collect();
        if keys.is_empty() {
            continue;
        }
        let scores: Vec<f64> = keys
            .iter()
            .map(|&j| scale * (0..d).map(|c| q.row(i)[c] * k.row(j)[c]).sum::<f64>())
            .collect();
        let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = scores.iter().map(|s| (s - max).exp()).sum();
        for (s, &j) in scores.iter().zip(&keys) {
            let p = (s - max).exp() / z;
            for c in 0..dv {
                out[i * dv + c] += p * v.row(j)[c];
            }
        }
    }
    Tensor::new(vec![n, dv], out).expect("shape")
}

/// Rows `i`, `j` interact iff they share a length-`w` segment and both
/// sit at local position `≡ offset (mod r)`.
pub fn dilated_mask(n: usize, w: usize, r: usize, offset: usize) -> Vec<Vec<bool>> {
    let on = |i: usize| (i % w) % r == offset;
    (0..n)
        .map(|i| (0..n).map(|j| i / w == j / w && on(i) && on(j)).collect())
        .collect()
}

/// Exact layer weight over rationals.
pub fn layer_weight_exact(i: i64, t: Rational64, t1: i64, dt: i64) -> Rational64 {
    if i == 1 {
        return Rational64::from_integer(1);
    }
    let start = Rational64::from_integer(t1 + (i - 1) * dt);
    let dt = Rational64::from_integer(dt);
    if t < start {
        Rational64::from_integer(0)
    } else if t < start + dt {
        (t - start) / dt
    } else {
        Rational64::from_integer(1)
    }
}

pub fn rational_to_f64(r: Rational64) -> f64 {
    *r.numer() as f64 / *r.denom() as f64
}

pub type Builder<'a> = &'a dyn Fn(&mut Tape<f64>, &[Var]) -> Result<Var>;

/// Norm-wise relative error between the tape gradient and central
/// differences (step `1e-6`) of the scalar `build(inputs)`, maximized over
/// inputs `wrt`. Norms below `1e-3` are compared absolutely.
pub fn gradient_error(inputs: &[Tensor<f64>], wrt: &[usize], build: Builder<'_>) -> Result<f64> {
    const H: f64 = 1e-6;
    let eval = |xs: &[Tensor<f64>]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = xs.iter().map(|x| tape.leaf(x.clone())).collect();
        let out = build(&mut tape, &vars)?;
        tape.value(out).item()
    };
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|x| tape.leaf(x.clone())).collect();
    let out = build(&mut tape, &vars)?;
    let grads = tape.backward(out)?;
    let mut worst = 0.0f64;
    for &i in wrt {
        let g = grads.get(vars[i]);
        let (mut d2, mut a2, mut n2) = (0.0, 0.0, 0.0);
        let mut xs = inputs.to_vec();
        for e in 0..g.numel() {
            let mut data = inputs[i].data().to_vec();
            let base = data[e];
            data[e] = base + H;
            xs[i] = Tensor::new(inputs[i].shape().to_vec(), data.clone())?;
            let up = eval(&xs)?;
            data[e] = base - H;
            xs[i] = Tensor::new(inputs[i].shape().to_vec(), data)?;
            let down = eval(&xs)?;
            let num = (up - down) / (2.0 * H);
            let a = g.data()[e];
            d2 += (a - num) * (a - num);
            a2 += a * a;
            n2 += num * num;
        }
        xs[i] = inputs[i].clone();
        worst = worst.max(d2.sqrt() / a2.sqrt().max(n2.sqrt()).max(1e-3));
    }
    Ok(worst)
}
