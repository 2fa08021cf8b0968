//! Loop-level reference implementations shared by the integration suites.

#![allow(dead_code)]

use dilattn_core::Tensor;

/// Dense attention over all `N` rows with a boolean mask. Rows whose mask
/// row is empty produce zeros.
pub fn masked_attention(q: &Tensor<f64>, k: &Tensor<f64>, v: &Tensor<f64>, mask: &[Vec<bool>], scale: f64) -> Tensor<f64> {
    let n = q.rows();
    let d = q.cols();
    let dv = v.cols();
    let mut out = vec![0.0; n * dv];
    for i in 0..n {
        let allowed: Vec<usize> = (0..k.rows()).filter(|&j| mask[i][j]).collect();
        if allowed.is_empty() {
            continue;
        }
        let scores: Vec<f64> = allowed
            .iter()
            .map(|&j| (0..d).map(|c| q.row(i)[c] * k.row(j)[c]).sum::<f64>() * scale)
            .collect();
        let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
        let z: f64 = exps.iter().sum();
        for (e, &j) in exps.iter().zip(&allowed) {
            for c in 0..dv {
                out[i * dv + c] += e / z * v.row(j)[c];
            }
        }
    }
    Tensor::new(vec![n, dv], out).unwrap()
}

/// Row `i` may attend to row `j` iff both sit in the same length-`w`
/// segment and both are congruent to `offset` modulo `r` within it.
pub fn dilated_mask(n: usize, w: usize, r: usize, offset: usize) -> Vec<Vec<bool>> {
    let selected = |i: usize| (i % w) % r == offset;
    (0..n)
        .map(|i| (0..n).map(|j| i / w == j / w && selected(i) && selected(j)).collect())
        .collect()
}

pub fn full_mask(n: usize) -> Vec<Vec<bool>> {
    vec![vec![true; n]; n]
}
