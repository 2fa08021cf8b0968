//! Tape-based reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! Operations are recorded on a [`Tape`] in creation order, which is also a
//! topological order, so [`Tape::backward`] is a single reverse sweep. Each
//! forward value is computed by the same kernel as the matching plain
//! [`Tensor`] method.

use crate::attention::{attend, Kernel};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{gelu_grad, row_moments, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    AddRows(Var, Var),
    Scale(Var, T),
    AddScalar(Var),
    Gelu(Var),
    LayerNorm { x: Var, gamma: Var, beta: Var, eps: T },
    SoftmaxRows(Var),
    Mse(Var, Var),
    Sum(Var),
    Ln(Var),
    Powf(Var, T),
    Clamp { x: Var, lo: T, hi: T },
    SliceRowsStrided { x: Var, start: usize, stride: usize },
    ScatterRows { dest: Var, src: Var, rows: Vec<usize> },
    SliceCols { x: Var, start: usize },
    ConcatCols(Vec<Var>),
    Attention { q: Var, k: Var, v: Var, scale: T },
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
}

#[derive(Debug, Default)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

/// Gradients of a scalar loss with respect to every node of a tape.
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
    shapes: Vec<Vec<usize>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient of `var`; all zeros when `var` has no path to the loss.
    pub fn get(&self, var: Var) -> Tensor<T> {
        match &self.grads[var.0] {
            Some(g) => g.clone(),
            None => Tensor::zeros(&self.shapes[var.0]),
        }
    }

    pub fn try_get(&self, var: Var) -> Option<&Tensor<T>> {
        self.grads[var.0].as_ref()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    /// Records an input. Parameters and constants are both leaves; callers
    /// read gradients only for the leaves they care about.
    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn value(&self, var: Var) -> &Tensor<T> {
        &self.nodes[var.0].value
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        Ok(self.push(out, Op::MatMul(a, b)))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).transpose()?;
        Ok(self.push(out, Op::Transpose(a)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).add(self.value(b))?;
        Ok(self.push(out, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).sub(self.value(b))?;
        Ok(self.push(out, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).mul(self.value(b))?;
        Ok(self.push(out, Op::Mul(a, b)))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), "div", |x, y| x / y)?;
        Ok(self.push(out, Op::Div(a, b)))
    }

    /// Row-broadcast add, see [`Tensor::add_rows`].
    pub fn add_rows(&mut self, x: Var, b: Var) -> Result<Var> {
        let out = self.value(x).add_rows(self.value(b))?;
        Ok(self.push(out, Op::AddRows(x, b)))
    }

    pub fn scale(&mut self, a: Var, c: T) -> Var {
        let out = self.value(a).scale(c);
        self.push(out, Op::Scale(a, c))
    }

    pub fn add_scalar(&mut self, a: Var, c: T) -> Var {
        let out = self.value(a).map(|x| x + c);
        self.push(out, Op::AddScalar(a))
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let out = self.value(a).gelu();
        self.push(out, Op::Gelu(a))
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: T) -> Result<Var> {
        let out = self
            .value(x)
            .layer_norm(self.value(gamma), self.value(beta), eps)?;
        Ok(self.push(out, Op::LayerNorm { x, gamma, beta, eps }))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).softmax_rows()?;
        Ok(self.push(out, Op::SoftmaxRows(a)))
    }

    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).mse(self.value(b))?;
        Ok(self.push(Tensor::scalar(out), Op::Mse(a, b)))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let out = self.value(a).sum();
        self.push(Tensor::scalar(out), Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = T::from_usize(self.value(a).numel()).expect("count fits");
        let s = self.sum(a);
        self.scale(s, T::one() / n)
    }

    pub fn ln(&mut self, a: Var) -> Var {
        let out = self.value(a).map(T::ln);
        self.push(out, Op::Ln(a))
    }

    pub fn powf(&mut self, a: Var, e: T) -> Var {
        let out = self.value(a).map(|x| x.powf(e));
        self.push(out, Op::Powf(a, e))
    }

    pub fn clamp(&mut self, x: Var, lo: T, hi: T) -> Var {
        let out = self.value(x).map(|v| v.max(lo).min(hi));
        self.push(out, Op::Clamp { x, lo, hi })
    }

    pub fn slice_rows_strided(&mut self, x: Var, start: usize, stride: usize, count: usize) -> Result<Var> {
        let out = self.value(x).slice_rows_strided(start, stride, count)?;
        Ok(self.push(out, Op::SliceRowsStrided { x, start, stride }))
    }

    pub fn scatter_rows(&mut self, dest: Var, src: Var, rows: &[usize]) -> Result<Var> {
        let out = self.value(dest).scatter_rows(self.value(src), rows)?;
        Ok(self.push(
            out,
            Op::ScatterRows {
                dest,
                src,
                rows: rows.to_vec(),
            },
        ))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, count: usize) -> Result<Var> {
        let out = self.value(x).slice_cols(start, count)?;
        Ok(self.push(out, Op::SliceCols { x, start }))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let values: Vec<&Tensor<T>> = parts.iter().map(|&p| self.value(p)).collect();
        let out = Tensor::concat_cols(&values)?;
        Ok(self.push(out, Op::ConcatCols(parts.to_vec())))
    }

    /// Fused `softmax(scale · q kᵀ) v`. The forward pass runs `kernel`; the
    /// backward pass recomputes the probabilities instead of storing them.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, scale: T, kernel: Kernel) -> Result<Var> {
        let out = attend(self.value(q), self.value(k), self.value(v), scale, kernel)?;
        Ok(self.push(out, Op::Attention { q, k, v, scale }))
    }

    /// Reverse sweep from a one-element `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let seed = self.value(loss);
        if seed.numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                seed.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::ones(seed.shape()));

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(idx, &g, &mut grads)?;
            grads[idx] = Some(g);
        }

        Ok(Gradients {
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
        })
    }

    fn propagate(&self, idx: usize, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) -> Result<()> {
        let node = &self.nodes[idx];
        let out = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let av = self.value(*a);
                let bv = self.value(*b);
                accumulate(grads, *a, g.matmul_t(bv)?)?;
                accumulate(grads, *b, av.transpose()?.matmul(g)?)?;
            }
            Op::Transpose(a) => accumulate(grads, *a, g.transpose()?)?,
            Op::Add(a, b) => {
                accumulate(grads, *a, g.clone())?;
                accumulate(grads, *b, g.clone())?;
            }
            Op::Sub(a, b) => {
                accumulate(grads, *a, g.clone())?;
                accumulate(grads, *b, g.scale(-T::one()))?;
            }
            Op::Mul(a, b) => {
                accumulate(grads, *a, g.mul(self.value(*b))?)?;
                accumulate(grads, *b, g.mul(self.value(*a))?)?;
            }
            Op::Div(a, b) => {
                let bv = self.value(*b);
                accumulate(grads, *a, g.zip_map(bv, "div", |gi, y| gi / y)?)?;
                let db = g.mul(out)?.zip_map(bv, "div", |p, y| -p / y)?;
                accumulate(grads, *b, db)?;
            }
            Op::AddRows(x, b) => {
                accumulate(grads, *x, g.clone())?;
                let bshape = self.value(*b).shape().to_vec();
                let (r, n) = self.value(*b).broadcast_dims()?;
                let mut db = vec![T::zero(); r * n];
                for (i, row) in g.data().chunks_exact(n).enumerate() {
                    let dst = &mut db[(i % r) * n..(i % r + 1) * n];
                    for (d, &v) in dst.iter_mut().zip(row) {
                        *d = *d + v;
                    }
                }
                accumulate(grads, *b, Tensor::from_parts(bshape, db))?;
            }
            Op::Scale(a, c) => accumulate(grads, *a, g.scale(*c))?,
            Op::AddScalar(a) => accumulate(grads, *a, g.clone())?,
            Op::Gelu(a) => {
                let da = g.zip_map(self.value(*a), "gelu", |gi, x| gi * gelu_grad(x))?;
                accumulate(grads, *a, da)?;
            }
            Op::LayerNorm { x, gamma, beta, eps } => {
                let (dx, dgamma, dbeta) =
                    layer_norm_backward(self.value(*x), self.value(*gamma), g, *eps)?;
                accumulate(grads, *x, dx)?;
                accumulate(grads, *gamma, dgamma)?;
                accumulate(grads, *beta, dbeta)?;
            }
            Op::SoftmaxRows(a) => accumulate(grads, *a, softmax_backward(out, g)?)?,
            Op::Mse(a, b) => {
                let av = self.value(*a);
                let n = T::from_usize(av.numel()).expect("count fits");
                let c = g.item()? * T::from_f64_lossy(2.0) / n;
                let diff = av.sub(self.value(*b))?;
                accumulate(grads, *a, diff.scale(c))?;
                accumulate(grads, *b, diff.scale(-c))?;
            }
            Op::Sum(a) => {
                let shape = self.value(*a).shape().to_vec();
                accumulate(grads, *a, Tensor::full(&shape, g.item()?))?;
            }
            Op::Ln(a) => accumulate(grads, *a, g.zip_map(self.value(*a), "ln", |gi, x| gi / x)?)?,
            Op::Powf(a, e) => {
                let e = *e;
                let da = g.zip_map(self.value(*a), "powf", |gi, x| gi * e * x.powf(e - T::one()))?;
                accumulate(grads, *a, da)?;
            }
            Op::Clamp { x, lo, hi } => {
                let (lo, hi) = (*lo, *hi);
                let dx = g.zip_map(self.value(*x), "clamp", |gi, v| {
                    if v < lo || v > hi {
                        T::zero()
                    } else {
                        gi
                    }
                })?;
                accumulate(grads, *x, dx)?;
            }
            Op::SliceRowsStrided { x, start, stride } => {
                let rows: Vec<usize> = (0..g.rows()).map(|c| start + c * stride).collect();
                let dx = Tensor::zeros(self.value(*x).shape()).scatter_rows(g, &rows)?;
                accumulate(grads, *x, dx)?;
            }
            Op::ScatterRows { dest, src, rows } => {
                accumulate(grads, *dest, g.clone())?;
                let n = g.cols();
                let mut ds = Vec::with_capacity(rows.len() * n);
                for &r in rows {
                    ds.extend_from_slice(g.row(r));
                }
                accumulate(grads, *src, Tensor::from_parts(vec![rows.len(), n], ds))?;
            }
            Op::SliceCols { x, start } => {
                let xv = self.value(*x);
                let (m, n) = xv.dims2()?;
                let count = g.cols();
                let mut dx = vec![T::zero(); m * n];
                for i in 0..m {
                    dx[i * n + start..i * n + start + count].copy_from_slice(g.row(i));
                }
                accumulate(grads, *x, Tensor::from_parts(vec![m, n], dx))?;
            }
            Op::ConcatCols(parts) => {
                let mut col = 0;
                for &p in parts {
                    let count = self.value(p).cols();
                    accumulate(grads, p, g.slice_cols(col, count)?)?;
                    col += count;
                }
            }
            Op::Attention { q, k, v, scale } => {
                let (dq, dk, dv) =
                    attention_backward(self.value(*q), self.value(*k), self.value(*v), *scale, g)?;
                accumulate(grads, *q, dq)?;
                accumulate(grads, *k, dk)?;
                accumulate(grads, *v, dv)?;
            }
        }
        Ok(())
    }
}

fn accumulate<T: Scalar>(grads: &mut [Option<Tensor<T>>], var: Var, delta: Tensor<T>) -> Result<()> {
    let slot = &mut grads[var.0];
    *slot = Some(match slot.take() {
        Some(existing) => existing.add(&delta)?,
        None => delta,
    });
    Ok(())
}

fn softmax_backward<T: Scalar>(probs: &Tensor<T>, g: &Tensor<T>) -> Result<Tensor<T>> {
    let n = probs.cols();
    let mut out = Vec::with_capacity(probs.numel());
    for (p, gr) in probs.data().chunks_exact(n).zip(g.data().chunks_exact(n)) {
        let inner = p.iter().zip(gr).fold(T::zero(), |a, (&pi, &gi)| a + pi * gi);
        out.extend(p.iter().zip(gr).map(|(&pi, &gi)| pi * (gi - inner)));
    }
    Ok(Tensor::from_parts(probs.shape().to_vec(), out))
}

fn layer_norm_backward<T: Scalar>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    g: &Tensor<T>,
    eps: T,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let (m, n) = x.dims2()?;
    let nf = T::from_usize(n).expect("count fits");
    let gam = gamma.data();
    let mut dx = Vec::with_capacity(m * n);
    let mut dgamma = vec![T::zero(); n];
    let mut dbeta = vec![T::zero(); n];
    let mut xhat = vec![T::zero(); n];
    let mut dxhat = vec![T::zero(); n];
    for i in 0..m {
        let row = x.row(i);
        let grow = g.row(i);
        let (mean, rstd) = row_moments(row, eps);
        let mut sum_d = T::zero();
        let mut sum_dx = T::zero();
        for j in 0..n {
            xhat[j] = (row[j] - mean) * rstd;
            dxhat[j] = grow[j] * gam[j];
            dgamma[j] = dgamma[j] + grow[j] * xhat[j];
            dbeta[j] = dbeta[j] + grow[j];
            sum_d = sum_d + dxhat[j];
            sum_dx = sum_dx + dxhat[j] * xhat[j];
        }
        let mean_d = sum_d / nf;
        let mean_dx = sum_dx / nf;
        dx.extend((0..n).map(|j| rstd * (dxhat[j] - mean_d - xhat[j] * mean_dx)));
    }
    Ok((
        Tensor::from_parts(vec![m, n], dx),
        Tensor::from_parts(gamma.shape().to_vec(), dgamma),
        Tensor::from_parts(gamma.shape().to_vec(), dbeta),
    ))
}

fn attention_backward<T: Scalar>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    scale: T,
    g: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let probs = q.matmul_t(k)?.scale(scale).softmax_rows()?;
    let dv = probs.transpose()?.matmul(g)?;
    let dprobs = g.matmul_t(v)?;
    let dscores = softmax_backward(&probs, &dprobs)?.scale(scale);
    let dq = dscores.matmul(k)?;
    let dk = dscores.transpose()?.matmul(q)?;
    Ok((dq, dk, dv))
}
