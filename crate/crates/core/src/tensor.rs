//! Dense row-major tensors and the plain (non-recording) kernels over them.
//!
//! Every kernel accumulates in a fixed order: row-major over outputs, and
//! left-to-right over the reduced index. Results are therefore reproducible
//! bit-for-bit and independent of how callers split work across threads.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::Contract(format!(
                "tensor dimensions must be positive, got {shape:?}"
            )));
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::dim("Tensor::new", &shape, &[data.len()]));
        }
        Ok(Tensor { shape, data })
    }

    /// Builds a tensor the caller has already validated.
    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<T>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor { shape, data }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, T::one())
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        let numel = shape.iter().product();
        Tensor::from_parts(shape.to_vec(), vec![value; numel])
    }

    pub fn scalar(value: T) -> Self {
        Tensor::from_parts(vec![1], vec![value])
    }

    pub fn eye(n: usize) -> Self {
        Self::rect_eye(n, n)
    }

    /// `rows × cols` matrix with ones on the leading diagonal.
    pub fn rect_eye(rows: usize, cols: usize) -> Self {
        let mut data = vec![T::zero(); rows * cols];
        for i in 0..rows.min(cols) {
            data[i * cols + i] = T::one();
        }
        Tensor::from_parts(vec![rows, cols], data)
    }

    pub fn from_rows(rows: &[&[T]]) -> Result<Self> {
        let m = rows.len();
        let n = rows.first().map_or(0, |r| r.len());
        if rows.iter().any(|r| r.len() != n) {
            return Err(Error::Contract("ragged rows".into()));
        }
        Tensor::new(vec![m, n], rows.concat())
    }

    pub fn randn<R: Rng + ?Sized>(shape: &[usize], std: f64, rng: &mut R) -> Self {
        let numel = shape.iter().product();
        let data = (0..numel)
            .map(|_| {
                let z: f64 = rng.sample(StandardNormal);
                T::from_f64_lossy(z * std)
            })
            .collect();
        Tensor::from_parts(shape.to_vec(), data)
    }

    /// Normal samples with standard deviation `std`, redrawn until they fall
    /// inside `[-2 std, 2 std]`.
    pub fn trunc_normal<R: Rng + ?Sized>(shape: &[usize], std: f64, rng: &mut R) -> Self {
        let numel = shape.iter().product();
        let data = (0..numel)
            .map(|_| loop {
                let z: f64 = rng.sample(StandardNormal);
                if z.abs() <= 2.0 {
                    break T::from_f64_lossy(z * std);
                }
            })
            .collect();
        Tensor::from_parts(shape.to_vec(), data)
    }

    pub fn uniform<R: Rng + ?Sized>(shape: &[usize], lo: f64, hi: f64, rng: &mut R) -> Self {
        let numel = shape.iter().product();
        let data = (0..numel)
            .map(|_| T::from_f64_lossy(rng.random_range(lo..hi)))
            .collect();
        Tensor::from_parts(shape.to_vec(), data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// `(rows, cols)` of a rank-2 tensor.
    pub fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape[..] {
            [m, n] => Ok((m, n)),
            _ => Err(Error::Contract(format!(
                "expected a matrix, got shape {:?}",
                self.shape
            ))),
        }
    }

    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    pub fn cols(&self) -> usize {
        *self.shape.last().expect("rank >= 1")
    }

    pub fn row(&self, i: usize) -> &[T] {
        let n = self.cols();
        &self.data[i * n..(i + 1) * n]
    }

    pub fn at(&self, i: usize, j: usize) -> T {
        self.data[i * self.cols() + j]
    }

    /// The single element of a one-element tensor.
    pub fn item(&self) -> Result<T> {
        match self.data[..] {
            [v] => Ok(v),
            _ => Err(Error::Contract(format!(
                "item() on tensor of shape {:?}",
                self.shape
            ))),
        }
    }

    pub fn reshape(&self, shape: Vec<usize>) -> Result<Self> {
        Tensor::new(shape, self.data.clone())
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor::from_parts(self.shape.clone(), self.data.iter().map(|&x| f(x)).collect())
    }

    pub fn zip_map(&self, other: &Self, op: &'static str, f: impl Fn(T, T) -> T) -> Result<Self> {
        self.same_shape(other, op)?;
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| f(a, b))
            .collect();
        Ok(Tensor::from_parts(self.shape.clone(), data))
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor::from_parts(
            self.shape.clone(),
            self.data.iter().map(|&x| U::from_f64_lossy(x.as_f64())).collect(),
        )
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn max_abs_diff(&self, other: &Self) -> Result<T> {
        self.same_shape(other, "max_abs_diff")?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| (a - b).abs())
            .fold(T::zero(), T::max))
    }

    fn same_shape(&self, other: &Self, op: &'static str) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::dim(op, &self.shape, &other.shape));
        }
        Ok(())
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, "sub", |a, b| a - b)
    }

    pub fn mul(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, "mul", |a, b| a * b)
    }

    pub fn scale(&self, c: T) -> Self {
        self.map(|x| x * c)
    }

    pub fn sum(&self) -> T {
        self.data.iter().fold(T::zero(), |acc, &x| acc + x)
    }

    /// Adds `b` (shape `R × n`) to every block of `R` rows of `self` (`M × n`, `R | M`).
    /// A single-row `b` is an ordinary bias broadcast.
    pub fn add_rows(&self, b: &Self) -> Result<Self> {
        let (m, n) = self.dims2()?;
        let (r, bn) = b.broadcast_dims()?;
        if bn != n || m % r != 0 {
            return Err(Error::dim("add_rows", &self.shape, &b.shape));
        }
        let mut data = self.data.clone();
        for (i, row) in data.chunks_exact_mut(n).enumerate() {
            let brow = &b.data[(i % r) * n..(i % r + 1) * n];
            for (x, &y) in row.iter_mut().zip(brow) {
                *x = *x + y;
            }
        }
        Ok(Tensor::from_parts(self.shape.clone(), data))
    }

    /// Rank-1 tensors broadcast as a single row.
    pub(crate) fn broadcast_dims(&self) -> Result<(usize, usize)> {
        match self.shape[..] {
            [n] => Ok((1, n)),
            [r, n] => Ok((r, n)),
            _ => Err(Error::Contract(format!(
                "expected a vector or matrix, got shape {:?}",
                self.shape
            ))),
        }
    }

    pub fn matmul(&self, other: &Self) -> Result<Self> {
        let (m, k) = self.dims2()?;
        let (k2, n) = other.dims2()?;
        if k != k2 {
            return Err(Error::dim("matmul", &self.shape, &other.shape));
        }
        let mut out = vec![T::zero(); m * n];
        matmul_into(&self.data, &other.data, &mut out, m, k, n);
        Ok(Tensor::from_parts(vec![m, n], out))
    }

    pub fn transpose(&self) -> Result<Self> {
        let (m, n) = self.dims2()?;
        let mut out = Vec::with_capacity(m * n);
        for j in 0..n {
            for i in 0..m {
                out.push(self.data[i * n + j]);
            }
        }
        Ok(Tensor::from_parts(vec![n, m], out))
    }

    /// `self · otherᵀ`, each entry a left-to-right dot product of two rows.
    pub fn matmul_t(&self, other: &Self) -> Result<Self> {
        let (m, k) = self.dims2()?;
        let (n, k2) = other.dims2()?;
        if k != k2 {
            return Err(Error::dim("matmul_t", &self.shape, &other.shape));
        }
        let mut out = Vec::with_capacity(m * n);
        for i in 0..m {
            let a = &self.data[i * k..(i + 1) * k];
            for j in 0..n {
                out.push(dot(a, &other.data[j * k..(j + 1) * k]));
            }
        }
        Ok(Tensor::from_parts(vec![m, n], out))
    }

    pub fn softmax_rows(&self) -> Result<Self> {
        let (_, n) = self.dims2()?;
        let mut data = self.data.clone();
        for row in data.chunks_exact_mut(n) {
            softmax_in_place(row);
        }
        Ok(Tensor::from_parts(self.shape.clone(), data))
    }

    /// Exact GELU, `x · Φ(x)` with Φ written through `erf`.
    pub fn gelu(&self) -> Self {
        self.map(gelu)
    }

    /// Per-row normalization followed by an affine map with `gamma`, `beta` of length `cols`.
    pub fn layer_norm(&self, gamma: &Self, beta: &Self, eps: T) -> Result<Self> {
        let (_, n) = self.dims2()?;
        if gamma.numel() != n || beta.numel() != n {
            return Err(Error::dim("layer_norm", &self.shape, &gamma.shape));
        }
        let mut data = self.data.clone();
        for row in data.chunks_exact_mut(n) {
            let (mean, rstd) = row_moments(row, eps);
            for (j, x) in row.iter_mut().enumerate() {
                *x = (*x - mean) * rstd * gamma.data[j] + beta.data[j];
            }
        }
        Ok(Tensor::from_parts(self.shape.clone(), data))
    }

    /// Mean squared error over all elements.
    pub fn mse(&self, other: &Self) -> Result<T> {
        self.same_shape(other, "mse")?;
        let total = self
            .data
            .iter()
            .zip(&other.data)
            .fold(T::zero(), |acc, (&a, &b)| acc + (a - b) * (a - b));
        Ok(total / T::from_usize(self.numel()).expect("count fits"))
    }

    /// Rows `start, start + stride, …` (`count` of them).
    pub fn slice_rows_strided(&self, start: usize, stride: usize, count: usize) -> Result<Self> {
        let (m, n) = self.dims2()?;
        if stride == 0 || count == 0 {
            return Err(Error::Contract(format!(
                "slice_rows_strided needs stride and count >= 1 (stride {stride}, count {count})"
            )));
        }
        let last = start + stride * (count - 1);
        if last >= m {
            return Err(Error::Index {
                what: "slice_rows_strided",
                index: last,
                limit: m,
            });
        }
        let mut out = Vec::with_capacity(count * n);
        for c in 0..count {
            out.extend_from_slice(self.row(start + c * stride));
        }
        Ok(Tensor::from_parts(vec![count, n], out))
    }

    /// Returns `dest` with `src` row `k` added onto row `row_indices[k]`.
    /// Into a zero `dest` with distinct indices this is a pure placement.
    pub fn scatter_rows(&self, src: &Self, row_indices: &[usize]) -> Result<Self> {
        let (m, n) = self.dims2()?;
        let (sm, sn) = src.dims2()?;
        if sn != n || sm != row_indices.len() {
            return Err(Error::dim("scatter_rows", &self.shape, &src.shape));
        }
        let mut data = self.data.clone();
        for (k, &idx) in row_indices.iter().enumerate() {
            if idx >= m {
                return Err(Error::Index {
                    what: "scatter_rows",
                    index: idx,
                    limit: m,
                });
            }
            for (x, &y) in data[idx * n..(idx + 1) * n].iter_mut().zip(src.row(k)) {
                *x = *x + y;
            }
        }
        Ok(Tensor::from_parts(self.shape.clone(), data))
    }

    pub fn slice_cols(&self, start: usize, count: usize) -> Result<Self> {
        let (m, n) = self.dims2()?;
        if count == 0 || start + count > n {
            return Err(Error::Index {
                what: "slice_cols",
                index: start + count,
                limit: n,
            });
        }
        let mut out = Vec::with_capacity(m * count);
        for i in 0..m {
            out.extend_from_slice(&self.row(i)[start..start + count]);
        }
        Ok(Tensor::from_parts(vec![m, count], out))
    }

    pub fn concat_cols(parts: &[&Self]) -> Result<Self> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Contract("concat_cols of nothing".into()))?;
        let m = first.dims2()?.0;
        let mut total = 0;
        for p in parts {
            let (pm, pn) = p.dims2()?;
            if pm != m {
                return Err(Error::dim("concat_cols", &first.shape, &p.shape));
            }
            total += pn;
        }
        let mut out = Vec::with_capacity(m * total);
        for i in 0..m {
            for p in parts {
                out.extend_from_slice(p.row(i));
            }
        }
        Ok(Tensor::from_parts(vec![m, total], out))
    }

    /// Stacks equally shaped matrices on top of each other.
    pub fn concat_rows(parts: &[&Self]) -> Result<Self> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Contract("concat_rows of nothing".into()))?;
        let n = first.dims2()?.1;
        let mut rows = 0;
        let mut out = Vec::new();
        for p in parts {
            let (pm, pn) = p.dims2()?;
            if pn != n {
                return Err(Error::dim("concat_rows", &first.shape, &p.shape));
            }
            rows += pm;
            out.extend_from_slice(&p.data);
        }
        Ok(Tensor::from_parts(vec![rows, n], out))
    }
}

pub(crate) fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).fold(T::zero(), |acc, (&x, &y)| acc + x * y)
}

/// `out += a · b` for row-major `a: m×k`, `b: k×n`. With `out` zeroed each
/// entry is summed over `k` in ascending order, exactly like the triple loop.
pub(crate) fn matmul_into<T: Scalar>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let out_row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            let b_row = &b[p * n..(p + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o = *o + aip * bv;
            }
        }
    }
}

pub(crate) fn softmax_in_place<T: Scalar>(row: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut sum = T::zero();
    for x in row.iter_mut() {
        *x = (*x - max).exp();
        sum = sum + *x;
    }
    for x in row.iter_mut() {
        *x = *x / sum;
    }
}

pub(crate) fn gelu<T: Scalar>(x: T) -> T {
    let half = T::from_f64_lossy(0.5);
    half * x * (T::one() + (x * T::from_f64_lossy(std::f64::consts::FRAC_1_SQRT_2)).erf())
}

pub(crate) fn gelu_grad<T: Scalar>(x: T) -> T {
    let half = T::from_f64_lossy(0.5);
    let cdf = half * (T::one() + (x * T::from_f64_lossy(std::f64::consts::FRAC_1_SQRT_2)).erf());
    let pdf = (-(x * x) * half).exp() * T::from_f64_lossy(1.0 / (2.0 * std::f64::consts::PI).sqrt());
    cdf + x * pdf
}

/// Mean and reciprocal standard deviation (biased variance) of one row.
pub(crate) fn row_moments<T: Scalar>(row: &[T], eps: T) -> (T, T) {
    let n = T::from_usize(row.len()).expect("count fits");
    let mean = row.iter().fold(T::zero(), |a, &x| a + x) / n;
    let var = row.iter().fold(T::zero(), |a, &x| a + (x - mean) * (x - mean)) / n;
    (mean, T::one() / (var + eps).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn m(rows: &[&[f64]]) -> Tensor<f64> {
        Tensor::from_rows(rows).unwrap()
    }

    fn triple_loop(a: &Tensor<f64>, b: &Tensor<f64>) -> Vec<f64> {
        let (mm, k) = a.dims2().unwrap();
        let n = b.dims2().unwrap().1;
        let mut out = vec![0.0; mm * n];
        for i in 0..mm {
            for j in 0..n {
                let mut s = 0.0;
                for p in 0..k {
                    s += a.at(i, p) * b.at(p, j);
                }
                out[i * n + j] = s;
            }
        }
        out
    }

    #[test]
    fn matmul_identity_and_hand_case() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let b = Tensor::<f64>::randn(&[3, 5], 1.0, &mut rng);
        assert_eq!(Tensor::eye(3).matmul(&b).unwrap(), b);

        let a = m(&[&[1.0, 2.0], &[3.0, 4.0]]);
        let ones = m(&[&[1.0], &[1.0]]);
        assert_eq!(a.matmul(&ones).unwrap().data(), &[3.0, 7.0]);
    }

    #[test]
    fn matmul_matches_triple_loop_bitwise() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let a = Tensor::<f64>::randn(&[8, 8], 1.0, &mut rng);
        let b = Tensor::<f64>::randn(&[8, 8], 1.0, &mut rng);
        assert_eq!(a.matmul(&b).unwrap().data(), &triple_loop(&a, &b)[..]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let a = Tensor::<f64>::zeros(&[2, 3]);
        let b = Tensor::<f64>::zeros(&[2, 3]);
        let msg = a.matmul(&b).unwrap_err().to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("matmul"), "{msg}");
    }

    #[test]
    fn softmax_closed_forms() {
        let uniform = m(&[&[2.0, 2.0, 2.0, 2.0]]).softmax_rows().unwrap();
        assert!(uniform.data().iter().all(|&p| (p - 0.25).abs() < 1e-15));

        let s = m(&[&[0.0, 3f64.ln()]]).softmax_rows().unwrap();
        assert!((s.at(0, 0) - 0.25).abs() < 1e-15);
        assert!((s.at(0, 1) - 0.75).abs() < 1e-15);
    }

    #[test]
    fn softmax_large_max_single_precision() {
        let x = Tensor::<f32>::new(vec![1, 3], vec![1e4, 1e4 - 1.0, 0.0]).unwrap();
        let s = x.softmax_rows().unwrap();
        assert!(s.all_finite());
        // double-precision oracle
        let e: Vec<f64> = [0.0f64, -1.0, -1e4].iter().map(|v| v.exp()).collect();
        let z: f64 = e.iter().sum();
        for (j, &p) in s.data().iter().enumerate() {
            assert!((p as f64 - e[j] / z).abs() < 1e-6);
        }
        assert!((s.sum() - 1.0).abs() < 1e-6);
    }

    #[test]
    fn scatter_and_slice_errors() {
        let x = Tensor::<f64>::zeros(&[4, 2]);
        assert!(matches!(
            x.slice_rows_strided(1, 2, 3),
            Err(Error::Index { index: 5, .. })
        ));
        let src = Tensor::<f64>::ones(&[1, 2]);
        assert!(x.scatter_rows(&src, &[4]).is_err());
        assert!(x.scatter_rows(&src, &[0, 1]).is_err());
    }

    #[test]
    fn new_rejects_bad_shapes() {
        assert!(Tensor::<f64>::new(vec![2, 2], vec![0.0; 3]).is_err());
        assert!(Tensor::<f64>::new(vec![0, 2], vec![]).is_err());
    }

    #[test]
    fn layer_norm_rows_are_standardized() {
        let x = m(&[&[1.0, 2.0, 3.0, 4.0], &[-5.0, 0.0, 5.0, 10.0]]);
        let y = x
            .layer_norm(&Tensor::ones(&[4]), &Tensor::zeros(&[4]), 0.0)
            .unwrap();
        for i in 0..2 {
            let r = y.row(i);
            let mean: f64 = r.iter().sum::<f64>() / 4.0;
            let var: f64 = r.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 4.0;
            assert!(mean.abs() < 1e-12 && (var - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn gelu_reference_points() {
        let x = m(&[&[0.0, 1.0, -1.0]]).gelu();
        assert_eq!(x.at(0, 0), 0.0);
        // 1 * Φ(1) with Φ(1) = 0.841344746068543
        assert!((x.at(0, 1) - 0.841_344_746_068_543).abs() < 1e-12);
        assert!((x.at(0, 2) + 0.158_655_253_931_457).abs() < 1e-12);
    }

    fn small_matrix() -> impl Strategy<Value = Tensor<f64>> {
        (1usize..10, 1usize..10).prop_flat_map(|(r, c)| {
            proptest::collection::vec(-50.0f64..50.0, r * c)
                .prop_map(move |d| Tensor::new(vec![r, c], d).unwrap())
        })
    }

    proptest! {
        #[test]
        fn softmax_rows_sum_to_one(x in small_matrix()) {
            let s = x.softmax_rows().unwrap();
            for i in 0..s.rows() {
                let total: f64 = s.row(i).iter().sum();
                prop_assert!((total - 1.0).abs() < 1e-6);
            }
        }

        #[test]
        fn scatter_of_strided_slice_restores_selected_rows(
            x in small_matrix(), start in 0usize..4, stride in 1usize..4,
        ) {
            let m = x.rows();
            prop_assume!(start < m);
            let count = (m - start).div_ceil(stride);
            let picked = x.slice_rows_strided(start, stride, count).unwrap();
            let idx: Vec<usize> = (0..count).map(|c| start + c * stride).collect();
            let back = Tensor::zeros(x.shape()).scatter_rows(&picked, &idx).unwrap();
            for i in 0..m {
                if idx.contains(&i) {
                    prop_assert_eq!(back.row(i), x.row(i));
                } else {
                    prop_assert!(back.row(i).iter().all(|&v| v == 0.0));
                }
            }
        }

        #[test]
        fn matmul_bitwise_equals_triple_loop(
            (a, b) in (1usize..=16, 1usize..=16, 1usize..=16).prop_flat_map(|(m, k, n)| (
                proptest::collection::vec(-10.0f64..10.0, m * k)
                    .prop_map(move |d| Tensor::new(vec![m, k], d).unwrap()),
                proptest::collection::vec(-10.0f64..10.0, k * n)
                    .prop_map(move |d| Tensor::new(vec![k, n], d).unwrap()),
            ))
        ) {
            let expected = triple_loop(&a, &b);
            let got = a.matmul(&b).unwrap();
            prop_assert_eq!(got.data(), &expected[..]);
        }
    }
}
