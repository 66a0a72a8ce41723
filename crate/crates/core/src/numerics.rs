//! Dense row-major matrices, a seeded RNG, momentum SGD and a central
//! finite-difference gradient used to check every hand-derived gradient.

use crate::error::{Error, Result};
use rand_chacha::rand_core::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Dense row-major `f64` matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::shape(format!(
                "{} values cannot fill a {rows}x{cols} matrix",
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self::filled(rows, cols, 0.0)
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        Self {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = 1.0;
        }
        m
    }

    /// Builds a matrix from equally long rows.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::shape("ragged rows"));
        }
        let data = rows.iter().flatten().copied().collect();
        Self::new(rows.len(), cols, data)
    }

    /// A 1×n matrix.
    pub fn row_vector(values: Vec<f64>) -> Self {
        Self {
            rows: 1,
            cols: values.len(),
            data: values,
        }
    }

    /// Entries drawn from uniform(-bound, bound).
    pub fn uniform(rows: usize, cols: usize, bound: f64, rng: &mut Rng) -> Self {
        let data = (0..rows * cols)
            .map(|_| rng.uniform_range(-bound, bound))
            .collect();
        Self { rows, cols, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_iter(&self) -> impl Iterator<Item = &[f64]> {
        // chunks_exact panics on a zero chunk size
        self.data.chunks(self.cols.max(1)).take(self.rows)
    }

    /// Copies the listed rows into a new matrix.
    pub fn select_rows(&self, idx: &[usize]) -> Matrix {
        let mut data = Vec::with_capacity(idx.len() * self.cols);
        for &i in idx {
            data.extend_from_slice(self.row(i));
        }
        Matrix {
            rows: idx.len(),
            cols: self.cols,
            data,
        }
    }

    pub fn transpose(&self) -> Matrix {
        let mut out = Matrix::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                out.data[j * self.rows + i] = self.data[i * self.cols + j];
            }
        }
        out
    }

    pub fn matmul(&self, other: &Matrix) -> Result<Matrix> {
        matmul(self, other)
    }

    /// Adds `row` to every row.
    pub fn add_row(&mut self, row: &[f64]) -> Result<()> {
        if row.len() != self.cols {
            return Err(Error::shape(format!(
                "broadcast row of length {} onto {} columns",
                row.len(),
                self.cols
            )));
        }
        for r in self.data.chunks_mut(self.cols.max(1)) {
            for (x, b) in r.iter_mut().zip(row) {
                *x += b;
            }
        }
        Ok(())
    }

    /// Multiplies every row element-wise by `row`.
    pub fn mul_row(&mut self, row: &[f64]) -> Result<()> {
        if row.len() != self.cols {
            return Err(Error::shape(format!(
                "broadcast row of length {} onto {} columns",
                row.len(),
                self.cols
            )));
        }
        for r in self.data.chunks_mut(self.cols.max(1)) {
            for (x, b) in r.iter_mut().zip(row) {
                *x *= b;
            }
        }
        Ok(())
    }

    pub fn column_sums(&self) -> Vec<f64> {
        let mut sums = vec![0.0; self.cols];
        for r in self.row_iter() {
            for (s, x) in sums.iter_mut().zip(r) {
                *s += x;
            }
        }
        sums
    }

    pub fn column_means(&self) -> Vec<f64> {
        let n = self.rows.max(1) as f64;
        self.column_sums().into_iter().map(|s| s / n).collect()
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn scale(&mut self, factor: f64) {
        self.data.iter_mut().for_each(|x| *x *= factor);
    }

    /// `self += factor * other`.
    pub fn axpy(&mut self, factor: f64, other: &Matrix) -> Result<()> {
        check_same_shape(self, other)?;
        for (x, y) in self.data.iter_mut().zip(&other.data) {
            *x += factor * y;
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn max_abs_diff(&self, other: &Matrix) -> Result<f64> {
        check_same_shape(self, other)?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max))
    }
}

impl std::ops::Index<(usize, usize)> for Matrix {
    type Output = f64;

    fn index(&self, (i, j): (usize, usize)) -> &f64 {
        debug_assert!(i < self.rows && j < self.cols);
        &self.data[i * self.cols + j]
    }
}

impl std::ops::IndexMut<(usize, usize)> for Matrix {
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut f64 {
        debug_assert!(i < self.rows && j < self.cols);
        &mut self.data[i * self.cols + j]
    }
}

pub(crate) fn check_same_shape(a: &Matrix, b: &Matrix) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(format!(
            "{:?} does not match {:?}",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

/// Standard product `a · b`.
pub fn matmul(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols != b.rows {
        return Err(Error::shape(format!(
            "matmul {:?} x {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let mut out = Matrix::zeros(a.rows, b.cols);
    for i in 0..a.rows {
        let out_row = &mut out.data[i * b.cols..(i + 1) * b.cols];
        for (k, &aik) in a.row(i).iter().enumerate() {
            if aik == 0.0 {
                continue;
            }
            for (o, &bkj) in out_row.iter_mut().zip(b.row(k)) {
                *o += aik * bkj;
            }
        }
    }
    Ok(out)
}

/// `a · bᵀ` without materializing the transpose.
pub fn matmul_bt(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols != b.cols {
        return Err(Error::shape(format!(
            "matmul_bt {:?} x {:?}ᵀ",
            a.shape(),
            b.shape()
        )));
    }
    let mut out = Matrix::zeros(a.rows, b.rows);
    for i in 0..a.rows {
        let ar = a.row(i);
        for j in 0..b.rows {
            out.data[i * b.rows + j] = dot(ar, b.row(j));
        }
    }
    Ok(out)
}

/// `aᵀ · b` without materializing the transpose.
pub fn matmul_at(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.rows != b.rows {
        return Err(Error::shape(format!(
            "matmul_at {:?}ᵀ x {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let mut out = Matrix::zeros(a.cols, b.cols);
    for r in 0..a.rows {
        let br = b.row(r);
        for (i, &ari) in a.row(r).iter().enumerate() {
            if ari == 0.0 {
                continue;
            }
            let out_row = &mut out.data[i * b.cols..(i + 1) * b.cols];
            for (o, &x) in out_row.iter_mut().zip(br) {
                *o += ari * x;
            }
        }
    }
    Ok(out)
}

pub fn dot(u: &[f64], v: &[f64]) -> f64 {
    u.iter().zip(v).map(|(a, b)| a * b).sum()
}

pub fn norm(u: &[f64]) -> f64 {
    dot(u, u).sqrt()
}

/// Cosine similarity; 0 when either vector has norm below 1e-12.
pub fn cosine_similarity(u: &[f64], v: &[f64]) -> Result<f64> {
    if u.len() != v.len() {
        return Err(Error::shape(format!(
            "cosine of lengths {} and {}",
            u.len(),
            v.len()
        )));
    }
    Ok(cosine_with_norms(u, v, norm(u), norm(v)))
}

/// Cosine similarity given precomputed norms. Bit-identical to
/// [`cosine_similarity`] when the norms come from [`norm`].
pub(crate) fn cosine_with_norms(u: &[f64], v: &[f64], nu: f64, nv: f64) -> f64 {
    if nu < 1e-12 || nv < 1e-12 {
        return 0.0;
    }
    (dot(u, v) / (nu * nv)).clamp(-1.0, 1.0)
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Row-wise softmax.
pub fn softmax_rows(logits: &Matrix) -> Matrix {
    let mut out = logits.clone();
    for r in out.data.chunks_mut(logits.cols.max(1)) {
        let max = r.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for x in r.iter_mut() {
            *x = (*x - max).exp();
            sum += *x;
        }
        for x in r.iter_mut() {
            *x /= sum;
        }
    }
    out
}

pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Deterministic generator: ChaCha8 keyed by `seed`, one independent
/// stream per `stream` id. Uniform doubles take the top 53 bits of a
/// `u64`; normals use the Box–Muller cosine branch.
#[derive(Debug, Clone)]
pub struct Rng {
    seed: u64,
    inner: ChaCha8Rng,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Self::with_stream(seed, 0)
    }

    pub fn with_stream(seed: u64, stream: u64) -> Self {
        let mut inner = ChaCha8Rng::seed_from_u64(seed);
        inner.set_stream(stream);
        Self { seed, inner }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Uniform in [0, 1).
    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    pub fn uniform_range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    pub fn normal(&mut self) -> f64 {
        let u1 = 1.0 - self.uniform(); // (0, 1]
        let u2 = self.uniform();
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }

    /// Uniform integer in [0, n) by rejection sampling.
    pub fn below(&mut self, n: usize) -> usize {
        assert!(n > 0, "below(0)");
        let n = n as u64;
        let zone = u64::MAX - (u64::MAX % n);
        loop {
            let x = self.next_u64();
            if x < zone {
                return (x % n) as usize;
            }
        }
    }

    /// Fisher–Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }

    /// `k` distinct indices from `0..n`, in draw order.
    pub fn sample_indices(&mut self, n: usize, k: usize) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..n).collect();
        let k = k.min(n);
        for i in 0..k {
            let j = i + self.below(n - i);
            idx.swap(i, j);
        }
        idx.truncate(k);
        idx
    }
}

/// Per-parameter momentum buffer for classic (heavy-ball) SGD.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SgdState {
    pub learning_rate: f64,
    pub momentum: f64,
    pub velocity: Matrix,
}

impl SgdState {
    pub fn new(learning_rate: f64, momentum: f64, rows: usize, cols: usize) -> Self {
        Self {
            learning_rate,
            momentum,
            velocity: Matrix::zeros(rows, cols),
        }
    }
}

/// `v ← momentum·v + grad; param ← param − lr·v`.
pub fn sgd_step(param: &mut Matrix, grad: &Matrix, state: &mut SgdState) -> Result<()> {
    check_same_shape(param, grad)?;
    check_same_shape(param, &state.velocity)?;
    let (lr, m) = (state.learning_rate, state.momentum);
    for ((p, v), g) in param
        .data
        .iter_mut()
        .zip(state.velocity.data.iter_mut())
        .zip(&grad.data)
    {
        *v = m * *v + g;
        *p -= lr * *v;
    }
    Ok(())
}

/// Central-difference gradient of `loss` at `param`.
pub fn finite_diff_grad<F>(mut loss: F, param: &Matrix, eps: f64) -> Result<Matrix>
where
    F: FnMut(&Matrix) -> f64,
{
    if eps.is_nan() || eps <= 0.0 {
        return Err(Error::Numeric(format!("eps must be positive, got {eps}")));
    }
    let mut probe = param.clone();
    let mut grad = Matrix::zeros(param.rows, param.cols);
    for idx in 0..param.data.len() {
        let orig = probe.data[idx];
        probe.data[idx] = orig + eps;
        let plus = loss(&probe);
        probe.data[idx] = orig - eps;
        let minus = loss(&probe);
        probe.data[idx] = orig;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::Numeric(format!(
                "non-finite loss while differentiating entry {idx}"
            )));
        }
        grad.data[idx] = (plus - minus) / (2.0 * eps);
    }
    Ok(grad)
}

/// `|a − b| / max(|a|, |b|, 1e-2)`. Below 1e-4 exactly when
/// `|a − b| < max(1e-4 · max(|a|, |b|), 1e-6)`.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-2)
}

/// Largest [`relative_error`] over matching entries.
pub fn max_relative_error(a: &Matrix, b: &Matrix) -> Result<f64> {
    check_same_shape(a, b)?;
    Ok(a.data
        .iter()
        .zip(&b.data)
        .map(|(&x, &y)| relative_error(x, y))
        .fold(0.0, f64::max))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Rng;
    use proptest::prelude::*;

    fn naive_matmul(a: &Matrix, b: &Matrix) -> Matrix {
        let mut out = Matrix::zeros(a.rows(), b.cols());
        for i in 0..a.rows() {
            for j in 0..b.cols() {
                let mut s = 0.0;
                for k in 0..a.cols() {
                    s += a[(i, k)] * b[(k, j)];
                }
                out[(i, j)] = s;
            }
        }
        out
    }

    #[test]
    fn identity_product() {
        let mut rng = Rng::new(1);
        let x = Matrix::uniform(2, 3, 1.0, &mut rng);
        assert_eq!(matmul(&Matrix::identity(2), &x).unwrap(), x);
    }

    #[test]
    fn hand_product() {
        let a = Matrix::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        let b = Matrix::from_rows(&[vec![1.0], vec![1.0]]).unwrap();
        let c = matmul(&a, &b).unwrap();
        assert_eq!(c.data(), &[3.0, 7.0]);
    }

    #[test]
    fn product_matches_triple_loop() {
        let mut rng = Rng::new(2);
        let a = Matrix::uniform(5, 4, 2.0, &mut rng);
        let b = Matrix::uniform(4, 3, 2.0, &mut rng);
        let c = matmul(&a, &b).unwrap();
        assert!(c.max_abs_diff(&naive_matmul(&a, &b)).unwrap() < 1e-14);
        let bt = b.transpose();
        assert!(matmul_bt(&a, &bt).unwrap().max_abs_diff(&c).unwrap() < 1e-14);
        let at = a.transpose();
        assert!(matmul_at(&at, &b).unwrap().max_abs_diff(&c).unwrap() < 1e-14);
    }

    #[test]
    fn matmul_shape_error() {
        let a = Matrix::zeros(2, 3);
        assert!(matches!(matmul(&a, &a), Err(Error::Shape(_))));
        assert!(Matrix::new(2, 2, vec![1.0]).is_err());
    }

    #[test]
    fn cosine_examples() {
        let u = [1.0, -2.0, 0.5];
        assert!((cosine_similarity(&u, &u).unwrap() - 1.0).abs() < 1e-15);
        assert_eq!(cosine_similarity(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        // 32 / sqrt(14 * 77)
        let c = cosine_similarity(&[1.0, 2.0, 3.0], &[4.0, 5.0, 6.0]).unwrap();
        assert!((c - 0.974_631_846_197_075_7).abs() < 1e-12);
        assert_eq!(cosine_similarity(&[0.0, 0.0], &[1.0, 1.0]).unwrap(), 0.0);
        assert!(cosine_similarity(&[1.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn sgd_examples() {
        let mut p = Matrix::filled(1, 1, 1.0);
        let mut st = SgdState::new(0.1, 0.9, 1, 1);
        sgd_step(&mut p, &Matrix::zeros(1, 1), &mut st).unwrap();
        assert_eq!(p[(0, 0)], 1.0);

        let mut st = SgdState::new(0.1, 0.0, 1, 1);
        sgd_step(&mut p, &Matrix::filled(1, 1, 2.0), &mut st).unwrap();
        assert!((p[(0, 0)] - 0.8).abs() < 1e-15);

        // two momentum steps against a scalar recurrence
        let (lr, m, g1, g2) = (0.05, 0.9, 1.5, -0.7);
        let mut p = Matrix::filled(1, 1, 2.0);
        let mut st = SgdState::new(lr, m, 1, 1);
        sgd_step(&mut p, &Matrix::filled(1, 1, g1), &mut st).unwrap();
        sgd_step(&mut p, &Matrix::filled(1, 1, g2), &mut st).unwrap();
        let v1 = g1;
        let p1 = 2.0 - lr * v1;
        let v2 = m * v1 + g2;
        let p2 = p1 - lr * v2;
        assert_eq!(p[(0, 0)], p2);

        let mut st = SgdState::new(0.1, 0.9, 2, 1);
        assert!(sgd_step(&mut p, &Matrix::zeros(1, 1), &mut st).is_err());
    }

    #[test]
    fn finite_difference_examples() {
        let p = Matrix::filled(1, 1, 3.0);
        let g = finite_diff_grad(|m| m.data().iter().map(|x| x * x).sum(), &p, 1e-5).unwrap();
        assert!((g[(0, 0)] - 6.0).abs() < 1e-8);

        let mut rng = Rng::new(3);
        let p = Matrix::uniform(3, 2, 1.0, &mut rng);
        let g = finite_diff_grad(|_| 4.2, &p, 1e-5).unwrap();
        assert!(g.data().iter().all(|&x| x == 0.0));

        assert!(finite_diff_grad(|_| f64::NAN, &p, 1e-5).is_err());
        assert!(finite_diff_grad(|_| 0.0, &p, 0.0).is_err());
    }

    #[test]
    fn rng_is_reproducible() {
        let a: Vec<u64> = {
            let mut r = Rng::new(42);
            (0..8).map(|_| r.next_u64()).collect()
        };
        let b: Vec<u64> = {
            let mut r = Rng::new(42);
            (0..8).map(|_| r.next_u64()).collect()
        };
        assert_eq!(a, b);
        let mut other = Rng::with_stream(42, 1);
        assert_ne!(a[0], other.next_u64());

        let mut r = Rng::new(5);
        let mut v: Vec<usize> = (0..50).collect();
        r.shuffle(&mut v);
        let mut sorted = v.clone();
        sorted.sort_unstable();
        assert_eq!(sorted, (0..50).collect::<Vec<_>>());
        let s = r.sample_indices(10, 4);
        assert_eq!(s.len(), 4);
        assert!(s.iter().all(|&i| i < 10));
    }

    #[test]
    fn normal_moments() {
        let mut r = Rng::new(9);
        let xs: Vec<f64> = (0..20_000).map(|_| r.normal()).collect();
        let mean = xs.iter().sum::<f64>() / xs.len() as f64;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / xs.len() as f64;
        assert!(mean.abs() < 0.03);
        assert!((var - 1.0).abs() < 0.05);
    }

    proptest! {
        #[test]
        fn matmul_is_associative(seed in 0u64..1000, n in 1usize..6, m in 1usize..6, k in 1usize..6, l in 1usize..6) {
            let mut rng = Rng::new(seed);
            let a = Matrix::uniform(n, m, 1.0, &mut rng);
            let b = Matrix::uniform(m, k, 1.0, &mut rng);
            let c = Matrix::uniform(k, l, 1.0, &mut rng);
            let left = matmul(&matmul(&a, &b).unwrap(), &c).unwrap();
            let right = matmul(&a, &matmul(&b, &c).unwrap()).unwrap();
            for (x, y) in left.data().iter().zip(right.data()) {
                prop_assert!((x - y).abs() <= 1e-9 * x.abs().max(y.abs()).max(1.0));
            }
        }

        #[test]
        fn cosine_symmetric_and_scale_invariant(
            u in proptest::collection::vec(-5.0f64..5.0, 4),
            v in proptest::collection::vec(-5.0f64..5.0, 4),
            alpha in 0.01f64..100.0,
        ) {
            let c = cosine_similarity(&u, &v).unwrap();
            prop_assert!((-1.0..=1.0).contains(&c));
            prop_assert!((c - cosine_similarity(&v, &u).unwrap()).abs() <= 1e-12);
            let scaled: Vec<f64> = u.iter().map(|x| alpha * x).collect();
            prop_assume!(norm(&u) > 1e-6);
            prop_assert!((c - cosine_similarity(&scaled, &v).unwrap()).abs() <= 1e-12);
        }

        #[test]
        fn zero_momentum_is_plain_descent(seed in 0u64..500, lr in 0.001f64..1.0) {
            let mut rng = Rng::new(seed);
            let p0 = Matrix::uniform(3, 2, 1.0, &mut rng);
            let g = Matrix::uniform(3, 2, 1.0, &mut rng);
            let mut p = p0.clone();
            let mut st = SgdState::new(lr, 0.0, 3, 2);
            sgd_step(&mut p, &g, &mut st).unwrap();
            for ((a, b), c) in p.data().iter().zip(p0.data()).zip(g.data()) {
                prop_assert_eq!(*a, b - lr * c);
            }
        }
    }
}
