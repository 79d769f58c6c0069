//! Dense linear algebra, low-rank Gaussian densities and seeded sampling.
//!
//! Matrices are small (at most a few thousand rows, latent dimensions in the
//! tens), so everything here is plain row-major dense code.

use std::ops::{Index, IndexMut};

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Real;

/// Absolute pivot tolerance used by [`cholesky`].
pub const PD_TOLERANCE: f64 = 1e-12;

/// Dense row-major matrix.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Real")]
pub struct Matrix<T> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

impl<T: Real> Matrix<T> {
    pub fn new(rows: usize, cols: usize, data: Vec<T>) -> Result<Self> {
        if rows * cols != data.len() {
            return Err(Error::InvalidShape(format!(
                "{rows}x{cols} matrix needs {} entries, got {}",
                rows * cols,
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![T::zero(); rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = T::one();
        }
        m
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Self { rows, cols, data }
    }

    /// Builds a matrix from equally long rows.
    pub fn from_rows(rows: &[Vec<T>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::InvalidShape("ragged rows".into()));
        }
        Ok(Self {
            rows: rows.len(),
            cols,
            data: rows.concat(),
        })
    }

    /// Column vector.
    pub fn column(v: &[T]) -> Self {
        Self {
            rows: v.len(),
            cols: 1,
            data: v.to_vec(),
        }
    }

    pub fn diag(v: &[T]) -> Self {
        let mut m = Self::zeros(v.len(), v.len());
        for (i, &x) in v.iter().enumerate() {
            m[(i, i)] = x;
        }
        m
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn as_slice(&self) -> &[T] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[T] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [T] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn col_vec(&self, j: usize) -> Vec<T> {
        (0..self.rows).map(|i| self[(i, j)]).collect()
    }

    /// Copy of the listed rows, in the given order.
    pub fn select_rows(&self, idx: &[usize]) -> Self {
        let mut data = Vec::with_capacity(idx.len() * self.cols);
        for &i in idx {
            data.extend_from_slice(self.row(i));
        }
        Self {
            rows: idx.len(),
            cols: self.cols,
            data,
        }
    }

    /// Copy of columns `start..end`.
    pub fn col_range(&self, start: usize, end: usize) -> Self {
        Self::from_fn(self.rows, end - start, |i, j| self[(i, start + j)])
    }

    pub fn transpose(&self) -> Self {
        Self::from_fn(self.cols, self.rows, |i, j| self[(j, i)])
    }

    /// `self * rhs`. Panics on incompatible shapes.
    pub fn matmul(&self, rhs: &Self) -> Self {
        assert_eq!(self.cols, rhs.rows, "matmul shape mismatch");
        let mut out = Self::zeros(self.rows, rhs.cols);
        for i in 0..self.rows {
            let orow = &mut out.data[i * rhs.cols..(i + 1) * rhs.cols];
            for k in 0..self.cols {
                let a = self.data[i * self.cols + k];
                if a == T::zero() {
                    continue;
                }
                for (o, &b) in orow.iter_mut().zip(rhs.row(k)) {
                    *o += a * b;
                }
            }
        }
        out
    }

    /// `selfᵀ * rhs`.
    pub fn t_matmul(&self, rhs: &Self) -> Self {
        assert_eq!(self.rows, rhs.rows, "t_matmul shape mismatch");
        let mut out = Self::zeros(self.cols, rhs.cols);
        for k in 0..self.rows {
            let arow = self.row(k);
            let brow = rhs.row(k);
            for (i, &a) in arow.iter().enumerate() {
                if a == T::zero() {
                    continue;
                }
                let orow = &mut out.data[i * rhs.cols..(i + 1) * rhs.cols];
                for (o, &b) in orow.iter_mut().zip(brow) {
                    *o += a * b;
                }
            }
        }
        out
    }

    /// `self * rhsᵀ`.
    pub fn matmul_t(&self, rhs: &Self) -> Self {
        assert_eq!(self.cols, rhs.cols, "matmul_t shape mismatch");
        Self::from_fn(self.rows, rhs.rows, |i, j| dot(self.row(i), rhs.row(j)))
    }

    pub fn matvec(&self, v: &[T]) -> Vec<T> {
        assert_eq!(self.cols, v.len(), "matvec shape mismatch");
        (0..self.rows).map(|i| dot(self.row(i), v)).collect()
    }

    /// `selfᵀ * v`.
    pub fn t_matvec(&self, v: &[T]) -> Vec<T> {
        assert_eq!(self.rows, v.len(), "t_matvec shape mismatch");
        let mut out = vec![T::zero(); self.cols];
        for (i, &vi) in v.iter().enumerate() {
            for (o, &a) in out.iter_mut().zip(self.row(i)) {
                *o += a * vi;
            }
        }
        out
    }

    pub fn add(&self, rhs: &Self) -> Self {
        assert_eq!(self.shape(), rhs.shape(), "add shape mismatch");
        self.zip_map(rhs, |a, b| a + b)
    }

    pub fn sub(&self, rhs: &Self) -> Self {
        assert_eq!(self.shape(), rhs.shape(), "sub shape mismatch");
        self.zip_map(rhs, |a, b| a - b)
    }

    pub fn scale(&self, s: T) -> Self {
        self.map(|a| a * s)
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&a| f(a)).collect(),
        }
    }

    fn zip_map(&self, rhs: &Self, f: impl Fn(T, T) -> T) -> Self {
        Self {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().zip(&rhs.data).map(|(&a, &b)| f(a, b)).collect(),
        }
    }

    /// Adds `s` to every diagonal entry.
    pub fn add_diag(&self, s: T) -> Self {
        let mut out = self.clone();
        for i in 0..self.rows.min(self.cols) {
            out[(i, i)] += s;
        }
        out
    }

    pub fn trace(&self) -> T {
        (0..self.rows.min(self.cols)).map(|i| self[(i, i)]).sum()
    }

    pub fn frobenius(&self) -> T {
        self.data.iter().map(|&a| a * a).sum::<T>().sqrt()
    }

    pub fn max_abs_diff(&self, rhs: &Self) -> T {
        assert_eq!(self.shape(), rhs.shape());
        self.data
            .iter()
            .zip(&rhs.data)
            .map(|(&a, &b)| (a - b).abs())
            .fold(T::zero(), T::max)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|a| a.is_finite())
    }

    pub fn is_symmetric(&self, tol: T) -> bool {
        self.rows == self.cols && (0..self.rows).all(|i| (0..i).all(|j| (self[(i, j)] - self[(j, i)]).abs() <= tol))
    }

    /// Averages the matrix with its transpose.
    pub fn symmetrize(&self) -> Self {
        let half = T::lit(0.5);
        Self::from_fn(self.rows, self.cols, |i, j| half * (self[(i, j)] + self[(j, i)]))
    }

    /// Column-major vectorisation.
    pub fn vec_col_major(&self) -> Vec<T> {
        let mut out = Vec::with_capacity(self.data.len());
        for j in 0..self.cols {
            for i in 0..self.rows {
                out.push(self[(i, j)]);
            }
        }
        out
    }

    pub fn cast<U: Real>(&self) -> Matrix<U> {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&a| U::lit(a.to_f64_lossy())).collect(),
        }
    }
}

impl<T> Index<(usize, usize)> for Matrix<T> {
    type Output = T;
    #[inline]
    fn index(&self, (i, j): (usize, usize)) -> &T {
        debug_assert!(i < self.rows && j < self.cols);
        &self.data[i * self.cols + j]
    }
}

impl<T> IndexMut<(usize, usize)> for Matrix<T> {
    #[inline]
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut T {
        debug_assert!(i < self.rows && j < self.cols);
        &mut self.data[i * self.cols + j]
    }
}

#[inline]
pub fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).fold(T::zero(), |acc, (&x, &y)| acc + x * y)
}

/// Kronecker product `a ⊗ b`.
pub fn kron<T: Real>(a: &Matrix<T>, b: &Matrix<T>) -> Matrix<T> {
    let (ar, ac) = a.shape();
    let (br, bc) = b.shape();
    Matrix::from_fn(ar * br, ac * bc, |i, j| a[(i / br, j / bc)] * b[(i % br, j % bc)])
}

/// Lower-triangular Cholesky factor `g` with `g * gᵀ = a`.
pub fn cholesky<T: Real>(a: &Matrix<T>) -> Result<Matrix<T>> {
    let n = a.rows();
    if a.cols() != n {
        return Err(Error::dims(format!("cholesky of {}x{} matrix", n, a.cols())));
    }
    let scale = a.as_slice().iter().fold(T::zero(), |m, &x| m.max(x.abs()));
    if !a.is_symmetric(T::lit(1e-10) * scale.max(T::one())) {
        return Err(Error::InvalidShape("cholesky input is not symmetric".into()));
    }
    let tol = T::lit(PD_TOLERANCE);
    let mut g = Matrix::zeros(n, n);
    for j in 0..n {
        let mut d = a[(j, j)];
        for k in 0..j {
            d -= g[(j, k)] * g[(j, k)];
        }
        if !(d > tol) {
            return Err(Error::NotPositiveDefinite {
                index: j,
                pivot: d.to_f64_lossy(),
            });
        }
        let djj = d.sqrt();
        g[(j, j)] = djj;
        for i in (j + 1)..n {
            let mut s = a[(i, j)];
            for k in 0..j {
                s -= g[(i, k)] * g[(j, k)];
            }
            g[(i, j)] = s / djj;
        }
    }
    Ok(g)
}

/// Solves `g x = b` for lower-triangular `g`.
pub fn solve_lower<T: Real>(g: &Matrix<T>, b: &[T]) -> Vec<T> {
    let n = g.rows();
    let mut x = b.to_vec();
    for i in 0..n {
        let mut s = x[i];
        for k in 0..i {
            s -= g[(i, k)] * x[k];
        }
        x[i] = s / g[(i, i)];
    }
    x
}

/// Solves `gᵀ x = b` for lower-triangular `g`.
pub fn solve_lower_t<T: Real>(g: &Matrix<T>, b: &[T]) -> Vec<T> {
    let n = g.rows();
    let mut x = b.to_vec();
    for i in (0..n).rev() {
        let mut s = x[i];
        for k in (i + 1)..n {
            s -= g[(k, i)] * x[k];
        }
        x[i] = s / g[(i, i)];
    }
    x
}

/// Solves `a x = b` given the Cholesky factor of `a`.
pub fn cholesky_solve<T: Real>(g: &Matrix<T>, b: &[T]) -> Vec<T> {
    solve_lower_t(g, &solve_lower(g, b))
}

/// `log det a` from its Cholesky factor.
pub fn cholesky_logdet<T: Real>(g: &Matrix<T>) -> T {
    T::lit(2.0) * (0..g.rows()).map(|i| g[(i, i)].ln()).sum::<T>()
}

/// Inverse of a symmetric positive-definite matrix.
pub fn spd_inverse<T: Real>(a: &Matrix<T>) -> Result<Matrix<T>> {
    let g = cholesky(a)?;
    let n = a.rows();
    let mut inv = Matrix::zeros(n, n);
    let mut e = vec![T::zero(); n];
    for j in 0..n {
        e.iter_mut().for_each(|x| *x = T::zero());
        e[j] = T::one();
        let col = cholesky_solve(&g, &e);
        for i in 0..n {
            inv[(i, j)] = col[i];
        }
    }
    Ok(inv.symmetrize())
}

/// Symmetric eigenvalues by cyclic Jacobi rotations, ascending.
pub fn symmetric_eigenvalues<T: Real>(a: &Matrix<T>) -> Vec<T> {
    let n = a.rows();
    let mut m = a.symmetrize();
    for _sweep in 0..100 {
        let off: T = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| m[(i, j)] * m[(i, j)])
            .sum();
        if off <= T::lit(1e-30) * m.frobenius().powi(2).max(T::min_positive_value()) {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = m[(p, q)];
                if apq == T::zero() {
                    continue;
                }
                let theta = (m[(q, q)] - m[(p, p)]) / (T::lit(2.0) * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + T::one()).sqrt());
                let c = T::one() / (t * t + T::one()).sqrt();
                let s = t * c;
                for k in 0..n {
                    let mkp = m[(k, p)];
                    let mkq = m[(k, q)];
                    m[(k, p)] = c * mkp - s * mkq;
                    m[(k, q)] = s * mkp + c * mkq;
                }
                for k in 0..n {
                    let mpk = m[(p, k)];
                    let mqk = m[(q, k)];
                    m[(p, k)] = c * mpk - s * mqk;
                    m[(q, k)] = s * mpk + c * mqk;
                }
            }
        }
    }
    let mut ev: Vec<T> = (0..n).map(|i| m[(i, i)]).collect();
    ev.sort_by(|a, b| a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Equal));
    ev
}

/// Dense multivariate normal log-density via Cholesky.
pub fn dense_logpdf<T: Real>(obs: &[T], mean: &[T], cov: &Matrix<T>) -> Result<T> {
    if obs.len() != mean.len() || cov.rows() != obs.len() {
        return Err(Error::dims("dense_logpdf operand lengths differ"));
    }
    let g = cholesky(cov)?;
    let r: Vec<T> = obs.iter().zip(mean).map(|(&o, &m)| o - m).collect();
    let w = solve_lower(&g, &r);
    let quad = dot(&w, &w);
    let n = T::from_count(obs.len());
    Ok(-T::lit(0.5) * (n * (T::lit(2.0) * T::PI()).ln() + cholesky_logdet(&g) + quad))
}

/// Gaussian with covariance `loading * loadingᵀ + jitter * I`.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(bound = "T: Real")]
pub struct LowRankGaussian<T> {
    pub mean: Vec<T>,
    pub loading: Matrix<T>,
    pub jitter: T,
}

impl<T: Real> LowRankGaussian<T> {
    pub fn new(mean: Vec<T>, loading: Matrix<T>, jitter: T) -> Result<Self> {
        if loading.rows() != mean.len() {
            return Err(Error::dims(format!(
                "mean has length {} but loading has {} rows",
                mean.len(),
                loading.rows()
            )));
        }
        if !(jitter > T::zero()) || !jitter.is_finite() {
            return Err(Error::InvalidParams("jitter must be positive".into()));
        }
        Ok(Self { mean, loading, jitter })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn rank(&self) -> usize {
        self.loading.cols()
    }

    /// `jitter * I_q + loadingᵀ loading`.
    fn capacitance(&self) -> Matrix<T> {
        self.loading.t_matmul(&self.loading).add_diag(self.jitter)
    }

    /// `log det(ΦΦᵀ + σ²I) = (m−q) log σ² + log det(σ²I_q + ΦᵀΦ)`.
    pub fn log_det(&self) -> Result<T> {
        let g = cholesky(&self.capacitance())?;
        let (m, q) = (self.dim(), self.rank());
        Ok((T::from_count(m) - T::from_count(q)) * self.jitter.ln() + cholesky_logdet(&g))
    }

    /// Log-density evaluated through the Woodbury identity.
    pub fn logpdf(&self, obs: &[T]) -> Result<T> {
        if obs.len() != self.dim() {
            return Err(Error::dims(format!(
                "observation has length {}, model has dimension {}",
                obs.len(),
                self.dim()
            )));
        }
        let g = cholesky(&self.capacitance())?;
        let (m, q) = (self.dim(), self.rank());
        let r: Vec<T> = obs.iter().zip(&self.mean).map(|(&o, &mu)| o - mu).collect();
        let proj = self.loading.t_matvec(&r);
        let w = solve_lower(&g, &proj);
        let quad = (dot(&r, &r) - dot(&w, &w)) / self.jitter;
        // rank may exceed the dimension, so no `m - q` in usize
        let logdet = (T::from_count(m) - T::from_count(q)) * self.jitter.ln() + cholesky_logdet(&g);
        let mt = T::from_count(m);
        Ok(-T::lit(0.5) * (mt * (T::lit(2.0) * T::PI()).ln() + logdet + quad))
    }

    pub fn dense_covariance(&self) -> Matrix<T> {
        self.loading.matmul_t(&self.loading).add_diag(self.jitter)
    }
}

/// Name of the pseudo-random generator used everywhere in the crate.
pub const RNG_ALGORITHM: &str = "chacha8";

/// Seeded ChaCha8 stream. Identical seeds give identical streams.
#[derive(Clone, Debug)]
pub struct SeededRng {
    seed: u64,
    inner: ChaCha8Rng,
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

impl SeededRng {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            inner: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn algorithm(&self) -> &'static str {
        RNG_ALGORITHM
    }

    /// Independent named stream derived from this generator's seed.
    ///
    /// Does not advance `self`.
    pub fn fork(&self, name: &str) -> SeededRng {
        // FNV-1a over the stream name
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for b in name.bytes() {
            h ^= u64::from(b);
            h = h.wrapping_mul(0x0100_0000_01b3);
        }
        SeededRng::new(splitmix64(self.seed ^ splitmix64(h)))
    }

    /// Independent indexed stream, for per-member or per-seed generators.
    pub fn fork_index(&self, name: &str, index: u64) -> SeededRng {
        let base = self.fork(name);
        SeededRng::new(splitmix64(base.seed.wrapping_add(splitmix64(index))))
    }

    pub fn standard_normal<T: Real>(&mut self) -> T {
        let x: f64 = StandardNormal.sample(&mut self.inner);
        T::lit(x)
    }

    /// Uniform on `[0, 1)`.
    pub fn uniform<T: Real>(&mut self) -> T {
        T::lit(self.inner.random::<f64>())
    }

    /// Uniform index in `0..n`.
    pub fn index(&mut self, n: usize) -> usize {
        self.inner.random_range(0..n)
    }

    /// Fisher–Yates shuffle.
    pub fn shuffle<X>(&mut self, xs: &mut [X]) {
        for i in (1..xs.len()).rev() {
            let j = self.inner.random_range(0..=i);
            xs.swap(i, j);
        }
    }

    pub fn permutation(&mut self, n: usize) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..n).collect();
        self.shuffle(&mut idx);
        idx
    }

    /// Gamma variate with the given shape and unit scale.
    pub fn gamma(&mut self, shape: f64) -> f64 {
        rand_distr::Gamma::new(shape, 1.0)
            .expect("gamma shape must be positive")
            .sample(&mut self.inner)
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }
}

/// `rows x cols` matrix of i.i.d. standard normal entries.
pub fn sample_std_normal<T: Real>(rng: &mut SeededRng, rows: usize, cols: usize) -> Result<Matrix<T>> {
    if rows == 0 || cols == 0 {
        return Err(Error::InvalidShape(format!("cannot sample a {rows}x{cols} matrix")));
    }
    let data = (0..rows * cols).map(|_| rng.standard_normal()).collect();
    Matrix::new(rows, cols, data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn random_spd(rng: &mut SeededRng, n: usize) -> Matrix<f64> {
        let a: Matrix<f64> = sample_std_normal(rng, n, n).unwrap();
        a.matmul_t(&a).add_diag(0.5)
    }

    #[test]
    fn cholesky_identity() {
        let i = Matrix::<f64>::identity(3);
        assert_eq!(cholesky(&i).unwrap(), i);
    }

    #[test]
    fn cholesky_two_by_two() {
        let a = Matrix::from_rows(&[vec![4.0, 2.0], vec![2.0, 3.0]]).unwrap();
        let g = cholesky(&a).unwrap();
        let expected = Matrix::from_rows(&[vec![2.0, 0.0], vec![1.0, 2f64.sqrt()]]).unwrap();
        assert!(g.max_abs_diff(&expected) < 1e-15);
        assert!(g.matmul_t(&g).max_abs_diff(&a) < 1e-14);
    }

    #[test]
    fn cholesky_rejects_indefinite() {
        let a = Matrix::from_rows(&[vec![1.0, 2.0], vec![2.0, 1.0]]).unwrap();
        assert!(matches!(cholesky(&a), Err(Error::NotPositiveDefinite { .. })));
    }

    #[test]
    fn cholesky_rejects_non_square() {
        let a = Matrix::<f64>::zeros(2, 3);
        assert!(matches!(cholesky(&a), Err(Error::DimensionMismatch(_))));
    }

    #[test]
    fn logpdf_standard_normal_at_mode() {
        let g = LowRankGaussian::new(vec![0.0], Matrix::zeros(1, 0), 1.0).unwrap();
        let lp = g.logpdf(&[0.0]).unwrap();
        assert!((lp - (-0.5 * (2.0 * std::f64::consts::PI).ln())).abs() < 1e-15);
        assert!((lp + 0.91894).abs() < 1e-5);
    }

    #[test]
    fn logpdf_rank_one_pair() {
        let phi = Matrix::from_rows(&[vec![1.0], vec![1.0]]).unwrap();
        let g = LowRankGaussian::new(vec![0.0, 0.0], phi, 1.0).unwrap();
        let lp = g.logpdf(&[0.0, 0.0]).unwrap();
        let expected = -(2.0 * std::f64::consts::PI).ln() - 0.5 * 3f64.ln();
        assert!((lp - expected).abs() < 1e-14);
        assert!((lp + 2.38718).abs() < 1e-5);
    }

    #[test]
    fn logpdf_dimension_mismatch() {
        let g = LowRankGaussian::new(vec![0.0, 0.0], Matrix::zeros(2, 1), 1.0).unwrap();
        assert!(matches!(g.logpdf(&[0.0]), Err(Error::DimensionMismatch(_))));
    }

    #[test]
    fn logpdf_matches_dense_m5_q2() {
        let mut rng = SeededRng::new(11);
        let phi: Matrix<f64> = sample_std_normal(&mut rng, 5, 2).unwrap();
        let mean: Vec<f64> = (0..5).map(|_| rng.standard_normal()).collect();
        let obs: Vec<f64> = (0..5).map(|_| rng.standard_normal()).collect();
        let g = LowRankGaussian::new(mean.clone(), phi, 0.3).unwrap();
        let dense = dense_logpdf(&obs, &mean, &g.dense_covariance()).unwrap();
        assert!((g.logpdf(&obs).unwrap() - dense).abs() < 1e-9);
    }

    #[test]
    fn sampling_is_deterministic() {
        let a: Matrix<f64> = sample_std_normal(&mut SeededRng::new(5), 4, 3).unwrap();
        let b: Matrix<f64> = sample_std_normal(&mut SeededRng::new(5), 4, 3).unwrap();
        assert_eq!(a.as_slice(), b.as_slice());
    }

    #[test]
    fn sampling_moments() {
        let x: Matrix<f64> = sample_std_normal(&mut SeededRng::new(1), 100_000, 1).unwrap();
        let n = x.rows() as f64;
        let mean = x.as_slice().iter().sum::<f64>() / n;
        let var = x.as_slice().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        assert!(mean.abs() < 0.02, "mean {mean}");
        assert!((var - 1.0).abs() < 0.05, "var {var}");
    }

    #[test]
    fn sampling_rejects_empty_shape() {
        let r: Result<Matrix<f64>> = sample_std_normal(&mut SeededRng::new(0), 0, 3);
        assert!(matches!(r, Err(Error::InvalidShape(_))));
    }

    #[test]
    fn forks_are_distinct_and_stable() {
        let root = SeededRng::new(42);
        let mut a = root.fork("teacher");
        let mut b = root.fork("teacher");
        let mut c = root.fork("design");
        assert_eq!(a.next_u64(), b.next_u64());
        assert_ne!(root.fork("teacher").next_u64(), c.next_u64());
    }

    #[test]
    fn kron_shape_and_entries() {
        let a = Matrix::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        let b = Matrix::from_rows(&[vec![0.0, 5.0]]).unwrap();
        let k = kron(&a, &b);
        assert_eq!(k.shape(), (2, 4));
        assert_eq!(k.row(1), &[0.0, 15.0, 0.0, 20.0]);
    }

    #[test]
    fn spd_inverse_roundtrip() {
        let mut rng = SeededRng::new(3);
        let a = random_spd(&mut rng, 4);
        let inv = spd_inverse(&a).unwrap();
        assert!(a.matmul(&inv).max_abs_diff(&Matrix::identity(4)) < 1e-10);
    }

    #[test]
    fn jacobi_eigenvalues() {
        let a = Matrix::from_rows(&[vec![2.0_f64, 1.0], vec![1.0, 2.0]]).unwrap();
        let ev = symmetric_eigenvalues(&a);
        assert!((ev[0] - 1.0).abs() < 1e-12 && (ev[1] - 3.0).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn cholesky_reconstructs(seed in any::<u64>(), n in 1usize..8) {
            let a = random_spd(&mut SeededRng::new(seed), n);
            let g = cholesky(&a).unwrap();
            for i in 0..n {
                for j in (i + 1)..n {
                    prop_assert_eq!(g[(i, j)], 0.0);
                }
            }
            let err = g.matmul_t(&g).sub(&a).frobenius() / a.frobenius();
            prop_assert!(err < 1e-10);
        }

        #[test]
        fn woodbury_matches_dense(seed in any::<u64>(), m in 1usize..=8, q in 0usize..4, jitter in 0.05f64..3.0) {
            let mut rng = SeededRng::new(seed);
            let q = q.min(m);
            let phi = if q == 0 { Matrix::zeros(m, 0) } else { sample_std_normal(&mut rng, m, q).unwrap() };
            let mean: Vec<f64> = (0..m).map(|_| rng.standard_normal()).collect();
            let obs: Vec<f64> = (0..m).map(|_| 2.0 * rng.standard_normal::<f64>()).collect();
            let g = LowRankGaussian::new(mean.clone(), phi, jitter).unwrap();
            let cov = g.dense_covariance();
            let dense = dense_logpdf(&obs, &mean, &cov).unwrap();
            prop_assert!((g.logpdf(&obs).unwrap() - dense).abs() < 1e-9);
            let dense_logdet = cholesky_logdet(&cholesky(&cov).unwrap());
            prop_assert!((g.log_det().unwrap() - dense_logdet).abs() < 1e-9);
        }
    }
}
