//! Reference computations for the integration tests, written against plain
//! nested vectors so they share no code with the library's linear algebra.
#![allow(dead_code)]

use dlf_core::numerics::{Matrix, SeededRng};

pub type Dense = Vec<Vec<f64>>;

pub fn to_dense(m: &Matrix<f64>) -> Dense {
    (0..m.rows()).map(|i| m.row(i).to_vec()).collect()
}

pub fn zeros(r: usize, c: usize) -> Dense {
    vec![vec![0.0; c]; r]
}

pub fn eye(n: usize) -> Dense {
    let mut a = zeros(n, n);
    for (i, row) in a.iter_mut().enumerate() {
        row[i] = 1.0;
    }
    a
}

pub fn mul(a: &Dense, b: &Dense) -> Dense {
    let (r, k, c) = (a.len(), b.len(), b.first().map_or(0, Vec::len));
    let mut out = zeros(r, c);
    for i in 0..r {
        for t in 0..k {
            for j in 0..c {
                out[i][j] += a[i][t] * b[t][j];
            }
        }
    }
    out
}

pub fn transpose(a: &Dense) -> Dense {
    let c = a.first().map_or(0, Vec::len);
    (0..c).map(|j| a.iter().map(|row| row[j]).collect()).collect()
}

pub fn add(a: &Dense, b: &Dense) -> Dense {
    a.iter()
        .zip(b)
        .map(|(x, y)| x.iter().zip(y).map(|(p, q)| p + q).collect())
        .collect()
}

pub fn scale(a: &Dense, s: f64) -> Dense {
    a.iter().map(|r| r.iter().map(|v| v * s).collect()).collect()
}

pub fn mat_vec(a: &Dense, v: &[f64]) -> Vec<f64> {
    a.iter().map(|r| r.iter().zip(v).map(|(x, y)| x * y).sum()).collect()
}

/// Inverse and log-determinant by Gauss–Jordan elimination with partial pivoting.
pub fn inverse_logdet(a: &Dense) -> (Dense, f64) {
    let n = a.len();
    let mut m: Dense = a.clone();
    let mut inv = eye(n);
    let mut logdet = 0.0;
    for col in 0..n {
        let piv = (col..n)
            .max_by(|&i, &j| m[i][col].abs().partial_cmp(&m[j][col].abs()).unwrap())
            .unwrap();
        m.swap(col, piv);
        inv.swap(col, piv);
        let p = m[col][col];
        assert!(p.abs() > 1e-300, "singular matrix in oracle");
        logdet += p.abs().ln();
        for j in 0..n {
            m[col][j] /= p;
            inv[col][j] /= p;
        }
        for i in 0..n {
            if i != col {
                let f = m[i][col];
                if f != 0.0 {
                    for j in 0..n {
                        m[i][j] -= f * m[col][j];
                        inv[i][j] -= f * inv[col][j];
                    }
                }
            }
        }
    }
    (inv, logdet)
}

pub fn gauss_logpdf(x: &[f64], mean: &[f64], cov: &Dense) -> f64 {
    let (inv, logdet) = inverse_logdet(cov);
    let d: Vec<f64> = x.iter().zip(mean).map(|(a, b)| a - b).collect();
    let quad: f64 = d.iter().zip(mat_vec(&inv, &d)).map(|(a, b)| a * b).sum();
    -0.5 * (x.len() as f64 * (2.0 * std::f64::consts::PI).ln() + logdet + quad)
}

/// Conditional law of `z` given `y` for the joint Gaussian
/// `z ~ N(0, I)`, `y = mean + B z + e`, `e ~ N(0, s2 I)`.
pub fn condition(mean: &[f64], b: &Dense, s2: f64, y: &[f64]) -> (Vec<f64>, Dense) {
    let syy = add(&mul(b, &transpose(b)), &scale(&eye(b.len()), s2));
    let (syy_inv, _) = inverse_logdet(&syy);
    let szy = transpose(b);
    let gain = mul(&szy, &syy_inv);
    let d: Vec<f64> = y.iter().zip(mean).map(|(a, c)| a - c).collect();
    let post_mean = mat_vec(&gain, &d);
    let r = szy.len();
    let post_cov = add(&eye(r), &scale(&mul(&gain, b), -1.0));
    (post_mean, post_cov)
}

/// Entry-by-entry Kronecker product.
pub fn kron(a: &Dense, b: &Dense) -> Dense {
    let (ar, ac, br, bc) = (a.len(), a[0].len(), b.len(), b[0].len());
    let mut out = zeros(ar * br, ac * bc);
    for i in 0..ar {
        for j in 0..ac {
            for k in 0..br {
                for l in 0..bc {
                    out[i * br + k][j * bc + l] = a[i][j] * b[k][l];
                }
            }
        }
    }
    out
}

pub fn random(rng: &mut SeededRng, r: usize, c: usize, s: f64) -> Matrix<f64> {
    Matrix::from_fn(r, c, |_, _| s * rng.standard_normal::<f64>())
}

pub fn max_abs(a: &Dense, b: &Dense) -> f64 {
    a.iter()
        .flatten()
        .zip(b.iter().flatten())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

pub fn frob(a: &Dense) -> f64 {
    a.iter().flatten().map(|v| v * v).sum::<f64>().sqrt()
}

/// Adaptive Simpson quadrature on `[a, b]`.
pub fn integrate(f: &dyn Fn(f64) -> f64, a: f64, b: f64, tol: f64) -> f64 {
    fn simpson(f: &dyn Fn(f64) -> f64, a: f64, fa: f64, b: f64, fb: f64) -> (f64, f64, f64) {
        let m = 0.5 * (a + b);
        let fm = f(m);
        (m, fm, (b - a) / 6.0 * (fa + 4.0 * fm + fb))
    }
    #[allow(clippy::too_many_arguments)]
    fn rec(
        f: &dyn Fn(f64) -> f64,
        a: f64,
        fa: f64,
        b: f64,
        fb: f64,
        m: f64,
        fm: f64,
        whole: f64,
        tol: f64,
        depth: u32,
    ) -> f64 {
        let (lm, flm, left) = simpson(f, a, fa, m, fm);
        let (rm, frm, right) = simpson(f, m, fm, b, fb);
        let delta = left + right - whole;
        if depth == 0 || delta.abs() <= 15.0 * tol {
            return left + right + delta / 15.0;
        }
        rec(f, a, fa, m, fm, lm, flm, left, tol / 2.0, depth - 1)
            + rec(f, m, fm, b, fb, rm, frm, right, tol / 2.0, depth - 1)
    }
    let (fa, fb) = (f(a), f(b));
    let (m, fm, whole) = simpson(f, a, fa, b, fb);
    rec(f, a, fa, b, fb, m, fm, whole, tol, 50)
}

/// CRPS by integrating `(F(t) − 1{t ≥ y})²` over the real line.
pub fn crps_by_quadrature(means: &[f64], sds: &[f64], y: f64) -> f64 {
    let w = 1.0 / means.len() as f64;
    let cdf = |t: f64| -> f64 {
        means
            .iter()
            .zip(sds)
            .map(|(m, s)| 0.5 * libm::erfc(-(t - m) / (s * std::f64::consts::SQRT_2)))
            .sum::<f64>()
            * w
    };
    let lo = means.iter().zip(sds).map(|(m, s)| m - 12.0 * s).fold(y, f64::min);
    let hi = means.iter().zip(sds).map(|(m, s)| m + 12.0 * s).fold(y, f64::max);
    let left = integrate(&|t| cdf(t).powi(2), lo, y, 1e-12);
    let right = integrate(&|t| (1.0 - cdf(t)).powi(2), y, hi, 1e-12);
    left + right
}

/// Synthetic univariate DLF ground truth on `m` points of `[-2, 2]`.
pub struct SyntheticDlf {
    pub x: Vec<f64>,
    pub mu: Vec<f64>,
    /// `m x 3`.
    pub phi: Dense,
    pub jitter: f64,
    /// `m x n`, one draw per column.
    pub pred: Matrix<f64>,
}

impl SyntheticDlf {
    pub fn covariance(&self) -> Dense {
        add(
            &mul(&self.phi, &transpose(&self.phi)),
            &scale(&eye(self.x.len()), self.jitter),
        )
    }
}

pub fn synthetic_dlf(m: usize, n: usize, jitter: f64, seed: u64) -> SyntheticDlf {
    let x: Vec<f64> = (0..m).map(|j| -2.0 + 4.0 * j as f64 / (m - 1) as f64).collect();
    let mu: Vec<f64> = x.iter().map(|v| v.sin()).collect();
    let phi: Dense = x
        .iter()
        .map(|&v| vec![1.0 + 0.3 * v.sin(), 0.4 * (1.3 * v).sin(), 0.25 * (1.7 * v).cos()])
        .collect();
    let mut rng = SeededRng::new(seed);
    let mut pred = Matrix::zeros(m, n);
    for i in 0..n {
        let z: Vec<f64> = (0..3).map(|_| rng.standard_normal()).collect();
        for j in 0..m {
            let f: f64 = mu[j] + (0..3).map(|k| phi[j][k] * z[k]).sum::<f64>();
            pred[(j, i)] = f + jitter.sqrt() * rng.standard_normal::<f64>();
        }
    }
    SyntheticDlf {
        x,
        mu,
        phi,
        jitter,
        pred,
    }
}
