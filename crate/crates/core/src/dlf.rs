//! Univariate deep latent factor student.
//!
//! A network with `q + 1` outputs gives, at every input `x`, a mean `μ(x)`
//! (output 0) and a loading row `φ(x)ᵀ` (outputs `1..=q`). At the `m` design
//! points the teacher functions are modelled as
//! `f_i ~ N(μ, ΦΦᵀ + σ_f² I)`, i.e. `f_i = μ + Φ z_i + e` with
//! `z_i ~ N(0, I_q)` and `e ~ N(0, σ_f² I)`.

use serde::{Deserialize, Serialize};

use crate::design::DesignSet;
use crate::error::{Error, Result};
use crate::metrics::PredictiveMixture;
use crate::network::{adam_step, init_params, Activation, AdamConfig, AdamState, NetworkParams, NetworkSpec};
use crate::noise::NoiseModel;
use crate::numerics::{sample_std_normal, spd_inverse, LowRankGaussian, Matrix, SeededRng};
use crate::scalar::Real;
use crate::teacher::Standardizer;

pub const DLF_FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Real")]
pub struct DlfModel<T> {
    pub version: u32,
    pub params: NetworkParams<T>,
    /// `log σ_f²`, standardized target units.
    pub log_jitter: T,
    pub q: usize,
    pub design: DesignSet<T>,
    pub standardizer: Standardizer<T>,
    /// Distilled teacher noise variances, target units.
    pub noise: Option<NoiseModel<T>>,
}

/// Mean and loadings evaluated at a set of inputs.
#[derive(Clone, Debug, PartialEq)]
pub struct Heads<T> {
    pub mu: Vec<T>,
    /// `rows x q`.
    pub phi: Matrix<T>,
}

/// Split network outputs `[μ, φ₁..φ_q]` per row.
pub fn split_heads<T: Real>(out: &Matrix<T>) -> Heads<T> {
    Heads {
        mu: out.col_vec(0),
        phi: out.col_range(1, out.cols()),
    }
}

/// Initial jitter: one percent of the variance of all prediction entries.
pub fn initial_jitter<T: Real>(pred: &Matrix<T>) -> T {
    let n = T::from_count(pred.as_slice().len());
    let mean = pred.as_slice().iter().copied().sum::<T>() / n;
    let var = pred.as_slice().iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
    if var > T::zero() && var.is_finite() {
        T::lit(0.01) * var
    } else {
        T::lit(0.01)
    }
}

impl<T: Real> DlfModel<T> {
    /// Fresh student with He-initialised weights.
    pub fn init(
        hidden: Vec<usize>,
        activation: Activation,
        q: usize,
        design: DesignSet<T>,
        standardizer: Standardizer<T>,
        initial_jitter: T,
        rng: &mut SeededRng,
    ) -> Result<Self> {
        if q == 0 {
            return Err(Error::ConfigInvalid("latent dimension must be at least 1".into()));
        }
        if !(initial_jitter > T::zero()) {
            return Err(Error::ConfigInvalid("initial jitter must be positive".into()));
        }
        let spec = NetworkSpec::new(design.dim(), hidden, q + 1).with_activation(activation);
        let params = init_params(&spec, rng)?;
        Ok(Self {
            version: DLF_FORMAT_VERSION,
            params,
            log_jitter: initial_jitter.ln(),
            q,
            design,
            standardizer,
            noise: None,
        })
    }

    pub fn jitter(&self) -> T {
        self.log_jitter.exp()
    }

    /// Heads at rows of `x` (standardized features).
    pub fn heads(&self, x: &Matrix<T>) -> Result<Heads<T>> {
        Ok(split_heads(&self.params.forward_batch(x)?))
    }

    pub fn design_heads(&self) -> Result<Heads<T>> {
        self.heads(&self.design.points)
    }

    /// `N(μ, ΦΦᵀ + σ_f² I)` at the design points.
    pub fn observation_law(&self) -> Result<LowRankGaussian<T>> {
        let h = self.design_heads()?;
        LowRankGaussian::new(h.mu, h.phi, self.jitter())
    }

    fn flat(&self) -> Vec<T> {
        let mut v = self.params.values.clone();
        v.push(self.log_jitter);
        v
    }

    fn set_flat(&mut self, v: &[T]) {
        let n = self.params.values.len();
        self.params.values.copy_from_slice(&v[..n]);
        self.log_jitter = v[n];
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let m: Self = serde_json::from_str(s)?;
        if m.version != DLF_FORMAT_VERSION {
            return Err(Error::Version {
                found: m.version,
                expected: DLF_FORMAT_VERSION,
            });
        }
        if m.params.spec.output_dim != m.q + 1 || m.q == 0 {
            return Err(Error::InvalidParams("network outputs must equal q + 1".into()));
        }
        NetworkParams::from_values(m.params.spec.clone(), m.params.values.clone())?;
        Ok(m)
    }
}

/// Latent posterior given one set of heads.
#[derive(Clone, Debug, PartialEq)]
pub struct PosteriorStats<T> {
    /// `n x q`, row `i` is `E[z_i | f_i]`.
    pub means: Matrix<T>,
    /// Shared `q x q` posterior covariance.
    pub cov: Matrix<T>,
}

impl<T: Real> PosteriorStats<T> {
    /// `E[z_i z_iᵀ | f_i] = V + E_i E_iᵀ`.
    pub fn second_moment(&self, i: usize) -> Matrix<T> {
        let e = self.means.row(i);
        Matrix::from_fn(self.cov.rows(), self.cov.cols(), |a, b| self.cov[(a, b)] + e[a] * e[b])
    }
}

fn check_pred<T: Real>(pred: &Matrix<T>, m: usize) -> Result<()> {
    if pred.rows() != m {
        return Err(Error::dims(format!(
            "prediction matrix has {} rows for {} design points",
            pred.rows(),
            m
        )));
    }
    if pred.cols() == 0 {
        return Err(Error::EmptyData("prediction matrix has no teacher columns".into()));
    }
    Ok(())
}

/// Closed-form posterior of the latent factors.
///
/// `f` is `m x n` with one teacher per column. `V = (I + ΦᵀΦ/σ²)⁻¹` and
/// `E[z_i | f_i] = V Φᵀ (f_i − μ) / σ²`.
pub fn latent_posterior<T: Real>(mu: &[T], phi: &Matrix<T>, jitter: T, f: &Matrix<T>) -> Result<PosteriorStats<T>> {
    let m = phi.rows();
    if mu.len() != m || f.rows() != m {
        return Err(Error::dims("heads and predictions disagree on the number of points"));
    }
    let rhs: Vec<Vec<T>> = (0..f.cols())
        .map(|i| {
            let r: Vec<T> = (0..m).map(|j| f[(j, i)] - mu[j]).collect();
            phi.t_matvec(&r)
        })
        .collect();
    latent_posterior_general(&phi.t_matmul(phi), jitter, &rhs)
}

/// Posterior for `y_i = B u_i + e`, `u_i ~ N(0, I)`, `e ~ N(0, σ² I)`, from
/// `gram = BᵀB` and `rhs_i = Bᵀ y_i`.
pub(crate) fn latent_posterior_general<T: Real>(
    gram: &Matrix<T>,
    jitter: T,
    rhs: &[Vec<T>],
) -> Result<PosteriorStats<T>> {
    let r = gram.rows();
    let precision = gram.scale(T::one() / jitter).add_diag(T::one());
    let cov = spd_inverse(&precision).map_err(|_| Error::SingularPrecision)?;
    let mut means = Matrix::zeros(rhs.len(), r);
    for (i, b) in rhs.iter().enumerate() {
        let e = cov.matvec(b);
        for (dst, v) in means.row_mut(i).iter_mut().zip(e) {
            *dst = v / jitter;
        }
    }
    Ok(PosteriorStats { means, cov })
}

/// E-step on a subset of design points.
pub fn e_step<T: Real>(model: &DlfModel<T>, pred: &Matrix<T>, rows: &[usize]) -> Result<PosteriorStats<T>> {
    check_pred(pred, model.design.len())?;
    if rows.is_empty() {
        return Err(Error::EmptyData("e-step on an empty batch".into()));
    }
    let x = model.design.points.select_rows(rows);
    let h = model.heads(&x)?;
    latent_posterior(&h.mu, &h.phi, model.jitter(), &pred.select_rows(rows))
}

/// Expected complete-data log-likelihood and its partial derivatives.
#[derive(Clone, Debug, PartialEq)]
pub struct QEval<T> {
    pub value: T,
    pub d_mu: Vec<T>,
    /// `m x q`.
    pub d_phi: Matrix<T>,
    pub d_log_jitter: T,
    /// Derivative with respect to the posterior means, `n x q`. With a zero
    /// covariance this is the gradient in free latent vectors.
    pub d_means: Matrix<T>,
}

/// `Q = E[log p(f, z)]` under `post`, evaluated at heads `(μ, Φ)` and jitter.
///
/// With `post.cov = 0` this is the complete-data log-likelihood at
/// `z_i = post.means[i]`.
pub fn complete_data_q<T: Real>(
    mu: &[T],
    phi: &Matrix<T>,
    log_jitter: T,
    f: &Matrix<T>,
    post: &PosteriorStats<T>,
) -> Result<QEval<T>> {
    let (m, q) = phi.shape();
    let n = f.cols();
    if mu.len() != m || f.rows() != m || post.means.shape() != (n, q) || post.cov.shape() != (q, q) {
        return Err(Error::dims("Q arguments have inconsistent shapes"));
    }
    let s2 = log_jitter.exp();
    let two_pi = T::lit(2.0) * T::PI();
    let nf = T::from_count(n);
    let mf = T::from_count(m);

    // e_ij = f_ij − μ_j − φ_jᵀ E_i, stored m x n
    let fitted = phi.matmul_t(&post.means);
    let e = Matrix::from_fn(m, n, |j, i| f[(j, i)] - mu[j] - fitted[(j, i)]);

    let phi_v = phi.matmul(&post.cov);
    let quad_v: T = (0..m).map(|j| crate::numerics::dot(phi_v.row(j), phi.row(j))).sum();
    let g = e.as_slice().iter().map(|&v| v * v).sum::<T>() + nf * quad_v;
    let trace_s = nf * post.cov.trace() + post.means.as_slice().iter().map(|&v| v * v).sum::<T>();

    let value = -nf * mf / T::lit(2.0) * (two_pi * s2).ln()
        - nf * T::from_count(q) / T::lit(2.0) * two_pi.ln()
        - trace_s / T::lit(2.0)
        - g / (T::lit(2.0) * s2);

    let d_mu = (0..m).map(|j| e.row(j).iter().copied().sum::<T>() / s2).collect();
    let d_phi = e.matmul(&post.means).sub(&phi_v.scale(nf)).scale(T::one() / s2);
    let d_log_jitter = -nf * mf / T::lit(2.0) + g / (T::lit(2.0) * s2);
    let d_means = e.t_matmul(phi).scale(T::one() / s2).sub(&post.means);
    Ok(QEval {
        value,
        d_mu,
        d_phi,
        d_log_jitter,
        d_means,
    })
}

/// `Q` value with gradients in the flat parameter layout.
#[derive(Clone, Debug, PartialEq)]
pub struct QGradient<T> {
    pub value: T,
    /// `∂Q/∂θ` in the network's flat layout.
    pub params: Vec<T>,
    pub log_jitter: T,
}

fn upstream_from<T: Real>(d_mu: &[T], d_phi: &Matrix<T>) -> Matrix<T> {
    Matrix::from_fn(d_mu.len(), d_phi.cols() + 1, |j, k| {
        if k == 0 {
            d_mu[j]
        } else {
            d_phi[(j, k - 1)]
        }
    })
}

/// `Q(θ′ | θ)` on a batch of design points, where `post` came from `θ`
/// and `model` holds `θ′`.
pub fn q_objective<T: Real>(
    model: &DlfModel<T>,
    pred: &Matrix<T>,
    rows: &[usize],
    post: &PosteriorStats<T>,
) -> Result<QGradient<T>> {
    check_pred(pred, model.design.len())?;
    let x = model.design.points.select_rows(rows);
    let f = pred.select_rows(rows);
    let mut eval = None;
    let (_, grads) = model.params.forward_backward(&x, |out| {
        let h = split_heads(out);
        let q = complete_data_q(&h.mu, &h.phi, model.log_jitter, &f, post)?;
        let up = upstream_from(&q.d_mu, &q.d_phi);
        eval = Some((q.value, q.d_log_jitter));
        Ok(up)
    })?;
    let (value, log_jitter) = eval.expect("closure ran");
    Ok(QGradient {
        value,
        params: grads,
        log_jitter,
    })
}

/// Observed-data log-likelihood `Σ_i log N(f_i; μ, ΦΦᵀ + σ_f² I)`.
pub fn observed_loglik<T: Real>(model: &DlfModel<T>, pred: &Matrix<T>) -> Result<T> {
    check_pred(pred, model.design.len())?;
    let law = model.observation_law()?;
    let mut total = T::zero();
    for i in 0..pred.cols() {
        total += law.logpdf(&pred.col_vec(i))?;
    }
    Ok(total)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EmMode {
    /// Per-batch E-step followed by one gradient step, batch by batch.
    MiniBatch,
    /// Exact E-step on every design point, then gradient M-steps.
    FullBatch,
}

impl std::str::FromStr for EmMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mini-batch" | "minibatch" => Ok(EmMode::MiniBatch),
            "full-batch" | "fullbatch" => Ok(EmMode::FullBatch),
            _ => Err(Error::ConfigInvalid(format!("unknown EM mode `{s}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EmConfig {
    pub mode: EmMode,
    /// Design points per mini-batch; clamped to the design size.
    pub batch_size: usize,
    pub epochs: usize,
    pub lr: f64,
    /// Stop once the relative change of the log-likelihood between epochs
    /// falls below this.
    pub tol: f64,
    /// Full-batch only: accept an M-step only if it increases `Q`.
    pub gem_guard: bool,
    /// Full-batch only: gradient steps per M-step.
    pub m_steps: usize,
}

impl Default for EmConfig {
    fn default() -> Self {
        Self {
            mode: EmMode::MiniBatch,
            batch_size: 64,
            epochs: 200,
            lr: 1e-3,
            tol: 1e-6,
            gem_guard: true,
            m_steps: 1,
        }
    }
}

impl EmConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::ConfigInvalid("batch size must be positive".into()));
        }
        if !(self.tol > 0.0) {
            return Err(Error::ConfigInvalid("tolerance must be positive".into()));
        }
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return Err(Error::ConfigInvalid("learning rate must be positive".into()));
        }
        if self.m_steps == 0 {
            return Err(Error::ConfigInvalid("need at least one M-step".into()));
        }
        Ok(())
    }
}

/// Log-likelihood before the first epoch and after each completed epoch.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EmTrace {
    pub loglik: Vec<f64>,
    /// Full-batch guard: M-steps rejected after exhausting step halvings.
    pub rejected: usize,
}

fn converged(prev: f64, cur: f64, tol: f64) -> bool {
    (cur - prev).abs() <= tol * prev.abs().max(1e-300)
}

/// Number of step-size halvings the GEM guard tries before giving up.
const GEM_HALVINGS: usize = 12;

/// `Q` with its gradient over a model's full trainable vector.
pub(crate) struct FlatQ<T> {
    pub value: T,
    pub flat: Vec<T>,
    /// Gradient in the posterior means (free latents when `cov = 0`).
    pub d_latent: Matrix<T>,
}

/// What the shared EM and pretraining loops need from a latent factor model.
pub(crate) trait LatentFactorModel<T: Real>: Clone {
    type Data: ?Sized;

    fn design_len(&self) -> usize;
    fn check_data(&self, data: &Self::Data) -> Result<()>;
    fn teacher_count(&self, data: &Self::Data) -> usize;
    /// Observed values per design point (1 for regression, `c` otherwise).
    fn outputs_per_point(&self) -> usize;
    fn latent_dim(&self) -> usize;
    fn flat(&self) -> Vec<T>;
    fn set_flat(&mut self, v: &[T]);
    fn posterior(&self, data: &Self::Data, rows: &[usize]) -> Result<PosteriorStats<T>>;
    fn q_flat(&self, data: &Self::Data, rows: &[usize], post: &PosteriorStats<T>) -> Result<FlatQ<T>>;
    fn loglik(&self, data: &Self::Data) -> Result<T>;
}

impl<T: Real> LatentFactorModel<T> for DlfModel<T> {
    type Data = Matrix<T>;

    fn design_len(&self) -> usize {
        self.design.len()
    }

    fn check_data(&self, data: &Matrix<T>) -> Result<()> {
        check_pred(data, self.design.len())
    }

    fn teacher_count(&self, data: &Matrix<T>) -> usize {
        data.cols()
    }

    fn outputs_per_point(&self) -> usize {
        1
    }

    fn latent_dim(&self) -> usize {
        self.q
    }

    fn flat(&self) -> Vec<T> {
        DlfModel::flat(self)
    }

    fn set_flat(&mut self, v: &[T]) {
        DlfModel::set_flat(self, v)
    }

    fn posterior(&self, data: &Matrix<T>, rows: &[usize]) -> Result<PosteriorStats<T>> {
        e_step(self, data, rows)
    }

    fn q_flat(&self, data: &Matrix<T>, rows: &[usize], post: &PosteriorStats<T>) -> Result<FlatQ<T>> {
        let x = self.design.points.select_rows(rows);
        let f = data.select_rows(rows);
        let mut eval = None;
        let (_, mut flat) = self.params.forward_backward(&x, |out| {
            let h = split_heads(out);
            let q = complete_data_q(&h.mu, &h.phi, self.log_jitter, &f, post)?;
            let up = upstream_from(&q.d_mu, &q.d_phi);
            eval = Some(q);
            Ok(up)
        })?;
        let q = eval.expect("closure ran");
        flat.push(q.d_log_jitter);
        Ok(FlatQ {
            value: q.value,
            flat,
            d_latent: q.d_means,
        })
    }

    fn loglik(&self, data: &Matrix<T>) -> Result<T> {
        observed_loglik(self, data)
    }
}

/// Fit the student by EM on the `m x n` prediction matrix.
pub fn em_fit<T: Real>(
    init: &DlfModel<T>,
    pred: &Matrix<T>,
    cfg: &EmConfig,
    rng: &mut SeededRng,
) -> Result<(DlfModel<T>, EmTrace)> {
    run_em(init, pred, cfg, rng)
}

pub(crate) fn run_em<T: Real, M: LatentFactorModel<T>>(
    init: &M,
    data: &M::Data,
    cfg: &EmConfig,
    rng: &mut SeededRng,
) -> Result<(M, EmTrace)> {
    cfg.validate()?;
    init.check_data(data)?;
    let mut model = init.clone();
    let mut flat = model.flat();
    let mut state = AdamState::new(flat.len());
    let m = model.design_len();
    let per_point = model.teacher_count(data) * model.outputs_per_point();
    let mut trace = EmTrace::default();
    let mut ll = model.loglik(data)?.to_f64_lossy();
    trace.loglik.push(ll);
    let all: Vec<usize> = (0..m).collect();
    let mut step_scale = 1.0;

    for epoch in 0..cfg.epochs {
        match cfg.mode {
            EmMode::MiniBatch => {
                let batch = cfg.batch_size.min(m);
                let order = rng.permutation(m);
                for rows in order.chunks(batch) {
                    let post = model.posterior(data, rows)?;
                    let g = model.q_flat(data, rows, &post)?;
                    descend(&mut flat, &g, per_point * rows.len(), &mut state, cfg.lr, epoch)?;
                    model.set_flat(&flat);
                }
            }
            EmMode::FullBatch => {
                let post = model.posterior(data, &all)?;
                let q0 = model.q_flat(data, &all, &post)?.value;
                let start = (flat.clone(), state.clone());
                let mut accepted = !cfg.gem_guard;
                for attempt in 0..=GEM_HALVINGS {
                    for _ in 0..cfg.m_steps {
                        let g = model.q_flat(data, &all, &post)?;
                        descend(&mut flat, &g, per_point * m, &mut state, cfg.lr * step_scale, epoch)?;
                        model.set_flat(&flat);
                    }
                    if !cfg.gem_guard {
                        break;
                    }
                    let q1 = model.q_flat(data, &all, &post)?.value;
                    if q1.is_finite() && q1 >= q0 {
                        accepted = true;
                        if attempt == 0 {
                            step_scale = (step_scale * 2.0).min(1.0);
                        }
                        break;
                    }
                    flat.clone_from(&start.0);
                    state = start.1.clone();
                    model.set_flat(&flat);
                    step_scale *= 0.5;
                }
                if !accepted {
                    trace.rejected += 1;
                }
            }
        }
        let next = model.loglik(data)?.to_f64_lossy();
        if !next.is_finite() {
            return Err(Error::NonFiniteLoss(format!("EM epoch {epoch}")));
        }
        trace.loglik.push(next);
        if converged(ll, next, cfg.tol) {
            break;
        }
        ll = next;
    }
    Ok((model, trace))
}

/// Adam descent on `−Q / scale`.
fn descend<T: Real>(
    flat: &mut [T],
    g: &FlatQ<T>,
    scale: usize,
    state: &mut AdamState<T>,
    lr: f64,
    epoch: usize,
) -> Result<()> {
    if !g.value.is_finite() {
        return Err(Error::NonFiniteLoss(format!("EM epoch {epoch}")));
    }
    let s = -T::one() / T::from_count(scale);
    let grads: Vec<T> = g.flat.iter().map(|&v| v * s).collect();
    adam_step(flat, &grads, state, &AdamConfig::with_lr(lr))
}

/// RBF kernel `exp(−‖a − b‖² / (2γ²))`.
fn rbf<T: Real>(a: &[T], b: &[T], bandwidth: T) -> T {
    let d2: T = a.iter().zip(b).map(|(&x, &y)| (x - y) * (x - y)).sum();
    (-d2 / (T::lit(2.0) * bandwidth * bandwidth)).exp()
}

fn mean_kernel<T: Real>(x: &Matrix<T>, y: &Matrix<T>, bandwidth: T) -> T {
    let mut s = T::zero();
    for i in 0..x.rows() {
        for j in 0..y.rows() {
            s += rbf(x.row(i), y.row(j), bandwidth);
        }
    }
    s / T::from_count(x.rows() * y.rows())
}

/// Biased MMD estimate between the rows of `x` and `y`, as a distance
/// (square root of the clamped squared estimate).
pub fn mmd<T: Real>(x: &Matrix<T>, y: &Matrix<T>, bandwidth: T) -> Result<T> {
    if x.cols() != y.cols() {
        return Err(Error::dims("MMD samples differ in dimension"));
    }
    if x.rows() == 0 || y.rows() == 0 {
        return Err(Error::EmptyData("MMD needs samples on both sides".into()));
    }
    let sq = mean_kernel(x, x, bandwidth) + mean_kernel(y, y, bandwidth) - T::lit(2.0) * mean_kernel(x, y, bandwidth);
    Ok(sq.max(T::zero()).sqrt())
}

/// Median pairwise distance over the pooled rows; 1 if that is zero.
pub fn median_bandwidth<T: Real>(x: &Matrix<T>, y: &Matrix<T>) -> T {
    let rows: Vec<&[T]> = (0..x.rows())
        .map(|i| x.row(i))
        .chain((0..y.rows()).map(|i| y.row(i)))
        .collect();
    let mut d = Vec::with_capacity(rows.len() * rows.len() / 2);
    for i in 0..rows.len() {
        for j in i + 1..rows.len() {
            let d2: T = rows[i].iter().zip(rows[j]).map(|(&a, &b)| (a - b) * (a - b)).sum();
            d.push(d2.sqrt());
        }
    }
    if d.is_empty() {
        return T::one();
    }
    d.sort_by(|a, b| a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Equal));
    let med = d[d.len() / 2];
    if med > T::zero() {
        med
    } else {
        T::one()
    }
}

/// MMD and its gradient with respect to the rows of `z`, with `y` and the
/// bandwidth held fixed.
fn mmd_with_grad<T: Real>(z: &Matrix<T>, y: &Matrix<T>, bandwidth: T) -> (T, Matrix<T>) {
    let (n, q) = z.shape();
    let ny = y.rows();
    let g2 = bandwidth * bandwidth;
    let value = mmd(z, y, bandwidth).expect("shapes checked by caller");
    let mut grad = Matrix::zeros(n, q);
    if value <= T::lit(1e-12) {
        return (value, grad);
    }
    let nz2 = T::from_count(n * n);
    let nzy = T::from_count(n * ny);
    for a in 0..n {
        let za = z.row(a);
        for b in 0..n {
            let k = rbf(za, z.row(b), bandwidth);
            for c in 0..q {
                grad[(a, c)] -= T::lit(2.0) * k * (za[c] - z[(b, c)]) / (g2 * nz2);
            }
        }
        for b in 0..ny {
            let k = rbf(za, y.row(b), bandwidth);
            for c in 0..q {
                grad[(a, c)] += T::lit(2.0) * k * (za[c] - y[(b, c)]) / (g2 * nzy);
            }
        }
    }
    // d sqrt(s) = ds / (2 sqrt(s))
    (value, grad.scale(T::one() / (T::lit(2.0) * value)))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PretrainConfig {
    pub lambda: f64,
    pub epochs: usize,
    pub lr: f64,
    /// Standard deviation of the initial free latent vectors.
    pub z_init_scale: f64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            lambda: 1.0,
            epochs: 200,
            lr: 1e-2,
            z_init_scale: 0.1,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PretrainTrace {
    /// Penalized objective per epoch (per-entry complete log-likelihood minus λ·MMD).
    pub objective: Vec<f64>,
    pub mmd_initial: f64,
    pub mmd_final: f64,
}

/// Joint maximisation of `ℓ_com(θ, z)/(n·m·c) − λ·MMD(z, fresh N(0, I) draws)`
/// over the network, the jitter and free latent vectors. Returns the
/// network and jitter; the latent vectors are discarded.
pub fn mmd_pretrain<T: Real>(
    init: &DlfModel<T>,
    pred: &Matrix<T>,
    cfg: &PretrainConfig,
    rng: &mut SeededRng,
) -> Result<(DlfModel<T>, PretrainTrace)> {
    run_pretrain(init, pred, cfg, rng)
}

pub(crate) fn run_pretrain<T: Real, M: LatentFactorModel<T>>(
    init: &M,
    data: &M::Data,
    cfg: &PretrainConfig,
    rng: &mut SeededRng,
) -> Result<(M, PretrainTrace)> {
    if !(cfg.lambda >= 0.0) {
        return Err(Error::ConfigInvalid("MMD weight must be non-negative".into()));
    }
    init.check_data(data)?;
    let mut model = init.clone();
    let (m, n, r) = (model.design_len(), model.teacher_count(data), model.latent_dim());
    let lambda = T::lit(cfg.lambda);
    let mut z = sample_std_normal::<T>(rng, n, r)?.scale(T::lit(cfg.z_init_scale));
    let mut flat = model.flat();
    let theta_len = flat.len();
    flat.extend_from_slice(z.as_slice());
    let mut state = AdamState::new(flat.len());
    let adam = AdamConfig::with_lr(cfg.lr);
    let all: Vec<usize> = (0..m).collect();
    let norm = T::from_count(n * m * model.outputs_per_point());
    let zero_cov = Matrix::zeros(r, r);

    let reference = sample_std_normal::<T>(rng, n, r)?;
    let initial = mmd(&z, &reference, median_bandwidth(&z, &reference))?;
    let mut trace = PretrainTrace {
        mmd_initial: initial.to_f64_lossy(),
        ..PretrainTrace::default()
    };

    for epoch in 0..cfg.epochs {
        let post = PosteriorStats {
            means: z.clone(),
            cov: zero_cov.clone(),
        };
        let qe = model.q_flat(data, &all, &post)?;
        let mut objective = qe.value / norm;
        let mut d_z = qe.d_latent.scale(T::one() / norm);
        if cfg.lambda > 0.0 {
            let draws = sample_std_normal::<T>(rng, n, r)?;
            let bw = median_bandwidth(&z, &draws);
            let (d, dd) = mmd_with_grad(&z, &draws, bw);
            objective -= lambda * d;
            d_z = d_z.sub(&dd.scale(lambda));
        }
        if !objective.is_finite() {
            return Err(Error::NonFiniteLoss(format!("pretraining epoch {epoch}")));
        }
        trace.objective.push(objective.to_f64_lossy());

        let mut grads: Vec<T> = qe.flat.iter().map(|&g| -g / norm).collect();
        grads.extend(d_z.as_slice().iter().map(|&g| -g));
        adam_step(&mut flat, &grads, &mut state, &adam)?;
        model.set_flat(&flat[..theta_len]);
        z = Matrix::new(n, r, flat[theta_len..].to_vec())?;
    }
    let reference = sample_std_normal::<T>(rng, n, r)?;
    trace.mmd_final = mmd(&z, &reference, median_bandwidth(&z, &reference))?.to_f64_lossy();
    Ok((model, trace))
}

/// `S x |points|` matrix of sampled functions `μ(x) + Φ(x)ᵀ z_s`, standardized
/// target units. Jitter is not added.
pub fn sample_student_functions<T: Real>(
    model: &DlfModel<T>,
    points: &Matrix<T>,
    count: usize,
    rng: &mut SeededRng,
) -> Result<Matrix<T>> {
    if count == 0 {
        return Ok(Matrix::zeros(0, points.rows()));
    }
    let h = model.heads(points)?;
    let z = sample_std_normal::<T>(rng, count, model.q)?;
    let zphi = z.matmul_t(&h.phi);
    Ok(Matrix::from_fn(count, points.rows(), |s, j| h.mu[j] + zphi[(s, j)]))
}

/// A fixed draw of student members shared by every test input.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Real")]
pub struct StudentEnsemble<T> {
    /// `S x q` latent draws.
    pub z: Matrix<T>,
    /// Per-member observation-noise variance, target units.
    pub noise_vars: Vec<T>,
}

impl<T: Real> StudentEnsemble<T> {
    pub fn len(&self) -> usize {
        self.z.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.z.rows() == 0
    }
}

/// Draw `count` members: latent vectors from `N(0, I)` and noise variances
/// from `noise`. With `include_jitter`, `σ_f²` is added to each variance.
pub fn student_ensemble<T: Real>(
    model: &DlfModel<T>,
    noise: &NoiseModel<T>,
    count: usize,
    include_jitter: bool,
    rng: &mut SeededRng,
) -> Result<StudentEnsemble<T>> {
    if count == 0 {
        return Err(Error::ConfigInvalid(
            "student ensemble needs at least one member".into(),
        ));
    }
    let z = sample_std_normal::<T>(rng, count, model.q)?;
    let extra = if include_jitter {
        model.standardizer.inverse_variance(model.jitter())
    } else {
        T::zero()
    };
    let noise_vars = noise.sample(count, rng).into_iter().map(|v| v + extra).collect();
    Ok(StudentEnsemble { z, noise_vars })
}

/// Predictive mixtures in target units at raw inputs `x`.
pub fn ensemble_predictive<T: Real>(
    model: &DlfModel<T>,
    members: &StudentEnsemble<T>,
    x: &Matrix<T>,
) -> Result<Vec<PredictiveMixture<T>>> {
    let xs = model.standardizer.transform_features(x)?;
    let h = model.heads(&xs)?;
    let zphi = members.z.matmul_t(&h.phi);
    (0..x.rows())
        .map(|j| {
            let means = (0..members.len())
                .map(|s| model.standardizer.inverse_target(h.mu[j] + zphi[(s, j)]))
                .collect();
            PredictiveMixture::new(means, members.noise_vars.clone())
        })
        .collect()
}

/// `S`-component mixture at a single raw input.
pub fn predictive_mixture<T: Real>(
    model: &DlfModel<T>,
    noise: &NoiseModel<T>,
    x: &[T],
    count: usize,
    rng: &mut SeededRng,
) -> Result<PredictiveMixture<T>> {
    let members = student_ensemble(model, noise, count, false, rng)?;
    let row = Matrix::new(1, x.len(), x.to_vec())?;
    Ok(ensemble_predictive(model, &members, &row)?.remove(0))
}
