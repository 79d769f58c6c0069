//! Matrix-variate deep latent factor student for `c`-class logits.
//!
//! The network has `c + q` outputs: `μ(x) ∈ ℝᶜ` then `φ(x) ∈ ℝ^q`. A member
//! is `f(x) = μ(x) + L Z φ(x)` with `Z` a `c x q` standard normal matrix and
//! `L` lower triangular. Stacking the `m` design points gives
//! `F = M + Φ Zᵀ Lᵀ` (`m x c`); with `vec` stacking columns,
//! `vec(F) = vec(M) + (L ⊗ Φ) vec(Zᵀ)` and `Cov vec(F) = LLᵀ ⊗ ΦΦᵀ + σ_f² I`.
//! Latent vectors are therefore stored as `u = vec(Zᵀ)`, so `u[k q + a] = Z[k][a]`.
//!
//! With `c = 1` the factor `L` is fixed at `[1]` and everything reduces to
//! the univariate model.

use serde::{Deserialize, Serialize};

use crate::design::DesignSet;
use crate::dlf::{
    latent_posterior_general, run_em, run_pretrain, EmConfig, EmTrace, FlatQ, LatentFactorModel, PosteriorStats,
    PretrainConfig, PretrainTrace,
};
use crate::error::{Error, Result};
use crate::network::{init_params, Activation, NetworkParams, NetworkSpec};
use crate::numerics::{sample_std_normal, LowRankGaussian, Matrix, SeededRng};
use crate::scalar::{sigmoid, softmax, softplus, softplus_inv, Real};
use crate::teacher::Standardizer;

pub const MULTI_FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Real")]
pub struct MultiDlfModel<T> {
    pub version: u32,
    pub params: NetworkParams<T>,
    pub log_jitter: T,
    pub classes: usize,
    pub q: usize,
    /// Packed lower triangle of `L`, row by row, diagonal before softplus.
    /// Empty when `classes == 1`.
    pub l_raw: Vec<T>,
    pub design: DesignSet<T>,
    pub standardizer: Standardizer<T>,
}

/// Mean rows and loadings at a set of inputs.
#[derive(Clone, Debug, PartialEq)]
pub struct MultiHeads<T> {
    /// `rows x c`.
    pub mu: Matrix<T>,
    /// `rows x q`.
    pub phi: Matrix<T>,
}

fn packed_len(c: usize) -> usize {
    if c == 1 {
        0
    } else {
        c * (c + 1) / 2
    }
}

fn packed_index(k: usize, l: usize) -> usize {
    k * (k + 1) / 2 + l
}

impl<T: Real> MultiDlfModel<T> {
    /// Fresh model with `L = I`.
    #[allow(clippy::too_many_arguments)]
    pub fn init(
        hidden: Vec<usize>,
        activation: Activation,
        classes: usize,
        q: usize,
        design: DesignSet<T>,
        standardizer: Standardizer<T>,
        initial_jitter: T,
        rng: &mut SeededRng,
    ) -> Result<Self> {
        if q == 0 || classes == 0 {
            return Err(Error::ConfigInvalid("need q >= 1 and at least one class".into()));
        }
        if !(initial_jitter > T::zero()) {
            return Err(Error::ConfigInvalid("initial jitter must be positive".into()));
        }
        let spec = NetworkSpec::new(design.dim(), hidden, classes + q).with_activation(activation);
        let params = init_params(&spec, rng)?;
        let mut l_raw = vec![T::zero(); packed_len(classes)];
        if classes > 1 {
            for k in 0..classes {
                l_raw[packed_index(k, k)] = softplus_inv(T::one());
            }
        }
        Ok(Self {
            version: MULTI_FORMAT_VERSION,
            params,
            log_jitter: initial_jitter.ln(),
            classes,
            q,
            l_raw,
            design,
            standardizer,
        })
    }

    pub fn jitter(&self) -> T {
        self.log_jitter.exp()
    }

    /// The `c x c` lower-triangular factor.
    pub fn l_matrix(&self) -> Matrix<T> {
        let c = self.classes;
        if c == 1 {
            return Matrix::identity(1);
        }
        Matrix::from_fn(c, c, |k, l| {
            if l > k {
                T::zero()
            } else if l == k {
                softplus(self.l_raw[packed_index(k, k)])
            } else {
                self.l_raw[packed_index(k, l)]
            }
        })
    }

    pub fn heads(&self, x: &Matrix<T>) -> Result<MultiHeads<T>> {
        let out = self.params.forward_batch(x)?;
        Ok(split_multi(&out, self.classes))
    }

    fn flat(&self) -> Vec<T> {
        let mut v = self.params.values.clone();
        v.push(self.log_jitter);
        v.extend_from_slice(&self.l_raw);
        v
    }

    fn set_flat(&mut self, v: &[T]) {
        let n = self.params.values.len();
        self.params.values.copy_from_slice(&v[..n]);
        self.log_jitter = v[n];
        self.l_raw.copy_from_slice(&v[n + 1..]);
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let m: Self = serde_json::from_str(s)?;
        if m.version != MULTI_FORMAT_VERSION {
            return Err(Error::Version {
                found: m.version,
                expected: MULTI_FORMAT_VERSION,
            });
        }
        if m.params.spec.output_dim != m.classes + m.q || m.l_raw.len() != packed_len(m.classes) {
            return Err(Error::InvalidParams("inconsistent multivariate model shapes".into()));
        }
        NetworkParams::from_values(m.params.spec.clone(), m.params.values.clone())?;
        Ok(m)
    }
}

fn split_multi<T: Real>(out: &Matrix<T>, c: usize) -> MultiHeads<T> {
    MultiHeads {
        mu: out.col_range(0, c),
        phi: out.col_range(c, out.cols()),
    }
}

/// `L ⊗ Φ`, the loading of `vec(F)` on `vec(Zᵀ)`.
pub fn kron_loading<T: Real>(l: &Matrix<T>, phi: &Matrix<T>) -> Matrix<T> {
    crate::numerics::kron(l, phi)
}

/// `N(vec M, LLᵀ ⊗ ΦΦᵀ + σ_f² I)` over `ℝ^{mc}` at the design points.
pub fn vec_observation_law<T: Real>(model: &MultiDlfModel<T>) -> Result<LowRankGaussian<T>> {
    let h = model.heads(&model.design.points)?;
    LowRankGaussian::new(
        h.mu.vec_col_major(),
        kron_loading(&model.l_matrix(), &h.phi),
        model.jitter(),
    )
}

fn check_logits<T: Real>(logits: &[Matrix<T>], m: usize, c: usize) -> Result<()> {
    if logits.is_empty() {
        return Err(Error::EmptyData("no teacher logits".into()));
    }
    for (i, f) in logits.iter().enumerate() {
        if f.shape() != (m, c) {
            return Err(Error::dims(format!(
                "teacher {i} logits are {}x{}, expected {m}x{c}",
                f.rows(),
                f.cols()
            )));
        }
    }
    Ok(())
}

/// Posterior of `u_i = vec(Z_iᵀ)` for every teacher, given heads at a batch.
///
/// `V = (I + (LᵀL ⊗ ΦᵀΦ)/σ²)⁻¹`, `E[u_i] = V vec(Φᵀ R_i L) / σ²`.
pub fn multi_posterior<T: Real>(
    mu: &Matrix<T>,
    phi: &Matrix<T>,
    l: &Matrix<T>,
    jitter: T,
    logits: &[Matrix<T>],
) -> Result<PosteriorStats<T>> {
    let (m, c) = mu.shape();
    check_logits(logits, m, c)?;
    let ltl = l.t_matmul(l);
    let ptp = phi.t_matmul(phi);
    let gram = crate::numerics::kron(&ltl, &ptp);
    let rhs: Vec<Vec<T>> = logits
        .iter()
        .map(|f| phi.t_matmul(&f.sub(mu)).matmul(l).vec_col_major())
        .collect();
    latent_posterior_general(&gram, jitter, &rhs)
}

/// E-step for a batch of design points; `logits[i]` is teacher `i`'s `m x c`
/// matrix over all design points.
pub fn e_step_vec<T: Real>(
    model: &MultiDlfModel<T>,
    logits: &[Matrix<T>],
    rows: &[usize],
) -> Result<PosteriorStats<T>> {
    check_logits(logits, model.design.len(), model.classes)?;
    if rows.is_empty() {
        return Err(Error::EmptyData("e-step on an empty batch".into()));
    }
    let h = model.heads(&model.design.points.select_rows(rows))?;
    let sub: Vec<Matrix<T>> = logits.iter().map(|f| f.select_rows(rows)).collect();
    multi_posterior(&h.mu, &h.phi, &model.l_matrix(), model.jitter(), &sub)
}

/// Expected complete-data log-likelihood for the matrix-variate model.
#[derive(Clone, Debug, PartialEq)]
pub struct MultiQEval<T> {
    pub value: T,
    /// `m x c`.
    pub d_mu: Matrix<T>,
    /// `m x q`.
    pub d_phi: Matrix<T>,
    /// `c x c`; only the lower triangle is meaningful.
    pub d_l: Matrix<T>,
    pub d_log_jitter: T,
    /// `n x cq`.
    pub d_means: Matrix<T>,
}

/// Latent mean of teacher `i` as the `c x q` matrix `Ē_i`.
fn mean_matrix<T: Real>(post: &PosteriorStats<T>, i: usize, c: usize, q: usize) -> Matrix<T> {
    Matrix::new(c, q, post.means.row(i).to_vec()).expect("posterior row has c*q entries")
}

pub fn multi_complete_data_q<T: Real>(
    mu: &Matrix<T>,
    phi: &Matrix<T>,
    l: &Matrix<T>,
    log_jitter: T,
    logits: &[Matrix<T>],
    post: &PosteriorStats<T>,
) -> Result<MultiQEval<T>> {
    let (m, c) = mu.shape();
    let q = phi.cols();
    let n = logits.len();
    check_logits(logits, m, c)?;
    if phi.rows() != m || l.shape() != (c, c) || post.means.shape() != (n, c * q) || post.cov.shape() != (c * q, c * q)
    {
        return Err(Error::dims("multivariate Q arguments have inconsistent shapes"));
    }
    let s2 = log_jitter.exp();
    let inv = T::one() / s2;
    let nf = T::from_count(n);
    let two_pi = T::lit(2.0) * T::PI();

    // Ā = n V + Σ u_i u_iᵀ
    let a_bar = post.means.t_matmul(&post.means).add(&post.cov.scale(nf));
    let ltl = l.t_matmul(l);
    let ptp = phi.t_matmul(phi);
    // B_ab = Σ_kl (LᵀL)_kl Ā[(k,a),(l,b)],  C_kl = Σ_ab (ΦᵀΦ)_ab Ā[(k,a),(l,b)]
    let mut b = Matrix::zeros(q, q);
    let mut cm = Matrix::zeros(c, c);
    for k in 0..c {
        for l2 in 0..c {
            for a in 0..q {
                for bb in 0..q {
                    let v = a_bar[(k * q + a, l2 * q + bb)];
                    b[(a, bb)] += ltl[(k, l2)] * v;
                    cm[(k, l2)] += ptp[(a, bb)] * v;
                }
            }
        }
    }

    let mut sq = T::zero();
    let mut d_mu = Matrix::zeros(m, c);
    let mut sum_rtphi_e = Matrix::zeros(c, c);
    let mut sum_e_lt_r = Matrix::zeros(m, q);
    let mut d_means = Matrix::zeros(n, c * q);
    for (i, f) in logits.iter().enumerate() {
        let e_i = mean_matrix(post, i, c, q);
        let r = f.sub(mu);
        // residual R_i − Φ Ē_iᵀ Lᵀ
        let resid = r.sub(&phi.matmul_t(&l.matmul(&e_i)));
        sq += resid.as_slice().iter().map(|&v| v * v).sum::<T>();
        d_mu = d_mu.add(&resid);
        sum_rtphi_e = sum_rtphi_e.add(&r.t_matmul(phi).matmul_t(&e_i));
        sum_e_lt_r = sum_e_lt_r.add(&r.matmul(l).matmul(&e_i));
        // ∂/∂Ē_i of the fit term, then the prior term −Ē_i
        let d_e = l.t_matmul(&resid.t_matmul(phi)).scale(inv).sub(&e_i);
        d_means.row_mut(i).copy_from_slice(d_e.as_slice());
    }
    // tr((LᵀL ⊗ ΦᵀΦ) V)
    let mut tr_v = T::zero();
    for k in 0..c {
        for l2 in 0..c {
            for a in 0..q {
                for bb in 0..q {
                    tr_v += ltl[(k, l2)] * ptp[(a, bb)] * post.cov[(l2 * q + bb, k * q + a)];
                }
            }
        }
    }
    let g = sq + nf * tr_v;
    let trace_s = nf * post.cov.trace() + post.means.as_slice().iter().map(|&v| v * v).sum::<T>();
    let mc = T::from_count(m * c);
    let value = -nf * mc / T::lit(2.0) * (two_pi * s2).ln()
        - nf * T::from_count(c * q) / T::lit(2.0) * two_pi.ln()
        - trace_s / T::lit(2.0)
        - g / (T::lit(2.0) * s2);

    let d_mu = d_mu.scale(inv);
    let d_phi = sum_e_lt_r.sub(&phi.matmul(&b)).scale(inv);
    let d_l = sum_rtphi_e.sub(&l.matmul(&cm)).scale(inv);
    let d_log_jitter = -nf * mc / T::lit(2.0) + g / (T::lit(2.0) * s2);
    Ok(MultiQEval {
        value,
        d_mu,
        d_phi,
        d_l,
        d_log_jitter,
        d_means,
    })
}

impl<T: Real> LatentFactorModel<T> for MultiDlfModel<T> {
    type Data = [Matrix<T>];

    fn design_len(&self) -> usize {
        self.design.len()
    }

    fn check_data(&self, data: &[Matrix<T>]) -> Result<()> {
        check_logits(data, self.design.len(), self.classes)
    }

    fn teacher_count(&self, data: &[Matrix<T>]) -> usize {
        data.len()
    }

    fn outputs_per_point(&self) -> usize {
        self.classes
    }

    fn latent_dim(&self) -> usize {
        self.classes * self.q
    }

    fn flat(&self) -> Vec<T> {
        MultiDlfModel::flat(self)
    }

    fn set_flat(&mut self, v: &[T]) {
        MultiDlfModel::set_flat(self, v)
    }

    fn posterior(&self, data: &[Matrix<T>], rows: &[usize]) -> Result<PosteriorStats<T>> {
        e_step_vec(self, data, rows)
    }

    fn q_flat(&self, data: &[Matrix<T>], rows: &[usize], post: &PosteriorStats<T>) -> Result<FlatQ<T>> {
        let x = self.design.points.select_rows(rows);
        let sub: Vec<Matrix<T>> = data.iter().map(|f| f.select_rows(rows)).collect();
        let l = self.l_matrix();
        let c = self.classes;
        let mut eval = None;
        let (_, mut flat) = self.params.forward_backward(&x, |out| {
            let h = split_multi(out, c);
            let qe = multi_complete_data_q(&h.mu, &h.phi, &l, self.log_jitter, &sub, post)?;
            let up = Matrix::from_fn(out.rows(), out.cols(), |j, k| {
                if k < c {
                    qe.d_mu[(j, k)]
                } else {
                    qe.d_phi[(j, k - c)]
                }
            });
            eval = Some(qe);
            Ok(up)
        })?;
        let qe = eval.expect("closure ran");
        flat.push(qe.d_log_jitter);
        if c > 1 {
            for k in 0..c {
                for l2 in 0..=k {
                    let idx = packed_index(k, l2);
                    let g = qe.d_l[(k, l2)];
                    flat.push(if k == l2 { g * sigmoid(self.l_raw[idx]) } else { g });
                }
            }
        }
        Ok(FlatQ {
            value: qe.value,
            flat,
            d_latent: qe.d_means,
        })
    }

    fn loglik(&self, data: &[Matrix<T>]) -> Result<T> {
        multi_observed_loglik(self, data)
    }
}

/// `Q` and its gradient, split by parameter group.
#[derive(Clone, Debug, PartialEq)]
pub struct MultiQGradient<T> {
    pub value: T,
    pub params: Vec<T>,
    pub log_jitter: T,
    /// Gradient in the packed pre-softplus entries of `L`.
    pub l_raw: Vec<T>,
}

/// `Q(θ′ | θ)` on a batch, where `post` came from `θ` and `model` holds `θ′`.
pub fn multi_q_objective<T: Real>(
    model: &MultiDlfModel<T>,
    logits: &[Matrix<T>],
    rows: &[usize],
    post: &PosteriorStats<T>,
) -> Result<MultiQGradient<T>> {
    check_logits(logits, model.design.len(), model.classes)?;
    let g = model.q_flat(logits, rows, post)?;
    let n = model.params.len();
    Ok(MultiQGradient {
        value: g.value,
        params: g.flat[..n].to_vec(),
        log_jitter: g.flat[n],
        l_raw: g.flat[n + 1..].to_vec(),
    })
}

/// `Σ_i log N(vec F_i; vec M, LLᵀ ⊗ ΦΦᵀ + σ_f² I)`.
pub fn multi_observed_loglik<T: Real>(model: &MultiDlfModel<T>, logits: &[Matrix<T>]) -> Result<T> {
    check_logits(logits, model.design.len(), model.classes)?;
    let law = vec_observation_law(model)?;
    let mut total = T::zero();
    for f in logits {
        total += law.logpdf(&f.vec_col_major())?;
    }
    Ok(total)
}

/// Fit by EM on per-teacher `m x c` logit matrices at the design points.
pub fn em_fit_multi<T: Real>(
    init: &MultiDlfModel<T>,
    logits: &[Matrix<T>],
    cfg: &EmConfig,
    rng: &mut SeededRng,
) -> Result<(MultiDlfModel<T>, EmTrace)> {
    run_em(init, logits, cfg, rng)
}

/// MMD-penalised pretraining with free `vec(Zᵀ)` latents.
pub fn mmd_pretrain_multi<T: Real>(
    init: &MultiDlfModel<T>,
    logits: &[Matrix<T>],
    cfg: &PretrainConfig,
    rng: &mut SeededRng,
) -> Result<(MultiDlfModel<T>, PretrainTrace)> {
    run_pretrain(init, logits, cfg, rng)
}

/// Fixed student draws `Z_s` shared by every input.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Real")]
pub struct MultiStudentEnsemble<T> {
    /// Each `c x q`.
    pub z: Vec<Matrix<T>>,
}

pub fn multi_student_ensemble<T: Real>(
    model: &MultiDlfModel<T>,
    count: usize,
    rng: &mut SeededRng,
) -> Result<MultiStudentEnsemble<T>> {
    if count == 0 {
        return Err(Error::ConfigInvalid(
            "student ensemble needs at least one member".into(),
        ));
    }
    let z = (0..count)
        .map(|_| sample_std_normal(rng, model.classes, model.q))
        .collect::<Result<_>>()?;
    Ok(MultiStudentEnsemble { z })
}

/// Member softmax rows at raw inputs: `result[point][member]`.
pub fn member_probs<T: Real>(
    model: &MultiDlfModel<T>,
    members: &MultiStudentEnsemble<T>,
    x: &Matrix<T>,
) -> Result<Vec<Vec<Vec<T>>>> {
    let h = model.heads(&model.standardizer.transform_features(x)?)?;
    let l = model.l_matrix();
    let lz: Vec<Matrix<T>> = members.z.iter().map(|z| l.matmul(z)).collect();
    Ok((0..x.rows())
        .map(|j| {
            let phi = h.phi.row(j);
            lz.iter()
                .map(|lzs| {
                    let shift = lzs.matvec(phi);
                    let logits: Vec<T> = h.mu.row(j).iter().zip(&shift).map(|(&a, &b)| a + b).collect();
                    softmax(&logits)
                })
                .collect()
        })
        .collect())
}

/// Averaged class probabilities from a fixed ensemble.
pub fn ensemble_probs<T: Real>(
    model: &MultiDlfModel<T>,
    members: &MultiStudentEnsemble<T>,
    x: &Matrix<T>,
) -> Result<Vec<Vec<T>>> {
    Ok(member_probs(model, members, x)?
        .iter()
        .map(|rows| crate::teacher::average_rows(rows))
        .collect())
}

/// Mean softmax over `count` sampled logit vectors at one raw input.
pub fn predictive_probs<T: Real>(
    model: &MultiDlfModel<T>,
    x: &[T],
    count: usize,
    rng: &mut SeededRng,
) -> Result<Vec<T>> {
    let members = multi_student_ensemble(model, count, rng)?;
    let row = Matrix::new(1, x.len(), x.to_vec())?;
    Ok(ensemble_probs(model, &members, &row)?.remove(0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::design::DesignStrategy;

    fn toy(c: usize, q: usize, m: usize, seed: u64) -> MultiDlfModel<f64> {
        let pts = Matrix::from_fn(m, 2, |i, j| ((i * 2 + j) as f64 * 0.7).sin());
        let design = DesignSet::new(pts.clone(), DesignStrategy::TeacherTrain).unwrap();
        let std = Standardizer::fit(&pts, None).unwrap();
        MultiDlfModel::init(
            vec![6],
            Activation::Tanh,
            c,
            q,
            design,
            std,
            0.2,
            &mut SeededRng::new(seed),
        )
        .unwrap()
    }

    #[test]
    fn packed_layout() {
        let mut m = toy(3, 2, 4, 1);
        m.l_raw = vec![0.0, 2.0, 0.0, 3.0, 4.0, 0.0];
        let l = m.l_matrix();
        let d = softplus(0.0);
        assert_eq!(l[(0, 0)], d);
        assert_eq!(l[(1, 0)], 2.0);
        assert_eq!(l[(2, 1)], 4.0);
        assert_eq!(l[(0, 2)], 0.0);
        assert_eq!(l[(2, 2)], d);
    }

    #[test]
    fn init_has_identity_factor() {
        let m = toy(3, 2, 4, 2);
        assert!(m.l_matrix().max_abs_diff(&Matrix::identity(3)) < 1e-12);
        assert!(toy(1, 2, 4, 2).l_raw.is_empty());
    }

    #[test]
    fn zero_loadings_give_prior_posterior() {
        let mu = Matrix::from_fn(3, 2, |i, j| (i + j) as f64);
        let phi = Matrix::zeros(3, 2);
        let l = Matrix::identity(2);
        let logits = vec![Matrix::from_fn(3, 2, |i, j| (i * j) as f64); 2];
        let post = multi_posterior(&mu, &phi, &l, 0.5, &logits).unwrap();
        assert_eq!(post.cov, Matrix::identity(4));
        assert_eq!(post.means, Matrix::zeros(2, 4));
    }

    #[test]
    fn zero_loadings_predict_softmax_of_mean() {
        let mut m = toy(3, 2, 4, 3);
        let hidden = m.params.spec.hidden[0];
        let out = m.params.output_layer_mut();
        for v in out.iter_mut() {
            *v = 0.0;
        }
        out[5 * hidden] = 1.0;
        out[5 * hidden + 1] = -0.5;
        let p = predictive_probs(&m, &[0.1, 0.2], 4, &mut SeededRng::new(0)).unwrap();
        let expect = softmax(&[1.0, -0.5, 0.0]);
        for (a, b) in p.iter().zip(&expect) {
            assert!((a - b).abs() < 1e-15);
        }
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn json_round_trip() {
        let m = toy(3, 2, 5, 4);
        let s = m.to_json().unwrap();
        let back = MultiDlfModel::<f64>::from_json(&s).unwrap();
        assert_eq!(back, m);
        assert_eq!(back.to_json().unwrap(), s);
    }

    #[test]
    fn logits_shape_checked() {
        let m = toy(2, 1, 3, 5);
        let bad = vec![Matrix::zeros(3, 3)];
        assert!(matches!(e_step_vec(&m, &bad, &[0]), Err(Error::DimensionMismatch(_))));
    }
}
