//! Teacher ensemble: training, noise-variance estimates, and predictions at
//! design points.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::design::DesignSet;
use crate::error::{Error, Result};
use crate::metrics::PredictiveMixture;
use crate::network::{adam_step, init_params, AdamConfig, AdamState, NetworkParams, NetworkSpec};
use crate::numerics::{Matrix, SeededRng};
use crate::scalar::{softmax, Real};

pub const TEACHER_FORMAT_VERSION: u32 = 1;
const NOISE_FLOOR: f64 = 1e-8;

/// Z-score transform fitted on training statistics.
///
/// Constant columns get unit scale so they map to zero instead of NaN.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Real")]
pub struct Standardizer<T> {
    pub feature_mean: Vec<T>,
    pub feature_scale: Vec<T>,
    pub target_mean: T,
    pub target_scale: T,
}

fn mean_and_scale<T: Real>(values: impl Iterator<Item = T> + Clone) -> (T, T) {
    let n = T::from_count(values.clone().count());
    let mean = values.clone().sum::<T>() / n;
    let var = values.map(|v| (v - mean) * (v - mean)).sum::<T>() / n;
    let sd = var.sqrt();
    (mean, if sd > T::lit(1e-12) { sd } else { T::one() })
}

impl<T: Real> Standardizer<T> {
    /// Fit on features, and on targets when given (identity otherwise).
    pub fn fit(features: &Matrix<T>, targets: Option<&[T]>) -> Result<Self> {
        if features.rows() == 0 {
            return Err(Error::EmptyData("cannot standardize zero rows".into()));
        }
        let (feature_mean, feature_scale) = (0..features.cols())
            .map(|j| mean_and_scale((0..features.rows()).map(|i| features[(i, j)])))
            .unzip();
        let (target_mean, target_scale) = match targets {
            Some(y) if !y.is_empty() => mean_and_scale(y.iter().copied()),
            _ => (T::zero(), T::one()),
        };
        Ok(Self {
            feature_mean,
            feature_scale,
            target_mean,
            target_scale,
        })
    }

    pub fn transform_features(&self, x: &Matrix<T>) -> Result<Matrix<T>> {
        if x.cols() != self.feature_mean.len() {
            return Err(Error::dims(format!(
                "standardizer fitted on {} features, got {}",
                self.feature_mean.len(),
                x.cols()
            )));
        }
        Ok(Matrix::from_fn(x.rows(), x.cols(), |i, j| {
            (x[(i, j)] - self.feature_mean[j]) / self.feature_scale[j]
        }))
    }

    pub fn transform_target(&self, y: T) -> T {
        (y - self.target_mean) / self.target_scale
    }

    pub fn inverse_target(&self, z: T) -> T {
        z * self.target_scale + self.target_mean
    }

    /// Variance in standardized units back to target units.
    pub fn inverse_variance(&self, v: T) -> T {
        v * self.target_scale * self.target_scale
    }
}

/// Training targets in raw units.
#[derive(Clone, Copy, Debug)]
pub enum Targets<'a, T> {
    Regression(&'a [T]),
    Classification { labels: &'a [usize], classes: usize },
}

impl<T> Targets<'_, T> {
    fn len(&self) -> usize {
        match self {
            Targets::Regression(y) => y.len(),
            Targets::Classification { labels, .. } => labels.len(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TeacherConfig {
    pub members: usize,
    pub hidden: Vec<usize>,
    pub activation: crate::network::Activation,
    pub epochs: usize,
    pub lr: f64,
    /// Mini-batch size; `None` trains on the full batch every step.
    pub batch_size: Option<usize>,
}

impl Default for TeacherConfig {
    fn default() -> Self {
        Self {
            members: 5,
            hidden: vec![100, 100],
            activation: crate::network::Activation::Relu,
            epochs: 100,
            lr: 1e-3,
            batch_size: Some(32),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Regression,
    Classification,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Real")]
pub struct TeacherEnsemble<T> {
    pub version: u32,
    pub task: Task,
    /// Each member carries its own spec and flat weights.
    pub members: Vec<NetworkParams<T>>,
    /// One estimate per member in target-variance units; empty for classification.
    pub noise_vars: Vec<T>,
    pub standardizer: Standardizer<T>,
}

/// Per-member training loss at the end of every epoch, standardized units.
pub type LossHistory<T> = Vec<Vec<T>>;

fn validate_inputs<T: Real>(x: &Matrix<T>, targets: &Targets<'_, T>) -> Result<()> {
    if x.rows() == 0 {
        return Err(Error::EmptyData("no training rows".into()));
    }
    if targets.len() != x.rows() {
        return Err(Error::dims(format!(
            "{} feature rows but {} targets",
            x.rows(),
            targets.len()
        )));
    }
    if !x.is_finite() {
        return Err(Error::InvalidParams("non-finite feature".into()));
    }
    match targets {
        Targets::Regression(y) => {
            if y.iter().any(|v| !v.is_finite()) {
                return Err(Error::InvalidParams("non-finite target".into()));
            }
        }
        Targets::Classification { labels, classes } => {
            if *classes < 2 || labels.iter().any(|&l| l >= *classes) {
                return Err(Error::InvalidParams(format!(
                    "labels must lie in 0..{classes} with at least two classes"
                )));
            }
        }
    }
    Ok(())
}

/// Standardized targets as the network sees them.
enum StdTargets<T> {
    Regression(Vec<T>),
    Classification(Vec<usize>),
}

/// Loss over `rows` and, optionally, its gradient with respect to the outputs.
fn batch_loss<T: Real>(
    out: &Matrix<T>,
    targets: &StdTargets<T>,
    rows: &[usize],
    upstream: Option<&mut Matrix<T>>,
) -> T {
    let b = T::from_count(rows.len());
    let mut loss = T::zero();
    let mut up = upstream;
    for (r, &i) in rows.iter().enumerate() {
        match targets {
            StdTargets::Regression(y) => {
                let e = out[(r, 0)] - y[i];
                loss += e * e;
                if let Some(u) = up.as_deref_mut() {
                    u[(r, 0)] = T::lit(2.0) * e / b;
                }
            }
            StdTargets::Classification(labels) => {
                let p = softmax(out.row(r));
                loss -= p[labels[i]].max(T::min_positive_value()).ln();
                if let Some(u) = up.as_deref_mut() {
                    for (k, &pk) in p.iter().enumerate() {
                        let onehot = if k == labels[i] { T::one() } else { T::zero() };
                        u[(r, k)] = (pk - onehot) / b;
                    }
                }
            }
        }
    }
    loss / b
}

/// Train one network on already standardized data.
fn fit_member_std<T: Real>(
    spec: &NetworkSpec,
    x: &Matrix<T>,
    targets: &StdTargets<T>,
    cfg: &TeacherConfig,
    rng: &mut SeededRng,
) -> Result<(NetworkParams<T>, Vec<T>)> {
    let mut params: NetworkParams<T> = init_params(spec, rng)?;
    let mut state = AdamState::new(params.len());
    let adam = AdamConfig::with_lr(cfg.lr);
    let n = x.rows();
    let batch = cfg.batch_size.unwrap_or(n).clamp(1, n);
    let all: Vec<usize> = (0..n).collect();
    let mut history = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let order = if batch < n { rng.permutation(n) } else { all.clone() };
        for rows in order.chunks(batch) {
            let xb = x.select_rows(rows);
            let (_, grads) = params.forward_backward(&xb, |out| {
                let mut up = Matrix::zeros(out.rows(), out.cols());
                let loss = batch_loss(out, targets, rows, Some(&mut up));
                if !loss.is_finite() {
                    return Err(Error::NonFiniteLoss(format!("teacher epoch {epoch}")));
                }
                Ok(up)
            })?;
            adam_step(&mut params.values, &grads, &mut state, &adam)?;
        }
        let out = params.forward_batch(x)?;
        let loss = batch_loss(&out, targets, &all, None);
        if !loss.is_finite() {
            return Err(Error::NonFiniteLoss(format!("teacher epoch {epoch}")));
        }
        history.push(loss);
    }
    Ok((params, history))
}

fn member_spec(cfg: &TeacherConfig, input_dim: usize, output_dim: usize) -> NetworkSpec {
    NetworkSpec::new(input_dim, cfg.hidden.clone(), output_dim).with_activation(cfg.activation)
}

/// Train one member from raw data, standardizing internally.
///
/// Exposed so that callers can check seeding behaviour member by member.
pub fn fit_member<T: Real>(
    x: &Matrix<T>,
    targets: Targets<'_, T>,
    cfg: &TeacherConfig,
    rng: &mut SeededRng,
) -> Result<(NetworkParams<T>, Vec<T>)> {
    validate_inputs(x, &targets)?;
    let (std, st, out_dim) = prepare(x, &targets)?;
    let spec = member_spec(cfg, x.cols(), out_dim);
    fit_member_std(&spec, &std.transform_features(x)?, &st, cfg, rng)
}

fn prepare<T: Real>(x: &Matrix<T>, targets: &Targets<'_, T>) -> Result<(Standardizer<T>, StdTargets<T>, usize)> {
    Ok(match targets {
        Targets::Regression(y) => {
            let s = Standardizer::fit(x, Some(y))?;
            let z = y.iter().map(|&v| s.transform_target(v)).collect();
            (s, StdTargets::Regression(z), 1)
        }
        Targets::Classification { labels, classes } => (
            Standardizer::fit(x, None)?,
            StdTargets::Classification(labels.to_vec()),
            *classes,
        ),
    })
}

/// Train `cfg.members` networks from independent seeded initializations.
///
/// Member `i` draws from `rng.fork_index("teacher", i)`, so results do not
/// depend on how rayon schedules the members.
pub fn fit_ensemble<T: Real>(
    x: &Matrix<T>,
    targets: Targets<'_, T>,
    cfg: &TeacherConfig,
    rng: &SeededRng,
) -> Result<(TeacherEnsemble<T>, LossHistory<T>)> {
    if cfg.members < 2 {
        return Err(Error::ConfigInvalid(format!(
            "teacher ensemble needs at least 2 members, got {}",
            cfg.members
        )));
    }
    validate_inputs(x, &targets)?;
    let (standardizer, st, out_dim) = prepare(x, &targets)?;
    let xs = standardizer.transform_features(x)?;
    let spec = member_spec(cfg, x.cols(), out_dim);
    let trained: Vec<(NetworkParams<T>, Vec<T>)> = (0..cfg.members)
        .into_par_iter()
        .map(|i| {
            let mut member_rng = rng.fork_index("teacher", i as u64);
            fit_member_std(&spec, &xs, &st, cfg, &mut member_rng)
        })
        .collect::<Result<_>>()?;
    let (members, history): (Vec<_>, Vec<_>) = trained.into_iter().unzip();
    let mut ensemble = TeacherEnsemble {
        version: TEACHER_FORMAT_VERSION,
        task: match targets {
            Targets::Regression(_) => Task::Regression,
            Targets::Classification { .. } => Task::Classification,
        },
        members,
        noise_vars: Vec::new(),
        standardizer,
    };
    if let Targets::Regression(y) = targets {
        ensemble.noise_vars = ensemble
            .members
            .iter()
            .map(|m| estimate_noise_var(m, &ensemble.standardizer, x, y))
            .collect::<Result<_>>()?;
    }
    Ok((ensemble, history))
}

/// Mean squared training residual in target units, floored at 1e-8.
pub fn estimate_noise_var<T: Real>(
    member: &NetworkParams<T>,
    standardizer: &Standardizer<T>,
    x: &Matrix<T>,
    y: &[T],
) -> Result<T> {
    if x.rows() == 0 || y.is_empty() {
        return Err(Error::EmptyData("noise estimate needs training data".into()));
    }
    if x.rows() != y.len() {
        return Err(Error::dims("feature rows and targets differ"));
    }
    let out = member.forward_batch(&standardizer.transform_features(x)?)?;
    let sse: T = y
        .iter()
        .enumerate()
        .map(|(i, &t)| {
            let r = standardizer.inverse_target(out[(i, 0)]) - t;
            r * r
        })
        .sum();
    Ok((sse / T::from_count(y.len())).max(T::lit(NOISE_FLOOR)))
}

impl<T: Real> TeacherEnsemble<T> {
    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    pub fn input_dim(&self) -> usize {
        self.standardizer.feature_mean.len()
    }

    pub fn output_dim(&self) -> usize {
        self.members.first().map_or(0, |m| m.spec.output_dim)
    }

    fn check_regression(&self) -> Result<()> {
        if self.task != Task::Regression {
            return Err(Error::ConfigInvalid("ensemble was trained for classification".into()));
        }
        Ok(())
    }

    fn check_classification(&self) -> Result<()> {
        if self.task != Task::Classification {
            return Err(Error::ConfigInvalid("ensemble was trained for regression".into()));
        }
        Ok(())
    }

    /// `m x n` matrix of member outputs at the design points, standardized units.
    pub fn prediction_matrix(&self, design: &DesignSet<T>) -> Result<Matrix<T>> {
        self.check_regression()?;
        let m = design.len();
        let mut out = Matrix::zeros(m, self.len());
        for (i, member) in self.members.iter().enumerate() {
            let f = member.forward_batch(&design.points)?;
            for j in 0..m {
                out[(j, i)] = f[(j, 0)];
            }
        }
        Ok(out)
    }

    /// Per member, the `m x c` matrix of raw logits at the design points.
    pub fn logit_tensor(&self, design: &DesignSet<T>) -> Result<Vec<Matrix<T>>> {
        self.check_classification()?;
        self.members.iter().map(|m| m.forward_batch(&design.points)).collect()
    }

    /// Predictive mixture in target units for each row of raw `x`.
    pub fn predictive(&self, x: &Matrix<T>) -> Result<Vec<PredictiveMixture<T>>> {
        self.check_regression()?;
        let xs = self.standardizer.transform_features(x)?;
        let outs: Vec<Matrix<T>> = self
            .members
            .iter()
            .map(|m| m.forward_batch(&xs))
            .collect::<Result<_>>()?;
        (0..x.rows())
            .map(|r| {
                let means = outs
                    .iter()
                    .map(|o| self.standardizer.inverse_target(o[(r, 0)]))
                    .collect();
                PredictiveMixture::new(means, self.noise_vars.clone())
            })
            .collect()
    }

    /// Member softmax rows for each raw input: `result[point][member]`.
    pub fn member_probs(&self, x: &Matrix<T>) -> Result<Vec<Vec<Vec<T>>>> {
        self.check_classification()?;
        let xs = self.standardizer.transform_features(x)?;
        let outs: Vec<Matrix<T>> = self
            .members
            .iter()
            .map(|m| m.forward_batch(&xs))
            .collect::<Result<_>>()?;
        Ok((0..x.rows())
            .map(|r| outs.iter().map(|o| softmax(o.row(r))).collect())
            .collect())
    }

    /// Averaged class probabilities for each raw input.
    pub fn predictive_probs(&self, x: &Matrix<T>) -> Result<Vec<Vec<T>>> {
        Ok(self
            .member_probs(x)?
            .into_iter()
            .map(|rows| average_rows(&rows))
            .collect())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let e: Self = serde_json::from_str(s)?;
        if e.version != TEACHER_FORMAT_VERSION {
            return Err(Error::Version {
                found: e.version,
                expected: TEACHER_FORMAT_VERSION,
            });
        }
        if e.task == Task::Regression && e.noise_vars.len() != e.members.len() {
            return Err(Error::InvalidParams("one noise variance per member required".into()));
        }
        for m in &e.members {
            NetworkParams::from_values(m.spec.clone(), m.values.clone())?;
        }
        Ok(e)
    }
}

/// Mixture for a single raw input.
pub fn teacher_predictive<T: Real>(ensemble: &TeacherEnsemble<T>, x: &[T]) -> Result<PredictiveMixture<T>> {
    let row = Matrix::new(1, x.len(), x.to_vec())?;
    Ok(ensemble.predictive(&row)?.remove(0))
}

/// Column-wise mean of equal-length rows.
pub fn average_rows<T: Real>(rows: &[Vec<T>]) -> Vec<T> {
    let s = T::from_count(rows.len());
    let mut mean = vec![T::zero(); rows.first().map_or(0, Vec::len)];
    for r in rows {
        for (m, &v) in mean.iter_mut().zip(r) {
            *m += v / s;
        }
    }
    mean
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::design::DesignStrategy;
    use crate::network::Activation;

    fn linear_data(n: usize, noise: f64, seed: u64) -> (Matrix<f64>, Vec<f64>) {
        let mut rng = SeededRng::new(seed);
        let x = Matrix::from_fn(n, 1, |_, _| 4.0 * rng.uniform::<f64>() - 2.0);
        let y = (0..n)
            .map(|i| 2.0 * x[(i, 0)] + noise * rng.standard_normal::<f64>())
            .collect();
        (x, y)
    }

    fn small_cfg() -> TeacherConfig {
        TeacherConfig {
            members: 2,
            hidden: vec![16],
            activation: Activation::Relu,
            epochs: 30,
            lr: 1e-2,
            batch_size: Some(32),
        }
    }

    #[test]
    fn standardizer_round_trip() {
        let (x, y) = linear_data(50, 0.3, 1);
        let s = Standardizer::fit(&x, Some(&y)).unwrap();
        for &v in &y {
            assert!((s.inverse_target(s.transform_target(v)) - v).abs() < 1e-10);
        }
        let z = s.transform_features(&x).unwrap();
        let mean: f64 = (0..50).map(|i| z[(i, 0)]).sum::<f64>() / 50.0;
        assert!(mean.abs() < 1e-12);
    }

    #[test]
    fn equal_seeds_give_identical_members() {
        let (x, y) = linear_data(40, 0.1, 2);
        let cfg = small_cfg();
        let a = fit_member(&x, Targets::Regression(&y), &cfg, &mut SeededRng::new(5)).unwrap();
        let b = fit_member(&x, Targets::Regression(&y), &cfg, &mut SeededRng::new(5)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn noise_estimate_edge_cases() {
        // zero-weight network predicting the target mean exactly
        let spec = NetworkSpec::new(1, vec![2], 1);
        let member = NetworkParams::from_values(spec.clone(), vec![0.0; spec.param_count()]).unwrap();
        let x = Matrix::from_fn(4, 1, |i, _| i as f64);
        let flat = [3.0; 4];
        let s = Standardizer::fit(&x, Some(&flat)).unwrap();
        assert_eq!(estimate_noise_var(&member, &s, &x, &flat).unwrap(), 1e-8);
        // constant residual r = 0.5 everywhere
        let shifted = [3.5; 4];
        assert!((estimate_noise_var(&member, &s, &x, &shifted).unwrap() - 0.25).abs() < 1e-12);
        assert!(estimate_noise_var(&member, &s, &Matrix::zeros(0, 1), &[]).is_err());
    }

    #[test]
    fn prediction_matrix_matches_forward_calls() {
        let (x, y) = linear_data(60, 0.1, 3);
        let (ens, _) = fit_ensemble(&x, Targets::Regression(&y), &small_cfg(), &SeededRng::new(1)).unwrap();
        let pts = Matrix::from_rows(&[vec![-1.0], vec![0.0], vec![0.7]]).unwrap();
        let design = DesignSet::new(pts.clone(), DesignStrategy::TeacherTrain).unwrap();
        let p = ens.prediction_matrix(&design).unwrap();
        assert_eq!(p.shape(), (3, 2));
        for j in 0..3 {
            for i in 0..2 {
                assert_eq!(p[(j, i)], ens.members[i].forward(pts.row(j)).unwrap()[0]);
            }
        }
    }

    #[test]
    fn mixture_mean_is_member_average() {
        let (x, y) = linear_data(60, 0.1, 4);
        let (ens, _) = fit_ensemble(&x, Targets::Regression(&y), &small_cfg(), &SeededRng::new(2)).unwrap();
        let mix = teacher_predictive(&ens, &[0.3]).unwrap();
        assert_eq!(mix.len(), 2);
        let xs = ens
            .standardizer
            .transform_features(&Matrix::new(1, 1, vec![0.3]).unwrap())
            .unwrap();
        let direct: f64 = ens
            .members
            .iter()
            .map(|m| ens.standardizer.inverse_target(m.forward(xs.row(0)).unwrap()[0]))
            .sum::<f64>()
            / 2.0;
        assert!((mix.mean() - direct).abs() < 1e-12);
    }

    #[test]
    fn rejects_small_ensembles_and_empty_data() {
        let (x, y) = linear_data(10, 0.1, 5);
        let mut cfg = small_cfg();
        cfg.members = 1;
        assert!(fit_ensemble(&x, Targets::Regression(&y), &cfg, &SeededRng::new(0)).is_err());
        assert!(matches!(
            fit_ensemble(
                &Matrix::<f64>::zeros(0, 1),
                Targets::Regression(&[]),
                &small_cfg(),
                &SeededRng::new(0)
            ),
            Err(Error::EmptyData(_))
        ));
    }

    #[test]
    fn divergence_is_reported() {
        let (x, y) = linear_data(10, 0.1, 6);
        let mut cfg = small_cfg();
        cfg.lr = 1e300;
        let err = fit_member(&x, Targets::Regression(&y), &cfg, &mut SeededRng::new(0));
        assert!(matches!(err, Err(Error::NonFiniteLoss(_))), "{err:?}");
    }

    #[test]
    fn json_round_trip() {
        let (x, y) = linear_data(30, 0.1, 7);
        let (ens, _) = fit_ensemble(&x, Targets::Regression(&y), &small_cfg(), &SeededRng::new(3)).unwrap();
        let s = ens.to_json().unwrap();
        let back = TeacherEnsemble::<f64>::from_json(&s).unwrap();
        assert_eq!(back, ens);
        assert_eq!(back.to_json().unwrap(), s);
    }
}
