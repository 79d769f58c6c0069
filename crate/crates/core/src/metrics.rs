//! Scoring rules, calibration, coverage and OOD statistics.
//!
//! Natural logarithms throughout. Regression NLL is a per-point mean; the
//! summed variant is `nll * n_test`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::{log_sum_exp, norm_cdf, norm_pdf, Real};

/// Equally weighted Gaussian mixture.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Real")]
pub struct PredictiveMixture<T> {
    pub means: Vec<T>,
    pub vars: Vec<T>,
}

impl<T: Real> PredictiveMixture<T> {
    pub fn new(means: Vec<T>, vars: Vec<T>) -> Result<Self> {
        if means.is_empty() {
            return Err(Error::EmptyData("mixture needs at least one component".into()));
        }
        if means.len() != vars.len() {
            return Err(Error::dims("mixture means and variances differ in length"));
        }
        if vars.iter().any(|&v| !(v > T::zero())) {
            return Err(Error::NonPositiveVariance);
        }
        Ok(Self { means, vars })
    }

    pub fn single(mean: T, var: T) -> Result<Self> {
        Self::new(vec![mean], vec![var])
    }

    pub fn len(&self) -> usize {
        self.means.len()
    }

    pub fn is_empty(&self) -> bool {
        self.means.is_empty()
    }

    fn weight(&self) -> T {
        T::one() / T::from_count(self.len())
    }

    pub fn mean(&self) -> T {
        self.means.iter().copied().sum::<T>() * self.weight()
    }

    pub fn variance(&self) -> T {
        let mu = self.mean();
        self.means
            .iter()
            .zip(&self.vars)
            .map(|(&m, &v)| v + (m - mu) * (m - mu))
            .sum::<T>()
            * self.weight()
    }

    pub fn log_pdf(&self, y: T) -> T {
        let half_ln_2pi = T::lit(0.5) * (T::lit(2.0) * T::PI()).ln();
        let terms: Vec<T> = self
            .means
            .iter()
            .zip(&self.vars)
            .map(|(&m, &v)| {
                let z = y - m;
                -half_ln_2pi - T::lit(0.5) * v.ln() - z * z / (T::lit(2.0) * v)
            })
            .collect();
        log_sum_exp(&terms) - T::from_count(self.len()).ln()
    }

    pub fn cdf(&self, y: T) -> T {
        self.means
            .iter()
            .zip(&self.vars)
            .map(|(&m, &v)| norm_cdf((y - m) / v.sqrt()))
            .sum::<T>()
            * self.weight()
    }

    /// Quantile by bisection on the CDF.
    pub fn quantile(&self, p: T) -> T {
        let max_sd = self.vars.iter().fold(T::zero(), |a, &v| a.max(v.sqrt()));
        let lo_mean = self.means.iter().copied().fold(T::infinity(), T::min);
        let hi_mean = self.means.iter().copied().fold(T::neg_infinity(), T::max);
        let mut lo = lo_mean - T::lit(40.0) * max_sd;
        let mut hi = hi_mean + T::lit(40.0) * max_sd;
        let tol = T::lit(1e-10);
        for _ in 0..400 {
            let mid = T::lit(0.5) * (lo + hi);
            if self.cdf(mid) < p {
                lo = mid;
            } else {
                hi = mid;
            }
            if hi - lo <= tol * (T::one() + mid.abs()) {
                break;
            }
        }
        T::lit(0.5) * (lo + hi)
    }
}

fn check_lengths(a: usize, b: usize, what: &str) -> Result<()> {
    if a == 0 || b == 0 {
        return Err(Error::EmptyData(format!("{what}: no points")));
    }
    if a != b {
        return Err(Error::dims(format!("{what}: {a} predictions vs {b} targets")));
    }
    Ok(())
}

pub fn rmse<T: Real>(pred_means: &[T], targets: &[T]) -> Result<T> {
    check_lengths(pred_means.len(), targets.len(), "rmse")?;
    let sse: T = pred_means.iter().zip(targets).map(|(&p, &y)| (p - y) * (p - y)).sum();
    Ok((sse / T::from_count(targets.len())).sqrt())
}

/// Mean negative log predictive density.
pub fn nll_regression<T: Real>(mixtures: &[PredictiveMixture<T>], targets: &[T]) -> Result<T> {
    check_lengths(mixtures.len(), targets.len(), "nll")?;
    let mut total = T::zero();
    for (mix, &y) in mixtures.iter().zip(targets) {
        if mix.vars.iter().any(|&v| !(v > T::zero())) {
            return Err(Error::NonPositiveVariance);
        }
        total -= mix.log_pdf(y);
    }
    Ok(total / T::from_count(targets.len()))
}

/// `E|X − μ|` for `X ~ N(μ + d, s²)`, written in terms of `d` and `s²`.
fn abs_moment<T: Real>(d: T, var: T) -> T {
    let s = var.sqrt();
    let z = d / s;
    T::lit(2.0) * s * norm_pdf(z) + d * (T::lit(2.0) * norm_cdf(z) - T::one())
}

/// CRPS of a Gaussian mixture, `E|X − y| − ½ E|X − X'|`, in closed form.
pub fn crps_mixture<T: Real>(mix: &PredictiveMixture<T>, y: T) -> Result<T> {
    if mix.vars.iter().any(|&v| !(v > T::zero())) {
        return Err(Error::NonPositiveVariance);
    }
    let w = mix.weight();
    let mut first = T::zero();
    for (&m, &v) in mix.means.iter().zip(&mix.vars) {
        first += abs_moment(y - m, v);
    }
    let mut second = T::zero();
    for (i, (&mi, &vi)) in mix.means.iter().zip(&mix.vars).enumerate() {
        // diagonal once, off-diagonal pairs twice
        second += abs_moment(T::zero(), vi + vi);
        for (&mj, &vj) in mix.means[i + 1..].iter().zip(&mix.vars[i + 1..]) {
            second += T::lit(2.0) * abs_moment(mi - mj, vi + vj);
        }
    }
    Ok((w * first - T::lit(0.5) * w * w * second).max(T::zero()))
}

pub fn mean_crps<T: Real>(mixtures: &[PredictiveMixture<T>], targets: &[T]) -> Result<T> {
    check_lengths(mixtures.len(), targets.len(), "crps")?;
    let mut total = T::zero();
    for (mix, &y) in mixtures.iter().zip(targets) {
        total += crps_mixture(mix, y)?;
    }
    Ok(total / T::from_count(targets.len()))
}

/// Fraction of targets inside the equal-tailed central 95% interval.
pub fn coverage95<T: Real>(mixtures: &[PredictiveMixture<T>], targets: &[T]) -> Result<T> {
    check_lengths(mixtures.len(), targets.len(), "coverage")?;
    let inside = mixtures
        .iter()
        .zip(targets)
        .filter(|(mix, &y)| {
            let lo = mix.quantile(T::lit(0.025));
            let hi = mix.quantile(T::lit(0.975));
            lo <= y && y <= hi
        })
        .count();
    Ok(T::from_count(inside) / T::from_count(targets.len()))
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax<T: Real>(p: &[T]) -> usize {
    let mut best = 0;
    for (i, &v) in p.iter().enumerate().skip(1) {
        if v > p[best] {
            best = i;
        }
    }
    best
}

fn check_labels<T: Real>(probs: &[Vec<T>], labels: &[usize]) -> Result<()> {
    check_lengths(probs.len(), labels.len(), "classification")?;
    for (p, &y) in probs.iter().zip(labels) {
        if y >= p.len() {
            return Err(Error::InvalidParams(format!(
                "label {y} out of range for {} classes",
                p.len()
            )));
        }
    }
    Ok(())
}

pub fn accuracy<T: Real>(probs: &[Vec<T>], labels: &[usize]) -> Result<T> {
    check_labels(probs, labels)?;
    let hits = probs.iter().zip(labels).filter(|(p, &y)| argmax(p) == y).count();
    Ok(T::from_count(hits) / T::from_count(labels.len()))
}

/// Mean negative log probability of the true class.
pub fn nll_classification<T: Real>(probs: &[Vec<T>], labels: &[usize]) -> Result<T> {
    check_labels(probs, labels)?;
    let floor = T::min_positive_value();
    let total: T = probs.iter().zip(labels).map(|(p, &y)| -p[y].max(floor).ln()).sum();
    Ok(total / T::from_count(labels.len()))
}

/// 1-based bin `l` with `(l−1)/M < p <= l/M`.
fn ece_bin<T: Real>(p: T, bins: usize) -> usize {
    let m = T::from_count(bins);
    let edge = |l: usize| T::from_count(l) / m;
    let mut l = (p * m).ceil().to_usize().unwrap_or(1).clamp(1, bins);
    while l > 1 && p <= edge(l - 1) {
        l -= 1;
    }
    while l < bins && p > edge(l) {
        l += 1;
    }
    l
}

/// Expected calibration error over `bins` equal-width confidence bins.
pub fn ece<T: Real>(probs: &[Vec<T>], labels: &[usize], bins: usize) -> Result<T> {
    check_labels(probs, labels)?;
    if bins == 0 {
        return Err(Error::InvalidParams("ece needs at least one bin".into()));
    }
    let mut count = vec![0usize; bins];
    let mut hits = vec![T::zero(); bins];
    let mut conf = vec![T::zero(); bins];
    for (p, &y) in probs.iter().zip(labels) {
        let k = argmax(p);
        let b = ece_bin(p[k], bins) - 1;
        count[b] += 1;
        conf[b] += p[k];
        if k == y {
            hits[b] += T::one();
        }
    }
    let n = T::from_count(labels.len());
    let mut total = T::zero();
    for b in 0..bins {
        if count[b] == 0 {
            continue;
        }
        let nb = T::from_count(count[b]);
        total += nb / n * (hits[b] / nb - conf[b] / nb).abs();
    }
    Ok(total)
}

/// Per-bin `(count, accuracy, confidence)` for reliability dumps.
pub fn reliability_bins<T: Real>(probs: &[Vec<T>], labels: &[usize], bins: usize) -> Result<Vec<(usize, T, T)>> {
    check_labels(probs, labels)?;
    let mut out = vec![(0usize, T::zero(), T::zero()); bins];
    for (p, &y) in probs.iter().zip(labels) {
        let k = argmax(p);
        let b = ece_bin(p[k], bins) - 1;
        out[b].0 += 1;
        out[b].2 += p[k];
        if k == y {
            out[b].1 += T::one();
        }
    }
    for o in &mut out {
        if o.0 > 0 {
            let n = T::from_count(o.0);
            o.1 /= n;
            o.2 /= n;
        }
    }
    Ok(out)
}

fn entropy<T: Real>(p: &[T]) -> T {
    -p.iter().filter(|&&v| v > T::zero()).map(|&v| v * v.ln()).sum::<T>()
}

/// Predictive mutual information: entropy of the mean row minus the mean row entropy.
pub fn mutual_information<T: Real>(member_probs: &[Vec<T>]) -> Result<T> {
    let Some(first) = member_probs.first() else {
        return Err(Error::EmptyData("mutual information of zero members".into()));
    };
    let c = first.len();
    for (row, p) in member_probs.iter().enumerate() {
        let sum: T = p.iter().copied().sum();
        if p.len() != c || (sum - T::one()).abs() > T::lit(1e-8) || p.iter().any(|&v| v < T::zero()) {
            return Err(Error::InvalidSimplex {
                row,
                sum: sum.to_f64_lossy(),
            });
        }
    }
    // identical members carry no information; skip the rounding noise of the
    // entropy difference so that ties stay exact
    if member_probs.iter().all(|p| p == first) {
        return Ok(T::zero());
    }
    let s = T::from_count(member_probs.len());
    let mut mean = vec![T::zero(); c];
    for p in member_probs {
        for (m, &v) in mean.iter_mut().zip(p) {
            *m += v / s;
        }
    }
    let mean_entropy = member_probs.iter().map(|p| entropy(p)).sum::<T>() / s;
    Ok((entropy(&mean) - mean_entropy).max(T::zero()))
}

/// Mann–Whitney AUROC with out-of-distribution scores as positives:
/// `P(out > in) + ½ P(out = in)`.
pub fn auroc<T: Real>(scores_in: &[T], scores_out: &[T]) -> Result<T> {
    if scores_in.is_empty() || scores_out.is_empty() {
        return Err(Error::EmptyData("auroc needs scores in both groups".into()));
    }
    let (greater, less) = pair_counts(scores_in, scores_out);
    let pairs = 2 * scores_in.len() as u128 * scores_out.len() as u128;
    // doubled counts keep the tie half-weight integral
    let ties = pairs / 2 - greater - less;
    let up = 2 * greater + ties;
    let down = 2 * less + ties;
    let total = T::lit(pairs as f64);
    // evaluate the smaller side directly so that auroc(a,b) + auroc(b,a) == 1
    Ok(if up <= down {
        T::lit(up as f64) / total
    } else {
        T::one() - T::lit(down as f64) / total
    })
}

/// `(#{out > in}, #{out < in})` over all pairs, by sorting.
fn pair_counts<T: Real>(scores_in: &[T], scores_out: &[T]) -> (u128, u128) {
    let mut sorted_in = scores_in.to_vec();
    sorted_in.sort_by(|a, b| a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Equal));
    let mut greater = 0u128;
    let mut less = 0u128;
    for &o in scores_out {
        let below = sorted_in.partition_point(|&v| v < o);
        let not_above = sorted_in.partition_point(|&v| v <= o);
        greater += below as u128;
        less += (sorted_in.len() - not_above) as u128;
    }
    (greater, less)
}

/// Mean and standard error (sample standard deviation over √k).
pub fn mean_and_stderr(values: &[f64]) -> (f64, f64) {
    let k = values.len();
    if k == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / k as f64;
    if k == 1 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (k - 1) as f64;
    (mean, (var / k as f64).sqrt())
}
