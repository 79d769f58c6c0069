//! Inverse-gamma distillation of the teachers' noise variances.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::SeededRng;
use crate::scalar::Real;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Real")]
pub struct InverseGammaParams<T> {
    pub shape: T,
    pub scale: T,
}

impl<T: Real> InverseGammaParams<T> {
    pub fn new(shape: T, scale: T) -> Result<Self> {
        let ok = |v: T| v > T::zero() && v.is_finite();
        if !ok(shape) || !ok(scale) {
            return Err(Error::InvalidParams(format!(
                "inverse gamma needs positive finite shape and scale, got ({shape}, {scale})"
            )));
        }
        Ok(Self { shape, scale })
    }

    /// `β / (α − 1)`, infinite for `α <= 1`.
    pub fn mean(&self) -> T {
        if self.shape > T::one() {
            self.scale / (self.shape - T::one())
        } else {
            T::infinity()
        }
    }
}

/// Digamma function, accurate to about 1e-13 for `x > 0`.
///
/// Shifts the argument above 10 by `ψ(x) = ψ(x + 1) − 1/x` and then sums the
/// asymptotic series through the `x^-14` term.
pub fn digamma<T: Real>(x: T) -> T {
    let mut x = x;
    let mut acc = T::zero();
    let ten = T::lit(10.0);
    while x < ten {
        acc -= T::one() / x;
        x += T::one();
    }
    let inv = T::one() / x;
    let inv2 = inv * inv;
    // Bernoulli terms B_2k / (2k)
    let series = inv2
        * (T::lit(1.0 / 12.0)
            - inv2
                * (T::lit(1.0 / 120.0)
                    - inv2
                        * (T::lit(1.0 / 252.0)
                            - inv2
                                * (T::lit(1.0 / 240.0)
                                    - inv2
                                        * (T::lit(1.0 / 132.0)
                                            - inv2 * (T::lit(691.0 / 32760.0) - inv2 * T::lit(1.0 / 12.0)))))));
    acc + x.ln() - T::lit(0.5) * inv - series
}

/// Trigamma function, same construction as [`digamma`].
pub fn trigamma<T: Real>(x: T) -> T {
    let mut x = x;
    let mut acc = T::zero();
    let ten = T::lit(10.0);
    while x < ten {
        acc += T::one() / (x * x);
        x += T::one();
    }
    let inv = T::one() / x;
    let inv2 = inv * inv;
    let tail = T::lit(1.0 / 6.0)
        - inv2
            * (T::lit(1.0 / 30.0)
                - inv2
                    * (T::lit(1.0 / 42.0)
                        - inv2
                            * (T::lit(1.0 / 30.0)
                                - inv2
                                    * (T::lit(5.0 / 66.0)
                                        - inv2 * (T::lit(691.0 / 2730.0) - inv2 * T::lit(7.0 / 6.0))))));
    acc + inv + T::lit(0.5) * inv2 + inv * inv2 * tail
}

/// Log-likelihood of `samples` under `InvGamma(α, β)`.
pub fn inverse_gamma_loglik<T: Real>(params: &InverseGammaParams<T>, samples: &[T]) -> T {
    let (a, b) = (params.shape, params.scale);
    let n = T::from_count(samples.len());
    let sum_ln: T = samples.iter().map(|s| s.ln()).sum();
    let sum_inv: T = samples.iter().map(|&s| T::one() / s).sum();
    n * (a * b.ln() - a.ln_gamma()) - (a + T::one()) * sum_ln - b * sum_inv
}

/// Method-of-moments initializer: `α₀ = mean²/var + 2`, `β₀ = mean (α₀ − 1)`.
pub fn moment_match<T: Real>(mean: T, var: T) -> Result<InverseGammaParams<T>> {
    if !(var > T::zero()) {
        return Err(Error::DegenerateSamples);
    }
    let shape = mean * mean / var + T::lit(2.0);
    InverseGammaParams::new(shape, mean * (shape - T::one()))
}

fn validate<T: Real>(samples: &[T]) -> Result<()> {
    if samples.len() < 2 {
        return Err(Error::DegenerateSamples);
    }
    if let Some((index, &value)) = samples
        .iter()
        .enumerate()
        .find(|(_, &s)| !(s > T::zero()) || !s.is_finite())
    {
        return Err(Error::NonPositiveSample {
            index,
            value: value.to_f64_lossy(),
        });
    }
    if samples.iter().all(|&s| s == samples[0]) {
        return Err(Error::DegenerateSamples);
    }
    Ok(())
}

/// Maximum-likelihood inverse-gamma fit.
///
/// The scale is profiled out (`β = nα / Σ 1/sᵢ`), leaving the shape equation
/// `ln α − ψ(α) = ln mean(1/s) + mean(ln s)`, solved by safeguarded Newton
/// iterations started from the moment-matched shape.
pub fn fit_inverse_gamma<T: Real>(samples: &[T]) -> Result<InverseGammaParams<T>> {
    validate(samples)?;
    let n = T::from_count(samples.len());
    let mean = samples.iter().copied().sum::<T>() / n;
    let var = samples.iter().map(|&s| (s - mean) * (s - mean)).sum::<T>() / n;
    let init = moment_match(mean, var)?;

    let mean_inv = samples.iter().map(|&s| T::one() / s).sum::<T>() / n;
    let mean_ln = samples.iter().map(|s| s.ln()).sum::<T>() / n;
    let target = mean_inv.ln() + mean_ln;
    if !(target > T::zero()) {
        return Err(Error::DegenerateSamples);
    }

    // per-sample d(loglik)/dα along the profile
    let grad = |a: T| a.ln() - digamma(a) - target;
    let mut alpha = init.shape;
    for _ in 0..200 {
        let g = grad(alpha);
        if g.abs() < T::lit(1e-13) {
            break;
        }
        let dg = T::one() / alpha - trigamma(alpha);
        let mut next = alpha - g / dg;
        if !(next > T::zero()) || !next.is_finite() {
            next = alpha * T::lit(0.5);
        }
        if (next - alpha).abs() <= T::lit(1e-15) * alpha {
            alpha = next;
            break;
        }
        alpha = next;
    }
    let fitted = InverseGammaParams::new(alpha, alpha / mean_inv)?;

    // Newton on a concave profile should never lose to its starting point;
    // keep the moment fit if round-off says otherwise.
    if inverse_gamma_loglik(&fitted, samples) < inverse_gamma_loglik(&init, samples) {
        return Ok(init);
    }
    Ok(fitted)
}

/// `count` draws, each the reciprocal of a `Gamma(α, rate β)` variate.
pub fn sample_inverse_gamma<T: Real>(params: &InverseGammaParams<T>, count: usize, rng: &mut SeededRng) -> Vec<T> {
    let shape = params.shape.to_f64_lossy();
    let scale = params.scale.to_f64_lossy();
    (0..count)
        .map(|_| {
            let g = rng.gamma(shape).max(f64::MIN_POSITIVE);
            T::lit(scale / g)
        })
        .collect()
}

/// Distribution over the observation-noise variance used at inference time.
///
/// Falls back to a point mass when every teacher reports the same variance,
/// since no inverse gamma has zero spread.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Real", rename_all = "kebab-case")]
pub enum NoiseModel<T> {
    InverseGamma(InverseGammaParams<T>),
    Constant(T),
}

impl<T: Real> NoiseModel<T> {
    pub fn fit(samples: &[T]) -> Result<Self> {
        match fit_inverse_gamma(samples) {
            Ok(p) => Ok(NoiseModel::InverseGamma(p)),
            Err(Error::DegenerateSamples) if !samples.is_empty() && samples[0] > T::zero() => {
                Ok(NoiseModel::Constant(samples[0]))
            }
            Err(e) => Err(e),
        }
    }

    pub fn sample(&self, count: usize, rng: &mut SeededRng) -> Vec<T> {
        match self {
            NoiseModel::InverseGamma(p) => sample_inverse_gamma(p, count, rng),
            NoiseModel::Constant(v) => vec![*v; count],
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn digamma_reference_values() {
        // ψ(1) = −γ, ψ(1/2) = −γ − 2 ln 2
        let gamma = 0.577_215_664_901_532_9_f64;
        assert!((digamma(1.0) + gamma).abs() < 1e-13);
        assert!((digamma(0.5) + gamma + 2.0 * 2f64.ln()).abs() < 1e-13);
        // recurrence check at a large argument
        let x = 123.25_f64;
        assert!((digamma(x + 1.0) - digamma(x) - 1.0 / x).abs() < 1e-13);
    }

    #[test]
    fn trigamma_reference_values() {
        let pi2_6 = std::f64::consts::PI.powi(2) / 6.0;
        assert!((trigamma(1.0) - pi2_6).abs() < 1e-12);
        assert!((trigamma(0.5) - 3.0 * pi2_6).abs() < 1e-12);
    }

    #[test]
    fn moment_match_formula() {
        let p = moment_match(1.0, 0.5).unwrap();
        assert_eq!((p.shape, p.scale), (4.0, 3.0));
    }

    #[test]
    fn degenerate_samples() {
        assert!(matches!(
            fit_inverse_gamma(&[0.5, 0.5, 0.5]),
            Err(Error::DegenerateSamples)
        ));
        assert!(matches!(fit_inverse_gamma(&[0.5]), Err(Error::DegenerateSamples)));
    }

    #[test]
    fn non_positive_sample() {
        assert!(matches!(
            fit_inverse_gamma(&[0.5, -1.0, 2.0]),
            Err(Error::NonPositiveSample { index: 1, .. })
        ));
    }

    #[test]
    fn sampling_mean_and_reproducibility() {
        let p = InverseGammaParams::new(3.0, 2.0).unwrap();
        let xs: Vec<f64> = sample_inverse_gamma(&p, 100_000, &mut SeededRng::new(7));
        assert!(xs.iter().all(|&x| x > 0.0));
        let mean = xs.iter().sum::<f64>() / xs.len() as f64;
        assert!((mean - p.mean()).abs() < 0.03 * p.mean(), "mean {mean}");
        let again: Vec<f64> = sample_inverse_gamma(&p, 10, &mut SeededRng::new(7));
        assert_eq!(&xs[..10], &again[..]);
        assert!(sample_inverse_gamma::<f64>(&p, 0, &mut SeededRng::new(7)).is_empty());
    }

    #[test]
    fn noise_model_falls_back_to_constant() {
        assert_eq!(NoiseModel::fit(&[0.2, 0.2]).unwrap(), NoiseModel::Constant(0.2));
        assert!(NoiseModel::<f64>::fit(&[0.2]).is_ok());
        assert!(NoiseModel::fit(&[0.2, -0.2]).is_err());
        let m = NoiseModel::fit(&[0.1, 0.2, 0.4]).unwrap();
        assert!(matches!(m, NoiseModel::InverseGamma(_)));
    }

    #[test]
    fn mle_gradient_vanishes() {
        let p = InverseGammaParams::new(4.5, 1.2).unwrap();
        let xs: Vec<f64> = sample_inverse_gamma(&p, 5_000, &mut SeededRng::new(3));
        let fit = fit_inverse_gamma(&xs).unwrap();
        let n = xs.len() as f64;
        let (a, b) = (fit.shape, fit.scale);
        let d_alpha = b.ln() - digamma(a) - xs.iter().map(|x| x.ln()).sum::<f64>() / n;
        let d_beta = a / b - xs.iter().map(|x| 1.0 / x).sum::<f64>() / n;
        assert!(d_alpha.abs() < 1e-8 && d_beta.abs() < 1e-8, "{d_alpha} {d_beta}");
    }
}
