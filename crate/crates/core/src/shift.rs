//! Head-only adaptation under distribution shift.
//!
//! The distilled body `(μ, Φ, L)` stays frozen. On new data only a `c x q`
//! weight matrix `W` is fitted, giving class probabilities
//! `softmax(μ(x) + L W φ(x))`. `W` plays the role of a single MAP draw of `Z`.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::multi::MultiDlfModel;
use crate::network::{adam_step, AdamConfig, AdamState};
use crate::numerics::{Matrix, SeededRng};
use crate::scalar::{softmax, Real};

pub const HEAD_FORMAT_VERSION: u32 = 1;

/// Fitted head weights, tied to the body they were fitted on by a hash of
/// the body's serialized form.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Real")]
pub struct AdaptedHead<T> {
    pub version: u32,
    /// `c x q`.
    pub w: Matrix<T>,
    /// Hex SHA-256 of the body JSON.
    pub body_hash: String,
}

impl<T: Real> AdaptedHead<T> {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let h: Self = serde_json::from_str(s)?;
        if h.version != HEAD_FORMAT_VERSION {
            return Err(Error::Version {
                found: h.version,
                expected: HEAD_FORMAT_VERSION,
            });
        }
        Ok(h)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HeadConfig {
    pub epochs: usize,
    pub lr: f64,
    /// Weight on `‖W‖²`, standing in for the standard normal prior on `Z`.
    pub l2: f64,
    /// `None` uses every sample at each step.
    pub batch_size: Option<usize>,
}

impl Default for HeadConfig {
    fn default() -> Self {
        Self {
            epochs: 300,
            lr: 5e-2,
            l2: 1e-4,
            batch_size: None,
        }
    }
}

pub fn body_hash<T: Real>(model: &MultiDlfModel<T>) -> Result<String> {
    let digest = Sha256::digest(model.to_json()?.as_bytes());
    Ok(digest.iter().map(|b| format!("{b:02x}")).collect())
}

/// Frozen body outputs at raw inputs: `(μ rows, φ rows)`.
fn body_features<T: Real>(model: &MultiDlfModel<T>, x: &Matrix<T>) -> Result<(Matrix<T>, Matrix<T>)> {
    let h = model.heads(&model.standardizer.transform_features(x)?)?;
    Ok((h.mu, h.phi))
}

fn head_logits<T: Real>(mu: &[T], phi: &[T], lw: &Matrix<T>) -> Vec<T> {
    let shift = lw.matvec(phi);
    mu.iter().zip(shift).map(|(&a, b)| a + b).collect()
}

/// Mean cross-entropy plus `l2 ‖W‖²`, and its gradient in `W`, on `rows`.
fn head_loss<T: Real>(
    mu: &Matrix<T>,
    phi: &Matrix<T>,
    l: &Matrix<T>,
    w: &Matrix<T>,
    labels: &[usize],
    rows: &[usize],
    l2: T,
) -> (T, Matrix<T>) {
    let lw = l.matmul(w);
    let (c, q) = w.shape();
    // dCE/dW = Lᵀ (p − e_y) φᵀ, accumulated as G = Σ (p − e_y) φᵀ first
    let mut g = Matrix::zeros(c, q);
    let mut loss = T::zero();
    for &i in rows {
        let p = softmax(&head_logits(mu.row(i), phi.row(i), &lw));
        loss -= p[labels[i]].max(T::min_positive_value()).ln();
        for k in 0..c {
            let r = p[k] - if k == labels[i] { T::one() } else { T::zero() };
            for a in 0..q {
                g[(k, a)] += r * phi[(i, a)];
            }
        }
    }
    let n = T::from_count(rows.len());
    let reg: T = w.as_slice().iter().map(|&v| v * v).sum();
    let grad = l.t_matmul(&g).scale(T::one() / n).add(&w.scale(T::lit(2.0) * l2));
    (loss / n + l2 * reg, grad)
}

/// Fit `W` from zero by Adam on new labelled data. Returns the head and the
/// full-data objective after each epoch.
pub fn fit_head<T: Real>(
    model: &MultiDlfModel<T>,
    x: &Matrix<T>,
    labels: &[usize],
    cfg: &HeadConfig,
    rng: &mut SeededRng,
) -> Result<(AdaptedHead<T>, Vec<f64>)> {
    if x.rows() == 0 {
        return Err(Error::EmptyData("no adaptation samples".into()));
    }
    if x.rows() != labels.len() {
        return Err(Error::dims("adaptation features and labels differ in length"));
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= model.classes) {
        return Err(Error::InvalidParams(format!(
            "label {bad} out of range for {} classes",
            model.classes
        )));
    }
    if !(cfg.lr > 0.0) || !(cfg.l2 >= 0.0) {
        return Err(Error::ConfigInvalid(
            "head learning rate must be positive and l2 non-negative".into(),
        ));
    }
    let hash = body_hash(model)?;
    let (mu, phi) = body_features(model, x)?;
    let l = model.l_matrix();
    let l2 = T::lit(cfg.l2);
    let n = x.rows();
    let batch = cfg.batch_size.unwrap_or(n).clamp(1, n);
    let all: Vec<usize> = (0..n).collect();
    let mut w = Matrix::zeros(model.classes, model.q);
    let mut state = AdamState::new(w.as_slice().len());
    let adam = AdamConfig::with_lr(cfg.lr);
    let mut history = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let order = if batch < n { rng.permutation(n) } else { all.clone() };
        for rows in order.chunks(batch) {
            let (_, grad) = head_loss(&mu, &phi, &l, &w, labels, rows, l2);
            adam_step(w.as_mut_slice(), grad.as_slice(), &mut state, &adam)?;
        }
        let (loss, _) = head_loss(&mu, &phi, &l, &w, labels, &all, l2);
        if !loss.is_finite() {
            return Err(Error::NonFiniteLoss(format!("head epoch {epoch}")));
        }
        history.push(loss.to_f64_lossy());
    }
    Ok((
        AdaptedHead {
            version: HEAD_FORMAT_VERSION,
            w,
            body_hash: hash,
        },
        history,
    ))
}

/// `softmax(μ(x) + L W φ(x))` per raw input row. Fails if `model` is not the
/// body the head was fitted on.
pub fn predict_adapted<T: Real>(model: &MultiDlfModel<T>, head: &AdaptedHead<T>, x: &Matrix<T>) -> Result<Vec<Vec<T>>> {
    if body_hash(model)? != head.body_hash {
        return Err(Error::InvalidParams("head was fitted on a different body".into()));
    }
    if head.w.shape() != (model.classes, model.q) {
        return Err(Error::dims(
            "head weights do not match the body's class and latent sizes",
        ));
    }
    let (mu, phi) = body_features(model, x)?;
    let lw = model.l_matrix().matmul(&head.w);
    Ok((0..x.rows())
        .map(|i| softmax(&head_logits(mu.row(i), phi.row(i), &lw)))
        .collect())
}
