//! Out-of-distribution scoring by predictive mutual information over student
//! members, summarised by AUROC.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::{auroc, mutual_information};
use crate::multi::{member_probs, multi_student_ensemble, MultiDlfModel};
use crate::numerics::{Matrix, SeededRng};
use crate::scalar::Real;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OodReport {
    /// OOD inputs are the positives.
    pub auroc: f64,
    pub mi_in: Vec<f64>,
    pub mi_out: Vec<f64>,
    pub samples: usize,
}

/// Mutual information of each raw input row under one fixed member draw.
pub fn mi_scores<T: Real>(
    model: &MultiDlfModel<T>,
    x: &Matrix<T>,
    members: &crate::multi::MultiStudentEnsemble<T>,
) -> Result<Vec<f64>> {
    member_probs(model, members, x)?
        .iter()
        .map(|rows| mutual_information(rows).map(|v| v.to_f64_lossy()))
        .collect()
}

/// Score both sets with the same `samples` student members so that the two
/// groups are exchangeable when they come from the same distribution.
pub fn ood_score<T: Real>(
    model: &MultiDlfModel<T>,
    x_in: &Matrix<T>,
    x_out: &Matrix<T>,
    samples: usize,
    rng: &mut SeededRng,
) -> Result<OodReport> {
    if x_in.rows() == 0 || x_out.rows() == 0 {
        return Err(Error::EmptyData("OOD scoring needs inputs in both sets".into()));
    }
    let members = multi_student_ensemble(model, samples, rng)?;
    let mi_in = mi_scores(model, x_in, &members)?;
    let mi_out = mi_scores(model, x_out, &members)?;
    Ok(OodReport {
        auroc: auroc(&mi_in, &mi_out)?,
        mi_in,
        mi_out,
        samples,
    })
}
