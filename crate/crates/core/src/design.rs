//! Design points: where teacher predictions are recorded for distillation.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Matrix, SeededRng};
use crate::scalar::Real;

/// Which pool the points came from and whether mixup was applied.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DesignStrategy {
    /// Subsample of the teachers' own training inputs.
    TeacherTrain,
    /// Mixup of pairs drawn from the teachers' training inputs.
    TeacherMixup,
    /// Subsample of inputs the teachers never saw.
    NewTrain,
    /// Mixup of pairs drawn from unseen inputs.
    NewMixup,
}

impl DesignStrategy {
    pub const ALL: [DesignStrategy; 4] = [
        DesignStrategy::TeacherTrain,
        DesignStrategy::TeacherMixup,
        DesignStrategy::NewTrain,
        DesignStrategy::NewMixup,
    ];

    pub fn is_mixup(self) -> bool {
        matches!(self, DesignStrategy::TeacherMixup | DesignStrategy::NewMixup)
    }

    pub fn uses_new_pool(self) -> bool {
        matches!(self, DesignStrategy::NewTrain | DesignStrategy::NewMixup)
    }

    pub fn name(self) -> &'static str {
        match self {
            DesignStrategy::TeacherTrain => "teacher-train",
            DesignStrategy::TeacherMixup => "teacher-mixup",
            DesignStrategy::NewTrain => "new-train",
            DesignStrategy::NewMixup => "new-mixup",
        }
    }
}

impl std::str::FromStr for DesignStrategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        DesignStrategy::ALL
            .into_iter()
            .find(|d| d.name() == s)
            .ok_or_else(|| Error::ConfigInvalid(format!("unknown design strategy `{s}`")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Real")]
pub struct DesignSet<T> {
    /// `m x d`, standardized feature units.
    pub points: Matrix<T>,
    pub provenance: DesignStrategy,
}

impl<T: Real> DesignSet<T> {
    pub fn new(points: Matrix<T>, provenance: DesignStrategy) -> Result<Self> {
        if points.rows() == 0 {
            return Err(Error::EmptyPool);
        }
        if !points.is_finite() {
            return Err(Error::InvalidParams("design points must be finite".into()));
        }
        Ok(Self { points, provenance })
    }

    pub fn len(&self) -> usize {
        self.points.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.points.rows() == 0
    }

    pub fn dim(&self) -> usize {
        self.points.cols()
    }
}

/// `⌈ratio · size⌉`, clamped to `1..=size`.
pub fn design_size(size: usize, ratio: f64) -> usize {
    let raw = ratio * size as f64;
    // 0.3 * 10 evaluates to 3.0000000000000004; don't round that up to 4
    let nearest = raw.round();
    let k = if (raw - nearest).abs() <= 1e-9 * raw.max(1.0) {
        nearest
    } else {
        raw.ceil()
    };
    (k as usize).clamp(1, size.max(1))
}

/// `λ a + (1 − λ) b`.
pub fn mixup_pair<T: Real>(a: &[T], b: &[T], lambda: T) -> Result<Vec<T>> {
    if a.len() != b.len() {
        return Err(Error::dims(format!(
            "mixup parents have lengths {} and {}",
            a.len(),
            b.len()
        )));
    }
    Ok(a.iter()
        .zip(b)
        .map(|(&x, &y)| lambda * x + (T::one() - lambda) * y)
        .collect())
}

/// Pick `⌈ratio · |pool|⌉` design points from `pool` (rows are inputs).
///
/// Subsampling strategies draw without replacement and return the chosen rows
/// in their original order; `ratio = 1` returns the pool itself. Mixup
/// strategies combine two uniformly drawn rows with `λ ~ U[0, 1]` per point.
pub fn select_design<T: Real>(
    pool: &Matrix<T>,
    strategy: DesignStrategy,
    ratio: f64,
    rng: &mut SeededRng,
) -> Result<DesignSet<T>> {
    if pool.rows() == 0 {
        return Err(Error::EmptyPool);
    }
    if !(ratio > 0.0 && ratio <= 1.0) {
        return Err(Error::ConfigInvalid(format!(
            "design ratio must lie in (0, 1], got {ratio}"
        )));
    }
    let n = pool.rows();
    let k = design_size(n, ratio);
    let points = if strategy.is_mixup() {
        mixup_points(pool, k, rng)?.0
    } else if k == n {
        pool.clone()
    } else {
        let mut idx = rng.permutation(n);
        idx.truncate(k);
        idx.sort_unstable();
        pool.select_rows(&idx)
    };
    DesignSet::new(points, strategy)
}

/// Parent rows and mixing weight `(i, j, λ)` of one mixup point.
type Parents<T> = Vec<(usize, usize, T)>;

/// `k` mixup points plus the parents of each one.
fn mixup_points<T: Real>(pool: &Matrix<T>, k: usize, rng: &mut SeededRng) -> Result<(Matrix<T>, Parents<T>)> {
    let n = pool.rows();
    let mut data = Vec::with_capacity(k * pool.cols());
    let mut parents = Vec::with_capacity(k);
    for _ in 0..k {
        let i = rng.index(n);
        let j = rng.index(n);
        let lambda: T = rng.uniform();
        data.extend(mixup_pair(pool.row(i), pool.row(j), lambda)?);
        parents.push((i, j, lambda));
    }
    Ok((Matrix::new(k, pool.cols(), data)?, parents))
}
