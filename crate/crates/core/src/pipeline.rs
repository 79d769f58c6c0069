//! Datasets, synthetic generators and the teacher → student → evaluation
//! workflow. Every stage is exposed on its own so the CLI can run them
//! separately on each other's outputs.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::design::{select_design, DesignStrategy};
use crate::dlf::{
    em_fit, ensemble_predictive, initial_jitter, mmd_pretrain, sample_student_functions, student_ensemble, DlfModel,
    EmConfig, EmMode, EmTrace, PretrainConfig, PretrainTrace,
};
use crate::error::{Error, Result, StageExt};
use crate::metrics::{
    accuracy, coverage95, ece, mean_and_stderr, mean_crps, nll_classification, nll_regression, rmse, PredictiveMixture,
};
use crate::multi::{
    em_fit_multi, ensemble_probs, member_probs, mmd_pretrain_multi, multi_student_ensemble, MultiDlfModel,
};
use crate::network::Activation;
use crate::noise::NoiseModel;
use crate::numerics::{Matrix, SeededRng};
use crate::ood::{ood_score, OodReport};
use crate::shift::{fit_head, predict_adapted, AdaptedHead, HeadConfig};
use crate::teacher::{fit_ensemble, Targets, Task, TeacherConfig, TeacherEnsemble};

/// Features plus one target column. Classification targets are class
/// indices stored as integral floats.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    /// Feature names followed by the target name.
    pub columns: Vec<String>,
    pub features: Matrix<f64>,
    pub targets: Vec<f64>,
}

impl Dataset {
    pub fn new(columns: Vec<String>, features: Matrix<f64>, targets: Vec<f64>) -> Result<Self> {
        if features.rows() != targets.len() {
            return Err(Error::DimensionMismatch(format!(
                "{} feature rows but {} targets",
                features.rows(),
                targets.len()
            )));
        }
        if columns.len() != features.cols() + 1 {
            return Err(Error::DimensionMismatch(
                "column names must cover features and target".into(),
            ));
        }
        Ok(Self {
            columns,
            features,
            targets,
        })
    }

    /// Default column names `x0, x1, …, y`.
    pub fn unnamed(features: Matrix<f64>, targets: Vec<f64>) -> Result<Self> {
        let mut columns: Vec<String> = (0..features.cols()).map(|j| format!("x{j}")).collect();
        columns.push("y".into());
        Self::new(columns, features, targets)
    }

    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }

    pub fn subset(&self, rows: &[usize]) -> Self {
        Self {
            columns: self.columns.clone(),
            features: self.features.select_rows(rows),
            targets: rows.iter().map(|&i| self.targets[i]).collect(),
        }
    }

    /// Targets as class indices.
    pub fn labels(&self) -> Result<Vec<usize>> {
        self.targets
            .iter()
            .enumerate()
            .map(|(i, &y)| {
                if y.is_finite() && y >= 0.0 && y.fract() == 0.0 {
                    Ok(y as usize)
                } else {
                    Err(Error::InvalidParams(format!(
                        "row {i}: target {y} is not a class index"
                    )))
                }
            })
            .collect()
    }

    pub fn class_count(&self) -> Result<usize> {
        Ok(self.labels()?.into_iter().max().map_or(0, |m| m + 1))
    }
}

/// Read a headed CSV whose last column is the target. Lines are 1-based and
/// count the header; columns are 1-based.
pub fn load_csv(path: &Path) -> Result<Dataset> {
    let text = fs::read_to_string(path)?;
    parse_csv(&text)
}

pub fn parse_csv(text: &str) -> Result<Dataset> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let header: Vec<String> = match reader.headers() {
        Ok(h) => h.iter().map(str::to_string).collect(),
        Err(e) => return Err(csv_error(e, 1)),
    };
    if header.is_empty() || header.iter().all(String::is_empty) {
        return Err(Error::EmptyFile);
    }
    if header.len() < 2 {
        return Err(Error::ParseError {
            line: 1,
            column: 1,
            message: "need at least one feature column and a target column".into(),
        });
    }
    let width = header.len();
    let mut values = Vec::new();
    let mut targets = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| csv_error(e, 0))?;
        let line = record.position().map_or(0, |p| p.line() as usize);
        if record.len() == 1 && record[0].is_empty() {
            continue;
        }
        if record.len() != width {
            return Err(Error::ParseError {
                line,
                column: record.len().min(width) + 1,
                message: format!("expected {width} fields, found {}", record.len()),
            });
        }
        for (j, cell) in record.iter().enumerate() {
            let column = j + 1;
            if cell.is_empty() || cell.eq_ignore_ascii_case("nan") || cell.eq_ignore_ascii_case("na") {
                return Err(Error::MissingValue { line, column });
            }
            let v: f64 = cell.parse().map_err(|_| Error::ParseError {
                line,
                column,
                message: format!("`{cell}` is not a number"),
            })?;
            if !v.is_finite() {
                return Err(Error::ParseError {
                    line,
                    column,
                    message: format!("`{cell}` is not finite"),
                });
            }
            if j + 1 == width {
                targets.push(v);
            } else {
                values.push(v);
            }
        }
    }
    if targets.is_empty() {
        return Err(Error::EmptyFile);
    }
    let features = Matrix::new(targets.len(), width - 1, values)?;
    Dataset::new(header, features, targets)
}

fn csv_error(e: csv::Error, fallback_line: usize) -> Error {
    let line = e.position().map_or(fallback_line, |p| p.line() as usize);
    Error::ParseError {
        line,
        column: 0,
        message: e.to_string(),
    }
}

pub fn write_csv(data: &Dataset, path: &Path) -> Result<()> {
    fs::write(path, dataset_to_csv(data)?)?;
    Ok(())
}

pub fn dataset_to_csv(data: &Dataset) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let io = |e: csv::Error| Error::Io(std::io::Error::other(e));
    w.write_record(&data.columns).map_err(io)?;
    for i in 0..data.len() {
        let mut row: Vec<String> = data.features.row(i).iter().map(|v| v.to_string()).collect();
        row.push(data.targets[i].to_string());
        w.write_record(&row).map_err(io)?;
    }
    let bytes = w
        .into_inner()
        .map_err(|e| Error::Io(std::io::Error::other(e.to_string())))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

/// Seeded shuffle into `(train, test)` with `round(ratio · n)` training rows,
/// keeping at least one row on each side.
pub fn split(data: &Dataset, ratio: f64, seed: u64) -> Result<(Dataset, Dataset)> {
    let n = data.len();
    if n < 2 {
        return Err(Error::TooFewRows(n));
    }
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(Error::ConfigInvalid(format!("split ratio {ratio} must lie in (0, 1)")));
    }
    let n_train = ((ratio * n as f64).round() as usize).clamp(1, n - 1);
    let order = SeededRng::new(seed).permutation(n);
    Ok((data.subset(&order[..n_train]), data.subset(&order[n_train..])))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SynthKind {
    LinearRegression,
    DlfGp,
    Blobs,
    FlipBlobs,
}

impl std::str::FromStr for SynthKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "linear-regression" => Ok(SynthKind::LinearRegression),
            "dlf-gp" => Ok(SynthKind::DlfGp),
            "blobs" => Ok(SynthKind::Blobs),
            "flip-blobs" => Ok(SynthKind::FlipBlobs),
            _ => Err(Error::ConfigInvalid(format!("unknown synthetic dataset `{s}`"))),
        }
    }
}

/// Generator knobs. Each kind reads only the fields it needs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthParams {
    /// Rows for linear and blob data; function draws for `dlf-gp`.
    pub n: usize,
    /// `dlf-gp` grid size on `[-2, 2]`.
    pub points: usize,
    /// Linear-regression noise standard deviation.
    pub noise: f64,
    pub slope: f64,
    pub intercept: f64,
    /// `dlf-gp` latent dimension.
    pub q: usize,
    /// `dlf-gp` jitter variance.
    pub jitter: f64,
    pub classes: usize,
    pub dim: usize,
    /// Radius of the circle carrying the blob centers.
    pub separation: f64,
    pub blob_sd: f64,
    /// Added to every coordinate of every blob center.
    pub offset: f64,
}

impl Default for SynthParams {
    fn default() -> Self {
        Self {
            n: 200,
            points: 50,
            noise: 0.1,
            slope: 2.0,
            intercept: 0.0,
            q: 3,
            jitter: 0.02,
            classes: 3,
            dim: 2,
            separation: 4.0,
            blob_sd: 1.0,
            offset: 0.0,
        }
    }
}

/// Generating parameters stored next to synthetic data.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum SynthTruth {
    LinearRegression {
        slope: f64,
        intercept: f64,
        noise_sd: f64,
    },
    DlfGp {
        x: Vec<f64>,
        mu: Vec<f64>,
        /// `points x q`.
        phi: Matrix<f64>,
        jitter: f64,
        /// `ΦΦᵀ + σ_f² I` at the grid.
        covariance: Matrix<f64>,
        /// `points x n` noisy function draws, one per column.
        draws: Matrix<f64>,
    },
    Blobs {
        /// `classes x dim`.
        centers: Matrix<f64>,
        sd: f64,
        flipped: bool,
    },
}

/// Loading column `k` of the `dlf-gp` generator at `x`.
fn gp_loading(k: usize, x: f64) -> f64 {
    match k {
        0 => 1.0 + 0.3 * x.sin(),
        1 => 0.4 * (1.3 * x).sin(),
        2 => 0.25 * (1.7 * x).cos(),
        _ => 0.2 / k as f64 * ((0.9 + 0.4 * k as f64) * x + k as f64).sin(),
    }
}

pub fn gen_synth(kind: SynthKind, p: &SynthParams, seed: u64) -> Result<(Dataset, SynthTruth)> {
    let mut rng = SeededRng::new(seed);
    let bad = |msg: &str| Err(Error::InvalidParams(msg.into()));
    match kind {
        SynthKind::LinearRegression => {
            if p.n == 0 || !(p.noise >= 0.0) || !p.slope.is_finite() || !p.intercept.is_finite() {
                return bad("linear data needs n > 0, finite coefficients and non-negative noise");
            }
            let x = Matrix::from_fn(p.n, 1, |_, _| -1.0 + 2.0 * rng.uniform::<f64>());
            let y = (0..p.n)
                .map(|i| p.intercept + p.slope * x[(i, 0)] + p.noise * rng.standard_normal::<f64>())
                .collect();
            Ok((
                Dataset::unnamed(x, y)?,
                SynthTruth::LinearRegression {
                    slope: p.slope,
                    intercept: p.intercept,
                    noise_sd: p.noise,
                },
            ))
        }
        SynthKind::DlfGp => {
            if p.points < 2 || p.n == 0 || p.q == 0 || !(p.jitter > 0.0) {
                return bad("dlf-gp needs points >= 2, n > 0, q > 0 and positive jitter");
            }
            let m = p.points;
            let x: Vec<f64> = (0..m).map(|j| -2.0 + 4.0 * j as f64 / (m - 1) as f64).collect();
            let mu: Vec<f64> = x.iter().map(|v| v.sin()).collect();
            let phi = Matrix::from_fn(m, p.q, |j, k| gp_loading(k, x[j]));
            let covariance = phi.matmul_t(&phi).add_diag(p.jitter);
            let sd = p.jitter.sqrt();
            let mut draws = Matrix::zeros(m, p.n);
            for i in 0..p.n {
                let z: Vec<f64> = (0..p.q).map(|_| rng.standard_normal()).collect();
                let f = phi.matvec(&z);
                for j in 0..m {
                    draws[(j, i)] = mu[j] + f[j] + sd * rng.standard_normal::<f64>();
                }
            }
            let data = Dataset::unnamed(Matrix::column(&x), draws.col_vec(0))?;
            Ok((
                data,
                SynthTruth::DlfGp {
                    x,
                    mu,
                    phi,
                    jitter: p.jitter,
                    covariance,
                    draws,
                },
            ))
        }
        SynthKind::Blobs | SynthKind::FlipBlobs => {
            if p.n == 0 || p.classes < 2 || p.dim < 2 || !(p.blob_sd > 0.0) {
                return bad("blobs need n > 0, at least 2 classes, dim >= 2 and positive spread");
            }
            let c = p.classes;
            let centers = Matrix::from_fn(c, p.dim, |k, d| {
                let angle = 2.0 * std::f64::consts::PI * k as f64 / c as f64;
                p.offset
                    + match d {
                        0 => p.separation * angle.cos(),
                        1 => p.separation * angle.sin(),
                        _ => 0.0,
                    }
            });
            let mut labels = Vec::with_capacity(p.n);
            let features = Matrix::from_fn(p.n, p.dim, |_, _| 0.0);
            let mut features = features;
            for i in 0..p.n {
                let k = rng.index(c);
                labels.push(k);
                for d in 0..p.dim {
                    features[(i, d)] = centers[(k, d)] + p.blob_sd * rng.standard_normal::<f64>();
                }
            }
            let flipped = kind == SynthKind::FlipBlobs;
            let targets = labels
                .into_iter()
                .map(|k| if flipped { (c - 1 - k) as f64 } else { k as f64 })
                .collect();
            Ok((
                Dataset::unnamed(features, targets)?,
                SynthTruth::Blobs {
                    centers,
                    sd: p.blob_sd,
                    flipped,
                },
            ))
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InitMode {
    /// MMD-penalised pretraining with free latents before EM.
    Mmd,
    /// EM straight from the random network initialisation.
    Random,
}

impl std::str::FromStr for InitMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mmd" => Ok(InitMode::Mmd),
            "random" => Ok(InitMode::Random),
            _ => Err(Error::ConfigInvalid(format!("unknown init mode `{s}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "kebab-case")]
pub enum DataSource {
    Csv {
        path: PathBuf,
    },
    /// Regenerated per seed from that seed's `data` stream.
    Synth {
        kind: SynthKind,
        #[serde(default)]
        params: SynthParams,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StudentConfig {
    pub hidden: Vec<usize>,
    pub activation: Activation,
    pub q: usize,
    pub init: InitMode,
    pub pretrain: PretrainConfig,
    pub em: EmConfig,
    pub design: DesignStrategy,
    pub design_ratio: f64,
}

impl Default for StudentConfig {
    fn default() -> Self {
        Self {
            hidden: vec![50],
            activation: Activation::Tanh,
            q: 10,
            init: InitMode::Mmd,
            pretrain: PretrainConfig::default(),
            em: EmConfig::default(),
            design: DesignStrategy::TeacherTrain,
            design_ratio: 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    /// Student members per evaluation; the teacher count when unset.
    pub samples: Option<usize>,
    /// Add `σ_f²` to each student member's noise variance.
    pub include_jitter: bool,
    pub ece_bins: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            samples: None,
            include_jitter: false,
            ece_bins: 15,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub task: Task,
    pub data: DataSource,
    pub split_ratio: f64,
    pub teacher: TeacherConfig,
    pub student: StudentConfig,
    pub eval: EvalConfig,
    pub seeds: Vec<u64>,
    /// Also write `report.csv` next to the JSON reports.
    pub write_csv: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            task: Task::Regression,
            data: DataSource::Synth {
                kind: SynthKind::LinearRegression,
                params: SynthParams::default(),
            },
            split_ratio: 0.9,
            teacher: TeacherConfig::default(),
            student: StudentConfig::default(),
            eval: EvalConfig::default(),
            seeds: vec![0],
            write_csv: false,
        }
    }
}

impl ExperimentConfig {
    pub fn from_file(path: &Path) -> Result<Self> {
        let cfg: Self = serde_json::from_str(&fs::read_to_string(path)?)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(Error::ConfigInvalid("at least one seed is required".into()));
        }
        if self.student.q == 0 {
            return Err(Error::ConfigInvalid("q must be at least 1".into()));
        }
        if !(self.student.design_ratio > 0.0 && self.student.design_ratio <= 1.0) {
            return Err(Error::ConfigInvalid("design ratio must lie in (0, 1]".into()));
        }
        if !(self.student.pretrain.lambda >= 0.0) {
            return Err(Error::ConfigInvalid("lambda must be non-negative".into()));
        }
        if self.teacher.members < 2 {
            return Err(Error::ConfigInvalid("need at least 2 teachers".into()));
        }
        if self.eval.samples == Some(0) || self.eval.ece_bins == 0 {
            return Err(Error::ConfigInvalid("samples and ECE bins must be positive".into()));
        }
        self.student.em.validate()
    }
}

/// A distilled student of either kind.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "task", rename_all = "lowercase")]
pub enum Student {
    Regression(DlfModel<f64>),
    Classification(MultiDlfModel<f64>),
}

impl Student {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    /// Parses and then re-checks the inner model through its own loader.
    pub fn from_json(s: &str) -> Result<Self> {
        Ok(match serde_json::from_str::<Student>(s)? {
            Student::Regression(m) => Student::Regression(DlfModel::from_json(&m.to_json()?)?),
            Student::Classification(m) => Student::Classification(MultiDlfModel::from_json(&m.to_json()?)?),
        })
    }

    pub fn task(&self) -> Task {
        match self {
            Student::Regression(_) => Task::Regression,
            Student::Classification(_) => Task::Classification,
        }
    }

    pub fn jitter(&self) -> f64 {
        match self {
            Student::Regression(m) => m.jitter(),
            Student::Classification(m) => m.jitter(),
        }
    }

    pub fn design_len(&self) -> usize {
        match self {
            Student::Regression(m) => m.design.len(),
            Student::Classification(m) => m.design.len(),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DistillReport {
    pub design_points: usize,
    pub pretrain: Option<PretrainTrace>,
    pub em: EmTrace,
}

pub fn train_teachers(
    train: &Dataset,
    task: Task,
    classes: usize,
    cfg: &TeacherConfig,
    rng: &SeededRng,
) -> Result<TeacherEnsemble<f64>> {
    let labels;
    let targets = match task {
        Task::Regression => Targets::Regression(&train.targets),
        Task::Classification => {
            labels = train.labels()?;
            if let Some(&bad) = labels.iter().find(|&&y| y >= classes) {
                return Err(Error::InvalidParams(format!(
                    "label {bad} out of range for {classes} classes"
                )));
            }
            Targets::Classification {
                labels: &labels,
                classes,
            }
        }
    };
    Ok(fit_ensemble(&train.features, targets, cfg, rng)?.0)
}

/// Fit a student to `ensemble` with design points drawn from the raw
/// feature rows in `pool`. Uses the `design`, `init`, `pretrain` and `em`
/// streams of `rng`.
pub fn distill(
    ensemble: &TeacherEnsemble<f64>,
    pool: &Matrix<f64>,
    cfg: &StudentConfig,
    rng: &SeededRng,
) -> Result<(Student, DistillReport)> {
    let pool_std = ensemble.standardizer.transform_features(pool).stage("design")?;
    let design = select_design(&pool_std, cfg.design, cfg.design_ratio, &mut rng.fork("design")).stage("design")?;
    let mut report = DistillReport {
        design_points: design.len(),
        ..DistillReport::default()
    };
    let std = ensemble.standardizer.clone();
    let mut init_rng = rng.fork("init");
    let student = match ensemble.task {
        Task::Regression => {
            let pred = ensemble.prediction_matrix(&design).stage("design")?;
            let mut model = DlfModel::init(
                cfg.hidden.clone(),
                cfg.activation,
                cfg.q,
                design,
                std,
                initial_jitter(&pred),
                &mut init_rng,
            )
            .stage("student-init")?;
            if cfg.init == InitMode::Mmd {
                let (m, t) = mmd_pretrain(&model, &pred, &cfg.pretrain, &mut rng.fork("pretrain")).stage("pretrain")?;
                model = m;
                report.pretrain = Some(t);
            }
            let (mut model, trace) = em_fit(&model, &pred, &cfg.em, &mut rng.fork("em")).stage("em")?;
            report.em = trace;
            model.noise = Some(NoiseModel::fit(&ensemble.noise_vars).stage("noise-distill")?);
            Student::Regression(model)
        }
        Task::Classification => {
            let logits = ensemble.logit_tensor(&design).stage("design")?;
            let m = design.len();
            let stacked = Matrix::from_fn(m, logits.len() * ensemble.output_dim(), |j, col| {
                let c = ensemble.output_dim();
                logits[col / c][(j, col % c)]
            });
            let mut model = MultiDlfModel::init(
                cfg.hidden.clone(),
                cfg.activation,
                ensemble.output_dim(),
                cfg.q,
                design,
                std,
                initial_jitter(&stacked),
                &mut init_rng,
            )
            .stage("student-init")?;
            if cfg.init == InitMode::Mmd {
                let (m, t) =
                    mmd_pretrain_multi(&model, &logits, &cfg.pretrain, &mut rng.fork("pretrain")).stage("pretrain")?;
                model = m;
                report.pretrain = Some(t);
            }
            let (model, trace) = em_fit_multi(&model, &logits, &cfg.em, &mut rng.fork("em")).stage("em")?;
            report.em = trace;
            Student::Classification(model)
        }
    };
    Ok((student, report))
}

fn regression_metrics(
    prefix: &str,
    mixes: &[PredictiveMixture<f64>],
    y: &[f64],
    out: &mut BTreeMap<String, f64>,
) -> Result<()> {
    let means: Vec<f64> = mixes.iter().map(PredictiveMixture::mean).collect();
    out.insert(format!("{prefix}_rmse"), rmse(&means, y)?);
    out.insert(format!("{prefix}_nll"), nll_regression(mixes, y)?);
    out.insert(format!("{prefix}_crps"), mean_crps(mixes, y)?);
    out.insert(format!("{prefix}_coverage95"), coverage95(mixes, y)?);
    Ok(())
}

fn classification_metrics(
    prefix: &str,
    probs: &[Vec<f64>],
    labels: &[usize],
    bins: usize,
    out: &mut BTreeMap<String, f64>,
) -> Result<()> {
    out.insert(format!("{prefix}_accuracy"), accuracy(probs, labels)?);
    out.insert(format!("{prefix}_nll"), nll_classification(probs, labels)?);
    out.insert(format!("{prefix}_ece"), ece(probs, labels, bins)?);
    Ok(())
}

/// Teacher and student metrics on `test`, keyed `teacher_*` and `student_*`.
/// Student members come from the `students` stream of `rng`.
pub fn evaluate(
    ensemble: &TeacherEnsemble<f64>,
    student: &Student,
    test: &Dataset,
    cfg: &EvalConfig,
    rng: &SeededRng,
) -> Result<BTreeMap<String, f64>> {
    if ensemble.task != student.task() {
        return Err(Error::ConfigInvalid(
            "teachers and student were trained for different tasks".into(),
        ));
    }
    if test.is_empty() {
        return Err(Error::EmptyData("no test rows".into()));
    }
    let samples = cfg.samples.unwrap_or(ensemble.len());
    let mut rng = rng.fork("students");
    let mut out = BTreeMap::new();
    match student {
        Student::Regression(model) => {
            regression_metrics(
                "teacher",
                &ensemble.predictive(&test.features)?,
                &test.targets,
                &mut out,
            )?;
            let noise = model
                .noise
                .ok_or_else(|| Error::InvalidParams("student has no distilled noise model".into()))?;
            let members = student_ensemble(model, &noise, samples, cfg.include_jitter, &mut rng)?;
            let mixes = ensemble_predictive(model, &members, &test.features)?;
            regression_metrics("student", &mixes, &test.targets, &mut out)?;
        }
        Student::Classification(model) => {
            let labels = test.labels()?;
            classification_metrics(
                "teacher",
                &ensemble.predictive_probs(&test.features)?,
                &labels,
                cfg.ece_bins,
                &mut out,
            )?;
            let members = multi_student_ensemble(model, samples, &mut rng)?;
            let probs = ensemble_probs(model, &members, &test.features)?;
            classification_metrics("student", &probs, &labels, cfg.ece_bins, &mut out)?;
        }
    }
    Ok(out)
}

/// Sampled student functions at raw inputs as a table: regression rows are
/// `member, point, value` in target units; classification rows are
/// `member, point, p_0 … p_{c-1}`.
pub fn sample_student(
    student: &Student,
    x: &Matrix<f64>,
    count: usize,
    rng: &mut SeededRng,
) -> Result<(Vec<String>, Vec<Vec<f64>>)> {
    let mut rows = Vec::new();
    let header = match student {
        Student::Regression(model) => {
            let xs = model.standardizer.transform_features(x)?;
            let f = sample_student_functions(model, &xs, count, rng)?;
            for s in 0..count {
                for j in 0..x.rows() {
                    rows.push(vec![s as f64, j as f64, model.standardizer.inverse_target(f[(s, j)])]);
                }
            }
            vec!["member".into(), "point".into(), "value".into()]
        }
        Student::Classification(model) => {
            let members = multi_student_ensemble(model, count, rng)?;
            let probs = member_probs(model, &members, x)?;
            for s in 0..count {
                for (j, per_point) in probs.iter().enumerate() {
                    let mut row = vec![s as f64, j as f64];
                    row.extend_from_slice(&per_point[s]);
                    rows.push(row);
                }
            }
            let mut h = vec!["member".to_string(), "point".to_string()];
            h.extend((0..model.classes).map(|k| format!("p{k}")));
            h
        }
    };
    Ok((header, rows))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdaptReport {
    /// Accuracy of the zero head, i.e. of `softmax(μ)`, on the adaptation data.
    pub accuracy_before: f64,
    pub accuracy_after: f64,
    pub loss: Vec<f64>,
}

/// Fit a head on `data` and report accuracy on it before and after.
pub fn adapt(
    model: &MultiDlfModel<f64>,
    data: &Dataset,
    cfg: &HeadConfig,
    rng: &mut SeededRng,
) -> Result<(AdaptedHead<f64>, AdaptReport)> {
    let labels = data.labels()?;
    let (head, loss) = fit_head(model, &data.features, &labels, cfg, rng)?;
    let zero = AdaptedHead {
        w: Matrix::zeros(model.classes, model.q),
        ..head.clone()
    };
    let before = accuracy(&predict_adapted(model, &zero, &data.features)?, &labels)?;
    let after = accuracy(&predict_adapted(model, &head, &data.features)?, &labels)?;
    Ok((
        head,
        AdaptReport {
            accuracy_before: before,
            accuracy_after: after,
            loss,
        },
    ))
}

pub fn ood(
    model: &MultiDlfModel<f64>,
    x_in: &Dataset,
    x_out: &Dataset,
    samples: usize,
    rng: &mut SeededRng,
) -> Result<OodReport> {
    ood_score(model, &x_in.features, &x_out.features, samples, rng)
}

/// The knobs that distinguish one report from another.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportSettings {
    pub task: Task,
    pub q: usize,
    pub lambda: f64,
    pub design: DesignStrategy,
    pub design_ratio: f64,
    pub init: InitMode,
    pub em_mode: EmMode,
    pub teachers: usize,
    pub samples: usize,
}

impl ReportSettings {
    fn from_config(cfg: &ExperimentConfig) -> Self {
        Self {
            task: cfg.task,
            q: cfg.student.q,
            lambda: cfg.student.pretrain.lambda,
            design: cfg.student.design,
            design_ratio: cfg.student.design_ratio,
            init: cfg.student.init,
            em_mode: cfg.student.em.mode,
            teachers: cfg.teacher.members,
            samples: cfg.eval.samples.unwrap_or(cfg.teacher.members),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedReport {
    pub seed: u64,
    pub settings: ReportSettings,
    pub design_points: usize,
    pub em_iterations: usize,
    pub final_loglik: f64,
    pub gem_rejections: usize,
    pub jitter: f64,
    pub metrics: BTreeMap<String, f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub mean: f64,
    pub stderr: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AggregateReport {
    pub settings: ReportSettings,
    pub seeds: Vec<u64>,
    pub metrics: BTreeMap<String, MetricSummary>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PipelineOutput {
    pub per_seed: Vec<SeedReport>,
    pub aggregate: AggregateReport,
    pub files: Vec<PathBuf>,
}

fn load_data(cfg: &ExperimentConfig, rng: &SeededRng) -> Result<Dataset> {
    match &cfg.data {
        DataSource::Csv { path } => load_csv(path),
        DataSource::Synth { kind, params } => Ok(gen_synth(*kind, params, rng.fork("data").next_u64())?.0),
    }
}

/// One seed of the full workflow.
pub fn run_seed(cfg: &ExperimentConfig, seed: u64) -> Result<SeedReport> {
    let root = SeededRng::new(seed);
    let data = load_data(cfg, &root).stage("data")?;
    let classes = match cfg.task {
        Task::Classification => data.class_count().stage("data")?,
        Task::Regression => 0,
    };
    let (train, test) = split(&data, cfg.split_ratio, root.fork("split").next_u64()).stage("split")?;
    // new-pool strategies keep half the training rows away from the teachers
    let (teacher_train, pool) = if cfg.student.design.uses_new_pool() {
        let (a, b) = split(&train, 0.5, root.fork("pool").next_u64()).stage("split")?;
        (a, b.features)
    } else {
        let pool = train.features.clone();
        (train, pool)
    };
    let ensemble = train_teachers(&teacher_train, cfg.task, classes, &cfg.teacher, &root.fork("teachers"))
        .stage("train-teachers")?;
    let (student, report) = distill(&ensemble, &pool, &cfg.student, &root.fork("distill")).stage("distill")?;
    let metrics = evaluate(&ensemble, &student, &test, &cfg.eval, &root.fork("evaluate")).stage("evaluate")?;
    Ok(SeedReport {
        seed,
        settings: ReportSettings::from_config(cfg),
        design_points: report.design_points,
        em_iterations: report.em.loglik.len().saturating_sub(1),
        final_loglik: report.em.loglik.last().copied().unwrap_or(f64::NAN),
        gem_rejections: report.em.rejected,
        jitter: student.jitter(),
        metrics,
    })
}

pub fn aggregate(cfg: &ExperimentConfig, per_seed: &[SeedReport]) -> AggregateReport {
    let mut metrics = BTreeMap::new();
    if let Some(first) = per_seed.first() {
        for key in first.metrics.keys() {
            let values: Vec<f64> = per_seed.iter().filter_map(|r| r.metrics.get(key).copied()).collect();
            let (mean, stderr) = mean_and_stderr(&values);
            metrics.insert(key.clone(), MetricSummary { mean, stderr });
        }
    }
    AggregateReport {
        settings: ReportSettings::from_config(cfg),
        seeds: per_seed.iter().map(|r| r.seed).collect(),
        metrics,
    }
}

fn report_csv(per_seed: &[SeedReport], agg: &AggregateReport) -> String {
    let keys: Vec<&String> = agg.metrics.keys().collect();
    let mut s = String::from("row");
    for k in &keys {
        s.push(',');
        s.push_str(k);
    }
    s.push('\n');
    for r in per_seed {
        s.push_str(&format!("seed-{}", r.seed));
        for k in &keys {
            s.push_str(&format!(",{}", r.metrics.get(*k).copied().unwrap_or(f64::NAN)));
        }
        s.push('\n');
    }
    for (label, pick) in [("mean", 0), ("stderr", 1)] {
        s.push_str(label);
        for k in &keys {
            let m = agg.metrics[*k];
            s.push_str(&format!(",{}", if pick == 0 { m.mean } else { m.stderr }));
        }
        s.push('\n');
    }
    s
}

pub fn write_json<S: Serialize>(path: &Path, value: &S) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

pub fn read_json<D: DeserializeOwned>(path: &Path) -> Result<D> {
    Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
}

/// Run every seed and write `report-seed-<seed>.json`, `report-aggregate.json`
/// and optionally `report.csv` into `out_dir`.
pub fn run_pipeline(cfg: &ExperimentConfig, out_dir: &Path) -> Result<PipelineOutput> {
    cfg.validate().stage("config")?;
    let per_seed: Vec<SeedReport> = cfg.seeds.par_iter().map(|&s| run_seed(cfg, s)).collect::<Result<_>>()?;
    let agg = aggregate(cfg, &per_seed);
    fs::create_dir_all(out_dir).map_err(Error::from).stage("report")?;
    let mut files = Vec::new();
    for r in &per_seed {
        let p = out_dir.join(format!("report-seed-{}.json", r.seed));
        write_json(&p, r).stage("report")?;
        files.push(p);
    }
    let p = out_dir.join("report-aggregate.json");
    write_json(&p, &agg).stage("report")?;
    files.push(p);
    if cfg.write_csv {
        let p = out_dir.join("report.csv");
        fs::write(&p, report_csv(&per_seed, &agg))
            .map_err(Error::from)
            .stage("report")?;
        files.push(p);
    }
    Ok(PipelineOutput {
        per_seed,
        aggregate: agg,
        files,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_round_trip_and_errors() {
        let d = parse_csv("a,b,y\n1,2,3\n4,5,6\n7,8,9\n").unwrap();
        assert_eq!(d.len(), 3);
        assert_eq!(d.features.row(1), &[4.0, 5.0]);
        assert_eq!(parse_csv(&dataset_to_csv(&d).unwrap()).unwrap(), d);

        match parse_csv("a,y\n1,2\nx,3\n") {
            Err(Error::ParseError { line, column, .. }) => assert_eq!((line, column), (3, 1)),
            other => panic!("{other:?}"),
        }
        assert!(matches!(
            parse_csv("a,y\n1,\n"),
            Err(Error::MissingValue { line: 2, column: 2 })
        ));
        assert!(matches!(parse_csv("a,y\n"), Err(Error::EmptyFile)));
        assert!(matches!(parse_csv(""), Err(Error::EmptyFile)));
    }

    #[test]
    fn split_sizes_and_determinism() {
        let d = Dataset::unnamed(
            Matrix::from_fn(10, 1, |i, _| i as f64),
            (0..10).map(|i| i as f64).collect(),
        )
        .unwrap();
        let (a, b) = split(&d, 0.9, 4).unwrap();
        assert_eq!((a.len(), b.len()), (9, 1));
        assert_eq!(split(&d, 0.9, 4).unwrap(), (a.clone(), b.clone()));
        let mut all: Vec<f64> = a.targets.iter().chain(&b.targets).copied().collect();
        all.sort_by(f64::total_cmp);
        assert_eq!(all, d.targets);
        let one = d.subset(&[0]);
        assert!(matches!(split(&one, 0.9, 0), Err(Error::TooFewRows(1))));
    }

    #[test]
    fn flip_blobs_relabel_blobs() {
        let p = SynthParams::default();
        let (a, _) = gen_synth(SynthKind::Blobs, &p, 3).unwrap();
        let (b, t) = gen_synth(SynthKind::FlipBlobs, &p, 3).unwrap();
        assert_eq!(a.features, b.features);
        for (x, y) in a.targets.iter().zip(&b.targets) {
            assert_eq!(*y, 2.0 - x);
        }
        assert!(matches!(t, SynthTruth::Blobs { flipped: true, .. }));
    }

    #[test]
    fn synthetic_truth_is_stored() {
        let p = SynthParams {
            noise: 0.1,
            slope: 1.5,
            ..SynthParams::default()
        };
        let (_, t) = gen_synth(SynthKind::LinearRegression, &p, 1).unwrap();
        assert_eq!(
            t,
            SynthTruth::LinearRegression {
                slope: 1.5,
                intercept: 0.0,
                noise_sd: 0.1
            }
        );
        let (d, t) = gen_synth(SynthKind::DlfGp, &SynthParams::default(), 2).unwrap();
        let SynthTruth::DlfGp {
            phi, covariance, draws, ..
        } = t
        else {
            panic!()
        };
        assert_eq!(phi.shape(), (50, 3));
        assert!(covariance.max_abs_diff(&phi.matmul_t(&phi).add_diag(0.02)) == 0.0);
        assert_eq!(draws.shape(), (50, 200));
        assert_eq!(d.targets, draws.col_vec(0));
        assert!(gen_synth(
            SynthKind::Blobs,
            &SynthParams {
                classes: 1,
                ..SynthParams::default()
            },
            0
        )
        .is_err());
    }

    #[test]
    fn labels_must_be_class_indices() {
        let d = Dataset::unnamed(Matrix::zeros(2, 1), vec![0.0, 1.5]).unwrap();
        assert!(d.labels().is_err());
        let d = Dataset::unnamed(Matrix::zeros(2, 1), vec![0.0, 2.0]).unwrap();
        assert_eq!(d.class_count().unwrap(), 3);
    }

    #[test]
    fn config_defaults_fill_missing_fields() {
        let cfg: ExperimentConfig = serde_json::from_str(r#"{"seeds": [1, 2], "student": {"q": 4}}"#).unwrap();
        assert_eq!(cfg.seeds, vec![1, 2]);
        assert_eq!(cfg.student.q, 4);
        assert_eq!(cfg.student.hidden, vec![50]);
        cfg.validate().unwrap();
        let bad = ExperimentConfig {
            seeds: vec![],
            ..ExperimentConfig::default()
        };
        assert!(bad.validate().is_err());
    }
}
