use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use dlf_core::design::DesignStrategy;
use dlf_core::dlf::EmMode;
use dlf_core::pipeline::{
    adapt, distill, evaluate, gen_synth, load_csv, ood, read_json, run_pipeline, sample_student, train_teachers,
    write_csv, write_json, ExperimentConfig, InitMode, Student, SynthKind, SynthParams,
};
use dlf_core::shift::HeadConfig;
use dlf_core::teacher::{Task, TeacherEnsemble};
use dlf_core::{Error, SeededRng};

#[derive(Parser)]
#[command(
    name = "dlf",
    version,
    about = "Distill a deep ensemble into a latent factor student"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic dataset as CSV, plus its generating parameters.
    GenSynth(GenSynthArgs),
    /// Train a teacher ensemble on a CSV.
    TrainTeachers(TrainArgs),
    /// Fit a student to saved teachers.
    Distill(DistillArgs),
    /// Teacher and student metrics on a test CSV.
    Evaluate(EvaluateArgs),
    /// Draw student functions at the inputs of a CSV.
    Sample(SampleArgs),
    /// Fit a classification head on new data with the body frozen.
    ShiftAdapt(ShiftArgs),
    /// AUROC of mutual information between in- and out-of-distribution inputs.
    OodScore(OodArgs),
    /// The whole workflow for every configured seed.
    Run(RunArgs),
}

/// Settings that override the config file.
#[derive(Args, Default)]
struct Overrides {
    /// Experiment config (JSON); omitted fields take their defaults.
    #[arg(long, env = "DLF_CONFIG")]
    config: Option<PathBuf>,
    #[arg(long)]
    q: Option<usize>,
    /// MMD weight during pretraining.
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long, value_parser = parse::<DesignStrategy>)]
    design: Option<DesignStrategy>,
    #[arg(long)]
    design_ratio: Option<f64>,
    #[arg(long, value_parser = parse::<EmMode>)]
    em_mode: Option<EmMode>,
    #[arg(long, value_parser = parse::<InitMode>)]
    init: Option<InitMode>,
    /// Comma-separated seeds.
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
}

fn parse<T: std::str::FromStr<Err = Error>>(s: &str) -> Result<T, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

impl Overrides {
    fn load(&self) -> anyhow::Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(p) => staged("config", ExperimentConfig::from_file(p))?,
            None => ExperimentConfig::default(),
        };
        let s = &mut cfg.student;
        if let Some(q) = self.q {
            s.q = q;
        }
        if let Some(l) = self.lambda {
            s.pretrain.lambda = l;
        }
        if let Some(d) = self.design {
            s.design = d;
        }
        if let Some(r) = self.design_ratio {
            s.design_ratio = r;
        }
        if let Some(m) = self.em_mode {
            s.em.mode = m;
        }
        if let Some(i) = self.init {
            s.init = i;
        }
        if let Some(seeds) = &self.seeds {
            cfg.seeds = seeds.clone();
        }
        cfg.validate().map_err(|e| Error::Stage {
            stage: "config",
            source: Box::new(e),
        })?;
        Ok(cfg)
    }
}

#[derive(Args)]
struct GenSynthArgs {
    #[arg(long, value_parser = parse::<SynthKind>)]
    kind: SynthKind,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    /// Where to write the generating parameters as JSON.
    #[arg(long)]
    truth: Option<PathBuf>,
    /// Generator parameters (JSON); the flags below override it.
    #[arg(long)]
    params: Option<PathBuf>,
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    noise: Option<f64>,
    #[arg(long)]
    classes: Option<usize>,
    #[arg(long)]
    offset: Option<f64>,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long, value_parser = parse_task, default_value = "regression")]
    task: Task,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    overrides: Overrides,
}

fn parse_task(s: &str) -> Result<Task, String> {
    match s {
        "regression" => Ok(Task::Regression),
        "classification" => Ok(Task::Classification),
        _ => Err(format!("unknown task `{s}`")),
    }
}

#[derive(Args)]
struct DistillArgs {
    #[arg(long)]
    teachers: PathBuf,
    /// CSV whose feature rows form the design pool.
    #[arg(long)]
    pool: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    /// Where to write EM and pretraining traces.
    #[arg(long)]
    report: Option<PathBuf>,
    #[command(flatten)]
    overrides: Overrides,
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long)]
    teachers: PathBuf,
    #[arg(long)]
    student: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Metrics JSON; printed to stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    overrides: Overrides,
}

#[derive(Args)]
struct SampleArgs {
    #[arg(long)]
    student: PathBuf,
    /// CSV whose feature rows are the query inputs.
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value_t = 10)]
    count: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ShiftArgs {
    #[arg(long)]
    student: PathBuf,
    /// Labelled data from the shifted distribution.
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Args)]
struct OodArgs {
    #[arg(long)]
    student: PathBuf,
    #[arg(long = "in")]
    inside: PathBuf,
    #[arg(long = "out-of")]
    outside: PathBuf,
    #[arg(long, default_value_t = 100)]
    samples: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct RunArgs {
    #[arg(long, env = "DLF_OUT_DIR", default_value = "dlf-out")]
    out_dir: PathBuf,
    #[command(flatten)]
    overrides: Overrides,
}

fn staged<T>(stage: &'static str, r: dlf_core::Result<T>) -> anyhow::Result<T> {
    r.map_err(|e| match e {
        Error::Stage { .. } => e.into(),
        other => Error::Stage {
            stage,
            source: Box::new(other),
        }
        .into(),
    })
}

fn load_student(path: &Path) -> anyhow::Result<Student> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    staged("load-student", Student::from_json(&text))
}

fn load_teachers(path: &Path) -> anyhow::Result<TeacherEnsemble<f64>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    staged("load-teachers", TeacherEnsemble::from_json(&text))
}

fn classification(student: Student, what: &str) -> anyhow::Result<dlf_core::MultiDlfModel> {
    match student {
        Student::Classification(m) => Ok(m),
        Student::Regression(_) => bail!("{what}: needs a classification student"),
    }
}

fn emit_json<S: serde::Serialize>(out: Option<&Path>, value: &S) -> anyhow::Result<()> {
    match out {
        Some(p) => staged("report", write_json(p, value)),
        None => {
            println!("{}", serde_json::to_string_pretty(value)?);
            Ok(())
        }
    }
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::GenSynth(a) => {
            let mut p: SynthParams = match &a.params {
                Some(path) => staged("data", read_json(path))?,
                None => SynthParams::default(),
            };
            p.n = a.n.unwrap_or(p.n);
            p.noise = a.noise.unwrap_or(p.noise);
            p.classes = a.classes.unwrap_or(p.classes);
            p.offset = a.offset.unwrap_or(p.offset);
            let (data, truth) = staged("data", gen_synth(a.kind, &p, a.seed))?;
            staged("data", write_csv(&data, &a.out))?;
            if let Some(t) = &a.truth {
                staged("data", write_json(t, &truth))?;
            }
        }
        Command::TrainTeachers(a) => {
            let cfg = a.overrides.load()?;
            let data = staged("data", load_csv(&a.data))?;
            let classes = match a.task {
                Task::Classification => staged("data", data.class_count())?,
                Task::Regression => 0,
            };
            let ens = staged(
                "train-teachers",
                train_teachers(
                    &data,
                    a.task,
                    classes,
                    &cfg.teacher,
                    &SeededRng::new(a.seed).fork("teachers"),
                ),
            )?;
            fs::write(&a.out, staged("train-teachers", ens.to_json())?)?;
        }
        Command::Distill(a) => {
            let cfg = a.overrides.load()?;
            let ens = load_teachers(&a.teachers)?;
            let pool = staged("data", load_csv(&a.pool))?;
            let (student, report) = staged(
                "distill",
                distill(
                    &ens,
                    &pool.features,
                    &cfg.student,
                    &SeededRng::new(a.seed).fork("distill"),
                ),
            )?;
            fs::write(&a.out, staged("distill", student.to_json())?)?;
            if let Some(r) = &a.report {
                staged("report", write_json(r, &report))?;
            }
        }
        Command::Evaluate(a) => {
            let cfg = a.overrides.load()?;
            let ens = load_teachers(&a.teachers)?;
            let student = load_student(&a.student)?;
            let data = staged("data", load_csv(&a.data))?;
            let metrics = staged(
                "evaluate",
                evaluate(
                    &ens,
                    &student,
                    &data,
                    &cfg.eval,
                    &SeededRng::new(a.seed).fork("evaluate"),
                ),
            )?;
            emit_json(a.out.as_deref(), &metrics)?;
        }
        Command::Sample(a) => {
            let student = load_student(&a.student)?;
            let data = staged("data", load_csv(&a.data))?;
            let (header, rows) = staged(
                "sample",
                sample_student(&student, &data.features, a.count, &mut SeededRng::new(a.seed)),
            )?;
            let mut text = header.join(",");
            text.push('\n');
            for row in rows {
                let cells: Vec<String> = row.iter().map(f64::to_string).collect();
                text.push_str(&cells.join(","));
                text.push('\n');
            }
            fs::write(&a.out, text)?;
        }
        Command::ShiftAdapt(a) => {
            let model = classification(load_student(&a.student)?, "shift-adapt")?;
            let data = staged("data", load_csv(&a.data))?;
            let mut cfg = HeadConfig::default();
            cfg.epochs = a.epochs.unwrap_or(cfg.epochs);
            cfg.lr = a.lr.unwrap_or(cfg.lr);
            let (head, report) = staged("shift-adapt", adapt(&model, &data, &cfg, &mut SeededRng::new(a.seed)))?;
            fs::write(&a.out, staged("shift-adapt", head.to_json())?)?;
            if let Some(r) = &a.report {
                staged("report", write_json(r, &report))?;
            }
            eprintln!(
                "accuracy on adaptation data: {:.4} -> {:.4}",
                report.accuracy_before, report.accuracy_after
            );
        }
        Command::OodScore(a) => {
            let model = classification(load_student(&a.student)?, "ood-score")?;
            let inside = staged("data", load_csv(&a.inside))?;
            let outside = staged("data", load_csv(&a.outside))?;
            let report = staged(
                "ood-score",
                ood(&model, &inside, &outside, a.samples, &mut SeededRng::new(a.seed)),
            )?;
            eprintln!("auroc {:.4}", report.auroc);
            emit_json(a.out.as_deref(), &report)?;
        }
        Command::Run(a) => {
            let cfg = a.overrides.load()?;
            let out = run_pipeline(&cfg, &a.out_dir)?;
            for f in &out.files {
                println!("{}", f.display());
            }
        }
    }
    Ok(())
}

/// Exit code per failing stage, so scripts can tell them apart.
fn exit_code(err: &anyhow::Error) -> u8 {
    let stage = err
        .chain()
        .find_map(|e| e.downcast_ref::<Error>().and_then(Error::stage_name));
    match stage {
        Some("config") => 2,
        Some("data" | "split") => 3,
        Some("train-teachers" | "load-teachers") => 4,
        Some("distill" | "load-student") => 5,
        Some("evaluate") => 6,
        Some("sample") => 7,
        Some("shift-adapt") => 8,
        Some("ood-score") => 9,
        Some("report") => 10,
        _ => 1,
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            // stage errors already print their source, so skip repeats
            let mut msg = String::new();
            for cause in e.chain().map(ToString::to_string) {
                if !msg.ends_with(&cause) {
                    if !msg.is_empty() {
                        msg.push_str(": ");
                    }
                    msg.push_str(&cause);
                }
            }
            eprintln!("error: {msg}");
            ExitCode::from(exit_code(&e))
        }
    }
}
