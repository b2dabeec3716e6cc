//! Command-line front end: data generation, teacher training, distillation
//! and evaluation, each leaving a run manifest next to its outputs.

use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use crate::data::{self, Example, GeneratorSpec};
use crate::distill::{distill_dedier, distill_laplace, train_teacher, StrategyKind, TrainingConfig};
use crate::error::{Error, Result};
use crate::io::{sha256_file, write_atomic};
use crate::laplace::{mc_predictive_softmax, LaplacePosterior};
use crate::metrics::{
    evaluate_groups_threaded, features_at, margin_profile, model_calibration, train_probes,
    CalibrationReport, DEFAULT_ECE_BINS,
};
use crate::network::Checkpoint;
use crate::numerics::RngStream;

/// Environment variable naming the directory relative output paths resolve
/// against. `--out-root` takes precedence.
pub const OUTPUT_ROOT_ENV: &str = "KDLAPLACE_OUTPUT_ROOT";
pub const MANIFEST_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Parser)]
#[command(name = "kdlaplace", version, about = "Uncertainty-reweighted knowledge distillation")]
pub struct Cli {
    /// Cap on worker threads for evaluation fan-out.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Directory relative output paths are written under.
    #[arg(long, global = true)]
    pub out_root: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Subcommand, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "command")]
pub enum Command {
    /// Generate a synthetic spurious-correlation dataset.
    GenData(GenDataArgs),
    /// Train the teacher on the train split and report on the val split.
    TrainTeacher(TrainTeacherArgs),
    /// Distill a student from a teacher checkpoint.
    Distill(DistillArgs),
    /// Evaluate a checkpoint on a dataset.
    Eval(EvalArgs),
    /// Re-run the command recorded in a manifest and compare output hashes.
    Rerun(RerunArgs),
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct GenDataArgs {
    /// Generator spec (TOML, or JSON by extension).
    #[arg(long)]
    pub spec: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Emit a group-balanced set with this many examples per group instead.
    #[arg(long)]
    pub balanced_per_group: Option<usize>,
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
pub struct Overrides {
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub beta: Option<f64>,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub lambda: Option<f64>,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct TrainTeacherArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// Training config (TOML); defaults apply to missing keys.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub overrides: Overrides,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StrategyArg {
    Uniform,
    Margin,
    Laplace,
}

impl From<StrategyArg> for StrategyKind {
    fn from(s: StrategyArg) -> Self {
        match s {
            StrategyArg::Uniform => StrategyKind::Uniform,
            StrategyArg::Margin => StrategyKind::Margin,
            StrategyArg::Laplace => StrategyKind::LaplaceEntropy,
        }
    }
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct DistillArgs {
    #[arg(long)]
    pub teacher: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, value_enum)]
    pub strategy: StrategyArg,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub overrides: Overrides,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitArg {
    All,
    Train,
    Val,
    Test,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct EvalArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// Directory for reports.
    #[arg(long)]
    pub out_dir: PathBuf,
    /// Portion of the dataset to evaluate; splits use the checkpoint's config.
    #[arg(long, value_enum, default_value = "all")]
    pub split: SplitArg,
    /// Calibration report, plus the aux-exit posterior dump for students.
    #[arg(long)]
    pub laplace_report: bool,
    /// Per-layer confidence-margin profile.
    #[arg(long)]
    pub margins: bool,
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Monte-Carlo draws for the aux predictive (default: config `eval_mc_samples`).
    #[arg(long)]
    pub mc_samples: Option<usize>,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct RerunArgs {
    #[arg(long)]
    pub manifest: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FileDigest {
    pub path: PathBuf,
    pub sha256: String,
}

/// Provenance record written beside every command's outputs.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub schema_version: u32,
    pub artifact_version: String,
    pub command: Command,
    pub threads: usize,
    pub out_root: Option<PathBuf>,
    pub resolved_config: serde_json::Value,
    pub seed: u64,
    pub inputs: Vec<FileDigest>,
    pub outputs: Vec<FileDigest>,
    pub wall_time_secs: f64,
}

impl RunManifest {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: e.line(),
            message: e.to_string(),
        })
    }
}

struct Context {
    threads: usize,
    out_root: Option<PathBuf>,
}

impl Context {
    fn out(&self, p: &Path) -> PathBuf {
        match &self.out_root {
            Some(root) if p.is_relative() => root.join(p),
            _ => p.to_path_buf(),
        }
    }
}

/// What a command produced: resolved config, seed and written files.
struct Produced {
    config: serde_json::Value,
    seed: u64,
    inputs: Vec<PathBuf>,
    outputs: Vec<PathBuf>,
    manifest: PathBuf,
}

/// Runs a parsed invocation and returns the path of the manifest it wrote.
pub fn run(cli: Cli) -> Result<PathBuf> {
    let out_root = cli
        .out_root
        .or_else(|| std::env::var_os(OUTPUT_ROOT_ENV).map(PathBuf::from));
    execute(cli.command, cli.threads, out_root)
}

fn execute(command: Command, threads: Option<usize>, out_root: Option<PathBuf>) -> Result<PathBuf> {
    let started = Instant::now();
    let ctx = Context {
        threads: threads.unwrap_or(1).max(1),
        out_root: out_root.clone(),
    };
    let produced = match &command {
        Command::GenData(a) => gen_data(&ctx, a)?,
        Command::TrainTeacher(a) => train_teacher_cmd(&ctx, a)?,
        Command::Distill(a) => distill_cmd(&ctx, a)?,
        Command::Eval(a) => eval_cmd(&ctx, a)?,
        Command::Rerun(a) => return rerun(a),
    };
    let digest = |p: &PathBuf| -> Result<FileDigest> {
        Ok(FileDigest {
            path: p.clone(),
            sha256: sha256_file(p)?,
        })
    };
    let manifest = RunManifest {
        schema_version: MANIFEST_SCHEMA_VERSION,
        artifact_version: env!("CARGO_PKG_VERSION").to_string(),
        command,
        threads: ctx.threads,
        out_root,
        resolved_config: produced.config,
        seed: produced.seed,
        inputs: produced.inputs.iter().map(digest).collect::<Result<_>>()?,
        outputs: produced.outputs.iter().map(digest).collect::<Result<_>>()?,
        wall_time_secs: started.elapsed().as_secs_f64(),
    };
    write_json(&produced.manifest, &manifest)?;
    Ok(produced.manifest)
}

/// Re-executes a manifest's command and fails unless every output hash matches.
fn rerun(a: &RerunArgs) -> Result<PathBuf> {
    let old = RunManifest::load(&a.manifest)?;
    if old.schema_version != MANIFEST_SCHEMA_VERSION {
        return Err(Error::ConfigMismatch(format!(
            "manifest schema {} (this build reads {MANIFEST_SCHEMA_VERSION})",
            old.schema_version
        )));
    }
    if matches!(old.command, Command::Rerun(_)) {
        return Err(Error::ConfigMismatch("manifest records a rerun".into()));
    }
    let path = execute(old.command.clone(), Some(old.threads), old.out_root.clone())?;
    let new = RunManifest::load(&path)?;
    if new.outputs != old.outputs {
        let diff: Vec<String> = old
            .outputs
            .iter()
            .filter(|o| !new.outputs.contains(o))
            .map(|o| o.path.display().to_string())
            .collect();
        return Err(Error::ConfigMismatch(format!("rerun outputs differ: {}", diff.join(", "))));
    }
    Ok(path)
}

fn sidecar(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn pretty<T: Serialize>(value: &T) -> Vec<u8> {
    let mut text = serde_json::to_string_pretty(value).expect("serializable");
    text.push('\n');
    text.into_bytes()
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    write_atomic(path, &pretty(value))
}

fn read_text(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn load_spec(path: &Path) -> Result<GeneratorSpec> {
    let text = read_text(path)?;
    let spec: GeneratorSpec = if path.extension().is_some_and(|e| e == "json") {
        serde_json::from_str(&text).map_err(|e| Error::InvalidSpec(e.to_string()))?
    } else {
        toml::from_str(&text).map_err(|e| Error::InvalidSpec(e.to_string()))?
    };
    spec.validate()?;
    Ok(spec)
}

fn load_config(path: Option<&Path>, o: &Overrides) -> Result<TrainingConfig> {
    let mut cfg = match path {
        Some(p) => TrainingConfig::from_toml(&read_text(p)?)?,
        None => TrainingConfig::default(),
    };
    if let Some(v) = o.seed {
        cfg.seed = v;
    }
    if let Some(v) = o.epochs {
        cfg.epochs = v;
    }
    if let Some(v) = o.beta {
        cfg.beta_w = v;
    }
    if let Some(v) = o.alpha {
        cfg.alpha_w = v;
    }
    if let Some(v) = o.lambda {
        cfg.lambda = v;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn to_value<T: Serialize>(v: &T) -> serde_json::Value {
    serde_json::to_value(v).expect("serializable")
}

fn gen_data(ctx: &Context, a: &GenDataArgs) -> Result<Produced> {
    let mut spec = load_spec(&a.spec)?;
    if let Some(seed) = a.seed {
        spec.seed = seed;
    }
    let examples = match a.balanced_per_group {
        Some(k) => data::generate_balanced(&spec, k)?,
        None => data::generate(&spec)?,
    };
    let out = ctx.out(&a.out);
    data::save(&out, &examples, Some(&spec))?;
    Ok(Produced {
        config: to_value(&spec),
        seed: spec.seed,
        inputs: vec![a.spec.clone()],
        outputs: vec![out.clone()],
        manifest: sidecar(&out, ".manifest.json"),
    })
}

fn split_examples(examples: &[Example], cfg: &TrainingConfig) -> Result<data::Split> {
    data::split(examples.len(), &cfg.split, cfg.seed)
}

fn train_teacher_cmd(ctx: &Context, a: &TrainTeacherArgs) -> Result<Produced> {
    let cfg = load_config(a.config.as_deref(), &a.overrides)?;
    let examples = data::load(&a.data)?;
    let parts = split_examples(&examples, &cfg)?;
    let train = data::select(&examples, &parts.train);
    let teacher = train_teacher(&train, &cfg)?;
    let out = ctx.out(&a.out);
    Checkpoint::from_model("teacher", &teacher, &cfg.fingerprint()).save(&out)?;
    let mut outputs = vec![out.clone()];
    let val = data::select(&examples, &parts.val);
    if !val.is_empty() {
        let report = evaluate_groups_threaded(&teacher, &val, ctx.threads)?;
        let json = sidecar(&out, ".val_report.json");
        let csv = sidecar(&out, ".val_report.csv");
        write_json(&json, &report)?;
        write_atomic(&csv, report.to_csv().as_bytes())?;
        outputs.extend([json, csv]);
    }
    let resolved = sidecar(&out, ".config.json");
    write_json(&resolved, &cfg)?;
    outputs.push(resolved);
    Ok(Produced {
        config: to_value(&cfg),
        seed: cfg.seed,
        inputs: vec![a.data.clone()],
        outputs,
        manifest: sidecar(&out, ".manifest.json"),
    })
}

fn distill_cmd(ctx: &Context, a: &DistillArgs) -> Result<Produced> {
    let mut cfg = load_config(a.config.as_deref(), &a.overrides)?;
    cfg.strategy = a.strategy.into();
    if cfg.strategy == StrategyKind::Uniform && cfg.beta_w > 0.0 {
        eprintln!("warning: strategy uniform ignores beta_w = {}", cfg.beta_w);
    }
    cfg.validate()?;
    let teacher = Checkpoint::load(&a.teacher)?.to_model()?;
    let examples = data::load(&a.data)?;
    let parts = split_examples(&examples, &cfg)?;
    let train = data::select(&examples, &parts.train);
    let val = data::select(&examples, &parts.val);
    let monitor = (!val.is_empty()).then_some(val.as_slice());
    let outcome = match cfg.strategy {
        StrategyKind::LaplaceEntropy => distill_laplace(&teacher, &train, &cfg, monitor)?,
        _ => distill_dedier(&teacher, &train, &cfg, monitor)?,
    };
    let out = ctx.out(&a.out);
    let mut ckpt = Checkpoint::from_model("student", &outcome.student, &cfg.fingerprint());
    ckpt.exit_depth = outcome.aux_head.is_some().then_some(cfg.exit_depth);
    ckpt.aux_head = outcome.aux_head.clone();
    ckpt.save(&out)?;
    let history = sidecar(&out, ".epochs.csv");
    write_atomic(&history, outcome.history_csv().as_bytes())?;
    let resolved = sidecar(&out, ".config.json");
    write_json(&resolved, &cfg)?;
    Ok(Produced {
        config: to_value(&cfg),
        seed: cfg.seed,
        inputs: vec![a.teacher.clone(), a.data.clone()],
        outputs: vec![out.clone(), history, resolved],
        manifest: sidecar(&out, ".manifest.json"),
    })
}

fn eval_cmd(ctx: &Context, a: &EvalArgs) -> Result<Produced> {
    let ckpt = Checkpoint::load(&a.model)?;
    let model = ckpt.to_model()?;
    let cfg = load_config(a.config.as_deref(), &Overrides::default())?;
    let all = data::load(&a.data)?;
    let first = all.first().ok_or(Error::EmptyDataset)?;
    if first.features.len() != model.input_dim() {
        return Err(Error::DimMismatch {
            expected: model.input_dim(),
            actual: first.features.len(),
            context: "dataset features vs model input",
        });
    }
    let examples = match a.split {
        SplitArg::All => all.clone(),
        s => {
            let parts = split_examples(&all, &cfg)?;
            let idx = match s {
                SplitArg::Train => &parts.train,
                SplitArg::Val => &parts.val,
                _ => &parts.test,
            };
            data::select(&all, idx)
        }
    };
    let dir = ctx.out(&a.out_dir);
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let mut outputs = Vec::new();
    let mut emit = |name: &str, bytes: Vec<u8>| -> Result<()> {
        let p = dir.join(name);
        write_atomic(&p, &bytes)?;
        outputs.push(p);
        Ok(())
    };
    let report = evaluate_groups_threaded(&model, &examples, ctx.threads)?;
    emit("report.json", pretty(&report))?;
    emit("report.csv", report.to_csv().into_bytes())?;

    if a.laplace_report {
        let cal = model_calibration(&model, &examples, DEFAULT_ECE_BINS, ctx.threads)?;
        emit("calibration.json", pretty(&cal))?;
        emit("calibration.csv", cal.to_csv().into_bytes())?;
        match (&ckpt.aux_head, ckpt.exit_depth) {
            (Some(head), Some(depth)) => {
                let features = features_at(&model, &examples, depth)?;
                let post = LaplacePosterior::fit(head.clone(), &features, cfg.ridge)?;
                emit("posterior.json", pretty(&post.dump()))?;
                let samples = a.mc_samples.unwrap_or(cfg.eval_mc_samples);
                let aux_cal = aux_calibration(&post, &features, &examples, samples, cfg.seed, ctx.threads)?;
                emit("aux_calibration.json", pretty(&aux_cal))?;
                emit("aux_calibration.csv", aux_cal.to_csv().into_bytes())?;
            }
            _ => eprintln!("note: checkpoint has no aux head; skipping posterior dump"),
        }
    }

    if a.margins {
        let layers: Vec<usize> = (1..model.depth()).collect();
        let probe_rng = RngStream::new(cfg.seed).derive("probes");
        let probes = train_probes(&model, &examples, &layers, &cfg.aux_settings(), &probe_rng)?;
        let profile = margin_profile(&model, &probes, &examples, &layers)?;
        emit("margins.csv", profile.to_csv().into_bytes())?;
        emit("margins_per_example.csv", profile.per_example_csv(&layers).into_bytes())?;
    }

    let manifest = dir.join("manifest.json");
    Ok(Produced {
        config: to_value(&cfg),
        seed: cfg.seed,
        inputs: vec![a.model.clone(), a.data.clone()],
        outputs,
        manifest,
    })
}

/// Calibration of the aux exit's Monte-Carlo Laplace predictive. Example `i`
/// samples from its own derived stream, so threads do not change the result.
fn aux_calibration(
    post: &LaplacePosterior,
    features: &crate::numerics::Matrix,
    examples: &[Example],
    samples: usize,
    seed: u64,
    threads: usize,
) -> Result<CalibrationReport> {
    use rayon::prelude::*;
    let root = RngStream::new(seed).derive("eval-mc");
    let one = |i: usize| -> Result<Vec<f64>> {
        let pred = post.predictive(features.row(i))?;
        Ok(mc_predictive_softmax(&pred, samples, 1.0, &mut root.derive_index(i as u64)))
    };
    let probs: Vec<Vec<f64>> = if threads <= 1 {
        (0..examples.len()).map(one).collect::<Result<_>>()?
    } else {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .map_err(|e| Error::ConfigMismatch(format!("thread pool: {e}")))?;
        pool.install(|| (0..examples.len()).into_par_iter().map(one).collect::<Result<_>>())?
    };
    CalibrationReport::from_probs(&probs, &data::labels(examples), DEFAULT_ECE_BINS)
}
