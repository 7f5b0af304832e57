//! `siw` command-line workflow: dataset generation, training, evaluation,
//! prediction, trend sweeps and loop-back verification, all writing into one
//! self-describing run directory.

use std::ffi::OsString;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::Command;

use clap::{Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use siw_core::config::{ConfigError, RunConfig};
use siw_core::dataset::{self, DatasetError};
use siw_core::eval::{self, EvalError, Parameter};
use siw_core::pipeline::{
    self, Estimate, ModelKind, PipelineBundle, PipelineConfig, PipelineError, PreparedData, SplitName,
};
use siw_core::wave::{self, CascadeOptions, Geometry, WaveError, PARAMETER_NAMES};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const CONFIG_FILE: &str = "config.json";
pub const DATASET_DIR: &str = "dataset";
pub const BUNDLE_DIR: &str = "bundle";
pub const REPORTS_DIR: &str = "reports";

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Wave(#[from] WaveError),
    #[error("missing artifact: {0}")]
    MissingArtifact(String),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) | CliError::Config(_) => EXIT_USAGE,
            _ => EXIT_DATA,
        }
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |source| CliError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Debug, Parser)]
#[command(name = "siw", version, about = "SIW resonator inverse design")]
pub struct Cli {
    /// JSON run configuration. Defaults to the run directory's config.json.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Run directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Base training seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads for generation and verification.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Cmd,
}

#[derive(Debug, Subcommand)]
pub enum Cmd {
    /// Simulate every grid geometry and store the split, normalized dataset.
    Generate,
    /// Train a model on the stored dataset.
    Train {
        #[arg(long, value_enum)]
        model: ModelArg,
    },
    /// Predict the geometry of one spectrum CSV.
    Predict {
        #[arg(long, value_enum)]
        model: ModelArg,
        #[arg(long)]
        input: PathBuf,
        /// Clip each parameter into its training range.
        #[arg(long)]
        clamp: bool,
    },
    /// Write metrics, trace, histograms, comparison table and loop-back scores.
    Evaluate,
    /// Sweep one parameter around the reference geometry.
    Sweep {
        #[arg(long, value_parser = parse_parameter)]
        param: Parameter,
        /// Comma-separated values; defaults depend on the parameter.
        #[arg(long, value_delimiter = ',')]
        values: Option<Vec<f64>>,
    },
    /// Re-simulate predicted designs for every spectrum CSV in a directory.
    Verify {
        #[arg(long)]
        targets: PathBuf,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ModelArg {
    Fim,
    Hifr2,
    Irc,
    All,
}

impl ModelArg {
    fn kinds(self) -> Vec<ModelKind> {
        match self {
            ModelArg::Fim => vec![ModelKind::Fim],
            ModelArg::Hifr2 => vec![ModelKind::Hifr2],
            ModelArg::Irc => vec![ModelKind::Irc],
            ModelArg::All => ModelKind::ALL.to_vec(),
        }
    }
}

fn parse_parameter(s: &str) -> Result<Parameter, String> {
    s.parse::<Parameter>().map_err(|e| e.to_string())
}

impl Cmd {
    fn name(&self) -> &'static str {
        match self {
            Cmd::Generate => "generate",
            Cmd::Train { .. } => "train",
            Cmd::Predict { .. } => "predict",
            Cmd::Evaluate => "evaluate",
            Cmd::Sweep { .. } => "sweep",
            Cmd::Verify { .. } => "verify",
        }
    }
}

/// Sweep values around the reference geometry that keep every variant valid.
pub fn default_sweep_values(p: Parameter) -> Vec<f64> {
    match p {
        Parameter::D1 => vec![4.5, 5.5, 6.5],
        Parameter::D2 => vec![7.0, 8.0, 9.0],
        Parameter::R1 => vec![0.1, 0.2, 0.3],
        Parameter::R2 => vec![0.2, 0.4, 0.6],
        Parameter::R3 => vec![0.6, 0.8, 1.0],
        Parameter::G => vec![26.0, 31.0, 36.0],
    }
}

/// Derived per-stage seeds, echoed in the manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Seeds {
    pub split: u64,
    pub fim: u64,
    pub ffm: u64,
    pub rrm: u64,
    pub correctors: Vec<u64>,
}

impl Seeds {
    pub fn of(config: &RunConfig) -> Self {
        let p: &PipelineConfig = &config.pipeline;
        Self {
            split: config.split.seed,
            fim: p.fim_train().seed,
            ffm: p.ffm_train().seed,
            rrm: p.rrm_train().seed,
            correctors: (1..=p.irc_iterations).map(|i| p.corrector_train(i).seed).collect(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct HistoryEntry {
    pub command: String,
    pub argv: Vec<String>,
}

/// `manifest.json`: the effective config of the latest command plus the
/// command history of the run directory.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool_version: String,
    pub git_describe: String,
    pub command: String,
    pub threads: Option<usize>,
    pub config: RunConfig,
    pub seeds: Seeds,
    pub history: Vec<HistoryEntry>,
}

pub fn git_describe() -> String {
    Command::new("git")
        .args(["describe", "--always", "--dirty", "--tags"])
        .current_dir(env!("CARGO_MANIFEST_DIR"))
        .output()
        .ok()
        .filter(|o| o.status.success())
        .and_then(|o| String::from_utf8(o.stdout).ok())
        .map(|s| s.trim().to_string())
        .filter(|s| !s.is_empty())
        .unwrap_or_else(|| "unknown".into())
}

struct Context {
    out: PathBuf,
    config: RunConfig,
    threads: Option<usize>,
}

impl Context {
    /// Precedence is flag > file > default. Without `--config` the run
    /// directory's own config.json is the file layer.
    fn resolve(cli: &Cli) -> Result<Self, CliError> {
        let (mut config, out) = match &cli.config {
            Some(path) => {
                let c = RunConfig::load(path)?;
                let out = cli.out.clone().unwrap_or_else(|| PathBuf::from(&c.out_dir));
                (c, out)
            }
            None => {
                let out = cli
                    .out
                    .clone()
                    .unwrap_or_else(|| PathBuf::from(&RunConfig::default().out_dir));
                let own = out.join(CONFIG_FILE);
                let c = if own.is_file() {
                    RunConfig::load(&own)?
                } else {
                    RunConfig::default()
                };
                (c, out)
            }
        };
        if let Some(seed) = cli.seed {
            config.pipeline.seed = seed;
        }
        config.out_dir = out.display().to_string();
        config.validate()?;
        if cli.threads == Some(0) {
            return Err(CliError::Usage("--threads must be at least 1".into()));
        }
        Ok(Self {
            out,
            config,
            threads: cli.threads,
        })
    }

    fn dataset_dir(&self) -> PathBuf {
        self.out.join(DATASET_DIR)
    }

    fn bundle_dir(&self) -> PathBuf {
        self.out.join(BUNDLE_DIR)
    }

    fn write(&self, name: &str, contents: &str) -> Result<PathBuf, CliError> {
        let path = self.out.join(name);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(io_err(parent))?;
        }
        fs::write(&path, contents).map_err(io_err(&path))?;
        Ok(path)
    }

    fn record(&self, command: &str, argv: &[String]) -> Result<(), CliError> {
        fs::create_dir_all(&self.out).map_err(io_err(&self.out))?;
        let path = self.out.join(MANIFEST_FILE);
        let mut history = fs::read_to_string(&path)
            .ok()
            .and_then(|t| serde_json::from_str::<RunManifest>(&t).ok())
            .map(|m| m.history)
            .unwrap_or_default();
        history.push(HistoryEntry {
            command: command.into(),
            argv: argv.to_vec(),
        });
        let manifest = RunManifest {
            tool_version: env!("CARGO_PKG_VERSION").into(),
            git_describe: git_describe(),
            command: command.into(),
            threads: self.threads,
            config: self.config.clone(),
            seeds: Seeds::of(&self.config),
            history,
        };
        self.write(MANIFEST_FILE, &serde_json::to_string_pretty(&manifest)?)?;
        self.write(CONFIG_FILE, &self.config.to_json())?;
        Ok(())
    }

    /// Runs `f` on a pool of the requested size, or the global pool.
    fn pooled<T: Send>(&self, f: impl FnOnce() -> T + Send) -> Result<T, CliError> {
        match self.threads {
            None => Ok(f()),
            Some(n) => {
                let pool = rayon::ThreadPoolBuilder::new()
                    .num_threads(n)
                    .build()
                    .map_err(|e| CliError::Usage(format!("cannot build thread pool: {e}")))?;
                Ok(pool.install(f))
            }
        }
    }

    fn load_data(&self) -> Result<(dataset::Dataset, PreparedData), CliError> {
        let dir = self.dataset_dir();
        if !dir.join(dataset::MANIFEST_FILE).is_file() {
            return Err(CliError::MissingArtifact(format!(
                "no dataset in {}; run `siw generate` first",
                dir.display()
            )));
        }
        let ds = dataset::load(&dir)?;
        let data = PreparedData::from_dataset(&ds)?;
        Ok((ds, data))
    }

    fn load_bundle(&self) -> Result<PipelineBundle, CliError> {
        let dir = self.bundle_dir();
        if !dir.join(pipeline::BUNDLE_MANIFEST_FILE).is_file() {
            return Err(CliError::MissingArtifact(format!(
                "no trained models in {}; run `siw train` first",
                dir.display()
            )));
        }
        Ok(pipeline::load_bundle(&dir)?)
    }
}

/// Parses `argv` (including the program name), runs the subcommand and
/// returns the process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let argv: Vec<OsString> = argv.into_iter().map(Into::into).collect();
    let cli = match Cli::try_parse_from(&argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .try_init();
    let argv: Vec<String> = argv.iter().map(|a| a.to_string_lossy().into_owned()).collect();
    match execute(&cli, &argv) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

pub fn execute(cli: &Cli, argv: &[String]) -> Result<(), CliError> {
    let ctx = Context::resolve(cli)?;
    match &cli.command {
        Cmd::Generate => generate(&ctx)?,
        Cmd::Train { model } => train(&ctx, *model)?,
        Cmd::Predict { model, input, clamp } => predict(&ctx, *model, input, *clamp)?,
        Cmd::Evaluate => evaluate(&ctx)?,
        Cmd::Sweep { param, values } => sweep(&ctx, *param, values.as_deref())?,
        Cmd::Verify { targets } => verify(&ctx, targets)?,
    }
    ctx.record(cli.command.name(), argv)
}

fn generate(ctx: &Context) -> Result<(), CliError> {
    let c = &ctx.config;
    let mut ds = ctx.pooled(|| dataset::generate(&c.parameter_grid, &c.substrate, &c.frequency_grid))??;
    ds.prepare(c.split, c.target_mode)?;
    dataset::save(&ds, &ctx.dataset_dir())?;
    let split = ds.split.as_ref().expect("prepared above");
    println!(
        "generated {} samples ({} train / {} validation / {} test) in {:.2} s -> {}",
        ds.n_samples,
        split.train.len(),
        split.validation.len(),
        split.test.len(),
        ds.wall_time_s,
        ctx.dataset_dir().display()
    );
    Ok(())
}

fn train(ctx: &Context, model: ModelArg) -> Result<(), CliError> {
    let (_, data) = ctx.load_data()?;
    let wants_fim = model == ModelArg::Fim || model == ModelArg::All;
    let existing = if ctx.bundle_dir().join(pipeline::BUNDLE_MANIFEST_FILE).is_file() {
        Some(ctx.load_bundle()?)
    } else {
        None
    };
    let mut bundle = match existing {
        Some(b) if !wants_fim => {
            if b.dataset_checksum != data.dataset_checksum {
                return Err(CliError::MissingArtifact(
                    "the stored FIM was trained on a different dataset; retrain it with `--model fim`".into(),
                ));
            }
            if b.config != ctx.config.pipeline {
                return Err(CliError::MissingArtifact(
                    "the stored FIM was trained with a different pipeline config; retrain it with `--model fim`".into(),
                ));
            }
            b
        }
        _ => PipelineBundle::new(&data, ctx.config.pipeline.clone()),
    };
    for kind in model.kinds() {
        if kind != ModelKind::Fim && !bundle.has(ModelKind::Fim) {
            return Err(CliError::MissingArtifact(format!(
                "{} needs a trained FIM; run `siw train --model fim` first",
                kind.label()
            )));
        }
        log::info!("training {}", kind.label());
        bundle.train(&data, kind)?;
        if kind == ModelKind::Fim {
            // A fresh FIM invalidates every stage built on top of it.
            bundle.ffm = None;
            bundle.rrm = None;
            bundle.irc = None;
        }
    }
    pipeline::save_bundle(&bundle, &ctx.bundle_dir())?;
    let metrics = eval::compute_metrics(&bundle, &data)?;
    for kind in model.kinds() {
        if let Some(row) = metrics.get(kind, SplitName::Test) {
            println!("{} test mse {:.6} mae {:.6}", kind.label(), row.mse, row.mae);
        }
    }
    Ok(())
}

#[derive(Debug, Serialize)]
struct ParameterSet {
    iteration: usize,
    #[serde(flatten)]
    values: serde_json::Map<String, serde_json::Value>,
}

#[derive(Debug, Serialize)]
struct PredictionOutput {
    model: String,
    input: String,
    clamped: bool,
    parameters: serde_json::Map<String, serde_json::Value>,
    trace: Vec<ParameterSet>,
}

fn named(g: &Geometry) -> serde_json::Map<String, serde_json::Value> {
    PARAMETER_NAMES
        .iter()
        .zip(g.to_array())
        .map(|(n, v)| (n.to_string(), serde_json::Value::from(v)))
        .collect()
}

fn predict(ctx: &Context, model: ModelArg, input: &Path, clamp: bool) -> Result<(), CliError> {
    let kind = match model {
        ModelArg::Fim => ModelKind::Fim,
        ModelArg::Hifr2 => ModelKind::Hifr2,
        ModelArg::Irc => ModelKind::Irc,
        ModelArg::All => return Err(CliError::Usage("predict takes a single model".into())),
    };
    let bundle = ctx.load_bundle()?;
    let text = fs::read_to_string(input).map_err(io_err(input))?;
    let spectrum = eval::read_spectrum_csv(&text, Some(&bundle.frequency_grid))?;
    let raw: Vec<Estimate> = match kind {
        ModelKind::Fim => vec![pipeline::predict_fim(&bundle, &spectrum, false)?],
        ModelKind::Hifr2 => {
            let p = pipeline::predict_hifr2(&bundle, &spectrum)?;
            vec![p.p0, p.p]
        }
        ModelKind::Irc => pipeline::predict_irc(&bundle, &spectrum)?.iterations,
    };
    let trace = raw
        .iter()
        .map(|e| {
            let n: Vec<f32> = e.normalized.iter().map(|&v| v as f32).collect();
            bundle.estimate(&n, clamp).map(|e| e.geometry)
        })
        .collect::<Result<Vec<_>, _>>()?;
    let output = PredictionOutput {
        model: kind.label().into(),
        input: input.display().to_string(),
        clamped: clamp,
        parameters: named(trace.last().expect("at least one estimate")),
        trace: trace
            .iter()
            .enumerate()
            .map(|(i, g)| ParameterSet {
                iteration: i,
                values: named(g),
            })
            .collect(),
    };
    let json = serde_json::to_string_pretty(&output)?;
    let stem = input
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    ctx.write(
        &format!("predictions/{stem}_{}.json", kind.label().to_lowercase()),
        &json,
    )?;
    let mut stdout = std::io::stdout().lock();
    let _ = writeln!(stdout, "{json}");
    Ok(())
}

fn evaluate(ctx: &Context) -> Result<(), CliError> {
    let (ds, data) = ctx.load_data()?;
    let bundle = ctx.load_bundle()?;
    let dir = ctx.out.join(REPORTS_DIR);
    let truth = Geometry::reference();
    let reference = wave::simulate(&ds.substrate, &truth, &bundle.frequency_grid)?;
    let metrics = eval::write_reports(&dir, &bundle, &data, Some((&reference, truth)))?;
    fs::write(dir.join("predictions.csv"), eval::predictions_csv(&bundle, &data)?).map_err(io_err(&dir))?;

    let n = ctx.config.verify.n_targets.min(data.split.test.len());
    let targets: Vec<_> = data.split.test[..n].iter().map(|&i| ds.spectrum(i)).collect();
    let bounds = ds.parameter_grid.bounds();
    let score = ctx.config.verify.score;
    let report = ctx.pooled(|| eval::verify_designs(&bundle, &ds.substrate, &bounds, &targets, score))??;
    fs::write(dir.join("verify.csv"), report.to_csv()).map_err(io_err(&dir))?;

    for row in metrics.rows.iter().filter(|r| r.split == SplitName::Test) {
        println!("{} test mse {:.6} mae {:.6}", row.model.label(), row.mse, row.mae);
    }
    for kind in ModelKind::ALL {
        if let Some(m) = report.mean_mse(kind) {
            println!("{} loop-back spectrum mse {:.6} over {n} targets", kind.label(), m);
        }
    }
    println!("reports -> {}", dir.display());
    Ok(())
}

fn sweep(ctx: &Context, param: Parameter, values: Option<&[f64]>) -> Result<(), CliError> {
    let values = values
        .map(<[f64]>::to_vec)
        .unwrap_or_else(|| default_sweep_values(param));
    if values.len() < 2 {
        return Err(CliError::Usage("a sweep needs at least two values".into()));
    }
    let c = &ctx.config;
    let report = eval::trend_check(
        &c.substrate,
        &Geometry::reference(),
        param,
        &values,
        &c.frequency_grid,
        &CascadeOptions::default(),
    )?;
    ctx.write(&format!("sweep_{}.csv", param.name()), &report.to_csv())?;
    print!("{}", report.to_csv());
    println!("verdict: {}", report.verdict.as_str());
    Ok(())
}

fn verify(ctx: &Context, targets: &Path) -> Result<(), CliError> {
    let bundle = ctx.load_bundle()?;
    let named_targets = eval::read_spectrum_dir(targets, Some(&bundle.frequency_grid))?;
    if named_targets.is_empty() {
        return Err(CliError::MissingArtifact(format!(
            "no spectrum CSV files in {}",
            targets.display()
        )));
    }
    let spectra: Vec<_> = named_targets.iter().map(|(_, s)| s.clone()).collect();
    let bounds = ctx.config.parameter_grid.bounds();
    let score = ctx.config.verify.score;
    let report = ctx.pooled(|| eval::verify_designs(&bundle, &ctx.config.substrate, &bounds, &spectra, score))??;
    let mut csv = String::from("file\n");
    for (name, _) in &named_targets {
        csv.push_str(name);
        csv.push('\n');
    }
    ctx.write("verify/targets.csv", &csv)?;
    ctx.write("verify/verify.csv", &report.to_csv())?;
    for kind in ModelKind::ALL {
        if let Some(m) = report.mean_mse(kind) {
            println!("{} spectrum mse {:.6} over {} targets", kind.label(), m, spectra.len());
        }
    }
    Ok(())
}
