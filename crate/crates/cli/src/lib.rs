//! Argument parsing and subcommand dispatch for the `anemia` binary.

use std::ffi::OsString;
use std::path::{Path, PathBuf};
use std::time::Duration;

use anemia_core::data::{load_dataset, stratified_split, DatasetSplit, ANEMIC, NUM_CLASSES};
use anemia_core::metrics::{confusion, derive_metrics, export_report, roc_auc, roc_points, EvalMetrics, RocPoint};
use anemia_core::model::{read_checkpoint_meta, CheckpointPaths, InferenceModel};
use anemia_core::training::{self, Profile, TrainConfig};
use anemia_service::api::{build_report, serve, ServeConfig};
use anemia_service::persistence::{self, data_dir, process_env, select_backend};
use clap::{Args, Parser, Subcommand};

pub mod predictions;

pub const SPLIT_FILE: &str = "split.json";
pub const EXPORT_STEM: &str = "model";

#[derive(Debug, Parser)]
#[command(name = "anemia", version, about = "Anemia screening from eye and fingernail photographs")]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct GlobalArgs {
    /// Training config file (JSON); keys layer over the profile defaults.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Seed for splitting, initialisation, augmentation and mixup.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[arg(long, global = true, env = "ANEMIA_DATA_ROOT")]
    pub data_root: Option<PathBuf>,
    #[arg(long, global = true, default_value = "runs/latest")]
    pub out_dir: PathBuf,
    #[arg(long, global = true, value_parser = parse_profile)]
    pub profile: Option<Profile>,
    /// Checkpoint weights or sidecar path.
    #[arg(long, global = true)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long, global = true, env = "PORT", default_value_t = 8000)]
    pub port: u16,
    /// Config override as dotted.key=value; repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

fn parse_profile(s: &str) -> Result<Profile, String> {
    s.parse().map_err(|e: anemia_core::error::Error| e.to_string())
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a model and write the best checkpoint, history and split manifest.
    Train,
    /// Compute metrics for a checkpoint on the test split, or for a predictions CSV.
    Eval {
        /// CSV with columns actual,predicted and optionally score (anemic probability).
        #[arg(long)]
        predictions: Option<PathBuf>,
        /// Split manifest; defaults to the one in --out-dir or a fresh seeded split.
        #[arg(long)]
        split: Option<PathBuf>,
    },
    /// Write an inference-only model artifact into --out-dir.
    Export,
    /// Create the database schema; safe to repeat.
    Migrate {
        /// Seconds to keep retrying an unreachable database.
        #[arg(long, default_value_t = 30)]
        max_wait: u64,
    },
    /// Migrate, then serve the HTTP API.
    Serve {
        #[arg(long, default_value = "0.0.0.0")]
        host: String,
        #[arg(long, default_value_t = 30)]
        max_wait: u64,
    },
    /// Render the PDF report for a stored screening.
    Report {
        #[arg(long)]
        screening_id: i64,
        #[arg(long)]
        output: PathBuf,
    },
}

/// A failure, split by whether the invocation itself was wrong.
#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Runtime(_) => 1,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) | CliError::Runtime(m) => f.write_str(m),
        }
    }
}

fn runtime(e: impl std::fmt::Display) -> CliError {
    CliError::Runtime(e.to_string())
}

/// Parses `argv` and runs the command, returning the process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match execute(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

pub fn execute(cli: &Cli) -> Result<(), CliError> {
    let g = &cli.global;
    match &cli.command {
        Command::Train => cmd_train(g),
        Command::Eval { predictions, split } => cmd_eval(g, predictions.as_deref(), split.as_deref()),
        Command::Export => cmd_export(g),
        Command::Migrate { max_wait } => cmd_migrate(Duration::from_secs(*max_wait)),
        Command::Serve { host, max_wait } => cmd_serve(g, host, Duration::from_secs(*max_wait)),
        Command::Report { screening_id, output } => cmd_report(*screening_id, output),
    }
}

/// Profile defaults, then the config file, then `--set`, then `--seed`.
pub fn effective_config(g: &GlobalArgs) -> Result<TrainConfig, CliError> {
    let profile = g.profile.unwrap_or(Profile::Fast);
    let usage = |e: anemia_core::error::Error| CliError::Usage(e.to_string());
    let mut cfg = match &g.config {
        Some(path) => {
            let text =
                std::fs::read_to_string(path).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
            let value: serde_json::Value =
                serde_json::from_str(&text).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
            TrainConfig::from_layers(profile, Some(&value)).map_err(usage)?
        }
        None => TrainConfig::for_profile(profile),
    };
    if let Some(p) = g.profile {
        cfg.profile = p;
    }
    for spec in &g.overrides {
        cfg.apply_override(spec).map_err(usage)?;
    }
    if let Some(seed) = g.seed {
        cfg.seed = seed;
    }
    cfg.validate().map_err(usage)?;
    Ok(cfg)
}

fn require_data_root(g: &GlobalArgs) -> Result<&Path, CliError> {
    g.data_root.as_deref().ok_or_else(|| CliError::Usage("--data-root (or ANEMIA_DATA_ROOT) is required".into()))
}

fn cmd_train(g: &GlobalArgs) -> Result<(), CliError> {
    let cfg = effective_config(g)?;
    let root = require_data_root(g)?;
    log::info!("effective config:\n{}", cfg.to_json_pretty());
    let index = load_dataset(root).map_err(runtime)?;
    log::info!("dataset: {} images, class counts {:?}", index.len(), index.class_counts());
    let split = stratified_split(&index, cfg.split_fractions, cfg.seed).map_err(runtime)?;
    std::fs::create_dir_all(&g.out_dir).map_err(|e| runtime(format!("{}: {e}", g.out_dir.display())))?;
    split.save(&g.out_dir.join(SPLIT_FILE)).map_err(runtime)?;
    let result = training::train(&cfg, &index, &split, &g.out_dir).map_err(runtime)?;
    let summary = serde_json::json!({
        "best_val_acc": result.best_val_acc,
        "best_epoch": result.best_epoch,
        "epochs_run": result.history.len(),
        "stopped_early": result.stopped_early,
        "checkpoint": result.checkpoint.weights,
        "history": result.history_path,
        "elapsed_s": result.elapsed.as_secs_f64(),
    });
    println!("{}", serde_json::to_string_pretty(&summary).map_err(runtime)?);
    Ok(())
}

fn default_checkpoint(g: &GlobalArgs) -> PathBuf {
    g.checkpoint.clone().unwrap_or_else(|| CheckpointPaths::new(&g.out_dir, training::BEST_STEM).weights)
}

/// Metrics for a labelled set of predictions with optional anemic-class scores.
pub fn metrics_for(
    actual: &[usize],
    predicted: &[usize],
    scores: Option<&[f64]>,
) -> Result<(EvalMetrics, Vec<RocPoint>), CliError> {
    let matrix = confusion(predicted, actual, NUM_CLASSES).map_err(runtime)?;
    let mut metrics = derive_metrics(&matrix).map_err(runtime)?;
    let mut roc = Vec::new();
    if let Some(scores) = scores {
        let positive: Vec<bool> = actual.iter().map(|&a| a == ANEMIC).collect();
        match (roc_points(scores, &positive), roc_auc(scores, &positive)) {
            (Ok(points), Ok(auc)) => {
                roc = points;
                metrics.auc_roc = Some(auc);
            }
            (Err(e), _) | (_, Err(e)) => log::warn!("AUC not reported: {e}"),
        }
    }
    Ok((metrics, roc))
}

fn cmd_eval(g: &GlobalArgs, predictions_csv: Option<&Path>, split_path: Option<&Path>) -> Result<(), CliError> {
    let (metrics, roc) = match predictions_csv {
        Some(path) => {
            let rows = predictions::read(path).map_err(runtime)?;
            let actual: Vec<usize> = rows.iter().map(|r| r.actual).collect();
            let predicted: Vec<usize> = rows.iter().map(|r| r.predicted).collect();
            let scores: Option<Vec<f64>> = rows.iter().map(|r| r.score).collect();
            metrics_for(&actual, &predicted, scores.as_deref())?
        }
        None => {
            let root = require_data_root(g)?;
            let checkpoint = default_checkpoint(g);
            let model = InferenceModel::load(&checkpoint).map_err(runtime)?;
            let index = load_dataset(root).map_err(runtime)?;
            let split = match split_path.map(Path::to_path_buf).or_else(|| {
                let p = g.out_dir.join(SPLIT_FILE);
                p.exists().then_some(p)
            }) {
                Some(p) => DatasetSplit::load(&p).map_err(runtime)?,
                None => {
                    let cfg = effective_config(g)?;
                    stratified_split(&index, cfg.split_fractions, cfg.seed).map_err(runtime)?
                }
            };
            if split.test.is_empty() {
                return Err(CliError::Runtime("the test split is empty".into()));
            }
            let transform = model.eval_transform();
            let (mut actual, mut predicted, mut scores) = (Vec::new(), Vec::new(), Vec::new());
            for chunk in split.test.chunks(16) {
                let mut imgs = Vec::with_capacity(chunk.len());
                for id in chunk {
                    let s = index.get(id).ok_or_else(|| runtime(format!("split references unknown sample {id}")))?;
                    imgs.push(transform.apply(&s.pixels));
                    actual.push(s.label);
                }
                for probs in model.predict_batch(&imgs).map_err(runtime)? {
                    let best = probs.iter().enumerate().fold(0, |b, (i, p)| if *p > probs[b] { i } else { b });
                    predicted.push(best);
                    scores.push(probs[ANEMIC]);
                }
            }
            metrics_for(&actual, &predicted, Some(&scores))?
        }
    };
    let history = read_history(&g.out_dir.join(training::HISTORY_FILE));
    let files = export_report(&metrics, &roc, &history, &g.out_dir).map_err(runtime)?;
    println!(
        "{}",
        serde_json::to_string_pretty(&serde_json::json!({
            "accuracy": metrics.accuracy,
            "sensitivity": metrics.sensitivity,
            "specificity": metrics.specificity,
            "weighted_f1": metrics.weighted_f1,
            "auc_roc": metrics.auc_roc,
            "metrics": files.metrics,
        }))
        .map_err(runtime)?
    );
    Ok(())
}

/// Training history next to the checkpoint, or empty when there is none.
fn read_history(path: &Path) -> Vec<training::EpochRecord> {
    let Ok(mut reader) = csv::Reader::from_path(path) else {
        return Vec::new();
    };
    reader.deserialize().filter_map(|r| r.ok()).collect()
}

fn cmd_export(g: &GlobalArgs) -> Result<(), CliError> {
    let source = CheckpointPaths::from_any(&default_checkpoint(g));
    let meta = read_checkpoint_meta(&source).map_err(runtime)?;
    let target = CheckpointPaths::new(&g.out_dir, EXPORT_STEM);
    std::fs::create_dir_all(&g.out_dir).map_err(|e| runtime(format!("{}: {e}", g.out_dir.display())))?;
    if source.weights != target.weights {
        std::fs::copy(&source.weights, &target.weights)
            .map_err(|e| runtime(format!("{}: {e}", source.weights.display())))?;
    }
    std::fs::write(&target.meta, serde_json::to_string_pretty(&meta).map_err(runtime)?)
        .map_err(|e| runtime(format!("{}: {e}", target.meta.display())))?;
    let model = InferenceModel::load(&target.weights).map_err(runtime)?;
    println!("exported {} to {}", model.version(), target.weights.display());
    Ok(())
}

fn backend() -> Result<persistence::BackendConfig, CliError> {
    let backend = select_backend(process_env).map_err(|e| CliError::Usage(e.to_string()))?;
    log::info!("database: {}", backend.describe());
    Ok(backend)
}

fn cmd_migrate(max_wait: Duration) -> Result<(), CliError> {
    let backend = backend()?;
    let report = persistence::migrate(&backend, max_wait).map_err(runtime)?;
    log::info!(
        "database backend: {} ({}), migration applied: {}",
        report.location,
        report.backend_kind.as_str(),
        report.migration_applied
    );
    println!("{}", serde_json::to_string(&report).map_err(runtime)?);
    Ok(())
}

fn cmd_serve(g: &GlobalArgs, host: &str, max_wait: Duration) -> Result<(), CliError> {
    let backend = backend()?;
    let data_dir = data_dir(&process_env);
    let addr = format!("{host}:{}", g.port)
        .parse()
        .map_err(|e| CliError::Usage(format!("bad listen address {host}:{}: {e}", g.port)))?;
    let model_path = g
        .checkpoint
        .clone()
        .or_else(|| process_env("ANEMIA_MODEL_PATH").map(PathBuf::from))
        .unwrap_or_else(|| CheckpointPaths::new(&data_dir.join(EXPORT_STEM), EXPORT_STEM).weights);
    log::info!("data dir {}, model {}, listen {addr}", data_dir.display(), model_path.display());
    let config = ServeConfig { addr, backend, data_dir, model_path, migrate_wait: max_wait };
    tokio::runtime::Builder::new_multi_thread()
        .enable_all()
        .build()
        .map_err(runtime)?
        .block_on(serve(config))
        .map_err(runtime)
}

fn cmd_report(screening_id: i64, output: &Path) -> Result<(), CliError> {
    let backend = backend()?;
    let store = backend.open();
    let bytes = build_report(store.as_ref(), &data_dir(&process_env), screening_id).map_err(runtime)?;
    std::fs::write(output, bytes).map_err(|e| runtime(format!("{}: {e}", output.display())))?;
    println!("wrote {}", output.display());
    Ok(())
}
