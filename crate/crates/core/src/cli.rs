//! Command-line front end. The `forgelens` binary is a thin wrapper around
//! [`run`], which tests can also drive in-process.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use crate::checkpoint;
use crate::dataset::{self, DatasetManifest, Split};
use crate::ela::{self, ElaConfig};
use crate::error::{config_err, Error, Result};
use crate::knn::{self, FeatureStore, KnnConfig, Metric, Weighting};
use crate::metrics;
use crate::train::{TrainConfig, Trainer};

pub const THREADS_ENV: &str = "FORGELENS_THREADS";
pub const RUN_MANIFEST: &str = "run_manifest.json";
pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const CONFIG_FILE: &str = "config.json";
pub const SPLIT_FILE: &str = "dataset_split.jsonl";
pub const GRID_CSV: &str = "knn_grid.csv";
pub const KNN_SUMMARY: &str = "knn_summary.json";
pub const KNN_STORE: &str = "knn_train_store.bin";
pub const DEFAULT_KS: &str = "1,3,5,7,9";

#[derive(Debug, Parser)]
#[command(name = "forgelens", version, about = "ELA, shifted-window transformer and KNN deepfake classification")]
pub struct Cli {
    /// Worker thread cap (also read from FORGELENS_THREADS).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Master seed; overrides the seed in a training config.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic real/fake dataset.
    Fixture(FixtureArgs),
    /// Convert an image tree into ELA residuals.
    Ela(ElaArgs),
    /// Train a model on an image tree.
    Train(TrainArgs),
    /// Evaluate a checkpoint on one split; prints JSON.
    Eval(EvalArgs),
    /// Grid-search KNN over features from a trained extractor.
    Knn(KnnArgs),
}

#[derive(Debug, Args)]
pub struct FixtureArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub n_per_class: usize,
}

#[derive(Debug, Args)]
pub struct ElaArgs {
    #[arg(long = "in")]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = ela::DEFAULT_QUALITY as i64)]
    pub quality: i64,
    #[arg(long, default_value_t = 1.0)]
    pub amplification: f64,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// TOML or JSON training config. Not needed with --resume.
    #[arg(long, required_unless_present = "resume")]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Continue from a checkpoint; its embedded config is used.
    #[arg(long, conflicts_with = "config")]
    pub resume: Option<PathBuf>,
    /// Stop once this many epochs are complete (the config total still applies to the schedule).
    #[arg(long)]
    pub max_epochs: Option<usize>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value = "test")]
    pub split: String,
    /// Also write the JSON report into this directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct KnnArgs {
    #[arg(long)]
    pub extractor_checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// `full` for every metric and weighting, or e.g. `metrics=cosine,euclidean;weightings=uniform`.
    #[arg(long, default_value = "full")]
    pub grid: String,
    /// Comma-separated neighbor counts.
    #[arg(long, default_value = DEFAULT_KS)]
    pub k: String,
    #[arg(long)]
    pub out: PathBuf,
}

/// Written beside every run's outputs. Timestamps live only here, so all
/// other artifacts stay byte-reproducible.
#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub subcommand: String,
    pub config: serde_json::Value,
    pub seed: Option<u64>,
    pub threads: Option<usize>,
    pub started_unix: u64,
    pub finished_unix: u64,
    pub artifacts: Vec<String>,
}

fn now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0)
}

fn write_manifest(dir: &Path, mut m: RunManifest) -> Result<()> {
    m.finished_unix = now();
    m.artifacts.push(RUN_MANIFEST.into());
    let path = dir.join(RUN_MANIFEST);
    std::fs::write(&path, serde_json::to_string_pretty(&m)? + "\n").map_err(|e| Error::io(&path, e))
}

fn manifest(subcommand: &str, config: serde_json::Value, seed: Option<u64>, threads: Option<usize>) -> RunManifest {
    RunManifest {
        subcommand: subcommand.into(),
        config,
        seed,
        threads,
        started_unix: now(),
        finished_unix: 0,
        artifacts: Vec::new(),
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

/// `--threads`, else `FORGELENS_THREADS`, else unset.
pub fn resolve_threads(flag: Option<usize>) -> Result<Option<usize>> {
    let n = match flag {
        Some(n) => Some(n),
        None => match std::env::var(THREADS_ENV) {
            Ok(v) if !v.trim().is_empty() => Some(
                v.trim()
                    .parse::<usize>()
                    .map_err(|_| Error::Usage(format!("{THREADS_ENV}='{v}' is not a thread count")))?,
            ),
            _ => None,
        },
    };
    if n == Some(0) {
        return Err(Error::Usage("thread count must be at least 1".into()));
    }
    Ok(n)
}

pub fn cmd_fixture(args: &FixtureArgs, seed: u64, threads: Option<usize>) -> Result<()> {
    if args.n_per_class == 0 {
        return Err(Error::Usage("--n-per-class must be at least 1".into()));
    }
    let mut m = manifest(
        "fixture",
        serde_json::json!({ "n_per_class": args.n_per_class, "spec": dataset::FixtureSpec::default() }),
        Some(seed),
        threads,
    );
    dataset::make_fixture_dataset(&args.out, args.n_per_class, seed)?;
    m.artifacts = dataset::CLASS_DIRS.iter().map(|d| format!("{d}/")).collect();
    write_manifest(&args.out, m)
}

pub fn cmd_ela(args: &ElaArgs, threads: Option<usize>) -> Result<ela::ElaReport> {
    let quality = u8::try_from(args.quality).map_err(|_| config_err!("quality must lie in 1..=100, got {}", args.quality))?;
    let cfg = ElaConfig {
        quality,
        amplification: args.amplification,
        ..ElaConfig::default()
    };
    cfg.validate()?;
    let mut m = manifest("ela", serde_json::to_value(cfg)?, None, threads);
    let report = ela::batch_preprocess(&args.input, &args.out, &cfg, None)?;
    m.artifacts = vec![ela::REPORT_FILE.into()];
    write_manifest(&args.out, m)?;
    Ok(report)
}

pub fn cmd_train(args: &TrainArgs, seed: Option<u64>, threads: Option<usize>) -> Result<Trainer> {
    let mut trainer = match (&args.resume, &args.config) {
        (Some(ckpt), _) => {
            if seed.is_some() {
                return Err(Error::Usage("--seed cannot change a resumed run".into()));
            }
            Trainer::load(ckpt)?
        }
        (None, Some(path)) => {
            let mut cfg = TrainConfig::load(path)?;
            if let Some(s) = seed {
                cfg.seed = s;
            }
            Trainer::new(cfg)?
        }
        (None, None) => return Err(Error::Usage("train needs --config or --resume".into())),
    };
    let cfg = trainer.config.clone();
    create_dir(&args.out)?;
    let mut m = manifest("train", serde_json::to_value(&cfg)?, Some(cfg.seed), threads);
    let config_path = args.out.join(CONFIG_FILE);
    std::fs::write(&config_path, serde_json::to_string_pretty(&cfg)? + "\n").map_err(|e| Error::io(&config_path, e))?;

    let data = DatasetManifest::build(&args.data, cfg.split_ratio, cfg.seed)?;
    data.write_jsonl(&args.out.join(SPLIT_FILE))?;

    let stop = args.max_epochs.unwrap_or(cfg.epochs);
    let ckpt_path = args.out.join(CHECKPOINT_FILE);
    let save = |t: &Trainer| -> Result<()> {
        t.save(&ckpt_path)?;
        metrics::export_history(&t.state.history, &args.out).map(|_| ())
    };
    trainer.fit_until(&data, stop, save, save)?;
    save(&trainer)?;
    m.artifacts = vec![
        CONFIG_FILE.into(),
        SPLIT_FILE.into(),
        CHECKPOINT_FILE.into(),
        metrics::HISTORY_CSV.into(),
        metrics::SUMMARY_JSON.into(),
    ];
    write_manifest(&args.out, m)?;
    Ok(trainer)
}

#[derive(Debug, Serialize)]
pub struct EvalReport {
    pub checkpoint_id: String,
    pub model: String,
    pub epoch: usize,
    pub split: Split,
    pub samples: usize,
    pub mean_loss: f64,
    pub accuracy: f64,
    pub confusion: metrics::ConfusionCounts,
}

pub fn cmd_eval(args: &EvalArgs) -> Result<EvalReport> {
    let split: Split = args.split.parse()?;
    let trainer = Trainer::load(&args.checkpoint)?;
    let data = DatasetManifest::build(&args.data, trainer.config.split_ratio, trainer.config.seed)?;
    let (row, preds) = trainer.evaluate(&data, split)?;
    let labels = data.labels(&data.indices(split));
    let report = EvalReport {
        checkpoint_id: checkpoint::file_id(&args.checkpoint)?,
        model: trainer.config.model.name(),
        epoch: row.epoch,
        split,
        samples: preds.len(),
        mean_loss: row.mean_loss,
        accuracy: row.accuracy,
        confusion: metrics::confusion(&preds, &labels)?,
    };
    if let Some(dir) = &args.out {
        create_dir(dir)?;
        let mut m = manifest("eval", serde_json::json!({ "split": split }), Some(trainer.config.seed), None);
        let path = dir.join(format!("eval_{}.json", split.name()));
        std::fs::write(&path, serde_json::to_string_pretty(&report)? + "\n").map_err(|e| Error::io(&path, e))?;
        m.artifacts = vec![path.file_name().expect("file").to_string_lossy().into_owned()];
        write_manifest(dir, m)?;
    }
    Ok(report)
}

/// Parses `full` or `metrics=a,b;weightings=c` (missing keys mean "all").
pub fn parse_grid(spec: &str) -> Result<(Vec<Metric>, Vec<Weighting>)> {
    let (mut metrics, mut weightings) = (Metric::ALL.to_vec(), Weighting::ALL.to_vec());
    if spec.trim() == "full" {
        return Ok((metrics, weightings));
    }
    for part in spec.split(';').map(str::trim).filter(|p| !p.is_empty()) {
        let (key, list) = part.split_once('=').ok_or_else(|| config_err!("grid entry '{}' is not key=value", part))?;
        let items = list.split(',').map(str::trim).filter(|s| !s.is_empty());
        match key.trim() {
            "metrics" => metrics = items.map(str::parse).collect::<Result<_>>()?,
            "weightings" => weightings = items.map(str::parse).collect::<Result<_>>()?,
            other => return Err(config_err!("unknown grid key '{}'", other)),
        }
    }
    Ok((metrics, weightings))
}

pub fn parse_ks(list: &str) -> Result<Vec<usize>> {
    list.split(',')
        .map(|s| s.trim().parse::<usize>().map_err(|_| config_err!("bad k value '{}'", s.trim())))
        .collect()
}

#[derive(Debug, Serialize)]
pub struct KnnSummary {
    pub extractor_id: String,
    pub train_rows: usize,
    pub test_rows: usize,
    pub best: knn::GridRow,
    /// Accuracy of the best configuration when the training rows query their own store.
    pub best_train_accuracy: f64,
}

pub fn cmd_knn(args: &KnnArgs, threads: Option<usize>) -> Result<(Vec<knn::GridRow>, KnnSummary)> {
    let (metric_list, weighting_list) = parse_grid(&args.grid)?;
    let ks = parse_ks(&args.k)?;
    let trainer = Trainer::load(&args.extractor_checkpoint)?;
    let id = checkpoint::file_id(&args.extractor_checkpoint)?;
    let data = DatasetManifest::build(&args.data, trainer.config.split_ratio, trainer.config.seed)?;
    let store_of = |split: Split| -> Result<FeatureStore> {
        let idx = data.indices(split);
        let f = trainer.extract_features(&data, &idx)?;
        let d = f.shape()[1];
        FeatureStore::fit(f.data().to_vec(), d, &data.labels(&idx), &id)
    };
    let (train, test) = (store_of(Split::Train)?, store_of(Split::Test)?);
    let rows = knn::grid_search(&train, &test, &metric_list, &weighting_list, &ks)?;
    let best = rows[0].clone();
    let train_preds = train.predict_all(&train, &KnnConfig::new(best.k, best.metric, best.weighting))?;
    let correct = train_preds.iter().enumerate().filter(|&(i, &p)| p == train.label(i)).count();
    let summary = KnnSummary {
        extractor_id: id,
        train_rows: train.len(),
        test_rows: test.len(),
        best,
        best_train_accuracy: correct as f64 / train.len() as f64,
    };

    create_dir(&args.out)?;
    let mut m = manifest(
        "knn",
        serde_json::json!({ "grid": args.grid, "k": ks, "extractor": summary.extractor_id }),
        Some(trainer.config.seed),
        threads,
    );
    knn::write_grid_csv(&rows, &args.out.join(GRID_CSV))?;
    train.save(&args.out.join(KNN_STORE))?;
    let path = args.out.join(KNN_SUMMARY);
    std::fs::write(&path, serde_json::to_string_pretty(&summary)? + "\n").map_err(|e| Error::io(&path, e))?;
    m.artifacts = vec![GRID_CSV.into(), KNN_STORE.into(), KNN_SUMMARY.into()];
    write_manifest(&args.out, m)?;
    Ok((rows, summary))
}

/// Runs one subcommand; returns the text destined for stdout.
fn dispatch(cli: &Cli, threads: Option<usize>) -> Result<String> {
    Ok(match &cli.command {
        Command::Fixture(a) => {
            cmd_fixture(a, cli.seed.unwrap_or(0), threads)?;
            String::new()
        }
        Command::Ela(a) => {
            let r = cmd_ela(a, threads)?;
            format!("processed {} images, {} failed\n", r.processed, r.failed.len())
        }
        Command::Train(a) => {
            let t = cmd_train(a, cli.seed, threads)?;
            format!("trained {}: {} epochs complete\n", t.config.model.name(), t.state.epoch)
        }
        Command::Eval(a) => serde_json::to_string_pretty(&cmd_eval(a)?)? + "\n",
        Command::Knn(a) => {
            let (_, s) = cmd_knn(a, threads)?;
            format!(
                "best {} / {} / k={}: test accuracy {}\n",
                s.best.metric.name(),
                s.best.weighting.name(),
                s.best.k,
                s.best.accuracy
            )
        }
    })
}

/// Runs parsed arguments inside a pool capped at the resolved thread count.
pub fn execute(cli: &Cli, stdout: &mut dyn Write) -> Result<()> {
    let threads = resolve_threads(cli.threads)?;
    let text = match threads {
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map_err(|e| config_err!("thread pool: {e}"))?
            .install(|| dispatch(cli, threads))?,
        None => dispatch(cli, None)?,
    };
    stdout.write_all(text.as_bytes()).map_err(|e| Error::io("<stdout>", e))
}

/// Full entry point: parses `args` (including the program name) and returns
/// the process exit code.
pub fn run<I, T>(args: I, stdout: &mut dyn Write, stderr: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = e.exit_code();
            let text = e.render().to_string();
            let _ = if code == 0 { write!(stdout, "{text}") } else { write!(stderr, "{text}") };
            return code;
        }
    };
    match execute(&cli, stdout) {
        Ok(()) => 0,
        Err(e) => {
            let _ = writeln!(stderr, "forgelens: {e}");
            e.exit_code()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_and_k_parsing() {
        let (m, w) = parse_grid("full").unwrap();
        assert_eq!((m.len(), w.len()), (5, 2));
        let (m, w) = parse_grid("metrics=cosine, chebyshev;weightings=distance").unwrap();
        assert_eq!(m, vec![Metric::Cosine, Metric::Chebyshev]);
        assert_eq!(w, vec![Weighting::Distance]);
        assert!(parse_grid("metric=cosine").is_err());
        assert!(parse_grid("metrics=hamming").is_err());
        assert_eq!(parse_ks("1, 3,5").unwrap(), vec![1, 3, 5]);
        assert!(parse_ks("1,x").is_err());
    }

    #[test]
    fn usage_errors_exit_two() {
        let (mut out, mut err) = (Vec::new(), Vec::new());
        assert_eq!(run(["forgelens", "fixture", "--n-per-class", "2"], &mut out, &mut err), 2);
        assert_eq!(run(["forgelens", "ela", "--in", "a", "--out", "b", "--quality", "0"], &mut out, &mut err), 2);
        assert_eq!(run(["forgelens", "ela", "--in", "a", "--out", "b", "--quality", "300"], &mut out, &mut err), 2);
        assert_eq!(run(["forgelens", "--threads", "0", "fixture", "--out", "x", "--n-per-class", "1"], &mut out, &mut err), 2);
        assert_eq!(run(["forgelens", "--help"], &mut out, &mut err), 0);
    }
}
