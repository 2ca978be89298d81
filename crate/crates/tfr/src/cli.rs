//! The `tfr` command line.
//!
//! ```text
//! tfr generate --config run.toml [--out DIR]
//! tfr train    --config run.toml [--out DIR] [--resume]
//! tfr predict  --config run.toml [--out DIR]
//! tfr evaluate --config run.toml [--out DIR]
//! tfr report   --config run.toml [--out DIR]
//! ```
//!
//! `--out` replaces `paths.run_dir` (for `generate`, `paths.data_dir`).
//! Every command appends an entry to `run_manifest.json` in the directory it
//! wrote to. Exit status is 0 on success, 2 for configuration errors and 1
//! for any other failure.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::dataset::{generate_dataset, load_labels, sha256_hex, DatasetManifest, GenerateOutcome, MANIFEST_FILE};
use crate::error::{Error, Result};
use crate::predict::{load_predictions, run_evaluate, run_predict, METRICS_CSV, METRICS_JSON, PREDICT_DIR, PREDICT_SUMMARY};
use crate::report::render_reports;
use crate::train::{train, BEST_CKPT, CONFIG_ECHO, EPOCH_LOG, SELECTION_FILE, STATE_CKPT, STEP_LOG};

pub const RUN_MANIFEST: &str = "run_manifest.json";

#[derive(Debug, Parser)]
#[command(name = "tfr", version, about = "Temperature field reconstruction from sparse sensors")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Simulate the dataset described by the config.
    Generate(Common),
    /// Train the surrogate on the generated dataset.
    Train {
        #[command(flatten)]
        common: Common,
        /// Continue from the saved training state if present.
        #[arg(long)]
        resume: bool,
    },
    /// Monte Carlo prediction over the test split.
    Predict(Common),
    /// Accuracy metrics of the predictions against the test labels.
    Evaluate(Common),
    /// Figures and summary tables.
    Report(Common),
}

#[derive(Debug, Args)]
struct Common {
    /// Run configuration (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Output directory overriding the config's path.
    #[arg(long)]
    out: Option<PathBuf>,
}

/// One command invocation as recorded in `run_manifest.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunEntry {
    pub command: String,
    pub tool_version: String,
    pub config_hash: String,
    pub spec_hash: String,
    pub layout_hash: String,
    pub started_unix_s: u64,
    pub elapsed_s: f64,
    /// Output files relative to the manifest's directory, with SHA-256.
    pub artifacts: BTreeMap<String, String>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub entries: Vec<RunEntry>,
}

impl RunManifest {
    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(RUN_MANIFEST);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::format(&path, e.to_string()))
    }

    fn append(dir: &Path, entry: RunEntry) -> Result<()> {
        let mut m = Self::load(dir).unwrap_or_default();
        m.entries.push(entry);
        let path = dir.join(RUN_MANIFEST);
        let text = serde_json::to_string_pretty(&m).expect("run manifest serializes");
        fs::write(&path, text).map_err(|e| Error::io(&path, e))
    }
}

fn hash_artifacts(dir: &Path, files: &[PathBuf]) -> Result<BTreeMap<String, String>> {
    files
        .iter()
        .filter(|p| p.is_file())
        .map(|p| {
            let bytes = fs::read(p).map_err(|e| Error::io(p, e))?;
            let rel = p.strip_prefix(dir).unwrap_or(p);
            Ok((rel.to_string_lossy().replace('\\', "/"), sha256_hex(&bytes)))
        })
        .collect()
}

/// Parses `argv` (including the program name), runs the command and returns
/// the process exit status.
pub fn run_command<I, T>(argv: I) -> i32
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
    match execute(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn load_config(common: &Common, generate: bool) -> Result<RunConfig> {
    let mut cfg = RunConfig::load(&common.config)?;
    if let Some(out) = &common.out {
        if generate {
            cfg.paths.data_dir = out.clone();
        } else {
            cfg.paths.run_dir = out.clone();
        }
    }
    Ok(cfg)
}

fn execute(command: Command) -> Result<()> {
    let started = Instant::now();
    let started_unix_s = SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0);
    let (name, cfg, out_dir, files) = match command {
        Command::Generate(common) => {
            let cfg = load_config(&common, true)?;
            let dir = cfg.paths.data_dir.clone();
            let (manifest, outcome) = generate_dataset(&cfg)?;
            match outcome {
                GenerateOutcome::Created => println!(
                    "generated {} train / {} val / {} test samples in {}",
                    manifest.counts.train,
                    manifest.counts.val,
                    manifest.counts.test,
                    dir.display()
                ),
                GenerateOutcome::Unchanged => {
                    println!("dataset in {} is up to date; nothing to do", dir.display())
                }
            }
            let files = vec![dir.join(MANIFEST_FILE)];
            ("generate", cfg, dir, files)
        }
        Command::Train { common, resume } => {
            let cfg = load_config(&common, false)?;
            let manifest = DatasetManifest::load(&cfg.paths.data_dir)?;
            let outcome = train(&cfg, &manifest, resume)?;
            println!(
                "trained {} steps; selected epoch {} ({:?} {:.6e})",
                outcome.steps, outcome.selection.epoch, outcome.selection.select_on, outcome.selection.score
            );
            let dir = cfg.paths.run_dir.clone();
            let files = [CONFIG_ECHO, STEP_LOG, EPOCH_LOG, STATE_CKPT, BEST_CKPT, SELECTION_FILE]
                .iter()
                .map(|f| dir.join(f))
                .collect();
            ("train", cfg, dir, files)
        }
        Command::Predict(common) => {
            let cfg = load_config(&common, false)?;
            let summary = run_predict(&cfg)?;
            println!(
                "predicted {} test samples (n_pre {}); sigma median noisy {:.4} clean {:.4}",
                summary.count, summary.n_pre, summary.uq.noisy.median, summary.uq.clean.median
            );
            let dir = cfg.paths.run_dir.clone();
            let files = vec![dir.join(PREDICT_DIR).join(PREDICT_SUMMARY)];
            ("predict", cfg, dir, files)
        }
        Command::Evaluate(common) => {
            let cfg = load_config(&common, false)?;
            let eval = run_evaluate(&cfg)?;
            let m = &eval.metrics;
            println!(
                "n_test {}  RMSE {:.5}  MAE {:.5}  MRE {:.3e}  R2 {:.5}",
                m.n_test, m.rmse_avg, m.mae_avg, m.mre_avg, m.r2_avg
            );
            let dir = cfg.paths.run_dir.clone();
            let files = vec![dir.join(METRICS_JSON), dir.join(METRICS_CSV)];
            ("evaluate", cfg, dir, files)
        }
        Command::Report(common) => {
            let cfg = load_config(&common, false)?;
            // brings predictions up to date with the selected checkpoint
            run_evaluate(&cfg)?;
            let manifest = DatasetManifest::load(&cfg.paths.data_dir)?;
            let dir = cfg.paths.run_dir.clone();
            let (_, results) = load_predictions(&dir, manifest.rows, manifest.cols)?;
            let labels = load_labels(&cfg.paths.data_dir, &manifest, results.len())?;
            let files = render_reports(
                &results,
                &labels,
                &cfg.geometry.sensors,
                &cfg.dataset.noise_specs(),
                cfg.predict.figures,
                cfg.predict.r2_mode,
                &dir,
            )?;
            println!("wrote {} report files under {}", files.len(), dir.display());
            ("report", cfg, dir, files)
        }
    };
    let entry = RunEntry {
        command: name.into(),
        tool_version: env!("CARGO_PKG_VERSION").into(),
        config_hash: cfg.config_hash(),
        spec_hash: cfg.spec_hash(),
        layout_hash: cfg.layout_hash(),
        started_unix_s,
        elapsed_s: started.elapsed().as_secs_f64(),
        artifacts: hash_artifacts(&out_dir, &files)?,
    };
    RunManifest::append(&out_dir, entry)
}
