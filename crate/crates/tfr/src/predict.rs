//! Monte Carlo prediction over the test split and accuracy evaluation.
//!
//! `predict` writes, under `<run_dir>/predict/`:
//!
//! ```text
//! 000000_mean.f32    mean field, same float32 format as the dataset
//! 000000_sigma.f32   population standard deviation field
//! summary.json       sample count, n_pre, seed, checkpoint hash and the
//!                    pooled sigma statistics per sensor group
//! ```
//!
//! `evaluate` compares the mean fields with the test labels and writes
//! `<run_dir>/metrics.json` and `<run_dir>/metrics.csv`.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use tfr_core::metrics::{compute_metrics, per_sample_metrics};
use tfr_core::uq::{predict_with_uq, uq_report_pooled};
use tfr_core::{FieldGrid, MetricsRecord, MpImage, PredictionResult, R2Mode, UqReport};

use crate::checkpoint::Checkpoint;
use crate::config::RunConfig;
use crate::dataset::{load_labels, load_mp_images, read_f32_grid, sha256_hex, write_f32_grid, write_file, DatasetManifest, Split};
use crate::error::{Error, Result};
use crate::model::{Model, Surrogate};
use crate::train::BEST_CKPT;

pub const PREDICT_DIR: &str = "predict";
pub const PREDICT_SUMMARY: &str = "summary.json";
pub const METRICS_JSON: &str = "metrics.json";
pub const METRICS_CSV: &str = "metrics.csv";

/// The selected checkpoint of a run.
pub struct Trained {
    pub model: Model,
    pub params: Vec<f32>,
    pub checkpoint: Checkpoint,
    /// SHA-256 of the checkpoint file.
    pub hash: String,
}

pub fn load_trained(run_dir: &Path) -> Result<Trained> {
    let path = run_dir.join(BEST_CKPT);
    if !path.exists() {
        return Err(Error::NoCheckpoint(run_dir.to_path_buf()));
    }
    let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
    let checkpoint = Checkpoint::from_bytes(&bytes, &path)?;
    let (model, params) = checkpoint.restore(&path)?;
    Ok(Trained {
        model,
        params,
        checkpoint,
        hash: sha256_hex(&bytes),
    })
}

impl Trained {
    pub fn surrogate<'a>(&'a self, mp_mask: &'a tfr_core::Mask) -> Surrogate<'a, f32> {
        Surrogate {
            model: &self.model,
            params: &self.params,
            mp_mask,
            norm: self.checkpoint.header.normalization,
        }
    }
}

/// Runs Monte Carlo prediction on each image; image `i` uses the seed
/// `seed + i` so any subset can be recomputed independently.
pub fn predict_images(
    cfg: &RunConfig,
    trained: &Trained,
    mps: &[MpImage],
) -> Result<Vec<PredictionResult>> {
    let masks = cfg.masks()?;
    let surrogate = trained.surrogate(&masks.mp);
    let p = &cfg.predict;
    mps.iter()
        .enumerate()
        .map(|(i, mp)| {
            Ok(predict_with_uq(
                &surrogate,
                mp,
                &cfg.geometry.sensors,
                p.n_pre,
                p.seed.wrapping_add(i as u64),
            )?)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictSummary {
    pub count: usize,
    pub n_pre: usize,
    pub seed: u64,
    pub checkpoint_sha256: String,
    pub config_hash: String,
    pub uq: UqReport,
}

pub fn predict_dir(run_dir: &Path) -> PathBuf {
    run_dir.join(PREDICT_DIR)
}

pub fn prediction_file(run_dir: &Path, index: usize, what: &str) -> PathBuf {
    predict_dir(run_dir).join(format!("{index:06}_{what}.f32"))
}

fn test_count(cfg: &RunConfig, manifest: &DatasetManifest) -> usize {
    let n = manifest.counts.test;
    cfg.predict.limit.map_or(n, |l| l.min(n))
}

/// Predicts the test split with the selected checkpoint and writes mean and
/// sigma fields plus a summary.
pub fn run_predict(cfg: &RunConfig) -> Result<PredictSummary> {
    let trained = load_trained(&cfg.paths.run_dir)?;
    let manifest = DatasetManifest::load(&cfg.paths.data_dir)?;
    manifest.ensure_compatible(cfg)?;
    let mut mps = load_mp_images(&cfg.paths.data_dir, &manifest, Split::Test)?;
    mps.truncate(test_count(cfg, &manifest));
    let results = predict_images(cfg, &trained, &mps)?;
    let run_dir = &cfg.paths.run_dir;
    let dir = predict_dir(run_dir);
    if dir.exists() {
        fs::remove_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    }
    for (i, r) in results.iter().enumerate() {
        write_f32_grid(&prediction_file(run_dir, i, "mean"), &r.mean_field)?;
        write_f32_grid(&prediction_file(run_dir, i, "sigma"), &r.sigma_field)?;
    }
    let summary = PredictSummary {
        count: results.len(),
        n_pre: cfg.predict.n_pre,
        seed: cfg.predict.seed,
        checkpoint_sha256: trained.hash.clone(),
        config_hash: cfg.config_hash(),
        uq: uq_report_pooled(&results, &cfg.geometry.sensors, &cfg.dataset.noise_specs())?,
    };
    write_file(
        &dir.join(PREDICT_SUMMARY),
        serde_json::to_string_pretty(&summary).expect("summary serializes").as_bytes(),
    )?;
    Ok(summary)
}

/// Reads the outputs of [`run_predict`].
pub fn load_predictions(run_dir: &Path, rows: usize, cols: usize) -> Result<(PredictSummary, Vec<PredictionResult>)> {
    let path = predict_dir(run_dir).join(PREDICT_SUMMARY);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let summary: PredictSummary =
        serde_json::from_str(&text).map_err(|e| Error::format(&path, e.to_string()))?;
    let results = (0..summary.count)
        .map(|i| {
            Ok(PredictionResult {
                mean_field: read_f32_grid(&prediction_file(run_dir, i, "mean"), rows, cols)?,
                sigma_field: read_f32_grid(&prediction_file(run_dir, i, "sigma"), rows, cols)?,
                n_pre: summary.n_pre,
                seed: summary.seed.wrapping_add(i as u64),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((summary, results))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub metrics: MetricsRecord,
    pub r2_mode: R2Mode,
    pub checkpoint_sha256: String,
}

/// Metrics table: one row per test sample, then the average.
pub fn metrics_csv(preds: &[FieldGrid], labels: &[FieldGrid], mode: R2Mode) -> Result<String> {
    let per = per_sample_metrics(preds, labels, mode)?;
    let avg = compute_metrics(preds, labels, mode)?;
    let mut out = String::from("sample,rmse,mae,mre,r2\n");
    for (i, m) in per.iter().enumerate() {
        out.push_str(&format!("{i},{:.6},{:.6},{:.8},{:.6}\n", m.rmse, m.mae, m.mre, m.r2));
    }
    if avg.n_test > 0 {
        out.push_str(&format!(
            "mean,{:.6},{:.6},{:.8},{:.6}\n",
            avg.rmse_avg, avg.mae_avg, avg.mre_avg, avg.r2_avg
        ));
    }
    Ok(out)
}

/// Scores the current predictions against the test labels, predicting first
/// when the stored predictions are missing or came from another checkpoint.
pub fn run_evaluate(cfg: &RunConfig) -> Result<Evaluation> {
    let trained = load_trained(&cfg.paths.run_dir)?;
    let manifest = DatasetManifest::load(&cfg.paths.data_dir)?;
    manifest.ensure_compatible(cfg)?;
    let (rows, cols) = (manifest.rows, manifest.cols);
    let run_dir = &cfg.paths.run_dir;
    let stale = match load_predictions(run_dir, rows, cols) {
        Ok((s, _)) => s.checkpoint_sha256 != trained.hash || s.config_hash != cfg.config_hash(),
        Err(_) => true,
    };
    if stale {
        run_predict(cfg)?;
    }
    let (_, results) = load_predictions(run_dir, rows, cols)?;
    let labels = load_labels(&cfg.paths.data_dir, &manifest, results.len())?;
    let preds: Vec<FieldGrid> = results.into_iter().map(|r| r.mean_field).collect();
    let mode = cfg.predict.r2_mode;
    let metrics = compute_metrics(&preds, &labels, mode)?;
    let eval = Evaluation {
        metrics,
        r2_mode: mode,
        checkpoint_sha256: trained.hash,
    };
    write_file(
        &run_dir.join(METRICS_JSON),
        serde_json::to_string_pretty(&eval).expect("metrics serialize").as_bytes(),
    )?;
    write_file(
        &run_dir.join(METRICS_CSV),
        metrics_csv(&preds, &labels, mode)?.as_bytes(),
    )?;
    Ok(eval)
}
