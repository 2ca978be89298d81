//! Monte Carlo training: each epoch draws a fresh quantile level per training
//! sample, shuffles, and takes one Adam step per minibatch on the composite
//! physics-informed loss. No labels are read.
//!
//! Every random draw is keyed by (seed, epoch), so a run resumed from a saved
//! state continues exactly as an uninterrupted one.

use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use tfr_core::images::{make_quantile_image, sample_tau, Normalization};
use tfr_core::losses::{average, sample_loss, sample_loss_with_grad};
use tfr_core::rng::{stream_rng, Stream};
use tfr_core::{FieldGrid, LossBreakdown, LossContext, Mask, MpImage, SensorLayout};

use crate::checkpoint::{Checkpoint, TrainMeta, OPT_M, OPT_V};
use crate::config::{RunConfig, SelectOn, TrainConfig};
use crate::dataset::{load_mp_images, DatasetManifest, Split};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::nn::Tensor;

pub const STEP_LOG: &str = "train_log.jsonl";
pub const EPOCH_LOG: &str = "epochs.jsonl";
pub const STATE_CKPT: &str = "state.ckpt";
pub const BEST_CKPT: &str = "best.ckpt";
/// Copy of the run configuration written at the start of training.
pub const CONFIG_ECHO: &str = "config.toml";
pub const SELECTION_FILE: &str = "selection.json";

/// Adam with bias correction.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub t: u64,
    pub m: Vec<f32>,
    pub v: Vec<f32>,
}

impl Adam {
    pub fn new(n: usize, cfg: &TrainConfig) -> Self {
        Self {
            lr: cfg.learning_rate,
            beta1: cfg.adam_betas[0],
            beta2: cfg.adam_betas[1],
            eps: cfg.adam_eps,
            t: 0,
            m: vec![0.0; n],
            v: vec![0.0; n],
        }
    }

    pub fn step(&mut self, params: &mut [f32], grads: &[f32]) {
        self.t += 1;
        let (b1, b2) = (self.beta1 as f32, self.beta2 as f32);
        let c1 = 1.0 - self.beta1.powi(self.t as i32);
        let c2 = 1.0 - self.beta2.powi(self.t as i32);
        let step = (self.lr * c2.sqrt() / c1) as f32;
        let eps = (self.eps * c2.sqrt()) as f32;
        for (((p, &g), m), v) in params
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut())
            .zip(self.v.iter_mut())
        {
            *m = b1 * *m + (1.0 - b1) * g;
            *v = b2 * *v + (1.0 - b2) * g * g;
            *p -= step * *m / (v.sqrt() + eps);
        }
    }
}

/// Rescales `grads` so their Euclidean norm is at most `max_norm`; returns
/// the norm before clipping.
pub fn clip_global_norm(grads: &mut [f32], max_norm: Option<f64>) -> f64 {
    let norm = grads.iter().map(|&g| (g as f64) * (g as f64)).sum::<f64>().sqrt();
    if let Some(max) = max_norm {
        if norm > max {
            let s = (max / norm) as f32;
            grads.iter_mut().for_each(|g| *g *= s);
        }
    }
    norm
}

pub fn steps_per_epoch(n: usize, batch_size: usize) -> usize {
    n.div_ceil(batch_size)
}

/// One quantile level per training sample for `epoch`.
pub fn epoch_quantiles(seed: u64, epoch: usize, n: usize) -> Vec<f64> {
    let mut rng = stream_rng(seed, Stream::TrainQuantiles, epoch as u64);
    (0..n).map(|_| sample_tau(&mut rng)).collect()
}

/// Sample order for `epoch`.
pub fn epoch_order(seed: u64, epoch: usize, n: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut stream_rng(seed, Stream::Shuffle, epoch as u64));
    order
}

/// Quantile levels for the validation split, fixed for the whole run so
/// epochs are comparable.
pub fn validation_quantiles(seed: u64, n: usize) -> Vec<f64> {
    let mut rng = stream_rng(seed, Stream::ValidationQuantiles, 0);
    (0..n).map(|_| sample_tau(&mut rng)).collect()
}

/// Everything the per-sample loss evaluation needs.
pub struct Objective<'a> {
    pub model: &'a Model,
    pub ctx: LossContext<'a>,
    pub layout: &'a SensorLayout,
    pub mp_mask: &'a Mask,
    pub norm: Normalization,
}

impl Objective<'_> {
    fn input(&self, mp: &MpImage, tau: f64) -> Result<Tensor<f32>> {
        let (rows, cols) = self.model.shape();
        let q = make_quantile_image(rows, cols, self.layout, tau)?;
        Ok(self.model.encode_input(mp, &q, self.mp_mask, &self.norm))
    }

    /// Loss of a batch and the accumulated gradient of its batch-averaged
    /// total with respect to the parameters.
    pub fn batch_gradient(
        &self,
        params: &[f32],
        mps: &[&MpImage],
        taus: &[f64],
        grads: &mut [f32],
    ) -> Result<LossBreakdown> {
        grads.iter_mut().for_each(|g| *g = 0.0);
        let scale = 1.0 / mps.len() as f64;
        let slope = self.norm.decode_slope();
        let (rows, cols) = self.model.shape();
        let mut parts = Vec::with_capacity(mps.len());
        for (mp, &tau) in mps.iter().zip(taus) {
            let x = self.input(mp, tau)?;
            let (y, tape) = self.model.forward_train(params, &x);
            let pred = self.model.decode_output(&y, &self.norm);
            let mut dpred = FieldGrid::zeros(rows, cols);
            parts.push(sample_loss_with_grad(&pred, mp, tau, &self.ctx, &mut dpred, scale)?);
            let dy = Tensor::from_vec(
                1,
                rows,
                cols,
                dpred.as_slice().iter().map(|&d| (d * slope) as f32).collect(),
            );
            self.model.backward(params, &tape, &dy, grads, false);
        }
        Ok(average(&parts, &self.ctx.weights))
    }

    /// Batch-averaged loss without gradients.
    pub fn loss(&self, params: &[f32], mps: &[MpImage], taus: &[f64]) -> Result<LossBreakdown> {
        let mut parts = Vec::with_capacity(mps.len());
        for (mp, &tau) in mps.iter().zip(taus) {
            let x = self.input(mp, tau)?;
            let pred = self.model.decode_output(&self.model.forward(params, &x), &self.norm);
            parts.push(sample_loss(&pred, mp, tau, &self.ctx)?);
        }
        Ok(average(&parts, &self.ctx.weights))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub epoch: usize,
    pub step: u64,
    #[serde(flatten)]
    pub loss: LossBreakdown,
    pub grad_norm: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train: LossBreakdown,
    pub val: Option<LossBreakdown>,
    pub selected: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Selection {
    pub epoch: usize,
    pub select_on: SelectOn,
    pub score: f64,
    pub checkpoint: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub params: Vec<f32>,
    pub selection: Selection,
    pub epochs: Vec<EpochRecord>,
    pub steps: u64,
}

/// Resumable training state.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub params: Vec<f32>,
    pub adam: Adam,
    pub meta: TrainMeta,
}

impl TrainState {
    pub fn fresh(model: &Model, cfg: &TrainConfig) -> Self {
        Self {
            params: model.init_params(cfg.seed),
            adam: Adam::new(model.num_params(), cfg),
            meta: TrainMeta::default(),
        }
    }

    pub fn to_checkpoint(&self, model: &Model, norm: Normalization, config_hash: &str) -> Checkpoint {
        let mut meta = self.meta.clone();
        meta.step = self.adam.t;
        Checkpoint::new(
            model,
            &self.params,
            norm,
            config_hash.to_string(),
            meta,
            &[(OPT_M, &self.adam.m), (OPT_V, &self.adam.v)],
        )
    }

    pub fn from_checkpoint(ck: &Checkpoint, path: &Path, cfg: &TrainConfig) -> Result<(Model, Self)> {
        let (model, params) = ck.restore(path)?;
        let moment = |name: &str| -> Result<Vec<f32>> {
            let t = ck
                .tensor(name)
                .ok_or_else(|| Error::format(path, format!("missing `{name}`")))?;
            if t.len() != params.len() {
                return Err(Error::format(path, format!("`{name}` has the wrong length")));
            }
            Ok(t.to_vec())
        };
        let mut adam = Adam::new(params.len(), cfg);
        adam.m = moment(OPT_M)?;
        adam.v = moment(OPT_V)?;
        adam.t = ck.header.meta.step;
        Ok((
            model,
            Self {
                params,
                adam,
                meta: ck.header.meta.clone(),
            },
        ))
    }
}

/// Paths of the training artifacts inside a run directory.
pub struct RunFiles {
    pub dir: PathBuf,
}

impl RunFiles {
    pub fn new(dir: &Path) -> Self {
        Self {
            dir: dir.to_path_buf(),
        }
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }
}

/// Keeps only log lines whose `epoch` field is at most `max_epoch`.
fn truncate_log(path: &Path, max_epoch: usize) -> Result<()> {
    if !path.exists() {
        return Ok(());
    }
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut kept = String::new();
    for line in BufReader::new(f).lines() {
        let line = line.map_err(|e| Error::io(path, e))?;
        let epoch = serde_json::from_str::<serde_json::Value>(&line)
            .ok()
            .and_then(|v| v.get("epoch").and_then(|e| e.as_u64()));
        if matches!(epoch, Some(e) if e as usize <= max_epoch) {
            kept.push_str(&line);
            kept.push('\n');
        }
    }
    fs::write(path, kept).map_err(|e| Error::io(path, e))
}

fn open_append(path: &Path) -> Result<BufWriter<File>> {
    OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map(BufWriter::new)
        .map_err(|e| Error::io(path, e))
}

fn write_line<T: Serialize>(w: &mut BufWriter<File>, path: &Path, value: &T) -> Result<()> {
    let line = serde_json::to_string(value).expect("record serializes");
    writeln!(w, "{line}").map_err(|e| Error::io(path, e))
}

/// Trains on the dataset described by `manifest`, writing logs and
/// checkpoints under `cfg.paths.run_dir`. With `resume`, continues from the
/// saved state if one exists.
pub fn train(cfg: &RunConfig, manifest: &DatasetManifest, resume: bool) -> Result<TrainOutcome> {
    manifest.ensure_compatible(cfg)?;
    let data_dir = &cfg.paths.data_dir;
    let train_mps = load_mp_images(data_dir, manifest, Split::Train)?;
    let val_mps = load_mp_images(data_dir, manifest, Split::Val)?;
    train_on(cfg, &train_mps, &val_mps, resume, &mut |_| {})
}

/// [`train`] on in-memory sensor images; `on_epoch` observes each finished
/// epoch.
pub fn train_on(
    cfg: &RunConfig,
    train_mps: &[MpImage],
    val_mps: &[MpImage],
    resume: bool,
    on_epoch: &mut dyn FnMut(&EpochRecord),
) -> Result<TrainOutcome> {
    let tc = &cfg.train;
    if train_mps.is_empty() {
        return Err(Error::config("dataset.train", "no training samples"));
    }
    let spec = &cfg.geometry.domain;
    let (rows, cols) = spec.shape();
    let masks = cfg.masks()?;
    let norm = cfg.normalization();
    let config_hash = cfg.config_hash();
    let files = RunFiles::new(&cfg.paths.run_dir);
    fs::create_dir_all(&files.dir).map_err(|e| Error::io(&files.dir, e))?;
    let echo = files.path(CONFIG_ECHO);
    fs::write(&echo, cfg.to_toml_string()).map_err(|e| Error::io(&echo, e))?;
    let state_path = files.path(STATE_CKPT);
    let best_path = files.path(BEST_CKPT);
    let step_log = files.path(STEP_LOG);
    let epoch_log = files.path(EPOCH_LOG);

    let (model, mut state) = if resume && state_path.exists() {
        let ck = Checkpoint::load(&state_path)?;
        if ck.header.config_hash != config_hash {
            return Err(Error::config(
                "train",
                "saved state was produced by a different configuration",
            ));
        }
        let (model, state) = TrainState::from_checkpoint(&ck, &state_path, tc)?;
        truncate_log(&step_log, state.meta.epoch)?;
        truncate_log(&epoch_log, state.meta.epoch)?;
        (model, state)
    } else {
        let model = Model::new(cfg.model.clone(), rows, cols)?;
        for p in [&step_log, &epoch_log, &best_path, &state_path] {
            let _ = fs::remove_file(p);
        }
        let state = TrainState::fresh(&model, tc);
        (model, state)
    };

    let objective = Objective {
        model: &model,
        ctx: LossContext {
            spec,
            masks: &masks,
            weights: tc.weights,
            units: tc.laplace_units,
        },
        layout: &cfg.geometry.sensors,
        mp_mask: &masks.mp,
        norm,
    };
    let val_taus = validation_quantiles(tc.seed, val_mps.len());
    let mut steps_out = open_append(&step_log)?;
    let mut epochs_out = open_append(&epoch_log)?;
    let mut grads = vec![0.0f32; model.num_params()];
    let mut epochs = Vec::new();
    let n = train_mps.len();
    let total_steps = (tc.epochs * steps_per_epoch(n, tc.batch_size)) as u64;

    for epoch in state.meta.epoch + 1..=tc.epochs {
        let taus = epoch_quantiles(tc.seed, epoch, n);
        let order = epoch_order(tc.seed, epoch, n);
        let mut parts = Vec::with_capacity(steps_per_epoch(n, tc.batch_size));
        let mut sizes = Vec::with_capacity(parts.capacity());
        for batch in order.chunks(tc.batch_size) {
            let mps: Vec<&MpImage> = batch.iter().map(|&i| &train_mps[i]).collect();
            let bt: Vec<f64> = batch.iter().map(|&i| taus[i]).collect();
            let loss = objective.batch_gradient(&state.params, &mps, &bt, &mut grads)?;
            if !loss.is_finite() || grads.iter().any(|g| !g.is_finite()) {
                return Err(Error::Runtime(format!(
                    "non-finite loss or gradient at epoch {epoch}, step {}; batch sample indices {batch:?}; loss {loss:?}",
                    state.adam.t + 1
                )));
            }
            let grad_norm = clip_global_norm(&mut grads, tc.clip_norm);
            state.adam.lr = tc.learning_rate_at(state.adam.t, total_steps);
            state.adam.step(&mut state.params, &grads);
            write_line(
                &mut steps_out,
                &step_log,
                &StepRecord {
                    epoch,
                    step: state.adam.t,
                    loss,
                    grad_norm,
                },
            )?;
            parts.push(loss);
            sizes.push(batch.len());
        }
        // sample-weighted mean of the batch losses
        let train_avg = {
            let w: Vec<f64> = sizes.iter().map(|&s| s as f64 / n as f64).collect();
            let mix = |f: fn(&LossBreakdown) -> f64| parts.iter().zip(&w).map(|(p, w)| f(p) * w).sum::<f64>();
            LossBreakdown::weighted(
                &tc.weights,
                mix(|p| p.l_tau),
                mix(|p| p.l_le),
                mix(|p| p.l_bc),
                mix(|p| p.l_tv),
            )
        };
        let val = if val_mps.is_empty() {
            None
        } else {
            Some(objective.loss(&state.params, val_mps, &val_taus)?)
        };
        let score = match tc.select_on {
            SelectOn::ValLoss => val.as_ref().map(|v| v.total).unwrap_or(train_avg.total),
            SelectOn::TrainLoss => train_avg.total,
        };
        let selected = state.meta.best_score.is_none_or(|b| score < b);
        if selected {
            state.meta.best_epoch = Some(epoch);
            state.meta.best_score = Some(score);
        }
        state.meta.epoch = epoch;
        state.meta.step = state.adam.t;
        if selected {
            let mut meta = state.meta.clone();
            meta.best_epoch = Some(epoch);
            Checkpoint::new(&model, &state.params, norm, config_hash.clone(), meta, &[]).save(&best_path)?;
        }
        let record = EpochRecord {
            epoch,
            train: train_avg,
            val,
            selected,
        };
        write_line(&mut epochs_out, &epoch_log, &record)?;
        steps_out.flush().map_err(|e| Error::io(&step_log, e))?;
        epochs_out.flush().map_err(|e| Error::io(&epoch_log, e))?;
        let due = tc.checkpoint_every > 0 && epoch % tc.checkpoint_every == 0;
        if due || epoch == tc.epochs {
            state.to_checkpoint(&model, norm, &config_hash).save(&state_path)?;
        }
        on_epoch(&record);
        epochs.push(record);
    }

    let best_epoch = state.meta.best_epoch.ok_or_else(|| {
        Error::Runtime("training finished without a selected epoch".into())
    })?;
    let best = Checkpoint::load(&best_path)?;
    let (_, params) = best.restore(&best_path)?;
    let selection = Selection {
        epoch: best_epoch,
        select_on: tc.select_on,
        score: state.meta.best_score.unwrap_or(f64::NAN),
        checkpoint: BEST_CKPT.into(),
    };
    let sel_path = files.path(SELECTION_FILE);
    fs::write(
        &sel_path,
        serde_json::to_string_pretty(&selection).expect("selection serializes"),
    )
    .map_err(|e| Error::io(&sel_path, e))?;
    Ok(TrainOutcome {
        params,
        selection,
        epochs,
        steps: state.adam.t,
    })
}

/// Last line of the per-step log, as written.
pub fn final_loss_line(run_dir: &Path) -> Result<String> {
    let path = run_dir.join(STEP_LOG);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    text.lines()
        .last()
        .map(str::to_string)
        .ok_or_else(|| Error::format(&path, "empty training log"))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn adam_first_step_moves_by_lr() {
        let cfg = TrainConfig {
            learning_rate: 0.1,
            ..TrainConfig::default()
        };
        let mut a = Adam::new(3, &cfg);
        let mut p = vec![1.0f32, -2.0, 0.5];
        a.step(&mut p, &[3.0, -0.01, 0.0]);
        assert!((p[0] - 0.9).abs() < 1e-6);
        assert!((p[1] + 1.9).abs() < 1e-5);
        assert_eq!(p[2], 0.5);
    }

    #[test]
    fn clipping() {
        let mut g = vec![3.0f32, 4.0];
        assert_eq!(clip_global_norm(&mut g, Some(1.0)), 5.0);
        assert!((g[0] - 0.6).abs() < 1e-7 && (g[1] - 0.8).abs() < 1e-7);
        let mut g = vec![3.0f32, 4.0];
        clip_global_norm(&mut g, None);
        assert_eq!(g, vec![3.0, 4.0]);
    }

    #[test]
    fn epoch_plan() {
        assert_eq!(steps_per_epoch(10, 3), 4);
        assert_eq!(steps_per_epoch(16, 16), 1);
        let a = epoch_quantiles(1, 1, 50);
        let b = epoch_quantiles(1, 2, 50);
        assert_eq!(a, epoch_quantiles(1, 1, 50));
        assert!(a.iter().zip(&b).all(|(x, y)| x != y));
        assert!(a.iter().all(|&t| t > 0.0 && t < 1.0));
        let mut o = epoch_order(3, 4, 20);
        assert_ne!(o, (0..20).collect::<Vec<_>>());
        o.sort();
        assert_eq!(o, (0..20).collect::<Vec<_>>());
    }
}
