//! Run configuration: one TOML document drives every subcommand.
//!
//! ```toml
//! version = 1
//! [geometry]      # domain, conductivity, sources, sensors and groups
//! [dataset]       # split sizes, seed, power spread, noise, normalization
//! [model]         # U-Net widths, depth, flip axis
//! [train]         # optimizer, epochs, loss weights, selection
//! [predict]       # Monte Carlo sample count and seed, R² mode
//! [paths]         # data and run directories
//! ```
//!
//! Paths may be overridden with `TFR_DATA_DIR` and `TFR_RUN_DIR`.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use tfr_core::images::{NoiseKind, Normalization};
use tfr_core::{
    build_masks, DomainSpec, HeatSource, LaplaceUnits, LossWeights, NoiseSpec, R2Mode,
    RegionMasks, SensorLayout, Shape,
};

use crate::error::{Error, Result};
use crate::model::{FlipAxis, ModelConfig};

pub const CONFIG_VERSION: u32 = 1;
pub const DATA_DIR_ENV: &str = "TFR_DATA_DIR";
pub const RUN_DIR_ENV: &str = "TFR_RUN_DIR";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub version: u32,
    pub geometry: GeometryConfig,
    pub dataset: DatasetConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    #[serde(default)]
    pub predict: PredictConfig,
    #[serde(default)]
    pub paths: PathsConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeometryConfig {
    pub domain: DomainSpec,
    /// Thermal conductivity used by the label solver.
    pub conductivity: f64,
    pub sources: Vec<HeatSource>,
    pub sensors: SensorLayout,
}

/// Named sensor-noise regimes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoisePreset {
    /// Gaussian, sigma 0.3 K, on the `green` group.
    Eps1,
    /// Gaussian, sigma 0.5 K, on the `green` group.
    Eps2,
    /// Uniform on [-0.3, 0.3] K, on the `green` group.
    Eps3,
    /// Uniform on [-1, 1] K, on the `green` group.
    Eps4,
    /// Gaussian, sigma 0.3 K, on the `right_of_line` group.
    Eps5,
    /// No noise.
    Clean,
}

impl NoisePreset {
    pub fn specs(self) -> Vec<NoiseSpec> {
        let (kind, group) = match self {
            Self::Eps1 => (NoiseKind::Gaussian { sigma: 0.3 }, "green"),
            Self::Eps2 => (NoiseKind::Gaussian { sigma: 0.5 }, "green"),
            Self::Eps3 => (NoiseKind::Uniform { lo: -0.3, hi: 0.3 }, "green"),
            Self::Eps4 => (NoiseKind::Uniform { lo: -1.0, hi: 1.0 }, "green"),
            Self::Eps5 => (NoiseKind::Gaussian { sigma: 0.3 }, "right_of_line"),
            Self::Clean => return Vec::new(),
        };
        vec![NoiseSpec {
            kind,
            group: group.into(),
        }]
    }

    pub fn all() -> [Self; 6] {
        [
            Self::Eps1,
            Self::Eps2,
            Self::Eps3,
            Self::Eps4,
            Self::Eps5,
            Self::Clean,
        ]
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Eps1 => "eps1",
            Self::Eps2 => "eps2",
            Self::Eps3 => "eps3",
            Self::Eps4 => "eps4",
            Self::Eps5 => "eps5",
            Self::Clean => "clean",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    pub train: usize,
    pub val: usize,
    pub test: usize,
    pub seed: u64,
    /// Per-source power is `nominal_power_w + N(0, power_std_w^2)`.
    pub power_std_w: f64,
    /// Either a preset name or an explicit list, not both.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub noise_preset: Option<NoisePreset>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub noise: Vec<NoiseSpec>,
    /// Network inputs/outputs as `(T - T0) / norm_scale_k` instead of raw kelvin.
    #[serde(default = "yes")]
    pub normalize: bool,
    #[serde(default = "DatasetConfig::default_scale")]
    pub norm_scale_k: f64,
}

fn yes() -> bool {
    true
}

impl DatasetConfig {
    fn default_scale() -> f64 {
        10.0
    }

    /// Effective noise specs.
    pub fn noise_specs(&self) -> Vec<NoiseSpec> {
        match self.noise_preset {
            Some(p) => p.specs(),
            None => self.noise.clone(),
        }
    }

    pub fn total(&self) -> usize {
        self.train + self.val + self.test
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectOn {
    TrainLoss,
    #[default]
    ValLoss,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// When set, the learning rate follows a cosine from `learning_rate`
    /// down to this value over the whole run; otherwise it stays constant.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub final_learning_rate: Option<f64>,
    #[serde(default = "TrainConfig::default_betas")]
    pub adam_betas: [f64; 2],
    #[serde(default = "TrainConfig::default_eps")]
    pub adam_eps: f64,
    pub seed: u64,
    #[serde(default)]
    pub weights: LossWeights,
    #[serde(default)]
    pub laplace_units: LaplaceUnits,
    /// Global gradient-norm clip; `None` disables clipping.
    #[serde(default = "TrainConfig::default_clip")]
    pub clip_norm: Option<f64>,
    /// Save a resumable state every this many epochs (0: only at the end).
    #[serde(default)]
    pub checkpoint_every: usize,
    #[serde(default)]
    pub select_on: SelectOn,
}

impl TrainConfig {
    fn default_betas() -> [f64; 2] {
        [0.9, 0.999]
    }

    fn default_eps() -> f64 {
        1e-8
    }

    fn default_clip() -> Option<f64> {
        Some(10.0)
    }

    /// Learning rate for optimizer step `step` (0-based) of `total_steps`.
    pub fn learning_rate_at(&self, step: u64, total_steps: u64) -> f64 {
        match self.final_learning_rate {
            None => self.learning_rate,
            Some(end) => {
                let x = (step as f64 / total_steps.max(1) as f64).min(1.0);
                end + 0.5 * (self.learning_rate - end) * (1.0 + (std::f64::consts::PI * x).cos())
            }
        }
    }
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            batch_size: 16,
            learning_rate: 1e-3,
            final_learning_rate: None,
            adam_betas: Self::default_betas(),
            adam_eps: Self::default_eps(),
            seed: 0,
            weights: LossWeights::default(),
            laplace_units: LaplaceUnits::Physical,
            clip_norm: Self::default_clip(),
            checkpoint_every: 0,
            select_on: SelectOn::ValLoss,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PredictConfig {
    pub n_pre: usize,
    pub seed: u64,
    /// Test samples to predict; `None` means the whole test split.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub limit: Option<usize>,
    #[serde(default)]
    pub r2_mode: R2Mode,
    /// Test samples rendered as figures by `report`.
    #[serde(default = "PredictConfig::default_figures")]
    pub figures: usize,
}

impl PredictConfig {
    fn default_figures() -> usize {
        4
    }
}

impl Default for PredictConfig {
    fn default() -> Self {
        Self {
            n_pre: 100,
            seed: 0,
            limit: None,
            r2_mode: R2Mode::Standard,
            figures: Self::default_figures(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PathsConfig {
    pub data_dir: PathBuf,
    pub run_dir: PathBuf,
}

impl Default for PathsConfig {
    fn default() -> Self {
        Self {
            data_dir: PathBuf::from("data"),
            run_dir: PathBuf::from("run"),
        }
    }
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| {
            let span = e
                .span()
                .map(|s| format!(" (bytes {}..{})", s.start, s.end))
                .unwrap_or_default();
            Error::config("<document>", format!("{}{span}", e.message()))
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads, validates and applies path overrides from the environment.
    /// Relative paths are resolved against the config file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::from_toml_str(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        for p in [&mut cfg.paths.data_dir, &mut cfg.paths.run_dir] {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        cfg.apply_env_overrides();
        Ok(cfg)
    }

    pub fn apply_env_overrides(&mut self) {
        if let Some(v) = std::env::var_os(DATA_DIR_ENV) {
            self.paths.data_dir = PathBuf::from(v);
        }
        if let Some(v) = std::env::var_os(RUN_DIR_ENV) {
            self.paths.run_dir = PathBuf::from(v);
        }
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes to TOML")
    }

    pub fn validate(&self) -> Result<()> {
        if self.version != CONFIG_VERSION {
            return Err(Error::config(
                "version",
                format!("unsupported version {} (expected {CONFIG_VERSION})", self.version),
            ));
        }
        let g = &self.geometry;
        g.domain
            .validate()
            .map_err(|e| Error::config("geometry.domain", e.to_string()))?;
        if !(g.conductivity > 0.0 && g.conductivity.is_finite()) {
            return Err(Error::config("geometry.conductivity", "must be positive and finite"));
        }
        let spec = &g.domain;
        for (i, s) in g.sources.iter().enumerate() {
            s.check(i, spec)
                .map_err(|e| Error::config(format!("geometry.sources[{i}]"), e.to_string()))?;
            if s.footprint(spec).count() == 0 {
                return Err(Error::config(
                    format!("geometry.sources[{i}]"),
                    "footprint covers no grid node",
                ));
            }
        }
        g.sensors
            .validate(spec.grid_h, spec.grid_w)
            .map_err(|e| Error::config("geometry.sensors", e.to_string()))?;
        if spec.sink_mask().count() == 0 {
            return Err(Error::config(
                "geometry.domain.sink_width_m",
                "the sink covers no grid node",
            ));
        }

        let d = &self.dataset;
        if d.train == 0 {
            return Err(Error::config("dataset.train", "must be at least 1"));
        }
        if !(d.power_std_w >= 0.0) {
            return Err(Error::config("dataset.power_std_w", "must be >= 0"));
        }
        if d.noise_preset.is_some() && !d.noise.is_empty() {
            return Err(Error::config(
                "dataset.noise",
                "give either `noise_preset` or an explicit `noise` list, not both",
            ));
        }
        for (i, n) in d.noise_specs().iter().enumerate() {
            let path = if d.noise_preset.is_some() {
                "dataset.noise_preset".to_string()
            } else {
                format!("dataset.noise[{i}]")
            };
            n.validate(&g.sensors).map_err(|e| Error::config(path, e.to_string()))?;
        }
        if !(d.norm_scale_k > 0.0) {
            return Err(Error::config("dataset.norm_scale_k", "must be positive"));
        }

        self.model.validate(spec.grid_h, spec.grid_w)?;

        let t = &self.train;
        if t.epochs == 0 {
            return Err(Error::config("train.epochs", "must be at least 1"));
        }
        if t.batch_size == 0 {
            return Err(Error::config("train.batch_size", "must be at least 1"));
        }
        if !(t.learning_rate > 0.0) {
            return Err(Error::config("train.learning_rate", "must be positive"));
        }
        if let Some(end) = t.final_learning_rate {
            if !(end > 0.0 && end <= t.learning_rate) {
                return Err(Error::config(
                    "train.final_learning_rate",
                    "must be positive and at most train.learning_rate",
                ));
            }
        }
        if !t.adam_betas.iter().all(|b| (0.0..1.0).contains(b)) {
            return Err(Error::config("train.adam_betas", "each beta must lie in [0, 1)"));
        }
        if !(t.adam_eps > 0.0) {
            return Err(Error::config("train.adam_eps", "must be positive"));
        }
        t.weights
            .validate()
            .map_err(|e| Error::config("train.weights", e.to_string()))?;
        if let Some(c) = t.clip_norm {
            if !(c > 0.0) {
                return Err(Error::config("train.clip_norm", "must be positive when set"));
            }
        }
        if t.select_on == SelectOn::ValLoss && d.val == 0 {
            return Err(Error::config(
                "train.select_on",
                "selection on validation loss needs dataset.val > 0",
            ));
        }
        if self.predict.n_pre < 2 {
            return Err(Error::config("predict.n_pre", "must be at least 2"));
        }
        Ok(())
    }

    pub fn normalization(&self) -> Normalization {
        Normalization {
            enabled: self.dataset.normalize,
            ref_temp_k: self.geometry.domain.ref_temp_k,
            scale_k: self.dataset.norm_scale_k,
        }
    }

    pub fn masks(&self) -> Result<RegionMasks> {
        Ok(build_masks(
            &self.geometry.domain,
            &self.geometry.sources,
            &self.geometry.sensors,
        )?)
    }

    /// Hash of everything except the `paths` section, so moving a run's
    /// directories keeps its identity.
    pub fn config_hash(&self) -> String {
        let mut c = self.clone();
        c.paths = PathsConfig {
            data_dir: PathBuf::new(),
            run_dir: PathBuf::new(),
        };
        hash_json(&c)
    }

    /// Hash of the geometry that determines the labels.
    pub fn spec_hash(&self) -> String {
        hash_json(&(
            &self.geometry.domain,
            self.geometry.conductivity,
            &self.geometry.sources,
        ))
    }

    pub fn layout_hash(&self) -> String {
        hash_json(&self.geometry.sensors)
    }

    /// The 64x64 reference setup used by the shipped presets.
    pub fn desk(preset: NoisePreset) -> Self {
        let rect = |w: f64, h: f64, u: f64, v: f64| HeatSource {
            shape: Shape::Rectangle {
                width_m: w,
                height_m: h,
            },
            center_m: [u, v],
            nominal_power_w: 20000.0,
        };
        let circle = |r: f64, u: f64, v: f64| HeatSource {
            shape: Shape::Circle { radius_m: r },
            center_m: [u, v],
            nominal_power_w: 20000.0,
        };
        let capsule = |l: f64, r: f64, axis, u: f64, v: f64| HeatSource {
            shape: Shape::Capsule {
                length_m: l,
                radius_m: r,
                axis,
            },
            center_m: [u, v],
            nominal_power_w: 20000.0,
        };
        use tfr_core::geometry::Axis;
        let sources = vec![
            rect(0.03, 0.02, 0.05, 0.155),
            circle(0.012, 0.14, 0.16),
            capsule(0.03, 0.008, Axis::Horizontal, 0.09, 0.10),
            rect(0.02, 0.03, 0.16, 0.075),
            circle(0.01, 0.05, 0.05),
            capsule(0.025, 0.007, Axis::Vertical, 0.115, 0.035),
        ];

        // 5x5 interior lattice, one sensor on the top and bottom edges, and
        // five on the right edge
        let lattice = [6usize, 18, 31, 44, 57];
        let mut points = Vec::new();
        for &r in &lattice {
            for &c in &lattice {
                points.push((r, c));
            }
        }
        points.push((0, 31));
        points.push((63, 31));
        let right_edge_start = points.len();
        for &r in &[8usize, 20, 32, 44, 56] {
            points.push((r, 63));
        }
        let cols_of = |pred: &dyn Fn(usize) -> bool| -> Vec<usize> {
            (0..right_edge_start).filter(|&i| pred(points[i].1)).collect()
        };
        let green = cols_of(&|c| c <= 18);
        let right_of_line = cols_of(&|c| c >= 44);
        let right_boundary: Vec<usize> = (right_edge_start..points.len()).collect();
        let sensors = SensorLayout::new(points.clone())
            .with_group("green", green)
            .with_group("right_of_line", right_of_line)
            .with_group("right_boundary", right_boundary);

        Self {
            version: CONFIG_VERSION,
            geometry: GeometryConfig {
                domain: DomainSpec {
                    width_m: 0.2,
                    height_m: 0.2,
                    grid_w: 64,
                    grid_h: 64,
                    sink_center: 0.5,
                    sink_width_m: 0.02,
                    ref_temp_k: 298.0,
                },
                conductivity: DESK_CONDUCTIVITY,
                sources,
                sensors,
            },
            dataset: DatasetConfig {
                train: 2000,
                val: 200,
                test: 200,
                seed: 2024,
                power_std_w: 1000.0,
                noise_preset: Some(preset),
                noise: Vec::new(),
                normalize: true,
                norm_scale_k: 10.0,
            },
            model: ModelConfig {
                base_width: 8,
                depth: 4,
                flip_axis: FlipAxis::MainDiagonal,
                ..ModelConfig::default()
            },
            train: TrainConfig {
                seed: 7,
                final_learning_rate: Some(1e-5),
                laplace_units: LaplaceUnits::Pixel,
                ..TrainConfig::default()
            },
            predict: PredictConfig::default(),
            paths: PathsConfig {
                data_dir: PathBuf::from(format!("data/desk_{}", preset.name())),
                run_dir: PathBuf::from(format!("runs/desk_{}", preset.name())),
            },
        }
    }
}

/// Conductivity of the reference setup; puts the hottest cell a few tens of
/// kelvin above the sink.
pub const DESK_CONDUCTIVITY: f64 = 5000.0;

pub fn hash_json<T: Serialize + ?Sized>(value: &T) -> String {
    let bytes = serde_json::to_vec(value).expect("value serializes to JSON");
    hex::encode(Sha256::digest(bytes))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_validate_and_round_trip() {
        for p in NoisePreset::all() {
            let cfg = RunConfig::desk(p);
            cfg.validate().unwrap();
            let text = cfg.to_toml_string();
            let back = RunConfig::from_toml_str(&text).unwrap();
            assert_eq!(back, cfg);
            assert_eq!(back.config_hash(), cfg.config_hash());
        }
    }

    #[test]
    fn desk_layout_groups() {
        let cfg = RunConfig::desk(NoisePreset::Eps5);
        let s = &cfg.geometry.sensors;
        assert_eq!(s.len(), 32);
        assert_eq!(s.group("right_boundary").unwrap().len(), 5);
        let rol = s.group("right_of_line").unwrap();
        assert!(rol.iter().all(|&i| s.points[i].1 < 63));
        assert!(s.group("green").unwrap().len() >= 8);
    }

    fn field_path(err: Error) -> String {
        match err {
            Error::Config { path, .. } => path,
            other => panic!("expected a config error, got {other}"),
        }
    }

    #[test]
    fn errors_name_the_field() {
        let mut cfg = RunConfig::desk(NoisePreset::Eps1);
        cfg.train.learning_rate = 0.0;
        assert_eq!(field_path(cfg.validate().unwrap_err()), "train.learning_rate");

        let mut cfg = RunConfig::desk(NoisePreset::Eps1);
        cfg.dataset.noise_preset = None;
        cfg.dataset.noise = vec![NoiseSpec {
            kind: NoiseKind::Gaussian { sigma: 0.1 },
            group: "nope".into(),
        }];
        assert_eq!(field_path(cfg.validate().unwrap_err()), "dataset.noise[0]");

        let mut cfg = RunConfig::desk(NoisePreset::Eps1);
        cfg.geometry.domain.grid_w = 32;
        assert_eq!(field_path(cfg.validate().unwrap_err()), "geometry.sensors");

        let mut cfg = RunConfig::desk(NoisePreset::Eps1);
        cfg.geometry.sources[0].center_m = [0.0, 0.0];
        assert_eq!(field_path(cfg.validate().unwrap_err()), "geometry.sources[0]");

        let mut cfg = RunConfig::desk(NoisePreset::Eps1);
        cfg.model.depth = 7;
        assert_eq!(field_path(cfg.validate().unwrap_err()), "model.depth");
    }

    #[test]
    fn unknown_keys_rejected() {
        let mut text = RunConfig::desk(NoisePreset::Eps1).to_toml_string();
        text = text.replace("[train]\n", "[train]\nlearning_rat = 0.1\n");
        assert!(matches!(
            RunConfig::from_toml_str(&text),
            Err(Error::Config { .. })
        ));
    }

    #[test]
    fn hashes_track_their_sections() {
        let a = RunConfig::desk(NoisePreset::Eps1);
        let mut b = a.clone();
        b.train.epochs = 3;
        assert_eq!(a.spec_hash(), b.spec_hash());
        assert_ne!(a.config_hash(), b.config_hash());
        b.geometry.conductivity *= 2.0;
        assert_ne!(a.spec_hash(), b.spec_hash());
        assert_eq!(a.layout_hash(), b.layout_hash());
        let mut c = a.clone();
        c.paths.run_dir = PathBuf::from("elsewhere");
        assert_eq!(a.config_hash(), c.config_hash());
    }

    #[test]
    fn cosine_schedule_endpoints() {
        let mut t = TrainConfig::default();
        assert_eq!(t.learning_rate_at(50, 100), 1e-3);
        t.final_learning_rate = Some(1e-5);
        assert_eq!(t.learning_rate_at(0, 100), 1e-3);
        assert!((t.learning_rate_at(50, 100) - 0.5 * (1e-3 + 1e-5)).abs() < 1e-15);
        assert!((t.learning_rate_at(100, 100) - 1e-5).abs() < 1e-18);
        t.final_learning_rate = Some(2e-3);
        let mut cfg = RunConfig::desk(NoisePreset::Eps1);
        cfg.train = t;
        assert!(matches!(cfg.validate(), Err(Error::Config { path, .. }) if path == "train.final_learning_rate"));
    }
}
