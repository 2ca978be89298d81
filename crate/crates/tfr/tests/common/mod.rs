#![allow(dead_code)]

use std::path::Path;
use std::process::{Command, Output};

use tfr::config::{NoisePreset, RunConfig};
use tfr::model::FlipAxis;
use tfr_core::{NoiseKind, NoiseSpec, SensorLayout};

/// A 16x16 variant of the desk setup that trains in well under a second per
/// epoch.
pub fn tiny_config(root: &Path) -> RunConfig {
    let mut cfg = RunConfig::desk(NoisePreset::Eps1);
    cfg.geometry.domain.grid_w = 16;
    cfg.geometry.domain.grid_h = 16;
    cfg.geometry.sources.truncate(2);
    let lattice = [2usize, 7, 12];
    let mut points: Vec<(usize, usize)> = lattice
        .iter()
        .flat_map(|&r| lattice.iter().map(move |&c| (r, c)))
        .collect();
    points.extend([(5, 15), (10, 15)]);
    cfg.geometry.sensors = SensorLayout::new(points)
        .with_group("green", vec![0, 3, 6])
        .with_group("right_boundary", vec![9, 10]);
    cfg.dataset.train = 8;
    cfg.dataset.val = 2;
    cfg.dataset.test = 3;
    cfg.dataset.noise_preset = None;
    cfg.dataset.noise = vec![NoiseSpec {
        kind: NoiseKind::Gaussian { sigma: 0.3 },
        group: "green".into(),
    }];
    cfg.model.base_width = 4;
    cfg.model.depth = 2;
    cfg.model.flip_axis = FlipAxis::MainDiagonal;
    cfg.train.epochs = 3;
    cfg.train.batch_size = 3;
    cfg.predict.n_pre = 4;
    cfg.predict.figures = 1;
    cfg.paths.data_dir = root.join("data");
    cfg.paths.run_dir = root.join("run");
    cfg.validate().expect("tiny config is valid");
    cfg
}

pub fn write_config(cfg: &RunConfig, path: &Path) {
    std::fs::write(path, cfg.to_toml_string()).unwrap();
}

pub fn tfr(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tfr"))
        .args(args)
        .env_remove("TFR_DATA_DIR")
        .env_remove("TFR_RUN_DIR")
        .output()
        .expect("tfr binary runs")
}

pub fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

pub fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}
