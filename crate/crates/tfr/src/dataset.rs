//! Sample files and dataset generation.
//!
//! Layout under the data directory:
//!
//! ```text
//! manifest.toml
//! train/000000_mp.f32      sensor image (possibly noisy)
//! val/000000_mp.f32
//! test/000000_mp.f32
//! test/000000_label.f32    clean solved field
//! ```
//!
//! Every `.f32` file is one `rows x cols` field, row-major, little-endian
//! IEEE-754 single precision, no header.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use tfr_core::geometry::sample_source_powers;
use tfr_core::images::{inject_noise, make_mp_image};
use tfr_core::rng::{derive_seed, Stream};
use tfr_core::solver::{assemble_intensity, solve_steady_state};
use tfr_core::{FieldGrid, MpImage, NoiseSpec};

use crate::config::RunConfig;
use crate::error::{Error, Result};

pub const MANIFEST_FILE: &str = "manifest.toml";
pub const MANIFEST_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FileKind {
    Mp,
    Label,
}

/// Path of one sample file relative to the data directory.
pub fn sample_file(split: Split, index: usize, kind: FileKind) -> PathBuf {
    let suffix = match kind {
        FileKind::Mp => "mp",
        FileKind::Label => "label",
    };
    PathBuf::from(split.name()).join(format!("{index:06}_{suffix}.f32"))
}

pub fn encode_f32(grid: &FieldGrid) -> Vec<u8> {
    grid.as_slice()
        .iter()
        .flat_map(|&v| (v as f32).to_le_bytes())
        .collect()
}

pub fn decode_f32(bytes: &[u8], rows: usize, cols: usize) -> Option<FieldGrid> {
    if bytes.len() != rows * cols * 4 {
        return None;
    }
    let values = bytes
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
        .collect();
    FieldGrid::from_vec(rows, cols, values).ok()
}

pub fn write_f32_grid(path: &Path, grid: &FieldGrid) -> Result<()> {
    write_file(path, &encode_f32(grid))
}

pub fn read_f32_grid(path: &Path, rows: usize, cols: usize) -> Result<FieldGrid> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_f32(&bytes, rows, cols).ok_or_else(|| {
        Error::format(
            path,
            format!("expected {} bytes for a {rows}x{cols} field, found {}", rows * cols * 4, bytes.len()),
        )
    })
}

pub(crate) fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitCounts {
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

impl SplitCounts {
    pub fn get(&self, split: Split) -> usize {
        match split {
            Split::Train => self.train,
            Split::Val => self.val,
            Split::Test => self.test,
        }
    }

    /// Offset of a split's first sample in the global sample numbering that
    /// seeds the per-sample random streams.
    pub fn offset(&self, split: Split) -> usize {
        match split {
            Split::Train => 0,
            Split::Val => self.train,
            Split::Test => self.train + self.val,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FileEntry {
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub format_version: u32,
    pub rows: usize,
    pub cols: usize,
    pub counts: SplitCounts,
    pub seed: u64,
    pub power_std_w: f64,
    pub spec_hash: String,
    pub layout_hash: String,
    pub noise: Vec<NoiseSpec>,
    pub files: Vec<FileEntry>,
}

impl DatasetManifest {
    pub fn load(data_dir: &Path) -> Result<Self> {
        let path = data_dir.join(MANIFEST_FILE);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        toml::from_str(&text).map_err(|e| Error::format(&path, e.to_string()))
    }

    /// Everything but the file index matches what `cfg` would generate.
    pub fn matches(&self, cfg: &RunConfig) -> bool {
        let d = &cfg.dataset;
        self.format_version == MANIFEST_VERSION
            && (self.rows, self.cols) == cfg.geometry.domain.shape()
            && self.counts
                == (SplitCounts {
                    train: d.train,
                    val: d.val,
                    test: d.test,
                })
            && self.seed == d.seed
            && self.power_std_w == d.power_std_w
            && self.spec_hash == cfg.spec_hash()
            && self.layout_hash == cfg.layout_hash()
            && self.noise == d.noise_specs()
    }

    /// Checks the hashes recorded by [`DatasetManifest::matches`] against the
    /// configuration; a mismatch is a configuration error.
    pub fn ensure_compatible(&self, cfg: &RunConfig) -> Result<()> {
        if self.spec_hash != cfg.spec_hash() {
            return Err(Error::config(
                "geometry",
                "dataset was generated from a different geometry (spec hash mismatch)",
            ));
        }
        if self.layout_hash != cfg.layout_hash() {
            return Err(Error::config(
                "geometry.sensors",
                "dataset was generated from a different sensor layout (layout hash mismatch)",
            ));
        }
        if (self.rows, self.cols) != cfg.geometry.domain.shape() {
            return Err(Error::config("geometry.domain", "dataset grid shape differs"));
        }
        Ok(())
    }

    /// Whether every listed file exists with its recorded hash.
    pub fn files_intact(&self, data_dir: &Path) -> bool {
        self.files.iter().all(|f| {
            fs::read(data_dir.join(&f.path))
                .map(|b| sha256_hex(&b) == f.sha256)
                .unwrap_or(false)
        })
    }
}

/// One generated sample before it is written.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub powers: Vec<f64>,
    pub label: FieldGrid,
    pub mp: MpImage,
}

/// Draws powers, solves, and builds the noisy sensor image of global sample
/// number `global_index`.
pub fn make_sample(cfg: &RunConfig, noise: &[NoiseSpec], global_index: usize) -> Result<Sample> {
    let g = &cfg.geometry;
    let d = &cfg.dataset;
    let idx = global_index as u64;
    let draws = sample_source_powers(
        g.sources.len(),
        0.0,
        d.power_std_w,
        derive_seed(d.seed, Stream::SourcePowers, idx),
    )?;
    let powers: Vec<f64> = g
        .sources
        .iter()
        .zip(draws)
        .map(|(s, z)| s.nominal_power_w + z)
        .collect();
    let intensity = assemble_intensity(&g.domain, &g.sources, &powers)?;
    let label = solve_steady_state(&g.domain, &intensity, g.conductivity)?;
    let clean = make_mp_image(&label, &g.sensors)?;
    let mp = inject_noise(
        &clean,
        &g.sensors,
        noise,
        derive_seed(d.seed, Stream::SensorNoise, idx),
    )?;
    Ok(Sample { powers, label, mp })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GenerateOutcome {
    Created,
    /// An identical, intact dataset was already present.
    Unchanged,
}

pub fn generate_dataset(cfg: &RunConfig) -> Result<(DatasetManifest, GenerateOutcome)> {
    let dir = &cfg.paths.data_dir;
    if let Ok(existing) = DatasetManifest::load(dir) {
        if existing.matches(cfg) && existing.files_intact(dir) {
            return Ok((existing, GenerateOutcome::Unchanged));
        }
    }
    for split in Split::ALL {
        let sub = dir.join(split.name());
        if sub.exists() {
            fs::remove_dir_all(&sub).map_err(|e| Error::io(&sub, e))?;
        }
    }
    let _ = fs::remove_file(dir.join(MANIFEST_FILE));

    let d = &cfg.dataset;
    let counts = SplitCounts {
        train: d.train,
        val: d.val,
        test: d.test,
    };
    let noise = d.noise_specs();
    let mut files = Vec::with_capacity(d.total() + d.test);
    for split in Split::ALL {
        for i in 0..counts.get(split) {
            let global = counts.offset(split) + i;
            let sample = make_sample(cfg, &noise, global).map_err(|e| {
                Error::Runtime(format!("{} sample {i}: {e}", split.name()))
            })?;
            let mut emit = |kind: FileKind, grid: &FieldGrid| -> Result<()> {
                let rel = sample_file(split, i, kind);
                let bytes = encode_f32(grid);
                write_file(&dir.join(&rel), &bytes)?;
                files.push(FileEntry {
                    path: rel.to_string_lossy().replace('\\', "/"),
                    sha256: sha256_hex(&bytes),
                });
                Ok(())
            };
            emit(FileKind::Mp, sample.mp.grid())?;
            if split == Split::Test {
                emit(FileKind::Label, &sample.label)?;
            }
        }
    }
    let (rows, cols) = cfg.geometry.domain.shape();
    let manifest = DatasetManifest {
        format_version: MANIFEST_VERSION,
        rows,
        cols,
        counts,
        seed: d.seed,
        power_std_w: d.power_std_w,
        spec_hash: cfg.spec_hash(),
        layout_hash: cfg.layout_hash(),
        noise,
        files,
    };
    let text = toml::to_string(&manifest).expect("manifest serializes");
    write_file(&dir.join(MANIFEST_FILE), text.as_bytes())?;
    Ok((manifest, GenerateOutcome::Created))
}

/// Sensor images of one split, in index order.
pub fn load_mp_images(data_dir: &Path, manifest: &DatasetManifest, split: Split) -> Result<Vec<MpImage>> {
    (0..manifest.counts.get(split))
        .map(|i| {
            let path = data_dir.join(sample_file(split, i, FileKind::Mp));
            read_f32_grid(&path, manifest.rows, manifest.cols).map(MpImage::from_grid)
        })
        .collect()
}

/// Test-split labels, in index order.
pub fn load_labels(data_dir: &Path, manifest: &DatasetManifest, count: usize) -> Result<Vec<FieldGrid>> {
    (0..count.min(manifest.counts.test))
        .map(|i| {
            let path = data_dir.join(sample_file(Split::Test, i, FileKind::Label));
            read_f32_grid(&path, manifest.rows, manifest.cols)
        })
        .collect()
}
