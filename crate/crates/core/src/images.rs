//! Network input images: the sparse sensor-temperature image and the
//! quantile-level image, plus sensor noise injection.

use alloc::format;
use alloc::vec::Vec;

use rand::distr::{Distribution, Open01};
use rand_distr::{Normal, Uniform};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::SensorLayout;
use crate::grid::{FieldGrid, Mask};
use crate::rng::{stream_rng, Rng, Stream};

/// Sensor temperatures at sensor cells, zero everywhere else.
#[derive(Debug, Clone, PartialEq)]
pub struct MpImage(FieldGrid);

impl MpImage {
    /// Trusts the caller that non-sensor cells are zero.
    pub fn from_grid(grid: FieldGrid) -> Self {
        Self(grid)
    }

    pub fn grid(&self) -> &FieldGrid {
        &self.0
    }

    pub fn into_grid(self) -> FieldGrid {
        self.0
    }

    pub fn shape(&self) -> (usize, usize) {
        self.0.shape()
    }

    /// Sensor readings in layout order.
    pub fn readings(&self, layout: &SensorLayout) -> Vec<f64> {
        layout.points.iter().map(|&(r, c)| self.0.get(r, c)).collect()
    }
}

pub fn make_mp_image(field: &FieldGrid, layout: &SensorLayout) -> Result<MpImage> {
    let (rows, cols) = field.shape();
    layout.validate(rows, cols)?;
    let mut img = FieldGrid::zeros(rows, cols);
    for &(r, c) in &layout.points {
        img.set(r, c, field.get(r, c));
    }
    Ok(MpImage(img))
}

/// A single quantile level `tau` at every sensor cell, zero elsewhere.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantileImage {
    tau: f64,
    grid: FieldGrid,
}

impl QuantileImage {
    pub fn tau(&self) -> f64 {
        self.tau
    }

    pub fn grid(&self) -> &FieldGrid {
        &self.grid
    }

    pub fn support(&self) -> Mask {
        Mask::from_fn(self.grid.rows(), self.grid.cols(), |r, c| {
            self.grid.get(r, c) != 0.0
        })
    }
}

pub fn make_quantile_image(
    rows: usize,
    cols: usize,
    layout: &SensorLayout,
    tau: f64,
) -> Result<QuantileImage> {
    if !(tau > 0.0 && tau < 1.0) {
        return Err(Error::OutOfRange(format!(
            "quantile level {tau} must lie strictly inside (0, 1)"
        )));
    }
    layout.validate(rows, cols)?;
    let mut grid = FieldGrid::zeros(rows, cols);
    for &(r, c) in &layout.points {
        grid.set(r, c, tau);
    }
    Ok(QuantileImage { tau, grid })
}

/// Draws `tau ~ U(0, 1)` (open interval).
pub fn sample_tau(rng: &mut Rng) -> f64 {
    Open01.sample(rng)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum NoiseKind {
    Gaussian { sigma: f64 },
    Uniform { lo: f64, hi: f64 },
}

impl NoiseKind {
    /// Standard deviation of one draw.
    pub fn std_dev(&self) -> f64 {
        match *self {
            NoiseKind::Gaussian { sigma } => sigma,
            NoiseKind::Uniform { lo, hi } => (hi - lo) / libm::sqrt(12.0),
        }
    }
}

/// Additive sensor noise applied to one named sensor group.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseSpec {
    #[serde(flatten)]
    pub kind: NoiseKind,
    pub group: alloc::string::String,
}

impl NoiseSpec {
    pub fn validate(&self, layout: &SensorLayout) -> Result<()> {
        match self.kind {
            NoiseKind::Gaussian { sigma } if !(sigma >= 0.0 && sigma.is_finite()) => {
                return Err(Error::Config(format!("noise sigma {sigma} must be >= 0")))
            }
            NoiseKind::Uniform { lo, hi } if !(lo <= hi && lo.is_finite() && hi.is_finite()) => {
                return Err(Error::Config(format!("uniform noise needs lo <= hi, got {lo}..{hi}")))
            }
            _ => {}
        }
        layout.group(&self.group).map(|_| ())
    }
}

enum Sampler {
    Gaussian(Normal<f64>),
    Uniform(Uniform<f64>),
    Constant(f64),
}

impl Sampler {
    fn new(kind: NoiseKind) -> Result<Self> {
        Ok(match kind {
            NoiseKind::Gaussian { sigma } => Sampler::Gaussian(
                Normal::new(0.0, sigma).map_err(|e| Error::Config(format!("{e}")))?,
            ),
            // point mass; `Uniform` rejects empty ranges
            NoiseKind::Uniform { lo, hi } if lo == hi => Sampler::Constant(lo),
            NoiseKind::Uniform { lo, hi } => Sampler::Uniform(
                Uniform::new(lo, hi).map_err(|e| Error::Config(format!("{e}")))?,
            ),
        })
    }

    fn draw(&self, rng: &mut Rng) -> f64 {
        match self {
            Sampler::Gaussian(d) => d.sample(rng),
            Sampler::Uniform(d) => d.sample(rng),
            Sampler::Constant(v) => *v,
        }
    }
}

/// Adds one independent draw per sensor per applicable spec. Specs apply in
/// order; a sensor listed in several groups receives every draw. Only sensor
/// cells are touched.
pub fn inject_noise(
    img: &MpImage,
    layout: &SensorLayout,
    noise: &[NoiseSpec],
    seed: u64,
) -> Result<MpImage> {
    let (rows, cols) = img.shape();
    layout.validate(rows, cols)?;
    let mut rng = stream_rng(seed, Stream::SensorNoise, 0);
    let mut out = img.0.clone();
    for spec in noise {
        spec.validate(layout)?;
        let sampler = Sampler::new(spec.kind)?;
        for &i in layout.group(&spec.group)? {
            let (r, c) = layout.points[i];
            out.add_at(r, c, sampler.draw(&mut rng));
        }
    }
    Ok(MpImage(out))
}

/// Affine map between kelvin and network units: `(T - ref) / scale` at
/// sensor cells. Zero background cells stay zero either way.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub enabled: bool,
    pub ref_temp_k: f64,
    pub scale_k: f64,
}

impl Normalization {
    pub fn identity() -> Self {
        Self {
            enabled: false,
            ref_temp_k: 0.0,
            scale_k: 1.0,
        }
    }

    /// Network input channel for an MP image.
    pub fn encode_mp(&self, img: &MpImage, mp_mask: &Mask) -> FieldGrid {
        if !self.enabled {
            return img.0.clone();
        }
        let g = &img.0;
        FieldGrid::from_fn(g.rows(), g.cols(), |r, c| {
            if mp_mask.get(r, c) {
                (g.get(r, c) - self.ref_temp_k) / self.scale_k
            } else {
                0.0
            }
        })
    }

    /// Network output to kelvin.
    #[inline]
    pub fn decode(&self, y: f64) -> f64 {
        if self.enabled {
            self.ref_temp_k + self.scale_k * y
        } else {
            y
        }
    }

    /// d(kelvin)/d(network output).
    #[inline]
    pub fn decode_slope(&self) -> f64 {
        if self.enabled {
            self.scale_k
        } else {
            1.0
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;
    use rand::SeedableRng;

    fn layout() -> SensorLayout {
        SensorLayout::new(vec![(0, 0), (1, 2), (3, 3), (2, 1), (0, 3)])
    }

    #[test]
    fn mp_image_copies_sensor_cells_only() {
        let f = FieldGrid::from_fn(4, 4, |r, c| 300.0 + libm::cos((r * 4 + c) as f64));
        let img = make_mp_image(&f, &layout()).unwrap();
        let nonzero: Vec<_> = (0..16)
            .filter(|&i| img.grid().as_slice()[i] != 0.0)
            .map(|i| (i / 4, i % 4))
            .collect();
        assert_eq!(nonzero.len(), 5);
        for (r, c) in nonzero {
            assert!(layout().points.contains(&(r, c)));
            assert_eq!(img.grid().get(r, c), f.get(r, c));
        }
        let flat = make_mp_image(&FieldGrid::filled(4, 4, 298.0), &layout()).unwrap();
        assert_eq!(flat.grid().as_slice().iter().filter(|&&v| v == 298.0).count(), 5);
    }

    #[test]
    fn quantile_image_bounds_and_support() {
        let l = layout();
        let q = make_quantile_image(4, 4, &l, 0.5).unwrap();
        assert_eq!(q.grid().as_slice().iter().filter(|&&v| v == 0.5).count(), 5);
        assert_eq!(q.support(), l.mask(4, 4));
        assert!(make_quantile_image(4, 4, &l, 0.999).is_ok());
        assert!(make_quantile_image(4, 4, &l, 1.0).is_err());
        assert!(make_quantile_image(4, 4, &l, 0.0).is_err());
    }

    #[test]
    fn zero_sigma_is_identity_and_seed_is_deterministic() {
        let l = layout().with_group("all", vec![0, 1, 2, 3, 4]);
        let img = make_mp_image(&FieldGrid::filled(4, 4, 300.0), &l).unwrap();
        let spec = NoiseSpec {
            kind: NoiseKind::Gaussian { sigma: 0.0 },
            group: "all".into(),
        };
        assert_eq!(inject_noise(&img, &l, &[spec], 1).unwrap(), img);
        let spec = NoiseSpec {
            kind: NoiseKind::Gaussian { sigma: 0.3 },
            group: "all".into(),
        };
        let a = inject_noise(&img, &l, &[spec.clone()], 9).unwrap();
        assert_eq!(a, inject_noise(&img, &l, &[spec.clone()], 9).unwrap());
        assert_ne!(a, inject_noise(&img, &l, &[spec], 10).unwrap());
        // sparsity preserved
        assert_eq!(
            a.grid().as_slice().iter().filter(|&&v| v != 0.0).count(),
            5
        );
    }

    #[test]
    fn unknown_group_is_config_error() {
        let l = layout();
        let img = make_mp_image(&FieldGrid::filled(4, 4, 300.0), &l).unwrap();
        let spec = NoiseSpec {
            kind: NoiseKind::Uniform { lo: -1.0, hi: 1.0 },
            group: "nope".into(),
        };
        assert!(matches!(
            inject_noise(&img, &l, &[spec], 1),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn open_unit_draws() {
        let mut rng = Rng::seed_from_u64(0);
        for _ in 0..10_000 {
            let t = sample_tau(&mut rng);
            assert!(t > 0.0 && t < 1.0);
        }
    }

    #[test]
    fn normalization_round_trip() {
        let n = Normalization {
            enabled: true,
            ref_temp_k: 298.0,
            scale_k: 10.0,
        };
        let l = layout();
        let img = make_mp_image(&FieldGrid::filled(4, 4, 318.0), &l).unwrap();
        let enc = n.encode_mp(&img, &l.mask(4, 4));
        assert_eq!(enc.get(0, 0), 2.0);
        assert_eq!(enc.get(1, 1), 0.0);
        assert_eq!(n.decode(2.0), 318.0);
    }
}
