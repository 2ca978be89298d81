//! Physical domain, heat-source footprints, sensor layout and the three cell
//! sets the loss terms iterate over: sensor cells, source-free interior cells
//! and isothermal sink cells.
//!
//! Grid nodes sit on the domain boundary: column `c` is at `u = c * du` and
//! row `r` at `v = height - r * dv`, so row 0 is the top edge. A cell belongs
//! to a shape iff its node lies inside the shape.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::Mask;
use crate::rng::{stream_rng, Stream};

const EDGE_EPS: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainSpec {
    pub width_m: f64,
    pub height_m: f64,
    /// Columns.
    pub grid_w: usize,
    /// Rows.
    pub grid_h: usize,
    /// Sink midpoint as a fraction of the height, measured from the bottom.
    pub sink_center: f64,
    pub sink_width_m: f64,
    pub ref_temp_k: f64,
}

impl DomainSpec {
    pub fn validate(&self) -> Result<()> {
        if self.grid_w < 3 || self.grid_h < 3 {
            return Err(Error::Domain(format!(
                "grid must be at least 3x3, got {}x{}",
                self.grid_h, self.grid_w
            )));
        }
        if !(self.width_m > 0.0 && self.height_m > 0.0) {
            return Err(Error::Domain("width and height must be positive".into()));
        }
        if !(self.sink_width_m > 0.0 && self.sink_width_m <= self.height_m) {
            return Err(Error::Domain(format!(
                "sink width {} must lie in (0, height]",
                self.sink_width_m
            )));
        }
        let mid = self.sink_center * self.height_m;
        let half = 0.5 * self.sink_width_m;
        if mid - half < -EDGE_EPS || mid + half > self.height_m + EDGE_EPS {
            return Err(Error::Domain(
                "sink segment extends past the left boundary".into(),
            ));
        }
        if !self.ref_temp_k.is_finite() {
            return Err(Error::Domain("reference temperature must be finite".into()));
        }
        Ok(())
    }

    #[inline]
    pub fn du(&self) -> f64 {
        self.width_m / (self.grid_w - 1) as f64
    }

    #[inline]
    pub fn dv(&self) -> f64 {
        self.height_m / (self.grid_h - 1) as f64
    }

    #[inline]
    pub fn shape(&self) -> (usize, usize) {
        (self.grid_h, self.grid_w)
    }

    /// Physical (u, v) of the node at (row, col).
    #[inline]
    pub fn node(&self, row: usize, col: usize) -> (f64, f64) {
        (
            col as f64 * self.du(),
            self.height_m - row as f64 * self.dv(),
        )
    }

    /// Left-edge cells whose node lies on the sink segment.
    pub fn sink_mask(&self) -> Mask {
        let mid = self.sink_center * self.height_m;
        let half = 0.5 * self.sink_width_m;
        Mask::from_fn(self.grid_h, self.grid_w, |r, c| {
            let (_, v) = self.node(r, c);
            c == 0 && (v - mid).abs() <= half + EDGE_EPS
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Axis {
    Horizontal,
    Vertical,
}

/// Footprint geometry, centered on the owning source.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "shape", rename_all = "snake_case")]
pub enum Shape {
    Rectangle { width_m: f64, height_m: f64 },
    Circle { radius_m: f64 },
    /// A stadium: segment of `length_m` between the two cap centers, swept by `radius_m`.
    Capsule { length_m: f64, radius_m: f64, axis: Axis },
}

impl Shape {
    /// Half extents of the bounding box.
    fn half_extents(&self) -> (f64, f64) {
        match *self {
            Shape::Rectangle { width_m, height_m } => (0.5 * width_m, 0.5 * height_m),
            Shape::Circle { radius_m } => (radius_m, radius_m),
            Shape::Capsule {
                length_m,
                radius_m,
                axis,
            } => match axis {
                Axis::Horizontal => (0.5 * length_m + radius_m, radius_m),
                Axis::Vertical => (radius_m, 0.5 * length_m + radius_m),
            },
        }
    }

    fn dims_valid(&self) -> bool {
        match *self {
            Shape::Rectangle { width_m, height_m } => width_m > 0.0 && height_m > 0.0,
            Shape::Circle { radius_m } => radius_m > 0.0,
            Shape::Capsule {
                length_m, radius_m, ..
            } => length_m >= 0.0 && radius_m > 0.0,
        }
    }

    /// Whether the offset (du, dv) from the center is inside.
    fn contains_offset(&self, du: f64, dv: f64) -> bool {
        match *self {
            Shape::Rectangle { width_m, height_m } => {
                du.abs() <= 0.5 * width_m + EDGE_EPS && dv.abs() <= 0.5 * height_m + EDGE_EPS
            }
            Shape::Circle { radius_m } => du * du + dv * dv <= radius_m * radius_m + EDGE_EPS,
            Shape::Capsule {
                length_m,
                radius_m,
                axis,
            } => {
                let (along, across) = match axis {
                    Axis::Horizontal => (du, dv),
                    Axis::Vertical => (dv, du),
                };
                let excess = (along.abs() - 0.5 * length_m).max(0.0);
                excess * excess + across * across <= radius_m * radius_m + EDGE_EPS
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeatSource {
    #[serde(flatten)]
    pub shape: Shape,
    /// (u, v) in meters, v measured from the bottom edge.
    pub center_m: [f64; 2],
    #[serde(default)]
    pub nominal_power_w: f64,
}

impl HeatSource {
    pub fn contains(&self, u: f64, v: f64) -> bool {
        self.shape
            .contains_offset(u - self.center_m[0], v - self.center_m[1])
    }

    /// Dimension and containment checks; `index` labels the error.
    pub fn check(&self, index: usize, spec: &DomainSpec) -> Result<()> {
        if !self.shape.dims_valid() {
            return Err(Error::Source {
                index,
                reason: "non-positive dimensions".into(),
            });
        }
        let (hx, hy) = self.shape.half_extents();
        let [cu, cv] = self.center_m;
        if cu - hx < -EDGE_EPS
            || cu + hx > spec.width_m + EDGE_EPS
            || cv - hy < -EDGE_EPS
            || cv + hy > spec.height_m + EDGE_EPS
        {
            return Err(Error::Source {
                index,
                reason: "footprint extends outside the domain".into(),
            });
        }
        Ok(())
    }

    /// Rasterized footprint of this source alone.
    pub fn footprint(&self, spec: &DomainSpec) -> Mask {
        Mask::from_fn(spec.grid_h, spec.grid_w, |r, c| {
            let (u, v) = spec.node(r, c);
            self.contains(u, v)
        })
    }
}

/// Union of all source footprints.
pub fn rasterize_sources(spec: &DomainSpec, sources: &[HeatSource]) -> Result<Mask> {
    spec.validate()?;
    let mut mask = Mask::new(spec.grid_h, spec.grid_w);
    for (i, s) in sources.iter().enumerate() {
        s.check(i, spec)?;
        mask.union_with(&s.footprint(spec));
    }
    Ok(mask)
}

/// Sensor positions as (row, col) grid indices, plus named subsets referring
/// to positions by their index in `points`.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct SensorLayout {
    pub points: Vec<(usize, usize)>,
    #[serde(default)]
    pub groups: BTreeMap<String, Vec<usize>>,
}

impl SensorLayout {
    pub fn new(points: Vec<(usize, usize)>) -> Self {
        Self {
            points,
            groups: BTreeMap::new(),
        }
    }

    pub fn with_group(mut self, name: &str, members: Vec<usize>) -> Self {
        self.groups.insert(name.into(), members);
        self
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn validate(&self, rows: usize, cols: usize) -> Result<()> {
        if self.points.is_empty() {
            return Err(Error::Layout("at least one sensor is required".into()));
        }
        let mut seen = Mask::new(rows, cols);
        for &(r, c) in &self.points {
            if r >= rows || c >= cols {
                return Err(Error::Layout(format!(
                    "sensor ({r}, {c}) outside the {rows}x{cols} grid"
                )));
            }
            if seen.get(r, c) {
                return Err(Error::Layout(format!("duplicate sensor ({r}, {c})")));
            }
            seen.set(r, c, true);
        }
        for (name, members) in &self.groups {
            let mut used = alloc::vec![false; self.points.len()];
            for &m in members {
                if m >= self.points.len() {
                    return Err(Error::Layout(format!(
                        "group `{name}` refers to sensor #{m}, only {} exist",
                        self.points.len()
                    )));
                }
                if core::mem::replace(&mut used[m], true) {
                    return Err(Error::Layout(format!(
                        "group `{name}` lists sensor #{m} twice"
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn group(&self, name: &str) -> Result<&[usize]> {
        self.groups
            .get(name)
            .map(Vec::as_slice)
            .ok_or_else(|| Error::Config(format!("unknown sensor group `{name}`")))
    }

    pub fn mask(&self, rows: usize, cols: usize) -> Mask {
        let mut m = Mask::new(rows, cols);
        for &(r, c) in &self.points {
            m.set(r, c, true);
        }
        m
    }
}

/// Cell sets used by the loss terms.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RegionMasks {
    /// Sensor cells.
    pub mp: Mask,
    /// Interior cells without heat sources, where the Laplace residual applies.
    pub nc: Mask,
    /// Isothermal sink cells.
    pub bc: Mask,
    pub n_mp: usize,
    pub n_nc: usize,
    pub n_bc: usize,
}

impl RegionMasks {
    pub fn shape(&self) -> (usize, usize) {
        self.mp.shape()
    }
}

pub fn build_masks(
    spec: &DomainSpec,
    sources: &[HeatSource],
    layout: &SensorLayout,
) -> Result<RegionMasks> {
    let footprint = rasterize_sources(spec, sources)?;
    let (rows, cols) = spec.shape();
    layout.validate(rows, cols)?;
    let mp = layout.mask(rows, cols);
    let nc = Mask::from_fn(rows, cols, |r, c| {
        r > 0 && c > 0 && r + 1 < rows && c + 1 < cols && !footprint.get(r, c)
    });
    let bc = spec.sink_mask();
    Ok(RegionMasks {
        n_mp: mp.count(),
        n_nc: nc.count(),
        n_bc: bc.count(),
        mp,
        nc,
        bc,
    })
}

/// One independent Normal(mean, std^2) draw per source.
pub fn sample_source_powers(
    n_sources: usize,
    mean_w: f64,
    std_w: f64,
    seed: u64,
) -> Result<Vec<f64>> {
    if !(std_w >= 0.0) {
        return Err(Error::OutOfRange(format!("power std {std_w} must be >= 0")));
    }
    let normal = Normal::new(mean_w, std_w)
        .map_err(|_| Error::OutOfRange(format!("power std {std_w} must be >= 0")))?;
    let mut rng = stream_rng(seed, Stream::SourcePowers, 0);
    Ok((0..n_sources).map(|_| normal.sample(&mut rng)).collect())
}
