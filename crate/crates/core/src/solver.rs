//! Ground-truth steady-state conduction solver.
//!
//! Solves `k (T_uu + T_vv) + phi = 0` on the node grid with the standard
//! 5-point stencil, `T = T0` on Dirichlet cells and zero flux (mirrored ghost
//! nodes) on the rest of the boundary. Each row is scaled by its control
//! volume, which makes the reduced system symmetric positive definite, and
//! the system is solved with Jacobi-preconditioned conjugate gradients.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::geometry::{rasterize_sources, DomainSpec, HeatSource, RegionMasks};
use crate::grid::{FieldGrid, Mask};
use crate::losses::LaplaceUnits;

/// Volumetric heat generation per cell, zero outside source footprints.
#[derive(Debug, Clone, PartialEq)]
pub struct SourceIntensityMap {
    phi: FieldGrid,
}

impl SourceIntensityMap {
    /// Wraps an arbitrary finite field, e.g. a manufactured source term.
    pub fn from_field(phi: FieldGrid) -> Result<Self> {
        if !phi.is_finite() {
            return Err(Error::OutOfRange("intensity must be finite".into()));
        }
        Ok(Self { phi })
    }

    pub fn field(&self) -> &FieldGrid {
        &self.phi
    }
}

/// Spreads each source's power uniformly over its rasterized footprint
/// (unit thickness). Overlapping footprints add.
pub fn assemble_intensity(
    spec: &DomainSpec,
    sources: &[HeatSource],
    powers: &[f64],
) -> Result<SourceIntensityMap> {
    if powers.len() != sources.len() {
        return Err(Error::Config(format!(
            "{} powers for {} sources",
            powers.len(),
            sources.len()
        )));
    }
    // validates every footprint against the domain
    rasterize_sources(spec, sources)?;
    let cell_area = spec.du() * spec.dv();
    let mut phi = FieldGrid::zeros(spec.grid_h, spec.grid_w);
    for (index, (src, &power)) in sources.iter().zip(powers).enumerate() {
        let fp = src.footprint(spec);
        let n = fp.count();
        if n == 0 {
            return Err(Error::Source {
                index,
                reason: "footprint covers no grid node at this resolution".into(),
            });
        }
        let q = power / (n as f64 * cell_area);
        for (r, c) in fp.cells() {
            phi.add_at(r, c, q);
        }
    }
    SourceIntensityMap::from_field(phi)
}

#[derive(Debug, Clone, Copy)]
pub struct SolverOptions {
    pub rel_tol: f64,
    pub abs_tol: f64,
    pub max_iter: usize,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self {
            rel_tol: 1e-10,
            abs_tol: 1e-10,
            max_iter: 20_000,
        }
    }
}

/// Solve with the spec's sink segment as the only Dirichlet boundary.
pub fn solve_steady_state(
    spec: &DomainSpec,
    intensity: &SourceIntensityMap,
    conductivity: f64,
) -> Result<FieldGrid> {
    spec.validate()?;
    solve_with_dirichlet(
        spec,
        intensity,
        conductivity,
        &spec.sink_mask(),
        SolverOptions::default(),
    )
}

/// Symmetric operator of the reduced system: `A x` on free cells, with
/// Dirichlet cells pinned at zero deviation.
struct Operator<'a> {
    rows: usize,
    cols: usize,
    /// face length / node distance for horizontal neighbours, per row
    wu: Vec<f64>,
    /// same for vertical neighbours, per column
    wv: Vec<f64>,
    fixed: &'a Mask,
}

impl Operator<'_> {
    fn apply(&self, x: &[f64], out: &mut [f64]) {
        let (rows, cols) = (self.rows, self.cols);
        for r in 0..rows {
            for c in 0..cols {
                let i = r * cols + c;
                if self.fixed.get(r, c) {
                    out[i] = 0.0;
                    continue;
                }
                let xi = x[i];
                let mut acc = 0.0;
                let mut link = |j: usize, w: f64, fixed: bool| {
                    let xj = if fixed { 0.0 } else { x[j] };
                    acc += w * (xi - xj);
                };
                if c > 0 {
                    link(i - 1, self.wu[r], self.fixed.get(r, c - 1));
                }
                if c + 1 < cols {
                    link(i + 1, self.wu[r], self.fixed.get(r, c + 1));
                }
                if r > 0 {
                    link(i - cols, self.wv[c], self.fixed.get(r - 1, c));
                }
                if r + 1 < rows {
                    link(i + cols, self.wv[c], self.fixed.get(r + 1, c));
                }
                out[i] = acc;
            }
        }
    }

    fn diagonal(&self) -> Vec<f64> {
        let (rows, cols) = (self.rows, self.cols);
        let mut d = vec![0.0; rows * cols];
        for r in 0..rows {
            for c in 0..cols {
                let mut s = 0.0;
                if c > 0 {
                    s += self.wu[r];
                }
                if c + 1 < cols {
                    s += self.wu[r];
                }
                if r > 0 {
                    s += self.wv[c];
                }
                if r + 1 < rows {
                    s += self.wv[c];
                }
                d[r * cols + c] = s;
            }
        }
        d
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// General entry point: any set of Dirichlet cells held at the spec's
/// reference temperature, zero flux elsewhere on the boundary.
pub fn solve_with_dirichlet(
    spec: &DomainSpec,
    intensity: &SourceIntensityMap,
    conductivity: f64,
    dirichlet: &Mask,
    opts: SolverOptions,
) -> Result<FieldGrid> {
    let (rows, cols) = spec.shape();
    intensity.field().ensure_shape(rows, cols)?;
    if dirichlet.shape() != (rows, cols) {
        return Err(Error::shape((rows, cols), dirichlet.shape()));
    }
    if !(conductivity > 0.0 && conductivity.is_finite()) {
        return Err(Error::OutOfRange(format!(
            "conductivity must be positive, got {conductivity}"
        )));
    }
    if dirichlet.count() == 0 {
        return Err(Error::Solver(
            "no Dirichlet cell: field defined only up to a constant".into(),
        ));
    }
    let (du, dv) = (spec.du(), spec.dv());
    // boundary rows/columns own half a control volume in that direction
    let half = |i: usize, n: usize| if i == 0 || i + 1 == n { 0.5 } else { 1.0 };
    let wu: Vec<f64> = (0..rows).map(|r| half(r, rows) * dv / du).collect();
    let wv: Vec<f64> = (0..cols).map(|c| half(c, cols) * du / dv).collect();
    let op = Operator {
        rows,
        cols,
        wu,
        wv,
        fixed: dirichlet,
    };

    let n = rows * cols;
    let phi = intensity.field().as_slice();
    let mut b = vec![0.0; n];
    for r in 0..rows {
        for c in 0..cols {
            if !dirichlet.get(r, c) {
                let vol = half(c, cols) * du * half(r, rows) * dv;
                b[r * cols + c] = vol * phi[r * cols + c] / conductivity;
            }
        }
    }

    let diag = op.diagonal();
    let mut x = vec![0.0; n];
    let mut res = b.clone();
    let b_norm = libm::sqrt(dot(&b, &b));
    let target = opts.abs_tol.max(opts.rel_tol * b_norm);
    if b_norm > target {
        let precond = |r: &[f64], z: &mut [f64]| {
            for i in 0..n {
                z[i] = if dirichlet.as_slice()[i] { 0.0 } else { r[i] / diag[i] };
            }
        };
        let mut z = vec![0.0; n];
        precond(&res, &mut z);
        let mut p = z.clone();
        let mut ap = vec![0.0; n];
        let mut rz = dot(&res, &z);
        let mut converged = false;
        for _ in 0..opts.max_iter {
            op.apply(&p, &mut ap);
            let alpha = rz / dot(&p, &ap);
            for i in 0..n {
                x[i] += alpha * p[i];
                res[i] -= alpha * ap[i];
            }
            if libm::sqrt(dot(&res, &res)) <= target {
                converged = true;
                break;
            }
            precond(&res, &mut z);
            let rz_next = dot(&res, &z);
            let beta = rz_next / rz;
            rz = rz_next;
            for i in 0..n {
                p[i] = z[i] + beta * p[i];
            }
        }
        // the recurrence residual drifts; confirm against the true one
        op.apply(&x, &mut ap);
        let true_res = libm::sqrt(
            b.iter()
                .zip(&ap)
                .map(|(bi, ai)| (bi - ai) * (bi - ai))
                .sum::<f64>(),
        );
        if !converged || true_res > 100.0 * target {
            return Err(Error::Solver(format!(
                "conjugate gradients stalled at residual {true_res:e} (target {target:e})"
            )));
        }
    }
    let t0 = spec.ref_temp_k;
    FieldGrid::from_vec(rows, cols, x.into_iter().map(|d| t0 + d).collect())
}

/// 5-point Laplacian at Ω_NC cells, zero elsewhere.
pub fn laplace_residual(
    spec: &DomainSpec,
    field: &FieldGrid,
    masks: &RegionMasks,
    units: LaplaceUnits,
) -> Result<FieldGrid> {
    let (rows, cols) = spec.shape();
    field.ensure_shape(rows, cols)?;
    let (iu2, iv2) = units.inverse_squared_spacing(spec);
    let mut out = FieldGrid::zeros(rows, cols);
    for (r, c) in masks.nc.cells() {
        out.set(r, c, stencil(field, r, c, iu2, iv2));
    }
    Ok(out)
}

#[inline]
pub(crate) fn stencil(f: &FieldGrid, r: usize, c: usize, iu2: f64, iv2: f64) -> f64 {
    let t = f.get(r, c);
    (f.get(r, c + 1) - 2.0 * t + f.get(r, c - 1)) * iu2
        + (f.get(r - 1, c) - 2.0 * t + f.get(r + 1, c)) * iv2
}
