//! Physics-informed loss terms on a predicted temperature field, each with its
//! gradient with respect to the field:
//!
//! * quantile (pinball) loss at sensor cells,
//! * squared 5-point Laplacian over source-free interior cells,
//! * squared deviation from the sink temperature on sink cells,
//! * squared first differences (total variation with exponent 2).
//!
//! Batch values average per-cell means over samples.

use alloc::format;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{DomainSpec, RegionMasks};
use crate::grid::FieldGrid;
use crate::images::MpImage;
use crate::solver::stencil;

/// Spacing used by the Laplace stencil.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LaplaceUnits {
    /// du, dv in meters.
    #[default]
    Physical,
    /// Unit spacing between neighbouring cells.
    Pixel,
}

impl LaplaceUnits {
    pub fn inverse_squared_spacing(self, spec: &DomainSpec) -> (f64, f64) {
        match self {
            LaplaceUnits::Physical => {
                let (du, dv) = (spec.du(), spec.dv());
                (1.0 / (du * du), 1.0 / (dv * dv))
            }
            LaplaceUnits::Pixel => (1.0, 1.0),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub alpha1: f64,
    pub alpha2: f64,
    pub alpha3: f64,
    pub alpha4: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            alpha1: 1e5,
            alpha2: 1e2,
            alpha3: 1e2,
            alpha4: 1e4,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.alpha1, self.alpha2, self.alpha3, self.alpha4];
        if all.iter().any(|a| !(*a >= 0.0 && a.is_finite())) {
            return Err(Error::Config("loss weights must be finite and >= 0".into()));
        }
        if all.iter().all(|&a| a == 0.0) {
            return Err(Error::Config("at least one loss weight must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_tau: f64,
    pub l_le: f64,
    pub l_bc: f64,
    pub l_tv: f64,
    pub total: f64,
}

impl LossBreakdown {
    /// Builds a breakdown whose total is the weighted sum of the components.
    pub fn weighted(w: &LossWeights, l_tau: f64, l_le: f64, l_bc: f64, l_tv: f64) -> Self {
        Self {
            l_tau,
            l_le,
            l_bc,
            l_tv,
            total: w.alpha1 * l_tau + w.alpha2 * l_le + w.alpha3 * l_bc + w.alpha4 * l_tv,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.l_tau.is_finite()
            && self.l_le.is_finite()
            && self.l_bc.is_finite()
            && self.l_tv.is_finite()
            && self.total.is_finite()
    }
}

/// Everything the composite loss needs besides the per-sample data.
#[derive(Debug, Clone, Copy)]
pub struct LossContext<'a> {
    pub spec: &'a DomainSpec,
    pub masks: &'a RegionMasks,
    pub weights: LossWeights,
    pub units: LaplaceUnits,
}

fn check_tau(tau: f64) -> Result<()> {
    if !(tau > 0.0 && tau < 1.0) {
        return Err(Error::OutOfRange(format!(
            "quantile level {tau} must lie strictly inside (0, 1)"
        )));
    }
    Ok(())
}

#[inline]
fn pinball(residual: f64, tau: f64) -> f64 {
    if residual >= 0.0 {
        tau * residual
    } else {
        (tau - 1.0) * residual
    }
}

/// Mean pinball loss over sensor cells, residual `y - y_hat`.
pub fn pinball_mp_loss(
    pred: &FieldGrid,
    mp: &MpImage,
    tau: f64,
    masks: &RegionMasks,
) -> Result<f64> {
    pinball_impl(pred, mp, tau, masks, None)
}

fn pinball_impl(
    pred: &FieldGrid,
    mp: &MpImage,
    tau: f64,
    masks: &RegionMasks,
    mut grad: Option<(&mut FieldGrid, f64)>,
) -> Result<f64> {
    check_tau(tau)?;
    let (rows, cols) = masks.shape();
    pred.ensure_shape(rows, cols)?;
    mp.grid().ensure_shape(rows, cols)?;
    if masks.n_mp == 0 {
        return Err(Error::Config("no sensor cells".into()));
    }
    let inv_n = 1.0 / masks.n_mp as f64;
    let mut sum = 0.0;
    for (r, c) in masks.mp.cells() {
        let res = mp.grid().get(r, c) - pred.get(r, c);
        sum += pinball(res, tau);
        if let Some((g, scale)) = grad.as_mut() {
            // y == y_hat takes the tau branch
            let d = if res >= 0.0 { -tau } else { 1.0 - tau };
            g.add_at(r, c, *scale * d * inv_n);
        }
    }
    Ok(sum * inv_n)
}

/// Mean squared discrete Laplacian over Ω_NC.
pub fn laplace_loss(
    pred: &FieldGrid,
    spec: &DomainSpec,
    masks: &RegionMasks,
    units: LaplaceUnits,
) -> Result<f64> {
    laplace_impl(pred, spec, masks, units, None)
}

fn laplace_impl(
    pred: &FieldGrid,
    spec: &DomainSpec,
    masks: &RegionMasks,
    units: LaplaceUnits,
    mut grad: Option<(&mut FieldGrid, f64)>,
) -> Result<f64> {
    let (rows, cols) = spec.shape();
    pred.ensure_shape(rows, cols)?;
    if masks.n_nc == 0 {
        return Ok(0.0);
    }
    let (iu2, iv2) = units.inverse_squared_spacing(spec);
    let inv_n = 1.0 / masks.n_nc as f64;
    let mut sum = 0.0;
    for (r, c) in masks.nc.cells() {
        let lap = stencil(pred, r, c, iu2, iv2);
        sum += lap * lap;
        if let Some((g, scale)) = grad.as_mut() {
            let k = *scale * 2.0 * lap * inv_n;
            g.add_at(r, c, -2.0 * k * (iu2 + iv2));
            g.add_at(r, c - 1, k * iu2);
            g.add_at(r, c + 1, k * iu2);
            g.add_at(r - 1, c, k * iv2);
            g.add_at(r + 1, c, k * iv2);
        }
    }
    Ok(sum * inv_n)
}

/// Mean squared deviation from the reference temperature over sink cells.
pub fn bc_loss(pred: &FieldGrid, spec: &DomainSpec, masks: &RegionMasks) -> Result<f64> {
    bc_impl(pred, spec, masks, None)
}

fn bc_impl(
    pred: &FieldGrid,
    spec: &DomainSpec,
    masks: &RegionMasks,
    mut grad: Option<(&mut FieldGrid, f64)>,
) -> Result<f64> {
    let (rows, cols) = spec.shape();
    pred.ensure_shape(rows, cols)?;
    if masks.n_bc == 0 {
        return Err(Error::Config("no sink cells: a heat sink must exist".into()));
    }
    let inv_n = 1.0 / masks.n_bc as f64;
    let t0 = spec.ref_temp_k;
    let mut sum = 0.0;
    for (r, c) in masks.bc.cells() {
        let d = pred.get(r, c) - t0;
        sum += d * d;
        if let Some((g, scale)) = grad.as_mut() {
            g.add_at(r, c, *scale * 2.0 * d * inv_n);
        }
    }
    Ok(sum * inv_n)
}

/// Mean squared horizontal plus mean squared vertical first difference.
pub fn tv_loss(pred: &FieldGrid) -> Result<f64> {
    tv_impl(pred, None)
}

fn tv_impl(pred: &FieldGrid, mut grad: Option<(&mut FieldGrid, f64)>) -> Result<f64> {
    let (h, w) = pred.shape();
    if h < 2 || w < 2 {
        return Err(Error::OutOfRange(format!(
            "total variation needs at least 2x2 cells, got {h}x{w}"
        )));
    }
    let inv_u = 1.0 / (h * (w - 1)) as f64;
    let inv_v = 1.0 / ((h - 1) * w) as f64;
    let (mut su, mut sv) = (0.0, 0.0);
    for r in 0..h {
        for c in 0..w {
            let t = pred.get(r, c);
            if c + 1 < w {
                let d = pred.get(r, c + 1) - t;
                su += d * d;
                if let Some((g, scale)) = grad.as_mut() {
                    let k = *scale * 2.0 * d * inv_u;
                    g.add_at(r, c + 1, k);
                    g.add_at(r, c, -k);
                }
            }
            if r + 1 < h {
                let d = pred.get(r + 1, c) - t;
                sv += d * d;
                if let Some((g, scale)) = grad.as_mut() {
                    let k = *scale * 2.0 * d * inv_v;
                    g.add_at(r + 1, c, k);
                    g.add_at(r, c, -k);
                }
            }
        }
    }
    Ok(su * inv_u + sv * inv_v)
}

fn sample_impl(
    pred: &FieldGrid,
    mp: &MpImage,
    tau: f64,
    ctx: &LossContext<'_>,
    mut grad: Option<(&mut FieldGrid, f64)>,
) -> Result<LossBreakdown> {
    let w = ctx.weights;
    w.validate()?;
    fn sub<'b>(
        grad: &'b mut Option<(&mut FieldGrid, f64)>,
        alpha: f64,
    ) -> Option<(&'b mut FieldGrid, f64)> {
        grad.as_mut().map(|(g, s)| (&mut **g, *s * alpha))
    }
    let l_tau = pinball_impl(pred, mp, tau, ctx.masks, sub(&mut grad, w.alpha1))?;
    let l_le = laplace_impl(pred, ctx.spec, ctx.masks, ctx.units, sub(&mut grad, w.alpha2))?;
    let l_bc = bc_impl(pred, ctx.spec, ctx.masks, sub(&mut grad, w.alpha3))?;
    let l_tv = tv_impl(pred, sub(&mut grad, w.alpha4))?;
    Ok(LossBreakdown::weighted(&w, l_tau, l_le, l_bc, l_tv))
}

/// Composite loss of a single sample.
pub fn sample_loss(
    pred: &FieldGrid,
    mp: &MpImage,
    tau: f64,
    ctx: &LossContext<'_>,
) -> Result<LossBreakdown> {
    sample_impl(pred, mp, tau, ctx, None)
}

/// Composite loss of a single sample; accumulates `scale * dL/dpred` into `grad`.
pub fn sample_loss_with_grad(
    pred: &FieldGrid,
    mp: &MpImage,
    tau: f64,
    ctx: &LossContext<'_>,
    grad: &mut FieldGrid,
    scale: f64,
) -> Result<LossBreakdown> {
    pred.ensure_shape(grad.rows(), grad.cols())?;
    sample_impl(pred, mp, tau, ctx, Some((grad, scale)))
}

/// Batch composite loss: every component is averaged over the batch, then
/// weighted.
pub fn composite_loss(
    preds: &[FieldGrid],
    mps: &[MpImage],
    taus: &[f64],
    ctx: &LossContext<'_>,
) -> Result<LossBreakdown> {
    if preds.is_empty() || preds.len() != mps.len() || preds.len() != taus.len() {
        return Err(Error::Config(format!(
            "batch of {} predictions, {} images, {} quantile levels",
            preds.len(),
            mps.len(),
            taus.len()
        )));
    }
    let parts = preds
        .iter()
        .zip(mps)
        .zip(taus)
        .map(|((p, m), &t)| sample_loss(p, m, t, ctx))
        .collect::<Result<alloc::vec::Vec<_>>>()?;
    Ok(average(&parts, &ctx.weights))
}

/// Averages per-sample breakdowns component-wise and re-weights.
pub fn average(parts: &[LossBreakdown], weights: &LossWeights) -> LossBreakdown {
    let n = parts.len().max(1) as f64;
    let sum = |f: fn(&LossBreakdown) -> f64| parts.iter().map(f).sum::<f64>() / n;
    LossBreakdown::weighted(
        weights,
        sum(|p| p.l_tau),
        sum(|p| p.l_le),
        sum(|p| p.l_bc),
        sum(|p| p.l_tv),
    )
}
