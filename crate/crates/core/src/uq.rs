//! Monte Carlo prediction: run the surrogate under `n_pre` random quantile
//! levels and reduce the fields to an elementwise mean and population
//! standard deviation (the aleatoric uncertainty).

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::SensorLayout;
use crate::grid::{FieldGrid, Mask};
use crate::images::{make_quantile_image, sample_tau, MpImage, NoiseSpec, QuantileImage};
use crate::rng::{stream_rng, Stream};

/// Anything that maps (sensor image, quantile image) to a temperature field.
pub trait QuantileSurrogate {
    fn predict(&self, mp: &MpImage, q: &QuantileImage) -> Result<FieldGrid>;
}

impl<F> QuantileSurrogate for F
where
    F: Fn(&MpImage, &QuantileImage) -> Result<FieldGrid>,
{
    fn predict(&self, mp: &MpImage, q: &QuantileImage) -> Result<FieldGrid> {
        self(mp, q)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PredictionResult {
    pub mean_field: FieldGrid,
    pub sigma_field: FieldGrid,
    pub n_pre: usize,
    pub seed: u64,
}

/// Largest negative radicand tolerated in the one-pass variance before it is
/// treated as a numerical failure.
pub const RADICAND_FLOOR: f64 = -1e-9;

/// Elementwise mean and population (1/N) standard deviation, two-pass.
pub fn population_moments(samples: &[FieldGrid]) -> Result<(FieldGrid, FieldGrid)> {
    let first = samples
        .first()
        .ok_or_else(|| Error::OutOfRange("no samples".into()))?;
    let (rows, cols) = first.shape();
    for s in samples {
        s.ensure_shape(rows, cols)?;
    }
    let inv_n = 1.0 / samples.len() as f64;
    let mut mean = FieldGrid::zeros(rows, cols);
    for s in samples {
        for (m, v) in mean.as_mut_slice().iter_mut().zip(s.as_slice()) {
            *m += v;
        }
    }
    mean.as_mut_slice().iter_mut().for_each(|m| *m *= inv_n);
    let mut var = FieldGrid::zeros(rows, cols);
    for s in samples {
        for ((acc, v), m) in var
            .as_mut_slice()
            .iter_mut()
            .zip(s.as_slice())
            .zip(mean.as_slice())
        {
            let d = v - m;
            *acc += d * d;
        }
    }
    let sigma = var.map(|v| libm::sqrt(v * inv_n));
    Ok((mean, sigma))
}

/// `sqrt(mean(x^2) - mean(x)^2)` per cell, clamped at zero. Errors if the
/// radicand drops below [`RADICAND_FLOOR`].
pub fn one_pass_sigma(samples: &[FieldGrid]) -> Result<FieldGrid> {
    let first = samples
        .first()
        .ok_or_else(|| Error::OutOfRange("no samples".into()))?;
    let (rows, cols) = first.shape();
    let inv_n = 1.0 / samples.len() as f64;
    let mut s1 = FieldGrid::zeros(rows, cols);
    let mut s2 = FieldGrid::zeros(rows, cols);
    for s in samples {
        s.ensure_shape(rows, cols)?;
        for ((a, b), v) in s1
            .as_mut_slice()
            .iter_mut()
            .zip(s2.as_mut_slice().iter_mut())
            .zip(s.as_slice())
        {
            *a += v;
            *b += v * v;
        }
    }
    let mut out = FieldGrid::zeros(rows, cols);
    for i in 0..rows * cols {
        let m = s1.as_slice()[i] * inv_n;
        let rad = s2.as_slice()[i] * inv_n - m * m;
        if rad < RADICAND_FLOOR {
            return Err(Error::Solver(format!(
                "negative variance radicand {rad:e} at cell {i}"
            )));
        }
        out.as_mut_slice()[i] = libm::sqrt(rad.max(0.0));
    }
    Ok(out)
}

/// Draws `n_pre` quantile levels from U(0, 1), predicts a field for each and
/// returns their mean and population standard deviation.
pub fn predict_with_uq<M: QuantileSurrogate + ?Sized>(
    model: &M,
    mp: &MpImage,
    layout: &SensorLayout,
    n_pre: usize,
    seed: u64,
) -> Result<PredictionResult> {
    if n_pre < 2 {
        return Err(Error::OutOfRange(format!(
            "n_pre = {n_pre}: at least two quantile samples are needed"
        )));
    }
    let (rows, cols) = mp.shape();
    let mut rng = stream_rng(seed, Stream::PredictQuantiles, 0);
    let mut fields = Vec::with_capacity(n_pre);
    for _ in 0..n_pre {
        let q = make_quantile_image(rows, cols, layout, sample_tau(&mut rng))?;
        let f = model.predict(mp, &q)?;
        f.ensure_shape(rows, cols)?;
        fields.push(f);
    }
    let (mean_field, sigma_field) = population_moments(&fields)?;
    // the guard on the textbook one-pass form must hold too
    one_pass_sigma(&fields)?;
    Ok(PredictionResult {
        mean_field,
        sigma_field,
        n_pre,
        seed,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct CellStats {
    pub count: usize,
    pub median: f64,
    pub max: f64,
    pub mean: f64,
}

impl CellStats {
    pub fn from_values(mut values: Vec<f64>) -> Self {
        if values.is_empty() {
            return Self::default();
        }
        values.sort_by(f64::total_cmp);
        let n = values.len();
        let median = if n % 2 == 1 {
            values[n / 2]
        } else {
            0.5 * (values[n / 2 - 1] + values[n / 2])
        };
        Self {
            count: n,
            median,
            max: values[n - 1],
            mean: values.iter().sum::<f64>() / n as f64,
        }
    }
}

/// Summary of sigma fields by sensor category.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct UqReport {
    /// Each named layout group.
    pub groups: BTreeMap<String, CellStats>,
    /// Sensors in at least one noise spec's group.
    pub noisy: CellStats,
    /// Sensors in no noise spec's group.
    pub clean: CellStats,
    /// Non-sensor cells.
    pub background: CellStats,
}

pub fn uq_report(
    result: &PredictionResult,
    layout: &SensorLayout,
    noise: &[NoiseSpec],
) -> Result<UqReport> {
    uq_report_pooled(core::slice::from_ref(result), layout, noise)
}

/// Like [`uq_report`] but pools cell values across several predictions
/// sharing one layout.
pub fn uq_report_pooled(
    results: &[PredictionResult],
    layout: &SensorLayout,
    noise: &[NoiseSpec],
) -> Result<UqReport> {
    let Some(first) = results.first() else {
        return Ok(UqReport::default());
    };
    let (rows, cols) = first.sigma_field.shape();
    layout.validate(rows, cols)?;
    let mut noisy = alloc::vec![false; layout.len()];
    for spec in noise {
        for &i in layout.group(&spec.group)? {
            noisy[i] = true;
        }
    }
    let sensors: Mask = layout.mask(rows, cols);
    let mut group_vals: BTreeMap<&str, Vec<f64>> = BTreeMap::new();
    let (mut nv, mut cv, mut bv) = (Vec::new(), Vec::new(), Vec::new());
    for res in results {
        let s = &res.sigma_field;
        s.ensure_shape(rows, cols)?;
        for (name, members) in &layout.groups {
            let entry = group_vals.entry(name.as_str()).or_default();
            entry.extend(members.iter().map(|&i| {
                let (r, c) = layout.points[i];
                s.get(r, c)
            }));
        }
        for (i, &(r, c)) in layout.points.iter().enumerate() {
            if noisy[i] {
                nv.push(s.get(r, c));
            } else {
                cv.push(s.get(r, c));
            }
        }
        for (r, c) in (0..rows).flat_map(|r| (0..cols).map(move |c| (r, c))) {
            if !sensors.get(r, c) {
                bv.push(s.get(r, c));
            }
        }
    }
    Ok(UqReport {
        groups: group_vals
            .into_iter()
            .map(|(k, v)| (String::from(k), CellStats::from_values(v)))
            .collect(),
        noisy: CellStats::from_values(nv),
        clean: CellStats::from_values(cv),
        background: CellStats::from_values(bv),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::images::NoiseKind;
    use alloc::vec;
    use core::cell::Cell;

    fn layout() -> SensorLayout {
        SensorLayout::new(vec![(0, 0), (1, 1), (2, 2)]).with_group("noisy", vec![1, 2])
    }

    fn mp() -> MpImage {
        MpImage::from_grid(FieldGrid::zeros(3, 3))
    }

    #[test]
    fn constant_model_has_zero_sigma() {
        let model = |_: &MpImage, _: &QuantileImage| Ok(FieldGrid::filled(3, 3, 310.0));
        let r = predict_with_uq(&model, &mp(), &layout(), 16, 1).unwrap();
        assert!(r.mean_field.as_slice().iter().all(|&v| v == 310.0));
        assert!(r.sigma_field.as_slice().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn two_point_population_std() {
        let calls = Cell::new(0usize);
        let model = |_: &MpImage, _: &QuantileImage| {
            let k = calls.get();
            calls.set(k + 1);
            Ok(FieldGrid::filled(3, 3, if k % 2 == 0 { 1.0 } else { 3.0 }))
        };
        let r = predict_with_uq(&model, &mp(), &layout(), 2, 0).unwrap();
        assert!(r.mean_field.as_slice().iter().all(|&v| v == 2.0));
        assert!(r.sigma_field.as_slice().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn needs_two_samples() {
        let model = |_: &MpImage, _: &QuantileImage| Ok(FieldGrid::zeros(3, 3));
        assert!(predict_with_uq(&model, &mp(), &layout(), 1, 0).is_err());
    }

    #[test]
    fn report_on_constructed_sigma() {
        let mut sigma = FieldGrid::zeros(3, 3);
        sigma.set(1, 1, 0.3);
        sigma.set(2, 2, 0.3);
        let res = PredictionResult {
            mean_field: FieldGrid::zeros(3, 3),
            sigma_field: sigma,
            n_pre: 2,
            seed: 0,
        };
        let noise = [NoiseSpec {
            kind: NoiseKind::Gaussian { sigma: 0.3 },
            group: "noisy".into(),
        }];
        let rep = uq_report(&res, &layout(), &noise).unwrap();
        assert_eq!(rep.groups["noisy"].median, 0.3);
        assert_eq!(rep.noisy.median, 0.3);
        assert_eq!(rep.clean.median, 0.0);
        assert_eq!(rep.background.median, 0.0);
        assert_eq!(rep.background.count, 6);

        let zero = PredictionResult {
            sigma_field: FieldGrid::zeros(3, 3),
            ..res
        };
        let rep = uq_report(&zero, &layout(), &noise).unwrap();
        assert!(rep.groups.values().all(|g| g.median == 0.0));
    }

    #[test]
    fn median_of_even_count() {
        let s = CellStats::from_values(vec![4.0, 1.0, 3.0, 2.0]);
        assert_eq!((s.median, s.max, s.count), (2.5, 4.0, 4));
    }
}
