//! Test-set accuracy: per-sample RMSE, MAE, MRE and R² averaged over samples.

use alloc::format;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::FieldGrid;

/// Baseline used by the R² denominator.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum R2Mode {
    /// Mean of each true field over its own cells (coefficient of determination).
    #[default]
    Standard,
    /// Cellwise mean of the *predicted* fields over the whole test set. Not a
    /// coefficient of determination; kept for comparison with results reported
    /// that way.
    PredictedMean,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub rmse_avg: f64,
    pub mae_avg: f64,
    pub mre_avg: f64,
    pub r2_avg: f64,
    pub n_test: usize,
}

/// Per-sample metrics, before averaging.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SampleMetrics {
    pub rmse: f64,
    pub mae: f64,
    pub mre: f64,
    pub r2: f64,
}

pub fn compute_metrics(
    preds: &[FieldGrid],
    labels: &[FieldGrid],
    mode: R2Mode,
) -> Result<MetricsRecord> {
    let per = per_sample_metrics(preds, labels, mode)?;
    let n = per.len();
    if n == 0 {
        return Ok(MetricsRecord {
            rmse_avg: 0.0,
            mae_avg: 0.0,
            mre_avg: 0.0,
            r2_avg: 1.0,
            n_test: 0,
        });
    }
    let avg = |f: fn(&SampleMetrics) -> f64| per.iter().map(f).sum::<f64>() / n as f64;
    Ok(MetricsRecord {
        rmse_avg: avg(|m| m.rmse),
        mae_avg: avg(|m| m.mae),
        mre_avg: avg(|m| m.mre),
        r2_avg: avg(|m| m.r2),
        n_test: n,
    })
}

pub fn per_sample_metrics(
    preds: &[FieldGrid],
    labels: &[FieldGrid],
    mode: R2Mode,
) -> Result<Vec<SampleMetrics>> {
    if preds.len() != labels.len() {
        return Err(Error::Config(format!(
            "{} predictions for {} labels",
            preds.len(),
            labels.len()
        )));
    }
    let Some(first) = labels.first() else {
        return Ok(Vec::new());
    };
    let (rows, cols) = first.shape();
    for (p, l) in preds.iter().zip(labels) {
        p.ensure_shape(rows, cols)?;
        l.ensure_shape(rows, cols)?;
    }
    let cells = (rows * cols) as f64;

    let predicted_baseline = match mode {
        R2Mode::Standard => None,
        R2Mode::PredictedMean => {
            let mut mean = FieldGrid::zeros(rows, cols);
            for p in preds {
                for (m, v) in mean.as_mut_slice().iter_mut().zip(p.as_slice()) {
                    *m += v;
                }
            }
            let inv = 1.0 / preds.len() as f64;
            Some(mean.map(|m| m * inv))
        }
    };

    let mut out = Vec::with_capacity(preds.len());
    for (t, (p, l)) in preds.iter().zip(labels).enumerate() {
        let (mut sse, mut sae, mut sre) = (0.0, 0.0, 0.0);
        for (i, (&y, &yh)) in l.as_slice().iter().zip(p.as_slice()).enumerate() {
            if y <= 0.0 {
                return Err(Error::OutOfRange(format!(
                    "relative error needs positive labels: sample {t}, cell ({}, {}) holds {y}",
                    i / cols,
                    i % cols
                )));
            }
            let e = y - yh;
            sse += e * e;
            sae += e.abs();
            sre += e.abs() / y;
        }
        let sst = match &predicted_baseline {
            None => {
                let mean = l.as_slice().iter().sum::<f64>() / cells;
                l.as_slice().iter().map(|y| (y - mean) * (y - mean)).sum::<f64>()
            }
            Some(base) => l
                .as_slice()
                .iter()
                .zip(base.as_slice())
                .map(|(y, b)| (y - b) * (y - b))
                .sum::<f64>(),
        };
        let r2 = if sst > 0.0 {
            1.0 - sse / sst
        } else if sse == 0.0 {
            1.0
        } else {
            return Err(Error::OutOfRange(format!(
                "sample {t}: R² undefined for a field equal to its baseline"
            )));
        };
        out.push(SampleMetrics {
            rmse: libm::sqrt(sse / cells),
            mae: sae / cells,
            mre: sre / cells,
            r2,
        });
    }
    Ok(out)
}
