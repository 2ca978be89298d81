//! Figures and the summary table.
//!
//! `render_reports` writes into `<run_dir>/report/`:
//!
//! ```text
//! summary.csv              one row per predicted test sample plus a mean row
//! uq.csv                   pooled sigma statistics per sensor category
//! 000000_truth.png         label field
//! 000000_mean.png          Monte Carlo mean prediction
//! 000000_abs_error.png     |mean - label|
//! 000000_sigma.png         predicted standard deviation
//! 000000_fusion.png        sigma with the sensor layout drawn on top
//! ```
//!
//! Figures exist only for the first `predict.figures` samples. Each grid cell
//! is drawn as a `SCALE x SCALE` block; field images use a viridis-like ramp
//! scaled to the image's own range.

use std::fs;
use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};
use tfr_core::uq::uq_report_pooled;
use tfr_core::{FieldGrid, NoiseSpec, PredictionResult, R2Mode, SensorLayout, UqReport};

use crate::error::{Error, Result};
use crate::predict::metrics_csv;

pub const REPORT_DIR: &str = "report";
pub const SUMMARY_CSV: &str = "summary.csv";
pub const UQ_CSV: &str = "uq.csv";
pub const SCALE: u32 = 4;
/// Marker for sensors in a noise spec's group.
pub const NOISY_MARK: Rgb<u8> = Rgb([255, 0, 255]);
/// Marker for the remaining sensors.
pub const CLEAN_MARK: Rgb<u8> = Rgb([255, 255, 255]);

const RAMP: [[u8; 3]; 9] = [
    [68, 1, 84],
    [71, 44, 122],
    [59, 81, 139],
    [44, 113, 142],
    [33, 144, 141],
    [39, 173, 129],
    [92, 200, 99],
    [170, 220, 50],
    [253, 231, 37],
];

/// Color of `t` in [0, 1] on the ramp.
pub fn ramp(t: f64) -> Rgb<u8> {
    let t = if t.is_finite() { t.clamp(0.0, 1.0) } else { 0.0 };
    let x = t * (RAMP.len() - 1) as f64;
    let i = (x.floor() as usize).min(RAMP.len() - 2);
    let f = x - i as f64;
    let mix = |k: usize| (RAMP[i][k] as f64 * (1.0 - f) + RAMP[i + 1][k] as f64 * f).round() as u8;
    Rgb([mix(0), mix(1), mix(2)])
}

pub fn heatmap(field: &FieldGrid) -> RgbImage {
    let (lo, hi) = (field.min(), field.max());
    let span = if hi > lo { hi - lo } else { 1.0 };
    let (rows, cols) = field.shape();
    RgbImage::from_fn(cols as u32 * SCALE, rows as u32 * SCALE, |x, y| {
        ramp((field.get((y / SCALE) as usize, (x / SCALE) as usize) - lo) / span)
    })
}

/// Sigma heatmap with every sensor cell painted as a marker block.
pub fn fusion(sigma: &FieldGrid, layout: &SensorLayout, noise: &[NoiseSpec]) -> Result<RgbImage> {
    let mut img = heatmap(sigma);
    let mut noisy = vec![false; layout.len()];
    for spec in noise {
        for &i in layout.group(&spec.group)? {
            noisy[i] = true;
        }
    }
    for (i, &(r, c)) in layout.points.iter().enumerate() {
        let color = if noisy[i] { NOISY_MARK } else { CLEAN_MARK };
        for dy in 0..SCALE {
            for dx in 0..SCALE {
                img.put_pixel(c as u32 * SCALE + dx, r as u32 * SCALE + dy, color);
            }
        }
    }
    Ok(img)
}

fn save(img: &RgbImage, path: &Path) -> Result<()> {
    img.save(path)
        .map_err(|e| Error::format(path, format!("cannot write image: {e}")))
}

/// Sigma table: the noisy, clean and background categories, then each
/// named layout group.
pub fn uq_csv(report: &UqReport) -> String {
    let mut out = String::from("category,count,median,max,mean\n");
    let fixed = [
        ("noisy", &report.noisy),
        ("clean", &report.clean),
        ("background", &report.background),
    ];
    let named = report.groups.iter().map(|(k, v)| (k.as_str(), v));
    for (name, s) in fixed.into_iter().chain(named) {
        if s.count > 0 {
            out.push_str(&format!("{name},{},{:.6},{:.6},{:.6}\n", s.count, s.median, s.max, s.mean));
        }
    }
    out
}

/// Writes the summary table and figures; returns every file written.
pub fn render_reports(
    results: &[PredictionResult],
    labels: &[FieldGrid],
    layout: &SensorLayout,
    noise: &[NoiseSpec],
    figures: usize,
    r2_mode: R2Mode,
    out_dir: &Path,
) -> Result<Vec<PathBuf>> {
    let dir = out_dir.join(REPORT_DIR);
    if dir.exists() {
        fs::remove_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    }
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let n = results.len().min(labels.len());
    let preds: Vec<FieldGrid> = results[..n].iter().map(|r| r.mean_field.clone()).collect();
    let table = metrics_csv(&preds, &labels[..n], r2_mode)?;
    let mut written = Vec::new();
    let summary = dir.join(SUMMARY_CSV);
    fs::write(&summary, table).map_err(|e| Error::io(&summary, e))?;
    written.push(summary);
    let uq = dir.join(UQ_CSV);
    let report = uq_report_pooled(&results[..n], layout, noise)?;
    fs::write(&uq, uq_csv(&report)).map_err(|e| Error::io(&uq, e))?;
    written.push(uq);

    for i in 0..n.min(figures) {
        let r = &results[i];
        let err = FieldGrid::from_vec(
            r.mean_field.rows(),
            r.mean_field.cols(),
            r.mean_field
                .as_slice()
                .iter()
                .zip(labels[i].as_slice())
                .map(|(p, l)| (p - l).abs())
                .collect(),
        )?;
        let images = [
            ("truth", heatmap(&labels[i])),
            ("mean", heatmap(&r.mean_field)),
            ("abs_error", heatmap(&err)),
            ("sigma", heatmap(&r.sigma_field)),
            ("fusion", fusion(&r.sigma_field, layout, noise)?),
        ];
        for (name, img) in images {
            let path = dir.join(format!("{i:06}_{name}.png"));
            save(&img, &path)?;
            written.push(path);
        }
    }
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ramp_endpoints_and_markers_distinct() {
        assert_eq!(ramp(0.0), Rgb(RAMP[0]));
        assert_eq!(ramp(1.0), Rgb(RAMP[8]));
        assert_eq!(ramp(f64::NAN), Rgb(RAMP[0]));
        for k in 0..=1000 {
            let c = ramp(k as f64 / 1000.0);
            assert_ne!(c, NOISY_MARK);
            assert_ne!(c, CLEAN_MARK);
        }
    }

    #[test]
    fn heatmap_size() {
        let img = heatmap(&FieldGrid::filled(3, 5, 1.0));
        assert_eq!(img.dimensions(), (5 * SCALE, 3 * SCALE));
    }
}
