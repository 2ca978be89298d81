//! Dense-loop reference implementations and fixtures shared by the tests.
//! They are written directly from the formulas, without the library's mask
//! or iterator plumbing.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tfr_core::{DomainSpec, FieldGrid, HeatSource, Shape};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn spec(rows: usize, cols: usize, width: f64, height: f64) -> DomainSpec {
    DomainSpec {
        width_m: width,
        height_m: height,
        grid_w: cols,
        grid_h: rows,
        sink_center: 0.5,
        sink_width_m: 0.5 * height,
        ref_temp_k: 298.0,
    }
}

pub fn random_field(rng: &mut ChaCha8Rng, rows: usize, cols: usize, lo: f64, hi: f64) -> FieldGrid {
    FieldGrid::from_fn(rows, cols, |_, _| rng.random_range(lo..hi))
}

pub fn random_points(rng: &mut ChaCha8Rng, rows: usize, cols: usize, n: usize) -> Vec<(usize, usize)> {
    let mut pts = Vec::new();
    while pts.len() < n {
        let p = (rng.random_range(0..rows), rng.random_range(0..cols));
        if !pts.contains(&p) {
            pts.push(p);
        }
    }
    pts
}

pub fn rect(u: f64, v: f64, w: f64, h: f64) -> HeatSource {
    HeatSource {
        shape: Shape::Rectangle {
            width_m: w,
            height_m: h,
        },
        center_m: [u, v],
        nominal_power_w: 1.0,
    }
}

pub fn circle(u: f64, v: f64, r: f64) -> HeatSource {
    HeatSource {
        shape: Shape::Circle { radius_m: r },
        center_m: [u, v],
        nominal_power_w: 1.0,
    }
}

pub fn close(a: f64, b: f64, rel: f64) -> bool {
    (a - b).abs() <= rel * a.abs().max(b.abs()).max(1e-300)
}

pub fn pinball_oracle(pred: &FieldGrid, y: &FieldGrid, sensors: &[(usize, usize)], tau: f64) -> f64 {
    let mut total = 0.0;
    for &(r, c) in sensors {
        let e = y.get(r, c) - pred.get(r, c);
        total += f64::max(tau * e, (tau - 1.0) * e);
    }
    total / sensors.len() as f64
}

/// Mean squared 5-point Laplacian over interior cells whose node lies in no
/// source. `step` = (du, dv).
pub fn laplace_oracle(pred: &FieldGrid, spec: &DomainSpec, sources: &[HeatSource], step: (f64, f64)) -> f64 {
    let (h, w) = pred.shape();
    let (du, dv) = step;
    let (mut sum, mut n) = (0.0, 0usize);
    for r in 1..h - 1 {
        for c in 1..w - 1 {
            let (u, v) = (c as f64 * spec.du(), spec.height_m - r as f64 * spec.dv());
            if sources.iter().any(|s| s.contains(u, v)) {
                continue;
            }
            let t = pred.get(r, c);
            let lap = (pred.get(r, c - 1) - 2.0 * t + pred.get(r, c + 1)) / (du * du)
                + (pred.get(r - 1, c) - 2.0 * t + pred.get(r + 1, c)) / (dv * dv);
            sum += lap * lap;
            n += 1;
        }
    }
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

/// Mean squared deviation from T0 over left-edge nodes on the sink segment.
pub fn bc_oracle(pred: &FieldGrid, spec: &DomainSpec) -> f64 {
    let mid = spec.sink_center * spec.height_m;
    let (mut sum, mut n) = (0.0, 0usize);
    for r in 0..spec.grid_h {
        let v = spec.height_m - r as f64 * spec.dv();
        if (v - mid).abs() <= 0.5 * spec.sink_width_m + 1e-9 {
            let d = pred.get(r, 0) - spec.ref_temp_k;
            sum += d * d;
            n += 1;
        }
    }
    sum / n as f64
}

pub fn tv_oracle(pred: &FieldGrid) -> f64 {
    let (h, w) = pred.shape();
    let mut su = 0.0;
    for r in 0..h {
        for c in 0..w - 1 {
            su += (pred.get(r, c + 1) - pred.get(r, c)).powi(2);
        }
    }
    let mut sv = 0.0;
    for r in 0..h - 1 {
        for c in 0..w {
            sv += (pred.get(r + 1, c) - pred.get(r, c)).powi(2);
        }
    }
    su / (h * (w - 1)) as f64 + sv / ((h - 1) * w) as f64
}

/// (rmse, mae, mre, r2) of one sample, R² against the true field's own mean.
pub fn metrics_oracle(pred: &FieldGrid, label: &FieldGrid) -> (f64, f64, f64, f64) {
    let n = label.len() as f64;
    let p = pred.as_slice();
    let l = label.as_slice();
    let mean = l.iter().sum::<f64>() / n;
    let (mut se, mut ae, mut re, mut ss) = (0.0, 0.0, 0.0, 0.0);
    for i in 0..l.len() {
        se += (p[i] - l[i]).powi(2);
        ae += (p[i] - l[i]).abs();
        re += ((p[i] - l[i]) / l[i]).abs();
        ss += (l[i] - mean).powi(2);
    }
    ((se / n).sqrt(), ae / n, re / n, 1.0 - se / ss)
}
