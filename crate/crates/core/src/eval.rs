//! Evaluation metrics, peak isolation and the inference-latency benchmark.

use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::Vec3;

/// Minimum spacing between isolated peaks, in samples (5 s at 30 Hz).
pub const PEAK_SEPARATION: usize = 150;
pub const WARMUP_PASSES: usize = 10;
pub const LATENCY_PASSES: usize = 1000;

fn check_lengths(pred: &[Vec3], gt: &[Vec3]) -> Result<()> {
    if pred.len() != gt.len() {
        return Err(Error::shape(format!(
            "{} predictions for {} ground-truth samples",
            pred.len(),
            gt.len()
        )));
    }
    if pred.is_empty() {
        return Err(Error::shape("empty series"));
    }
    Ok(())
}

/// `sqrt(mean ‖pred − gt‖²)` over samples.
pub fn rmse(pred: &[Vec3], gt: &[Vec3]) -> Result<f64> {
    check_lengths(pred, gt)?;
    let sq: f64 = pred.iter().zip(gt).map(|(p, g)| (p - g).norm_squared()).sum();
    Ok((sq / pred.len() as f64).sqrt())
}

/// Per-axis RMSE.
pub fn rmse_axes(pred: &[Vec3], gt: &[Vec3]) -> Result<[f64; 3]> {
    check_lengths(pred, gt)?;
    let mut acc = [0.0; 3];
    for (p, g) in pred.iter().zip(gt) {
        for (a, k) in acc.iter_mut().zip(0..3) {
            *a += (p[k] - g[k]).powi(2);
        }
    }
    Ok(acc.map(|a| (a / pred.len() as f64).sqrt()))
}

/// Sliding-window RMSE with stride 1; entry `i` covers samples `i..i + window`.
pub fn rmse_over_time(pred: &[Vec3], gt: &[Vec3], window: usize) -> Result<Vec<f64>> {
    check_lengths(pred, gt)?;
    if window == 0 {
        return Err(Error::config("window", "must be >= 1 sample"));
    }
    if window > pred.len() {
        return Ok(Vec::new());
    }
    let sq: Vec<f64> = pred.iter().zip(gt).map(|(p, g)| (p - g).norm_squared()).collect();
    let mut out = Vec::with_capacity(sq.len() - window + 1);
    let mut sum: f64 = sq[..window].iter().sum();
    out.push((sum.max(0.0) / window as f64).sqrt());
    for i in window..sq.len() {
        sum += sq[i] - sq[i - window];
        out.push((sum.max(0.0) / window as f64).sqrt());
    }
    Ok(out)
}

/// RMSE as a percentage of the ground-truth magnitude range.
pub fn relative_error(pred: &[Vec3], gt: &[Vec3]) -> Result<f64> {
    let e = rmse(pred, gt)?;
    let (lo, hi) = gt
        .iter()
        .map(|g| g.norm())
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), n| (lo.min(n), hi.max(n)));
    let range = hi - lo;
    if !(range > 0.0) {
        return Err(Error::data("ground-truth force range is zero"));
    }
    Ok(100.0 * e / range)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Axis {
    #[default]
    X,
    Y,
    Z,
}

impl Axis {
    pub fn index(self) -> usize {
        self as usize
    }
}

/// Prominence of the extremum at `i` on a plateau-free series: the smaller of
/// the two drops (rises for minima) to the nearest opposite extreme before a
/// more extreme sample on each side.
fn prominence(x: &[f64], i: usize, maximum: bool) -> f64 {
    let sign = if maximum { 1.0 } else { -1.0 };
    let v = sign * x[i];
    let side = |range: &mut dyn Iterator<Item = usize>| {
        let mut lowest = v;
        for j in range {
            let y = sign * x[j];
            if y > v {
                break;
            }
            lowest = lowest.min(y);
        }
        v - lowest
    };
    let left = side(&mut (0..i).rev());
    let right = side(&mut (i + 1..x.len()));
    left.min(right)
}

/// Local extrema of a scalar series. Plateaus count once, at their centre.
fn local_extrema(x: &[f64]) -> Vec<(usize, bool)> {
    let mut out = Vec::new();
    let n = x.len();
    let mut i = 1;
    while i + 1 < n {
        if x[i] == x[i - 1] {
            i += 1;
            continue;
        }
        let mut j = i;
        while j + 1 < n && x[j + 1] == x[i] {
            j += 1;
        }
        if j + 1 >= n {
            break;
        }
        let up = x[i] > x[i - 1];
        let down = x[j + 1] < x[j];
        if up == down {
            out.push(((i + j) / 2, up));
        }
        i = j + 1;
    }
    out
}

/// Maxima and minima of one axis, kept greedily by decreasing prominence
/// while at least `min_separation` samples from every accepted peak.
pub fn find_peaks_1d(x: &[f64], min_separation: usize) -> Vec<usize> {
    let mut cands: Vec<(f64, usize)> = local_extrema(x)
        .into_iter()
        .map(|(i, max)| (prominence(x, i, max), i))
        .filter(|(p, _)| *p > 0.0)
        .collect();
    cands.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    let mut kept: Vec<usize> = Vec::new();
    for (_, i) in cands {
        if kept.iter().all(|&k| k.abs_diff(i) >= min_separation) {
            kept.push(i);
        }
    }
    kept.sort_unstable();
    kept
}

pub fn find_peaks(gt: &[Vec3], axis: Axis, min_separation: usize) -> Vec<usize> {
    let x: Vec<f64> = gt.iter().map(|g| g[axis.index()]).collect();
    find_peaks_1d(&x, min_separation)
}

/// RMSE restricted to `peaks`; `None` when there are no peaks.
pub fn peak_rmse(pred: &[Vec3], gt: &[Vec3], peaks: &[usize]) -> Result<Option<f64>> {
    check_lengths(pred, gt)?;
    if peaks.is_empty() {
        return Ok(None);
    }
    if let Some(&bad) = peaks.iter().find(|&&i| i >= gt.len()) {
        return Err(Error::shape(format!("peak index {bad} out of range for {} samples", gt.len())));
    }
    let p: Vec<Vec3> = peaks.iter().map(|&i| pred[i]).collect();
    let g: Vec<Vec3> = peaks.iter().map(|&i| gt[i]).collect();
    rmse(&p, &g).map(Some)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Latency {
    pub mean_seconds: f64,
    pub hz: f64,
    pub passes: usize,
}

/// Mean wall-clock time of `n` calls after [`WARMUP_PASSES`] untimed ones.
pub fn latency_bench<F: FnMut() -> Result<()>>(mut pass: F, n: usize) -> Result<Latency> {
    if n == 0 {
        return Err(Error::config("n", "must be >= 1"));
    }
    for _ in 0..WARMUP_PASSES {
        pass()?;
    }
    let start = Instant::now();
    for _ in 0..n {
        pass()?;
    }
    let mean = start.elapsed().as_secs_f64() / n as f64;
    Ok(Latency {
        mean_seconds: mean,
        hz: 1.0 / mean,
        passes: n,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub rmse: f64,
    pub rmse_axes: [f64; 3],
    /// Percent of the ground-truth magnitude range; absent when the range is zero.
    pub relative_error: Option<f64>,
    pub rmse_window: usize,
    pub rmse_over_time: Vec<f64>,
    pub peak_axis: Axis,
    pub peak_separation: usize,
    pub peaks: Vec<usize>,
    pub peak_rmse: Option<f64>,
    pub latency: Option<Latency>,
}

impl EvalReport {
    pub fn compute(pred: &[Vec3], gt: &[Vec3], axis: Axis, rmse_window: usize) -> Result<Self> {
        let peaks = find_peaks(gt, axis, PEAK_SEPARATION);
        Ok(Self {
            rmse: rmse(pred, gt)?,
            rmse_axes: rmse_axes(pred, gt)?,
            relative_error: relative_error(pred, gt).ok(),
            rmse_window,
            rmse_over_time: rmse_over_time(pred, gt, rmse_window)?,
            peak_axis: axis,
            peak_separation: PEAK_SEPARATION,
            peak_rmse: peak_rmse(pred, gt, &peaks)?,
            peaks,
            latency: None,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}

/// `index, time, gt_x, gt_y, gt_z, pred_x, pred_y, pred_z` rows.
pub fn write_force_series(path: &Path, times: &[f64], pred: &[Vec3], gt: &[Vec3]) -> Result<()> {
    check_lengths(pred, gt)?;
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["index", "time", "gt_x", "gt_y", "gt_z", "pred_x", "pred_y", "pred_z"])?;
    for (i, ((t, p), g)) in times.iter().zip(pred).zip(gt).enumerate() {
        let row = [i as f64, *t, g.x, g.y, g.z, p.x, p.y, p.z];
        let mut rec: Vec<String> = row.iter().map(|v| v.to_string()).collect();
        rec[0] = i.to_string();
        w.write_record(&rec)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// `index, time, rmse` rows, time taken at the window end.
pub fn write_rmse_series(path: &Path, times: &[f64], window: usize, series: &[f64]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["index", "time", "rmse"])?;
    for (i, r) in series.iter().enumerate() {
        let t = times.get(i + window - 1).copied().unwrap_or(f64::NAN);
        w.write_record([i.to_string(), t.to_string(), r.to_string()])?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
