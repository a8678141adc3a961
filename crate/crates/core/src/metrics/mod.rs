//! Depth error metrics with range clipping and validity masking.
//!
//! Predictions are clamped into `[min_depth, max_depth]`; only ground-truth
//! pixels that are measured, fall inside the range and lie in the optional
//! crop are scored. Logs are natural, δ thresholds are strict.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::DepthMap;

pub const METRICS_CSV_HEADER: &str = "rel,rmse,rmse_log,sq_rel,d1,d2,d3,n_valid";

/// Pixel rectangle `[x0, x1) × [y0, y1)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Crop {
    pub x0: usize,
    pub y0: usize,
    pub x1: usize,
    pub y1: usize,
}

impl Crop {
    fn contains(&self, x: usize, y: usize) -> bool {
        x >= self.x0 && x < self.x1 && y >= self.y0 && y < self.y1
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRange {
    pub min_depth: f64,
    pub max_depth: f64,
    pub crop: Option<Crop>,
}

impl EvalRange {
    pub fn new(min_depth: f64, max_depth: f64) -> Result<Self> {
        let r = Self {
            min_depth,
            max_depth,
            crop: None,
        };
        r.validate()?;
        Ok(r)
    }

    /// Outdoor driving range, 0.01 to 80 m.
    pub fn kitti() -> Self {
        Self {
            min_depth: 0.01,
            max_depth: 80.0,
            crop: None,
        }
    }

    /// Indoor range, 0.01 to 10 m.
    pub fn nyu() -> Self {
        Self {
            min_depth: 0.01,
            max_depth: 10.0,
            crop: None,
        }
    }

    pub fn with_crop(mut self, crop: Crop) -> Self {
        self.crop = Some(crop);
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.min_depth > 0.0 && self.min_depth < self.max_depth && self.max_depth.is_finite()) {
            return Err(Error::config(format!(
                "evaluation range needs 0 < min < max, got [{}, {}]",
                self.min_depth, self.max_depth
            )));
        }
        if let Some(c) = self.crop {
            if c.x0 >= c.x1 || c.y0 >= c.y1 {
                return Err(Error::config(format!("empty crop {c:?}")));
            }
        }
        Ok(())
    }

    fn clip(&self, v: f64) -> f64 {
        v.clamp(self.min_depth, self.max_depth)
    }

    /// Whether ground truth at `(x, y)` is scored.
    pub fn scores(&self, gt: &DepthMap, x: usize, y: usize) -> bool {
        match gt.get(x, y) {
            Some(g) => {
                let g = g as f64;
                g >= self.min_depth && g <= self.max_depth && self.crop.is_none_or(|c| c.contains(x, y))
            }
            None => false,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub rel: f64,
    pub rmse: f64,
    pub rmse_log: f64,
    pub sq_rel: f64,
    pub delta1: f64,
    pub delta2: f64,
    pub delta3: f64,
    pub n_valid: usize,
}

impl MetricsReport {
    /// Unweighted mean over per-image reports; `n_valid` is summed.
    pub fn mean(reports: &[MetricsReport]) -> Result<Self> {
        if reports.is_empty() {
            return Err(Error::degenerate("no metrics to average"));
        }
        let n = reports.len() as f64;
        let avg = |f: fn(&MetricsReport) -> f64| reports.iter().map(f).sum::<f64>() / n;
        Ok(Self {
            rel: avg(|r| r.rel),
            rmse: avg(|r| r.rmse),
            rmse_log: avg(|r| r.rmse_log),
            sq_rel: avg(|r| r.sq_rel),
            delta1: avg(|r| r.delta1),
            delta2: avg(|r| r.delta2),
            delta3: avg(|r| r.delta3),
            n_valid: reports.iter().map(|r| r.n_valid).sum(),
        })
    }

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{}",
            self.rel, self.rmse, self.rmse_log, self.sq_rel, self.delta1, self.delta2, self.delta3, self.n_valid
        )
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("plain numeric struct")
    }
}

fn check_dims(pred: &DepthMap, gt: &DepthMap) -> Result<()> {
    if (pred.width(), pred.height()) != (gt.width(), gt.height()) {
        return Err(Error::config(format!(
            "prediction is {}x{}, ground truth {}x{}",
            pred.width(),
            pred.height(),
            gt.width(),
            gt.height()
        )));
    }
    Ok(())
}

/// Scores `pred` against `gt`. Prediction validity flags are ignored: every
/// prediction pixel is clamped and used.
pub fn compute_metrics(pred: &DepthMap, gt: &DepthMap, range: &EvalRange) -> Result<MetricsReport> {
    check_dims(pred, gt)?;
    range.validate()?;
    let w = gt.width();
    let (mut abs_rel, mut sq, mut sq_log, mut sq_rel) = (0.0, 0.0, 0.0, 0.0);
    let mut hits = [0usize; 3];
    let mut n = 0usize;
    for (i, (&p, &g)) in pred.values().iter().zip(gt.values()).enumerate() {
        if !range.scores(gt, i % w, i / w) {
            continue;
        }
        let (y, yh) = (g as f64, range.clip(p as f64));
        let d = y - yh;
        abs_rel += d.abs() / y;
        sq += d * d;
        sq_rel += d * d / y;
        let dl = y.ln() - yh.ln();
        sq_log += dl * dl;
        let ratio = (y / yh).max(yh / y);
        let mut threshold = 1.0;
        for h in hits.iter_mut() {
            threshold *= 1.25;
            *h += (ratio < threshold) as usize;
        }
        n += 1;
    }
    if n == 0 {
        return Err(Error::degenerate("no ground-truth pixel inside the evaluation range"));
    }
    let nf = n as f64;
    Ok(MetricsReport {
        rel: abs_rel / nf,
        rmse: (sq / nf).sqrt(),
        rmse_log: (sq_log / nf).sqrt(),
        sq_rel: sq_rel / nf,
        delta1: hits[0] as f64 / nf,
        delta2: hits[1] as f64 / nf,
        delta3: hits[2] as f64 / nf,
        n_valid: n,
    })
}

/// Per-pixel absolute error, zero where ground truth is not scored.
#[derive(Clone, Debug, PartialEq)]
pub struct ErrorMap {
    pub width: usize,
    pub height: usize,
    pub values: Vec<f64>,
    /// Mean over scored pixels (0 when none are scored).
    pub mean: f64,
    /// Mean over every pixel, using the raw stored ground truth (0 where
    /// invalid) and the clamped prediction.
    pub unmasked_mean: f64,
}

pub fn error_map(pred: &DepthMap, gt: &DepthMap, range: &EvalRange) -> Result<ErrorMap> {
    check_dims(pred, gt)?;
    range.validate()?;
    let w = gt.width();
    let mut values = vec![0.0; gt.values().len()];
    let (mut sum, mut n, mut raw) = (0.0, 0usize, 0.0);
    for (i, (&p, &g)) in pred.values().iter().zip(gt.values()).enumerate() {
        let e = (g as f64 - range.clip(p as f64)).abs();
        raw += e;
        if range.scores(gt, i % w, i / w) {
            values[i] = e;
            sum += e;
            n += 1;
        }
    }
    let total = values.len().max(1) as f64;
    Ok(ErrorMap {
        width: w,
        height: gt.height(),
        values,
        mean: if n > 0 { sum / n as f64 } else { 0.0 },
        unmasked_mean: raw / total,
    })
}

/// Purple-to-yellow ramp anchors (sampled from the perceptual "viridis" map).
const RAMP: [[f64; 3]; 5] = [
    [0.267, 0.005, 0.329],
    [0.229, 0.322, 0.546],
    [0.128, 0.567, 0.551],
    [0.369, 0.789, 0.383],
    [0.993, 0.906, 0.144],
];

/// Maps `v / max` into the ramp.
pub fn ramp_color(v: f64, max: f64) -> [u8; 3] {
    let t = if max > 0.0 && v.is_finite() {
        (v / max).clamp(0.0, 1.0)
    } else {
        0.0
    };
    let x = t * (RAMP.len() - 1) as f64;
    let i = (x.floor() as usize).min(RAMP.len() - 2);
    let f = x - i as f64;
    let mut out = [0u8; 3];
    for (c, o) in out.iter_mut().enumerate() {
        let v = RAMP[i][c] * (1.0 - f) + RAMP[i + 1][c] * f;
        *o = (v * 255.0).round() as u8;
    }
    out
}

/// Interleaved 8-bit RGB rendering of a scalar raster, 0 → purple,
/// `max` → yellow.
pub fn false_color(values: &[f64], max: f64) -> Vec<u8> {
    values.iter().flat_map(|&v| ramp_color(v, max)).collect()
}
