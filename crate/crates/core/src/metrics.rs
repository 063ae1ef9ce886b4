//! Depth accuracy metrics (Abs Rel, Sq Rel, RMSE, RMSE log, delta
//! thresholds) and normal-angle statistics.

use std::fmt::Write as _;

use crate::error::{MvsError, Result};
use crate::geometry::{angle_between, Vec3};
use crate::grid::{DepthMap, Grid};

/// Default depth cap in meters.
pub const DEFAULT_DEPTH_CAP: f64 = 80.0;
/// Predictions are clamped from below to this depth before evaluation.
pub const MIN_EVAL_DEPTH: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DepthMetrics {
    pub abs_rel: f64,
    pub sq_rel: f64,
    pub rmse: f64,
    pub rmse_log: f64,
    pub delta1: f64,
    pub delta2: f64,
    pub delta3: f64,
    pub count: usize,
}

impl DepthMetrics {
    /// One `name value` pair per line.
    pub fn report(&self) -> String {
        let mut s = String::new();
        for (name, v) in [
            ("abs_rel", self.abs_rel),
            ("sq_rel", self.sq_rel),
            ("rmse", self.rmse),
            ("rmse_log", self.rmse_log),
            ("delta1", self.delta1),
            ("delta2", self.delta2),
            ("delta3", self.delta3),
        ] {
            let _ = writeln!(s, "{name} {v}");
        }
        let _ = writeln!(s, "count {}", self.count);
        s
    }
}

/// Metrics over pixels where `gt > 0` (and `mask`, when given). Both maps
/// are clamped to `cap`; predictions are also clamped from below to
/// [`MIN_EVAL_DEPTH`].
pub fn compute_metrics_masked(pred: &DepthMap, gt: &DepthMap, cap: f64, mask: Option<&Grid<bool>>) -> Result<DepthMetrics> {
    if !pred.same_shape(gt) || mask.is_some_and(|m| !m.same_shape(gt)) {
        return Err(MvsError::InvalidInput(format!(
            "prediction is {}x{}, ground truth {}x{}",
            pred.width(),
            pred.height(),
            gt.width(),
            gt.height()
        )));
    }
    if !(cap > MIN_EVAL_DEPTH) {
        return Err(MvsError::InvalidInput(format!("depth cap {cap} too small")));
    }
    let (mut abs_rel, mut sq_rel, mut sq, mut sq_log) = (0.0, 0.0, 0.0, 0.0);
    let mut hits = [0usize; 3];
    let mut n = 0usize;
    for (i, (&p, &g)) in pred.data().iter().zip(gt.data()).enumerate() {
        if !(g > 0.0) || mask.is_some_and(|m| !m.data()[i]) {
            continue;
        }
        let g = g.min(cap);
        let p = if p.is_nan() { MIN_EVAL_DEPTH } else { p.clamp(MIN_EVAL_DEPTH, cap) };
        let diff = p - g;
        abs_rel += diff.abs() / g;
        sq_rel += diff * diff / g;
        sq += diff * diff;
        let dl = p.ln() - g.ln();
        sq_log += dl * dl;
        let ratio = (p / g).max(g / p);
        for (k, hit) in hits.iter_mut().enumerate() {
            if ratio < 1.25f64.powi(k as i32 + 1) {
                *hit += 1;
            }
        }
        n += 1;
    }
    if n == 0 {
        return Err(MvsError::EmptyMetrics);
    }
    let nf = n as f64;
    Ok(DepthMetrics {
        abs_rel: abs_rel / nf,
        sq_rel: sq_rel / nf,
        rmse: (sq / nf).sqrt(),
        rmse_log: (sq_log / nf).sqrt(),
        delta1: hits[0] as f64 / nf,
        delta2: hits[1] as f64 / nf,
        delta3: hits[2] as f64 / nf,
        count: n,
    })
}

pub fn compute_metrics(pred: &DepthMap, gt: &DepthMap, cap: f64) -> Result<DepthMetrics> {
    compute_metrics_masked(pred, gt, cap, None)
}

/// Angles in degrees between predicted and true normals over the masked
/// pixels with a non-zero ground-truth normal.
pub fn normal_angle_errors(pred: &Grid<Vec3>, gt: &Grid<Vec3>, mask: Option<&Grid<bool>>) -> Result<Vec<f64>> {
    if !pred.same_shape(gt) || mask.is_some_and(|m| !m.same_shape(gt)) {
        return Err(MvsError::InvalidInput("normal maps differ in size".into()));
    }
    Ok(pred
        .data()
        .iter()
        .zip(gt.data())
        .enumerate()
        .filter(|(i, (_, g))| g.norm() > 0.0 && mask.is_none_or(|m| m.data()[*i]))
        .map(|(_, (p, g))| angle_between(p, g).to_degrees())
        .collect())
}

/// Median of a non-empty slice (mean of the middle pair for even lengths).
pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.total_cmp(b));
    let n = v.len();
    Some(if n % 2 == 1 { v[n / 2] } else { 0.5 * (v[n / 2 - 1] + v[n / 2]) })
}
