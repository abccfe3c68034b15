//! Depth accuracy and temporal consistency metrics.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{GeometryError, Intrinsics, Pose, ScalarMap};
use crate::propagation::warp_depth;

#[derive(Debug, Error, PartialEq)]
pub enum EvalError {
    #[error("no valid pixels in range [{min}, {max})")]
    NoValidPixels { min: f64, max: f64 },
    #[error("temporal alignment error needs at least 3 frames, got {0}")]
    InsufficientFrames(usize),
    #[error("expected {expected} relative poses, got {actual}")]
    PoseCount { expected: usize, actual: usize },
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

/// Half-open ground-truth depth window `[min, max)` in meters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DepthRange {
    pub min: f64,
    pub max: f64,
}

impl DepthRange {
    pub const ALL: DepthRange = DepthRange { min: 0.0, max: f64::INFINITY };
    pub const NEAR: DepthRange = DepthRange { min: 0.0, max: 20.0 };
    pub const FAR: DepthRange = DepthRange { min: 20.0, max: 80.0 };

    #[inline]
    pub fn contains(&self, z: f64) -> bool {
        z >= self.min && z < self.max
    }
}

impl Default for DepthRange {
    fn default() -> Self {
        Self::ALL
    }
}

/// `(pred, gt)` pairs where both are valid, gt is positive and inside the window.
fn pairs(pred: &ScalarMap, gt: &ScalarMap, range: DepthRange) -> Result<Vec<(f64, f64)>, EvalError> {
    let (w, h) = gt.dims();
    pred.check_dims(w, h)?;
    let v: Vec<(f64, f64)> = gt
        .iter_valid()
        .filter_map(|(i, &g)| {
            let g = g as f64;
            let &p = pred.get(i)?;
            (g > 0.0 && range.contains(g)).then_some((p as f64, g))
        })
        .collect();
    if v.is_empty() {
        return Err(EvalError::NoValidPixels { min: range.min, max: range.max });
    }
    Ok(v)
}

/// Mean of the lowest `ceil(0.9 n)` relative errors.
pub fn abs_rel(pred: &ScalarMap, gt: &ScalarMap, range: DepthRange) -> Result<f64, EvalError> {
    let mut err: Vec<f64> = pairs(pred, gt, range)?.iter().map(|&(p, g)| (p - g).abs() / g).collect();
    Ok(trimmed_mean(&mut err))
}

fn trimmed_mean(err: &mut [f64]) -> f64 {
    let keep = (err.len() * 9).div_ceil(10);
    err.sort_unstable_by(f64::total_cmp);
    err[..keep].iter().sum::<f64>() / keep as f64
}

/// Fraction of pixels with `max(p/g, g/p) < threshold`.
pub fn delta_accuracy(pred: &ScalarMap, gt: &ScalarMap, threshold: f64, range: DepthRange) -> Result<f64, EvalError> {
    let v = pairs(pred, gt, range)?;
    Ok(delta_fraction(&v, threshold))
}

fn delta_fraction(v: &[(f64, f64)], threshold: f64) -> f64 {
    let hits = v.iter().filter(|&&(p, g)| (p / g).max(g / p) < threshold).count();
    hits as f64 / v.len() as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DepthMetrics {
    pub abs_rel: f64,
    pub delta1: f64,
    pub delta2: f64,
    pub delta3: f64,
    pub count: usize,
    pub range: DepthRange,
}

pub fn depth_metrics(pred: &ScalarMap, gt: &ScalarMap, range: DepthRange) -> Result<DepthMetrics, EvalError> {
    let v = pairs(pred, gt, range)?;
    let mut err: Vec<f64> = v.iter().map(|&(p, g)| (p - g).abs() / g).collect();
    Ok(DepthMetrics {
        abs_rel: trimmed_mean(&mut err),
        delta1: delta_fraction(&v, 1.25),
        delta2: delta_fraction(&v, 1.25f64.powi(2)),
        delta3: delta_fraction(&v, 1.25f64.powi(3)),
        count: v.len(),
        range,
    })
}

/// Metrics over the near (0-20 m) and far (20-80 m) windows.
pub fn near_far_split(
    pred: &ScalarMap,
    gt: &ScalarMap,
) -> (Result<DepthMetrics, EvalError>, Result<DepthMetrics, EvalError>) {
    (depth_metrics(pred, gt, DepthRange::NEAR), depth_metrics(pred, gt, DepthRange::FAR))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TaeResult {
    /// Scaled by 100.
    pub tae: f64,
    pub pairs: usize,
}

/// Untrimmed mean relative error of `warped` against `target` over pixels
/// valid in both. Zero when nothing overlaps.
fn overlap_abs_rel(warped: &ScalarMap, target: &ScalarMap) -> f64 {
    let (mut sum, mut n) = (0.0, 0usize);
    for (i, &t) in target.iter_valid() {
        if let Some(&p) = warped.get(i) {
            if t > 0.0 {
                sum += (p as f64 - t as f64).abs() / t as f64;
                n += 1;
            }
        }
    }
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

/// Bidirectional warp error of one adjacent pair; `pose` maps frame k to k+1.
pub fn tae_pair(d_k: &ScalarMap, d_next: &ScalarMap, pose: &Pose, k: &Intrinsics) -> f64 {
    let fwd = warp_depth(d_k, pose, k).depth;
    let bwd = warp_depth(d_next, &pose.inverse(), k).depth;
    overlap_abs_rel(&fwd, d_next) + overlap_abs_rel(&bwd, d_k)
}

/// Temporal alignment error over `T` frames; `poses[k]` maps frame k to k+1.
/// Sums the `T-1` adjacent pairs in both directions and divides by `2(T-1)`.
pub fn tae(depths: &[ScalarMap], poses: &[Pose], k: &Intrinsics) -> Result<TaeResult, EvalError> {
    let t = depths.len();
    if t < 3 {
        return Err(EvalError::InsufficientFrames(t));
    }
    if poses.len() != t - 1 {
        return Err(EvalError::PoseCount { expected: t - 1, actual: poses.len() });
    }
    let (w, h) = depths[0].dims();
    for d in depths {
        d.check_dims(w, h)?;
    }
    let per_pair: Vec<f64> = (0..t - 1)
        .into_par_iter()
        .map(|i| tae_pair(&depths[i], &depths[i + 1], &poses[i], k))
        .collect();
    let total: f64 = per_pair.iter().sum();
    Ok(TaeResult { tae: 100.0 * total / (2.0 * (t - 1) as f64), pairs: t - 1 })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use nalgebra::{Rotation3, Vector3};

    fn map(w: usize, h: usize, f: impl Fn(usize) -> f32) -> ScalarMap {
        let mut m = ScalarMap::invalid(w, h, 0.0);
        for i in 0..w * h {
            m.set(i, f(i));
        }
        m
    }

    #[test]
    fn abs_rel_examples() {
        let gt = map(8, 8, |i| 1.0 + i as f32);
        assert_eq!(abs_rel(&gt, &gt, DepthRange::ALL).unwrap(), 0.0);
        let pred = map(8, 8, |i| 1.1 * (1.0 + i as f32));
        assert_relative_eq!(abs_rel(&pred, &gt, DepthRange::ALL).unwrap(), 0.1, epsilon = 1e-6);
        assert!(matches!(abs_rel(&gt, &ScalarMap::invalid(8, 8, 0.0), DepthRange::ALL), Err(EvalError::NoValidPixels { .. })));
    }

    #[test]
    fn trimming_drops_the_worst_tenth() {
        // 10 pixels: nine exact, one off by 100%: ceil(9) = 9 kept.
        let gt = map(10, 1, |_| 2.0);
        let pred = map(10, 1, |i| if i == 3 { 4.0 } else { 2.0 });
        assert_eq!(abs_rel(&pred, &gt, DepthRange::ALL).unwrap(), 0.0);
        // 11 pixels keep ceil(9.9) = 10.
        let gt = map(11, 1, |_| 2.0);
        let pred = map(11, 1, |i| if i == 3 { 4.0 } else { 2.0 });
        assert_eq!(abs_rel(&pred, &gt, DepthRange::ALL).unwrap(), 0.0);
        let pred = map(11, 1, |i| if i < 2 { 4.0 } else { 2.0 });
        assert_relative_eq!(abs_rel(&pred, &gt, DepthRange::ALL).unwrap(), 0.1);
    }

    #[test]
    fn delta_boundaries() {
        let gt = map(4, 4, |i| 1.0 + i as f32 * 0.5);
        assert_eq!(delta_accuracy(&gt, &gt, 1.25, DepthRange::ALL).unwrap(), 1.0);
        let pred = map(4, 4, |i| 1.3 * (1.0 + i as f32 * 0.5));
        assert_eq!(delta_accuracy(&pred, &gt, 1.25, DepthRange::ALL).unwrap(), 0.0);
        // Exact 1.25 ratios in binary: 4 * 1.25 = 5.
        let gt = map(4, 1, |_| 4.0);
        let pred = map(4, 1, |_| 5.0);
        assert_eq!(delta_accuracy(&pred, &gt, 1.25, DepthRange::ALL).unwrap(), 0.0);
        assert_eq!(delta_accuracy(&gt, &pred, 1.25, DepthRange::ALL).unwrap(), 0.0);
        let m = depth_metrics(&pred, &gt, DepthRange::ALL).unwrap();
        assert!(m.delta1 <= m.delta2 && m.delta2 <= m.delta3);
        assert_eq!(m.delta2, 1.0);
    }

    #[test]
    fn windows_partition_the_valid_pixels() {
        let gt = map(10, 10, |i| 1.0 + i as f32 * 0.9);
        let (near, far) = near_far_split(&gt, &gt);
        let (near, far) = (near.unwrap(), far.unwrap());
        assert_eq!(near.abs_rel, 0.0);
        assert_eq!(far.abs_rel, 0.0);
        let beyond = gt.iter_valid().filter(|(_, &g)| g >= 80.0).count();
        assert_eq!(near.count + far.count + beyond, 100);
        let ten = map(4, 4, |_| 10.0);
        assert!(matches!(near_far_split(&ten, &ten).1, Err(EvalError::NoValidPixels { .. })));
    }

    fn camera() -> Intrinsics {
        Intrinsics::new(60.0, 60.0, 31.5, 23.5, 64, 48).unwrap()
    }

    #[test]
    fn tae_static_and_biased() {
        let k = camera();
        let d = map(64, 48, |i| 5.0 + (i % 64) as f32 * 0.01);
        let seq = vec![d.clone(), d.clone(), d.clone(), d.clone()];
        let id = vec![Pose::identity(); 3];
        assert_eq!(tae(&seq, &id, &k).unwrap().tae, 0.0);
        assert!(matches!(tae(&seq[..2], &id[..1], &k), Err(EvalError::InsufficientFrames(2))));

        // Fronto-parallel wall approached along the optical axis; biased
        // depth with a consistently biased translation stays consistent.
        let c = 1.5f32;
        let walls = [20.0f32, 19.0, 18.0];
        let biased: Vec<ScalarMap> = walls.iter().map(|&z| map(64, 48, |_| c * z)).collect();
        let step = Pose::new(Rotation3::identity(), Vector3::new(0.0, 0.0, -(c as f64)));
        let r = tae(&biased, &[step, step], &k).unwrap();
        assert_eq!(r.tae, 0.0);
        assert_eq!(r.pairs, 2);
    }

    #[test]
    fn tae_localizes_a_scaled_frame() {
        let k = camera();
        let d = map(64, 48, |_| 10.0);
        let mut seq = vec![d.clone(); 5];
        seq[2] = map(64, 48, |_| 11.0);
        let poses = vec![Pose::identity(); 4];
        let pair: Vec<f64> = (0..4).map(|i| tae_pair(&seq[i], &seq[i + 1], &poses[i], &k)).collect();
        assert_eq!(pair[0], 0.0);
        assert_eq!(pair[3], 0.0);
        // 11 vs 10 one way, 10 vs 11 the other.
        let expected = 0.1 + 1.0 / 11.0;
        assert_relative_eq!(pair[1], expected, epsilon = 1e-6);
        assert_relative_eq!(pair[2], expected, epsilon = 1e-6);
        let r = tae(&seq, &poses, &k).unwrap();
        assert_relative_eq!(r.tae, 100.0 * 2.0 * expected / 8.0, epsilon = 1e-6);
    }
}
