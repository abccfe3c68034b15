//! Egomotion from optical flow and relative depth.
//!
//! The camera motion is parameterized by a rotation and by the translation
//! expressed in relative-depth units, `V = T / alpha`, where `alpha` is the
//! scale that makes the relative depth metric. Hypotheses come from the
//! linear motion-field system solved on small stratified samples; the
//! winner is refined with Huber-weighted Gauss-Newton on the exact rigid
//! reprojection, whose first-order expansion is the same system. The
//! odometry baseline `b = |T|` then fixes `alpha = b / |V|`.

use nalgebra::{DMatrix, DVector, Matrix2x3, Matrix3, Rotation3, Unit, Vector2, Vector3};
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{
    motion_field_matrices, skew, FlowField, GeometryError, Intrinsics, Pose, RelativeDepthMap,
    DEPTH_FLOOR,
};
use crate::stats;

#[derive(Debug, Error, PartialEq)]
pub enum MotionError {
    #[error("only {found} usable flow samples, need at least {required}")]
    InsufficientSamples { found: usize, required: usize },
    #[error("motion system is rank deficient (singular value ratio {ratio:e})")]
    RankDeficient { ratio: f64 },
    #[error("baseline {0} m is below the zero-baseline floor")]
    ZeroBaseline(f64),
    #[error("translation norm {0:e} is below the degeneracy floor (rotation-only motion)")]
    DegenerateTranslation(f64),
    #[error("no consensus: best inlier ratio {inlier_ratio:.3}")]
    NoConsensus { inlier_ratio: f64 },
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

/// Baselines shorter than this (meters) carry no usable scale.
pub const MIN_BASELINE: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RansacConfig {
    pub max_iterations: usize,
    pub min_sample_size: usize,
    /// Lower bound on the residual normalizer, pixels.
    pub tau_px: f64,
    /// Flows shorter than this are never sampled, pixels.
    pub static_flow_px: f64,
    /// MAD multiplier for the initial residual threshold.
    pub mad_multiplier: f64,
    pub target_inlier_ratio: f64,
    pub relax_factor: f64,
    pub tighten_factor: f64,
    /// Absolute floor on the residual threshold.
    pub eta_floor: f64,
    /// MAD multiplier of the angular-deviation gate.
    pub angular_gate_mad: f64,
    /// Absolute floor on the angular gate, radians.
    pub angular_gate_floor: f64,
    pub cells_per_axis: usize,
    pub depth_bins: usize,
    pub per_cell_cap: usize,
    pub huber_iterations: usize,
    /// Gauss-Newton polish steps applied to each minimal-sample hypothesis.
    pub polish_steps: usize,
    pub early_exit_ratio: f64,
    /// Hypotheses below this inlier ratio are reported as no consensus.
    pub min_inlier_ratio: f64,
    /// `|V|` below this is treated as rotation-only motion.
    pub degenerate_translation: f64,
    /// Smallest accepted ratio of extreme singular values.
    pub rank_tolerance: f64,
    /// Hypotheses evaluated between consensus checks.
    pub batch_size: usize,
}

impl Default for RansacConfig {
    fn default() -> Self {
        Self {
            max_iterations: 256,
            min_sample_size: 8,
            tau_px: 1.0,
            static_flow_px: 0.5,
            mad_multiplier: 3.0,
            target_inlier_ratio: 0.6,
            relax_factor: 1.25,
            tighten_factor: 0.9,
            eta_floor: 0.02,
            angular_gate_mad: 3.0,
            angular_gate_floor: 0.05,
            cells_per_axis: 8,
            depth_bins: 3,
            per_cell_cap: 12,
            huber_iterations: 5,
            polish_steps: 2,
            early_exit_ratio: 0.8,
            min_inlier_ratio: 0.25,
            degenerate_translation: 1e-6,
            rank_tolerance: 1e-9,
            batch_size: 32,
        }
    }
}

/// One flow correspondence selected for motion estimation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MotionSample {
    pub pixel: usize,
    pub x: f64,
    pub y: f64,
    /// Observed flow, normalized units.
    pub flow: Vector2<f64>,
    /// Observed flow, pixels.
    pub flow_px: Vector2<f64>,
    pub depth: f64,
    pub cell: usize,
    pub depth_bin: usize,
}

/// Draws a spatially and depth-balanced set of correspondences.
///
/// Every (cell, depth bin) group contributes at most `per_cell_cap`
/// samples chosen uniformly at random from its candidates.
pub fn stratified_sample(
    flow: &FlowField,
    depth: &RelativeDepthMap,
    k: &Intrinsics,
    cfg: &RansacConfig,
    seed: u64,
) -> Result<Vec<MotionSample>, MotionError> {
    let (w, h) = flow.dims();
    depth.check_dims(w, h)?;
    let cells = cfg.cells_per_axis.max(1);
    let bins = cfg.depth_bins.max(1);
    let floor2 = (cfg.static_flow_px * cfg.static_flow_px) as f32;
    let (wmax, hmax) = ((w - 1) as f32, (h - 1) as f32);

    let mut candidates = Vec::new();
    let (mut lo, mut hi) = (f32::INFINITY, 0.0f32);
    for (i, f) in flow.iter_valid() {
        let Some(&d) = depth.get(i) else { continue };
        if !(f[0].is_finite() && f[1].is_finite()) || f[0] * f[0] + f[1] * f[1] < floor2 {
            continue;
        }
        let (u, v) = ((i % w) as f32, (i / w) as f32);
        let (up, vp) = (u + f[0], v + f[1]);
        if !(0.0..=wmax).contains(&up) || !(0.0..=hmax).contains(&vp) {
            continue;
        }
        lo = lo.min(d);
        hi = hi.max(d);
        candidates.push(i as u32);
    }

    let required = 2 * cfg.min_sample_size;
    if candidates.len() < required {
        return Err(MotionError::InsufficientSamples {
            found: candidates.len(),
            required,
        });
    }

    let (llo, lhi) = ((lo as f64).ln(), (hi as f64).ln());
    let span = (lhi - llo).max(1e-12);
    let bin_of = |d: f32| -> usize { (((d as f64).ln() - llo) / span * bins as f64).floor().clamp(0.0, (bins - 1) as f64) as usize };
    let cell_of = |i: usize| -> usize {
        let cu = (i % w) * cells / w;
        let cv = (i / w) * cells / h;
        cv * cells + cu
    };

    let mut groups: Vec<Vec<u32>> = vec![Vec::new(); cells * cells * bins];
    for &i in &candidates {
        let i = i as usize;
        let d = depth.raw_values()[i];
        groups[cell_of(i) * bins + bin_of(d)].push(i as u32);
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for (g, members) in groups.iter().enumerate() {
        let chosen: Vec<u32> = if members.len() <= cfg.per_cell_cap {
            members.clone()
        } else {
            let mut idx = sample(&mut rng, members.len(), cfg.per_cell_cap).into_vec();
            idx.sort_unstable();
            idx.into_iter().map(|j| members[j]).collect()
        };
        for i in chosen {
            let i = i as usize;
            let f = flow.raw_values()[i];
            let (u, v) = ((i % w) as f64, (i / w) as f64);
            let (x, y) = k.normalize(u, v);
            out.push(MotionSample {
                pixel: i,
                x,
                y,
                flow: Vector2::new(f[0] as f64 / k.fx, f[1] as f64 / k.fy),
                flow_px: Vector2::new(f[0] as f64, f[1] as f64),
                depth: depth.raw_values()[i] as f64,
                cell: g / bins,
                depth_bin: g % bins,
            });
        }
    }
    Ok(out)
}

/// Stacked motion-field rows `[B_n | A_n / d_n]` against `[omega; V]`,
/// with the observed normalized flow as right-hand side.
pub fn build_linear_system(samples: &[MotionSample]) -> (DMatrix<f64>, DVector<f64>) {
    let n = samples.len();
    let mut a = DMatrix::zeros(2 * n, 6);
    let mut b = DVector::zeros(2 * n);
    for (j, s) in samples.iter().enumerate() {
        let (am, bm) = motion_field_matrices(s.x, s.y);
        let inv_d = 1.0 / s.depth;
        for r in 0..2 {
            for c in 0..3 {
                a[(2 * j + r, c)] = bm[(r, c)];
                a[(2 * j + r, 3 + c)] = am[(r, c)] * inv_d;
            }
        }
        b[2 * j] = s.flow.x;
        b[2 * j + 1] = s.flow.y;
    }
    (a, b)
}

/// Least-squares solution of the motion system.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MotionSolution {
    pub omega: Vector3<f64>,
    pub v: Vector3<f64>,
    pub residual_norm: f64,
}

fn least_squares(a: &DMatrix<f64>, b: &DVector<f64>, rank_tol: f64) -> Result<(DVector<f64>, f64), MotionError> {
    if a.nrows() < a.ncols() {
        return Err(MotionError::RankDeficient { ratio: 0.0 });
    }
    let svd = a.clone().svd(true, true);
    let smax = svd.singular_values.max();
    let smin = svd.singular_values.min();
    let ratio = if smax > 0.0 { smin / smax } else { 0.0 };
    if !(ratio >= rank_tol) {
        return Err(MotionError::RankDeficient { ratio });
    }
    let x = svd
        .solve(b, 0.0)
        .map_err(|_| MotionError::RankDeficient { ratio })?;
    let residual = (a * &x - b).norm();
    Ok((x, residual))
}

/// Solves the stacked system with an SVD; rank-deficient systems
/// (collinear samples, pure rotation about a degenerate set) are rejected.
pub fn solve_motion(system: &(DMatrix<f64>, DVector<f64>), rank_tol: f64) -> Result<MotionSolution, MotionError> {
    let (x, residual_norm) = least_squares(&system.0, &system.1, rank_tol)?;
    Ok(MotionSolution {
        omega: Vector3::new(x[0], x[1], x[2]),
        v: Vector3::new(x[3], x[4], x[5]),
        residual_norm,
    })
}

/// Metric pose recovered from a solved translation and the odometry baseline.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScaleRecovery {
    pub t_hat: Unit<Vector3<f64>>,
    /// Multiplier taking relative depth to meters.
    pub alpha: f64,
    pub translation: Vector3<f64>,
}

/// `T_hat = V / |V|`, `alpha = b / |V|`, `T = b * T_hat`.
///
/// The solved `V` is the translation in relative-depth units, `T / alpha`.
pub fn recover_scale(v: &Vector3<f64>, baseline: f64, degenerate_floor: f64) -> Result<ScaleRecovery, MotionError> {
    if !(baseline >= MIN_BASELINE) {
        return Err(MotionError::ZeroBaseline(baseline));
    }
    let norm = v.norm();
    if !(norm >= degenerate_floor) {
        return Err(MotionError::DegenerateTranslation(norm));
    }
    let t_hat = Unit::new_normalize(*v);
    Ok(ScaleRecovery {
        t_hat,
        alpha: baseline / norm,
        translation: t_hat.into_inner() * baseline,
    })
}

/// A motion hypothesis scored against a sample set.
#[derive(Debug, Clone, PartialEq)]
pub struct MotionHypothesis {
    pub rotation: Rotation3<f64>,
    /// Translation in relative-depth units (`T / alpha`).
    pub v: Vector3<f64>,
    pub inliers: Vec<bool>,
    pub inlier_count: usize,
    pub covered_cells: usize,
    pub score: f64,
    /// Residual threshold the inlier set was computed with.
    pub eta: f64,
    /// Angular-deviation gate the inlier set was computed with, radians.
    pub angular_threshold: f64,
}

impl MotionHypothesis {
    pub fn new(rotation: Rotation3<f64>, v: Vector3<f64>) -> Self {
        Self {
            rotation,
            v,
            inliers: Vec::new(),
            inlier_count: 0,
            covered_cells: 0,
            score: 0.0,
            eta: f64::INFINITY,
            angular_threshold: std::f64::consts::PI,
        }
    }

    pub fn omega(&self) -> Vector3<f64> {
        self.rotation.scaled_axis()
    }

    pub fn t_hat(&self) -> Option<Unit<Vector3<f64>>> {
        Unit::try_new(self.v, 0.0)
    }

    pub fn inlier_ratio(&self) -> f64 {
        if self.inliers.is_empty() {
            0.0
        } else {
            self.inlier_count as f64 / self.inliers.len() as f64
        }
    }

    /// Predicted backward flow in normalized units.
    #[inline]
    pub fn predict(&self, x: f64, y: f64, depth: f64) -> Option<Vector2<f64>> {
        crate::geometry::rigid_flow(x, y, depth, &self.rotation, &self.v)
    }

    /// Predicted backward flow in pixels.
    #[inline]
    pub fn predict_px(&self, x: f64, y: f64, depth: f64, k: &Intrinsics) -> Option<Vector2<f64>> {
        self.predict(x, y, depth).map(|p| Vector2::new(p.x * k.fx, p.y * k.fy))
    }

    /// Metric pose given a scale recovery.
    pub fn pose(&self, scale: &ScaleRecovery) -> Pose {
        Pose::new(self.rotation, scale.translation)
    }
}

/// `e = |f - p| / max(|f|, tau)`, all in pixels.
#[inline]
pub fn residual_from_px(observed: &Vector2<f64>, predicted: &Vector2<f64>, tau: f64) -> f64 {
    (observed - predicted).norm() / observed.norm().max(tau)
}

pub fn normalized_residual(s: &MotionSample, h: &MotionHypothesis, k: &Intrinsics, tau: f64) -> f64 {
    match h.predict_px(s.x, s.y, s.depth, k) {
        Some(p) => residual_from_px(&s.flow_px, &p, tau),
        None => f64::INFINITY,
    }
}

/// Angle between observed and predicted flow, or `None` when either is too
/// short for a meaningful direction (`|f| < 2 tau`).
#[inline]
pub fn angular_deviation(observed: &Vector2<f64>, predicted: &Vector2<f64>, tau: f64) -> Option<f64> {
    let (nf, np) = (observed.norm(), predicted.norm());
    if nf < 2.0 * tau || np <= 1e-12 {
        return None;
    }
    Some((observed.dot(predicted) / (nf * np)).clamp(-1.0, 1.0).acos())
}

/// Robust gate `median + k * MAD` over a frame's angular deviations.
pub fn angular_threshold(deviations: &[f64], cfg: &RansacConfig) -> f64 {
    match stats::robust_threshold(deviations, cfg.angular_gate_mad) {
        Some(t) => t.max(cfg.angular_gate_floor),
        None => std::f64::consts::PI,
    }
}

/// True when the sample's flow direction agrees with the hypothesis, or when
/// the flow is too short for the direction test.
pub fn directional_gate(s: &MotionSample, h: &MotionHypothesis, k: &Intrinsics, threshold: f64, tau: f64) -> bool {
    match h.predict_px(s.x, s.y, s.depth, k) {
        Some(p) => angular_deviation(&s.flow_px, &p, tau).is_none_or(|a| a <= threshold),
        None => false,
    }
}

struct Evaluation {
    residuals: Vec<f64>,
    angles: Vec<Option<f64>>,
}

fn evaluate(samples: &[MotionSample], rotation: &Rotation3<f64>, v: &Vector3<f64>, k: &Intrinsics, tau: f64) -> Evaluation {
    let mut residuals = Vec::with_capacity(samples.len());
    let mut angles = Vec::with_capacity(samples.len());
    for s in samples {
        match crate::geometry::rigid_flow(s.x, s.y, s.depth, rotation, v) {
            Some(p) => {
                let p = Vector2::new(p.x * k.fx, p.y * k.fy);
                residuals.push(residual_from_px(&s.flow_px, &p, tau));
                angles.push(angular_deviation(&s.flow_px, &p, tau));
            }
            None => {
                residuals.push(f64::INFINITY);
                angles.push(Some(std::f64::consts::PI));
            }
        }
    }
    Evaluation { residuals, angles }
}

/// Classifies samples against thresholds and fills the hypothesis' consensus fields.
fn classify(h: &mut MotionHypothesis, samples: &[MotionSample], eval: &Evaluation, eta: f64, cfg: &RansacConfig) {
    let devs: Vec<f64> = eval.angles.iter().flatten().copied().collect();
    let thr = angular_threshold(&devs, cfg);
    let total_cells = cfg.cells_per_axis.max(1).pow(2);
    let mut covered = vec![false; total_cells];
    let mut count = 0;
    let inliers: Vec<bool> = samples
        .iter()
        .zip(eval.residuals.iter().zip(&eval.angles))
        .map(|(s, (&e, a))| {
            let ok = e <= eta && a.is_none_or(|a| a <= thr);
            if ok {
                count += 1;
                covered[s.cell] = true;
            }
            ok
        })
        .collect();
    let covered_cells = covered.iter().filter(|&&c| c).count();
    h.inliers = inliers;
    h.inlier_count = count;
    h.covered_cells = covered_cells;
    h.score = count as f64 * covered_cells as f64 / total_cells as f64;
    h.eta = eta;
    h.angular_threshold = thr;
}

/// Jacobian of the normalized rigid prediction with respect to
/// `[dw; dV]`, where the rotation is updated as `R exp([dw]x)`.
fn rigid_jacobian(s: &MotionSample, rotation: &Rotation3<f64>, v: &Vector3<f64>) -> Option<(Vector2<f64>, Matrix2x3<f64>, Matrix2x3<f64>)> {
    let p = Vector3::new(s.x * s.depth, s.y * s.depth, s.depth);
    let rt: Matrix3<f64> = rotation.matrix().transpose();
    let q = rt * (p - v);
    if q.z <= DEPTH_FLOOR {
        return None;
    }
    let iz = 1.0 / q.z;
    let jp = Matrix2x3::new(iz, 0.0, -q.x * iz * iz, 0.0, iz, -q.y * iz * iz);
    let pred = Vector2::new(q.x * iz - s.x, q.y * iz - s.y);
    Some((pred, jp * skew(&q), -(jp * rt)))
}

fn huber(e: f64, eta: f64) -> f64 {
    if e <= eta {
        0.5 * e * e
    } else {
        eta * (e - 0.5 * eta)
    }
}

fn huber_cost(samples: &[MotionSample], idx: &[usize], rotation: &Rotation3<f64>, v: &Vector3<f64>, k: &Intrinsics, tau: f64, eta: f64) -> f64 {
    idx.iter()
        .map(|&i| {
            let s = &samples[i];
            // m^2 H(r / m): the objective whose IRLS weight is exactly w(e).
            let m = s.flow_px.norm().max(tau);
            match crate::geometry::rigid_flow(s.x, s.y, s.depth, rotation, v) {
                Some(p) => m * m * huber(residual_from_px(&s.flow_px, &Vector2::new(p.x * k.fx, p.y * k.fy), tau), eta),
                None => f64::INFINITY,
            }
        })
        .sum()
}

/// One weighted Gauss-Newton step on pixel residuals, each row weighted by
/// the Huber weight of its normalized residual. `eta = None` means unit weights.
fn gauss_newton_step(
    samples: &[MotionSample],
    idx: &[usize],
    rotation: &Rotation3<f64>,
    v: &Vector3<f64>,
    k: &Intrinsics,
    tau: f64,
    eta: Option<f64>,
    rank_tol: f64,
) -> Result<(Vector3<f64>, Vector3<f64>), MotionError> {
    let mut a = DMatrix::zeros(2 * idx.len(), 6);
    let mut b = DVector::zeros(2 * idx.len());
    for (row, &i) in idx.iter().enumerate() {
        let s = &samples[i];
        let Some((pred, jw, jv)) = rigid_jacobian(s, rotation, v) else {
            continue;
        };
        let scale = [k.fx, k.fy];
        let r = Vector2::new((s.flow.x - pred.x) * scale[0], (s.flow.y - pred.y) * scale[1]);
        let w = match eta {
            Some(eta) => {
                let e = r.norm() / s.flow_px.norm().max(tau);
                if e <= eta {
                    1.0
                } else {
                    eta / e
                }
            }
            None => 1.0,
        };
        let sw = w.sqrt();
        for c in 0..2 {
            let f = scale[c] * sw;
            for j in 0..3 {
                a[(2 * row + c, j)] = jw[(c, j)] * f;
                a[(2 * row + c, 3 + j)] = jv[(c, j)] * f;
            }
            b[2 * row + c] = r[c] * sw;
        }
    }
    let (x, _) = least_squares(&a, &b, rank_tol)?;
    Ok((Vector3::new(x[0], x[1], x[2]), Vector3::new(x[3], x[4], x[5])))
}

fn apply_step(rotation: &Rotation3<f64>, v: &Vector3<f64>, dw: &Vector3<f64>, dv: &Vector3<f64>, step: f64) -> (Rotation3<f64>, Vector3<f64>) {
    (rotation * Rotation3::new(dw * step), v + dv * step)
}

fn hypothesis_from_sample(
    samples: &[MotionSample],
    idx: &[usize],
    k: &Intrinsics,
    cfg: &RansacConfig,
) -> Option<(Rotation3<f64>, Vector3<f64>)> {
    let subset: Vec<MotionSample> = idx.iter().map(|&i| samples[i]).collect();
    let sol = solve_motion(&build_linear_system(&subset), cfg.rank_tolerance).ok()?;
    let (mut rotation, mut v) = (Rotation3::new(sol.omega), sol.v);
    for _ in 0..cfg.polish_steps {
        let Ok((dw, dv)) = gauss_newton_step(samples, idx, &rotation, &v, k, cfg.tau_px, None, cfg.rank_tolerance) else {
            break;
        };
        (rotation, v) = apply_step(&rotation, &v, &dw, &dv, 1.0);
    }
    (rotation.matrix().iter().all(|x| x.is_finite()) && v.iter().all(|x| x.is_finite())).then_some((rotation, v))
}

/// Adaptive, coverage-aware RANSAC followed by IRLS refinement.
///
/// Hypothesis `i` draws from its own ChaCha stream `i + 1` of `seed`, so the
/// result does not depend on how batches are scheduled across threads.
pub fn ransac_motion(
    samples: &[MotionSample],
    k: &Intrinsics,
    cfg: &RansacConfig,
    seed: u64,
) -> Result<MotionHypothesis, MotionError> {
    let n = samples.len();
    let m = cfg.min_sample_size.max(3);
    if n < m {
        return Err(MotionError::InsufficientSamples { found: n, required: m });
    }

    let all = solve_motion(&build_linear_system(samples), cfg.rank_tolerance)?;
    let initial = evaluate(samples, &Rotation3::new(all.omega), &all.v, k, cfg.tau_px);
    let finite: Vec<f64> = initial.residuals.iter().copied().filter(|e| e.is_finite()).collect();
    let eta0 = stats::robust_threshold(&finite, cfg.mad_multiplier)
        .unwrap_or(1.0)
        .max(cfg.eta_floor);
    let eta_hi = 4.0 * eta0;
    let mut eta = eta0;

    let mut best: Option<(MotionHypothesis, Evaluation)> = None;
    let batch = cfg.batch_size.max(1);
    let mut next = 0;
    'outer: while next < cfg.max_iterations {
        let end = (next + batch).min(cfg.max_iterations);
        let candidates: Vec<Option<(Rotation3<f64>, Vector3<f64>, Evaluation)>> = (next..end)
            .into_par_iter()
            .map(|it| {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                rng.set_stream(it as u64 + 1);
                let idx = sample(&mut rng, n, m).into_vec();
                let (r, v) = hypothesis_from_sample(samples, &idx, k, cfg)?;
                let ev = evaluate(samples, &r, &v, k, cfg.tau_px);
                Some((r, v, ev))
            })
            .collect();
        next = end;

        for (r, v, ev) in candidates.into_iter().flatten() {
            let mut h = MotionHypothesis::new(r, v);
            classify(&mut h, samples, &ev, eta, cfg);
            // The incumbent is re-scored at the current threshold so both
            // sides of the comparison see the same eta.
            let better = match &mut best {
                None => true,
                Some((b, bev)) => {
                    classify(b, samples, bev, eta, cfg);
                    (h.score, h.inlier_count) > (b.score, b.inlier_count)
                }
            };
            if better {
                best = Some((h, ev));
            }
            let ratio = best.as_ref().map_or(0.0, |(b, _)| b.inlier_ratio());
            eta = if ratio < cfg.target_inlier_ratio {
                eta * cfg.relax_factor
            } else {
                eta * cfg.tighten_factor
            }
            .clamp(cfg.eta_floor, eta_hi.max(cfg.eta_floor));
            if ratio >= cfg.early_exit_ratio {
                break 'outer;
            }
        }
    }

    let (mut best, _) = best.ok_or(MotionError::NoConsensus { inlier_ratio: 0.0 })?;
    if best.inlier_ratio() < cfg.min_inlier_ratio || best.inlier_count < m {
        return Err(MotionError::NoConsensus {
            inlier_ratio: best.inlier_ratio(),
        });
    }
    // The running threshold was seeded from a fit over all samples, outliers
    // included; re-seed it from the winner's own residuals before refining.
    for _ in 0..2 {
        rethreshold(&mut best, samples, k, cfg);
        if best.inlier_count < m {
            return Err(MotionError::NoConsensus {
                inlier_ratio: best.inlier_ratio(),
            });
        }
        best = irls_refine(samples, &best, k, cfg)?;
    }
    Ok(best)
}

/// Reclassifies `h` at `median(e) + lambda * MAD(e)` of its own residuals.
fn rethreshold(h: &mut MotionHypothesis, samples: &[MotionSample], k: &Intrinsics, cfg: &RansacConfig) {
    let ev = evaluate(samples, &h.rotation, &h.v, k, cfg.tau_px);
    let finite: Vec<f64> = ev.residuals.iter().copied().filter(|e| e.is_finite()).collect();
    let eta = stats::robust_threshold(&finite, cfg.mad_multiplier)
        .unwrap_or(h.eta)
        .max(cfg.eta_floor);
    classify(h, samples, &ev, eta, cfg);
}

/// Huber-weighted iteratively reweighted least squares over the inlier set.
///
/// Each iteration linearizes the rigid reprojection at the current estimate,
/// solves the weighted system, and accepts the step (halving if needed) only
/// when the Huber cost does not increase. The inlier set is reclassified
/// with the refined motion at the hypothesis' threshold.
pub fn irls_refine(
    samples: &[MotionSample],
    h: &MotionHypothesis,
    k: &Intrinsics,
    cfg: &RansacConfig,
) -> Result<MotionHypothesis, MotionError> {
    let idx: Vec<usize> = h
        .inliers
        .iter()
        .enumerate()
        .filter_map(|(i, &ok)| ok.then_some(i))
        .collect();
    if idx.len() < cfg.min_sample_size.max(3) {
        return Err(MotionError::InsufficientSamples {
            found: idx.len(),
            required: cfg.min_sample_size.max(3),
        });
    }
    let eta = h.eta;
    let (mut rotation, mut v) = (h.rotation, h.v);
    let mut cost = huber_cost(samples, &idx, &rotation, &v, k, cfg.tau_px, eta);
    for _ in 0..cfg.huber_iterations {
        let (dw, dv) = gauss_newton_step(samples, &idx, &rotation, &v, k, cfg.tau_px, Some(eta), cfg.rank_tolerance)?;
        if dw.norm() + dv.norm() < 1e-15 {
            break;
        }
        let mut step = 1.0;
        let mut accepted = false;
        for _ in 0..8 {
            let (r2, v2) = apply_step(&rotation, &v, &dw, &dv, step);
            let c2 = huber_cost(samples, &idx, &r2, &v2, k, cfg.tau_px, eta);
            if c2 <= cost {
                (rotation, v, cost) = (r2, v2, c2);
                accepted = true;
                break;
            }
            step *= 0.5;
        }
        if !accepted {
            break;
        }
    }
    let mut out = MotionHypothesis::new(rotation, v);
    let ev = evaluate(samples, &rotation, &v, k, cfg.tau_px);
    classify(&mut out, samples, &ev, eta, cfg);
    Ok(out)
}

/// Flow after inlier validation, with a per-pixel source flag.
#[derive(Debug, Clone, PartialEq)]
pub struct FusedFlow {
    pub flow: FlowField,
    /// True where the motion-field prediction replaced the observation.
    pub synthetic: Vec<bool>,
    /// Fraction of valid observed flows that passed both gates.
    pub observed_inlier_ratio: f64,
}

/// Keeps observed flow where it passes the residual and direction gates and
/// substitutes the rigid-motion prediction everywhere else.
pub fn fuse_flow(
    flow: &FlowField,
    depth: &RelativeDepthMap,
    k: &Intrinsics,
    h: &MotionHypothesis,
    cfg: &RansacConfig,
) -> Result<FusedFlow, MotionError> {
    let (w, hgt) = flow.dims();
    depth.check_dims(w, hgt)?;
    let tau = cfg.tau_px;
    let cos_thr = h.angular_threshold.min(std::f64::consts::PI).cos();
    let eta = h.eta;

    // (value, valid, synthetic, observed-valid, passed)
    let per_pixel: Vec<([f32; 2], bool, bool, bool, bool)> = (0..w * hgt)
        .into_par_iter()
        .map(|i| {
            let obs = flow.get(i).filter(|f| f[0].is_finite() && f[1].is_finite());
            let Some(&d) = depth.get(i) else {
                return match obs {
                    Some(&f) => (f, true, false, false, false),
                    None => ([0.0; 2], false, false, false, false),
                };
            };
            let (x, y) = k.normalize((i % w) as f64, (i / w) as f64);
            let Some(p) = h.predict_px(x, y, d as f64, k) else {
                return match obs {
                    Some(&f) => (f, true, false, true, false),
                    None => ([0.0; 2], false, false, false, false),
                };
            };
            let pred = [p.x as f32, p.y as f32];
            let Some(&f) = obs else {
                return (pred, true, true, false, false);
            };
            let fo = Vector2::new(f[0] as f64, f[1] as f64);
            let passes = residual_from_px(&fo, &p, tau) <= eta && {
                let (nf, np) = (fo.norm(), p.norm());
                nf < 2.0 * tau || np <= 1e-12 || fo.dot(&p) >= cos_thr * nf * np
            };
            if passes {
                (f, true, false, true, true)
            } else {
                (pred, true, true, true, false)
            }
        })
        .collect();

    let mut out = FlowField::invalid(w, hgt, [0.0; 2]);
    let mut synthetic = vec![false; w * hgt];
    let (mut observed, mut passed) = (0usize, 0usize);
    for (i, &(val, valid, synth, obs, pass)) in per_pixel.iter().enumerate() {
        if valid {
            out.set(i, val);
        }
        synthetic[i] = synth;
        observed += obs as usize;
        passed += pass as usize;
    }
    Ok(FusedFlow {
        flow: out,
        synthetic,
        observed_inlier_ratio: if observed > 0 { passed as f64 / observed as f64 } else { 0.0 },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{predict_motion_field, rigid_flow};
    use approx::assert_relative_eq;
    use rand::Rng;
    use rand_distr::Distribution;

    fn intrinsics() -> Intrinsics {
        Intrinsics::new(150.0, 150.0, 79.5, 59.5, 160, 120).unwrap()
    }

    /// Exact rigid flow over a slanted plane, as an independent scene oracle.
    fn scene(rotation: Rotation3<f64>, v: Vector3<f64>) -> (FlowField, RelativeDepthMap) {
        let k = intrinsics();
        let mut flow = FlowField::invalid(k.width, k.height, [0.0; 2]);
        let mut depth = crate::geometry::ScalarMap::invalid(k.width, k.height, 0.0);
        for vv in 0..k.height {
            for uu in 0..k.width {
                let i = vv * k.width + uu;
                let d = 4.0 + 0.03 * uu as f64 + 0.02 * vv as f64 + 2.0 * ((uu / 40) % 2) as f64;
                let d = d as f32 as f64;
                let (x, y) = k.normalize(uu as f64, vv as f64);
                let p = rigid_flow(x, y, d, &rotation, &v).unwrap();
                depth.set(i, d as f32);
                flow.set(i, [(p.x * k.fx) as f32, (p.y * k.fy) as f32]);
            }
        }
        (flow, RelativeDepthMap::from_depth(depth))
    }

    fn truth() -> (Rotation3<f64>, Vector3<f64>) {
        (Rotation3::new(Vector3::new(0.004, -0.012, 0.006)), Vector3::new(0.1, 0.01, 0.05))
    }

    #[test]
    fn origin_sample_rows() {
        let s = MotionSample {
            pixel: 0,
            x: 0.0,
            y: 0.0,
            flow: Vector2::new(0.1, 0.2),
            flow_px: Vector2::zeros(),
            depth: 1.0,
            cell: 0,
            depth_bin: 0,
        };
        let (a, b) = build_linear_system(&[s]);
        assert_eq!(a.row(0).iter().copied().collect::<Vec<_>>(), vec![0.0, -1.0, 0.0, -1.0, 0.0, 0.0]);
        assert_eq!(a.row(1).iter().copied().collect::<Vec<_>>(), vec![1.0, 0.0, 0.0, 0.0, -1.0, 0.0]);
        assert_eq!(b.as_slice(), &[0.1, 0.2]);
    }

    fn sample_at(x: f64, y: f64, d: f64, flow: Vector2<f64>) -> MotionSample {
        MotionSample {
            pixel: 0,
            x,
            y,
            flow,
            flow_px: flow * 150.0,
            depth: d,
            cell: 0,
            depth_bin: 0,
        }
    }

    #[test]
    fn generic_samples_have_full_rank_and_collinear_do_not() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let generic: Vec<_> = (0..3)
            .map(|_| sample_at(rng.random_range(-0.5..0.5), rng.random_range(-0.5..0.5), rng.random_range(2.0..8.0), Vector2::zeros()))
            .collect();
        let (a, _) = build_linear_system(&generic);
        let sv = a.svd(false, false).singular_values;
        assert!(sv.min() / sv.max() > 1e-6, "singular values {sv}");

        let collinear: Vec<_> = (0..10).map(|j| sample_at(-0.5 + 0.1 * j as f64, 0.0, 3.0, Vector2::zeros())).collect();
        let (a, _) = build_linear_system(&collinear);
        let sv = a.clone().svd(false, false).singular_values;
        assert!(sv.min() / sv.max() < 1e-12);
        assert!(matches!(
            solve_motion(&build_linear_system(&collinear), 1e-9),
            Err(MotionError::RankDeficient { .. })
        ));
    }

    #[test]
    fn linear_solve_recovers_linear_flow_exactly() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let omega = Vector3::new(0.01, -0.02, 0.005);
        let v = Vector3::new(0.3, -0.1, 0.2);
        let samples: Vec<_> = (0..40)
            .map(|_| {
                let (x, y, d) = (rng.random_range(-0.5..0.5), rng.random_range(-0.4..0.4), rng.random_range(2.0..10.0));
                sample_at(x, y, d, predict_motion_field(x, y, d, 1.0, &omega, &v).unwrap())
            })
            .collect();
        let sol = solve_motion(&build_linear_system(&samples), 1e-9).unwrap();
        assert!((sol.omega - omega).norm() / omega.norm() < 1e-10);
        assert!((sol.v - v).norm() / v.norm() < 1e-10);
        assert!(sol.residual_norm < 1e-12);
    }

    #[test]
    fn zero_flow_solves_to_zero_and_scale_is_degenerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let samples: Vec<_> = (0..20)
            .map(|_| sample_at(rng.random_range(-0.5..0.5), rng.random_range(-0.4..0.4), rng.random_range(2.0..10.0), Vector2::zeros()))
            .collect();
        let sol = solve_motion(&build_linear_system(&samples), 1e-9).unwrap();
        assert!(sol.omega.norm() < 1e-15 && sol.v.norm() < 1e-15);
        assert!(matches!(recover_scale(&sol.v, 1.0, 1e-6), Err(MotionError::DegenerateTranslation(_))));
    }

    #[test]
    fn recover_scale_arithmetic() {
        let r = recover_scale(&Vector3::new(0.5, 0.0, 0.0), 2.0, 1e-6).unwrap();
        assert_eq!(r.t_hat.into_inner(), Vector3::new(1.0, 0.0, 0.0));
        assert_eq!(r.alpha, 4.0);
        assert_eq!(r.translation, Vector3::new(2.0, 0.0, 0.0));
        assert_eq!(recover_scale(&Vector3::x(), 0.0, 1e-6), Err(MotionError::ZeroBaseline(0.0)));
        // Doubling the baseline doubles alpha and |T| and nothing else.
        let v = Vector3::new(0.3, -0.2, 0.9);
        let (a, b) = (recover_scale(&v, 0.7, 1e-6).unwrap(), recover_scale(&v, 1.4, 1e-6).unwrap());
        assert_eq!(a.t_hat, b.t_hat);
        assert!((b.alpha - 2.0 * a.alpha).abs() < 1e-12 * b.alpha);
        assert!((b.translation.norm() - 2.0 * a.translation.norm()).abs() < 1e-12);
    }

    #[test]
    fn residual_definition() {
        let f = Vector2::new(10.0, 0.0);
        assert_eq!(residual_from_px(&f, &f, 1.0), 0.0);
        assert_relative_eq!(residual_from_px(&f, &Vector2::new(10.0, 1.0), 1.0), 0.1);
        let small = Vector2::new(0.1, 0.0);
        assert_relative_eq!(residual_from_px(&small, &Vector2::new(0.15, 0.0), 1.0), 0.05, epsilon = 1e-15);
    }

    #[test]
    fn directional_gate_parallel_and_antiparallel() {
        let f = Vector2::new(5.0, 1.0);
        assert_eq!(angular_deviation(&f, &(f * 2.0), 1.0), Some(0.0));
        assert_relative_eq!(angular_deviation(&f, &(-f), 1.0).unwrap(), std::f64::consts::PI);
        assert_eq!(angular_deviation(&Vector2::new(1.0, 0.0), &f, 1.0), None);
    }

    #[test]
    fn angular_threshold_rejects_planted_rotations() {
        let cfg = RansacConfig { angular_gate_floor: 0.0, ..Default::default() };
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        // Bounded noise: |u| has median 0.01 and MAD 0.005, so the gate sits at
        // 0.025 and only the planted rotations exceed it.
        let noise = rand_distr::Uniform::new(-0.02, 0.02).unwrap();
        let mut devs = Vec::new();
        let mut planted = Vec::new();
        for i in 0..1000 {
            let base = Vector2::new(rng.random_range(2.0..10.0), rng.random_range(-5.0..5.0));
            let ang: f64 = noise.sample(&mut rng);
            let rot = if i % 20 == 0 { std::f64::consts::FRAC_PI_2 } else { ang };
            let f = nalgebra::Rotation2::new(rot) * base;
            devs.push(angular_deviation(&f, &base, 1.0).unwrap());
            planted.push(i % 20 == 0);
        }
        let thr = angular_threshold(&devs, &cfg);
        for (d, p) in devs.iter().zip(&planted) {
            assert_eq!(*d > thr, *p);
        }
    }

    #[test]
    fn stratified_sampling_respects_caps_and_masks() {
        let k = intrinsics();
        let (r, v) = truth();
        let (flow, depth) = scene(r, v);
        let cfg = RansacConfig { cells_per_axis: 4, per_cell_cap: 10, ..Default::default() };
        let s = stratified_sample(&flow, &depth, &k, &cfg, 0).unwrap();
        assert!(s.len() <= 160 * cfg.depth_bins);
        let mut counts = std::collections::HashMap::new();
        for x in &s {
            *counts.entry((x.cell, x.depth_bin)).or_insert(0) += 1;
        }
        assert!(counts.values().all(|&c| c <= 10));
        let cells: std::collections::HashSet<_> = s.iter().map(|x| x.cell).collect();
        assert_eq!(cells.len(), 16);

        let mut left = flow.clone();
        for i in 0..left.len() {
            if i % k.width >= k.width / 2 {
                left.invalidate(i);
            }
        }
        let s = stratified_sample(&left, &depth, &k, &cfg, 0).unwrap();
        assert!(s.iter().all(|x| x.pixel % k.width < k.width / 2));

        let zero = FlowField::filled(k.width, k.height, [0.0, 0.0]);
        assert!(matches!(stratified_sample(&zero, &depth, &k, &cfg, 0), Err(MotionError::InsufficientSamples { .. })));
    }

    #[test]
    fn noiseless_ransac_is_exact() {
        let k = intrinsics();
        let (r, v) = truth();
        let (flow, depth) = scene(r, v);
        let cfg = RansacConfig::default();
        let s = stratified_sample(&flow, &depth, &k, &cfg, 5).unwrap();
        let h = ransac_motion(&s, &k, &cfg, 5).unwrap();
        assert_eq!(h.inlier_count, s.len());
        assert!(crate::geometry::rotation_angle_between(&h.rotation, &r) < 1e-6);
        assert!((h.v - v).norm() / v.norm() < 1e-6);

        // Refining an optimal hypothesis is a fixed point.
        let again = irls_refine(&s, &h, &k, &cfg).unwrap();
        assert!(crate::geometry::rotation_angle_between(&again.rotation, &h.rotation) < 1e-10);
        assert!((again.v - h.v).norm() < 1e-10);
    }

    #[test]
    fn coverage_breaks_count_ties() {
        let cfg = RansacConfig { cells_per_axis: 2, ..Default::default() };
        let mk = |cells: &[usize]| {
            let samples: Vec<_> = cells
                .iter()
                .map(|&c| MotionSample { cell: c, ..sample_at(0.0, 0.0, 1.0, Vector2::new(0.0, 0.0)) })
                .collect();
            let ev = Evaluation { residuals: vec![0.0; samples.len()], angles: vec![None; samples.len()] };
            let mut h = MotionHypothesis::new(Rotation3::identity(), Vector3::zeros());
            classify(&mut h, &samples, &ev, 0.1, &cfg);
            h
        };
        let clustered = mk(&[0, 0, 0, 0]);
        let spread = mk(&[0, 1, 2, 3]);
        assert_eq!(clustered.inlier_count, spread.inlier_count);
        assert!(spread.score > clustered.score);
    }

    #[test]
    fn huber_weight_at_ten_eta() {
        let eta = 0.05;
        let e: f64 = 10.0 * eta;
        assert_relative_eq!(if e <= eta { 1.0 } else { eta / e }, 0.1);
        // Huber cost is continuous at the threshold.
        assert_relative_eq!(huber(eta, eta), eta * (eta - 0.5 * eta));
    }

    #[test]
    fn fusion_keeps_inliers_and_replaces_planted_block() {
        let k = intrinsics();
        let (r, v) = truth();
        let (flow, depth) = scene(r, v);
        let cfg = RansacConfig::default();
        let s = stratified_sample(&flow, &depth, &k, &cfg, 9).unwrap();
        let h = ransac_motion(&s, &k, &cfg, 9).unwrap();
        let fused = fuse_flow(&flow, &depth, &k, &h, &cfg).unwrap();
        assert_eq!(fused.flow, flow);
        assert!(fused.synthetic.iter().all(|&x| !x));

        let mut corrupted = flow.clone();
        let block: Vec<usize> = (40..60).flat_map(|vv| (50..80).map(move |uu| vv * 160 + uu)).collect();
        for &i in &block {
            let f = corrupted.raw_values()[i];
            corrupted.set(i, [f[0] - 6.0, f[1] + 4.0]);
        }
        corrupted.invalidate(0);
        let fused = fuse_flow(&corrupted, &depth, &k, &h, &cfg).unwrap();
        for &i in &block {
            assert!(fused.synthetic[i]);
            let (x, y) = k.normalize((i % 160) as f64, (i / 160) as f64);
            let p = h.predict_px(x, y, depth.raw_values()[i] as f64, &k).unwrap();
            assert_eq!(fused.flow.raw_values()[i], [p.x as f32, p.y as f32]);
        }
        assert!(fused.synthetic[0] && fused.flow.is_valid(0));
    }
}
