//! Recursive per-pixel scale filter.
//!
//! The state is a scale field `S` with variance `V` such that
//! `S * d_rel` is metric depth. Each frame the warped prior is inflated by
//! the frame's median Sampson residual, gated against the triangulated
//! observation, and updated with a consistency-capped gain in Joseph form.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::geometry::{GeometryError, Intrinsics, RelativeDepthMap, ScalarMap};
use crate::propagation::WarpedPrior;
use crate::stats;
use crate::triangulation::Observation;

/// 99% quantile of the chi-square distribution with one degree of freedom.
pub const CHI2_99_1DOF: f64 = 6.634_896_601_021_214;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FusionConfig {
    /// Variance scale applied to the normalized Sampson residual.
    pub variance_scale: f64,
    pub kappa_min: f64,
    pub chi2_gate: f64,
    /// Weight of the previous tolerance in its moving average.
    pub ema: f64,
    pub obs_variance_floor: f64,
    pub tolerance_floor: f64,
    /// First-frame variance as a multiple of the median observation variance.
    pub init_variance_factor: f64,
    /// Variance given to newly covered pixels, as a multiple of the median posterior variance.
    pub disocclusion_variance_factor: f64,
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self {
            variance_scale: 1.0,
            kappa_min: 0.1,
            chi2_gate: CHI2_99_1DOF,
            ema: 0.9,
            obs_variance_floor: 1e-6,
            tolerance_floor: 1e-4,
            init_variance_factor: 25.0,
            disocclusion_variance_factor: 10.0,
        }
    }
}

/// Posterior scale field and its variance.
#[derive(Debug, Clone, PartialEq)]
pub struct ScaleState {
    pub scale: ScalarMap,
    pub variance: ScalarMap,
    /// Frame-level consistency tolerance `sigma_e`.
    pub tolerance: f64,
    pub frame_index: u64,
    /// Last observed median Sampson residual, used to inflate prior-only frames.
    pub median_sampson: f64,
}

/// Uniform prior inflation `1 + rho_med / (fx fy)`.
#[inline]
pub fn inflation_factor(median_sampson: f64, k: &Intrinsics) -> f64 {
    1.0 + median_sampson / (k.fx * k.fy)
}

pub fn inflate_prior(variance: &mut ScalarMap, median_sampson: f64, k: &Intrinsics) {
    let f = inflation_factor(median_sampson, k);
    if f == 1.0 {
        return;
    }
    for i in 0..variance.len() {
        if variance.is_valid(i) {
            let v = variance.raw_values()[i];
            variance.set(i, (v as f64 * f) as f32);
        }
    }
}

/// `V_obs = sigma^2 rho / (fx fy)`, floored.
#[inline]
pub fn observation_variance(rho: f64, k: &Intrinsics, variance_scale: f64, floor: f64) -> f64 {
    (variance_scale * rho / (k.fx * k.fy)).max(floor)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GateDecision {
    Inlier,
    KeepPrior,
    KeepObservation,
}

/// Normalized squared innovation tested against `chi2_gate`. Rejected
/// pixels keep whichever estimate has the smaller variance.
#[inline]
pub fn innovation_gate(s_obs: f64, s_prior: f64, v_obs: f64, v_prior: f64, chi2_gate: f64) -> GateDecision {
    let d = s_obs - s_prior;
    let gamma = d * d / (v_prior + v_obs);
    if gamma <= chi2_gate {
        GateDecision::Inlier
    } else if v_obs < v_prior {
        GateDecision::KeepObservation
    } else {
        GateDecision::KeepPrior
    }
}

/// Relative discrepancy `|S_obs - S_prior| / S_obs`.
#[inline]
pub fn relative_discrepancy(s_obs: f64, s_prior: f64) -> f64 {
    (s_obs - s_prior).abs() / s_obs
}

/// `exp(-delta^2 / (2 sigma_e^2))`.
#[inline]
pub fn consistency_score(s_obs: f64, s_prior: f64, tolerance: f64) -> f64 {
    let delta = relative_discrepancy(s_obs, s_prior);
    (-(delta * delta) / (2.0 * tolerance * tolerance)).exp()
}

/// Moving-average update of the frame tolerance from `MAD(delta)`.
/// An empty frame leaves the tolerance unchanged.
pub fn update_tolerance(deltas: &[f64], previous: Option<f64>, ema: f64, floor: f64) -> Option<f64> {
    let Some((_, mad)) = stats::median_mad(deltas) else {
        return previous;
    };
    Some(match previous {
        Some(p) => (ema * p + (1.0 - ema) * mad).max(floor),
        None => mad.max(floor),
    })
}

/// Capped gain and Joseph-form update. Returns `(S_post, V_post, gain)`.
#[inline]
pub fn kalman_update(s_prior: f64, v_prior: f64, s_obs: f64, v_obs: f64, consistency: f64, kappa_min: f64) -> (f64, f64, f64) {
    let raw = v_prior / (v_prior + v_obs);
    let kappa = raw.min(kappa_min + (1.0 - kappa_min) * consistency);
    let s = s_prior + kappa * (s_obs - s_prior);
    let v = (1.0 - kappa).powi(2) * v_prior + kappa * kappa * v_obs;
    (s, v, kappa)
}

/// Per-frame fusion counters.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct FusionStats {
    pub both: usize,
    pub prior_only: usize,
    pub observation_only: usize,
    pub gated: usize,
}

impl FusionStats {
    pub fn gate_rejection_rate(&self) -> f64 {
        if self.both == 0 {
            0.0
        } else {
            self.gated as f64 / self.both as f64
        }
    }
}

#[derive(Clone, Copy)]
enum Pixel {
    Invalid,
    Both { s_obs: f64, v_obs: f64, s_prior: f64, v_prior: f64 },
    PriorOnly { s: f64, v: f64 },
    ObsOnly { s: f64, v: f64 },
}

/// One recursive filter step over the frame.
///
/// `prior` is the warped posterior of the previous frame; when no previous
/// state exists the prior is bootstrapped from the median observed scale
/// with a wide variance. Without an observation the prior is carried with
/// its inflated variance.
pub fn fuse_frame(
    previous: Option<&ScaleState>,
    prior: Option<&WarpedPrior>,
    observation: Option<&Observation>,
    d_rel: &RelativeDepthMap,
    k: &Intrinsics,
    cfg: &FusionConfig,
) -> Result<(ScaleState, FusionStats), GeometryError> {
    let (w, h) = d_rel.dims();
    if let Some(p) = prior {
        p.scale.check_dims(w, h)?;
    }
    if let Some(o) = observation {
        o.depth.check_dims(w, h)?;
    }

    let obs_at = |i: usize| -> Option<(f64, f64)> {
        let o = observation?;
        let &z = o.depth.get(i)?;
        let &d = d_rel.get(i)?;
        let s = z as f64 / d as f64;
        let rho = *o.sampson.get(i)? as f64;
        (s > 0.0 && s.is_finite()).then(|| (s, observation_variance(rho, k, cfg.variance_scale, cfg.obs_variance_floor)))
    };

    let median_sampson = match (observation, previous) {
        (Some(o), _) => o.median_sampson,
        (None, Some(p)) => p.median_sampson,
        (None, None) => 0.0,
    };
    let inflation = inflation_factor(median_sampson, k);

    // First frame: a flat prior at the median observed scale.
    let bootstrap = if previous.is_none() && prior.is_none() {
        let mut s = Vec::new();
        let mut v = Vec::new();
        for i in 0..w * h {
            if let Some((so, vo)) = obs_at(i) {
                s.push(so);
                v.push(vo);
            }
        }
        match (stats::median_in_place(&mut s), stats::median_in_place(&mut v)) {
            (Some(ms), Some(mv)) => Some((ms, cfg.init_variance_factor * mv)),
            _ => None,
        }
    } else {
        None
    };

    let classify = |i: usize| -> Pixel {
        if !d_rel.is_valid(i) {
            return Pixel::Invalid;
        }
        let pr = match (prior, bootstrap) {
            (Some(p), _) => match (p.scale.get(i), p.variance.get(i)) {
                (Some(&s), Some(&v)) => Some((s as f64, v as f64 * inflation)),
                _ => None,
            },
            (None, Some((s, v))) => Some((s, v)),
            (None, None) => None,
        };
        match (pr, obs_at(i)) {
            (Some((s_prior, v_prior)), Some((s_obs, v_obs))) => Pixel::Both { s_obs, v_obs, s_prior, v_prior },
            (Some((s, v)), None) => Pixel::PriorOnly { s, v },
            (None, Some((s, v))) => Pixel::ObsOnly { s, v },
            (None, None) => Pixel::Invalid,
        }
    };

    let deltas: Vec<f64> = (0..w * h)
        .into_par_iter()
        .filter_map(|i| match classify(i) {
            Pixel::Both { s_obs, s_prior, .. } => Some(relative_discrepancy(s_obs, s_prior)),
            _ => None,
        })
        .collect();
    let prev_tol = previous.map(|p| p.tolerance);
    let tolerance = update_tolerance(&deltas, prev_tol, cfg.ema, cfg.tolerance_floor).unwrap_or(cfg.tolerance_floor);
    drop(deltas);

    // Per pixel: scale, variance, and a tag 0 invalid, 1 both, 2 both gated,
    // 3 prior only, 4 observation only.
    let updated: Vec<(f32, f32, u8)> = (0..w * h)
        .into_par_iter()
        .map(|i| match classify(i) {
            Pixel::Invalid => (0.0, 0.0, 0),
            Pixel::PriorOnly { s, v } => (s as f32, v as f32, 3),
            Pixel::ObsOnly { s, v } => (s as f32, v as f32, 4),
            Pixel::Both { s_obs, v_obs, s_prior, v_prior } => match innovation_gate(s_obs, s_prior, v_obs, v_prior, cfg.chi2_gate) {
                GateDecision::Inlier => {
                    let c = consistency_score(s_obs, s_prior, tolerance);
                    let (s, v, _) = kalman_update(s_prior, v_prior, s_obs, v_obs, c, cfg.kappa_min);
                    (s as f32, v as f32, 1)
                }
                GateDecision::KeepObservation => (s_obs as f32, v_obs as f32, 2),
                GateDecision::KeepPrior => (s_prior as f32, v_prior as f32, 2),
            },
        })
        .collect();

    let mut stats = FusionStats::default();
    let mut scale = ScalarMap::invalid(w, h, 0.0);
    let mut variance = ScalarMap::invalid(w, h, 0.0);
    for (i, &(s, v, tag)) in updated.iter().enumerate() {
        match tag {
            0 => continue,
            1 => stats.both += 1,
            2 => {
                stats.both += 1;
                stats.gated += 1;
            }
            3 => stats.prior_only += 1,
            _ => stats.observation_only += 1,
        }
        scale.set(i, s);
        variance.set(i, v);
    }

    Ok((
        ScaleState {
            scale,
            variance,
            tolerance,
            frame_index: previous.map_or(0, |p| p.frame_index + 1),
            median_sampson,
        },
        stats,
    ))
}

/// State made of the observation alone (temporal fusion disabled).
pub fn observation_state(
    observation: Option<&Observation>,
    d_rel: &RelativeDepthMap,
    k: &Intrinsics,
    cfg: &FusionConfig,
    frame_index: u64,
) -> ScaleState {
    let (w, h) = d_rel.dims();
    let mut scale = ScalarMap::invalid(w, h, 0.0);
    let mut variance = ScalarMap::invalid(w, h, 0.0);
    if let Some(o) = observation {
        for i in 0..w * h {
            if let (Some(&z), Some(&d), Some(&rho)) = (o.depth.get(i), d_rel.get(i), o.sampson.get(i)) {
                let s = z / d;
                if s > 0.0 && s.is_finite() {
                    scale.set(i, s);
                    variance.set(i, observation_variance(rho as f64, k, cfg.variance_scale, cfg.obs_variance_floor) as f32);
                }
            }
        }
    }
    ScaleState {
        scale,
        variance,
        tolerance: cfg.tolerance_floor,
        frame_index,
        median_sampson: observation.map_or(0.0, |o| o.median_sampson),
    }
}
