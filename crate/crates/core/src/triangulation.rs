//! Two-ray triangulation and the Sampson reliability map.

use nalgebra::{Matrix3, Vector3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{skew, GeometryError, Intrinsics, Pose, RelativeDepthMap, ScalarMap};
use crate::motion::FusedFlow;
use crate::stats;

#[derive(Debug, Error, PartialEq)]
pub enum TriangulationError {
    #[error("pose has zero translation")]
    ZeroTranslation,
    #[error("viewing rays are near parallel (sin angle {0:e})")]
    NearParallel(f64),
    #[error("point lies behind a camera")]
    BehindCamera,
    #[error("only {valid} of {total} pixels triangulated")]
    EmptyObservation { valid: usize, total: usize },
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TriangulationConfig {
    /// Rays whose angle has a smaller sine are rejected.
    pub min_ray_sine: f64,
    /// Multiplier on the Sampson residual of pixels carrying predicted flow.
    pub synthetic_penalty: f64,
    /// Minimum fraction of pixels that must triangulate.
    pub min_valid_fraction: f64,
}

impl Default for TriangulationConfig {
    fn default() -> Self {
        Self {
            min_ray_sine: 1e-4,
            synthetic_penalty: 4.0,
            min_valid_fraction: 1e-3,
        }
    }
}

/// `F = K^-T [T]x R K^-1`, so that `x_cur^T F x_prev = 0` for true matches.
pub fn fundamental_matrix(pose: &Pose, k: &Intrinsics) -> Result<Matrix3<f64>, TriangulationError> {
    if pose.translation.norm() == 0.0 {
        return Err(TriangulationError::ZeroTranslation);
    }
    let kinv = k.inverse_matrix();
    Ok(kinv.transpose() * skew(&pose.translation) * pose.rotation.matrix() * kinv)
}

/// Depths `(z_prev, z_cur)` minimizing `|z_prev R x_prev + T - z_cur x_cur|`
/// over the normalized rays of two pixels.
pub fn triangulate_pair(
    prev_px: (f64, f64),
    cur_px: (f64, f64),
    pose: &Pose,
    k: &Intrinsics,
    min_ray_sine: f64,
) -> Result<(f64, f64), TriangulationError> {
    let a = pose.rotation * k.ray(prev_px.0, prev_px.1);
    let c = k.ray(cur_px.0, cur_px.1);
    triangulate_rays(&a, &c, &pose.translation, min_ray_sine)
}

#[inline]
fn triangulate_rays(a: &Vector3<f64>, c: &Vector3<f64>, t: &Vector3<f64>, min_ray_sine: f64) -> Result<(f64, f64), TriangulationError> {
    // Cross-product form of the 2x2 normal equations; avoids the
    // cancellation in |a|^2 |c|^2 - (a.c)^2 for nearly parallel rays.
    let n = a.cross(c);
    let det = n.norm_squared();
    let sin2 = det / (a.norm_squared() * c.norm_squared());
    if !(sin2 >= min_ray_sine * min_ray_sine) {
        return Err(TriangulationError::NearParallel(sin2.max(0.0).sqrt()));
    }
    let zp = -t.cross(c).dot(&n) / det;
    let zc = a.cross(t).dot(&n) / det;
    if !(zp > 0.0 && zc > 0.0) {
        return Err(TriangulationError::BehindCamera);
    }
    Ok((zp, zc))
}

/// First-order geometric error of a correspondence against `F`, squared pixels.
/// Returns `+inf` when the epipolar gradient vanishes.
#[inline]
pub fn sampson_residual(prev_px: (f64, f64), cur_px: (f64, f64), f: &Matrix3<f64>) -> f64 {
    let xp = Vector3::new(prev_px.0, prev_px.1, 1.0);
    let xc = Vector3::new(cur_px.0, cur_px.1, 1.0);
    let fx = f * xp;
    let ftx = f.transpose() * xc;
    let num = xc.dot(&fx);
    let den = fx.x * fx.x + fx.y * fx.y + ftx.x * ftx.x + ftx.y * ftx.y;
    if !(den > 1e-300) {
        return f64::INFINITY;
    }
    num * num / den
}

/// Triangulated depth and Sampson map on the current frame's grid.
#[derive(Debug, Clone, PartialEq)]
pub struct Observation {
    /// Metric depth, meters.
    pub depth: ScalarMap,
    /// Sampson residual, squared pixels.
    pub sampson: ScalarMap,
    /// Median Sampson residual over valid pixels.
    pub median_sampson: f64,
}

impl Observation {
    pub fn valid_count(&self) -> usize {
        self.depth.valid_count()
    }
}

/// Triangulates every pixel of the fused flow under `pose`.
///
/// Pixels whose flow was substituted by the motion prediction keep their
/// depth but carry `synthetic_penalty` times their Sampson residual.
pub fn build_observation(
    fused: &FusedFlow,
    pose: &Pose,
    k: &Intrinsics,
    depth: &RelativeDepthMap,
    cfg: &TriangulationConfig,
) -> Result<Observation, TriangulationError> {
    let (w, h) = fused.flow.dims();
    depth.check_dims(w, h)?;
    let f = fundamental_matrix(pose, k)?;
    let r = *pose.rotation.matrix();
    let t = pose.translation;

    let per_pixel: Vec<Option<(f32, f32)>> = (0..w * h)
        .into_par_iter()
        .map(|i| {
            let fl = fused.flow.get(i)?;
            depth.get(i)?;
            let cur = ((i % w) as f64, (i / w) as f64);
            let prev = (cur.0 + fl[0] as f64, cur.1 + fl[1] as f64);
            let a = r * k.ray(prev.0, prev.1);
            let c = k.ray(cur.0, cur.1);
            let (_, z) = triangulate_rays(&a, &c, &t, cfg.min_ray_sine).ok()?;
            let mut rho = sampson_residual(prev, cur, &f);
            if !rho.is_finite() || !z.is_finite() {
                return None;
            }
            if fused.synthetic[i] {
                rho *= cfg.synthetic_penalty;
            }
            Some((z as f32, rho as f32))
        })
        .collect();

    let mut out_depth = ScalarMap::invalid(w, h, 0.0);
    let mut out_rho = ScalarMap::invalid(w, h, 0.0);
    let mut rhos = Vec::new();
    for (i, v) in per_pixel.into_iter().enumerate() {
        if let Some((z, rho)) = v {
            out_depth.set(i, z);
            out_rho.set(i, rho);
            rhos.push(rho as f64);
        }
    }
    let total = w * h;
    let need = ((total as f64) * cfg.min_valid_fraction).ceil() as usize;
    if rhos.len() < need.max(1) {
        return Err(TriangulationError::EmptyObservation { valid: rhos.len(), total });
    }
    let median_sampson = stats::median_in_place(&mut rhos).unwrap_or(0.0);
    Ok(Observation {
        depth: out_depth,
        sampson: out_rho,
        median_sampson,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use nalgebra::Rotation3;
    use proptest::prelude::*;

    fn identity_k() -> Intrinsics {
        Intrinsics { fx: 1.0, fy: 1.0, cx: 0.0, cy: 0.0, width: 1, height: 1 }
    }

    fn camera() -> Intrinsics {
        Intrinsics::new(150.0, 140.0, 79.5, 59.5, 160, 120).unwrap()
    }

    #[test]
    fn fundamental_of_pure_x_translation() {
        let pose = Pose::new(Rotation3::identity(), Vector3::new(1.0, 0.0, 0.0));
        let f = fundamental_matrix(&pose, &identity_k()).unwrap();
        assert_eq!(f, Matrix3::new(0.0, 0.0, 0.0, 0.0, 0.0, -1.0, 0.0, 1.0, 0.0));
        assert!(matches!(fundamental_matrix(&Pose::identity(), &identity_k()), Err(TriangulationError::ZeroTranslation)));
    }

    #[test]
    fn epipolar_constraint_and_rank_two() {
        let k = camera();
        let pose = Pose::new(Rotation3::new(Vector3::new(0.02, -0.05, 0.01)), Vector3::new(0.3, -0.05, 0.2));
        let f = fundamental_matrix(&pose, &k).unwrap();
        let fnorm = f / f.norm();
        assert!(fnorm.determinant().abs() < 1e-12);
        for (x, y, z) in [(0.5, 0.2, 4.0), (-1.0, 0.3, 7.0), (0.1, -0.4, 2.5)] {
            let p_prev = Vector3::new(x, y, z);
            let p_cur = pose.transform(&p_prev);
            let xp = k.matrix() * (p_prev / p_prev.z);
            let xc = k.matrix() * (p_cur / p_cur.z);
            assert!(xc.dot(&(fnorm * xp)).abs() < 1e-9);
            assert!(sampson_residual((xp.x, xp.y), (xc.x, xc.y), &f) < 1e-18);
        }
    }

    #[test]
    fn rectified_stereo_identity() {
        let (f, b, d) = (700.0, 0.54, 35.0);
        let k = Intrinsics::new(f, f, 600.0, 180.0, 1241, 376).unwrap();
        let pose = Pose::new(Rotation3::identity(), Vector3::new(-b, 0.0, 0.0));
        let (zp, zc) = triangulate_pair((640.0, 200.0), (640.0 - d, 200.0), &pose, &k, 1e-4).unwrap();
        assert_relative_eq!(zc, f * b / d, max_relative = 1e-12);
        assert_relative_eq!(zp, f * b / d, max_relative = 1e-12);
        assert!(matches!(
            triangulate_pair((640.0, 200.0), (640.0, 200.0), &pose, &k, 1e-4),
            Err(TriangulationError::NearParallel(_))
        ));
    }

    #[test]
    fn triangulates_a_five_meter_point() {
        let k = camera();
        let pose = Pose::new(Rotation3::new(Vector3::new(0.01, 0.03, -0.02)), Vector3::new(0.25, 0.02, -0.1));
        let p_prev = pose.inverse().transform(&Vector3::new(0.6, -0.3, 5.0));
        let (up, vp) = k.project(&p_prev).unwrap();
        let (uc, vc) = k.project(&Vector3::new(0.6, -0.3, 5.0)).unwrap();
        let (_, z) = triangulate_pair((up, vp), (uc, vc), &pose, &k, 1e-4).unwrap();
        assert_relative_eq!(z, 5.0, max_relative = 1e-9);
    }

    #[test]
    fn sampson_of_one_pixel_perpendicular_offset() {
        // Pure x translation with identity intrinsics: epipolar lines are rows,
        // both gradients have unit norm, so rho = d^2 / 2 for a 1 px row offset.
        let pose = Pose::new(Rotation3::identity(), Vector3::new(1.0, 0.0, 0.0));
        let f = fundamental_matrix(&pose, &identity_k()).unwrap();
        let (prev, cur) = ((3.0, 2.0), (7.0, 3.0));
        let l = f * Vector3::new(prev.0, prev.1, 1.0);
        let dist = (l.dot(&Vector3::new(cur.0, cur.1, 1.0))).abs() / (l.x * l.x + l.y * l.y).sqrt();
        assert_relative_eq!(dist, 1.0);
        assert_relative_eq!(sampson_residual(prev, cur, &f), dist * dist / 2.0, epsilon = 1e-15);
        assert!(sampson_residual((1.0, 5.0), (2.0, -3.0), &f) > 0.0);
    }

    proptest! {
        #[test]
        fn stereo_identity_over_random_rigs(f in 100.0f64..2000.0, b in 0.05f64..2.0, d in 0.5f64..200.0) {
            let k = Intrinsics::new(f, f, 640.0, 200.0, 1400, 400).unwrap();
            let pose = Pose::new(Rotation3::identity(), Vector3::new(-b, 0.0, 0.0));
            let (_, z) = triangulate_pair((700.0, 210.0), (700.0 - d, 210.0), &pose, &k, 1e-6).unwrap();
            prop_assert!((z - f * b / d).abs() <= 1e-9 * (f * b / d));
        }

        #[test]
        fn sampson_invariant_to_scaling_f(c in prop_oneof![-50.0f64..-0.01, 0.01f64..50.0],
                                         u in 0.0f64..160.0, v in 0.0f64..120.0,
                                         du in -5.0f64..5.0, dv in -5.0f64..5.0) {
            let k = camera();
            let pose = Pose::new(Rotation3::new(Vector3::new(0.01, 0.02, 0.0)), Vector3::new(0.2, 0.05, 0.1));
            let f = fundamental_matrix(&pose, &k).unwrap();
            let a = sampson_residual((u + du, v + dv), (u, v), &f);
            let b = sampson_residual((u + du, v + dv), (u, v), &(f * c));
            prop_assert!((a - b).abs() <= 1e-9 * a.max(1e-12));
        }

        #[test]
        fn depth_invariant_to_resolution(s in 0.25f64..4.0) {
            let k = camera();
            let ks = Intrinsics { fx: k.fx * s, fy: k.fy * s, cx: k.cx * s, cy: k.cy * s, width: k.width, height: k.height };
            let pose = Pose::new(Rotation3::new(Vector3::new(0.0, 0.02, 0.0)), Vector3::new(0.3, 0.0, 0.1));
            let p = Vector3::new(0.4, 0.2, 6.0);
            let pp = pose.inverse().transform(&p);
            let run = |k: &Intrinsics| {
                let a = k.project(&pp).unwrap();
                let b = k.project(&p).unwrap();
                triangulate_pair(a, b, &pose, k, 1e-4).unwrap().1
            };
            prop_assert!((run(&k) - run(&ks)).abs() < 1e-9);
        }
    }
}
