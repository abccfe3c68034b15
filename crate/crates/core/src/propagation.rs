//! Warping the previous posterior into the current frame.
//!
//! Each valid source pixel is lifted with its depth, moved by the relative
//! pose and splatted to the nearest target pixel. Collisions keep the
//! nearest point; at equal depth the lower source index wins.

use crate::geometry::{GeometryError, Intrinsics, Pose, RelativeDepthMap, ScalarMap};

/// Result of a forward splat.
#[derive(Debug, Clone, PartialEq)]
pub struct Splat {
    /// Depth of the transformed point, target grid.
    pub depth: ScalarMap,
    /// Source pixel index per target pixel, `u32::MAX` where uncovered.
    pub source: Vec<u32>,
    /// Sub-pixel landing position of the winning point.
    pub landing: Vec<[f64; 2]>,
}

pub const NO_SOURCE: u32 = u32::MAX;

/// Forward-splats a depth map through `pose` with a nearest-depth z-buffer.
pub fn warp_depth(depth: &ScalarMap, pose: &Pose, k: &Intrinsics) -> Splat {
    let (w, h) = depth.dims();
    let r = *pose.rotation.matrix();
    let t = pose.translation;
    let mut zbuf = vec![f64::INFINITY; w * h];
    let mut source = vec![NO_SOURCE; w * h];
    let mut landing = vec![[f64::NAN; 2]; w * h];
    // Raster order with a strict comparison: the lower source index keeps ties.
    for (i, &z) in depth.iter_valid() {
        if !(z > 0.0 && z.is_finite()) {
            continue;
        }
        let p = k.ray((i % w) as f64, (i / w) as f64) * z as f64;
        let q = r * p + t;
        if q.z <= 0.0 {
            continue;
        }
        let uf = q.x / q.z * k.fx + k.cx;
        let vf = q.y / q.z * k.fy + k.cy;
        let (u, v) = (uf.round(), vf.round());
        if !(u >= 0.0 && v >= 0.0 && u < w as f64 && v < h as f64) {
            continue;
        }
        let ti = v as usize * w + u as usize;
        if q.z < zbuf[ti] {
            zbuf[ti] = q.z;
            source[ti] = i as u32;
            landing[ti] = [uf, vf];
        }
    }
    let mut out = ScalarMap::invalid(w, h, 0.0);
    for (i, &z) in zbuf.iter().enumerate() {
        if source[i] != NO_SOURCE {
            out.set(i, z as f32);
        }
    }
    Splat { depth: out, source, landing }
}

/// Relative depth at a sub-pixel position, interpolating inverse depth
/// bilinearly (exact on planes). `None` if a neighbour is missing.
pub fn relative_depth_at(d_rel: &RelativeDepthMap, u: f64, v: f64) -> Option<f64> {
    let (w, h) = d_rel.dims();
    if w < 2 || h < 2 {
        return None;
    }
    // Border cells extrapolate linearly over the half pixel outside the grid.
    let u0 = (u.floor().max(0.0) as usize).min(w - 2);
    let v0 = (v.floor().max(0.0) as usize).min(h - 2);
    let (u1, v1) = (u0 + 1, v0 + 1);
    let (a, b) = (u - u0 as f64, v - v0 as f64);
    let inv = |x: usize, y: usize| -> Option<f64> {
        let &d = d_rel.get(y * w + x)?;
        (d > 0.0 && d.is_finite()).then(|| 1.0 / d as f64)
    };
    let top = (1.0 - a) * inv(u0, v0)? + a * inv(u1, v0)?;
    let bottom = (1.0 - a) * inv(u0, v1)? + a * inv(u1, v1)?;
    let q = (1.0 - b) * top + b * bottom;
    (q > 0.0).then(|| 1.0 / q)
}

/// Depth, scale and variance prior for the current frame.
#[derive(Debug, Clone, PartialEq)]
pub struct WarpedPrior {
    pub depth: ScalarMap,
    pub scale: ScalarMap,
    pub variance: ScalarMap,
}

impl WarpedPrior {
    pub fn covered(&self, idx: usize) -> bool {
        self.scale.is_valid(idx)
    }

    pub fn coverage(&self) -> usize {
        self.scale.valid_count()
    }
}

/// Warps the previous posterior depth and variance into the current frame.
///
/// The scale is the transformed depth over the relative depth at the point's
/// landing position, so sub-pixel splat offsets do not bias it. Covered pixels
/// satisfy `scale * d_rel == depth` exactly: the depth is recomputed from the
/// stored scale.
pub fn warp_posterior(
    depth_post: &ScalarMap,
    variance_post: &ScalarMap,
    pose: &Pose,
    k: &Intrinsics,
    d_rel: &RelativeDepthMap,
) -> Result<WarpedPrior, GeometryError> {
    let (w, h) = depth_post.dims();
    variance_post.check_dims(w, h)?;
    d_rel.check_dims(w, h)?;
    let splat = warp_depth(depth_post, pose, k);
    let mut depth = ScalarMap::invalid(w, h, 0.0);
    let mut scale = ScalarMap::invalid(w, h, 0.0);
    let mut variance = ScalarMap::invalid(w, h, 0.0);
    for i in 0..w * h {
        let src = splat.source[i];
        if src == NO_SOURCE {
            continue;
        }
        let (Some(&z), Some(&d), Some(&var)) = (splat.depth.get(i), d_rel.get(i), variance_post.get(src as usize)) else {
            continue;
        };
        let [u, v] = splat.landing[i];
        let d_land = relative_depth_at(d_rel, u, v).unwrap_or(d as f64);
        let s = (z as f64 / d_land) as f32;
        if !(s > 0.0 && s.is_finite()) {
            continue;
        }
        scale.set(i, s);
        depth.set(i, s * d);
        variance.set(i, var);
    }
    Ok(WarpedPrior { depth, scale, variance })
}
