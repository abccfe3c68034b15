//! Ground-truth scene generator.
//!
//! Scenes are ray-cast: each pixel of frame `k` is intersected with the
//! scene surfaces, the hit point is reprojected exactly into frame `k-1`
//! to produce the backward flow, and hidden points (a nearer surface on the
//! ray from the previous camera) are masked. Independently moving blocks
//! get flow from their own rigid motion.

use std::path::{Path, PathBuf};

use nalgebra::{Rotation3, Vector2, Vector3};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{FlowField, GeometryError, Intrinsics, Pose, RelativeDepthMap, ScalarMap};
use crate::io::{self, FrameRecord, IoError, OdometryRecord, PoseRecord, SequenceManifest};
use crate::segmentation::RgbImage;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("frame {index} outside a trajectory of {frames} frames")]
    FrameOutOfRange { index: usize, frames: usize },
    #[error("invalid scene: {0}")]
    InvalidSpec(String),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Io(#[from] IoError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Shape {
    /// Infinite plane through `point` with normal `normal`.
    Plane { point: [f64; 3], normal: [f64; 3] },
    /// Parallelogram `center + s * u + t * v`, `|s|, |t| <= 1`.
    Quad { center: [f64; 3], u: [f64; 3], v: [f64; 3] },
    /// Ground surface `y = base - amplitude * sin(kx x + px) * sin(kz z + pz)`
    /// with `k = 2 pi / wavelength` (y points down).
    HeightField { base: f64, amplitude: f64, wavelength: f64, phase: [f64; 2] },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Surface {
    pub shape: Shape,
    pub color: [u8; 3],
    /// Index into `SceneSpec::region_scales`.
    #[serde(default)]
    pub region: usize,
}

/// Smooth camera path. The camera advances `speed` meters per frame along
/// its heading, yaws at `yaw_rate` and oscillates in pitch, roll and height.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Trajectory {
    pub speed: f64,
    pub yaw_rate: f64,
    pub pitch_amplitude: f64,
    pub roll_amplitude: f64,
    pub lateral_amplitude: f64,
    pub vertical_amplitude: f64,
    pub period: f64,
    pub start: [f64; 3],
}

impl Default for Trajectory {
    fn default() -> Self {
        Self {
            speed: 0.6,
            yaw_rate: 0.004,
            pitch_amplitude: 0.01,
            roll_amplitude: 0.005,
            lateral_amplitude: 0.15,
            vertical_amplitude: 0.03,
            period: 13.0,
            start: [0.0, 0.0, 0.0],
        }
    }
}

/// Independently moving image blocks and sensor noise.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NoiseSpec {
    /// Fraction of flow pixels covered by moving blocks.
    pub outlier_fraction: f64,
    pub block_size: usize,
    /// Rotation magnitude of block motion, radians.
    pub block_rotation: f64,
    /// Translation magnitude of block motion, meters.
    pub block_translation: f64,
    pub flow_sigma_px: f64,
    /// Relative standard deviation of the odometry baseline.
    pub baseline_sigma: f64,
    /// Affine distortion `a * d + c` of the relative depth.
    pub depth_gain: f64,
    pub depth_shift: f64,
}

impl Default for NoiseSpec {
    fn default() -> Self {
        Self {
            outlier_fraction: 0.0,
            block_size: 16,
            block_rotation: 0.03,
            block_translation: 0.8,
            flow_sigma_px: 0.0,
            baseline_sigma: 0.0,
            depth_gain: 1.0,
            depth_shift: 0.0,
        }
    }
}

impl NoiseSpec {
    pub fn is_noiseless(&self) -> bool {
        self.outlier_fraction == 0.0
            && self.flow_sigma_px == 0.0
            && self.baseline_sigma == 0.0
            && self.depth_gain == 1.0
            && self.depth_shift == 0.0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneSpec {
    pub intrinsics: Intrinsics,
    pub frames: usize,
    pub surfaces: Vec<Surface>,
    #[serde(default)]
    pub trajectory: Trajectory,
    /// True scale `alpha*`: metric depth = `alpha * region_scale * d_rel`.
    pub alpha: f64,
    #[serde(default = "unit_scales")]
    pub region_scales: Vec<f64>,
    /// Hits beyond this depth are treated as empty.
    #[serde(default = "default_max_depth")]
    pub max_depth: f64,
    #[serde(default)]
    pub noise: NoiseSpec,
    #[serde(default)]
    pub seed: u64,
}

fn unit_scales() -> Vec<f64> {
    vec![1.0]
}

fn default_max_depth() -> f64 {
    200.0
}

impl SceneSpec {
    /// Street-like scene: ground, two side walls, a backdrop and a few boxes
    /// placed from `seed`.
    pub fn driving(width: usize, height: usize, frames: usize, seed: u64) -> Self {
        let f = 0.6 * width as f64;
        let k = Intrinsics::new(f, f, (width as f64 - 1.0) / 2.0, (height as f64 - 1.0) / 2.0, width, height)
            .expect("positive focal length");
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut surfaces = vec![
            Surface { shape: Shape::Plane { point: [0.0, 1.6, 0.0], normal: [0.0, -1.0, 0.0] }, color: [90, 90, 85], region: 0 },
            Surface { shape: Shape::Plane { point: [0.0, 0.0, 90.0], normal: [0.0, 0.0, -1.0] }, color: [120, 160, 210], region: 0 },
            Surface { shape: Shape::Plane { point: [-7.0, 0.0, 0.0], normal: [1.0, 0.0, 0.15] }, color: [170, 110, 80], region: 0 },
            Surface { shape: Shape::Plane { point: [8.0, 0.0, 0.0], normal: [-1.0, 0.0, 0.1] }, color: [200, 190, 140], region: 0 },
        ];
        for i in 0..6 {
            let z = 12.0 + 9.0 * i as f64 + rng.random_range(-2.0..2.0);
            let side = if i % 2 == 0 { -1.0 } else { 1.0 };
            let x = side * rng.random_range(2.5..5.0);
            let hw = rng.random_range(0.6..1.5);
            let hh = rng.random_range(0.6..1.4);
            let yaw: f64 = rng.random_range(-0.4..0.4);
            surfaces.push(Surface {
                shape: Shape::Quad {
                    center: [x, 1.6 - hh, z],
                    u: [hw * yaw.cos(), 0.0, hw * yaw.sin()],
                    v: [0.0, hh, 0.0],
                },
                color: [rng.random_range(30..230), rng.random_range(30..230), rng.random_range(30..230)],
                region: 0,
            });
        }
        Self {
            intrinsics: k,
            frames,
            surfaces,
            trajectory: Trajectory::default(),
            alpha: 2.0,
            region_scales: unit_scales(),
            max_depth: default_max_depth(),
            noise: NoiseSpec::default(),
            seed,
        }
    }

    /// Gives every surface its own region with a scale from `scales`, cycling.
    pub fn with_region_scales(mut self, scales: &[f64]) -> Self {
        for (i, s) in self.surfaces.iter_mut().enumerate() {
            s.region = i % scales.len();
        }
        self.region_scales = scales.to_vec();
        self
    }

    /// Replaces the ground plane by a height field.
    pub fn with_height_field(mut self, amplitude: f64, wavelength: f64) -> Self {
        self.surfaces[0].shape = Shape::HeightField { base: 1.6, amplitude, wavelength, phase: [0.3, 1.1] };
        self
    }

    pub fn validate(&self) -> Result<(), SynthError> {
        self.intrinsics.validate()?;
        let bad = |m: &str| Err(SynthError::InvalidSpec(m.to_string()));
        if self.frames == 0 {
            return bad("no frames");
        }
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return bad("alpha must be positive");
        }
        if self.region_scales.is_empty() || self.region_scales.iter().any(|s| !(*s > 0.0 && s.is_finite())) {
            return bad("region scales must be positive");
        }
        if self.surfaces.iter().any(|s| s.region >= self.region_scales.len()) {
            return bad("surface region out of range");
        }
        let n = &self.noise;
        if !(0.0..1.0).contains(&n.outlier_fraction) || n.block_size == 0 {
            return bad("outlier fraction must be in [0, 1) with a positive block size");
        }
        if ![n.flow_sigma_px, n.baseline_sigma, n.block_rotation, n.block_translation].iter().all(|v| v.is_finite() && *v >= 0.0) {
            return bad("noise magnitudes must be finite and non-negative");
        }
        if !(n.depth_gain > 0.0 && n.depth_shift.is_finite()) {
            return bad("depth gain must be positive");
        }
        Ok(())
    }

    /// World-to-camera pose of frame `k`.
    pub fn camera_pose(&self, k: usize) -> Pose {
        let t = &self.trajectory;
        let kf = k as f64;
        let phase = 2.0 * std::f64::consts::PI * kf / t.period;
        // Position integrates the heading in closed form.
        let yaw = t.yaw_rate * kf;
        let (sx, sz) = if t.yaw_rate.abs() < 1e-12 {
            (0.0, t.speed * kf)
        } else {
            let r = t.speed / t.yaw_rate;
            (r * (1.0 - yaw.cos()), r * yaw.sin())
        };
        let center = Vector3::new(
            t.start[0] + sx + t.lateral_amplitude * phase.sin(),
            t.start[1] + t.vertical_amplitude * (1.3 * phase).sin(),
            t.start[2] + sz,
        );
        let cam_to_world = Rotation3::from_axis_angle(&Vector3::y_axis(), yaw)
            * Rotation3::from_axis_angle(&Vector3::x_axis(), t.pitch_amplitude * (0.7 * phase).sin())
            * Rotation3::from_axis_angle(&Vector3::z_axis(), t.roll_amplitude * phase.cos());
        let r = cam_to_world.inverse();
        Pose::new(r, -(r * center))
    }

    /// Relative pose mapping frame `k-1` into frame `k`.
    pub fn relative_pose(&self, k: usize) -> Pose {
        assert!(k > 0);
        self.camera_pose(k).compose(&self.camera_pose(k - 1).inverse())
    }
}

struct Hit {
    depth: f64,
    surface: usize,
    point: Vector3<f64>,
}

fn v3(a: &[f64; 3]) -> Vector3<f64> {
    Vector3::new(a[0], a[1], a[2])
}

/// Ray parameter of the first intersection with `shape`; the ray is
/// `origin + lambda * dir`.
fn intersect(shape: &Shape, origin: &Vector3<f64>, dir: &Vector3<f64>, max: f64) -> Option<f64> {
    const NEAR: f64 = 1e-3;
    match shape {
        Shape::Plane { point, normal } => {
            let n = v3(normal);
            let den = n.dot(dir);
            if den.abs() < 1e-12 {
                return None;
            }
            let l = n.dot(&(v3(point) - origin)) / den;
            (l > NEAR && l < max).then_some(l)
        }
        Shape::Quad { center, u, v } => {
            let (c, u, v) = (v3(center), v3(u), v3(v));
            let n = u.cross(&v);
            let den = n.dot(dir);
            if den.abs() < 1e-12 {
                return None;
            }
            let l = n.dot(&(c - origin)) / den;
            if !(l > NEAR && l < max) {
                return None;
            }
            // Local coordinates in the (u, v) basis.
            let d = origin + dir * l - c;
            let (uu, uv, vv) = (u.dot(&u), u.dot(&v), v.dot(&v));
            let (du, dv) = (d.dot(&u), d.dot(&v));
            let det = uu * vv - uv * uv;
            let s = (du * vv - dv * uv) / det;
            let t = (dv * uu - du * uv) / det;
            (s.abs() <= 1.0 && t.abs() <= 1.0).then_some(l)
        }
        Shape::HeightField { base, amplitude, wavelength, phase } => {
            let kw = 2.0 * std::f64::consts::PI / wavelength;
            let surface_y = |p: &Vector3<f64>| base - amplitude * (kw * p.x + phase[0]).sin() * (kw * p.z + phase[1]).sin();
            // Positive below the surface.
            let g = |l: f64| {
                let p = origin + dir * l;
                p.y - surface_y(&p)
            };
            if dir.y <= 0.0 && origin.y < base - amplitude.abs() {
                return None;
            }
            let mut lo = NEAR;
            let mut g_lo = g(lo);
            if g_lo >= 0.0 {
                return None;
            }
            while lo < max {
                let hi = (lo * 1.02 + 0.02).min(max);
                let g_hi = g(hi);
                if g_hi >= 0.0 {
                    let (mut a, mut b) = (lo, hi);
                    for _ in 0..60 {
                        let m = 0.5 * (a + b);
                        if g(m) >= 0.0 {
                            b = m;
                        } else {
                            a = m;
                        }
                    }
                    return Some(0.5 * (a + b));
                }
                lo = hi;
                g_lo = g_hi;
            }
            let _ = g_lo;
            None
        }
    }
}

/// Nearest surface along the camera ray through pixel `(u, v)`.
fn cast(spec: &SceneSpec, cam: &Pose, u: f64, v: f64) -> Option<Hit> {
    let ray = spec.intrinsics.ray(u, v);
    let origin = -(cam.rotation.inverse() * cam.translation);
    // World direction scaled so the parameter is the camera depth.
    let dir = cam.rotation.inverse() * ray;
    let mut best: Option<(f64, usize)> = None;
    for (i, s) in spec.surfaces.iter().enumerate() {
        let max = best.map_or(spec.max_depth, |b| b.0);
        if let Some(l) = intersect(&s.shape, &origin, &dir, max) {
            if best.is_none_or(|b| l < b.0) {
                best = Some((l, i));
            }
        }
    }
    best.map(|(l, i)| Hit { depth: l, surface: i, point: origin + dir * l })
}

/// Nearest intersection depth along the ray from camera `cam` towards
/// world point `p`, in units of the depth of `p`.
fn occluded(spec: &SceneSpec, cam: &Pose, p: &Vector3<f64>) -> bool {
    let q = cam.transform(p);
    if q.z <= 0.0 {
        return true;
    }
    let origin = -(cam.rotation.inverse() * cam.translation);
    let dir = cam.rotation.inverse() * (q / q.z);
    let limit = q.z * (1.0 - 1e-6);
    spec.surfaces.iter().any(|s| intersect(&s.shape, &origin, &dir, limit).is_some())
}

fn shade(surface: &Surface, p: &Vector3<f64>) -> [u8; 3] {
    let t = 1.0 + 0.08 * (1.7 * p.x).sin() * (1.3 * p.z + 0.9 * p.y).sin();
    surface.color.map(|c| (c as f64 * t).round().clamp(0.0, 255.0) as u8)
}

/// One rendered frame. Flow, pose and baseline refer to the pair
/// `(k-1, k)` and are absent for the first frame.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticFrame {
    pub index: usize,
    pub image: RgbImage,
    /// Ground-truth metric depth.
    pub depth: ScalarMap,
    pub d_rel: RelativeDepthMap,
    /// Backward flow to frame `k-1`, pixels.
    pub flow: Option<FlowField>,
    /// Ground-truth relative pose `k-1 -> k`.
    pub pose: Option<Pose>,
    /// Odometry baseline, with noise when configured.
    pub baseline: Option<f64>,
    /// Pixels whose flow comes from an independently moving block.
    pub moving: Vec<bool>,
    /// Surface index per pixel, `u32::MAX` where nothing was hit.
    pub surface: Vec<u32>,
}

/// Random-stream ids; each frame uses `4 * k + purpose`.
const STREAM_BLOCKS: u64 = 0;
const STREAM_FLOW: u64 = 1;
const STREAM_BASELINE: u64 = 2;

fn frame_rng(seed: u64, frame: usize, purpose: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(4 * frame as u64 + purpose);
    rng
}

/// Moving blocks of frame `k`: pixel rectangles `(u0, v0, size)` with their
/// own relative motion.
pub fn moving_blocks(spec: &SceneSpec, k: usize) -> Vec<((usize, usize), Pose)> {
    let n = &spec.noise;
    if n.outlier_fraction <= 0.0 || k == 0 {
        return Vec::new();
    }
    let (w, h) = (spec.intrinsics.width, spec.intrinsics.height);
    let bs = n.block_size;
    let (cols, rows) = (w.div_ceil(bs), h.div_ceil(bs));
    let mut rng = frame_rng(spec.seed, k, STREAM_BLOCKS);
    let mut cells: Vec<usize> = (0..cols * rows).collect();
    cells.shuffle(&mut rng);
    let target = (n.outlier_fraction * (w * h) as f64).round() as usize;
    let mut covered = 0;
    let mut out = Vec::new();
    for c in cells {
        if covered >= target {
            break;
        }
        let (u0, v0) = ((c % cols) * bs, (c / cols) * bs);
        covered += (bs.min(w - u0)) * (bs.min(h - v0));
        let axis = random_unit(&mut rng);
        let dir = random_unit(&mut rng);
        let rot = Rotation3::from_scaled_axis(axis * n.block_rotation * rng.random_range(0.5..1.0));
        let t = dir * n.block_translation * rng.random_range(0.5..1.0);
        out.push(((u0, v0), Pose::new(rot, t)));
    }
    out
}

fn random_unit(rng: &mut ChaCha8Rng) -> Vector3<f64> {
    loop {
        let v = Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
        let n = v.norm();
        if n > 0.1 && n <= 1.0 {
            return v / n;
        }
    }
}

/// Renders frame `k`.
pub fn render_frame(spec: &SceneSpec, k: usize) -> Result<SyntheticFrame, SynthError> {
    spec.validate()?;
    if k >= spec.frames {
        return Err(SynthError::FrameOutOfRange { index: k, frames: spec.frames });
    }
    let intr = &spec.intrinsics;
    let (w, h) = (intr.width, intr.height);
    let cam = spec.camera_pose(k);
    let prev_cam = (k > 0).then(|| spec.camera_pose(k - 1));
    let rel = (k > 0).then(|| spec.relative_pose(k));

    let mut block_of = vec![usize::MAX; w * h];
    let blocks = moving_blocks(spec, k);
    let bs = spec.noise.block_size;
    for (bi, ((u0, v0), _)) in blocks.iter().enumerate() {
        for v in *v0..(*v0 + bs).min(h) {
            for u in *u0..(*u0 + bs).min(w) {
                block_of[v * w + u] = bi;
            }
        }
    }

    struct Px {
        hit: Option<(f64, u32, [u8; 3])>,
        flow: Option<[f64; 2]>,
        moving: bool,
    }
    let pixels: Vec<Px> = (0..w * h)
        .into_par_iter()
        .map(|i| {
            let (u, v) = ((i % w) as f64, (i / w) as f64);
            let Some(hit) = cast(spec, &cam, u, v) else {
                return Px { hit: None, flow: None, moving: false };
            };
            let surface = &spec.surfaces[hit.surface];
            let color = shade(surface, &hit.point);
            let p_cur = intr.ray(u, v) * hit.depth;
            let mut moving = false;
            let flow = match (rel, prev_cam) {
                (Some(rel), Some(prev)) => {
                    let p_prev = if block_of[i] != usize::MAX {
                        moving = true;
                        blocks[block_of[i]].1.inverse().transform(&p_cur)
                    } else if occluded(spec, &prev, &hit.point) {
                        return Px { hit: Some((hit.depth, hit.surface as u32, color)), flow: None, moving };
                    } else {
                        rel.inverse().transform(&p_cur)
                    };
                    intr.project(&p_prev).map(|(up, vp)| [up - u, vp - v])
                }
                _ => None,
            };
            Px { hit: Some((hit.depth, hit.surface as u32, color)), flow, moving }
        })
        .collect();

    let mut depth = ScalarMap::invalid(w, h, 0.0);
    let mut d_rel = ScalarMap::invalid(w, h, 0.0);
    let mut image = RgbImage::filled(w, h, [0, 0, 0]);
    let mut surface = vec![u32::MAX; w * h];
    let mut moving = vec![false; w * h];
    let mut flow = FlowField::invalid(w, h, [0.0, 0.0]);
    let noise = &spec.noise;
    for (i, px) in pixels.iter().enumerate() {
        if let Some((z, s, c)) = px.hit {
            depth.set(i, z as f32);
            let region = spec.region_scales[spec.surfaces[s as usize].region];
            let d = z / (spec.alpha * region);
            d_rel.set(i, (noise.depth_gain * d + noise.depth_shift) as f32);
            image.data[i] = c;
            surface[i] = s;
        }
        if let Some(f) = px.flow {
            flow.set(i, [f[0] as f32, f[1] as f32]);
        }
        moving[i] = px.moving;
    }

    let flow = rel.map(|_| perturb_flow(&flow, noise.flow_sigma_px, &mut frame_rng(spec.seed, k, STREAM_FLOW)));
    let baseline = rel.map(|p| perturb_baseline(p.baseline(), noise.baseline_sigma, &mut frame_rng(spec.seed, k, STREAM_BASELINE)));
    Ok(SyntheticFrame {
        index: k,
        image,
        depth,
        d_rel: RelativeDepthMap::from_depth(d_rel),
        flow,
        pose: rel,
        baseline,
        moving,
        surface,
    })
}

/// Frames `k-1` and `k`; the flow, pose and baseline live on the second.
pub fn render_frame_pair(spec: &SceneSpec, k: usize) -> Result<(SyntheticFrame, SyntheticFrame), SynthError> {
    if k == 0 {
        return Err(SynthError::FrameOutOfRange { index: 0, frames: spec.frames });
    }
    Ok((render_frame(spec, k - 1)?, render_frame(spec, k)?))
}

pub fn render_sequence(spec: &SceneSpec) -> Result<Vec<SyntheticFrame>, SynthError> {
    spec.validate()?;
    (0..spec.frames).into_par_iter().map(|k| render_frame(spec, k)).collect()
}

/// Seconds between synthetic frames.
pub const FRAME_INTERVAL: f64 = 0.1;

/// Writes a rendered sequence in the pipeline's on-disk layout: RGB PNG
/// images, inverse relative depth and ground-truth depth as PFM, backward
/// flow as `.flo`, and `sequence.toml` with odometry and ground-truth poses.
pub fn write_sequence(spec: &SceneSpec, dir: &Path) -> Result<SequenceManifest, SynthError> {
    let frames = render_sequence(spec)?;
    let mut records = Vec::with_capacity(frames.len());
    let mut odometry = Vec::new();
    for f in &frames {
        let name = format!("{:06}", f.index);
        let image = PathBuf::from("image").join(format!("{name}.png"));
        let inverse_depth = PathBuf::from("inverse_depth").join(format!("{name}.pfm"));
        let gt_depth = PathBuf::from("gt_depth").join(format!("{name}.pfm"));
        io::write_rgb_png(&dir.join(&image), &f.image)?;
        io::write_pfm(&dir.join(&inverse_depth), &f.d_rel.map(|d| 1.0 / d))?;
        io::write_pfm(&dir.join(&gt_depth), &f.depth)?;
        let flow = match &f.flow {
            Some(fl) => {
                let p = PathBuf::from("flow").join(format!("{name}.flo"));
                io::write_flo(&dir.join(&p), fl)?;
                Some(p)
            }
            None => None,
        };
        let timestamp = f.index as f64 * FRAME_INTERVAL;
        if let Some(b) = f.baseline {
            odometry.push(OdometryRecord { timestamp, baseline: b, source: Some("synthetic".into()) });
        }
        records.push(FrameRecord {
            timestamp,
            image,
            inverse_depth,
            flow,
            gt_depth: Some(gt_depth),
            gt_pose: f.pose.as_ref().map(PoseRecord::from),
        });
    }
    let manifest = SequenceManifest { intrinsics: spec.intrinsics, frames: records, odometry };
    manifest.save(dir)?;
    let scene = serde_json::to_string_pretty(spec).expect("scene serializes");
    std::fs::write(dir.join("scene.json"), scene).map_err(|source| IoError::Io { path: dir.join("scene.json"), source })?;
    Ok(manifest)
}

/// Adds isotropic Gaussian pixel noise to every valid flow vector.
pub fn perturb_flow(flow: &FlowField, sigma_px: f64, rng: &mut impl Rng) -> FlowField {
    if sigma_px == 0.0 {
        return flow.clone();
    }
    let normal = Normal::new(0.0, sigma_px).expect("finite sigma");
    let mut out = flow.clone();
    for i in 0..flow.len() {
        if let Some(f) = flow.get(i) {
            let n = Vector2::new(normal.sample(rng), normal.sample(rng));
            out.set(i, [(f[0] as f64 + n.x) as f32, (f[1] as f64 + n.y) as f32]);
        }
    }
    out
}

/// Multiplicative baseline noise `b (1 + sigma n)`, clamped at zero.
pub fn perturb_baseline(b: f64, rel_sigma: f64, rng: &mut impl Rng) -> f64 {
    if rel_sigma == 0.0 {
        return b;
    }
    let n: f64 = Normal::new(0.0, rel_sigma).expect("finite sigma").sample(rng);
    (b * (1.0 + n)).max(0.0)
}

/// Affine distortion `gain * d + shift` of valid relative depths.
pub fn perturb_relative_depth(d_rel: &RelativeDepthMap, gain: f64, shift: f64) -> RelativeDepthMap {
    if gain == 1.0 && shift == 0.0 {
        return d_rel.clone();
    }
    let mut m = d_rel.as_map().clone();
    for i in 0..m.len() {
        if let Some(&d) = d_rel.get(i) {
            m.set(i, (gain * d as f64 + shift) as f32);
        }
    }
    RelativeDepthMap::from_depth(m)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::triangulation::triangulate_pair;
    use approx::assert_relative_eq;

    fn small(frames: usize) -> SceneSpec {
        SceneSpec::driving(64, 48, frames, 7)
    }

    #[test]
    fn zero_motion_gives_zero_flow() {
        let mut spec = small(3);
        spec.trajectory = Trajectory {
            speed: 0.0,
            yaw_rate: 0.0,
            pitch_amplitude: 0.0,
            roll_amplitude: 0.0,
            lateral_amplitude: 0.0,
            vertical_amplitude: 0.0,
            ..Trajectory::default()
        };
        let f = render_frame(&spec, 1).unwrap();
        let flow = f.flow.unwrap();
        assert!(flow.valid_count() > 0);
        for (_, v) in flow.iter_valid() {
            assert!(v[0].abs() < 1e-9 && v[1].abs() < 1e-9, "{v:?}");
        }
    }

    #[test]
    fn lateral_translation_over_a_wall_is_uniform_disparity() {
        let k = Intrinsics::new(50.0, 50.0, 15.5, 11.5, 32, 24).unwrap();
        let z = 10.0;
        let t = 0.4;
        let spec = SceneSpec {
            intrinsics: k,
            frames: 2,
            surfaces: vec![Surface { shape: Shape::Plane { point: [0.0, 0.0, z], normal: [0.0, 0.0, -1.0] }, color: [100, 100, 100], region: 0 }],
            trajectory: Trajectory {
                speed: 0.0,
                yaw_rate: 0.0,
                pitch_amplitude: 0.0,
                roll_amplitude: 0.0,
                lateral_amplitude: 0.0,
                vertical_amplitude: 0.0,
                start: [0.0; 3],
                period: 1.0,
            },
            alpha: 1.0,
            region_scales: vec![1.0],
            max_depth: 100.0,
            noise: NoiseSpec::default(),
            seed: 0,
        };
        // Shift the second camera by hand through the start offset.
        let mut moved = spec.clone();
        moved.trajectory.start = [t, 0.0, 0.0];
        let f0 = render_frame(&spec, 0).unwrap();
        let cam1 = moved.camera_pose(1);
        let cam0 = spec.camera_pose(0);
        let rel = cam1.compose(&cam0.inverse());
        assert_relative_eq!(rel.translation.x, -t);
        // Image content moves left as the camera moves right, so the
        // backward flow points right by f t / z.
        let hit = cast(&moved, &cam1, 10.0, 5.0).unwrap();
        let p_prev = rel.inverse().transform(&(k.ray(10.0, 5.0) * hit.depth));
        let (u, _) = k.project(&p_prev).unwrap();
        assert_relative_eq!(u - 10.0, k.fx * t / z, epsilon = 1e-12);
        assert!(f0.depth.iter_valid().all(|(_, &d)| d == z as f32));
    }

    #[test]
    fn exact_flow_triangulates_to_ground_truth() {
        let spec = small(4);
        let f = render_frame(&spec, 2).unwrap();
        let pose = f.pose.unwrap();
        let flow = f.flow.as_ref().unwrap();
        let k = &spec.intrinsics;
        let mut checked = 0;
        for (i, fl) in flow.iter_valid() {
            let (u, v) = ((i % 64) as f64, (i / 64) as f64);
            let prev = (u + fl[0] as f64, v + fl[1] as f64);
            if let Ok((_, z)) = triangulate_pair(prev, (u, v), &pose, k, 1e-3) {
                let gt = *f.depth.get(i).unwrap() as f64;
                // f32 flow storage bounds the agreement.
                assert!((z - gt).abs() / gt < 1e-3, "pixel {i}: {z} vs {gt}");
                checked += 1;
            }
        }
        assert!(checked > 500);
    }

    #[test]
    fn relative_depth_carries_alpha_and_regions() {
        let spec = small(2).with_region_scales(&[1.0, 1.5]);
        let f = render_frame(&spec, 0).unwrap();
        for (i, &d) in f.d_rel.iter_valid() {
            let region = spec.surfaces[f.surface[i] as usize].region;
            let s = f.depth.get(i).unwrap() / d;
            assert_relative_eq!(s as f64, spec.alpha * spec.region_scales[region], max_relative = 1e-6);
        }
    }

    #[test]
    fn moving_blocks_follow_their_own_motion() {
        let mut spec = small(3);
        spec.noise.outlier_fraction = 0.3;
        let f = render_frame(&spec, 1).unwrap();
        let blocks = moving_blocks(&spec, 1);
        assert!(!blocks.is_empty());
        let moving = f.moving.iter().filter(|&&m| m).count() as f64 / f.moving.len() as f64;
        assert!((moving - 0.3).abs() < 0.1, "{moving}");
        let ((u0, v0), pose) = blocks[0];
        let i = v0 * 64 + u0;
        let k = &spec.intrinsics;
        let p = k.ray(u0 as f64, v0 as f64) * *f.depth.get(i).unwrap() as f64;
        let (up, vp) = k.project(&pose.inverse().transform(&p)).unwrap();
        let fl = f.flow.unwrap();
        let got = fl.get(i).unwrap();
        assert_relative_eq!(got[0] as f64, up - u0 as f64, epsilon = 1e-4);
        assert_relative_eq!(got[1] as f64, vp - v0 as f64, epsilon = 1e-4);
        assert_eq!(moving_blocks(&spec, 1), blocks);
    }

    #[test]
    fn perturbation_is_seeded() {
        let spec = small(2);
        let flow = render_frame(&spec, 1).unwrap().flow.unwrap();
        let a = perturb_flow(&flow, 0.5, &mut ChaCha8Rng::seed_from_u64(1));
        let b = perturb_flow(&flow, 0.5, &mut ChaCha8Rng::seed_from_u64(1));
        assert_eq!(a, b);
        assert_eq!(perturb_flow(&flow, 0.0, &mut ChaCha8Rng::seed_from_u64(1)), flow);
        assert_eq!(perturb_baseline(1.3, 0.0, &mut ChaCha8Rng::seed_from_u64(1)), 1.3);
    }

    #[test]
    fn flow_noise_has_requested_spread() {
        let zero = FlowField::filled(250, 200, [0.0, 0.0]);
        let noisy = perturb_flow(&zero, 0.5, &mut ChaCha8Rng::seed_from_u64(9));
        let samples: Vec<f64> = noisy.iter_valid().flat_map(|(_, f)| [f[0] as f64, f[1] as f64]).collect();
        assert!(samples.len() >= 100_000);
        let mean = samples.iter().sum::<f64>() / samples.len() as f64;
        let var = samples.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / (samples.len() - 1) as f64;
        assert!((var.sqrt() - 0.5).abs() < 0.01, "std {}", var.sqrt());
    }

    #[test]
    fn height_field_renders() {
        let spec = small(2).with_height_field(0.2, 5.0);
        let f = render_frame(&spec, 1).unwrap();
        let ground = f.surface.iter().filter(|&&s| s == 0).count();
        assert!(ground > 200);
        for (i, &z) in f.depth.iter_valid() {
            assert!(z > 0.0 && (z as f64) < spec.max_depth, "pixel {i}");
        }
    }

    #[test]
    fn spec_roundtrips_through_json() {
        let spec = small(5).with_height_field(0.1, 4.0);
        let s = serde_json::to_string(&spec).unwrap();
        let back: SceneSpec = serde_json::from_str(&s).unwrap();
        assert_eq!(back, spec);
    }
}
