//! Camera model, raster containers and the rigid motion field.
//!
//! Conventions used throughout the crate:
//!
//! * pixel `(u, v)` addresses column `u`, row `v`; integer coordinates are
//!   pixel centres;
//! * camera axes are x right, y down, z forward;
//! * a [`Pose`] maps points of the previous frame into the current one,
//!   `p_cur = R * p_prev + t`;
//! * flow is *backward*: it lives on the current frame's grid and points to
//!   the matching location in the previous frame, `x_prev = x_cur + f(x_cur)`.

use nalgebra::{Matrix2x3, Matrix3, Rotation3, Unit, Vector2, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum GeometryError {
    #[error("invalid intrinsics: {0}")]
    InvalidIntrinsics(String),
    #[error("depth {0:e} is below the degeneracy floor")]
    DegenerateDepth(f64),
    #[error("raster size mismatch: expected {expected:?}, got {actual:?}")]
    SizeMismatch {
        expected: (usize, usize),
        actual: (usize, usize),
    },
    #[error("rotation is not orthonormal")]
    InvalidRotation,
}

/// Smallest product `scale * relative_depth` accepted by the motion field.
pub const DEPTH_FLOOR: f64 = 1e-9;

/// Floor applied to network inverse depth before inversion.
pub const INVERSE_DEPTH_FLOOR: f32 = 1e-6;

/// Pinhole intrinsics in pixels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

impl Intrinsics {
    pub fn new(
        fx: f64,
        fy: f64,
        cx: f64,
        cy: f64,
        width: usize,
        height: usize,
    ) -> Result<Self, GeometryError> {
        let k = Self {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
        };
        k.validate()?;
        Ok(k)
    }

    pub fn validate(&self) -> Result<(), GeometryError> {
        if !(self.fx > 0.0 && self.fy > 0.0 && self.fx.is_finite() && self.fy.is_finite()) {
            return Err(GeometryError::InvalidIntrinsics(format!(
                "focal lengths must be positive, got fx={} fy={}",
                self.fx, self.fy
            )));
        }
        if !(0.0..self.width as f64).contains(&self.cx) || !(0.0..self.height as f64).contains(&self.cy)
        {
            return Err(GeometryError::InvalidIntrinsics(format!(
                "principal point ({}, {}) outside {}x{} image",
                self.cx, self.cy, self.width, self.height
            )));
        }
        Ok(())
    }

    #[inline]
    pub fn normalize(&self, u: f64, v: f64) -> (f64, f64) {
        ((u - self.cx) / self.fx, (v - self.cy) / self.fy)
    }

    #[inline]
    pub fn denormalize(&self, x: f64, y: f64) -> (f64, f64) {
        (x * self.fx + self.cx, y * self.fy + self.cy)
    }

    /// Homogeneous normalized ray `K^-1 [u, v, 1]^T`.
    #[inline]
    pub fn ray(&self, u: f64, v: f64) -> Vector3<f64> {
        let (x, y) = self.normalize(u, v);
        Vector3::new(x, y, 1.0)
    }

    /// Projects a camera-frame point to pixel coordinates. `None` behind the camera.
    #[inline]
    pub fn project(&self, p: &Vector3<f64>) -> Option<(f64, f64)> {
        if p.z <= 0.0 {
            return None;
        }
        Some(self.denormalize(p.x / p.z, p.y / p.z))
    }

    pub fn matrix(&self) -> Matrix3<f64> {
        Matrix3::new(self.fx, 0.0, self.cx, 0.0, self.fy, self.cy, 0.0, 0.0, 1.0)
    }

    pub fn inverse_matrix(&self) -> Matrix3<f64> {
        Matrix3::new(
            1.0 / self.fx,
            0.0,
            -self.cx / self.fx,
            0.0,
            1.0 / self.fy,
            -self.cy / self.fy,
            0.0,
            0.0,
            1.0,
        )
    }

    pub fn pixel_count(&self) -> usize {
        self.width * self.height
    }

    /// Same camera at `factor` times the resolution.
    pub fn scaled(&self, factor: f64) -> Self {
        Self {
            fx: self.fx * factor,
            fy: self.fy * factor,
            cx: self.cx * factor,
            cy: self.cy * factor,
            width: (self.width as f64 * factor).round() as usize,
            height: (self.height as f64 * factor).round() as usize,
        }
    }
}

/// Pixel-center normalized coordinate, `K^-1 x`.
#[inline]
pub fn normalize_pixel(u: f64, v: f64, k: &Intrinsics) -> (f64, f64) {
    k.normalize(u, v)
}

/// Row-major raster with a per-pixel validity mask.
#[derive(Debug, Clone, PartialEq)]
pub struct PixelGridMap<T> {
    width: usize,
    height: usize,
    values: Vec<T>,
    valid: Vec<bool>,
}

impl<T: Clone> PixelGridMap<T> {
    /// A map of `fill` values, all pixels invalid.
    pub fn invalid(width: usize, height: usize, fill: T) -> Self {
        Self {
            width,
            height,
            values: vec![fill; width * height],
            valid: vec![false; width * height],
        }
    }

    /// A map of `fill` values, all pixels valid.
    pub fn filled(width: usize, height: usize, fill: T) -> Self {
        Self {
            width,
            height,
            values: vec![fill; width * height],
            valid: vec![true; width * height],
        }
    }
}

impl<T> PixelGridMap<T> {
    pub fn from_parts(
        width: usize,
        height: usize,
        values: Vec<T>,
        valid: Vec<bool>,
    ) -> Result<Self, GeometryError> {
        let n = width * height;
        if values.len() != n || valid.len() != n {
            return Err(GeometryError::SizeMismatch {
                expected: (width, height),
                actual: (values.len(), valid.len()),
            });
        }
        Ok(Self {
            width,
            height,
            values,
            valid,
        })
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.values.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    #[inline]
    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    #[inline]
    pub fn index(&self, u: usize, v: usize) -> usize {
        v * self.width + u
    }

    #[inline]
    pub fn coords(&self, idx: usize) -> (usize, usize) {
        (idx % self.width, idx / self.width)
    }

    #[inline]
    pub fn is_valid(&self, idx: usize) -> bool {
        self.valid[idx]
    }

    /// Value at `idx` if the pixel is valid.
    #[inline]
    pub fn get(&self, idx: usize) -> Option<&T> {
        if self.valid[idx] {
            Some(&self.values[idx])
        } else {
            None
        }
    }

    #[inline]
    pub fn at(&self, u: usize, v: usize) -> Option<&T> {
        self.get(self.index(u, v))
    }

    #[inline]
    pub fn set(&mut self, idx: usize, value: T) {
        self.values[idx] = value;
        self.valid[idx] = true;
    }

    #[inline]
    pub fn invalidate(&mut self, idx: usize) {
        self.valid[idx] = false;
    }

    /// Raw storage, including values behind invalid pixels.
    pub fn raw_values(&self) -> &[T] {
        &self.values
    }

    pub fn validity(&self) -> &[bool] {
        &self.valid
    }

    pub fn valid_count(&self) -> usize {
        self.valid.iter().filter(|&&v| v).count()
    }

    pub fn iter_valid(&self) -> impl Iterator<Item = (usize, &T)> + '_ {
        self.values
            .iter()
            .zip(&self.valid)
            .enumerate()
            .filter_map(|(i, (x, &ok))| ok.then_some((i, x)))
    }

    pub fn into_parts(self) -> (usize, usize, Vec<T>, Vec<bool>) {
        (self.width, self.height, self.values, self.valid)
    }

    pub fn map<U, F: Fn(&T) -> U>(&self, f: F) -> PixelGridMap<U> {
        PixelGridMap {
            width: self.width,
            height: self.height,
            values: self.values.iter().map(f).collect(),
            valid: self.valid.clone(),
        }
    }

    pub fn check_dims(&self, width: usize, height: usize) -> Result<(), GeometryError> {
        if self.width != width || self.height != height {
            return Err(GeometryError::SizeMismatch {
                expected: (width, height),
                actual: (self.width, self.height),
            });
        }
        Ok(())
    }
}

/// Single-channel `f32` raster (depth, scale, variance, Sampson residual).
pub type ScalarMap = PixelGridMap<f32>;

/// Backward optical flow in pixels.
pub type FlowField = PixelGridMap<[f32; 2]>;

/// Strictly positive, affine-invariant relative depth.
#[derive(Debug, Clone, PartialEq)]
pub struct RelativeDepthMap(ScalarMap);

impl RelativeDepthMap {
    /// Inverts a network inverse-depth raster. Pixels at or below
    /// [`INVERSE_DEPTH_FLOOR`] (sky) and non-finite pixels are masked.
    pub fn from_inverse_depth(inv: &ScalarMap) -> Self {
        let (w, h) = inv.dims();
        let mut out = ScalarMap::invalid(w, h, 0.0);
        for (i, &d) in inv.iter_valid() {
            if d.is_finite() && d > INVERSE_DEPTH_FLOOR {
                out.set(i, 1.0 / d.max(INVERSE_DEPTH_FLOOR));
            }
        }
        Self(out)
    }

    /// Wraps an existing depth raster, masking non-positive and non-finite entries.
    pub fn from_depth(depth: ScalarMap) -> Self {
        let mut depth = depth;
        for i in 0..depth.len() {
            if depth.is_valid(i) {
                let d = depth.raw_values()[i];
                if !(d.is_finite() && d > 0.0) {
                    depth.invalidate(i);
                }
            }
        }
        Self(depth)
    }

    pub fn as_map(&self) -> &ScalarMap {
        &self.0
    }

    pub fn into_map(self) -> ScalarMap {
        self.0
    }
}

impl std::ops::Deref for RelativeDepthMap {
    type Target = ScalarMap;

    fn deref(&self) -> &ScalarMap {
        &self.0
    }
}

/// Rigid motion between consecutive frames, `p_cur = rotation * p_prev + translation`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose {
    pub rotation: Rotation3<f64>,
    /// Metric translation (meters).
    pub translation: Vector3<f64>,
}

impl Pose {
    pub fn identity() -> Self {
        Self {
            rotation: Rotation3::identity(),
            translation: Vector3::zeros(),
        }
    }

    pub fn new(rotation: Rotation3<f64>, translation: Vector3<f64>) -> Self {
        Self {
            rotation,
            translation,
        }
    }

    /// `T = b * T_hat`.
    pub fn from_direction(rotation: Rotation3<f64>, direction: Unit<Vector3<f64>>, baseline: f64) -> Self {
        Self {
            rotation,
            translation: direction.into_inner() * baseline,
        }
    }

    /// Builds a pose from a raw matrix, rejecting non-rotations.
    pub fn from_matrix(r: Matrix3<f64>, translation: Vector3<f64>) -> Result<Self, GeometryError> {
        let ortho = (r.transpose() * r - Matrix3::identity()).abs().max();
        if ortho > 1e-9 || (r.determinant() - 1.0).abs() > 1e-9 {
            return Err(GeometryError::InvalidRotation);
        }
        Ok(Self {
            rotation: Rotation3::from_matrix_unchecked(r),
            translation,
        })
    }

    pub fn baseline(&self) -> f64 {
        self.translation.norm()
    }

    pub fn direction(&self) -> Option<Unit<Vector3<f64>>> {
        Unit::try_new(self.translation, 1e-300)
    }

    #[inline]
    pub fn transform(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    pub fn inverse(&self) -> Self {
        let r = self.rotation.inverse();
        Self {
            rotation: r,
            translation: -(r * self.translation),
        }
    }

    /// `self` after `first`: maps frame a -> c given `first`: a -> b and `self`: b -> c.
    pub fn compose(&self, first: &Pose) -> Self {
        Self {
            rotation: self.rotation * first.rotation,
            translation: self.rotation * first.translation + self.translation,
        }
    }
}

/// The `A(x, y)` and `B(x, y)` blocks of the instantaneous motion field.
#[inline]
pub fn motion_field_matrices(x: f64, y: f64) -> (Matrix2x3<f64>, Matrix2x3<f64>) {
    let a = Matrix2x3::new(-1.0, 0.0, x, 0.0, -1.0, y);
    let b = Matrix2x3::new(x * y, -(1.0 + x * x), y, 1.0 + y * y, -x * y, -x);
    (a, b)
}

/// First-order image motion `B * omega + A * t / (scale * depth)` in normalized units.
pub fn predict_motion_field(
    x: f64,
    y: f64,
    depth: f64,
    scale: f64,
    omega: &Vector3<f64>,
    translation: &Vector3<f64>,
) -> Result<Vector2<f64>, GeometryError> {
    let z = scale * depth;
    if !(z > DEPTH_FLOOR) {
        return Err(GeometryError::DegenerateDepth(z));
    }
    let (a, b) = motion_field_matrices(x, y);
    Ok(b * omega + a * translation / z)
}

/// Exact backward displacement of a static point under a rigid motion.
///
/// The point sits at normalized `(x, y)` with depth `depth` in the current
/// frame; `translation` is expressed in the same depth units. Returns the
/// normalized displacement to its projection in the previous frame, or
/// `None` when that point is behind the previous camera.
#[inline]
pub fn rigid_flow(
    x: f64,
    y: f64,
    depth: f64,
    rotation: &Rotation3<f64>,
    translation: &Vector3<f64>,
) -> Option<Vector2<f64>> {
    let p = Vector3::new(x * depth, y * depth, depth);
    let q = rotation.inverse_transform_vector(&(p - translation));
    if q.z <= DEPTH_FLOOR {
        return None;
    }
    Some(Vector2::new(q.x / q.z - x, q.y / q.z - y))
}

/// Skew-symmetric cross-product matrix `[v]x`.
pub fn skew(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// Angle between two rotations, radians.
pub fn rotation_angle_between(a: &Rotation3<f64>, b: &Rotation3<f64>) -> f64 {
    // atan2 of the skew and symmetric parts stays finite and accurate near 0.
    let m = a.matrix().transpose() * b.matrix();
    let s = Vector3::new(m[(2, 1)] - m[(1, 2)], m[(0, 2)] - m[(2, 0)], m[(1, 0)] - m[(0, 1)]).norm() / 2.0;
    let c = (m.trace() - 1.0) / 2.0;
    s.atan2(c)
}

/// Angle between two direction vectors, radians.
pub fn direction_angle_between(a: &Vector3<f64>, b: &Vector3<f64>) -> f64 {
    let c = a.dot(b) / (a.norm() * b.norm());
    c.clamp(-1.0, 1.0).acos()
}
