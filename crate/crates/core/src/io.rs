//! On-disk formats: Middlebury `.flo`, PFM, 16-bit PNG depth, RGB PNG,
//! ASCII PLY point clouds and the TOML sequence manifest.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{FlowField, Intrinsics, Pose, ScalarMap};
use crate::segmentation::{lab_convert, LabImage, RgbImage};

#[derive(Debug, Error)]
pub enum IoError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: bad magic")]
    BadMagic { path: PathBuf },
    #[error("{path}: truncated file")]
    Truncated { path: PathBuf },
    #[error("{path}: raster is {actual:?}, expected {expected:?}")]
    DimensionMismatch { path: PathBuf, expected: (usize, usize), actual: (usize, usize) },
    #[error("{path}: malformed header: {reason}")]
    MalformedHeader { path: PathBuf, reason: String },
    #[error("depth {0} m does not fit a 16-bit PNG")]
    DepthOverflow(f32),
    #[error("{path}: {reason}")]
    Format { path: PathBuf, reason: String },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> IoError + '_ {
    move |source| IoError::Io { path: path.to_path_buf(), source }
}

fn read_all(path: &Path) -> Result<Vec<u8>, IoError> {
    std::fs::read(path).map_err(io_err(path))
}

fn create(path: &Path) -> Result<BufWriter<File>, IoError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    Ok(BufWriter::new(File::create(path).map_err(io_err(path))?))
}

const FLO_MAGIC: f32 = 202021.25;
/// Written for invalid vectors; anything above 1e9 reads back as invalid.
const FLO_UNKNOWN: f32 = 1e10;

pub fn encode_flo(flow: &FlowField) -> Vec<u8> {
    let (w, h) = flow.dims();
    let mut out = Vec::with_capacity(12 + 8 * w * h);
    out.extend_from_slice(&FLO_MAGIC.to_le_bytes());
    out.extend_from_slice(&(w as u32).to_le_bytes());
    out.extend_from_slice(&(h as u32).to_le_bytes());
    for i in 0..w * h {
        let [u, v] = flow.get(i).copied().unwrap_or([FLO_UNKNOWN, FLO_UNKNOWN]);
        out.extend_from_slice(&u.to_le_bytes());
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode_flo(bytes: &[u8], path: &Path) -> Result<FlowField, IoError> {
    let truncated = || IoError::Truncated { path: path.to_path_buf() };
    let word = |i: usize| -> Result<[u8; 4], IoError> {
        bytes.get(4 * i..4 * i + 4).map(|b| b.try_into().unwrap()).ok_or_else(truncated)
    };
    if f32::from_le_bytes(word(0)?) != FLO_MAGIC {
        return Err(IoError::BadMagic { path: path.to_path_buf() });
    }
    let w = u32::from_le_bytes(word(1)?) as usize;
    let h = u32::from_le_bytes(word(2)?) as usize;
    if bytes.len() < 12 + 8 * w * h {
        return Err(truncated());
    }
    let mut flow = FlowField::invalid(w, h, [0.0, 0.0]);
    for i in 0..w * h {
        let u = f32::from_le_bytes(word(3 + 2 * i)?);
        let v = f32::from_le_bytes(word(4 + 2 * i)?);
        if u.abs() <= 1e9 && v.abs() <= 1e9 && u.is_finite() && v.is_finite() {
            flow.set(i, [u, v]);
        }
    }
    Ok(flow)
}

pub fn write_flo(path: &Path, flow: &FlowField) -> Result<(), IoError> {
    create(path)?.write_all(&encode_flo(flow)).map_err(io_err(path))
}

pub fn read_flo(path: &Path) -> Result<FlowField, IoError> {
    decode_flo(&read_all(path)?, path)
}

/// Reads a `.flo` file and checks its size.
pub fn read_flo_sized(path: &Path, width: usize, height: usize) -> Result<FlowField, IoError> {
    let f = read_flo(path)?;
    check_size(path, f.dims(), (width, height))?;
    Ok(f)
}

fn check_size(path: &Path, actual: (usize, usize), expected: (usize, usize)) -> Result<(), IoError> {
    if actual != expected {
        return Err(IoError::DimensionMismatch { path: path.to_path_buf(), expected, actual });
    }
    Ok(())
}

/// Little-endian grayscale PFM, rows bottom to top, NaN for invalid pixels.
pub fn encode_pfm(map: &ScalarMap) -> Vec<u8> {
    let (w, h) = map.dims();
    let mut out = format!("Pf\n{w} {h}\n-1.0\n").into_bytes();
    out.reserve(4 * w * h);
    for y in (0..h).rev() {
        for x in 0..w {
            let v = map.get(y * w + x).copied().unwrap_or(f32::NAN);
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn decode_pfm(bytes: &[u8], path: &Path) -> Result<ScalarMap, IoError> {
    let malformed = |reason: &str| IoError::MalformedHeader { path: path.to_path_buf(), reason: reason.to_string() };
    // Three whitespace-separated header tokens after the magic, then one
    // whitespace byte before the payload.
    let mut pos = 0;
    let mut tokens = Vec::new();
    while tokens.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(malformed("incomplete header"));
        }
        tokens.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| malformed("non-ASCII header"))?);
    }
    if pos >= bytes.len() {
        return Err(IoError::Truncated { path: path.to_path_buf() });
    }
    pos += 1;
    match tokens[0] {
        "Pf" => {}
        "PF" => return Err(malformed("color PFM is not a scalar map")),
        _ => return Err(IoError::BadMagic { path: path.to_path_buf() }),
    }
    let w: usize = tokens[1].parse().map_err(|_| malformed("bad width"))?;
    let h: usize = tokens[2].parse().map_err(|_| malformed("bad height"))?;
    let scale: f32 = tokens[3].parse().map_err(|_| malformed("bad scale"))?;
    if scale == 0.0 || !scale.is_finite() {
        return Err(malformed("zero scale"));
    }
    let little = scale < 0.0;
    let payload = &bytes[pos..];
    if payload.len() < 4 * w * h {
        return Err(IoError::Truncated { path: path.to_path_buf() });
    }
    let mut map = ScalarMap::invalid(w, h, 0.0);
    for (k, chunk) in payload.chunks_exact(4).take(w * h).enumerate() {
        let b: [u8; 4] = chunk.try_into().unwrap();
        let v = if little { f32::from_le_bytes(b) } else { f32::from_be_bytes(b) };
        let (x, row) = (k % w, k / w);
        let i = (h - 1 - row) * w + x;
        if !v.is_nan() {
            map.set(i, v);
        }
    }
    Ok(map)
}

pub fn write_pfm(path: &Path, map: &ScalarMap) -> Result<(), IoError> {
    create(path)?.write_all(&encode_pfm(map)).map_err(io_err(path))
}

pub fn read_pfm(path: &Path) -> Result<ScalarMap, IoError> {
    decode_pfm(&read_all(path)?, path)
}

fn png_err(path: &Path) -> impl FnOnce(png::EncodingError) -> IoError + '_ {
    move |e| IoError::Format { path: path.to_path_buf(), reason: e.to_string() }
}

fn png_decode_err(path: &Path) -> impl FnOnce(png::DecodingError) -> IoError + '_ {
    move |e| IoError::Format { path: path.to_path_buf(), reason: e.to_string() }
}

/// Depth as `round(256 z)` in a 16-bit grayscale PNG; 0 marks invalid pixels.
pub fn write_depth_png16(path: &Path, depth: &ScalarMap) -> Result<(), IoError> {
    let (w, h) = depth.dims();
    let mut data = Vec::with_capacity(2 * w * h);
    for i in 0..w * h {
        let v = match depth.get(i) {
            Some(&z) => {
                let q = (z as f64 * 256.0).round();
                if !(q >= 0.0 && q <= u16::MAX as f64) {
                    return Err(IoError::DepthOverflow(z));
                }
                q as u16
            }
            None => 0,
        };
        data.extend_from_slice(&v.to_be_bytes());
    }
    let mut enc = png::Encoder::new(create(path)?, w as u32, h as u32);
    enc.set_color(png::ColorType::Grayscale);
    enc.set_depth(png::BitDepth::Sixteen);
    let mut writer = enc.write_header().map_err(png_err(path))?;
    writer.write_image_data(&data).map_err(png_err(path))?;
    writer.finish().map_err(png_err(path))
}

struct DecodedPng {
    width: usize,
    height: usize,
    color: png::ColorType,
    depth: png::BitDepth,
    data: Vec<u8>,
}

fn decode_png(path: &Path) -> Result<DecodedPng, IoError> {
    let file = BufReader::new(File::open(path).map_err(io_err(path))?);
    let mut reader = png::Decoder::new(file).read_info().map_err(png_decode_err(path))?;
    let mut data = vec![0; reader.output_buffer_size().unwrap_or(0)];
    let info = reader.next_frame(&mut data).map_err(png_decode_err(path))?;
    data.truncate(info.buffer_size());
    Ok(DecodedPng {
        width: info.width as usize,
        height: info.height as usize,
        color: info.color_type,
        depth: info.bit_depth,
        data,
    })
}

pub fn read_depth_png16(path: &Path) -> Result<ScalarMap, IoError> {
    let img = decode_png(path)?;
    if img.color != png::ColorType::Grayscale || img.depth != png::BitDepth::Sixteen {
        return Err(IoError::Format { path: path.to_path_buf(), reason: "expected 16-bit grayscale".into() });
    }
    let mut map = ScalarMap::invalid(img.width, img.height, 0.0);
    for (i, b) in img.data.chunks_exact(2).enumerate() {
        let v = u16::from_be_bytes([b[0], b[1]]);
        if v > 0 {
            map.set(i, v as f32 / 256.0);
        }
    }
    Ok(map)
}

pub fn write_rgb_png(path: &Path, image: &RgbImage) -> Result<(), IoError> {
    let mut enc = png::Encoder::new(create(path)?, image.width as u32, image.height as u32);
    enc.set_color(png::ColorType::Rgb);
    enc.set_depth(png::BitDepth::Eight);
    let mut writer = enc.write_header().map_err(png_err(path))?;
    writer.write_image_data(image.data.as_flattened()).map_err(png_err(path))?;
    writer.finish().map_err(png_err(path))
}

/// Reads an 8-bit RGB(A) PNG.
pub fn read_rgb_png(path: &Path) -> Result<RgbImage, IoError> {
    let img = decode_png(path)?;
    let stride = match (img.color, img.depth) {
        (png::ColorType::Rgb, png::BitDepth::Eight) => 3,
        (png::ColorType::Rgba, png::BitDepth::Eight) => 4,
        _ => return Err(IoError::Format { path: path.to_path_buf(), reason: "expected 8-bit RGB".into() }),
    };
    let data = img.data.chunks_exact(stride).map(|p| [p[0], p[1], p[2]]).collect();
    Ok(RgbImage { width: img.width, height: img.height, data })
}

/// Reads an image as LAB. Single-channel inputs (8 or 16 bit) are placed
/// on the neutral axis with `L` spanning the full intensity range.
pub fn read_lab_image(path: &Path) -> Result<LabImage, IoError> {
    let img = decode_png(path)?;
    match (img.color, img.depth) {
        (png::ColorType::Grayscale, png::BitDepth::Eight) => {
            let l: Vec<f32> = img.data.iter().map(|&v| v as f32 / 255.0 * 100.0).collect();
            Ok(LabImage::from_intensity(img.width, img.height, &l))
        }
        (png::ColorType::Grayscale, png::BitDepth::Sixteen) => {
            let l: Vec<f32> = img
                .data
                .chunks_exact(2)
                .map(|b| u16::from_be_bytes([b[0], b[1]]) as f32 / 65535.0 * 100.0)
                .collect();
            Ok(LabImage::from_intensity(img.width, img.height, &l))
        }
        _ => Ok(lab_convert(&read_rgb_png(path)?)),
    }
}

/// Colored points `z K^-1 x` mapped to the world by `camera_to_world`.
pub fn pointcloud_points(
    depth: &ScalarMap,
    image: Option<&RgbImage>,
    k: &Intrinsics,
    camera_to_world: &Pose,
) -> Vec<([f64; 3], [u8; 3])> {
    let w = depth.width();
    depth
        .iter_valid()
        .map(|(i, &z)| {
            let p = camera_to_world.transform(&(k.ray((i % w) as f64, (i / w) as f64) * z as f64));
            let c = image.map_or([255, 255, 255], |im| im.data[i]);
            ([p.x, p.y, p.z], c)
        })
        .collect()
}

pub fn write_ply(path: &Path, points: &[([f64; 3], [u8; 3])]) -> Result<(), IoError> {
    let mut f = create(path)?;
    let e = io_err(path);
    let mut body = || -> std::io::Result<()> {
        writeln!(f, "ply\nformat ascii 1.0\nelement vertex {}", points.len())?;
        writeln!(f, "property float x\nproperty float y\nproperty float z")?;
        writeln!(f, "property uchar red\nproperty uchar green\nproperty uchar blue\nend_header")?;
        for ([x, y, z], [r, g, b]) in points {
            writeln!(f, "{x} {y} {z} {r} {g} {b}")?;
        }
        f.flush()
    };
    body().map_err(e)
}

pub fn export_pointcloud(
    path: &Path,
    depth: &ScalarMap,
    image: Option<&RgbImage>,
    k: &Intrinsics,
    camera_to_world: &Pose,
) -> Result<usize, IoError> {
    let pts = pointcloud_points(depth, image, k, camera_to_world);
    write_ply(path, &pts)?;
    Ok(pts.len())
}

/// Reads the vertex positions of an ASCII PLY written by [`write_ply`].
pub fn read_ply_points(path: &Path) -> Result<Vec<[f64; 3]>, IoError> {
    let text = std::fs::read_to_string(path).map_err(io_err(path))?;
    let bad = |r: &str| IoError::Format { path: path.to_path_buf(), reason: r.to_string() };
    let (_, body) = text.split_once("end_header\n").ok_or_else(|| bad("missing end_header"))?;
    body.lines()
        .map(|l| {
            let v: Vec<f64> = l.split_whitespace().take(3).map(|t| t.parse().map_err(|_| bad("bad vertex"))).collect::<Result<_, _>>()?;
            if v.len() != 3 {
                return Err(bad("short vertex"));
            }
            Ok([v[0], v[1], v[2]])
        })
        .collect()
}

/// Relative pose `p_cur = R p_prev + t`, rotation row-major.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PoseRecord {
    pub rotation: [f64; 9],
    pub translation: [f64; 3],
}

impl From<&Pose> for PoseRecord {
    fn from(p: &Pose) -> Self {
        let m = p.rotation.matrix();
        Self {
            rotation: std::array::from_fn(|i| m[(i / 3, i % 3)]),
            translation: [p.translation.x, p.translation.y, p.translation.z],
        }
    }
}

impl PoseRecord {
    pub fn to_pose(&self) -> Result<Pose, crate::geometry::GeometryError> {
        Pose::from_matrix(Matrix3::from_row_slice(&self.rotation), Vector3::from(self.translation))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FrameRecord {
    pub timestamp: f64,
    pub image: PathBuf,
    /// Relative inverse depth from the monocular network.
    pub inverse_depth: PathBuf,
    /// Backward flow to the previous frame.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub flow: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gt_depth: Option<PathBuf>,
    /// Ground-truth pose relative to the previous frame, for evaluation only.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gt_pose: Option<PoseRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OdometryRecord {
    pub timestamp: f64,
    /// Distance travelled since the previous record's frame, meters.
    pub baseline: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SequenceManifest {
    pub intrinsics: Intrinsics,
    pub frames: Vec<FrameRecord>,
    #[serde(default)]
    pub odometry: Vec<OdometryRecord>,
}

pub const MANIFEST_NAME: &str = "sequence.toml";

impl SequenceManifest {
    /// Loads `sequence.toml` from `dir`; relative paths stay relative to `dir`.
    pub fn load(dir: &Path) -> Result<Self, IoError> {
        let path = dir.join(MANIFEST_NAME);
        let text = std::fs::read_to_string(&path).map_err(io_err(&path))?;
        let m: Self = toml::from_str(&text).map_err(|e| IoError::Format { path: path.clone(), reason: e.to_string() })?;
        m.intrinsics
            .validate()
            .map_err(|e| IoError::Format { path: path.clone(), reason: e.to_string() })?;
        Ok(m)
    }

    pub fn save(&self, dir: &Path) -> Result<(), IoError> {
        let path = dir.join(MANIFEST_NAME);
        let text = toml::to_string(self).map_err(|e| IoError::Format { path: path.clone(), reason: e.to_string() })?;
        create(&path)?.write_all(text.as_bytes()).map_err(io_err(&path))
    }

    /// Odometry baseline for the pair ending at frame `k`, with the absolute
    /// timestamp difference of the associated record.
    pub fn baseline_for(&self, k: usize) -> Option<(f64, f64)> {
        let t = self.frames.get(k)?.timestamp;
        self.odometry
            .iter()
            .map(|o| (o.baseline, (o.timestamp - t).abs()))
            .min_by(|a, b| a.1.total_cmp(&b.1))
    }
}

/// Reads every byte of `path`; exposed for directory comparisons.
pub fn read_bytes(path: &Path) -> Result<Vec<u8>, IoError> {
    let mut f = File::open(path).map_err(io_err(path))?;
    let mut v = Vec::new();
    f.read_to_end(&mut v).map_err(io_err(path))?;
    Ok(v)
}
