//! Graph-based superpixels over LAB color and relative depth, and
//! segment-wise median scale consolidation.

use std::sync::OnceLock;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::geometry::{GeometryError, PixelGridMap, RelativeDepthMap, ScalarMap};
use crate::stats;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SegmentationConfig {
    pub k: f32,
    pub min_size: usize,
    pub sigma: f32,
    /// Weight of the depth channel, normalized to the range of L.
    pub depth_weight: f32,
    pub min_evidence: usize,
    /// Evidence threshold as a fraction of the segment area.
    pub evidence_fraction: f64,
    /// Largest accepted MAD / median ratio.
    pub max_fitting_error: f64,
}

impl Default for SegmentationConfig {
    fn default() -> Self {
        Self {
            k: 300.0,
            min_size: 64,
            sigma: 0.8,
            depth_weight: 1.0,
            min_evidence: 50,
            evidence_fraction: 0.01,
            max_fitting_error: 0.2,
        }
    }
}

/// Interleaved 8-bit RGB image, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RgbImage {
    pub width: usize,
    pub height: usize,
    pub data: Vec<[u8; 3]>,
}

impl RgbImage {
    pub fn new(width: usize, height: usize, data: Vec<[u8; 3]>) -> Result<Self, GeometryError> {
        if data.len() != width * height {
            return Err(GeometryError::SizeMismatch { expected: (width, height), actual: (data.len(), 1) });
        }
        Ok(Self { width, height, data })
    }

    pub fn filled(width: usize, height: usize, rgb: [u8; 3]) -> Self {
        Self { width, height, data: vec![rgb; width * height] }
    }
}

/// Per-pixel CIE L*a*b* values.
#[derive(Debug, Clone, PartialEq)]
pub struct LabImage {
    pub width: usize,
    pub height: usize,
    pub data: Vec<[f32; 3]>,
}

impl LabImage {
    /// Single-channel input (e.g. thermal) placed on the neutral axis.
    /// Values are expected in `[0, 100]`.
    pub fn from_intensity(width: usize, height: usize, values: &[f32]) -> Self {
        Self { width, height, data: values.iter().map(|&l| [l, 0.0, 0.0]).collect() }
    }
}

const D65: [f64; 3] = [0.950_47, 1.0, 1.088_83];
const SRGB_TO_XYZ: [[f64; 3]; 3] = [
    [0.412_456_4, 0.357_576_1, 0.180_437_5],
    [0.212_672_9, 0.715_152_2, 0.072_175_0],
    [0.019_333_9, 0.119_192_0, 0.950_304_1],
];

fn srgb_to_linear(c: f64) -> f64 {
    if c <= 0.040_45 {
        c / 12.92
    } else {
        ((c + 0.055) / 1.055).powf(2.4)
    }
}

fn lab_f(t: f64) -> f64 {
    const EPS: f64 = 216.0 / 24389.0;
    const KAPPA: f64 = 24389.0 / 27.0;
    if t > EPS {
        t.cbrt()
    } else {
        (KAPPA * t + 16.0) / 116.0
    }
}

/// sRGB components in `[0, 1]` to L*a*b* under D65.
pub fn srgb_to_lab(rgb: [f64; 3]) -> [f64; 3] {
    let lin = rgb.map(srgb_to_linear);
    linear_to_lab(lin)
}

fn linear_to_lab(lin: [f64; 3]) -> [f64; 3] {
    let m = &SRGB_TO_XYZ;
    let xyz = [0, 1, 2].map(|r| m[r][0] * lin[0] + m[r][1] * lin[1] + m[r][2] * lin[2]);
    let [fx, fy, fz] = [0, 1, 2].map(|i| lab_f(xyz[i] / D65[i]));
    [116.0 * fy - 16.0, 500.0 * (fx - fy), 200.0 * (fy - fz)]
}

fn linear_lut() -> &'static [f32; 256] {
    static LUT: OnceLock<[f32; 256]> = OnceLock::new();
    LUT.get_or_init(|| std::array::from_fn(|i| srgb_to_linear(i as f64 / 255.0) as f32))
}

/// Single-precision `linear_to_lab` for whole images.
#[inline]
fn linear_to_lab_f32(lin: [f32; 3]) -> [f32; 3] {
    const EPS: f32 = 216.0 / 24389.0;
    const KAPPA: f32 = 24389.0 / 27.0;
    let f = |t: f32| if t > EPS { t.cbrt() } else { (KAPPA * t + 16.0) / 116.0 };
    let m = &SRGB_TO_XYZ;
    let [fx, fy, fz] = [0, 1, 2].map(|r| {
        let xyz = m[r][0] as f32 * lin[0] + m[r][1] as f32 * lin[1] + m[r][2] as f32 * lin[2];
        f(xyz / D65[r] as f32)
    });
    [116.0 * fy - 16.0, 500.0 * (fx - fy), 200.0 * (fy - fz)]
}

/// Converts an image to L*a*b*, in single precision. Runs of equal colors
/// are converted once.
pub fn lab_convert(image: &RgbImage) -> LabImage {
    let lut = linear_lut();
    let mut data = vec![[0.0f32; 3]; image.data.len()];
    data.par_chunks_mut(4096).zip(image.data.par_chunks(4096)).for_each(|(out, px)| {
        let mut last: Option<([u8; 3], [f32; 3])> = None;
        for (o, &p) in out.iter_mut().zip(px) {
            *o = match last {
                Some((c, lab)) if c == p => lab,
                _ => {
                    let lab = linear_to_lab_f32(p.map(|c| lut[c as usize]));
                    last = Some((p, lab));
                    lab
                }
            };
        }
    });
    LabImage { width: image.width, height: image.height, data }
}

pub const FEATURE_DIM: usize = 4;

/// Per-pixel feature vectors `(L, a, b, w_d * d_norm)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Features {
    pub width: usize,
    pub height: usize,
    pub data: Vec<[f32; FEATURE_DIM]>,
}

/// Stacks LAB with relative depth min-max normalized to `[0, 100]`.
/// Pixels without depth get 0 in the depth channel.
pub fn build_features(lab: &LabImage, d_rel: &RelativeDepthMap, depth_weight: f32) -> Result<Features, GeometryError> {
    d_rel.check_dims(lab.width, lab.height)?;
    let (lo, hi) = d_rel
        .iter_valid()
        .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), (_, &d)| (lo.min(d), hi.max(d)));
    let span = if hi > lo { hi - lo } else { 1.0 };
    let data = lab
        .data
        .iter()
        .enumerate()
        .map(|(i, &[l, a, b])| {
            let d = d_rel.get(i).map_or(0.0, |&d| (d - lo) / span * 100.0);
            [l, a, b, depth_weight * d]
        })
        .collect();
    Ok(Features { width: lab.width, height: lab.height, data })
}

/// Normalized one-sided Gaussian kernel of length `ceil(4 sigma) + 1`.
fn gaussian_kernel(sigma: f32) -> Vec<f32> {
    let sigma = sigma.max(0.01);
    let len = (sigma * 4.0).ceil() as usize + 1;
    let mut mask: Vec<f32> = (0..len).map(|i| (-0.5 * (i as f32 / sigma).powi(2)).exp()).collect();
    let sum = 2.0 * mask.iter().sum::<f32>() - mask[0];
    mask.iter_mut().for_each(|m| *m /= sum);
    mask
}

/// Separable Gaussian smoothing with clamped borders, rows then columns.
/// `sigma <= 0` returns the input unchanged.
pub fn smooth_features(features: &Features, sigma: f32) -> Features {
    if sigma <= 0.0 {
        return features.clone();
    }
    let (w, h) = (features.width, features.height);
    if w == 0 || h == 0 {
        return features.clone();
    }
    let mask = gaussian_kernel(sigma);
    let r = mask.len() - 1;
    // Taps from -r to r; every output sums them in this order.
    let taps: Vec<(isize, f32)> = (-(r as isize)..=r as isize).map(|j| (j, mask[j.unsigned_abs()])).collect();

    let mut tmp = vec![[0.0f32; FEATURE_DIM]; w * h];
    tmp.par_chunks_mut(w).enumerate().for_each(|(y, row)| {
        let src = &features.data[y * w..(y + 1) * w];
        let padded: Vec<[f32; FEATURE_DIM]> = (0..w + 2 * r).map(|p| src[p.saturating_sub(r).min(w - 1)]).collect();
        for (x, out) in row.iter_mut().enumerate() {
            let mut acc = [0.0f32; FEATURE_DIM];
            for &(j, m) in &taps {
                let v = &padded[(x as isize + r as isize + j) as usize];
                for c in 0..FEATURE_DIM {
                    acc[c] += m * v[c];
                }
            }
            *out = acc;
        }
    });
    let mut data = vec![[0.0f32; FEATURE_DIM]; w * h];
    data.par_chunks_mut(w).enumerate().for_each(|(y, row)| {
        for &(j, m) in &taps {
            let sy = (y as isize + j).clamp(0, h as isize - 1) as usize;
            let src = &tmp[sy * w..(sy + 1) * w];
            for (out, v) in row.iter_mut().zip(src) {
                for c in 0..FEATURE_DIM {
                    out[c] += m * v[c];
                }
            }
        }
    });
    Features { width: w, height: h, data }
}

/// Euclidean feature distance, accumulated in channel order.
#[inline]
pub fn feature_distance(a: &[f32; FEATURE_DIM], b: &[f32; FEATURE_DIM]) -> f32 {
    let mut s = 0.0f32;
    for c in 0..FEATURE_DIM {
        let d = a[c] - b[c];
        s += d * d;
    }
    s.sqrt()
}

/// Edge list of the 8-connected grid. For each pixel in raster order the
/// edges go to the right, down, down-right and down-left neighbors; the
/// position in this list is the edge index used to break weight ties.
pub fn grid_edges(features: &Features) -> Vec<(u32, u32, f32)> {
    let (w, h) = (features.width, features.height);
    let f = &features.data;
    let mut edges = Vec::with_capacity(4 * w * h);
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            let mut push = |j: usize| edges.push((i as u32, j as u32, feature_distance(&f[i], &f[j])));
            if x + 1 < w {
                push(i + 1);
            }
            if y + 1 < h {
                push(i + w);
                if x + 1 < w {
                    push(i + w + 1);
                }
                if x > 0 {
                    push(i + w - 1);
                }
            }
        }
    }
    edges
}

/// Neighbor offsets in edge order: right, down, down-right, down-left.
const DIRECTIONS: [(isize, isize); 4] = [(1, 0), (0, 1), (1, 1), (-1, 1)];

/// Sortable edge keys `weight_bits << 32 | (4 * pixel + direction)`.
///
/// Edge indices of `grid_edges` grow with `4 * pixel + direction`, so
/// sorting these keys orders by weight with ties by edge index. Bit
/// patterns of non-negative floats sort like the floats.
fn edge_keys(features: &Features) -> Vec<u64> {
    let (w, h) = (features.width, features.height);
    let f = &features.data;
    let mut rows: Vec<Vec<u64>> = (0..h)
        .into_par_iter()
        .map(|y| {
            let mut out = Vec::with_capacity(4 * w);
            for x in 0..w {
                let i = y * w + x;
                for (d, &(dx, dy)) in DIRECTIONS.iter().enumerate() {
                    let (nx, ny) = (x as isize + dx, y + dy as usize);
                    if nx < 0 || nx >= w as isize || ny >= h {
                        continue;
                    }
                    let j = ny * w + nx as usize;
                    let wt = feature_distance(&f[i], &f[j]);
                    out.push((wt.to_bits() as u64) << 32 | (4 * i + d) as u64);
                }
            }
            out
        })
        .collect();
    let mut keys = Vec::with_capacity(rows.iter().map(Vec::len).sum());
    for r in rows.iter_mut() {
        keys.append(r);
    }
    keys
}

/// Keys are unique, so the unstable parallel sort is deterministic.
fn sort_edge_keys(mut keys: Vec<u64>) -> Vec<u64> {
    keys.par_sort_unstable();
    keys
}

#[inline]
fn edge_endpoints(key: u64, w: usize) -> (u32, u32, f32) {
    let e = key as u32 as usize;
    let (i, d) = (e / 4, e % 4);
    let (dx, dy) = DIRECTIONS[d];
    let j = (i as isize + dx + dy * w as isize) as usize;
    (i as u32, j as u32, f32::from_bits((key >> 32) as u32))
}

#[derive(Clone, Copy)]
struct Node {
    parent: u32,
    size: u32,
    /// Merge threshold `Int(C) + k / |C|` of the component rooted here.
    threshold: f32,
}

/// Union by size with path halving. The partition does not depend on
/// which root survives a join.
struct DisjointSet {
    nodes: Vec<Node>,
}

impl DisjointSet {
    fn new(n: usize, threshold: f32) -> Self {
        Self { nodes: (0..n as u32).map(|i| Node { parent: i, size: 1, threshold }).collect() }
    }

    #[inline]
    fn find(&mut self, mut x: u32) -> u32 {
        loop {
            let p = self.nodes[x as usize].parent;
            if p == x {
                return x;
            }
            let gp = self.nodes[p as usize].parent;
            self.nodes[x as usize].parent = gp;
            x = gp;
        }
    }

    #[inline]
    fn join(&mut self, a: u32, b: u32) -> u32 {
        let (a, b) = if self.nodes[a as usize].size < self.nodes[b as usize].size { (b, a) } else { (a, b) };
        self.nodes[b as usize].parent = a;
        self.nodes[a as usize].size += self.nodes[b as usize].size;
        a
    }

    #[inline]
    fn size(&self, root: u32) -> usize {
        self.nodes[root as usize].size as usize
    }

    #[inline]
    fn is_root(&self, x: u32) -> bool {
        self.nodes[x as usize].parent == x
    }
}

/// Superpixel labels with contiguous ids.
#[derive(Debug, Clone, PartialEq)]
pub struct SegmentLabels {
    pub labels: PixelGridMap<u32>,
    pub count: usize,
    pub sizes: Vec<usize>,
}

impl SegmentLabels {
    /// Labels numbered by first appearance in raster order.
    pub fn from_raw(width: usize, height: usize, raw: &[u32]) -> Self {
        const UNSEEN: u32 = u32::MAX;
        let max = raw.iter().copied().max().unwrap_or(0) as usize;
        let mut dense = Vec::new();
        let mut sparse = std::collections::HashMap::new();
        let use_dense = max < 4 * raw.len().max(1);
        if use_dense {
            dense = vec![UNSEEN; max + 1];
        }
        let mut sizes: Vec<usize> = Vec::new();
        let mut values = Vec::with_capacity(raw.len());
        for &r in raw {
            let next = sizes.len() as u32;
            let l = if use_dense {
                let slot = &mut dense[r as usize];
                if *slot == UNSEEN {
                    *slot = next;
                }
                *slot
            } else {
                *sparse.entry(r).or_insert(next)
            };
            if l == next {
                sizes.push(0);
            }
            sizes[l as usize] += 1;
            values.push(l);
        }
        let n = values.len();
        let labels = PixelGridMap::from_parts(width, height, values, vec![true; n]).expect("one raw label per pixel");
        Self { labels, count: sizes.len(), sizes }
    }

    pub fn label(&self, idx: usize) -> u32 {
        self.labels.raw_values()[idx]
    }
}

/// Graph-based segmentation of pre-smoothed features.
///
/// Edges are processed in ascending weight (ties by edge index); two
/// components merge when the edge weight is at most both
/// `Int(C) + k / |C|`. A second pass absorbs components smaller than
/// `min_size` along the same edge order. Components that are only
/// diagonally connected are finally split so every label is 4-connected.
pub fn segment_smoothed(features: &Features, k: f32, min_size: usize) -> SegmentLabels {
    let (w, h) = (features.width, features.height);
    let n = w * h;
    let keys = sort_edge_keys(edge_keys(features));

    let mut set = DisjointSet::new(n, k);
    for &key in &keys {
        let (a, b, wt) = edge_endpoints(key, w);
        let (ra, rb) = (set.find(a), set.find(b));
        if ra != rb && wt <= set.nodes[ra as usize].threshold && wt <= set.nodes[rb as usize].threshold {
            let r = set.join(ra, rb);
            set.nodes[r as usize].threshold = wt + k / set.size(r) as f32;
        }
    }
    // Once every component reaches min_size no further join can happen.
    let mut small = (0..n as u32).filter(|&i| set.is_root(i) && set.size(i) < min_size).count();
    for &key in &keys {
        if small == 0 {
            break;
        }
        let (a, b, _) = edge_endpoints(key, w);
        let (ra, rb) = (set.find(a), set.find(b));
        if ra != rb && (set.size(ra) < min_size || set.size(rb) < min_size) {
            small -= (set.size(ra) < min_size) as usize + (set.size(rb) < min_size) as usize;
            let r = set.join(ra, rb);
            small += (set.size(r) < min_size) as usize;
        }
    }

    let roots: Vec<u32> = (0..n as u32).map(|i| set.find(i)).collect();
    let mut split = DisjointSet::new(n, 0.0);
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            if x + 1 < w && roots[i] == roots[i + 1] {
                let (a, b) = (split.find(i as u32), split.find(i as u32 + 1));
                if a != b {
                    split.join(a, b);
                }
            }
            if y + 1 < h && roots[i] == roots[i + w] {
                let (a, b) = (split.find(i as u32), split.find((i + w) as u32));
                if a != b {
                    split.join(a, b);
                }
            }
        }
    }
    let raw: Vec<u32> = (0..n as u32).map(|i| split.find(i)).collect();
    SegmentLabels::from_raw(w, h, &raw)
}

pub fn felzenszwalb_segment(features: &Features, k: f32, min_size: usize, sigma: f32) -> SegmentLabels {
    segment_smoothed(&smooth_features(features, sigma), k, min_size)
}

/// Per-segment consolidation result.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SegmentScale {
    pub median: f64,
    pub evidence: usize,
    /// MAD / median of the posterior scale over the segment.
    pub fitting_error: f64,
    pub accepted: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConsolidationReport {
    pub segments: Vec<SegmentScale>,
    /// Median posterior scale over all valid pixels, or the carried value.
    pub global: Option<f64>,
}

impl ConsolidationReport {
    pub fn accepted(&self) -> usize {
        self.segments.iter().filter(|s| s.accepted).count()
    }
}

/// Replaces the posterior scale by one median per accepted segment and by
/// the global median elsewhere. With no valid posterior anywhere the
/// previous global scale is used.
pub fn consolidate_scales(
    labels: &SegmentLabels,
    s_post: &ScalarMap,
    cfg: &SegmentationConfig,
    previous_global: Option<f64>,
) -> Result<(ScalarMap, ConsolidationReport), GeometryError> {
    let (w, h) = labels.labels.dims();
    s_post.check_dims(w, h)?;

    // Bucket valid scales by label.
    let mut offsets = vec![0usize; labels.count + 1];
    for (i, _) in s_post.iter_valid() {
        offsets[labels.label(i) as usize + 1] += 1;
    }
    for l in 0..labels.count {
        offsets[l + 1] += offsets[l];
    }
    let mut cursor = offsets.clone();
    let mut values = vec![0.0f64; offsets[labels.count]];
    for (i, &s) in s_post.iter_valid() {
        let l = labels.label(i) as usize;
        values[cursor[l]] = s as f64;
        cursor[l] += 1;
    }

    let global = stats::median(&values).or(previous_global);

    let segments: Vec<SegmentScale> = (0..labels.count)
        .into_par_iter()
        .map(|l| {
            let vals = &values[offsets[l]..offsets[l + 1]];
            let evidence = vals.len();
            let Some((median, mad)) = stats::median_mad(vals) else {
                return SegmentScale { median: f64::NAN, evidence, fitting_error: f64::INFINITY, accepted: false };
            };
            let fitting_error = if median > 0.0 { mad / median } else { f64::INFINITY };
            let needed = (cfg.min_evidence as f64).max(cfg.evidence_fraction * labels.sizes[l] as f64);
            let accepted = evidence as f64 >= needed && fitting_error <= cfg.max_fitting_error;
            SegmentScale { median, evidence, fitting_error, accepted }
        })
        .collect();

    let mut s_seg = ScalarMap::invalid(w, h, 0.0);
    for i in 0..w * h {
        let seg = &segments[labels.label(i) as usize];
        let s = if seg.accepted { Some(seg.median) } else { global };
        if let Some(s) = s {
            s_seg.set(i, s as f32);
        }
    }
    Ok((s_seg, ConsolidationReport { segments, global }))
}

/// `Z = S_seg * d_rel`; invalid where either input is.
pub fn final_depth(s_seg: &ScalarMap, d_rel: &RelativeDepthMap) -> Result<ScalarMap, GeometryError> {
    let (w, h) = d_rel.dims();
    s_seg.check_dims(w, h)?;
    let mut z = ScalarMap::invalid(w, h, 0.0);
    for (i, &d) in d_rel.iter_valid() {
        if let Some(&s) = s_seg.get(i) {
            z.set(i, s * d);
        }
    }
    Ok(z)
}
