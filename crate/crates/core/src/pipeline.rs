//! The per-frame loop: motion, triangulation, propagation, fusion,
//! segmentation and final depth, with the recursive state carried across
//! frames.

use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::{DepthFormat, PipelineConfig};
use crate::eval::{depth_metrics, tae_pair};
use crate::fusion::{fuse_frame, observation_state, FusionStats, ScaleState};
use crate::geometry::{FlowField, GeometryError, Intrinsics, Pose, RelativeDepthMap, ScalarMap};
use crate::io::{self, IoError, SequenceManifest};
use crate::motion::{fuse_flow, ransac_motion, recover_scale, stratified_sample, MotionError};
use crate::propagation::warp_posterior;
use crate::segmentation::{
    build_features, consolidate_scales, felzenszwalb_segment, final_depth, lab_convert, LabImage, RgbImage,
};
use crate::stats;
use crate::triangulation::build_observation;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Io(#[from] IoError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error("sequence needs at least 2 frames, got {0}")]
    TooFewFrames(usize),
    #[error("frame {frame}: {source}")]
    Frame { frame: usize, source: GeometryError },
}

#[derive(Debug, Clone)]
pub enum FrameImage {
    Rgb(RgbImage),
    Lab(LabImage),
}

/// Inputs of one frame. Flow and baseline refer to the pair ending here.
#[derive(Debug, Clone)]
pub struct FrameInput {
    pub image: FrameImage,
    pub d_rel: RelativeDepthMap,
    /// Backward flow to the previous frame, pixels.
    pub flow: Option<FlowField>,
    /// Odometry distance since the previous frame, meters.
    pub baseline: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FrameFlag {
    /// First frame; only initializes the state.
    Initialized,
    NoFlow,
    NoBaseline,
    InsufficientSamples,
    RankDeficient,
    NoConsensus,
    ZeroBaseline,
    RotationOnly,
    EmptyObservation,
    /// No observation entered the filter.
    PriorOnly,
}

/// Wall-clock time per stage. Flow and relative depth are external inputs.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct StageTimings {
    pub segmentation_ms: f64,
    pub motion_ms: f64,
    pub scale_ms: f64,
    pub tri_fusion_ms: f64,
}

impl StageTimings {
    pub fn total_ms(&self) -> f64 {
        self.segmentation_ms + self.motion_ms + self.scale_ms + self.tri_fusion_ms
    }
}

#[derive(Debug, Clone)]
pub struct FrameOutput {
    pub index: usize,
    /// Final metric depth `S_seg * d_rel`.
    pub depth: ScalarMap,
    pub scale: ScalarMap,
    /// Estimated metric pose previous -> current.
    pub pose: Option<Pose>,
    pub alpha: Option<f64>,
    pub inlier_ratio: Option<f64>,
    pub median_sampson: Option<f64>,
    pub global_scale: Option<f64>,
    pub tolerance: f64,
    pub fusion: FusionStats,
    pub segments: usize,
    pub accepted_segments: usize,
    pub flags: Vec<FrameFlag>,
    pub timings: StageTimings,
}

impl FrameOutput {
    pub fn is_initialization(&self) -> bool {
        self.flags.contains(&FrameFlag::Initialized)
    }

    pub fn is_prior_only(&self) -> bool {
        self.flags.contains(&FrameFlag::PriorOnly)
    }
}

struct State {
    scale: ScaleState,
    /// Final depth of the previous frame, the quantity warped forward.
    depth: ScalarMap,
    variance: ScalarMap,
}

/// Recursive per-sequence processor.
pub struct Pipeline {
    config: PipelineConfig,
    k: Intrinsics,
    frame: usize,
    state: Option<State>,
    global: Option<f64>,
}

fn ms(d: Duration) -> f64 {
    d.as_secs_f64() * 1e3
}

fn motion_flag(e: &MotionError) -> FrameFlag {
    match e {
        MotionError::InsufficientSamples { .. } => FrameFlag::InsufficientSamples,
        MotionError::RankDeficient { .. } => FrameFlag::RankDeficient,
        MotionError::ZeroBaseline(_) => FrameFlag::ZeroBaseline,
        MotionError::DegenerateTranslation(_) => FrameFlag::RotationOnly,
        MotionError::NoConsensus { .. } | MotionError::Geometry(_) => FrameFlag::NoConsensus,
    }
}

/// RANSAC seed of frame `k`.
pub fn frame_seed(seed: u64, frame: usize) -> u64 {
    seed ^ (frame as u64 + 1).wrapping_mul(0x9e37_79b9_7f4a_7c15)
}

impl Pipeline {
    pub fn new(config: PipelineConfig, k: Intrinsics) -> Result<Self, GeometryError> {
        k.validate()?;
        Ok(Self { config, k, frame: 0, state: None, global: None })
    }

    pub fn config(&self) -> &PipelineConfig {
        &self.config
    }

    pub fn intrinsics(&self) -> &Intrinsics {
        &self.k
    }

    pub fn process(&mut self, input: &FrameInput) -> Result<FrameOutput, PipelineError> {
        let index = self.frame;
        self.frame += 1;
        let (w, h) = (self.k.width, self.k.height);
        let frame_err = |source| PipelineError::Frame { frame: index, source };
        input.d_rel.check_dims(w, h).map_err(frame_err)?;
        if let Some(f) = &input.flow {
            f.check_dims(w, h).map_err(frame_err)?;
        }
        let cfg = &self.config;
        let k = &self.k;
        let mut flags = Vec::new();
        let mut timings = StageTimings::default();

        if index == 0 {
            return Ok(FrameOutput {
                index,
                depth: ScalarMap::invalid(w, h, 0.0),
                scale: ScalarMap::invalid(w, h, 0.0),
                pose: None,
                alpha: None,
                inlier_ratio: None,
                median_sampson: None,
                global_scale: None,
                tolerance: cfg.fusion.tolerance_floor,
                fusion: FusionStats::default(),
                segments: 0,
                accepted_segments: 0,
                flags: vec![FrameFlag::Initialized],
                timings,
            });
        }

        // Motion and scale.
        let t0 = Instant::now();
        let hypothesis = match &input.flow {
            None => {
                flags.push(FrameFlag::NoFlow);
                None
            }
            Some(flow) => stratified_sample(flow, &input.d_rel, k, &cfg.ransac, frame_seed(cfg.seed, index))
                .and_then(|s| ransac_motion(&s, k, &cfg.ransac, frame_seed(cfg.seed, index)))
                .map_err(|e| flags.push(motion_flag(&e)))
                .ok(),
        };
        timings.motion_ms = ms(t0.elapsed());

        let t0 = Instant::now();
        let scale = hypothesis.as_ref().and_then(|h| match input.baseline {
            None => {
                flags.push(FrameFlag::NoBaseline);
                None
            }
            Some(b) => recover_scale(&h.v, b, cfg.ransac.degenerate_translation).map_err(|e| flags.push(motion_flag(&e))).ok(),
        });
        let pose = match (&hypothesis, &scale) {
            (Some(h), Some(s)) => Some(h.pose(s)),
            (Some(h), None) => Some(Pose::new(h.rotation, nalgebra::Vector3::zeros())),
            _ => None,
        };
        let prior = match &self.state {
            Some(st) => Some(warp_posterior(&st.depth, &st.variance, &pose.unwrap_or_else(Pose::identity), k, &input.d_rel).map_err(frame_err)?),
            None => None,
        };
        timings.scale_ms = ms(t0.elapsed());

        // Triangulation and fusion.
        let t0 = Instant::now();
        let observation = match (&hypothesis, &scale, &input.flow, &pose) {
            (Some(h), Some(_), Some(flow), Some(p)) => fuse_flow(flow, &input.d_rel, k, h, &cfg.ransac)
                .ok()
                .and_then(|fused| build_observation(&fused, p, k, &input.d_rel, &cfg.triangulation).ok()),
            _ => None,
        };
        if scale.is_some() && observation.is_none() {
            flags.push(FrameFlag::EmptyObservation);
        }
        if observation.is_none() {
            flags.push(FrameFlag::PriorOnly);
        }
        let previous = self.state.as_ref().map(|s| &s.scale);
        let (posterior, fusion_stats) = if cfg.stages.temporal_fusion {
            fuse_frame(previous, prior.as_ref(), observation.as_ref(), &input.d_rel, k, &cfg.fusion).map_err(frame_err)?
        } else {
            let st = observation_state(observation.as_ref(), &input.d_rel, k, &cfg.fusion, previous.map_or(0, |p| p.frame_index + 1));
            (st, FusionStats::default())
        };
        timings.tri_fusion_ms = ms(t0.elapsed());

        // Segmentation.
        let t0 = Instant::now();
        let labels = if cfg.stages.segment_consolidation {
            let lab = match &input.image {
                FrameImage::Rgb(img) => lab_convert(img),
                FrameImage::Lab(lab) => lab.clone(),
            };
            let features = build_features(&lab, &input.d_rel, cfg.segmentation.depth_weight).map_err(frame_err)?;
            let s = &cfg.segmentation;
            Some(felzenszwalb_segment(&features, s.k, s.min_size, s.sigma))
        } else {
            None
        };
        timings.segmentation_ms = ms(t0.elapsed());

        let t0 = Instant::now();
        let (s_seg, global, segments, accepted) = match &labels {
            Some(labels) => {
                let (s, report) = consolidate_scales(labels, &posterior.scale, &cfg.segmentation, self.global).map_err(frame_err)?;
                (s, report.global, labels.count, report.accepted())
            }
            None => {
                let vals: Vec<f64> = posterior.scale.iter_valid().map(|(_, &s)| s as f64).collect();
                let global = stats::median(&vals).or(self.global);
                let mut s = posterior.scale.clone();
                if let Some(g) = global {
                    for i in 0..s.len() {
                        if !s.is_valid(i) {
                            s.set(i, g as f32);
                        }
                    }
                }
                (s, global, 0, 0)
            }
        };
        let depth = final_depth(&s_seg, &input.d_rel).map_err(frame_err)?;

        // Variance carried with the final depth.
        let mut v_vals: Vec<f64> = posterior.variance.iter_valid().map(|(_, &v)| v as f64).collect();
        let v_fill = stats::median_in_place(&mut v_vals).map(|m| (cfg.fusion.disocclusion_variance_factor * m) as f32);
        let mut variance = ScalarMap::invalid(w, h, 0.0);
        for (i, _) in depth.iter_valid() {
            match (posterior.variance.get(i), v_fill) {
                (Some(&v), _) => variance.set(i, v),
                (None, Some(f)) => variance.set(i, f),
                _ => {}
            }
        }
        let mut carried = depth.clone();
        for i in 0..carried.len() {
            if !variance.is_valid(i) {
                carried.invalidate(i);
            }
        }
        timings.scale_ms += ms(t0.elapsed());

        let tolerance = posterior.tolerance;
        let median_sampson = observation.as_ref().map(|o| o.median_sampson);
        self.global = global;
        self.state = (posterior.scale.valid_count() > 0 && carried.valid_count() > 0).then_some(State {
            scale: posterior,
            depth: carried,
            variance,
        });

        Ok(FrameOutput {
            index,
            depth,
            scale: s_seg,
            pose,
            alpha: scale.map(|s| s.alpha),
            inlier_ratio: hypothesis.as_ref().map(|h| h.inlier_ratio()),
            median_sampson,
            global_scale: global,
            tolerance,
            fusion: fusion_stats,
            segments,
            accepted_segments: accepted,
            flags,
            timings,
        })
    }
}

/// One line of the metrics output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub frame: usize,
    pub abs_rel: Option<f64>,
    pub delta1: Option<f64>,
    /// Bidirectional warp error with the previous output under the ground-truth pose.
    pub tae_pair: Option<f64>,
    pub inlier_ratio: Option<f64>,
    pub alpha: Option<f64>,
    pub median_sampson: Option<f64>,
    pub global_scale: Option<f64>,
    pub gate_rejection_rate: f64,
    pub flags: Vec<FrameFlag>,
}

impl MetricsRecord {
    pub fn new(out: &FrameOutput, gt: Option<&ScalarMap>, tae: Option<f64>) -> Self {
        let m = gt.and_then(|g| depth_metrics(&out.depth, g, Default::default()).ok());
        Self {
            frame: out.index,
            abs_rel: m.map(|m| m.abs_rel),
            delta1: m.map(|m| m.delta1),
            tae_pair: tae,
            inlier_ratio: out.inlier_ratio,
            alpha: out.alpha,
            median_sampson: out.median_sampson,
            global_scale: out.global_scale,
            gate_rejection_rate: out.fusion.gate_rejection_rate(),
            flags: out.flags.clone(),
        }
    }

    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("record serializes")
    }
}

/// A sequence on disk described by its manifest.
pub struct Sequence {
    pub dir: PathBuf,
    pub manifest: SequenceManifest,
}

impl Sequence {
    pub fn open(dir: &Path) -> Result<Self, IoError> {
        Ok(Self { dir: dir.to_path_buf(), manifest: SequenceManifest::load(dir)? })
    }

    pub fn len(&self) -> usize {
        self.manifest.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.manifest.frames.is_empty()
    }

    fn path(&self, p: &Path) -> PathBuf {
        self.dir.join(p)
    }

    fn check(&self, path: &Path, dims: (usize, usize)) -> Result<(), IoError> {
        let k = &self.manifest.intrinsics;
        if dims != (k.width, k.height) {
            return Err(IoError::DimensionMismatch { path: path.to_path_buf(), expected: (k.width, k.height), actual: dims });
        }
        Ok(())
    }

    /// Loads frame `k`. The odometry association residual is logged at debug level.
    pub fn frame(&self, k: usize) -> Result<FrameInput, IoError> {
        let rec = &self.manifest.frames[k];
        let img_path = self.path(&rec.image);
        let image = match io::read_rgb_png(&img_path) {
            Ok(rgb) => FrameImage::Rgb(rgb),
            Err(IoError::Format { .. }) => FrameImage::Lab(io::read_lab_image(&img_path)?),
            Err(e) => return Err(e),
        };
        let dims = match &image {
            FrameImage::Rgb(i) => (i.width, i.height),
            FrameImage::Lab(i) => (i.width, i.height),
        };
        self.check(&img_path, dims)?;
        let inv_path = self.path(&rec.inverse_depth);
        let inv = io::read_pfm(&inv_path)?;
        self.check(&inv_path, inv.dims())?;
        let flow = match &rec.flow {
            Some(p) => {
                let p = self.path(p);
                let f = io::read_flo(&p)?;
                self.check(&p, f.dims())?;
                Some(f)
            }
            None => None,
        };
        let baseline = if k == 0 {
            None
        } else {
            self.manifest.baseline_for(k).map(|(b, dt)| {
                log::debug!("frame {k}: odometry association residual {dt:.6} s");
                b
            })
        };
        Ok(FrameInput {
            image,
            d_rel: RelativeDepthMap::from_inverse_depth(&inv),
            flow,
            baseline,
        })
    }

    pub fn gt_depth(&self, k: usize) -> Result<Option<ScalarMap>, IoError> {
        match &self.manifest.frames[k].gt_depth {
            Some(p) => io::read_pfm(&self.path(p)).map(Some),
            None => Ok(None),
        }
    }

    pub fn gt_pose(&self, k: usize) -> Option<Pose> {
        self.manifest.frames.get(k)?.gt_pose.and_then(|p| p.to_pose().ok())
    }
}

/// Per-sequence summary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SequenceSummary {
    pub frames: usize,
    pub processed: usize,
    pub prior_only: usize,
    pub mean_abs_rel: Option<f64>,
    pub tae: Option<f64>,
}

/// Runs a sequence from disk. Writes depth rasters (and a point cloud) to
/// `out` when given, calls `on_frame` for every processed frame and
/// returns the metrics records and summary.
pub fn run_sequence(
    seq: &Sequence,
    config: &PipelineConfig,
    out: Option<&Path>,
    mut on_frame: impl FnMut(&FrameOutput, &MetricsRecord),
) -> Result<(Vec<MetricsRecord>, SequenceSummary), PipelineError> {
    if seq.len() < 2 {
        return Err(PipelineError::TooFewFrames(seq.len()));
    }
    let k = seq.manifest.intrinsics;
    let mut pipeline = Pipeline::new(config.clone(), k)?;
    let mut records = Vec::new();
    let mut prev_depth: Option<ScalarMap> = None;
    let mut camera_to_world = Pose::identity();
    let mut cloud = Vec::new();
    let mut tae_sum = 0.0;
    let mut tae_pairs = 0usize;
    let mut prior_only = 0;
    for i in 0..seq.len() {
        let input = seq.frame(i)?;
        let outp = pipeline.process(&input)?;
        if outp.is_initialization() {
            continue;
        }
        if outp.is_prior_only() {
            prior_only += 1;
        }
        let gt = seq.gt_depth(i)?;
        let tae = match (&prev_depth, seq.gt_pose(i)) {
            (Some(prev), Some(p)) => Some(tae_pair(prev, &outp.depth, &p, &k)),
            _ => None,
        };
        if let Some(t) = tae {
            tae_sum += t;
            tae_pairs += 1;
        }
        let rec = MetricsRecord::new(&outp, gt.as_ref(), tae);
        if let Some(dir) = out {
            if config.output.depth {
                let name = format!("{i:06}");
                match config.output.format {
                    DepthFormat::Pfm => io::write_pfm(&dir.join("depth").join(format!("{name}.pfm")), &outp.depth)?,
                    DepthFormat::Png16 => io::write_depth_png16(&dir.join("depth").join(format!("{name}.png")), &outp.depth)?,
                }
            }
            if config.output.pointcloud {
                let step = outp.pose.unwrap_or_else(Pose::identity);
                camera_to_world = camera_to_world.compose(&step.inverse());
                let img = match &input.image {
                    FrameImage::Rgb(rgb) => Some(rgb.clone()),
                    FrameImage::Lab(_) => None,
                };
                cloud.extend(io::pointcloud_points(&outp.depth, img.as_ref(), &k, &camera_to_world));
            }
        }
        on_frame(&outp, &rec);
        records.push(rec);
        prev_depth = Some(outp.depth);
    }
    if let (Some(dir), true) = (out, config.output.pointcloud) {
        io::write_ply(&dir.join("cloud.ply"), &cloud)?;
    }
    let abs: Vec<f64> = records.iter().filter_map(|r| r.abs_rel).collect();
    let summary = SequenceSummary {
        frames: seq.len(),
        processed: records.len(),
        prior_only,
        mean_abs_rel: (!abs.is_empty()).then(|| abs.iter().sum::<f64>() / abs.len() as f64),
        tae: (tae_pairs > 0).then(|| 100.0 * tae_sum / (2.0 * tae_pairs as f64)),
    };
    Ok((records, summary))
}
