use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use depthfuse::config::{DepthFormat, PipelineConfig};
use depthfuse::eval::{depth_metrics, tae, DepthMetrics, DepthRange};
use depthfuse::geometry::{Pose, ScalarMap};
use depthfuse::io;
use depthfuse::pipeline::{run_sequence, FrameImage, FrameInput, Pipeline, Sequence, StageTimings};
use depthfuse::stats;
use depthfuse::synth::{render_sequence, write_sequence, SceneSpec};
use serde::Serialize;

#[derive(Parser)]
#[command(name = "depthfuse", version, about = "Metric depth from relative depth, optical flow and odometry")]
struct Cli {
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Process a sequence and write depth rasters.
    Run(RunArgs),
    /// Score depth rasters against ground truth.
    Eval(EvalArgs),
    /// Render a synthetic sequence with exact flow, poses and depth.
    Synth(SynthArgs),
    /// Per-stage runtime breakdown.
    Bench(BenchArgs),
    /// Per-frame diagnostics.
    Inspect(InspectArgs),
}

#[derive(Args)]
struct Common {
    /// Pipeline configuration (TOML).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long)]
    seed: Option<u64>,
}

impl Common {
    fn load(&self) -> Result<PipelineConfig> {
        let mut cfg = match &self.config {
            Some(p) => PipelineConfig::load(p)?,
            None => PipelineConfig::default(),
        };
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        Ok(cfg)
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Pfm,
    Png16,
}

impl From<Format> for DepthFormat {
    fn from(f: Format) -> Self {
        match f {
            Format::Pfm => DepthFormat::Pfm,
            Format::Png16 => DepthFormat::Png16,
        }
    }
}

#[derive(Args)]
struct RunArgs {
    /// Sequence directory containing sequence.toml.
    sequence: PathBuf,
    #[command(flatten)]
    common: Common,
    /// Output directory for depth rasters and the point cloud.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, value_enum)]
    format: Option<Format>,
    /// Line-delimited JSON records, one per frame.
    #[arg(long)]
    metrics_out: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    /// Sequence directory with ground truth.
    sequence: PathBuf,
    /// Directory written by `run --out`.
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    common: Common,
    /// Raster format to read; default from the config.
    #[arg(long, value_enum)]
    format: Option<Format>,
    /// Per-frame metric records as line-delimited JSON.
    #[arg(long)]
    metrics_out: Option<PathBuf>,
}

#[derive(Args)]
struct SynthArgs {
    /// Output sequence directory.
    #[arg(long)]
    out: PathBuf,
    /// Seed for the scene layout and every noise source.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Image width, pixels.
    #[arg(long, default_value_t = 160)]
    width: usize,
    /// Image height, pixels.
    #[arg(long, default_value_t = 120)]
    height: usize,
    /// Number of frames, including the first.
    #[arg(long, default_value_t = 10)]
    frames: usize,
    /// Flow noise standard deviation, pixels.
    #[arg(long, default_value_t = 0.0)]
    flow_noise: f64,
    /// Fraction of pixels in independently moving blocks.
    #[arg(long, default_value_t = 0.0)]
    outliers: f64,
    /// Relative standard deviation of the odometry baseline.
    #[arg(long, default_value_t = 0.0)]
    baseline_noise: f64,
    /// Full scene description (JSON); overrides the size and noise flags.
    #[arg(long)]
    scene: Option<PathBuf>,
}

#[derive(Args)]
struct BenchArgs {
    /// Sequence directory; a synthetic scene is rendered in memory if omitted.
    sequence: Option<PathBuf>,
    #[command(flatten)]
    common: Common,
    #[arg(long, default_value_t = 1241)]
    width: usize,
    #[arg(long, default_value_t = 376)]
    height: usize,
    #[arg(long, default_value_t = 50)]
    frames: usize,
}

#[derive(Args)]
struct InspectArgs {
    sequence: PathBuf,
    #[command(flatten)]
    common: Common,
    /// Per-frame diagnostics as line-delimited JSON.
    #[arg(long)]
    metrics_out: Option<PathBuf>,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let res = match cli.threads {
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .context("thread pool")
            .and_then(|pool| pool.install(|| dispatch(cli.command))),
        None => dispatch(cli.command),
    };
    match res {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn dispatch(cmd: Command) -> Result<()> {
    match cmd {
        Command::Run(a) => cmd_run(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Synth(a) => cmd_synth(a),
        Command::Bench(a) => cmd_bench(a),
        Command::Inspect(a) => cmd_inspect(a),
    }
}

fn open_sequence(dir: &Path) -> Result<Sequence> {
    Sequence::open(dir).with_context(|| format!("opening sequence {}", dir.display()))
}

fn jsonl_writer(path: &Option<PathBuf>) -> Result<Option<BufWriter<File>>> {
    path.as_ref()
        .map(|p| {
            if let Some(parent) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
                std::fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
            }
            File::create(p).map(BufWriter::new).with_context(|| format!("creating {}", p.display()))
        })
        .transpose()
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(|| "-".into(), |x| format!("{x:.6}"))
}

fn cmd_run(a: RunArgs) -> Result<()> {
    let mut cfg = a.common.load()?;
    if let Some(f) = a.format {
        cfg.output.format = f.into();
    }
    let seq = open_sequence(&a.sequence)?;
    let mut metrics = if cfg.output.metrics { jsonl_writer(&a.metrics_out)? } else { None };
    let mut write_err = None;
    let (_, summary) = run_sequence(&seq, &cfg, a.out.as_deref(), |out, rec| {
        log::info!("frame {}: alpha {} flags {:?}", out.index, opt(out.alpha), out.flags);
        if let Some(w) = metrics.as_mut() {
            if let Err(e) = writeln!(w, "{}", rec.to_json_line()) {
                write_err.get_or_insert(e);
            }
        }
    })?;
    if let Some(e) = write_err {
        return Err(e).context("writing metrics");
    }
    if let Some(mut w) = metrics {
        w.flush().context("writing metrics")?;
    }
    println!("{}", serde_json::to_string(&summary)?);
    Ok(())
}

#[derive(Serialize)]
struct EvalRecord {
    frame: usize,
    all: DepthMetrics,
    near: Option<DepthMetrics>,
    far: Option<DepthMetrics>,
}

fn read_prediction(dir: &Path, frame: usize, format: DepthFormat) -> Result<Option<ScalarMap>> {
    let path = match format {
        DepthFormat::Pfm => dir.join("depth").join(format!("{frame:06}.pfm")),
        DepthFormat::Png16 => dir.join("depth").join(format!("{frame:06}.png")),
    };
    if !path.exists() {
        return Ok(None);
    }
    let map = match format {
        DepthFormat::Pfm => io::read_pfm(&path)?,
        DepthFormat::Png16 => io::read_depth_png16(&path)?,
    };
    Ok(Some(map))
}

fn mean_of(ms: &[&DepthMetrics]) -> Option<[f64; 4]> {
    if ms.is_empty() {
        return None;
    }
    let n = ms.len() as f64;
    let mut acc = [0.0; 4];
    for m in ms {
        acc[0] += m.abs_rel;
        acc[1] += m.delta1;
        acc[2] += m.delta2;
        acc[3] += m.delta3;
    }
    Some(acc.map(|x| x / n))
}

fn cmd_eval(a: EvalArgs) -> Result<()> {
    let cfg = a.common.load()?;
    let format = a.format.map_or(cfg.output.format, Into::into);
    let seq = open_sequence(&a.sequence)?;
    let k = seq.manifest.intrinsics;
    let mut metrics = jsonl_writer(&a.metrics_out)?;
    let mut records = Vec::new();
    // Contiguous run of predicted frames for the temporal error.
    let mut run: Vec<ScalarMap> = Vec::new();
    let mut run_poses: Vec<Pose> = Vec::new();
    let mut tae_sum = 0.0;
    let mut tae_pairs = 0usize;
    let mut flush_run = |run: &mut Vec<ScalarMap>, poses: &mut Vec<Pose>| {
        if run.len() >= 3 {
            if let Ok(t) = tae(run, poses, &k) {
                tae_sum += t.tae * 2.0 * t.pairs as f64 / 100.0;
                tae_pairs += t.pairs;
            }
        }
        run.clear();
        poses.clear();
    };
    for i in 0..seq.len() {
        let Some(pred) = read_prediction(&a.out, i, format)? else {
            flush_run(&mut run, &mut run_poses);
            continue;
        };
        let gt = seq.gt_depth(i)?.with_context(|| format!("frame {i} has no ground-truth depth"))?;
        let all = depth_metrics(&pred, &gt, DepthRange::ALL).with_context(|| format!("frame {i}"))?;
        let near = depth_metrics(&pred, &gt, cfg.metrics.near).ok();
        let far = depth_metrics(&pred, &gt, cfg.metrics.far).ok();
        let rec = EvalRecord { frame: i, all, near, far };
        if let Some(w) = metrics.as_mut() {
            writeln!(w, "{}", serde_json::to_string(&rec)?).context("writing metrics")?;
        }
        records.push(rec);
        if !run.is_empty() {
            match seq.gt_pose(i) {
                Some(p) => run_poses.push(p),
                None => flush_run(&mut run, &mut run_poses),
            }
        }
        run.push(pred);
    }
    flush_run(&mut run, &mut run_poses);
    if let Some(mut w) = metrics {
        w.flush().context("writing metrics")?;
    }
    if records.is_empty() {
        bail!("no depth rasters found under {}", a.out.join("depth").display());
    }

    println!("{:<10} {:>8} {:>10} {:>8} {:>8} {:>8}", "window", "frames", "AbsRel", "d1", "d2", "d3");
    let rows: [(&str, Vec<&DepthMetrics>); 3] = [
        ("all", records.iter().map(|r| &r.all).collect()),
        ("near", records.iter().filter_map(|r| r.near.as_ref()).collect()),
        ("far", records.iter().filter_map(|r| r.far.as_ref()).collect()),
    ];
    for (name, ms) in &rows {
        match mean_of(ms) {
            Some([ar, d1, d2, d3]) => println!("{name:<10} {:>8} {ar:>10.6} {d1:>8.4} {d2:>8.4} {d3:>8.4}", ms.len()),
            None => println!("{name:<10} {:>8} {:>10} {:>8} {:>8} {:>8}", 0, "-", "-", "-", "-"),
        }
    }
    let tae_value = (tae_pairs > 0).then(|| 100.0 * tae_sum / (2.0 * tae_pairs as f64));
    println!("TAE {} over {tae_pairs} pairs", opt(tae_value));
    Ok(())
}

fn cmd_synth(a: SynthArgs) -> Result<()> {
    let spec = match &a.scene {
        Some(p) => {
            let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            serde_json::from_str::<SceneSpec>(&text).with_context(|| format!("parsing {}", p.display()))?
        }
        None => {
            let mut s = SceneSpec::driving(a.width, a.height, a.frames, a.seed);
            s.noise.flow_sigma_px = a.flow_noise;
            s.noise.outlier_fraction = a.outliers;
            s.noise.baseline_sigma = a.baseline_noise;
            s
        }
    };
    spec.validate()?;
    let manifest = write_sequence(&spec, &a.out)?;
    println!("wrote {} frames to {}", manifest.frames.len(), a.out.display());
    Ok(())
}

fn load_inputs(seq: &Sequence) -> Result<Vec<FrameInput>> {
    (0..seq.len()).map(|i| seq.frame(i).with_context(|| format!("frame {i}"))).collect()
}

fn cmd_bench(a: BenchArgs) -> Result<()> {
    let cfg = a.common.load()?;
    let (k, inputs) = match &a.sequence {
        Some(dir) => {
            let seq = open_sequence(dir)?;
            (seq.manifest.intrinsics, load_inputs(&seq)?)
        }
        None => {
            let spec = SceneSpec::driving(a.width, a.height, a.frames, cfg.seed);
            let frames = render_sequence(&spec)?;
            let inputs = frames
                .into_iter()
                .map(|f| FrameInput { image: FrameImage::Rgb(f.image), d_rel: f.d_rel, flow: f.flow, baseline: f.baseline })
                .collect();
            (spec.intrinsics, inputs)
        }
    };
    if inputs.len() < 2 {
        bail!("bench needs at least 2 frames");
    }
    let mut pipeline = Pipeline::new(cfg, k)?;
    let mut timings: Vec<StageTimings> = Vec::new();
    for input in &inputs {
        let out = pipeline.process(input)?;
        if !out.is_initialization() {
            timings.push(out.timings);
        }
    }
    let median = |f: fn(&StageTimings) -> f64| stats::median(&timings.iter().map(f).collect::<Vec<_>>()).unwrap_or(0.0);
    println!("{}x{}, median over {} frames, {} threads", k.width, k.height, timings.len(), rayon::current_num_threads());
    println!("{:<12} {:>10}", "stage", "ms");
    println!("{:<12} {:>10.2}", "Seg", median(|t| t.segmentation_ms));
    println!("{:<12} {:>10}", "Flow", "external");
    println!("{:<12} {:>10.2}", "Motion", median(|t| t.motion_ms));
    println!("{:<12} {:>10.2}", "Scale", median(|t| t.scale_ms));
    println!("{:<12} {:>10.2}", "Tri+Fusion", median(|t| t.tri_fusion_ms));
    println!("{:<12} {:>10.2}", "Total", median(|t| t.total_ms()));
    Ok(())
}

fn cmd_inspect(a: InspectArgs) -> Result<()> {
    let cfg = a.common.load()?;
    let seq = open_sequence(&a.sequence)?;
    let mut metrics = jsonl_writer(&a.metrics_out)?;
    println!(
        "{:>6} {:>8} {:>12} {:>10} {:>10} {:>8} {:>9}  flags",
        "frame", "inliers", "rho_med", "alpha", "global", "gated", "segments"
    );
    let mut write_err = None;
    run_sequence(&seq, &cfg, None, |out, rec| {
        println!(
            "{:>6} {:>8} {:>12} {:>10} {:>10} {:>8.4} {:>4}/{:<4}  {:?}",
            out.index,
            out.inlier_ratio.map_or_else(|| "-".into(), |r| format!("{r:.4}")),
            out.median_sampson.map_or_else(|| "-".into(), |r| format!("{r:.3e}")),
            out.alpha.map_or_else(|| "-".into(), |r| format!("{r:.5}")),
            out.global_scale.map_or_else(|| "-".into(), |r| format!("{r:.5}")),
            out.fusion.gate_rejection_rate(),
            out.accepted_segments,
            out.segments,
            out.flags,
        );
        if let Some(w) = metrics.as_mut() {
            if let Err(e) = writeln!(w, "{}", rec.to_json_line()) {
                write_err.get_or_insert(e);
            }
        }
    })?;
    if let Some(e) = write_err {
        return Err(e).context("writing metrics");
    }
    if let Some(mut w) = metrics {
        w.flush().context("writing metrics")?;
    }
    Ok(())
}
