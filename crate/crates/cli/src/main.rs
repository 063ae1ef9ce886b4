use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use planemvs::config::PipelineConfig;
use planemvs::fusion::{write_ply, FusionView};
use planemvs::geometry::CameraIntrinsics;
use planemvs::io::{read_depth_pfm, read_normal_pfm, write_depth_pfm, write_kitti_poses, write_normal_pfm, write_png};
use planemvs::metrics::{compute_metrics, median, normal_angle_errors};
use planemvs::pipeline::{
    estimate_depths, estimate_paths, load_frame_set, run_pipeline, select_sources, with_thread_pool, write_estimate,
    write_outputs, FrameSet,
};
use planemvs::scene::{preset_plane_scene, render_scene, SceneSpec};
use planemvs::{MvsError, Result};

#[derive(Parser)]
#[command(name = "planemvs", version, about = "Multi-view stereo with planar priors")]
struct Cli {
    /// More log output (repeatable).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Estimate depth for every frame and fuse a point cloud.
    Run {
        #[command(flatten)]
        input: InputArgs,
        #[command(flatten)]
        opts: PipelineArgs,
    },
    /// Estimate depth for a single frame.
    Depth {
        #[command(flatten)]
        input: InputArgs,
        #[command(flatten)]
        opts: PipelineArgs,
        /// Index of the reference frame.
        #[arg(long)]
        frame: usize,
    },
    /// Fuse previously written depth and normal maps.
    Fuse {
        #[command(flatten)]
        input: InputArgs,
        #[command(flatten)]
        opts: PipelineArgs,
        /// Output directory of an earlier `run`.
        #[arg(long)]
        maps: PathBuf,
    },
    /// Compare a depth map with ground truth.
    Eval {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        /// Depth cap in meters.
        #[arg(long, default_value_t = planemvs::metrics::DEFAULT_DEPTH_CAP)]
        cap: f64,
        /// Predicted normal map; requires `--gt-normals`.
        #[arg(long, requires = "gt_normals")]
        pred_normals: Option<PathBuf>,
        #[arg(long)]
        gt_normals: Option<PathBuf>,
        /// Also write the report to this file.
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Render a synthetic scene with ground truth.
    Render {
        /// Scene description file.
        #[arg(long, conflicts_with = "preset", required_unless_present = "preset")]
        scene: Option<PathBuf>,
        #[arg(long, value_enum)]
        preset: Option<Preset>,
        #[arg(long)]
        output: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Preset {
    /// Textured slanted plane.
    Plane,
    /// The same plane with a textureless band.
    Band,
}

#[derive(Args)]
struct InputArgs {
    /// Directory of images, ordered by file name.
    #[arg(long)]
    images: PathBuf,
    /// KITTI pose file with one world-from-camera pose per image.
    #[arg(long)]
    poses: PathBuf,
    /// Directory of per-frame seed files named after the images.
    #[arg(long)]
    seeds: Option<PathBuf>,
}

#[derive(Args)]
struct PipelineArgs {
    /// Configuration file of `key = value` lines.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one configuration key (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Pinhole intrinsics in pixels.
    #[arg(long, value_name = "FX,FY,CX,CY", value_parser = parse_intrinsics)]
    intrinsics: Option<[f64; 4]>,
    /// Output directory.
    #[arg(long)]
    output: Option<PathBuf>,
    /// Master random seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads (0 = all cores).
    #[arg(long)]
    threads: Option<usize>,
    /// Number of pyramid levels to process.
    #[arg(long)]
    scales: Option<usize>,
    /// Write per-scale depth and cost maps.
    #[arg(long)]
    dump_intermediate: bool,
}

impl PipelineArgs {
    fn resolve(&self) -> Result<PipelineConfig> {
        let mut cfg = match &self.config {
            Some(path) => PipelineConfig::load(path)?,
            None => PipelineConfig::default(),
        };
        for o in &self.overrides {
            let (k, v) = o
                .split_once('=')
                .ok_or_else(|| MvsError::Config(format!("expected KEY=VALUE, got `{o}`")))?;
            cfg.set(k.trim(), v.trim())?;
        }
        if let Some(k) = &self.intrinsics {
            cfg.intrinsics = Some(CameraIntrinsics {
                fx: k[0],
                fy: k[1],
                cx: k[2],
                cy: k[3],
                width: 0,
                height: 0,
            });
        }
        if let Some(o) = &self.output {
            cfg.output_dir = o.clone();
        }
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(t) = self.threads {
            cfg.threads = t;
        }
        if let Some(s) = self.scales {
            cfg.scales = s;
        }
        cfg.dump_intermediate |= self.dump_intermediate;
        cfg.validate()?;
        Ok(cfg)
    }
}

fn parse_intrinsics(text: &str) -> std::result::Result<[f64; 4], String> {
    let values: Vec<f64> = text
        .split(',')
        .map(|v| v.trim().parse::<f64>().map_err(|e| format!("`{v}`: {e}")))
        .collect::<std::result::Result<_, _>>()?;
    values
        .try_into()
        .map_err(|v: Vec<f64>| format!("expected 4 comma-separated values, got {}", v.len()))
}

fn load_input(input: &InputArgs, cfg: &PipelineConfig) -> Result<FrameSet> {
    let k = cfg
        .intrinsics
        .ok_or_else(|| MvsError::Config("camera intrinsics missing (config keys fx, fy, cx, cy or --intrinsics)".into()))?;
    load_frame_set(&input.images, &input.poses, input.seeds.as_deref(), &k)
}

fn dump_dir(cfg: &PipelineConfig) -> Option<PathBuf> {
    cfg.dump_intermediate.then(|| cfg.output_dir.join("intermediate"))
}

fn run(input: &InputArgs, opts: &PipelineArgs) -> Result<()> {
    let cfg = opts.resolve()?;
    let set = load_input(input, &cfg)?;
    let output = run_pipeline(&cfg, &set, dump_dir(&cfg).as_deref())?;
    write_outputs(&cfg.output_dir, &output)?;
    match &output.cloud {
        Some(c) => log::info!("fused {} points into {}", c.points.len(), cfg.output_dir.join("cloud.ply").display()),
        None => log::info!("wrote {} depth maps to {}", output.estimates.len(), cfg.output_dir.display()),
    }
    Ok(())
}

fn depth(input: &InputArgs, opts: &PipelineArgs, frame: usize) -> Result<()> {
    let cfg = opts.resolve()?;
    let set = load_input(input, &cfg)?;
    let poses: Vec<_> = set.frames.iter().map(|f| f.pose).collect();
    let mut members = select_sources(frame, &poses, cfg.matching.num_sources, cfg.min_baseline)?;
    members.push(frame);
    members.sort_unstable();
    let local = members.iter().position(|&m| m == frame).expect("reference is a member");
    let subset = set.subset(&members)?;
    let estimates = with_thread_pool(cfg.threads, || estimate_depths(&cfg, &subset, dump_dir(&cfg).as_deref()))??;
    write_estimate(&cfg.output_dir, frame, &estimates[local])?;
    log::info!("wrote depth of frame {frame} to {}", cfg.output_dir.display());
    Ok(())
}

fn fuse_maps(input: &InputArgs, opts: &PipelineArgs, maps: &Path) -> Result<()> {
    let cfg = opts.resolve()?;
    let set = load_input(input, &cfg)?;
    let frames = set.camera_frames()?;
    let mut maps_read = Vec::with_capacity(frames.len());
    for i in 0..frames.len() {
        let [depth, normals, _] = estimate_paths(maps, i);
        maps_read.push((read_depth_pfm(&depth)?, read_normal_pfm(&normals)?));
    }
    let views: Vec<FusionView<'_>> = frames
        .iter()
        .zip(&maps_read)
        .map(|(frame, (depth, normals))| FusionView { frame, depth, normals })
        .collect();
    let cloud = with_thread_pool(cfg.threads, || planemvs::fusion::fuse(&views, &cfg.fusion))??;
    fs::create_dir_all(&cfg.output_dir).map_err(|e| io_error(&cfg.output_dir, e))?;
    let path = cfg.output_dir.join("cloud.ply");
    write_ply(&cloud, &path)?;
    log::info!("fused {} points into {}", cloud.points.len(), path.display());
    Ok(())
}

fn io_error(path: &Path, e: std::io::Error) -> MvsError {
    MvsError::Io {
        path: path.to_path_buf(),
        source: e,
    }
}

fn eval(
    pred: &Path,
    gt: &Path,
    cap: f64,
    normals: Option<(&Path, &Path)>,
    output: Option<&Path>,
) -> Result<()> {
    let metrics = compute_metrics(&read_depth_pfm(pred)?, &read_depth_pfm(gt)?, cap)?;
    let mut report = metrics.report();
    if let Some((p, g)) = normals {
        let errors = normal_angle_errors(&read_normal_pfm(p)?, &read_normal_pfm(g)?, None)?;
        let m = median(&errors).ok_or(MvsError::EmptyMetrics)?;
        report.push_str(&format!("normal_median_deg {m}\n"));
    }
    print!("{report}");
    if let Some(path) = output {
        fs::write(path, &report).map_err(|e| io_error(path, e))?;
    }
    Ok(())
}

fn render(scene: Option<&Path>, preset: Option<Preset>, out: &Path) -> Result<()> {
    let spec = match (scene, preset) {
        (Some(path), _) => {
            let text = fs::read_to_string(path).map_err(|e| io_error(path, e))?;
            SceneSpec::parse(&text, path)?
        }
        (None, Some(Preset::Plane)) => preset_plane_scene(false),
        (None, Some(Preset::Band)) => preset_plane_scene(true),
        (None, None) => return Err(MvsError::Config("either --scene or --preset is required".into())),
    };
    let views = render_scene(&spec.scene, &spec.intrinsics)?;
    for dir in ["images", "gt/depth", "gt/normals"] {
        let d = out.join(dir);
        fs::create_dir_all(&d).map_err(|e| io_error(&d, e))?;
    }
    for (i, v) in views.iter().enumerate() {
        write_png(&v.image, &out.join("images").join(format!("{i:06}.png")))?;
        write_depth_pfm(&v.depth, &out.join("gt/depth").join(format!("{i:06}.pfm")))?;
        write_normal_pfm(&v.normals, &out.join("gt/normals").join(format!("{i:06}.pfm")))?;
    }
    let poses: Vec<_> = views.iter().map(|v| v.pose).collect();
    write_kitti_poses(&poses, &out.join("poses.txt"))?;
    let scene_path = out.join("scene.txt");
    fs::write(&scene_path, spec.to_text()).map_err(|e| io_error(&scene_path, e))?;

    let mut cfg = PipelineConfig {
        intrinsics: Some(spec.intrinsics),
        ..PipelineConfig::default()
    };
    if let Some(range) = spec.scene.depth_bounds(&views) {
        cfg.depth_range = range;
    }
    let cfg_path = out.join("config.txt");
    fs::write(&cfg_path, cfg.to_text()).map_err(|e| io_error(&cfg_path, e))?;
    log::info!("rendered {} views into {}", views.len(), out.display());
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => log::LevelFilter::Info,
        1 => log::LevelFilter::Debug,
        _ => log::LevelFilter::Trace,
    };
    env_logger::Builder::new()
        .filter_level(level)
        .parse_default_env()
        .init();
    let result = match &cli.command {
        Command::Run { input, opts } => run(input, opts),
        Command::Depth { input, opts, frame } => depth(input, opts, *frame),
        Command::Fuse { input, opts, maps } => fuse_maps(input, opts, maps),
        Command::Eval {
            pred,
            gt,
            cap,
            pred_normals,
            gt_normals,
            output,
        } => eval(
            pred,
            gt,
            *cap,
            pred_normals.as_deref().zip(gt_normals.as_deref()),
            output.as_deref(),
        ),
        Command::Render { scene, preset, output } => render(scene.as_deref(), *preset, output),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            let mut source = std::error::Error::source(&e);
            while let Some(s) = source {
                eprintln!("  caused by: {s}");
                source = s.source();
            }
            ExitCode::FAILURE
        }
    }
}
