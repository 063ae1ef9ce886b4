//! End-to-end driver: per-scale matching stages over all frames, global
//! refinement, and fusion of the final estimates.

use std::fs;
use std::path::{Path, PathBuf};

use crate::config::PipelineConfig;
use crate::consistency::{GeometricCost, SourceDepth};
use crate::error::{MvsError, Result};
use crate::frame::CameraFrame;
use crate::fusion::{fuse, write_ply, FusedCloud, FusionView};
use crate::geometry::{CameraIntrinsics, PlaneHypothesis, Pose, Vec3};
use crate::grid::{ColorImage, DepthMap, Grid};
use crate::io::{load_kitti_poses, load_seeds, read_image, write_depth_pfm, write_normal_pfm, write_pfm};
use crate::matcher::{
    build_planar_priors_with, derive_seed, evaluate_grid, run_stage, HypothesisGrid, MatchContext, PlanarPriorCost, Stage,
};
use crate::multiscale::{build_pyramid, detail_restore, joint_bilateral_upsample, level_scale, Pyramid, NUM_LEVELS};
use crate::refinement::{confidence_from_cost, global_refine, median_filter, RefineReport};
use crate::seeding::{apply_anchors, init_hypotheses, seed_anchors, PartialInit, SeedSet, SeedSource};

/// One input frame: image, world-from-camera pose and optional sparse
/// depth seeds in full-resolution pixels.
#[derive(Debug, Clone)]
pub struct FrameInput {
    pub image: ColorImage,
    pub pose: Pose,
    pub seeds: SeedSet,
}

/// Frames sharing one camera.
#[derive(Debug, Clone)]
pub struct FrameSet {
    pub intrinsics: CameraIntrinsics,
    pub frames: Vec<FrameInput>,
}

impl FrameSet {
    pub fn camera_frames(&self) -> Result<Vec<CameraFrame>> {
        self.intrinsics.validate()?;
        self.frames
            .iter()
            .enumerate()
            .map(|(i, f)| CameraFrame::new(i, self.intrinsics, f.pose, f.image.clone()))
            .collect()
    }

    /// Restrict to the given frame indices, in order.
    pub fn subset(&self, indices: &[usize]) -> Result<FrameSet> {
        let frames = indices
            .iter()
            .map(|&i| {
                self.frames
                    .get(i)
                    .cloned()
                    .ok_or_else(|| MvsError::InvalidInput(format!("frame {i} does not exist")))
            })
            .collect::<Result<_>>()?;
        Ok(FrameSet {
            intrinsics: self.intrinsics,
            frames,
        })
    }
}

/// Final per-frame estimate at full resolution.
#[derive(Debug, Clone)]
pub struct FrameEstimate {
    pub depth: DepthMap,
    /// Camera-frame unit normals facing the camera.
    pub normals: Grid<Vec3>,
    /// Final aggregated matching cost.
    pub cost: Grid<f64>,
    pub confidence: Grid<f64>,
    /// Refinement report of the finest scale, when refinement ran.
    pub refine_report: Option<RefineReport>,
}

#[derive(Debug, Clone)]
pub struct PipelineOutput {
    pub estimates: Vec<FrameEstimate>,
    /// `None` when there are too few frames to fuse.
    pub cloud: Option<FusedCloud>,
}

/// The `count` frames temporally closest to `reference`, ties broken
/// towards the earlier frame, returned in ascending order. Frames whose
/// camera center lies within `min_baseline` of the reference are skipped
/// when `min_baseline > 0`.
pub fn select_sources(reference: usize, poses: &[Pose], count: usize, min_baseline: f64) -> Result<Vec<usize>> {
    if reference >= poses.len() {
        return Err(MvsError::InvalidInput(format!("reference frame {reference} does not exist")));
    }
    let center = poses[reference].center();
    let mut candidates: Vec<usize> = (0..poses.len())
        .filter(|&j| j != reference)
        .filter(|&j| min_baseline <= 0.0 || (poses[j].center() - center).norm() >= min_baseline)
        .collect();
    candidates.sort_by_key(|&j| (j.abs_diff(reference), j));
    candidates.truncate(count);
    if candidates.is_empty() {
        return Err(MvsError::InsufficientFrames(format!(
            "frame {reference} has no usable source view"
        )));
    }
    candidates.sort_unstable();
    Ok(candidates)
}

/// Run `f` on a worker pool with `threads` workers (0 = runtime default).
pub fn with_thread_pool<T: Send>(threads: usize, f: impl FnOnce() -> T + Send) -> Result<T> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| MvsError::Config(format!("cannot start worker pool: {e}")))?;
    Ok(pool.install(f))
}

struct Dumper<'a> {
    dir: Option<&'a Path>,
}

impl Dumper<'_> {
    fn depth(&self, frame: usize, level: usize, stage: &str, depth: &DepthMap) -> Result<()> {
        let Some(dir) = self.dir else { return Ok(()) };
        fs::create_dir_all(dir).map_err(|e| MvsError::io(dir, e))?;
        let path = dir.join(format!("{frame:06}_level{level}_{stage}.pfm"));
        write_depth_pfm(depth, &path)
    }

    fn stage(&self, frame: usize, level: usize, stage: &str, grid: &HypothesisGrid) -> Result<()> {
        if self.dir.is_none() {
            return Ok(());
        }
        self.depth(frame, level, stage, &grid.depth_map())?;
        let dir = self.dir.expect("checked above");
        let path = dir.join(format!("{frame:06}_level{level}_{stage}_cost.pfm"));
        write_pfm(&grid.cost_map().map(|c| *c as f32), &path)
    }
}

fn hypotheses_from(depth: &DepthMap, normals: &Grid<Vec3>) -> Grid<PlaneHypothesis> {
    Grid::from_fn(depth.width(), depth.height(), |x, y| PlaneHypothesis {
        depth: *depth.get(x, y),
        normal: *normals.get(x, y),
    })
}

struct LevelResult {
    hypotheses: Grid<PlaneHypothesis>,
    cost: Grid<f64>,
    report: Option<RefineReport>,
}

/// Estimate depth and normals for every frame of the set.
pub fn estimate_depths(cfg: &PipelineConfig, set: &FrameSet, dump_dir: Option<&Path>) -> Result<Vec<FrameEstimate>> {
    cfg.validate()?;
    let n = set.frames.len();
    if n < 2 {
        return Err(MvsError::InsufficientFrames(format!("need at least 2 frames, got {n}")));
    }
    let frames = set.camera_frames()?;
    let range = cfg.depth_range;
    for (i, f) in set.frames.iter().enumerate() {
        f.seeds.validate(&set.intrinsics, &range).map_err(|e| e.in_stage(i, "seeding"))?;
    }
    let poses: Vec<Pose> = set.frames.iter().map(|f| f.pose).collect();
    let sources: Vec<Vec<usize>> = (0..n)
        .map(|i| select_sources(i, &poses, cfg.matching.num_sources, cfg.min_baseline))
        .collect::<Result<_>>()?;
    let pyramids: Vec<Pyramid> = frames
        .iter()
        .map(|f| build_pyramid(f).map_err(|e| e.in_stage(f.index, "pyramid")))
        .collect::<Result<_>>()?;
    let dumper = Dumper { dir: dump_dir };
    let params = &cfg.matching;
    let beta = params.view_weight_beta;
    let first_level = NUM_LEVELS - cfg.scales;

    let mut previous: Vec<Option<LevelResult>> = (0..n).map(|_| None).collect();
    for level in first_level..NUM_LEVELS {
        let radius = if level == 0 {
            params.coarse_patch_radius
        } else {
            params.fine_patch_radius
        };
        let level_frames: Vec<&CameraFrame> = pyramids.iter().map(|p| p.level(level)).collect();

        let mut grids = Vec::with_capacity(n);
        for i in 0..n {
            let reference = level_frames[i];
            let cam = &reference.intrinsics;
            let ctx = MatchContext::new(
                reference,
                sources[i].iter().map(|&s| level_frames[s]).collect(),
                range,
                radius,
                params.patch_step,
            )
            .map_err(|e| e.in_stage(i, "matching"))?;
            let stage_seed = |tag: u64| derive_seed(cfg.seed, &[i as u64, level as u64, tag]);
            let init = match &previous[i] {
                None => {
                    let seeds = set.frames[i].seeds.rescaled(level_scale(level));
                    let partial = PartialInit::from_seeds(&seeds, cam, &cfg.seeding);
                    init_hypotheses(&partial, cam, &range, &cfg.seeding, stage_seed(0))
                }
                Some(prev) => joint_bilateral_upsample(
                    &prev.hypotheses,
                    &pyramids[i].level(level - 1).color,
                    &reference.color,
                    cam,
                    &range,
                    &cfg.upsample,
                )
                .map_err(|e| e.in_stage(i, "upsampling"))?,
            };
            let mut grid = HypothesisGrid::new(cam.width, cam.height, ctx.num_views(), init.into_vec())
                .map_err(|e| e.in_stage(i, "matching"))?;
            evaluate_grid(&ctx, &mut grid, beta, None);
            if previous[i].is_some() {
                let replaced = detail_restore(&ctx, &mut grid, cfg.restore_margin, stage_seed(1));
                log::debug!("frame {i} level {level}: detail restoration replaced {replaced} pixels");
            }
            run_stage(&ctx, &mut grid, params, Stage::Photometric, params.photo_iterations, None, stage_seed(2));
            dumper.stage(i, level, "photometric", &grid)?;
            if params.planar_iterations > 0 {
                let mut extra = Vec::new();
                if cfg.seeding.anchor {
                    let seeds = set.frames[i].seeds.rescaled(level_scale(level));
                    let anchors = seed_anchors(&seeds, cam.width, cam.height);
                    extra.extend(anchors.data().iter().flatten().map(|s| (s.pixel, s.depth)));
                }
                let field = build_planar_priors_with(&grid, params.prior_threshold, &extra, cam, &range);
                log::debug!(
                    "frame {i} level {level}: {} prior triangles from {} vertices, coverage {:.3}",
                    field.triangles.len(),
                    field.vertex_count,
                    field.coverage()
                );
                if dumper.dir.is_some() {
                    let prior_depth = Grid::from_fn(cam.width, cam.height, |x, y| field.prior(x, y).map_or(0.0, |p| p.depth));
                    dumper.depth(i, level, "prior", &prior_depth)?;
                }
                let hook = PlanarPriorCost {
                    field: &field,
                    params: params.planar,
                };
                run_stage(&ctx, &mut grid, params, Stage::Planar, params.planar_iterations, Some(&hook), stage_seed(3));
                dumper.stage(i, level, "planar", &grid)?;
            }
            log::info!("frame {i} level {level}: matching done");
            grids.push(grid);
        }

        // Geometric stage against depth maps frozen at the end of matching.
        let frozen: Vec<DepthMap> = grids.iter().map(|g| g.depth_map()).collect();
        let mut results = Vec::with_capacity(n);
        for (i, mut grid) in grids.into_iter().enumerate() {
            let reference = level_frames[i];
            let cam = &reference.intrinsics;
            if cfg.geom.iterations > 0 {
                let ctx = MatchContext::new(
                    reference,
                    sources[i].iter().map(|&s| level_frames[s]).collect(),
                    range,
                    radius,
                    params.patch_step,
                )
                .map_err(|e| e.in_stage(i, "geometric"))?;
                let src_depths: Vec<SourceDepth<'_>> = sources[i]
                    .iter()
                    .map(|&s| SourceDepth {
                        intrinsics: &level_frames[s].intrinsics,
                        pose: &level_frames[s].pose,
                        depth: &frozen[s],
                    })
                    .collect();
                let hook = GeometricCost::new(reference, &src_depths, cfg.geom).map_err(|e| e.in_stage(i, "geometric"))?;
                let seed = derive_seed(cfg.seed, &[i as u64, level as u64, 4]);
                run_stage(&ctx, &mut grid, params, Stage::Geometric, cfg.geom.iterations, Some(&hook), seed);
                dumper.stage(i, level, "geometric", &grid)?;
            }
            let cost = grid.cost_map();
            let result = if cfg.refine_enabled {
                let mut conf = confidence_from_cost(&cost, cfg.refine.conf_low, cfg.refine.conf_high);
                let mut filtered = median_filter(&grid.depth_map());
                if cfg.seeding.anchor && !set.frames[i].seeds.is_empty() {
                    let seeds = set.frames[i].seeds.rescaled(level_scale(level));
                    let anchors = seed_anchors(&seeds, cam.width, cam.height);
                    let n = apply_anchors(&anchors, &grid.normal_map(), cam, &mut filtered, &mut conf, &range);
                    log::debug!("frame {i} level {level}: {n} seed anchors");
                }
                let out = global_refine(
                    &filtered,
                    &grid.normal_map(),
                    &conf,
                    &reference.color,
                    cam,
                    &range,
                    &cfg.refine,
                )
                .map_err(|e| e.in_stage(i, "refinement"))?;
                log::debug!(
                    "frame {i} level {level}: refinement took {} sweeps (converged: {})",
                    out.report.sweeps,
                    out.report.converged
                );
                dumper.depth(i, level, "refined", &out.depth)?;
                LevelResult {
                    hypotheses: hypotheses_from(&out.depth, &out.normals),
                    cost,
                    report: Some(out.report),
                }
            } else {
                LevelResult {
                    hypotheses: Grid::from_vec(cam.width, cam.height, grid.hypotheses.clone())?,
                    cost,
                    report: None,
                }
            };
            results.push(Some(result));
        }
        previous = results;
    }

    Ok(previous
        .into_iter()
        .map(|r| {
            let r = r.expect("every frame has a result after the last level");
            FrameEstimate {
                depth: r.hypotheses.map(|h| h.depth),
                normals: r.hypotheses.map(|h| h.normal),
                confidence: confidence_from_cost(&r.cost, cfg.refine.conf_low, cfg.refine.conf_high),
                cost: r.cost,
                refine_report: r.report,
            }
        })
        .collect())
}

/// Fuse full-resolution estimates into a point cloud.
pub fn fuse_estimates(cfg: &PipelineConfig, set: &FrameSet, estimates: &[FrameEstimate]) -> Result<FusedCloud> {
    if estimates.len() != set.frames.len() {
        return Err(MvsError::InvalidInput("one estimate per frame is required".into()));
    }
    let frames = set.camera_frames()?;
    let views: Vec<FusionView<'_>> = frames
        .iter()
        .zip(estimates)
        .map(|(frame, e)| FusionView {
            frame,
            depth: &e.depth,
            normals: &e.normals,
        })
        .collect();
    fuse(&views, &cfg.fusion)
}

/// Depth estimation for all frames followed by fusion. Runs on a worker
/// pool sized by `cfg.threads`.
pub fn run_pipeline(cfg: &PipelineConfig, set: &FrameSet, dump_dir: Option<&Path>) -> Result<PipelineOutput> {
    with_thread_pool(cfg.threads, || {
        let estimates = estimate_depths(cfg, set, dump_dir)?;
        let cloud = if set.frames.len() > cfg.fusion.min_views {
            Some(fuse_estimates(cfg, set, &estimates)?)
        } else {
            log::warn!(
                "{} frames cannot satisfy {} consistent views; skipping fusion",
                set.frames.len(),
                cfg.fusion.min_views
            );
            None
        };
        Ok(PipelineOutput { estimates, cloud })
    })?
}

/// Paths of one frame's output maps below `dir`.
pub fn estimate_paths(dir: &Path, frame: usize) -> [PathBuf; 3] {
    [
        dir.join("depth").join(format!("{frame:06}.pfm")),
        dir.join("normals").join(format!("{frame:06}.pfm")),
        dir.join("confidence").join(format!("{frame:06}.pfm")),
    ]
}

pub fn write_estimate(dir: &Path, frame: usize, estimate: &FrameEstimate) -> Result<()> {
    let [depth, normals, conf] = estimate_paths(dir, frame);
    for p in [&depth, &normals, &conf] {
        let parent = p.parent().expect("output paths have a parent");
        fs::create_dir_all(parent).map_err(|e| MvsError::io(parent, e))?;
    }
    write_depth_pfm(&estimate.depth, &depth)?;
    write_normal_pfm(&estimate.normals, &normals)?;
    write_pfm(&estimate.confidence.map(|c| *c as f32), &conf)
}

/// Write every frame's maps and, when present, `cloud.ply`.
pub fn write_outputs(dir: &Path, output: &PipelineOutput) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| MvsError::io(dir, e))?;
    for (i, e) in output.estimates.iter().enumerate() {
        write_estimate(dir, i, e)?;
    }
    if let Some(cloud) = &output.cloud {
        write_ply(cloud, &dir.join("cloud.ply"))?;
    }
    Ok(())
}

/// Image files of a directory in lexicographic order.
pub fn list_images(dir: &Path) -> Result<Vec<PathBuf>> {
    let entries = fs::read_dir(dir).map_err(|e| MvsError::io(dir, e))?;
    let mut paths = Vec::new();
    for entry in entries {
        let path = entry.map_err(|e| MvsError::io(dir, e))?.path();
        let ext = path
            .extension()
            .and_then(|e| e.to_str())
            .map(|e| e.to_ascii_lowercase());
        if matches!(ext.as_deref(), Some("png" | "ppm" | "pgm" | "jpg" | "jpeg")) {
            paths.push(path);
        }
    }
    paths.sort();
    Ok(paths)
}

/// Load a sequence: images from `image_dir`, one KITTI pose line per image,
/// and optional per-frame seed files `<seed_dir>/<image stem>.txt`.
pub fn load_frame_set(
    image_dir: &Path,
    poses_path: &Path,
    seed_dir: Option<&Path>,
    intrinsics: &CameraIntrinsics,
) -> Result<FrameSet> {
    let images = list_images(image_dir)?;
    let poses = load_kitti_poses(poses_path)?;
    if images.len() != poses.len() {
        return Err(MvsError::InvalidInput(format!(
            "{} images in {} but {} poses in {}",
            images.len(),
            image_dir.display(),
            poses.len(),
            poses_path.display()
        )));
    }
    let mut cam: Option<CameraIntrinsics> = None;
    let mut frames = Vec::with_capacity(images.len());
    for (i, (path, pose)) in images.iter().zip(poses).enumerate() {
        let image = read_image(path)?;
        let c = *cam.get_or_insert(CameraIntrinsics {
            width: image.width(),
            height: image.height(),
            ..*intrinsics
        });
        if image.width() != c.width || image.height() != c.height {
            return Err(MvsError::InvalidInput(format!("{}: image size differs from the first frame", path.display())));
        }
        let seeds = match seed_dir {
            Some(dir) => {
                let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or_default();
                let seed_path = dir.join(format!("{stem}.txt"));
                if seed_path.exists() {
                    load_seeds(&seed_path, i, SeedSource::Slam)?
                } else {
                    SeedSet::new(i)
                }
            }
            None => SeedSet::new(i),
        };
        frames.push(FrameInput { image, pose, seeds });
    }
    let intrinsics = cam.ok_or_else(|| MvsError::InsufficientFrames(format!("no images in {}", image_dir.display())))?;
    intrinsics.validate()?;
    Ok(FrameSet { intrinsics, frames })
}
