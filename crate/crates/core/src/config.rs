//! Flat `key = value` pipeline configuration.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::consistency::GeomParams;
use crate::error::{MvsError, Result};
use crate::fusion::FusionParams;
use crate::geometry::{CameraIntrinsics, DepthRange};
use crate::matcher::MatchParams;
use crate::multiscale::{UpsampleParams, NUM_LEVELS};
use crate::refinement::RefineParams;
use crate::seeding::{SeedConfig, SeedMode};

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineConfig {
    pub matching: MatchParams,
    pub geom: GeomParams,
    pub refine: RefineParams,
    /// Run median filtering and global refinement after each scale.
    pub refine_enabled: bool,
    pub fusion: FusionParams,
    pub seeding: SeedConfig,
    pub upsample: UpsampleParams,
    /// Cost margin by which a random hypothesis must win during detail
    /// restoration.
    pub restore_margin: f64,
    pub depth_range: DepthRange,
    /// Sources closer than this (meters) to the reference are skipped; 0
    /// disables the filter.
    pub min_baseline: f64,
    pub seed: u64,
    /// Worker threads; 0 lets the runtime decide.
    pub threads: usize,
    /// Number of pyramid levels processed, counted from the finest.
    pub scales: usize,
    pub output_dir: PathBuf,
    pub dump_intermediate: bool,
    pub intrinsics: Option<CameraIntrinsics>,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            matching: MatchParams::default(),
            geom: GeomParams::default(),
            refine: RefineParams::default(),
            refine_enabled: true,
            fusion: FusionParams::default(),
            seeding: SeedConfig::default(),
            upsample: UpsampleParams::default(),
            restore_margin: 0.1,
            depth_range: DepthRange { min: 0.5, max: 80.0 },
            min_baseline: 0.0,
            seed: 0,
            threads: 0,
            scales: NUM_LEVELS,
            output_dir: PathBuf::from("output"),
            dump_intermediate: false,
            intrinsics: None,
        }
    }
}

fn parse_value<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| MvsError::Config(format!("invalid value `{value}` for `{key}`")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        _ => Err(MvsError::Config(format!("invalid boolean `{value}` for `{key}`"))),
    }
}

const INTRINSIC_KEYS: [&str; 4] = ["fx", "fy", "cx", "cy"];

impl PipelineConfig {
    /// Parse a configuration file on top of the defaults.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| MvsError::io(path, e))?;
        let mut cfg = PipelineConfig::default();
        cfg.apply_text(&text, path)?;
        Ok(cfg)
    }

    pub fn apply_text(&mut self, text: &str, path: &Path) -> Result<()> {
        let mut intrinsics: [Option<f64>; 4] = [None; 4];
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                return Err(MvsError::parse(path, i + 1, format!("expected `key = value`, got `{line}`")));
            };
            let (k, v) = (k.trim(), v.trim());
            if let Some(pos) = INTRINSIC_KEYS.iter().position(|n| *n == k) {
                intrinsics[pos] = Some(parse_value(k, v).map_err(|e| MvsError::parse(path, i + 1, e.to_string()))?);
                continue;
            }
            self.set(k, v).map_err(|e| MvsError::parse(path, i + 1, e.to_string()))?;
        }
        match intrinsics {
            [None, None, None, None] => {}
            [Some(fx), Some(fy), Some(cx), Some(cy)] => {
                self.intrinsics = Some(CameraIntrinsics {
                    fx,
                    fy,
                    cx,
                    cy,
                    width: 0,
                    height: 0,
                });
            }
            _ => return Err(MvsError::Config("fx, fy, cx and cy must be given together".into())),
        }
        Ok(())
    }

    /// Set one key. Unknown keys are rejected.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let m = &mut self.matching;
        let g = &mut self.geom;
        let r = &mut self.refine;
        let f = &mut self.fusion;
        let s = &mut self.seeding;
        let v = value;
        match key {
            "photo_iterations" => m.photo_iterations = parse_value(key, v)?,
            "planar_iterations" => m.planar_iterations = parse_value(key, v)?,
            "geom_iterations" => g.iterations = parse_value(key, v)?,
            "num_sources" => m.num_sources = parse_value(key, v)?,
            "prior_threshold" => m.prior_threshold = parse_value(key, v)?,
            "coarse_patch_radius" => m.coarse_patch_radius = parse_value(key, v)?,
            "fine_patch_radius" => m.fine_patch_radius = parse_value(key, v)?,
            "patch_step" => m.patch_step = parse_value(key, v)?,
            "strip_length" => m.strip_length = parse_value(key, v)?,
            "quadrant_extent" => m.quadrant_extent = parse_value(key, v)?,
            "view_weight_beta" => m.view_weight_beta = parse_value(key, v)?,
            "photo_depth_perturbation" => m.photo_perturbation.depth = parse_value(key, v)?,
            "photo_normal_perturbation_deg" => m.photo_perturbation.normal = parse_value::<f64>(key, v)?.to_radians(),
            "planar_depth_perturbation" => m.planar_perturbation.depth = parse_value(key, v)?,
            "planar_normal_perturbation_deg" => m.planar_perturbation.normal = parse_value::<f64>(key, v)?.to_radians(),
            "geom_depth_perturbation" => m.geom_perturbation.depth = parse_value(key, v)?,
            "geom_normal_perturbation_deg" => m.geom_perturbation.normal = parse_value::<f64>(key, v)?.to_radians(),
            "planar_weight" => m.planar.weight = parse_value(key, v)?,
            "planar_depth_truncation" => m.planar.depth_truncation = parse_value(key, v)?,
            "planar_angle_truncation_deg" => m.planar.angle_truncation_deg = parse_value(key, v)?,
            "rep_weight" => g.rep_weight = parse_value(key, v)?,
            "cons_weight" => g.cons_weight = parse_value(key, v)?,
            "tau" => g.tau = parse_value(key, v)?,
            "support_radius" => g.support_radius = parse_value(key, v)?,
            "refine" => self.refine_enabled = parse_bool(key, v)?,
            "smoothness" => r.smoothness = parse_value(key, v)?,
            "refine_max_sweeps" => r.max_sweeps = parse_value(key, v)?,
            "refine_tolerance" => r.tolerance = parse_value(key, v)?,
            "conf_low" => r.conf_low = parse_value(key, v)?,
            "conf_high" => r.conf_high = parse_value(key, v)?,
            "fusion_min_views" => f.min_views = parse_value(key, v)?,
            "fusion_reproj_threshold" => f.reproj_threshold = parse_value(key, v)?,
            "fusion_depth_threshold" => f.depth_threshold = parse_value(key, v)?,
            "fusion_angle_threshold_deg" => f.angle_threshold_deg = parse_value(key, v)?,
            "seed_mode" => {
                s.mode = match v {
                    "densify" => SeedMode::Densify,
                    "triangulate" => SeedMode::Triangulate,
                    "random" => SeedMode::Random,
                    _ => return Err(MvsError::Config(format!("invalid seed mode `{v}`"))),
                }
            }
            "seed_radius" => s.radius = parse_value(key, v)?,
            "seed_depth_sigma" => s.depth_sigma = parse_value(key, v)?,
            "seed_normal_sigma" => s.normal_sigma = parse_value(key, v)?,
            "seed_anchor" => s.anchor = parse_bool(key, v)?,
            "upsample_radius" => self.upsample.radius = parse_value(key, v)?,
            "upsample_sigma_spatial" => self.upsample.sigma_spatial = parse_value(key, v)?,
            "upsample_sigma_range" => self.upsample.sigma_range = parse_value(key, v)?,
            "restore_margin" => self.restore_margin = parse_value(key, v)?,
            "depth_min" => self.depth_range.min = parse_value(key, v)?,
            "depth_max" => self.depth_range.max = parse_value(key, v)?,
            "min_baseline" => self.min_baseline = parse_value(key, v)?,
            "seed" => self.seed = parse_value(key, v)?,
            "threads" => self.threads = parse_value(key, v)?,
            "scales" => self.scales = parse_value(key, v)?,
            "output_dir" => self.output_dir = PathBuf::from(v),
            "dump_intermediate" => self.dump_intermediate = parse_bool(key, v)?,
            _ => return Err(MvsError::Config(format!("unknown key `{key}`"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.matching.validate()?;
        self.geom.validate()?;
        self.refine.validate()?;
        self.fusion.validate()?;
        self.seeding.validate()?;
        DepthRange::new(self.depth_range.min, self.depth_range.max)
            .map_err(|e| MvsError::Config(e.to_string()))?;
        if !(1..=NUM_LEVELS).contains(&self.scales) {
            return Err(MvsError::Config(format!("scales must be between 1 and {NUM_LEVELS}")));
        }
        if !(self.restore_margin >= 0.0) {
            return Err(MvsError::Config("restore margin must be non-negative".into()));
        }
        if !(self.min_baseline >= 0.0) {
            return Err(MvsError::Config("minimum baseline must be non-negative".into()));
        }
        let u = &self.upsample;
        if !(u.sigma_spatial > 0.0 && u.sigma_range > 0.0) {
            return Err(MvsError::Config("upsampling sigmas must be positive".into()));
        }
        Ok(())
    }

    /// Serialize every key with its current value.
    pub fn to_text(&self) -> String {
        let m = &self.matching;
        let g = &self.geom;
        let r = &self.refine;
        let f = &self.fusion;
        let s = &self.seeding;
        let mode = match s.mode {
            SeedMode::Densify => "densify",
            SeedMode::Triangulate => "triangulate",
            SeedMode::Random => "random",
        };
        let mut out = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(out, "{k} = {v}");
        };
        kv("photo_iterations", m.photo_iterations.to_string());
        kv("planar_iterations", m.planar_iterations.to_string());
        kv("geom_iterations", g.iterations.to_string());
        kv("num_sources", m.num_sources.to_string());
        kv("prior_threshold", format!("{:?}", m.prior_threshold));
        kv("coarse_patch_radius", m.coarse_patch_radius.to_string());
        kv("fine_patch_radius", m.fine_patch_radius.to_string());
        kv("patch_step", m.patch_step.to_string());
        kv("strip_length", m.strip_length.to_string());
        kv("quadrant_extent", m.quadrant_extent.to_string());
        kv("view_weight_beta", format!("{:?}", m.view_weight_beta));
        kv("photo_depth_perturbation", format!("{:?}", m.photo_perturbation.depth));
        kv("photo_normal_perturbation_deg", format!("{:?}", m.photo_perturbation.normal.to_degrees()));
        kv("planar_depth_perturbation", format!("{:?}", m.planar_perturbation.depth));
        kv("planar_normal_perturbation_deg", format!("{:?}", m.planar_perturbation.normal.to_degrees()));
        kv("geom_depth_perturbation", format!("{:?}", m.geom_perturbation.depth));
        kv("geom_normal_perturbation_deg", format!("{:?}", m.geom_perturbation.normal.to_degrees()));
        kv("planar_weight", format!("{:?}", m.planar.weight));
        kv("planar_depth_truncation", format!("{:?}", m.planar.depth_truncation));
        kv("planar_angle_truncation_deg", format!("{:?}", m.planar.angle_truncation_deg));
        kv("rep_weight", format!("{:?}", g.rep_weight));
        kv("cons_weight", format!("{:?}", g.cons_weight));
        kv("tau", format!("{:?}", g.tau));
        kv("support_radius", g.support_radius.to_string());
        kv("refine", self.refine_enabled.to_string());
        kv("smoothness", format!("{:?}", r.smoothness));
        kv("refine_max_sweeps", r.max_sweeps.to_string());
        kv("refine_tolerance", format!("{:?}", r.tolerance));
        kv("conf_low", format!("{:?}", r.conf_low));
        kv("conf_high", format!("{:?}", r.conf_high));
        kv("fusion_min_views", f.min_views.to_string());
        kv("fusion_reproj_threshold", format!("{:?}", f.reproj_threshold));
        kv("fusion_depth_threshold", format!("{:?}", f.depth_threshold));
        kv("fusion_angle_threshold_deg", format!("{:?}", f.angle_threshold_deg));
        kv("seed_mode", mode.to_string());
        kv("seed_radius", s.radius.to_string());
        kv("seed_depth_sigma", format!("{:?}", s.depth_sigma));
        kv("seed_normal_sigma", format!("{:?}", s.normal_sigma));
        kv("seed_anchor", s.anchor.to_string());
        kv("upsample_radius", self.upsample.radius.to_string());
        kv("upsample_sigma_spatial", format!("{:?}", self.upsample.sigma_spatial));
        kv("upsample_sigma_range", format!("{:?}", self.upsample.sigma_range));
        kv("restore_margin", format!("{:?}", self.restore_margin));
        kv("depth_min", format!("{:?}", self.depth_range.min));
        kv("depth_max", format!("{:?}", self.depth_range.max));
        kv("min_baseline", format!("{:?}", self.min_baseline));
        kv("seed", self.seed.to_string());
        kv("threads", self.threads.to_string());
        kv("scales", self.scales.to_string());
        kv("output_dir", self.output_dir.display().to_string());
        kv("dump_intermediate", self.dump_intermediate.to_string());
        if let Some(c) = &self.intrinsics {
            kv("fx", format!("{:?}", c.fx));
            kv("fy", format!("{:?}", c.fy));
            kv("cx", format!("{:?}", c.cx));
            kv("cy", format!("{:?}", c.cy));
        }
        out
    }
}
