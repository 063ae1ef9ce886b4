#![allow(dead_code)]

use planemvs::config::PipelineConfig;
use planemvs::geometry::CameraIntrinsics;
use planemvs::grid::{DepthMap, Grid};
use planemvs::pipeline::{FrameInput, FrameSet, PipelineOutput};
use planemvs::scene::{preset_plane_scene, render_scene, RenderedView, SceneSpec};
use planemvs::seeding::SeedSet;

pub struct Rendered {
    pub spec: SceneSpec,
    pub views: Vec<RenderedView>,
}

impl Rendered {
    /// The preset scene at full size.
    pub fn preset(band: bool) -> Self {
        Self::from_spec(preset_plane_scene(band))
    }

    /// The preset scene at half resolution, keeping the first `frames` poses
    /// closest to the middle view.
    pub fn small(band: bool, frames: usize) -> Self {
        let mut spec = preset_plane_scene(band);
        let k = spec.intrinsics;
        spec.intrinsics = CameraIntrinsics::new(k.fx / 2.0, k.fy / 2.0, k.cx / 2.0, k.cy / 2.0, k.width / 2, k.height / 2).unwrap();
        let n = spec.scene.poses.len();
        let start = (n - frames) / 2;
        spec.scene.poses = spec.scene.poses[start..start + frames].to_vec();
        Self::from_spec(spec)
    }

    pub fn from_spec(spec: SceneSpec) -> Self {
        let views = render_scene(&spec.scene, &spec.intrinsics).unwrap();
        Rendered { spec, views }
    }

    pub fn config(&self) -> PipelineConfig {
        PipelineConfig {
            depth_range: self.spec.scene.depth_bounds(&self.views).unwrap(),
            intrinsics: Some(self.spec.intrinsics),
            ..PipelineConfig::default()
        }
    }

    pub fn frame_set(&self) -> FrameSet {
        self.frame_set_with(SeedSet::new)
    }

    pub fn frame_set_with(&self, seeds: impl Fn(usize) -> SeedSet) -> FrameSet {
        FrameSet {
            intrinsics: self.spec.intrinsics,
            frames: self
                .views
                .iter()
                .enumerate()
                .map(|(i, v)| FrameInput {
                    image: v.image.clone(),
                    pose: v.pose,
                    seeds: seeds(i),
                })
                .collect(),
        }
    }

    /// Pixels of view `i` that see the textureless band.
    pub fn band_mask(&self, i: usize) -> Grid<bool> {
        let view = &self.views[i];
        let surface = &self.spec.scene.surfaces[0];
        let cam = &self.spec.intrinsics;
        Grid::from_fn(cam.width, cam.height, |x, y| {
            let d = *view.depth.get(x, y);
            if !(d > 0.0) {
                return false;
            }
            let world = view.pose.transform_point(&(cam.pixel_ray(x, y) * d));
            let rel = world - surface.point;
            surface
                .bands
                .iter()
                .any(|b| b.contains(rel.dot(&surface.u_axis), rel.dot(&surface.v_axis)))
        })
    }

    /// RMSE over the band pixels of all frames together.
    pub fn pooled_band_rmse(&self, output: &PipelineOutput) -> f64 {
        let (mut sq, mut n) = (0.0, 0usize);
        for (i, (est, view)) in output.estimates.iter().zip(&self.views).enumerate() {
            let mask = self.band_mask(i);
            for ((&m, &p), &g) in mask.data().iter().zip(est.depth.data()).zip(view.depth.data()) {
                if m {
                    sq += (p - g) * (p - g);
                    n += 1;
                }
            }
        }
        assert!(n > 0, "no band pixels");
        (sq / n as f64).sqrt()
    }
}

/// Pixels whose whole 7x7 neighborhood has valid ground truth.
pub fn interior_mask(gt: &DepthMap) -> Grid<bool> {
    let (w, h) = (gt.width(), gt.height());
    Grid::from_fn(w, h, |x, y| {
        if x < 3 || y < 3 || x + 3 >= w || y + 3 >= h {
            return false;
        }
        (y - 3..=y + 3).all(|qy| (x - 3..=x + 3).all(|qx| *gt.get(qx, qy) > 0.0))
    })
}

/// Straightforward evaluation of the depth metrics: collect the valid
/// pairs first, then evaluate each metric as its own pass.
pub struct BruteMetrics {
    pub abs_rel: f64,
    pub sq_rel: f64,
    pub rmse: f64,
    pub rmse_log: f64,
    pub delta: [f64; 3],
    pub count: usize,
}

pub fn brute_metrics(pred: &[f64], gt: &[f64], cap: f64) -> BruteMetrics {
    let pairs: Vec<(f64, f64)> = pred
        .iter()
        .zip(gt)
        .filter(|(_, g)| **g > 0.0)
        .map(|(p, g)| {
            let p = if p.is_nan() { 1e-3 } else { p.max(1e-3).min(cap) };
            (p, g.min(cap))
        })
        .collect();
    let n = pairs.len() as f64;
    let mean = |f: &dyn Fn(f64, f64) -> f64| pairs.iter().map(|&(p, g)| f(p, g)).sum::<f64>() / n;
    let delta = |k: i32| {
        pairs
            .iter()
            .filter(|(p, g)| f64::max(p / g, g / p) < 1.25f64.powi(k))
            .count() as f64
            / n
    };
    BruteMetrics {
        abs_rel: mean(&|p, g| (p - g).abs() / g),
        sq_rel: mean(&|p, g| (p - g).powi(2) / g),
        rmse: mean(&|p, g| (p - g).powi(2)).sqrt(),
        rmse_log: mean(&|p, g| (p.ln() - g.ln()).powi(2)).sqrt(),
        delta: [delta(1), delta(2), delta(3)],
        count: pairs.len(),
    }
}
