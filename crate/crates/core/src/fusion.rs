//! Multi-view consistency gating of per-frame depth/normal maps and their
//! fusion into a colored, oriented point cloud.

use std::fs;
use std::path::Path;

use rayon::prelude::*;

use crate::error::{MvsError, Result};
use crate::frame::CameraFrame;
use crate::geometry::{angle_between, pixel_center, Pixel, Vec3};
use crate::grid::{DepthMap, Grid};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FusionParams {
    /// Minimum number of consistent source views.
    pub min_views: usize,
    /// Forward-backward reprojection threshold in pixels.
    pub reproj_threshold: f64,
    /// Depth difference threshold relative to the source depth.
    pub depth_threshold: f64,
    pub angle_threshold_deg: f64,
}

impl Default for FusionParams {
    fn default() -> Self {
        FusionParams {
            min_views: 2,
            reproj_threshold: 2.0,
            depth_threshold: 0.01,
            angle_threshold_deg: 10.0,
        }
    }
}

impl FusionParams {
    pub fn validate(&self) -> Result<()> {
        if self.min_views < 1 {
            return Err(MvsError::Config("fusion needs at least one consistent view".into()));
        }
        if !(self.reproj_threshold > 0.0 && self.depth_threshold > 0.0) {
            return Err(MvsError::Config("fusion thresholds must be positive".into()));
        }
        if !(self.angle_threshold_deg > 0.0 && self.angle_threshold_deg < 90.0) {
            return Err(MvsError::Config("fusion angle threshold must lie in (0, 90) degrees".into()));
        }
        Ok(())
    }
}

/// Final estimate of one frame at full resolution.
#[derive(Debug, Clone, Copy)]
pub struct FusionView<'a> {
    pub frame: &'a CameraFrame,
    pub depth: &'a DepthMap,
    /// Camera-frame normals.
    pub normals: &'a Grid<Vec3>,
}

/// A reference pixel's estimate observed in a source view.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Observation {
    /// Integer source pixel hit by the reference point.
    pub pixel: (usize, usize),
    /// World point of the source estimate at that pixel.
    pub point: Vec3,
    /// World normal of the source estimate.
    pub normal: Vec3,
}

/// Outcome of checking a reference estimate against one source view.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConsistencyCheck {
    pub reprojection_error: f64,
    pub relative_depth_error: f64,
    pub angle_deg: f64,
    pub observation: Observation,
}

impl ConsistencyCheck {
    pub fn passes(&self, params: &FusionParams) -> bool {
        self.reprojection_error < params.reproj_threshold
            && self.relative_depth_error < params.depth_threshold
            && self.angle_deg < params.angle_threshold_deg
    }
}

/// Measure how well the estimate at reference pixel `(x, y)` agrees with the
/// source estimate at the pixel it projects to. `None` when the point falls
/// behind the source camera, outside its image, or on an invalid source
/// estimate.
pub fn measure_consistency(reference: &FusionView<'_>, source: &FusionView<'_>, x: usize, y: usize) -> Option<ConsistencyCheck> {
    let d_ref = *reference.depth.get(x, y);
    if !(d_ref > 0.0) {
        return None;
    }
    let ref_cam = &reference.frame.intrinsics;
    let src_cam = &source.frame.intrinsics;
    let p = pixel_center(x, y);
    let world = reference.frame.pose.transform_point(&(ref_cam.ray(&p) * d_ref));
    let src_pose_inv = source.frame.pose.inverse();
    let x_src = src_pose_inv.transform_point(&world);
    if x_src.z <= 0.0 {
        return None;
    }
    let p_src = src_cam.project_unchecked(&x_src);
    let (sx, sy) = src_cam.pixel_index(&p_src)?;
    let d_src = *source.depth.get(sx, sy);
    if !(d_src > 0.0) {
        return None;
    }
    let src_point_cam = src_cam.pixel_ray(sx, sy) * d_src;
    let src_world = source.frame.pose.transform_point(&src_point_cam);
    let back = reference.frame.pose.inverse().transform_point(&src_world);
    if back.z <= 0.0 {
        return None;
    }
    let p_back: Pixel = ref_cam.project_unchecked(&back);
    let n_ref = reference.frame.pose.transform_vector(reference.normals.get(x, y));
    let n_src = source.frame.pose.transform_vector(source.normals.get(sx, sy));
    Some(ConsistencyCheck {
        reprojection_error: (p_back - p).norm(),
        relative_depth_error: (x_src.z - d_src).abs() / d_src,
        angle_deg: angle_between(&n_ref, &n_src).to_degrees(),
        observation: Observation {
            pixel: (sx, sy),
            point: src_world,
            normal: n_src,
        },
    })
}

pub fn check_consistency(
    reference: &FusionView<'_>,
    source: &FusionView<'_>,
    x: usize,
    y: usize,
    params: &FusionParams,
) -> bool {
    measure_consistency(reference, source, x, y).is_some_and(|c| c.passes(params))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FusedPoint {
    pub position: Vec3,
    pub normal: Vec3,
    pub color: [u8; 3],
    /// Index (into the fused views) of the reference view.
    pub reference: usize,
    pub pixel: (usize, usize),
    /// Number of consistent source views averaged into the point.
    pub support: usize,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct FusedCloud {
    pub points: Vec<FusedPoint>,
}

fn to_u8(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Fuse the views in order. Each unconsumed reference pixel gathers the
/// consistent, unconsumed observations in all other views; with at least
/// `min_views` of them, the averaged point is emitted and every contributing
/// pixel is marked consumed.
pub fn fuse(views: &[FusionView<'_>], params: &FusionParams) -> Result<FusedCloud> {
    params.validate()?;
    for v in views {
        let cam = &v.frame.intrinsics;
        if v.depth.width() != cam.width || v.depth.height() != cam.height || !v.depth.same_shape(v.normals) {
            return Err(MvsError::InvalidInput(format!(
                "frame {}: fusion maps do not match the camera",
                v.frame.index
            )));
        }
    }
    let mut consumed: Vec<Grid<bool>> = views
        .iter()
        .map(|v| Grid::new(v.frame.width(), v.frame.height(), false))
        .collect();
    let mut cloud = FusedCloud::default();
    for (r, reference) in views.iter().enumerate() {
        let (w, h) = (reference.frame.width(), reference.frame.height());
        let candidates: Vec<Vec<(usize, Observation)>> = (0..w * h)
            .into_par_iter()
            .map(|i| {
                let (x, y) = (i % w, i / w);
                if *consumed[r].get(x, y) {
                    return Vec::new();
                }
                views
                    .iter()
                    .enumerate()
                    .filter(|(s, _)| *s != r)
                    .filter_map(|(s, src)| {
                        measure_consistency(reference, src, x, y)
                            .filter(|c| c.passes(params))
                            .map(|c| (s, c.observation))
                    })
                    .collect()
            })
            .collect();
        for (i, obs) in candidates.into_iter().enumerate() {
            let (x, y) = (i % w, i / w);
            if *consumed[r].get(x, y) {
                continue;
            }
            let obs: Vec<(usize, Observation)> = obs
                .into_iter()
                .filter(|(s, o)| !*consumed[*s].get(o.pixel.0, o.pixel.1))
                .collect();
            if obs.len() < params.min_views {
                continue;
            }
            let d = *reference.depth.get(x, y);
            let cam = &reference.frame.intrinsics;
            let mut pos = reference.frame.pose.transform_point(&(cam.pixel_ray(x, y) * d));
            let mut nrm = reference.frame.pose.transform_vector(reference.normals.get(x, y));
            for (s, o) in &obs {
                pos += o.point;
                nrm += o.normal;
                consumed[*s].set(o.pixel.0, o.pixel.1, true);
            }
            consumed[r].set(x, y, true);
            let Some(normal) = nrm.try_normalize(1e-12) else {
                continue;
            };
            let c = reference.frame.color.get(x, y);
            cloud.points.push(FusedPoint {
                position: pos / (obs.len() + 1) as f64,
                normal,
                color: [to_u8(c[0]), to_u8(c[1]), to_u8(c[2])],
                reference: r,
                pixel: (x, y),
                support: obs.len(),
            });
        }
    }
    Ok(cloud)
}

/// Binary little-endian PLY with float positions and normals and 8-bit
/// colors.
pub fn ply_bytes(cloud: &FusedCloud) -> Vec<u8> {
    let header = format!(
        "ply\nformat binary_little_endian 1.0\nelement vertex {}\n\
         property float x\nproperty float y\nproperty float z\n\
         property float nx\nproperty float ny\nproperty float nz\n\
         property uchar red\nproperty uchar green\nproperty uchar blue\nend_header\n",
        cloud.points.len()
    );
    let mut out = header.into_bytes();
    out.reserve(cloud.points.len() * 27);
    for p in &cloud.points {
        for v in [p.position.x, p.position.y, p.position.z, p.normal.x, p.normal.y, p.normal.z] {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
        out.extend_from_slice(&p.color);
    }
    out
}

pub fn write_ply(cloud: &FusedCloud, path: &Path) -> Result<()> {
    if cloud
        .points
        .iter()
        .any(|p| !p.position.iter().chain(p.normal.iter()).all(|v| v.is_finite()))
    {
        return Err(MvsError::InvalidOutput(format!("{}: non-finite point", path.display())));
    }
    fs::write(path, ply_bytes(cloud)).map_err(|e| MvsError::io(path, e))
}
