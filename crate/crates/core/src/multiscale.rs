//! Three-level image pyramid and the transfer of hypotheses between levels.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{MvsError, Result};
use crate::frame::CameraFrame;
use crate::geometry::{CameraIntrinsics, DepthRange, PlaneHypothesis, Vec3};
use crate::grid::{color_distance, ColorImage, Grid};
use crate::matcher::{aggregate_cost, derive_seed, HypothesisGrid, MatchContext, MAX_VIEWS};
use crate::seeding::random_hypothesis;

pub const NUM_LEVELS: usize = 3;
/// Smallest accepted full-resolution image side.
pub const MIN_IMAGE_SIZE: usize = 64;

/// Frames of one view at scales 1/4, 1/2 and 1 (coarsest first).
#[derive(Debug, Clone)]
pub struct Pyramid {
    pub levels: Vec<CameraFrame>,
}

impl Pyramid {
    pub fn finest(&self) -> &CameraFrame {
        &self.levels[NUM_LEVELS - 1]
    }

    pub fn level(&self, level: usize) -> &CameraFrame {
        &self.levels[level]
    }
}

/// Dimensions of pyramid level `level` (0 = coarsest) for a full-size image.
pub fn level_dims(width: usize, height: usize, level: usize) -> (usize, usize) {
    let div = 1usize << (NUM_LEVELS - 1 - level);
    (width.div_ceil(div), height.div_ceil(div))
}

/// Scale factor of pyramid level `level` relative to full resolution.
pub fn level_scale(level: usize) -> f64 {
    0.5f64.powi((NUM_LEVELS - 1 - level) as i32)
}

/// Blur with the [1 3 3 1]/8 kernel centered between fine pixels 2i and
/// 2i+1, then keep one sample per 2x2 block.
pub fn downsample(img: &ColorImage) -> ColorImage {
    const K: [f32; 4] = [0.125, 0.375, 0.375, 0.125];
    let (w, h) = (img.width(), img.height());
    let (cw, ch) = (w.div_ceil(2), h.div_ceil(2));
    let clamp = |v: isize, n: usize| v.clamp(0, n as isize - 1) as usize;
    let horizontal = Grid::from_fn(cw, h, |x, y| {
        let mut acc = [0.0f32; 3];
        for (k, wk) in K.iter().enumerate() {
            let sx = clamp(2 * x as isize - 1 + k as isize, w);
            let c = img.get(sx, y);
            for i in 0..3 {
                acc[i] += wk * c[i];
            }
        }
        acc
    });
    Grid::from_fn(cw, ch, |x, y| {
        let mut acc = [0.0f32; 3];
        for (k, wk) in K.iter().enumerate() {
            let sy = clamp(2 * y as isize - 1 + k as isize, h);
            let c = horizontal.get(x, sy);
            for i in 0..3 {
                acc[i] += wk * c[i];
            }
        }
        acc
    })
}

pub fn build_pyramid(frame: &CameraFrame) -> Result<Pyramid> {
    let (w, h) = (frame.width(), frame.height());
    if w < MIN_IMAGE_SIZE || h < MIN_IMAGE_SIZE {
        return Err(MvsError::InvalidInput(format!(
            "frame {}: {w}x{h} image is smaller than {MIN_IMAGE_SIZE}x{MIN_IMAGE_SIZE}",
            frame.index
        )));
    }
    let mut levels = vec![frame.clone()];
    let mut color = frame.color.clone();
    for level in (0..NUM_LEVELS - 1).rev() {
        color = downsample(&color);
        let (lw, lh) = level_dims(w, h, level);
        debug_assert_eq!((color.width(), color.height()), (lw, lh));
        let cam = frame.intrinsics.scaled(level_scale(level), lw, lh);
        levels.push(CameraFrame::new(frame.index, cam, frame.pose, color.clone())?);
    }
    levels.reverse();
    Ok(Pyramid { levels })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UpsampleParams {
    /// Half-size of the coarse window.
    pub radius: usize,
    /// Spatial standard deviation in coarse pixels.
    pub sigma_spatial: f64,
    /// Color standard deviation.
    pub sigma_range: f64,
}

impl Default for UpsampleParams {
    fn default() -> Self {
        UpsampleParams {
            radius: 2,
            sigma_spatial: 1.0,
            sigma_range: 0.1,
        }
    }
}

/// Joint bilateral upsampling of a coarse hypothesis field to the fine
/// camera. Each fine pixel averages the coarse depths and normals in a
/// window around its coarse position, weighted by spatial distance and by
/// the difference between its fine color and the coarse pixel colors.
#[allow(clippy::too_many_arguments)]
pub fn joint_bilateral_upsample(
    coarse: &Grid<PlaneHypothesis>,
    coarse_image: &ColorImage,
    fine_image: &ColorImage,
    fine_cam: &CameraIntrinsics,
    range: &DepthRange,
    params: &UpsampleParams,
) -> Result<Grid<PlaneHypothesis>> {
    let (fw, fh) = (fine_image.width(), fine_image.height());
    let (cw, ch) = (coarse.width(), coarse.height());
    if !coarse.same_shape(coarse_image) || fw.div_ceil(2) != cw || fh.div_ceil(2) != ch {
        return Err(MvsError::InvalidInput(format!(
            "cannot upsample {cw}x{ch} hypotheses to a {fw}x{fh} image"
        )));
    }
    if fine_cam.width != fw || fine_cam.height != fh {
        return Err(MvsError::InvalidInput("fine camera does not match the fine image".into()));
    }
    let r = params.radius as isize;
    let s2 = 2.0 * params.sigma_spatial * params.sigma_spatial;
    let r2 = 2.0 * params.sigma_range * params.sigma_range;
    let rows: Vec<Vec<PlaneHypothesis>> = (0..fh)
        .into_par_iter()
        .map(|y| {
            (0..fw)
                .map(|x| {
                    let u = (x as f64 + 0.5) * 0.5;
                    let v = (y as f64 + 0.5) * 0.5;
                    let (cx, cy) = ((u as usize).min(cw - 1), (v as usize).min(ch - 1));
                    let ip = fine_image.get(x, y);
                    let mut wsum = 0.0;
                    let mut dsum = 0.0;
                    let mut nsum = Vec3::zeros();
                    for dy in -r..=r {
                        for dx in -r..=r {
                            let (qx, qy) = (cx as isize + dx, cy as isize + dy);
                            if qx < 0 || qy < 0 || qx as usize >= cw || qy as usize >= ch {
                                continue;
                            }
                            let (qx, qy) = (qx as usize, qy as usize);
                            let ddx = qx as f64 + 0.5 - u;
                            let ddy = qy as f64 + 0.5 - v;
                            let cd = color_distance(ip, coarse_image.get(qx, qy));
                            let w = (-(ddx * ddx + ddy * ddy) / s2 - cd * cd / r2).exp();
                            let hq = coarse.get(qx, qy);
                            wsum += w;
                            dsum += w * hq.depth;
                            nsum += hq.normal * w;
                        }
                    }
                    let nearest = coarse.get(cx, cy);
                    let ray = fine_cam.pixel_ray(x, y);
                    let depth = if wsum > 0.0 {
                        range.clamp(dsum / wsum)
                    } else {
                        range.clamp(nearest.depth)
                    };
                    let facing = |n: Vec3| -> Option<Vec3> {
                        let n = n.try_normalize(1e-9)?;
                        (n.dot(&ray) < -1e-6 * ray.norm()).then_some(n)
                    };
                    let normal = facing(nsum)
                        .or_else(|| facing(nearest.normal))
                        .unwrap_or_else(|| -ray.normalize());
                    PlaneHypothesis { depth, normal }
                })
                .collect()
        })
        .collect();
    Grid::from_vec(fw, fh, rows.into_iter().flatten().collect())
}

/// Replace hypotheses that a fresh random hypothesis beats by more than
/// `margin` in aggregated photometric cost, both scored with the pixel's
/// current view weights. `grid` must hold up-to-date photometric view costs
/// and weights. Returns the number of replaced pixels.
pub fn detail_restore(
    ctx: &MatchContext<'_>,
    grid: &mut HypothesisGrid,
    margin: f64,
    seed: u64,
) -> usize {
    if !margin.is_finite() {
        return 0;
    }
    let k = grid.views();
    let w = grid.width();
    let snapshot: &HypothesisGrid = grid;
    let replacements: Vec<(usize, PlaneHypothesis, f64, [f64; MAX_VIEWS], [f64; MAX_VIEWS])> = (0..snapshot.height())
        .into_par_iter()
        .flat_map_iter(|y| {
            (0..w).filter_map(move |x| {
                let idx = y * w + x;
                let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[idx as u64]));
                let ray = ctx.camera().pixel_ray(x, y);
                let cand = random_hypothesis(&mut rng, &ctx.range, &ray);
                let mut views = [0.0; MAX_VIEWS];
                ctx.view_costs_into(x, y, &cand, &mut views[..k]);
                let weights = snapshot.pixel_view_weights(x, y);
                let old = aggregate_cost(snapshot.pixel_view_costs(x, y), weights);
                let new = aggregate_cost(&views[..k], weights);
                let mut kept = [0.0; MAX_VIEWS];
                kept[..k].copy_from_slice(weights);
                (new < old - margin).then_some((idx, cand, new, views, kept))
            })
        })
        .collect();
    let count = replacements.len();
    for (idx, h, cost, views, weights) in replacements {
        grid.hypotheses[idx] = h;
        grid.costs[idx] = cost;
        grid.view_costs[idx * k..idx * k + k].copy_from_slice(&views[..k]);
        grid.view_weights[idx * k..idx * k + k].copy_from_slice(&weights[..k]);
    }
    count
}
