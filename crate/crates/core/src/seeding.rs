//! Initial hypotheses from sparse depth seeds, with random fill-in.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

use crate::error::{MvsError, Result};
use crate::geometry::{
    depth_of_plane_at, pixel_center, random_axis, random_unit_normal, rotate_facing, CameraIntrinsics, DepthRange, Pixel,
    PlaneHypothesis, Vec3,
};
use crate::grid::Grid;
use crate::matcher::derive_seed;
use crate::triangulation::{rasterize_planes, TriangleFilter};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SeedSource {
    Slam,
    Range,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Seed {
    pub pixel: Pixel,
    pub depth: f64,
    pub source: SeedSource,
}

impl Seed {
    /// Integer pixel the seed falls in.
    pub fn cell(&self) -> (i64, i64) {
        (self.pixel.x.floor() as i64, self.pixel.y.floor() as i64)
    }
}

/// Sparse depth observations of one frame. At most one seed per pixel; a
/// later insertion replaces an earlier one at the same pixel.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SeedSet {
    pub frame: usize,
    entries: Vec<Seed>,
}

impl SeedSet {
    pub fn new(frame: usize) -> Self {
        SeedSet {
            frame,
            entries: Vec::new(),
        }
    }

    pub fn insert(&mut self, seed: Seed) {
        let cell = seed.cell();
        if let Some(existing) = self.entries.iter_mut().find(|s| s.cell() == cell) {
            *existing = seed;
        } else {
            self.entries.push(seed);
        }
    }

    pub fn entries(&self) -> &[Seed] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Check that every seed lies inside the image and the depth range.
    pub fn validate(&self, cam: &CameraIntrinsics, range: &DepthRange) -> Result<()> {
        for s in &self.entries {
            if !cam.contains(&s.pixel) {
                return Err(MvsError::InvalidInput(format!(
                    "seed at ({}, {}) outside the {}x{} image",
                    s.pixel.x, s.pixel.y, cam.width, cam.height
                )));
            }
            if !range.contains(s.depth) {
                return Err(MvsError::InvalidInput(format!(
                    "seed depth {} outside [{}, {}]",
                    s.depth, range.min, range.max
                )));
            }
        }
        Ok(())
    }

    /// The same seeds with pixel coordinates multiplied by `factor`, as seen
    /// at another pyramid level.
    pub fn rescaled(&self, factor: f64) -> SeedSet {
        let mut out = SeedSet::new(self.frame);
        for s in &self.entries {
            out.insert(Seed {
                pixel: Pixel::new(s.pixel.x * factor, s.pixel.y * factor),
                ..*s
            });
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SeedMode {
    Densify,
    Triangulate,
    Random,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SeedConfig {
    pub mode: SeedMode,
    pub radius: usize,
    /// Relative depth noise (standard deviation).
    pub depth_sigma: f64,
    /// Normal rotation noise in radians (standard deviation).
    pub normal_sigma: f64,
    /// At every scale, add seeds as planar-prior vertices and pin seed
    /// pixels to their seed depth at full confidence during refinement.
    pub anchor: bool,
}

impl Default for SeedConfig {
    fn default() -> Self {
        SeedConfig {
            mode: SeedMode::Densify,
            radius: 2,
            depth_sigma: 0.02,
            normal_sigma: 0.1,
            anchor: true,
        }
    }
}

impl SeedConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.depth_sigma >= 0.0 && self.normal_sigma >= 0.0) {
            return Err(MvsError::Config("seed noise sigmas must be non-negative".into()));
        }
        Ok(())
    }
}

/// Spread every seed's depth over the square block of Chebyshev radius
/// `radius` around it. Where blocks overlap the nearest seed wins, then the
/// smaller depth.
pub fn densify(seeds: &SeedSet, radius: usize, width: usize, height: usize) -> Grid<Option<f64>> {
    let mut out: Grid<Option<f64>> = Grid::new(width, height, None);
    let mut best: Grid<(i64, f64)> = Grid::new(width, height, (i64::MAX, f64::INFINITY));
    let r = radius as i64;
    for s in seeds.entries() {
        let (sx, sy) = s.cell();
        for y in (sy - r).max(0)..=(sy + r).min(height as i64 - 1) {
            for x in (sx - r).max(0)..=(sx + r).min(width as i64 - 1) {
                let d2 = (x - sx).pow(2) + (y - sy).pow(2);
                let slot = best.get_mut(x as usize, y as usize);
                if d2 < slot.0 || (d2 == slot.0 && s.depth < slot.1) {
                    *slot = (d2, s.depth);
                    out.set(x as usize, y as usize, Some(s.depth));
                }
            }
        }
    }
    out
}

/// The seed inside each pixel of a `width` x `height` grid; with several,
/// the one nearest the pixel center wins, then the smaller depth.
pub fn seed_anchors(seeds: &SeedSet, width: usize, height: usize) -> Grid<Option<Seed>> {
    let mut out: Grid<Option<Seed>> = Grid::new(width, height, None);
    let offset = |s: &Seed, x: usize, y: usize| (s.pixel - pixel_center(x, y)).norm_squared();
    for s in seeds.entries() {
        let (x, y) = s.cell();
        if x < 0 || y < 0 || x as usize >= width || y as usize >= height {
            continue;
        }
        let (x, y) = (x as usize, y as usize);
        let slot = out.get_mut(x, y);
        let better = match slot {
            None => true,
            Some(cur) => {
                let (a, b) = (offset(s, x, y), offset(cur, x, y));
                a < b || (a == b && s.depth < cur.depth)
            }
        };
        if better {
            *slot = Some(*s);
        }
    }
    out
}

/// Replace the refinement input at every anchored pixel by the seed depth,
/// carried from the seed location to the pixel center along the pixel's
/// plane, with confidence 1. Returns the number of anchored pixels.
pub fn apply_anchors(
    anchors: &Grid<Option<Seed>>,
    normals: &Grid<Vec3>,
    cam: &CameraIntrinsics,
    depth: &mut Grid<f64>,
    conf: &mut Grid<f64>,
    range: &DepthRange,
) -> usize {
    let mut n = 0;
    for y in 0..anchors.height() {
        for x in 0..anchors.width() {
            if let Some(s) = anchors.get(x, y) {
                let plane = PlaneHypothesis {
                    depth: s.depth,
                    normal: *normals.get(x, y),
                };
                let d = depth_of_plane_at(&plane, &s.pixel, &pixel_center(x, y), cam)
                    .ok()
                    .filter(|d| *d > 0.0)
                    .unwrap_or(s.depth);
                depth.set(x, y, range.clamp(d));
                conf.set(x, y, 1.0);
                n += 1;
            }
        }
    }
    n
}

/// Smallest angle (degrees) between a seed triangle's plane and the viewing
/// ray for the triangle to be used.
const SEED_MIN_VIEW_ANGLE_DEG: f64 = 5.0;

/// Per-pixel planes from a Delaunay triangulation of the seeds.
pub fn triangulate_seeds(seeds: &SeedSet, cam: &CameraIntrinsics) -> Result<Grid<Option<PlaneHypothesis>>> {
    let samples: Vec<(Pixel, f64)> = seeds.entries().iter().map(|s| (s.pixel, s.depth)).collect();
    let filter = TriangleFilter {
        min_corner_angle_deg: None,
        min_view_angle_deg: Some(SEED_MIN_VIEW_ANGLE_DEG),
    };
    Ok(rasterize_planes(&samples, cam, filter, None)?.planes)
}

/// Partial initialization produced by one of the seeding modes.
#[derive(Debug, Clone)]
pub enum PartialInit {
    Depths(Grid<Option<f64>>),
    Planes(Grid<Option<PlaneHypothesis>>),
    Empty,
}

impl PartialInit {
    /// Run the configured seeding mode, falling back to densification when
    /// triangulation is impossible.
    pub fn from_seeds(seeds: &SeedSet, cam: &CameraIntrinsics, cfg: &SeedConfig) -> PartialInit {
        match cfg.mode {
            SeedMode::Random => PartialInit::Empty,
            _ if seeds.is_empty() => PartialInit::Empty,
            SeedMode::Densify => PartialInit::Depths(densify(seeds, cfg.radius, cam.width, cam.height)),
            SeedMode::Triangulate => match triangulate_seeds(seeds, cam) {
                Ok(planes) => PartialInit::Planes(planes),
                Err(e) => {
                    log::warn!("frame {}: {e}; falling back to densification", seeds.frame);
                    PartialInit::Depths(densify(seeds, cfg.radius, cam.width, cam.height))
                }
            },
        }
    }
}

/// Complete hypothesis field: seeded pixels get a noisy version of their
/// seed, everything else a uniform random depth and camera-facing normal.
/// Each image row draws from its own stream derived from `seed`.
pub fn init_hypotheses(
    partial: &PartialInit,
    cam: &CameraIntrinsics,
    range: &DepthRange,
    cfg: &SeedConfig,
    seed: u64,
) -> Grid<PlaneHypothesis> {
    let (w, h) = (cam.width, cam.height);
    let depth_noise = Normal::new(0.0, cfg.depth_sigma).ok();
    let normal_noise = Normal::new(0.0, cfg.normal_sigma).ok();
    let rows: Vec<Vec<PlaneHypothesis>> = (0..h)
        .into_par_iter()
        .map(|y| {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[y as u64]));
            (0..w)
                .map(|x| {
                    let ray = cam.pixel_ray(x, y);
                    let noisy_depth = |d: f64, rng: &mut ChaCha8Rng| match (cfg.depth_sigma > 0.0, depth_noise) {
                        (true, Some(n)) => range.clamp(d * (1.0 + n.sample(rng))),
                        _ => range.clamp(d),
                    };
                    match partial {
                        PartialInit::Depths(g) => {
                            if let Some(d) = g.get(x, y) {
                                let depth = noisy_depth(*d, &mut rng);
                                return PlaneHypothesis {
                                    depth,
                                    normal: random_unit_normal(&mut rng, &ray),
                                };
                            }
                        }
                        PartialInit::Planes(g) => {
                            if let Some(p) = g.get(x, y) {
                                let depth = noisy_depth(p.depth, &mut rng);
                                let normal = match (cfg.normal_sigma > 0.0, normal_noise) {
                                    (true, Some(n)) => {
                                        let axis = random_axis(&mut rng);
                                        rotate_facing(&p.normal, &axis, n.sample(&mut rng), &ray)
                                    }
                                    _ => p.normal,
                                };
                                return PlaneHypothesis { depth, normal };
                            }
                        }
                        PartialInit::Empty => {}
                    }
                    random_hypothesis(&mut rng, range, &ray)
                })
                .collect()
        })
        .collect();
    let data = rows.into_iter().flatten().collect();
    Grid::from_vec(w, h, data).expect("row lengths match the camera")
}

pub fn random_hypothesis<R: Rng + ?Sized>(rng: &mut R, range: &DepthRange, ray: &crate::geometry::Vec3) -> PlaneHypothesis {
    let depth = range.sample(rng);
    PlaneHypothesis {
        depth,
        normal: random_unit_normal(rng, ray),
    }
}
