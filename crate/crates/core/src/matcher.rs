//! PatchMatch optimization of per-pixel plane hypotheses.
//!
//! Every update of a checkerboard phase is computed from an immutable
//! snapshot of the grid and written back afterwards, so the result does not
//! depend on the order (or the number of workers) in which pixels are
//! visited. Per-pixel random streams are derived from the stage seed, the
//! iteration, the phase and the pixel index.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{MvsError, Result};
use crate::frame::CameraFrame;
use crate::geometry::{
    angle_between, depth_on_plane, pixel_center, random_axis, random_unit_normal, rotate_facing, CameraIntrinsics,
    DepthRange, HomographyBasis, Pixel, PlaneHypothesis, Pose, Vec3,
};
use crate::grid::{DepthMap, Grid};
use crate::triangulation::{rasterize_planes, PlaneTriangle, TriangleFilter};

/// Upper bound on the number of source views per reference frame.
pub const MAX_VIEWS: usize = 16;
/// Cost assigned to unusable or degenerate matches.
pub const MAX_COST: f64 = 2.0;
/// Per-sample intensity variance below which a patch counts as textureless.
const MIN_PATCH_VARIANCE: f64 = 1e-7;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    Red,
    Black,
}

impl Phase {
    #[inline]
    pub fn of(x: usize, y: usize) -> Phase {
        if (x + y) % 2 == 0 {
            Phase::Red
        } else {
            Phase::Black
        }
    }

    fn parity(self) -> usize {
        match self {
            Phase::Red => 0,
            Phase::Black => 1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Photometric,
    Planar,
    Geometric,
}

impl Stage {
    fn tag(self) -> u64 {
        match self {
            Stage::Photometric => 1,
            Stage::Planar => 2,
            Stage::Geometric => 3,
        }
    }
}

/// Initial perturbation magnitudes of a stage; both halve every iteration.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Perturbation {
    /// Relative depth perturbation.
    pub depth: f64,
    /// Normal rotation bound in radians.
    pub normal: f64,
}

impl Perturbation {
    pub fn halved(&self, times: usize) -> Perturbation {
        let f = 0.5f64.powi(times as i32);
        Perturbation {
            depth: self.depth * f,
            normal: self.normal * f,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PlanarCostParams {
    pub weight: f64,
    pub depth_truncation: f64,
    pub angle_truncation_deg: f64,
}

impl Default for PlanarCostParams {
    fn default() -> Self {
        PlanarCostParams {
            weight: 0.2,
            depth_truncation: 0.2,
            angle_truncation_deg: 30.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MatchParams {
    /// Patch half-window at the coarsest pyramid level.
    pub coarse_patch_radius: usize,
    /// Patch half-window at finer levels.
    pub fine_patch_radius: usize,
    pub patch_step: usize,
    /// Samples per axis-aligned propagation strip.
    pub strip_length: usize,
    /// Largest `|dx| + |dy|` inside a diagonal propagation region.
    pub quadrant_extent: usize,
    pub photo_iterations: usize,
    pub planar_iterations: usize,
    pub num_sources: usize,
    /// Cost below which a pixel becomes a planar-prior vertex.
    pub prior_threshold: f64,
    pub photo_perturbation: Perturbation,
    pub planar_perturbation: Perturbation,
    pub geom_perturbation: Perturbation,
    pub view_weight_beta: f64,
    pub planar: PlanarCostParams,
}

impl Default for MatchParams {
    fn default() -> Self {
        MatchParams {
            coarse_patch_radius: 5,
            fine_patch_radius: 3,
            patch_step: 2,
            strip_length: 11,
            quadrant_extent: 7,
            photo_iterations: 3,
            planar_iterations: 3,
            num_sources: 4,
            prior_threshold: 0.1,
            photo_perturbation: Perturbation {
                depth: 0.1,
                normal: 30f64.to_radians(),
            },
            planar_perturbation: Perturbation {
                depth: 0.05,
                normal: 15f64.to_radians(),
            },
            geom_perturbation: Perturbation {
                depth: 0.02,
                normal: 10f64.to_radians(),
            },
            view_weight_beta: 0.3,
            planar: PlanarCostParams::default(),
        }
    }
}

impl MatchParams {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(MvsError::Config(m.to_string()));
        if self.photo_iterations < 1 {
            return bad("photometric iteration count must be at least 1");
        }
        if self.num_sources < 1 || self.num_sources > MAX_VIEWS {
            return bad("number of source views must be in [1, 16]");
        }
        if !(self.prior_threshold > 0.0 && self.prior_threshold < 2.0) {
            return bad("prior cost threshold must lie in (0, 2)");
        }
        if self.patch_step == 0 || self.coarse_patch_radius == 0 || self.fine_patch_radius == 0 {
            return bad("patch radius and step must be positive");
        }
        if self.strip_length == 0 || self.quadrant_extent < 3 {
            return bad("propagation neighborhood too small");
        }
        if !(self.view_weight_beta > 0.0) {
            return bad("view weight beta must be positive");
        }
        for p in [self.photo_perturbation, self.planar_perturbation, self.geom_perturbation] {
            if !(p.depth >= 0.0 && p.normal >= 0.0) {
                return bad("perturbation magnitudes must be non-negative");
            }
        }
        let pl = &self.planar;
        if !(pl.weight >= 0.0 && pl.depth_truncation > 0.0 && pl.angle_truncation_deg > 0.0) {
            return bad("planar prior cost weights must be positive");
        }
        Ok(())
    }

    pub fn perturbation(&self, stage: Stage) -> Perturbation {
        match stage {
            Stage::Photometric => self.photo_perturbation,
            Stage::Planar => self.planar_perturbation,
            Stage::Geometric => self.geom_perturbation,
        }
    }
}

/// Sparse square sampling pattern of a matching window.
#[derive(Debug, Clone)]
pub struct PatchPattern {
    offsets: Vec<(i32, i32)>,
}

impl PatchPattern {
    /// Offsets `-radius, -radius + step, ..., <= radius` on both axes.
    pub fn sparse(radius: usize, step: usize) -> Self {
        let r = radius as i32;
        let axis: Vec<i32> = (-r..=r).step_by(step.max(1)).collect();
        let offsets = axis
            .iter()
            .flat_map(|&dy| axis.iter().map(move |&dx| (dx, dy)))
            .collect();
        PatchPattern { offsets }
    }

    pub fn offsets(&self) -> &[(i32, i32)] {
        &self.offsets
    }
}

/// `1 - NCC` of two equally sized patches, in `[0, 2]`. Textureless
/// patches (zero variance) get the maximum cost.
pub fn ncc_cost(reference: &[f32], source: &[f32]) -> Result<f64> {
    if reference.len() != source.len() {
        return Err(MvsError::InvalidInput(format!(
            "patch sizes differ ({} vs {})",
            reference.len(),
            source.len()
        )));
    }
    let mut sums = NccSums::default();
    for (&r, &s) in reference.iter().zip(source) {
        sums.add(r as f64, s as f64);
    }
    Ok(sums.cost())
}

#[derive(Debug, Default, Clone, Copy)]
struct NccSums {
    n: f64,
    r: f64,
    s: f64,
    rr: f64,
    ss: f64,
    rs: f64,
}

impl NccSums {
    #[inline]
    fn add(&mut self, r: f64, s: f64) {
        self.n += 1.0;
        self.r += r;
        self.s += s;
        self.rr += r * r;
        self.ss += s * s;
        self.rs += r * s;
    }

    #[inline]
    fn cost(&self) -> f64 {
        if self.n < 2.0 {
            return MAX_COST;
        }
        let var_r = self.rr - self.r * self.r / self.n;
        let var_s = self.ss - self.s * self.s / self.n;
        let min_var = MIN_PATCH_VARIANCE * self.n;
        if var_r < min_var || var_s < min_var {
            return MAX_COST;
        }
        let cov = self.rs - self.r * self.s / self.n;
        (1.0 - cov / (var_r * var_s).sqrt()).clamp(0.0, MAX_COST)
    }
}

/// Gaussian cost-to-weight mapping, rescaled so the best view has weight 1.
pub fn update_view_weights(costs: &[f64], beta: f64) -> Vec<f64> {
    let mut out = vec![0.0; costs.len()];
    view_weights_into(costs, beta, &mut out);
    out
}

#[inline]
fn view_weights_into(costs: &[f64], beta: f64, out: &mut [f64]) {
    let denom = 2.0 * beta * beta;
    let mut max = 0.0f64;
    for (w, c) in out.iter_mut().zip(costs) {
        *w = (-(c * c) / denom).exp();
        max = max.max(*w);
    }
    if max > 0.0 {
        for w in out.iter_mut() {
            *w /= max;
        }
    }
}

/// Weighted mean of per-view costs; `MAX_COST` when every weight is zero.
#[inline]
pub fn aggregate_cost(costs: &[f64], weights: &[f64]) -> f64 {
    let mut num = 0.0;
    let mut den = 0.0;
    for (c, w) in costs.iter().zip(weights) {
        if *w > 0.0 {
            num += w * c;
            den += w;
        }
    }
    if den > 0.0 {
        num / den
    } else {
        MAX_COST
    }
}

/// Per-pixel hypotheses, aggregated costs and per-view state of one frame
/// at one pyramid level.
#[derive(Debug, Clone, PartialEq)]
pub struct HypothesisGrid {
    width: usize,
    height: usize,
    views: usize,
    pub hypotheses: Vec<PlaneHypothesis>,
    /// Total cost of the current stage.
    pub costs: Vec<f64>,
    /// Photometric cost of each pixel's hypothesis per source view.
    pub view_costs: Vec<f64>,
    pub view_weights: Vec<f64>,
}

impl HypothesisGrid {
    pub fn new(width: usize, height: usize, views: usize, hypotheses: Vec<PlaneHypothesis>) -> Result<Self> {
        if hypotheses.len() != width * height {
            return Err(MvsError::InvalidInput(format!(
                "{} hypotheses for a {width}x{height} grid",
                hypotheses.len()
            )));
        }
        if views > MAX_VIEWS {
            return Err(MvsError::InvalidInput(format!("{views} views exceed the maximum of {MAX_VIEWS}")));
        }
        let n = width * height;
        Ok(HypothesisGrid {
            width,
            height,
            views,
            hypotheses,
            costs: vec![MAX_COST; n],
            view_costs: vec![MAX_COST; n * views],
            view_weights: vec![1.0; n * views],
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn views(&self) -> usize {
        self.views
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize) -> usize {
        y * self.width + x
    }

    #[inline]
    pub fn hypothesis(&self, x: usize, y: usize) -> &PlaneHypothesis {
        &self.hypotheses[y * self.width + x]
    }

    #[inline]
    pub fn cost(&self, x: usize, y: usize) -> f64 {
        self.costs[y * self.width + x]
    }

    pub fn pixel_view_costs(&self, x: usize, y: usize) -> &[f64] {
        let i = self.index(x, y) * self.views;
        &self.view_costs[i..i + self.views]
    }

    pub fn pixel_view_weights(&self, x: usize, y: usize) -> &[f64] {
        let i = self.index(x, y) * self.views;
        &self.view_weights[i..i + self.views]
    }

    pub fn depth_map(&self) -> DepthMap {
        Grid::from_fn(self.width, self.height, |x, y| self.hypothesis(x, y).depth)
    }

    pub fn normal_map(&self) -> Grid<Vec3> {
        Grid::from_fn(self.width, self.height, |x, y| self.hypothesis(x, y).normal)
    }

    pub fn cost_map(&self) -> Grid<f64> {
        Grid::from_fn(self.width, self.height, |x, y| self.cost(x, y))
    }

    /// Check the grid invariants: finite non-negative costs, weights in
    /// [0, 1], valid camera-facing hypotheses.
    pub fn check_invariants(&self, cam: &CameraIntrinsics, range: &DepthRange) -> std::result::Result<(), String> {
        if cam.width != self.width || cam.height != self.height {
            return Err("dimensions do not match the camera".into());
        }
        for y in 0..self.height {
            for x in 0..self.width {
                let h = self.hypothesis(x, y);
                if !h.is_valid(range, &cam.pixel_ray(x, y)) {
                    return Err(format!("invalid hypothesis at ({x}, {y}): {h:?}"));
                }
                let c = self.cost(x, y);
                if !(c.is_finite() && c >= 0.0) {
                    return Err(format!("invalid cost {c} at ({x}, {y})"));
                }
            }
        }
        if self.view_weights.iter().any(|w| !(0.0..=1.0).contains(w)) {
            return Err("view weight outside [0, 1]".into());
        }
        Ok(())
    }

    fn apply(&mut self, u: &PixelUpdate) {
        let k = self.views;
        self.hypotheses[u.index] = u.hypothesis;
        self.costs[u.index] = u.cost;
        self.view_costs[u.index * k..u.index * k + k].copy_from_slice(&u.view_costs[..k]);
        self.view_weights[u.index * k..u.index * k + k].copy_from_slice(&u.weights[..k]);
    }
}

/// Stage-dependent cost added to the aggregated photometric cost.
pub trait ExtraCost: Sync {
    /// Cost of hypothesis `h` at pixel `(x, y)`. `snapshot` is the grid
    /// state at the start of the current phase.
    fn cost(&self, x: usize, y: usize, h: &PlaneHypothesis, snapshot: &HypothesisGrid, view_weights: &[f64]) -> f64;
}

/// Reference frame, its sources and the warping bases between them.
pub struct MatchContext<'a> {
    pub reference: &'a CameraFrame,
    pub sources: Vec<&'a CameraFrame>,
    bases: Vec<HomographyBasis>,
    pub range: DepthRange,
    pub pattern: PatchPattern,
}

impl<'a> MatchContext<'a> {
    pub fn new(
        reference: &'a CameraFrame,
        sources: Vec<&'a CameraFrame>,
        range: DepthRange,
        patch_radius: usize,
        patch_step: usize,
    ) -> Result<Self> {
        if sources.is_empty() || sources.len() > MAX_VIEWS {
            return Err(MvsError::InvalidInput(format!(
                "need between 1 and {MAX_VIEWS} source views, got {}",
                sources.len()
            )));
        }
        let bases = sources
            .iter()
            .map(|s| {
                let rel = Pose::relative(&s.pose, &reference.pose);
                HomographyBasis::new(&reference.intrinsics, &s.intrinsics, &rel)
            })
            .collect();
        Ok(MatchContext {
            reference,
            sources,
            bases,
            range,
            pattern: PatchPattern::sparse(patch_radius, patch_step),
        })
    }

    pub fn num_views(&self) -> usize {
        self.sources.len()
    }

    pub fn camera(&self) -> &CameraIntrinsics {
        &self.reference.intrinsics
    }

    /// Per-view photometric costs of `h` at pixel `(x, y)` into `out`.
    pub fn view_costs_into(&self, x: usize, y: usize, h: &PlaneHypothesis, out: &mut [f64]) {
        let Some(m) = self.plane_vector(x, y, h) else {
            out.iter_mut().for_each(|c| *c = MAX_COST);
            return;
        };
        let patch = self.patch_samples(x, y);
        for (v, slot) in out.iter_mut().enumerate().take(self.sources.len()) {
            *slot = self.view_cost(v, &patch, &m);
        }
    }

    /// `K_ref^-T n / c` of the plane, `None` for degenerate planes.
    #[inline]
    fn plane_vector(&self, x: usize, y: usize, h: &PlaneHypothesis) -> Option<Vec3> {
        let ray = self.reference.intrinsics.pixel_ray(x, y);
        let cos = h.normal.dot(&ray) / ray.norm();
        let offset = h.plane_offset(&ray);
        if cos.abs() < 1e-6 || !(offset < 0.0) || !(h.depth > 0.0) {
            return None;
        }
        Some(self.bases[0].ref_inverse.transpose() * h.normal / offset)
    }

    /// Like `view_costs_into`, visiting views in `order`, but stops and
    /// returns `false` once the weighted cost sum of the visited views
    /// exceeds `bound`. `out` is complete only when `true` is returned.
    #[inline]
    fn view_costs_bounded(
        &self,
        x: usize,
        y: usize,
        patch: &PatchSamples,
        h: &PlaneHypothesis,
        weights: &[f64],
        order: &[usize],
        bound: f64,
        out: &mut [f64],
    ) -> bool {
        let Some(m) = self.plane_vector(x, y, h) else {
            out.iter_mut().for_each(|c| *c = MAX_COST);
            return true;
        };
        let mut partial = 0.0;
        for &v in order {
            let c = self.view_cost(v, patch, &m);
            out[v] = c;
            if weights[v] > 0.0 {
                partial += weights[v] * c;
                if partial > bound {
                    return false;
                }
            }
        }
        true
    }

    pub fn evaluate_hypothesis(&self, x: usize, y: usize, h: &PlaneHypothesis) -> Vec<f64> {
        let mut out = vec![0.0; self.num_views()];
        self.view_costs_into(x, y, h, &mut out);
        out
    }

    /// Reference samples of the matching window at `(x, y)`.
    fn patch_samples(&self, x: usize, y: usize) -> PatchSamples {
        let reference = &self.reference.gray;
        let (w, h) = (reference.width() as i32, reference.height() as i32);
        let samples = self
            .pattern
            .offsets()
            .iter()
            .filter_map(|&(dx, dy)| {
                let qx = x as i32 + dx;
                let qy = y as i32 + dy;
                if qx < 0 || qy < 0 || qx >= w || qy >= h {
                    return None;
                }
                let r = *reference.get(qx as usize, qy as usize);
                Some((qx as f64 + 0.5, qy as f64 + 0.5, r as f64))
            })
            .collect();
        PatchSamples { samples }
    }

    #[inline]
    fn view_cost(&self, v: usize, patch: &PatchSamples, m: &Vec3) -> f64 {
        let basis = &self.bases[v];
        let a = &basis.rotation_part;
        let b = &basis.translation_part;
        let h00 = a[(0, 0)] + b.x * m.x;
        let h01 = a[(0, 1)] + b.x * m.y;
        let h02 = a[(0, 2)] + b.x * m.z;
        let h10 = a[(1, 0)] + b.y * m.x;
        let h11 = a[(1, 1)] + b.y * m.y;
        let h12 = a[(1, 2)] + b.y * m.z;
        let h20 = a[(2, 0)] + b.z * m.x;
        let h21 = a[(2, 1)] + b.z * m.y;
        let h22 = a[(2, 2)] + b.z * m.z;

        let source = &self.sources[v].gray;
        let sw = source.width();
        let (swf, shf) = (sw as f64, source.height() as f64);
        let (max_x, max_y) = (swf - 1.0, shf - 1.0);
        let data = source.data();
        debug_assert_eq!(data.len(), sw * source.height());
        let mut sums = NccSums::default();
        let mut outside = 0usize;
        let total = patch.samples.len();
        for &(u, vv, r) in &patch.samples {
            let z = h20 * u + h21 * vv + h22;
            if z <= 1e-12 {
                outside += 1;
                continue;
            }
            let inv_z = 1.0 / z;
            let su = (h00 * u + h01 * vv + h02) * inv_z;
            let sv = (h10 * u + h11 * vv + h12) * inv_z;
            // same convention as `Grid::sample`
            if !(su >= 0.0 && sv >= 0.0 && su <= swf && sv <= shf) {
                outside += 1;
                continue;
            }
            let fx = (su - 0.5).clamp(0.0, max_x);
            let fy = (sv - 0.5).clamp(0.0, max_y);
            // SAFETY: su, sv passed the bounds test above, so they are not
            // NaN, and fx, fy are clamped to [0, width - 1] x [0, height - 1]
            // and therefore representable as i32.
            let (ix, iy) = unsafe { (fx.to_int_unchecked::<i32>(), fy.to_int_unchecked::<i32>()) };
            let ax = (fx - ix as f64) as f32;
            let ay = (fy - iy as f64) as f32;
            let (x0, y0) = (ix as usize, iy as usize);
            let x1 = if (ix as f64) < max_x { x0 + 1 } else { x0 };
            let y1 = if (iy as f64) < max_y { y0 + 1 } else { y0 };
            let (r0, r1) = (y0 * sw, y1 * sw);
            // SAFETY: x0 <= x1 < width and y0 <= y1 < height, so every tap
            // lies inside the width * height buffer.
            let [p00, p01, p10, p11] = unsafe {
                [
                    *data.get_unchecked(r0 + x0),
                    *data.get_unchecked(r0 + x1),
                    *data.get_unchecked(r1 + x0),
                    *data.get_unchecked(r1 + x1),
                ]
            };
            let top = p00 + (p01 - p00) * ax;
            let bottom = p10 + (p11 - p10) * ax;
            sums.add(r, (top + (bottom - top) * ay) as f64);
        }
        if total == 0 || 2 * outside > total {
            return MAX_COST;
        }
        sums.cost()
    }
}

/// In-image reference samples of one matching window: pixel-center
/// coordinates and intensity.
struct PatchSamples {
    samples: Vec<(f64, f64, f64)>,
}

/// Photometric costs of `h` at `(x, y)` against every source of `ctx`.
pub fn evaluate_hypothesis(ctx: &MatchContext<'_>, x: usize, y: usize, h: &PlaneHypothesis) -> Vec<f64> {
    ctx.evaluate_hypothesis(x, y, h)
}

/// Recompute photometric view costs, view weights and total costs for every
/// pixel of `grid`.
pub fn evaluate_grid(ctx: &MatchContext<'_>, grid: &mut HypothesisGrid, beta: f64, extra: Option<&dyn ExtraCost>) {
    let k = grid.views;
    assert_eq!(k, ctx.num_views(), "grid view count does not match the context");
    let w = grid.width;
    let hyps = &grid.hypotheses;
    let rows: Vec<Vec<f64>> = (0..grid.height)
        .into_par_iter()
        .map(|y| {
            let mut row = vec![0.0; w * k];
            for x in 0..w {
                ctx.view_costs_into(x, y, &hyps[y * w + x], &mut row[x * k..x * k + k]);
            }
            row
        })
        .collect();
    for (y, row) in rows.into_iter().enumerate() {
        grid.view_costs[y * w * k..(y + 1) * w * k].copy_from_slice(&row);
    }
    refresh_costs(grid, beta, extra);
}

/// Recompute weights and total costs from the stored per-view costs, e.g.
/// when a stage attaches a new extra cost.
pub fn refresh_costs(grid: &mut HypothesisGrid, beta: f64, extra: Option<&dyn ExtraCost>) {
    let k = grid.views;
    let w = grid.width;
    let snapshot: &HypothesisGrid = grid;
    let rows: Vec<(Vec<f64>, Vec<f64>)> = (0..snapshot.height)
        .into_par_iter()
        .map(|y| {
            let mut weights = vec![0.0; w * k];
            let mut costs = vec![0.0; w];
            for x in 0..w {
                let i = y * w + x;
                let vc = &snapshot.view_costs[i * k..i * k + k];
                let wt = &mut weights[x * k..x * k + k];
                view_weights_into(vc, beta, wt);
                let mut c = aggregate_cost(vc, wt);
                if let Some(e) = extra {
                    c += e.cost(x, y, &snapshot.hypotheses[i], snapshot, wt);
                }
                costs[x] = c;
            }
            (weights, costs)
        })
        .collect();
    for (y, (weights, costs)) in rows.into_iter().enumerate() {
        grid.view_weights[y * w * k..(y + 1) * w * k].copy_from_slice(&weights);
        grid.costs[y * w..(y + 1) * w].copy_from_slice(&costs);
    }
}

struct PixelUpdate {
    index: usize,
    hypothesis: PlaneHypothesis,
    cost: f64,
    view_costs: [f64; MAX_VIEWS],
    weights: [f64; MAX_VIEWS],
}

/// Offsets of the eight propagation regions: four axis-aligned strips that
/// start at the direct neighbor and four diagonal wedges. Every offset has
/// odd `|dx| + |dy|`, so it always lands on the opposite checkerboard color.
pub fn propagation_regions(strip_length: usize, quadrant_extent: usize) -> Vec<Vec<(i32, i32)>> {
    let mut regions = Vec::with_capacity(8);
    for (ax, ay) in [(0, -1), (0, 1), (-1, 0), (1, 0)] {
        let strip = (0..strip_length as i32)
            .map(|k| {
                let s = 2 * k + 1;
                (ax * s, ay * s)
            })
            .collect();
        regions.push(strip);
    }
    let e = quadrant_extent as i32;
    for (sx, sy) in [(-1, -1), (1, -1), (-1, 1), (1, 1)] {
        let mut wedge = Vec::new();
        for total in (3..=e).step_by(2) {
            for a in 1..total {
                wedge.push((sx * a, sy * (total - a)));
            }
        }
        regions.push(wedge);
    }
    regions
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Deterministic seed derived from a parent seed and a list of indices.
pub fn derive_seed(parent: u64, parts: &[u64]) -> u64 {
    parts.iter().fold(splitmix(parent), |acc, p| splitmix(acc ^ splitmix(*p)))
}

/// Candidates built from current, perturbed and random depth and normal,
/// excluding the incumbent itself and exact duplicates.
pub fn perturb<R: Rng + ?Sized>(
    ray: &Vec3,
    h: &PlaneHypothesis,
    range: &DepthRange,
    rng: &mut R,
    magnitude: Perturbation,
) -> Vec<PlaneHypothesis> {
    let perturbed_depth = if magnitude.depth > 0.0 {
        range.clamp(h.depth * (1.0 + rng.random_range(-magnitude.depth..=magnitude.depth)))
    } else {
        h.depth
    };
    let perturbed_normal = if magnitude.normal > 0.0 {
        let axis = random_axis(rng);
        let angle = rng.random_range(-magnitude.normal..=magnitude.normal);
        rotate_facing(&h.normal, &axis, angle, ray)
    } else {
        h.normal
    };
    let random_depth = range.sample(rng);
    let random_normal = random_unit_normal(rng, ray);

    let depths = [h.depth, perturbed_depth, random_depth];
    let normals = [h.normal, perturbed_normal, random_normal];
    let mut out: Vec<PlaneHypothesis> = Vec::with_capacity(8);
    for (i, d) in depths.iter().enumerate() {
        for (j, n) in normals.iter().enumerate() {
            if i == 0 && j == 0 {
                continue;
            }
            let cand = PlaneHypothesis { depth: *d, normal: *n };
            if cand == *h || out.contains(&cand) {
                continue;
            }
            out.push(cand);
        }
    }
    out
}

/// Settings of one checkerboard phase update.
struct PhaseRun<'p> {
    phase: Phase,
    regions: &'p [Vec<(i32, i32)>],
    beta: f64,
    perturbation: Option<Perturbation>,
    seed: u64,
}

fn update_pixel(
    ctx: &MatchContext<'_>,
    grid: &HypothesisGrid,
    x: usize,
    y: usize,
    run: &PhaseRun<'_>,
    extra: Option<&dyn ExtraCost>,
) -> PixelUpdate {
    let k = grid.views;
    let idx = grid.index(x, y);
    let cam = ctx.camera();
    let ray = cam.pixel_ray(x, y);

    let mut weights = [0.0; MAX_VIEWS];
    let stored = &grid.view_costs[idx * k..idx * k + k];
    view_weights_into(stored, run.beta, &mut weights[..k]);

    let mut best_h = grid.hypotheses[idx];
    let mut best_views = [0.0; MAX_VIEWS];
    best_views[..k].copy_from_slice(stored);
    let mut best_cost = aggregate_cost(&best_views[..k], &weights[..k]);
    if let Some(e) = extra {
        best_cost += e.cost(x, y, &best_h, grid, &weights[..k]);
    }

    // Views by decreasing weight, so hopeless candidates are dropped after
    // as few views as possible.
    let mut order = [0usize; MAX_VIEWS];
    for (v, o) in order.iter_mut().enumerate().take(k) {
        *o = v;
    }
    order[..k].sort_by(|a, b| weights[*b].total_cmp(&weights[*a]));
    let weight_sum: f64 = weights[..k].iter().filter(|w| **w > 0.0).sum();

    let patch = ctx.patch_samples(x, y);
    let mut scratch = [0.0; MAX_VIEWS];
    let mut consider = |cand: PlaneHypothesis,
                        best_h: &mut PlaneHypothesis,
                        best_cost: &mut f64,
                        best_views: &mut [f64; MAX_VIEWS]| {
        // Stopping early only on a clear loss keeps the outcome identical
        // to a full evaluation.
        let bound = if weight_sum > 0.0 {
            *best_cost * weight_sum * (1.0 + 1e-9)
        } else {
            f64::INFINITY
        };
        if !ctx.view_costs_bounded(x, y, &patch, &cand, &weights[..k], &order[..k], bound, &mut scratch[..k]) {
            return;
        }
        let mut c = aggregate_cost(&scratch[..k], &weights[..k]);
        if c >= *best_cost {
            return;
        }
        if let Some(e) = extra {
            c += e.cost(x, y, &cand, grid, &weights[..k]);
        }
        if c < *best_cost {
            *best_cost = c;
            *best_h = cand;
            best_views[..k].copy_from_slice(&scratch[..k]);
        }
    };

    // propagation: best-cost neighbor of each region, re-anchored at (x, y)
    let (w, h) = (grid.width as i32, grid.height as i32);
    let incumbent = best_h;
    for region in run.regions {
        let mut pick: Option<(f64, usize, usize)> = None;
        for &(dx, dy) in region {
            let qx = x as i32 + dx;
            let qy = y as i32 + dy;
            if qx < 0 || qy < 0 || qx >= w || qy >= h {
                continue;
            }
            let c = grid.cost(qx as usize, qy as usize);
            if pick.is_none_or(|(pc, _, _)| c < pc) {
                pick = Some((c, qx as usize, qy as usize));
            }
        }
        let Some((_, qx, qy)) = pick else { continue };
        let nh = grid.hypothesis(qx, qy);
        let offset = nh.plane_offset(&cam.pixel_ray(qx, qy));
        let Ok(depth) = depth_on_plane(&nh.normal, offset, &ray) else {
            continue;
        };
        if !ctx.range.contains(depth) || nh.normal.dot(&ray) >= 0.0 {
            continue;
        }
        let cand = PlaneHypothesis {
            depth,
            normal: nh.normal,
        };
        if cand == incumbent {
            continue;
        }
        consider(cand, &mut best_h, &mut best_cost, &mut best_views);
    }

    if let Some(mag) = run.perturbation {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(run.seed, &[idx as u64]));
        let current = best_h;
        for cand in perturb(&ray, &current, &ctx.range, &mut rng, mag) {
            consider(cand, &mut best_h, &mut best_cost, &mut best_views);
        }
    }

    PixelUpdate {
        index: idx,
        hypothesis: best_h,
        cost: best_cost,
        view_costs: best_views,
        weights,
    }
}

fn update_phase(ctx: &MatchContext<'_>, grid: &mut HypothesisGrid, run: &PhaseRun<'_>, extra: Option<&dyn ExtraCost>) {
    let width = grid.width;
    let snapshot: &HypothesisGrid = grid;
    let updates: Vec<PixelUpdate> = (0..snapshot.height)
        .into_par_iter()
        .flat_map_iter(|y| {
            let start = (y + run.phase.parity()) % 2;
            (start..width)
                .step_by(2)
                .map(move |x| update_pixel(ctx, snapshot, x, y, run, extra))
        })
        .collect();
    for u in &updates {
        grid.apply(u);
    }
}

/// Propagation for one checkerboard phase: every pixel of `phase` adopts
/// the cheapest of its incumbent and the best neighbor of each of the eight
/// regions, evaluated on its own plane.
pub fn propagate_checkerboard(
    ctx: &MatchContext<'_>,
    grid: &mut HypothesisGrid,
    phase: Phase,
    params: &MatchParams,
    extra: Option<&dyn ExtraCost>,
) {
    let regions = propagation_regions(params.strip_length, params.quadrant_extent);
    let run = PhaseRun {
        phase,
        regions: &regions,
        beta: params.view_weight_beta,
        perturbation: None,
        seed: 0,
    };
    update_phase(ctx, grid, &run, extra);
}

/// Run `iterations` rounds of (red propagation + perturbation, black
/// propagation + perturbation) with the stage's extra cost attached.
pub fn run_stage(
    ctx: &MatchContext<'_>,
    grid: &mut HypothesisGrid,
    params: &MatchParams,
    stage: Stage,
    iterations: usize,
    extra: Option<&dyn ExtraCost>,
    seed: u64,
) {
    if iterations == 0 {
        return;
    }
    refresh_costs(grid, params.view_weight_beta, extra);
    let regions = propagation_regions(params.strip_length, params.quadrant_extent);
    let base = params.perturbation(stage);
    for it in 0..iterations {
        for phase in [Phase::Red, Phase::Black] {
            let run = PhaseRun {
                phase,
                regions: &regions,
                beta: params.view_weight_beta,
                perturbation: Some(base.halved(it)),
                seed: derive_seed(seed, &[stage.tag(), it as u64, phase.parity() as u64]),
            };
            update_phase(ctx, grid, &run, extra);
        }
    }
}

/// Planes interpolated from reliable pixels, one optional prior per pixel.
#[derive(Debug, Clone)]
pub struct PlanarPriorField {
    priors: Grid<Option<PlaneHypothesis>>,
    pub triangles: Vec<PlaneTriangle>,
    pub vertex_count: usize,
}

impl PlanarPriorField {
    pub fn empty(width: usize, height: usize) -> Self {
        PlanarPriorField {
            priors: Grid::new(width, height, None),
            triangles: Vec::new(),
            vertex_count: 0,
        }
    }

    #[inline]
    pub fn prior(&self, x: usize, y: usize) -> Option<&PlaneHypothesis> {
        self.priors.get(x, y).as_ref()
    }

    pub fn is_empty(&self) -> bool {
        self.triangles.is_empty()
    }

    /// Fraction of pixels that carry a prior.
    pub fn coverage(&self) -> f64 {
        let n = self.priors.data().iter().filter(|p| p.is_some()).count();
        n as f64 / self.priors.len().max(1) as f64
    }
}

/// Smallest interior angle (degrees) for a prior triangle to be kept.
const PRIOR_MIN_CORNER_ANGLE_DEG: f64 = 1.0;

/// Triangulate pixels whose cost is below `threshold` and give every pixel
/// inside a triangle the plane through its three backprojected vertices.
pub fn build_planar_priors(
    grid: &HypothesisGrid,
    threshold: f64,
    cam: &CameraIntrinsics,
    range: &DepthRange,
) -> PlanarPriorField {
    build_planar_priors_with(grid, threshold, &[], cam, range)
}

/// As [`build_planar_priors`], with `extra` (pixel, depth) vertices added to
/// the triangulation. An extra vertex replaces the grid vertex of the pixel
/// it falls in.
pub fn build_planar_priors_with(
    grid: &HypothesisGrid,
    threshold: f64,
    extra: &[(Pixel, f64)],
    cam: &CameraIntrinsics,
    range: &DepthRange,
) -> PlanarPriorField {
    let mut taken = Grid::new(grid.width, grid.height, false);
    let mut samples = Vec::new();
    for &(p, d) in extra {
        let (x, y) = (p.x.floor(), p.y.floor());
        if !(d > 0.0) || x < 0.0 || y < 0.0 || x >= grid.width as f64 || y >= grid.height as f64 {
            continue;
        }
        let cell = taken.get_mut(x as usize, y as usize);
        if !*cell {
            *cell = true;
            samples.push((p, d));
        }
    }
    for y in 0..grid.height {
        for x in 0..grid.width {
            if !*taken.get(x, y) && grid.cost(x, y) < threshold {
                samples.push((pixel_center(x, y), grid.hypothesis(x, y).depth));
            }
        }
    }
    let vertex_count = samples.len();
    let filter = TriangleFilter {
        min_corner_angle_deg: Some(PRIOR_MIN_CORNER_ANGLE_DEG),
        min_view_angle_deg: None,
    };
    match rasterize_planes(&samples, cam, filter, Some(range)) {
        Ok(raster) => PlanarPriorField {
            priors: raster.planes,
            triangles: raster.triangles,
            vertex_count,
        },
        Err(_) => PlanarPriorField {
            vertex_count,
            ..PlanarPriorField::empty(grid.width, grid.height)
        },
    }
}

/// Truncated depth + normal-angle deviation from the prior plane.
pub fn planar_prior_cost(h: &PlaneHypothesis, prior: Option<&PlaneHypothesis>, params: &PlanarCostParams) -> f64 {
    let Some(prior) = prior else { return 0.0 };
    let depth_term = ((h.depth - prior.depth).abs() / prior.depth).min(params.depth_truncation) / params.depth_truncation;
    let max_angle = params.angle_truncation_deg.to_radians();
    let angle_term = angle_between(&h.normal, &prior.normal).min(max_angle) / max_angle;
    params.weight * (depth_term + angle_term)
}

pub struct PlanarPriorCost<'a> {
    pub field: &'a PlanarPriorField,
    pub params: PlanarCostParams,
}

impl ExtraCost for PlanarPriorCost<'_> {
    fn cost(&self, x: usize, y: usize, h: &PlaneHypothesis, _snapshot: &HypothesisGrid, _w: &[f64]) -> f64 {
        planar_prior_cost(h, self.field.prior(x, y), &self.params)
    }
}
