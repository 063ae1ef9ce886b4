//! Geometric-consistency costs: forward-backward reprojection error against
//! source depth maps and the depth-normal consistency of a hypothesis with
//! its neighborhood.

use crate::error::{MvsError, Result};
use crate::frame::CameraFrame;
use crate::geometry::{pixel_center, CameraIntrinsics, Pixel, PlaneHypothesis, Pose, Vec3};
use crate::grid::{color_distance, ColorImage, DepthMap};
use crate::matcher::{ExtraCost, HypothesisGrid, MAX_VIEWS};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GeomParams {
    /// Weight of the reprojection term.
    pub rep_weight: f64,
    /// Weight of the depth-normal consistency term.
    pub cons_weight: f64,
    /// Reprojection error clamp in pixels.
    pub tau: f64,
    /// Half-size of the consistency support window.
    pub support_radius: usize,
    pub iterations: usize,
}

impl Default for GeomParams {
    fn default() -> Self {
        GeomParams {
            rep_weight: 0.1,
            cons_weight: 0.1,
            tau: 2.0,
            support_radius: 2,
            iterations: 2,
        }
    }
}

impl GeomParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.rep_weight >= 0.0 && self.cons_weight >= 0.0 && self.tau >= 0.0) {
            return Err(MvsError::Config("geometric weights and tau must be non-negative".into()));
        }
        Ok(())
    }
}

/// A source camera together with its current (frozen) depth map.
#[derive(Debug, Clone, Copy)]
pub struct SourceDepth<'a> {
    pub intrinsics: &'a CameraIntrinsics,
    pub pose: &'a Pose,
    pub depth: &'a DepthMap,
}

/// Relative transforms between a reference camera and one source.
#[derive(Debug, Clone, Copy)]
pub struct ReprojectionPair<'a> {
    ref_cam: &'a CameraIntrinsics,
    src_cam: &'a CameraIntrinsics,
    src_depth: &'a DepthMap,
    src_from_ref: Pose,
    ref_from_src: Pose,
}

impl<'a> ReprojectionPair<'a> {
    pub fn new(ref_cam: &'a CameraIntrinsics, ref_pose: &Pose, src: SourceDepth<'a>) -> Self {
        let src_from_ref = Pose::relative(src.pose, ref_pose);
        ReprojectionPair {
            ref_cam,
            src_cam: src.intrinsics,
            src_depth: src.depth,
            src_from_ref,
            ref_from_src: src_from_ref.inverse(),
        }
    }

    /// Forward-backward reprojection error of reference pixel `p` at depth
    /// `d_ref`, clamped to `tau`.
    pub fn error(&self, p: &Pixel, d_ref: f64, tau: f64) -> f64 {
        if !(d_ref > 0.0) {
            return tau;
        }
        let x_src = self.src_from_ref.transform_point(&(self.ref_cam.ray(p) * d_ref));
        if x_src.z <= 1e-12 {
            return tau;
        }
        let p_src = self.src_cam.project_unchecked(&x_src);
        let Some(d_src) = self.src_depth.sample(p_src.x, p_src.y) else {
            return tau;
        };
        if !(d_src > 0.0) {
            return tau;
        }
        let x_back = self.ref_from_src.transform_point(&(self.src_cam.ray(&p_src) * d_src));
        if x_back.z <= 1e-12 {
            return tau;
        }
        let p_back = self.ref_cam.project_unchecked(&x_back);
        let e = (p_back - p).norm();
        if e.is_finite() {
            e.min(tau)
        } else {
            tau
        }
    }
}

pub fn reprojection_error(
    p: &Pixel,
    d_ref: f64,
    ref_cam: &CameraIntrinsics,
    ref_pose: &Pose,
    src: SourceDepth<'_>,
    tau: f64,
) -> f64 {
    ReprojectionPair::new(ref_cam, ref_pose, src).error(p, d_ref, tau)
}

/// Color-weighted mean distance of the neighbors' backprojected points to
/// the plane of `h`, divided by the pixel's depth. Neighbors with
/// non-positive depth or outside the image are skipped.
pub fn depth_normal_consistency_with(
    x: usize,
    y: usize,
    h: &PlaneHypothesis,
    depth_at: impl Fn(usize, usize) -> f64,
    image: &ColorImage,
    cam: &CameraIntrinsics,
    radius: usize,
) -> f64 {
    let ip = image.get(x, y);
    consistency_weighted(x, y, h, depth_at, |qx, qy| (-color_distance(ip, image.get(qx, qy))).exp(), cam, radius)
}

#[inline]
fn consistency_weighted(
    x: usize,
    y: usize,
    h: &PlaneHypothesis,
    depth_at: impl Fn(usize, usize) -> f64,
    weight_at: impl Fn(usize, usize) -> f64,
    cam: &CameraIntrinsics,
    radius: usize,
) -> f64 {
    if !(h.depth > 0.0) {
        return 0.0;
    }
    let xp = cam.pixel_ray(x, y) * h.depth;
    let r = radius as isize;
    let mut sum = 0.0;
    let mut count = 0usize;
    for dy in -r..=r {
        for dx in -r..=r {
            if dx == 0 && dy == 0 {
                continue;
            }
            let qx = x as isize + dx;
            let qy = y as isize + dy;
            if qx < 0 || qy < 0 || qx as usize >= cam.width || qy as usize >= cam.height {
                continue;
            }
            let (qx, qy) = (qx as usize, qy as usize);
            let dq = depth_at(qx, qy);
            if !(dq > 0.0) {
                continue;
            }
            let xq = cam.pixel_ray(qx, qy) * dq;
            let w = weight_at(qx, qy);
            sum += w * h.normal.dot(&(xq - xp)).abs();
            count += 1;
        }
    }
    if count == 0 {
        0.0
    } else {
        sum / (count as f64 * h.depth)
    }
}

pub fn depth_normal_consistency(
    x: usize,
    y: usize,
    h: &PlaneHypothesis,
    depth: &DepthMap,
    image: &ColorImage,
    cam: &CameraIntrinsics,
    radius: usize,
) -> f64 {
    depth_normal_consistency_with(x, y, h, |qx, qy| *depth.get(qx, qy), image, cam, radius)
}

/// Per-view `rep_weight * L_rep + cons_weight * L_cons`, aggregated with the
/// view weights (`MAX_COST` semantics when every weight is zero).
pub fn geometric_cost(rep_errors: &[f64], l_cons: f64, params: &GeomParams, view_weights: &[f64]) -> f64 {
    let mut per_view = [0.0; MAX_VIEWS];
    for (slot, e) in per_view.iter_mut().zip(rep_errors) {
        *slot = params.rep_weight * e + params.cons_weight * l_cons;
    }
    crate::matcher::aggregate_cost(&per_view[..rep_errors.len()], view_weights)
}

/// Geometric-stage cost hook for a reference frame.
pub struct GeometricCost<'a> {
    cam: &'a CameraIntrinsics,
    pairs: Vec<ReprojectionPair<'a>>,
    params: GeomParams,
    /// Color weight of every support-window neighbor, per pixel.
    color_weights: Vec<f64>,
}

impl<'a> GeometricCost<'a> {
    /// `sources` must be ordered like the source views of the matching context.
    pub fn new(reference: &'a CameraFrame, sources: &[SourceDepth<'a>], params: GeomParams) -> Result<Self> {
        if sources.is_empty() || sources.len() > MAX_VIEWS {
            return Err(MvsError::InvalidInput(format!(
                "geometric stage needs 1 to {MAX_VIEWS} sources, got {}",
                sources.len()
            )));
        }
        for s in sources {
            if s.depth.width() != s.intrinsics.width || s.depth.height() != s.intrinsics.height {
                return Err(MvsError::InvalidInput("source depth map does not match its camera".into()));
            }
        }
        let pairs = sources
            .iter()
            .map(|s| ReprojectionPair::new(&reference.intrinsics, &reference.pose, *s))
            .collect();
        let image = &reference.color;
        let r = params.support_radius as isize;
        let side = 2 * params.support_radius + 1;
        let mut color_weights = vec![0.0; image.len() * side * side];
        for y in 0..image.height() {
            for x in 0..image.width() {
                let ip = image.get(x, y);
                let base = image.index(x, y) * side * side;
                for dy in -r..=r {
                    for dx in -r..=r {
                        if let Some(iq) = image.get_signed(x as isize + dx, y as isize + dy) {
                            let slot = ((dy + r) as usize) * side + (dx + r) as usize;
                            color_weights[base + slot] = (-color_distance(ip, iq)).exp();
                        }
                    }
                }
            }
        }
        Ok(GeometricCost {
            cam: &reference.intrinsics,
            pairs,
            params,
            color_weights,
        })
    }
}

impl ExtraCost for GeometricCost<'_> {
    fn cost(&self, x: usize, y: usize, h: &PlaneHypothesis, snapshot: &HypothesisGrid, view_weights: &[f64]) -> f64 {
        let p = pixel_center(x, y);
        let mut rep = [0.0; MAX_VIEWS];
        if self.params.rep_weight > 0.0 {
            for (slot, pair) in rep.iter_mut().zip(&self.pairs) {
                *slot = pair.error(&p, h.depth, self.params.tau);
            }
        }
        let l_cons = if self.params.cons_weight > 0.0 {
            let r = self.params.support_radius;
            let side = 2 * r + 1;
            let base = (y * self.cam.width + x) * side * side;
            consistency_weighted(
                x,
                y,
                h,
                |qx, qy| snapshot.hypothesis(qx, qy).depth,
                |qx, qy| self.color_weights[base + (qy + r - y) * side + (qx + r - x)],
                self.cam,
                r,
            )
        } else {
            0.0
        };
        geometric_cost(&rep[..self.pairs.len()], l_cons, &self.params, view_weights)
    }
}

/// Normal of the plane `n . X = c` through three camera-frame points, facing
/// the origin.
pub fn plane_normal_through(a: &Vec3, b: &Vec3, c: &Vec3) -> Option<Vec3> {
    let n = (b - a).cross(&(c - a)).try_normalize(1e-15)?;
    Some(if n.dot(a) > 0.0 { -n } else { n })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Mat3;
    use crate::grid::Grid;

    fn cam() -> CameraIntrinsics {
        CameraIntrinsics::new(100.0, 100.0, 16.0, 16.0, 32, 32).unwrap()
    }

    #[test]
    fn on_plane_neighborhood_is_zero() {
        let c = cam();
        let n = Vec3::new(0.3, -0.2, -1.0).normalize();
        let offset = -4.0;
        let depth = Grid::from_fn(32, 32, |x, y| offset / n.dot(&c.pixel_ray(x, y)));
        let img = Grid::new(32, 32, [0.5f32; 3]);
        let h = PlaneHypothesis {
            depth: *depth.get(10, 12),
            normal: n,
        };
        assert!(depth_normal_consistency(10, 12, &h, &depth, &img, &c, 2) < 1e-12);
    }

    #[test]
    fn lambdas_zero_gives_zero() {
        let p = GeomParams {
            rep_weight: 0.0,
            cons_weight: 0.0,
            ..GeomParams::default()
        };
        assert_eq!(geometric_cost(&[2.0, 1.0], 3.0, &p, &[1.0, 1.0]), 0.0);
        let p = GeomParams::default();
        assert!((geometric_cost(&[2.0; 4], 0.0, &p, &[1.0; 4]) - 0.2).abs() < 1e-15);
    }

    #[test]
    fn isolated_pixel_has_zero_consistency() {
        let c = CameraIntrinsics::new(10.0, 10.0, 0.5, 0.5, 1, 1).unwrap();
        let depth = Grid::new(1, 1, 3.0);
        let img = Grid::new(1, 1, [0.1f32; 3]);
        let h = PlaneHypothesis::fronto_parallel(3.0);
        assert_eq!(depth_normal_consistency(0, 0, &h, &depth, &img, &c, 2), 0.0);
    }

    #[test]
    fn projection_outside_source_saturates() {
        let c = cam();
        let src_pose = Pose::new(Mat3::identity(), Vec3::new(50.0, 0.0, 0.0)).unwrap();
        let depth = Grid::new(32, 32, 5.0);
        let src = SourceDepth {
            intrinsics: &c,
            pose: &src_pose,
            depth: &depth,
        };
        let e = reprojection_error(&pixel_center(16, 16), 5.0, &c, &Pose::identity(), src, 2.0);
        assert_eq!(e, 2.0);
    }

    #[test]
    fn cost_hook_matches_free_functions() {
        use crate::frame::CameraFrame;
        use crate::matcher::HypothesisGrid;
        let c = cam();
        let color = Grid::from_fn(32, 32, |x, y| {
            let v = ((x * 7 + y * 13) % 11) as f32 / 11.0;
            [v, 1.0 - v, 0.5]
        });
        let reference = CameraFrame::new(0, c, Pose::identity(), color.clone()).unwrap();
        let src_pose = Pose::new(Mat3::identity(), Vec3::new(0.2, 0.0, 0.0)).unwrap();
        let src_depth = Grid::from_fn(32, 32, |x, y| 4.0 + 0.01 * (x + 2 * y) as f64);
        let hyps: Vec<PlaneHypothesis> = (0..32 * 32)
            .map(|i| PlaneHypothesis::fronto_parallel(3.5 + 0.001 * (i % 97) as f64))
            .collect();
        let grid = HypothesisGrid::new(32, 32, 1, hyps).unwrap();
        let depth = grid.depth_map();
        let src = SourceDepth {
            intrinsics: &c,
            pose: &src_pose,
            depth: &src_depth,
        };
        let params = GeomParams::default();
        let hook = GeometricCost::new(&reference, &[src], params).unwrap();
        let h = PlaneHypothesis {
            depth: 3.7,
            normal: Vec3::new(0.1, 0.2, -1.0).normalize(),
        };
        for (x, y) in [(0, 0), (31, 5), (16, 16), (2, 30)] {
            let rep = reprojection_error(&pixel_center(x, y), h.depth, &c, &Pose::identity(), src, params.tau);
            let cons = depth_normal_consistency(x, y, &h, &depth, &color, &c, params.support_radius);
            let expected = geometric_cost(&[rep], cons, &params, &[1.0]);
            let got = hook.cost(x, y, &h, &grid, &[1.0]);
            assert!((got - expected).abs() < 1e-12, "{got} vs {expected}");
        }
    }
}
