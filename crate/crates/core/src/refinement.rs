//! Confidence-weighted global smoothing of depth maps.
//!
//! The refined depth minimizes
//!
//! ```text
//! E(d) = sum_p conf_p (d_p - d0_p)^2 + lambda * sum_{p~q} w_pq (d_p - d_q)^2
//! ```
//!
//! over 4-connected pixel pairs, with `w_pq = exp(-|I_p - I_q|)`. The energy
//! is convex and is minimized by red-black Gauss-Seidel sweeps. Normals are
//! re-fitted from the refined depth and blended with the input normals by
//! confidence.

use nalgebra::{Matrix3, SymmetricEigen};
use rayon::prelude::*;

use crate::error::{MvsError, Result};
use crate::geometry::{CameraIntrinsics, DepthRange, Vec3};
use crate::grid::{color_distance, ColorImage, DepthMap, Grid};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RefineParams {
    pub smoothness: f64,
    pub max_sweeps: usize,
    /// Stop once the mean absolute update falls below this fraction of the
    /// mean depth.
    pub tolerance: f64,
    /// Costs at or below this map to confidence 1.
    pub conf_low: f64,
    /// Costs at or above this map to confidence 0.
    pub conf_high: f64,
}

impl Default for RefineParams {
    fn default() -> Self {
        RefineParams {
            smoothness: 1.0,
            max_sweeps: 400,
            tolerance: 1e-4,
            conf_low: 0.2,
            conf_high: 1.0,
        }
    }
}

impl RefineParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.smoothness >= 0.0) {
            return Err(MvsError::Config("smoothness weight must be non-negative".into()));
        }
        if !(self.conf_low < self.conf_high) {
            return Err(MvsError::Config("confidence clip bounds must satisfy low < high".into()));
        }
        if !(self.tolerance >= 0.0) {
            return Err(MvsError::Config("refinement tolerance must be non-negative".into()));
        }
        Ok(())
    }
}

/// Linear map from cost to confidence: 1 at `low`, 0 at `high`, clamped.
pub fn confidence_from_cost(costs: &Grid<f64>, low: f64, high: f64) -> Grid<f64> {
    costs.map(|c| ((high - c) / (high - low)).clamp(0.0, 1.0))
}

/// 3x3 median; border pixels use the neighbors that exist (mean of the two
/// middle values for even counts).
pub fn median_filter(depth: &DepthMap) -> DepthMap {
    let (w, h) = (depth.width(), depth.height());
    Grid::from_fn(w, h, |x, y| {
        let mut vals = [0.0f64; 9];
        let mut n = 0;
        for qy in y.saturating_sub(1)..=(y + 1).min(h - 1) {
            for qx in x.saturating_sub(1)..=(x + 1).min(w - 1) {
                vals[n] = *depth.get(qx, qy);
                n += 1;
            }
        }
        let v = &mut vals[..n];
        v.sort_by(|a, b| a.total_cmp(b));
        if n % 2 == 1 {
            v[n / 2]
        } else {
            0.5 * (v[n / 2 - 1] + v[n / 2])
        }
    })
}

/// Color weights of the edges to the right and below each pixel (0 where
/// no such neighbor exists).
#[derive(Debug, Clone)]
pub struct EdgeWeights {
    pub right: Grid<f64>,
    pub down: Grid<f64>,
}

impl EdgeWeights {
    pub fn from_image(image: &ColorImage) -> Self {
        let (w, h) = (image.width(), image.height());
        let right = Grid::from_fn(w, h, |x, y| {
            if x + 1 < w {
                (-color_distance(image.get(x, y), image.get(x + 1, y))).exp()
            } else {
                0.0
            }
        });
        let down = Grid::from_fn(w, h, |x, y| {
            if y + 1 < h {
                (-color_distance(image.get(x, y), image.get(x, y + 1))).exp()
            } else {
                0.0
            }
        });
        EdgeWeights { right, down }
    }

    /// `(neighbor index, weight)` for the up to four neighbors of `(x, y)`.
    #[inline]
    fn neighbors(&self, x: usize, y: usize) -> [(Option<(usize, usize)>, f64); 4] {
        let (w, h) = (self.right.width(), self.right.height());
        [
            ((x + 1 < w).then_some((x + 1, y)), *self.right.get(x, y)),
            ((x > 0).then(|| (x - 1, y)), if x > 0 { *self.right.get(x - 1, y) } else { 0.0 }),
            ((y + 1 < h).then_some((x, y + 1)), *self.down.get(x, y)),
            ((y > 0).then(|| (x, y - 1)), if y > 0 { *self.down.get(x, y - 1) } else { 0.0 }),
        ]
    }
}

/// Value of the refinement energy.
pub fn refinement_energy(depth: &DepthMap, input: &DepthMap, conf: &Grid<f64>, edges: &EdgeWeights, smoothness: f64) -> f64 {
    let (w, h) = (depth.width(), depth.height());
    let mut e = 0.0;
    for y in 0..h {
        for x in 0..w {
            let d = *depth.get(x, y);
            let r = d - input.get(x, y);
            e += conf.get(x, y) * r * r;
            if x + 1 < w {
                let t = d - depth.get(x + 1, y);
                e += smoothness * edges.right.get(x, y) * t * t;
            }
            if y + 1 < h {
                let t = d - depth.get(x, y + 1);
                e += smoothness * edges.down.get(x, y) * t * t;
            }
        }
    }
    e
}

#[derive(Debug, Clone, PartialEq)]
pub struct RefineReport {
    pub sweeps: usize,
    pub converged: bool,
    /// Energy before the first sweep followed by the energy after each sweep.
    pub energies: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct RefineOutput {
    pub depth: DepthMap,
    pub normals: Grid<Vec3>,
    pub report: RefineReport,
}

/// Minimize the refinement energy starting from the input depth. Pixels
/// whose confidence and neighbor weights are all zero keep their value.
pub fn solve_depth(
    input: &DepthMap,
    conf: &Grid<f64>,
    edges: &EdgeWeights,
    params: &RefineParams,
) -> (DepthMap, RefineReport) {
    let (w, h) = (input.width(), input.height());
    let mut depth = input.clone();
    let mut energies = vec![refinement_energy(&depth, input, conf, edges, params.smoothness)];
    let mean_abs: f64 = input.data().iter().map(|d| d.abs()).sum::<f64>() / input.len().max(1) as f64;
    let mut converged = false;
    let mut sweeps = 0;
    while sweeps < params.max_sweeps {
        let mut total_update = 0.0;
        for parity in 0..2 {
            let snapshot = &depth;
            let rows: Vec<Vec<(usize, f64)>> = (0..h)
                .into_par_iter()
                .map(|y| {
                    let start = (y + parity) % 2;
                    (start..w)
                        .step_by(2)
                        .map(|x| {
                            let c = *conf.get(x, y);
                            let mut num = c * input.get(x, y);
                            let mut den = c;
                            for (q, wq) in edges.neighbors(x, y) {
                                if let Some((qx, qy)) = q {
                                    num += params.smoothness * wq * snapshot.get(qx, qy);
                                    den += params.smoothness * wq;
                                }
                            }
                            let v = if den > 0.0 { num / den } else { *snapshot.get(x, y) };
                            (x, v)
                        })
                        .collect()
                })
                .collect();
            for (y, row) in rows.into_iter().enumerate() {
                for (x, v) in row {
                    let old = depth.get_mut(x, y);
                    total_update += (v - *old).abs();
                    *old = v;
                }
            }
        }
        sweeps += 1;
        energies.push(refinement_energy(&depth, input, conf, edges, params.smoothness));
        let mean_update = total_update / input.len().max(1) as f64;
        if mean_update <= params.tolerance * mean_abs {
            converged = true;
            break;
        }
    }
    (
        depth,
        RefineReport {
            sweeps,
            converged,
            energies,
        },
    )
}

/// Normal of the least-squares plane through the backprojected 3x3
/// neighborhood of each pixel, facing the camera.
pub fn fit_normals(depth: &DepthMap, cam: &CameraIntrinsics) -> Grid<Option<Vec3>> {
    let (w, h) = (depth.width(), depth.height());
    Grid::from_fn(w, h, |x, y| {
        let mut pts = [Vec3::zeros(); 9];
        let mut n = 0;
        for qy in y.saturating_sub(1)..=(y + 1).min(h - 1) {
            for qx in x.saturating_sub(1)..=(x + 1).min(w - 1) {
                let d = *depth.get(qx, qy);
                if d > 0.0 {
                    pts[n] = cam.pixel_ray(qx, qy) * d;
                    n += 1;
                }
            }
        }
        if n < 3 {
            return None;
        }
        let pts = &pts[..n];
        let mean = pts.iter().sum::<Vec3>() / n as f64;
        let mut cov = Matrix3::zeros();
        for p in pts {
            let d = p - mean;
            cov += d * d.transpose();
        }
        let eig = SymmetricEigen::new(cov);
        let mut order = [0usize, 1, 2];
        order.sort_by(|a, b| eig.eigenvalues[*a].total_cmp(&eig.eigenvalues[*b]));
        let [imin, imid, imax] = order;
        // points along a line leave the plane undetermined
        if !(eig.eigenvalues[imid] > 1e-12 * eig.eigenvalues[imax]) {
            return None;
        }
        let mut normal: Vec3 = eig.eigenvectors.column(imin).into_owned();
        let ray = cam.pixel_ray(x, y);
        if normal.dot(&ray) > 0.0 {
            normal = -normal;
        }
        (normal.dot(&ray) < 0.0).then(|| normal.normalize())
    })
}

/// Refine depth with the confidence-weighted smoothness energy, then blend
/// the input normals with normals fitted to the refined depth.
#[allow(clippy::too_many_arguments)]
pub fn global_refine(
    depth: &DepthMap,
    normals: &Grid<Vec3>,
    conf: &Grid<f64>,
    image: &ColorImage,
    cam: &CameraIntrinsics,
    range: &DepthRange,
    params: &RefineParams,
) -> Result<RefineOutput> {
    if !depth.same_shape(normals) || !depth.same_shape(conf) || !depth.same_shape(image) {
        return Err(MvsError::InvalidInput("refinement inputs differ in size".into()));
    }
    if depth.width() != cam.width || depth.height() != cam.height {
        return Err(MvsError::InvalidInput("refinement inputs do not match the camera".into()));
    }
    let edges = EdgeWeights::from_image(image);
    let (refined, report) = solve_depth(depth, conf, &edges, params);
    let refined = refined.map(|d| range.clamp(*d));
    let fitted = fit_normals(&refined, cam);
    let blended = Grid::from_fn(depth.width(), depth.height(), |x, y| {
        let input = *normals.get(x, y);
        let ray = cam.pixel_ray(x, y);
        let Some(fit) = fitted.get(x, y) else {
            return input;
        };
        let c = *conf.get(x, y);
        match (input * c + fit * (1.0 - c)).try_normalize(1e-9) {
            Some(n) if n.dot(&ray) < 0.0 => n,
            _ => *fit,
        }
    });
    Ok(RefineOutput {
        depth: refined,
        normals: blended,
        report,
    })
}
