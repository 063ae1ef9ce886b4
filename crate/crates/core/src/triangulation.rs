//! Image-space Delaunay triangulation of sparse depth samples and per-pixel
//! rasterization of the plane through each triangle's backprojected corners.

use spade::{DelaunayTriangulation, HasPosition, Point2, Triangulation};

use crate::error::{MvsError, Result};
use crate::geometry::{depth_on_plane, pixel_center, CameraIntrinsics, DepthRange, Pixel, PlaneHypothesis, Vec3};
use crate::grid::Grid;

struct Vertex {
    position: Point2<f64>,
    index: usize,
}

impl HasPosition for Vertex {
    type Scalar = f64;

    fn position(&self) -> Point2<f64> {
        self.position
    }
}

/// Delaunay triangles over `points`, as index triples into the input.
pub fn delaunay(points: &[Pixel]) -> Result<Vec<[usize; 3]>> {
    if points.len() < 3 {
        return Err(MvsError::TriangulationFailed(format!(
            "need at least 3 points, got {}",
            points.len()
        )));
    }
    let vertices: Vec<Vertex> = points
        .iter()
        .enumerate()
        .map(|(index, p)| Vertex {
            position: Point2::new(p.x, p.y),
            index,
        })
        .collect();
    let tri = DelaunayTriangulation::<Vertex>::bulk_load(vertices)
        .map_err(|e| MvsError::TriangulationFailed(format!("{e:?}")))?;
    let triangles: Vec<[usize; 3]> = tri
        .inner_faces()
        .map(|face| {
            let [a, b, c] = face.vertices();
            [a.data().index, b.data().index, c.data().index]
        })
        .collect();
    if triangles.is_empty() {
        return Err(MvsError::TriangulationFailed("all points are collinear".into()));
    }
    Ok(triangles)
}

/// Rules for discarding triangles whose 3D plane is unreliable.
#[derive(Debug, Clone, Copy, Default)]
pub struct TriangleFilter {
    /// Discard when the smallest interior angle of the 3D triangle is below this (degrees).
    pub min_corner_angle_deg: Option<f64>,
    /// Discard when the plane normal is within this many degrees of being
    /// orthogonal to the viewing ray through the triangle centroid.
    pub min_view_angle_deg: Option<f64>,
}

#[derive(Debug, Clone, Copy)]
pub struct PlaneTriangle {
    pub vertices: [usize; 3],
    pub normal: Vec3,
    /// Offset `c` of the plane `n . X = c` in camera coordinates.
    pub offset: f64,
    pub kept: bool,
}

/// Per-pixel planes interpolated from a triangulation of depth samples.
#[derive(Debug, Clone)]
pub struct PlaneRaster {
    pub planes: Grid<Option<PlaneHypothesis>>,
    pub triangles: Vec<PlaneTriangle>,
}

fn corner_angles(a: &Vec3, b: &Vec3, c: &Vec3) -> [f64; 3] {
    let ang = |p: &Vec3, q: &Vec3, r: &Vec3| {
        let u = q - p;
        let v = r - p;
        let cos = u.dot(&v) / (u.norm() * v.norm());
        if cos.is_finite() {
            cos.clamp(-1.0, 1.0).acos()
        } else {
            0.0
        }
    };
    [ang(a, b, c), ang(b, c, a), ang(c, a, b)]
}

/// Triangulate `samples` (pixel, depth) in image space and give every pixel
/// whose center falls inside a kept triangle the plane through that
/// triangle's three backprojected corners. Pixels where the interpolated
/// depth is not positive, or lies outside `range` when one is given, stay
/// empty.
pub fn rasterize_planes(
    samples: &[(Pixel, f64)],
    cam: &CameraIntrinsics,
    filter: TriangleFilter,
    range: Option<&DepthRange>,
) -> Result<PlaneRaster> {
    let pixels: Vec<Pixel> = samples.iter().map(|s| s.0).collect();
    let faces = delaunay(&pixels)?;
    let points: Vec<Vec3> = samples.iter().map(|(p, d)| cam.ray(p) * *d).collect();

    let mut planes = Grid::new(cam.width, cam.height, None);
    let mut triangles = Vec::with_capacity(faces.len());
    for face in faces {
        let [ia, ib, ic] = face;
        let (a, b, c) = (&points[ia], &points[ib], &points[ic]);
        let cross = (b - a).cross(&(c - a));
        let mut tri = PlaneTriangle {
            vertices: face,
            normal: Vec3::zeros(),
            offset: 0.0,
            kept: false,
        };
        let norm = cross.norm();
        if !(norm > 1e-15) || !norm.is_finite() {
            triangles.push(tri);
            continue;
        }
        let mut n = cross / norm;
        if n.dot(a) > 0.0 {
            n = -n;
        }
        let centroid = (a + b + c) / 3.0;
        let mut keep = true;
        if let Some(min_deg) = filter.min_corner_angle_deg {
            let smallest = corner_angles(a, b, c).iter().cloned().fold(f64::INFINITY, f64::min);
            keep &= smallest >= min_deg.to_radians();
        }
        if let Some(min_deg) = filter.min_view_angle_deg {
            let cos = (n.dot(&centroid) / centroid.norm()).abs();
            keep &= cos >= min_deg.to_radians().sin();
        }
        tri.normal = n;
        tri.offset = n.dot(a);
        tri.kept = keep;
        triangles.push(tri);
        if !keep {
            continue;
        }
        fill_triangle(&mut planes, cam, [&pixels[ia], &pixels[ib], &pixels[ic]], &n, tri.offset, range);
    }
    Ok(PlaneRaster { planes, triangles })
}

fn fill_triangle(
    planes: &mut Grid<Option<PlaneHypothesis>>,
    cam: &CameraIntrinsics,
    corners: [&Pixel; 3],
    normal: &Vec3,
    offset: f64,
    range: Option<&DepthRange>,
) {
    let [p0, p1, p2] = corners;
    let area = (p1.x - p0.x) * (p2.y - p0.y) - (p1.y - p0.y) * (p2.x - p0.x);
    if area.abs() < 1e-12 {
        return;
    }
    let min_x = p0.x.min(p1.x).min(p2.x);
    let max_x = p0.x.max(p1.x).max(p2.x);
    let min_y = p0.y.min(p1.y).min(p2.y);
    let max_y = p0.y.max(p1.y).max(p2.y);
    let x0 = (min_x - 0.5).ceil().max(0.0) as usize;
    let y0 = (min_y - 0.5).ceil().max(0.0) as usize;
    let x1 = ((max_x - 0.5).floor().min(cam.width as f64 - 1.0)).max(-1.0);
    let y1 = ((max_y - 0.5).floor().min(cam.height as f64 - 1.0)).max(-1.0);
    if x1 < 0.0 || y1 < 0.0 {
        return;
    }
    let (x1, y1) = (x1 as usize, y1 as usize);
    let eps = 1e-9 * area.abs();
    let edge = |a: &Pixel, b: &Pixel, q: &Pixel| (b.x - a.x) * (q.y - a.y) - (b.y - a.y) * (q.x - a.x);
    for y in y0..=y1 {
        for x in x0..=x1 {
            if planes.get(x, y).is_some() {
                continue;
            }
            let q = pixel_center(x, y);
            let (e0, e1, e2) = (edge(p0, p1, &q), edge(p1, p2, &q), edge(p2, p0, &q));
            let inside = if area > 0.0 {
                e0 >= -eps && e1 >= -eps && e2 >= -eps
            } else {
                e0 <= eps && e1 <= eps && e2 <= eps
            };
            if !inside {
                continue;
            }
            let ray = cam.ray(&q);
            let Ok(depth) = depth_on_plane(normal, offset, &ray) else {
                continue;
            };
            if let Some(r) = range {
                if !r.contains(depth) {
                    continue;
                }
            }
            if normal.dot(&ray) >= 0.0 {
                continue;
            }
            planes.set(
                x,
                y,
                Some(PlaneHypothesis {
                    depth,
                    normal: *normal,
                }),
            );
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cam() -> CameraIntrinsics {
        CameraIntrinsics::new(100.0, 100.0, 32.0, 32.0, 64, 64).unwrap()
    }

    #[test]
    fn triangle_of_three_points() {
        let tris = delaunay(&[Pixel::new(1.0, 1.0), Pixel::new(10.0, 1.0), Pixel::new(1.0, 10.0)]).unwrap();
        assert_eq!(tris.len(), 1);
    }

    #[test]
    fn collinear_points_fail() {
        let pts: Vec<Pixel> = (0..5).map(|i| Pixel::new(i as f64, 2.0 * i as f64)).collect();
        assert!(matches!(delaunay(&pts), Err(MvsError::TriangulationFailed(_))));
        assert!(delaunay(&pts[..2]).is_err());
    }

    #[test]
    fn equal_depth_triangle_is_fronto_parallel() {
        let c = cam();
        let s = vec![
            (pixel_center(5, 5), 4.0),
            (pixel_center(50, 8), 4.0),
            (pixel_center(20, 55), 4.0),
        ];
        let r = rasterize_planes(&s, &c, TriangleFilter::default(), None).unwrap();
        assert_eq!(r.triangles.len(), 1);
        let inside = r.planes.get(20, 20).unwrap();
        assert!((inside.depth - 4.0).abs() < 1e-12);
        assert!((inside.normal - Vec3::new(0.0, 0.0, -1.0)).norm() < 1e-12);
        assert!(r.planes.get(60, 60).is_none());
        assert!(r.planes.get(0, 0).is_none());
    }
}
