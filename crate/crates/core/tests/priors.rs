use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use planemvs::geometry::{CameraIntrinsics, DepthRange, Pixel, PlaneHypothesis, Vec3};
use planemvs::matcher::{build_planar_priors, build_planar_priors_with, HypothesisGrid};

/// Depth at pixel (x, y) of the plane n . X = c, by direct ray intersection.
fn plane_depth(cam: &CameraIntrinsics, n: &Vec3, c: f64, x: usize, y: usize) -> f64 {
    let u = (x as f64 + 0.5 - cam.cx) / cam.fx;
    let v = (y as f64 + 0.5 - cam.cy) / cam.fy;
    c / (n.x * u + n.y * v + n.z)
}

#[test]
fn priors_reproduce_the_plane_of_their_vertices() {
    let cam = CameraIntrinsics::new(90.0, 90.0, 40.0, 30.0, 80, 60).unwrap();
    let range = DepthRange::new(0.5, 20.0).unwrap();
    let n = Vec3::new(0.3, 0.25, -1.0).normalize();
    let c = n.dot(&Vec3::new(0.0, 0.0, 5.0));
    let hyps = (0..60)
        .flat_map(|y| (0..80).map(move |x| (x, y)))
        .map(|(x, y)| PlaneHypothesis::facing(plane_depth(&cam, &n, c, x, y), n, &cam.pixel_ray(x, y)))
        .collect();
    let mut grid = HypothesisGrid::new(80, 60, 1, hyps).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let mut reliable = 0;
    for cost in grid.costs.iter_mut() {
        *cost = if rng.random_bool(0.02) {
            reliable += 1;
            0.05
        } else {
            0.5
        };
    }
    let field = build_planar_priors(&grid, 0.1, &cam, &range);
    assert_eq!(field.vertex_count, reliable);
    assert!(!field.triangles.is_empty());
    let mut covered = 0;
    for y in 0..60 {
        for x in 0..80 {
            if let Some(p) = field.prior(x, y) {
                covered += 1;
                let d = plane_depth(&cam, &n, c, x, y);
                assert!((p.depth - d).abs() <= 1e-9 * d, "depth {} vs {d} at ({x}, {y})", p.depth);
                assert!(p.normal.dot(&n) > 1.0 - 1e-12, "normal {:?} at ({x}, {y})", p.normal);
            }
        }
    }
    assert!(covered as f64 > 0.5 * 80.0 * 60.0, "coverage {covered}");
    assert!((field.coverage() - covered as f64 / 4800.0).abs() < 1e-12);
}

#[test]
fn too_few_reliable_pixels_give_no_priors() {
    let cam = CameraIntrinsics::new(90.0, 90.0, 40.0, 30.0, 80, 60).unwrap();
    let range = DepthRange::new(0.5, 20.0).unwrap();
    let mut grid = HypothesisGrid::new(80, 60, 1, vec![PlaneHypothesis::fronto_parallel(3.0); 4800]).unwrap();
    grid.costs[10] = 0.0;
    grid.costs[500] = 0.0;
    let field = build_planar_priors(&grid, 0.1, &cam, &range);
    assert_eq!(field.vertex_count, 2);
    assert_eq!(field.coverage(), 0.0);
}

#[test]
fn extra_vertices_span_unreliable_regions_and_replace_their_pixel() {
    let cam = CameraIntrinsics::new(90.0, 90.0, 40.0, 30.0, 80, 60).unwrap();
    let range = DepthRange::new(0.5, 20.0).unwrap();
    let n = Vec3::new(-0.2, 0.35, -1.0).normalize();
    let c = n.dot(&Vec3::new(0.0, 0.0, 4.0));
    // every grid hypothesis is off the plane; only one pixel is reliable
    let mut grid = HypothesisGrid::new(80, 60, 1, vec![PlaneHypothesis::fronto_parallel(9.0); 4800]).unwrap();
    grid.costs[20 * 80 + 30] = 0.0;

    // sub-pixel points on the plane, by ray intersection
    let on_plane = |u: f64, v: f64| {
        let (a, b) = ((u - cam.cx) / cam.fx, (v - cam.cy) / cam.fy);
        (Pixel::new(u, v), c / (n.x * a + n.y * b + n.z))
    };
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut extra: Vec<(Pixel, f64)> = (0..40)
        .map(|_| on_plane(rng.random_range(0.0..80.0), rng.random_range(0.0..60.0)))
        .collect();
    extra.extend([on_plane(0.1, 0.1), on_plane(79.9, 0.1), on_plane(0.1, 59.9), on_plane(79.9, 59.9)]);
    // lands in the reliable pixel, whose off-plane vertex must be dropped
    extra.push(on_plane(30.7, 20.2));

    let mut cells: Vec<(i64, i64)> = extra.iter().map(|(p, _)| (p.x.floor() as i64, p.y.floor() as i64)).collect();
    cells.sort();
    cells.dedup();
    let field = build_planar_priors_with(&grid, 0.1, &extra, &cam, &range);
    assert_eq!(field.vertex_count, cells.len());
    assert!(field.coverage() > 0.9, "coverage {}", field.coverage());
    for y in 0..60 {
        for x in 0..80 {
            if let Some(p) = field.prior(x, y) {
                let d = plane_depth(&cam, &n, c, x, y);
                assert!((p.depth - d).abs() <= 1e-9 * d, "depth {} vs {d} at ({x}, {y})", p.depth);
                assert!(p.normal.dot(&n) > 1.0 - 1e-12);
            }
        }
    }
}
