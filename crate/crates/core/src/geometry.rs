//! Pinhole cameras, rigid poses and per-pixel plane hypotheses.
//!
//! A plane hypothesis is stored as the depth at its anchor pixel plus a unit
//! normal in the camera frame. The implicit form `n . X = c` is derived on
//! demand: `c = n . X_anchor`, which is negative because normals always face
//! the camera.

use nalgebra::{Matrix3, Point2, Rotation3, Unit, Vector3};
use rand::Rng;

use crate::error::{MvsError, Result};

pub type Vec3 = Vector3<f64>;
pub type Mat3 = Matrix3<f64>;
pub type Pixel = Point2<f64>;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

impl CameraIntrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, width: usize, height: usize) -> Result<Self> {
        let cam = CameraIntrinsics {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
        };
        cam.validate()?;
        Ok(cam)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.fx > 0.0 && self.fy > 0.0) {
            return Err(MvsError::InvalidInput(format!(
                "focal lengths must be positive (fx = {}, fy = {})",
                self.fx, self.fy
            )));
        }
        if !(self.cx > 0.0 && self.cx < self.width as f64 && self.cy > 0.0 && self.cy < self.height as f64) {
            return Err(MvsError::InvalidInput(format!(
                "principal point ({}, {}) outside the {}x{} image",
                self.cx, self.cy, self.width, self.height
            )));
        }
        Ok(())
    }

    /// Intrinsics of the same camera resampled by `factor` (0.5 = half size).
    /// Pixel edges stay anchored at the origin, so every continuous
    /// coordinate scales linearly.
    pub fn scaled(&self, factor: f64, width: usize, height: usize) -> Self {
        CameraIntrinsics {
            fx: self.fx * factor,
            fy: self.fy * factor,
            cx: self.cx * factor,
            cy: self.cy * factor,
            width,
            height,
        }
    }

    pub fn matrix(&self) -> Mat3 {
        Mat3::new(self.fx, 0.0, self.cx, 0.0, self.fy, self.cy, 0.0, 0.0, 1.0)
    }

    pub fn inverse_matrix(&self) -> Mat3 {
        Mat3::new(
            1.0 / self.fx,
            0.0,
            -self.cx / self.fx,
            0.0,
            1.0 / self.fy,
            -self.cy / self.fy,
            0.0,
            0.0,
            1.0,
        )
    }

    /// Viewing ray through `p`, scaled to unit depth (z = 1).
    #[inline]
    pub fn ray(&self, p: &Pixel) -> Vec3 {
        Vec3::new((p.x - self.cx) / self.fx, (p.y - self.cy) / self.fy, 1.0)
    }

    /// Ray through the center of integer pixel `(x, y)`.
    #[inline]
    pub fn pixel_ray(&self, x: usize, y: usize) -> Vec3 {
        self.ray(&pixel_center(x, y))
    }

    #[inline]
    pub fn contains(&self, p: &Pixel) -> bool {
        p.x >= 0.0 && p.y >= 0.0 && p.x < self.width as f64 && p.y < self.height as f64
    }

    /// Integer pixel containing a continuous coordinate.
    #[inline]
    pub fn pixel_index(&self, p: &Pixel) -> Option<(usize, usize)> {
        if self.contains(p) {
            Some((p.x as usize, p.y as usize))
        } else {
            None
        }
    }

    #[inline]
    pub(crate) fn project_unchecked(&self, x: &Vec3) -> Pixel {
        Pixel::new(self.fx * x.x / x.z + self.cx, self.fy * x.y / x.z + self.cy)
    }
}

#[inline]
pub fn pixel_center(x: usize, y: usize) -> Pixel {
    Pixel::new(x as f64 + 0.5, y as f64 + 0.5)
}

/// Lift pixel `p` at depth `depth` (z coordinate) into the camera frame.
pub fn backproject(p: &Pixel, depth: f64, cam: &CameraIntrinsics) -> Result<Vec3> {
    if !(depth > 0.0) {
        return Err(MvsError::InvalidInput(format!("depth must be positive, got {depth}")));
    }
    Ok(cam.ray(p) * depth)
}

/// Pinhole projection. The returned pixel may lie outside the image.
pub fn project(x: &Vec3, cam: &CameraIntrinsics) -> Result<(Pixel, f64)> {
    if !(x.z > 0.0) {
        return Err(MvsError::BehindCamera(x.z));
    }
    Ok((cam.project_unchecked(x), x.z))
}

/// Rigid transform mapping camera coordinates into the world frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose {
    pub rotation: Mat3,
    pub translation: Vec3,
}

impl Pose {
    pub const ORTHONORMAL_TOLERANCE: f64 = 1e-9;

    pub fn identity() -> Self {
        Pose {
            rotation: Mat3::identity(),
            translation: Vec3::zeros(),
        }
    }

    pub fn new(rotation: Mat3, translation: Vec3) -> Result<Self> {
        let drift = rotation_drift(&rotation);
        if drift > Self::ORTHONORMAL_TOLERANCE || !translation.iter().all(|v| v.is_finite()) {
            return Err(MvsError::InvalidInput(format!(
                "rotation is not orthonormal with det +1 (drift {drift:.3e})"
            )));
        }
        Ok(Pose {
            rotation,
            translation,
        })
    }

    /// Build a pose from an arbitrary 3x3 matrix by projecting it onto the
    /// nearest rotation (SVD polar decomposition).
    pub fn from_nearest_rotation(m: &Mat3, translation: Vec3) -> Result<Self> {
        Ok(Pose {
            rotation: nearest_rotation(m)?,
            translation,
        })
    }

    /// Camera at `eye` looking at `target`, y axis pointing roughly along `down`.
    pub fn look_at(eye: Vec3, target: Vec3, down: Vec3) -> Result<Self> {
        let z = (target - eye)
            .try_normalize(1e-12)
            .ok_or_else(|| MvsError::InvalidInput("look_at target equals eye".into()))?;
        let x = down
            .cross(&z)
            .try_normalize(1e-12)
            .ok_or_else(|| MvsError::InvalidInput("look_at down vector parallel to view".into()))?;
        let y = z.cross(&x);
        let rotation = Mat3::from_columns(&[x, y, z]);
        Pose::new(rotation, eye)
    }

    pub fn inverse(&self) -> Pose {
        let rt = self.rotation.transpose();
        Pose {
            rotation: rt,
            translation: -(rt * self.translation),
        }
    }

    /// `self ∘ other`: apply `other` first, then `self`.
    pub fn compose(&self, other: &Pose) -> Pose {
        Pose {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }

    #[inline]
    pub fn transform_point(&self, x: &Vec3) -> Vec3 {
        self.rotation * x + self.translation
    }

    #[inline]
    pub fn transform_vector(&self, v: &Vec3) -> Vec3 {
        self.rotation * v
    }

    /// Camera center in the world frame.
    pub fn center(&self) -> Vec3 {
        self.translation
    }

    /// Transform taking points from `reference` camera coordinates into
    /// `target` camera coordinates, both poses being world-from-camera.
    pub fn relative(target: &Pose, reference: &Pose) -> Pose {
        target.inverse().compose(reference)
    }
}

/// Frobenius distance of `R^T R` from identity, plus the determinant error.
pub fn rotation_drift(r: &Mat3) -> f64 {
    (r.transpose() * r - Mat3::identity()).norm() + (r.determinant() - 1.0).abs()
}

pub fn nearest_rotation(m: &Mat3) -> Result<Mat3> {
    let svd = m.svd(true, true);
    let (u, v_t) = match (svd.u, svd.v_t) {
        (Some(u), Some(v_t)) => (u, v_t),
        _ => return Err(MvsError::InvalidInput("SVD failed while orthonormalizing rotation".into())),
    };
    let mut r = u * v_t;
    if r.determinant() < 0.0 {
        let mut d = Mat3::identity();
        d[(2, 2)] = -1.0;
        r = u * d * v_t;
    }
    if !(r.determinant() > 0.0) {
        return Err(MvsError::InvalidInput("matrix is not close to a rotation".into()));
    }
    Ok(r)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DepthRange {
    pub min: f64,
    pub max: f64,
}

impl DepthRange {
    pub fn new(min: f64, max: f64) -> Result<Self> {
        if !(min > 0.0 && min < max && max.is_finite()) {
            return Err(MvsError::InvalidInput(format!("invalid depth range [{min}, {max}]")));
        }
        Ok(DepthRange { min, max })
    }

    #[inline]
    pub fn clamp(&self, d: f64) -> f64 {
        d.clamp(self.min, self.max)
    }

    #[inline]
    pub fn contains(&self, d: f64) -> bool {
        d >= self.min && d <= self.max
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        rng.random_range(self.min..=self.max)
    }
}

/// Depth at the anchor pixel plus a unit, camera-facing normal.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PlaneHypothesis {
    pub depth: f64,
    pub normal: Vec3,
}

impl PlaneHypothesis {
    /// Normalize `normal` and flip it to face the camera along `ray`.
    pub fn facing(depth: f64, normal: Vec3, ray: &Vec3) -> Self {
        let mut n = normal.normalize();
        if n.dot(ray) > 0.0 {
            n = -n;
        }
        PlaneHypothesis { depth, normal: n }
    }

    pub fn fronto_parallel(depth: f64) -> Self {
        PlaneHypothesis {
            depth,
            normal: Vec3::new(0.0, 0.0, -1.0),
        }
    }

    /// Offset `c` of the implicit plane `n . X = c` for an anchor ray (z = 1).
    #[inline]
    pub fn plane_offset(&self, anchor_ray: &Vec3) -> f64 {
        self.normal.dot(anchor_ray) * self.depth
    }

    pub fn is_valid(&self, range: &DepthRange, ray: &Vec3) -> bool {
        range.contains(self.depth) && (self.normal.norm() - 1.0).abs() < 1e-6 && self.normal.dot(ray) < 0.0
    }
}

/// Depth (z) at which the ray through `q` meets the plane anchored at `p`.
pub fn depth_of_plane_at(h: &PlaneHypothesis, p: &Pixel, q: &Pixel, cam: &CameraIntrinsics) -> Result<f64> {
    let c = h.plane_offset(&cam.ray(p));
    depth_on_plane(&h.normal, c, &cam.ray(q))
}

/// Depth along a unit-depth ray for the plane `n . X = c`.
#[inline]
pub fn depth_on_plane(normal: &Vec3, offset: f64, ray: &Vec3) -> Result<f64> {
    let denom = normal.dot(ray);
    if denom.abs() < 1e-12 * ray.norm() {
        return Err(MvsError::OutOfRange("viewing ray parallel to plane".into()));
    }
    let d = offset / denom;
    if !(d > 0.0) || !d.is_finite() {
        return Err(MvsError::OutOfRange(format!("plane meets ray at depth {d}")));
    }
    Ok(d)
}

/// Precomputed pieces of the plane-induced homography between a reference
/// and a source camera: `H = A + b m^T / c` with `A = K_s R K_r^-1`,
/// `b = K_s t` and `m = K_r^-T n`.
#[derive(Debug, Clone, Copy)]
pub struct HomographyBasis {
    pub rotation_part: Mat3,
    pub translation_part: Vec3,
    pub ref_inverse: Mat3,
}

impl HomographyBasis {
    pub fn new(ref_cam: &CameraIntrinsics, src_cam: &CameraIntrinsics, src_from_ref: &Pose) -> Self {
        let ks = src_cam.matrix();
        let kinv = ref_cam.inverse_matrix();
        HomographyBasis {
            rotation_part: ks * src_from_ref.rotation * kinv,
            translation_part: ks * src_from_ref.translation,
            ref_inverse: kinv,
        }
    }

    /// Unnormalized homography for plane `n . X = c` (reference frame).
    #[inline]
    pub fn homography(&self, normal: &Vec3, offset: f64) -> Mat3 {
        let m = self.ref_inverse.transpose() * normal;
        self.rotation_part + self.translation_part * (m.transpose() / offset)
    }
}

/// Homography mapping reference pixels to source pixels through the plane of
/// `h` anchored at reference pixel `p`. Normalized so that `H[2][2] = 1`.
pub fn plane_homography(
    h: &PlaneHypothesis,
    p: &Pixel,
    ref_cam: &CameraIntrinsics,
    src_cam: &CameraIntrinsics,
    src_from_ref: &Pose,
) -> Result<Mat3> {
    let ray = ref_cam.ray(p);
    let cos = h.normal.dot(&ray) / ray.norm();
    if cos.abs() < 1e-9 || !(h.depth > 0.0) {
        return Err(MvsError::DegenerateHomography(format!(
            "plane through the anchor ray is degenerate (cos = {cos:.3e}, depth = {})",
            h.depth
        )));
    }
    let offset = h.plane_offset(&ray);
    let basis = HomographyBasis::new(ref_cam, src_cam, src_from_ref);
    let mut hm = basis.homography(&h.normal, offset);
    let scale = hm[(2, 2)];
    if scale.abs() < 1e-12 || !scale.is_finite() {
        return Err(MvsError::DegenerateHomography("homography cannot be normalized".into()));
    }
    hm /= scale;
    Ok(hm)
}

#[inline]
pub fn apply_homography(hm: &Mat3, p: &Pixel) -> Option<Pixel> {
    let x = hm[(0, 0)] * p.x + hm[(0, 1)] * p.y + hm[(0, 2)];
    let y = hm[(1, 0)] * p.x + hm[(1, 1)] * p.y + hm[(1, 2)];
    let z = hm[(2, 0)] * p.x + hm[(2, 1)] * p.y + hm[(2, 2)];
    if z.abs() < 1e-15 {
        return None;
    }
    Some(Pixel::new(x / z, y / z))
}

/// Uniform sample on the hemisphere of directions facing against `view_ray`.
pub fn random_unit_normal<R: Rng + ?Sized>(rng: &mut R, view_ray: &Vec3) -> Vec3 {
    loop {
        let z: f64 = rng.random_range(-1.0..1.0);
        let phi: f64 = rng.random_range(0.0..std::f64::consts::TAU);
        let r = (1.0 - z * z).sqrt();
        let n = Vec3::new(r * phi.cos(), r * phi.sin(), z);
        let s = n.dot(view_ray);
        if s < 0.0 {
            return n;
        }
        if s > 0.0 {
            return -n;
        }
    }
}

/// Uniform random rotation axis.
pub fn random_axis<R: Rng + ?Sized>(rng: &mut R) -> Unit<Vec3> {
    let z: f64 = rng.random_range(-1.0..=1.0);
    let phi: f64 = rng.random_range(0.0..std::f64::consts::TAU);
    let r = (1.0 - z * z).max(0.0).sqrt();
    Unit::new_normalize(Vec3::new(r * phi.cos(), r * phi.sin(), z))
}

/// Rotate `n` by `angle` about `axis` and bring it back into the visible
/// hemisphere of `view_ray` by mirroring across the plane orthogonal to the
/// ray. Falls back to `n` when the result would graze the ray.
pub fn rotate_facing(n: &Vec3, axis: &Unit<Vec3>, angle: f64, view_ray: &Vec3) -> Vec3 {
    let rotated = Rotation3::from_axis_angle(axis, angle) * n;
    let r = view_ray.normalize();
    let mut out = rotated;
    let s = out.dot(&r);
    if s > 0.0 {
        out -= r * (2.0 * s);
    }
    if out.dot(&r) > -1e-6 {
        return *n;
    }
    out.normalize()
}

/// Angle between two vectors in radians.
#[inline]
pub fn angle_between(a: &Vec3, b: &Vec3) -> f64 {
    let c = a.dot(b) / (a.norm() * b.norm());
    c.clamp(-1.0, 1.0).acos()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn cam() -> CameraIntrinsics {
        CameraIntrinsics::new(300.0, 310.0, 160.0, 120.0, 320, 240).unwrap()
    }

    #[test]
    fn backproject_principal_ray() {
        let c = cam();
        let x = backproject(&Pixel::new(c.cx, c.cy), 5.0, &c).unwrap();
        assert_eq!(x, Vec3::new(0.0, 0.0, 5.0));
        let x = backproject(&Pixel::new(c.cx + c.fx, c.cy), 1.0, &c).unwrap();
        assert!((x - Vec3::new(1.0, 0.0, 1.0)).norm() < 1e-15);
        assert!(backproject(&Pixel::new(1.0, 1.0), 0.0, &c).is_err());
        assert!(backproject(&Pixel::new(1.0, 1.0), -2.0, &c).is_err());
    }

    #[test]
    fn project_examples() {
        let c = CameraIntrinsics::new(300.0, 300.0, 160.0, 120.0, 320, 240).unwrap();
        let (p, z) = project(&Vec3::new(0.0, 0.0, 10.0), &c).unwrap();
        assert_eq!((p.x, p.y, z), (c.cx, c.cy, 10.0));
        let (p, z) = project(&Vec3::new(2.0, 0.0, 2.0), &c).unwrap();
        assert_eq!((p.x, p.y, z), (c.cx + 300.0, c.cy, 2.0));
        assert!(matches!(project(&Vec3::new(0.0, 0.0, 0.0), &c), Err(MvsError::BehindCamera(_))));
        assert!(project(&Vec3::new(0.0, 0.0, -1.0), &c).is_err());
    }

    #[test]
    fn intrinsics_validation() {
        assert!(CameraIntrinsics::new(0.0, 1.0, 10.0, 10.0, 20, 20).is_err());
        assert!(CameraIntrinsics::new(1.0, 1.0, 25.0, 10.0, 20, 20).is_err());
        assert!(CameraIntrinsics::new(1.0, 1.0, 0.0, 10.0, 20, 20).is_err());
    }

    #[test]
    fn identity_relative_pose_gives_identity_homography() {
        let c = cam();
        let h = PlaneHypothesis::facing(4.0, Vec3::new(0.2, -0.3, -1.0), &c.pixel_ray(100, 80));
        let hm = plane_homography(&h, &pixel_center(100, 80), &c, &c, &Pose::identity()).unwrap();
        assert!((hm - Mat3::identity()).norm() < 1e-12);
    }

    #[test]
    fn fronto_parallel_homography_is_disparity_shift() {
        let c = CameraIntrinsics::new(300.0, 300.0, 160.0, 120.0, 320, 240).unwrap();
        let d = 5.0;
        let b = 0.4;
        // source camera center at +b along x: X_src = X_ref - (b, 0, 0)
        let src_from_ref = Pose::new(Mat3::identity(), Vec3::new(-b, 0.0, 0.0)).unwrap();
        let h = PlaneHypothesis::fronto_parallel(d);
        let p = pixel_center(40, 50);
        let hm = plane_homography(&h, &p, &c, &c, &src_from_ref).unwrap();
        for q in [pixel_center(10, 10), pixel_center(200, 190), Pixel::new(33.3, 77.7)] {
            let s = apply_homography(&hm, &q).unwrap();
            assert!((s.x - (q.x - 300.0 * b / d)).abs() < 1e-9);
            assert!((s.y - q.y).abs() < 1e-9);
        }
    }

    #[test]
    fn degenerate_homography_detected() {
        let c = cam();
        let p = pixel_center(160, 120);
        let ray = c.ray(&p);
        // normal orthogonal to the anchor ray
        let n = ray.cross(&Vec3::new(1.0, 0.0, 0.0)).normalize();
        let h = PlaneHypothesis { depth: 3.0, normal: n };
        let rel = Pose::new(Mat3::identity(), Vec3::new(0.1, 0.0, 0.0)).unwrap();
        assert!(matches!(
            plane_homography(&h, &p, &c, &c, &rel),
            Err(MvsError::DegenerateHomography(_))
        ));
    }

    #[test]
    fn depth_of_plane_anchor_and_fronto() {
        let c = cam();
        let p = pixel_center(50, 60);
        let h = PlaneHypothesis::facing(7.5, Vec3::new(0.3, 0.4, -1.0), &c.ray(&p));
        assert!((depth_of_plane_at(&h, &p, &p, &c).unwrap() - 7.5).abs() < 1e-12);
        let f = PlaneHypothesis::fronto_parallel(3.25);
        for q in [pixel_center(0, 0), pixel_center(319, 239)] {
            assert!((depth_of_plane_at(&f, &p, &q, &c).unwrap() - 3.25).abs() < 1e-12);
        }
    }

    #[test]
    fn depth_of_plane_parallel_ray_is_error() {
        let c = cam();
        let p = pixel_center(160, 120);
        // horizontal plane; the principal ray runs parallel to it
        let h = PlaneHypothesis {
            depth: 10.0,
            normal: Vec3::new(0.0, -1.0, 0.0),
        };
        let q = Pixel::new(c.cx, c.cy);
        assert!(depth_of_plane_at(&h, &p, &q, &c).is_err());
    }

    #[test]
    fn pose_inverse_and_composition() {
        let r = Rotation3::from_euler_angles(0.1, -0.4, 0.7).into_inner();
        let a = Pose::new(r, Vec3::new(1.0, -2.0, 0.5)).unwrap();
        let id = a.compose(&a.inverse());
        assert!((id.rotation - Mat3::identity()).norm() < 1e-12);
        assert!(id.translation.norm() < 1e-12);
        assert!(Pose::new(Mat3::identity() * 1.01, Vec3::zeros()).is_err());
    }

    #[test]
    fn nearest_rotation_repairs_drift() {
        let r = Rotation3::from_euler_angles(0.3, 0.2, -0.1).into_inner();
        let noisy = r + Mat3::from_element(1e-5);
        let fixed = nearest_rotation(&noisy).unwrap();
        assert!(rotation_drift(&fixed) < 1e-12);
        assert!((fixed - r).norm() < 1e-4);
    }

    #[test]
    fn random_normals_face_camera_and_are_unit() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let c = cam();
        for i in 0..2000 {
            let ray = c.pixel_ray(i % 320, (i * 7) % 240);
            let n = random_unit_normal(&mut rng, &ray);
            assert!((n.norm() - 1.0).abs() < 1e-6);
            assert!(n.dot(&ray) < 0.0);
        }
    }

    #[test]
    fn rotate_facing_keeps_orientation() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let ray = Vec3::new(0.3, -0.2, 1.0);
        let n = Vec3::new(0.0, 0.0, -1.0);
        for _ in 0..1000 {
            let axis = random_axis(&mut rng);
            let m = rotate_facing(&n, &axis, rng.random_range(-1.5..1.5), &ray);
            assert!((m.norm() - 1.0).abs() < 1e-9);
            assert!(m.dot(&ray) < 0.0);
        }
    }
}
