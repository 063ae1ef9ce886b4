//! Ray-cast renderer for textured planar scenes with analytic ground truth.
//!
//! Surfaces are one-sided planes (optionally bounded rectangles) carrying a
//! multi-octave value-noise albedo. Shading is Lambertian under a directional
//! light, so the appearance of a surface point does not depend on the
//! viewpoint. Pixels that see no surface get depth 0 (invalid) and a black
//! color.

use std::fmt::Write as _;
use std::path::Path;

use rayon::prelude::*;

use crate::error::{MvsError, Result};
use crate::geometry::{CameraIntrinsics, DepthRange, Pose, Vec3};
use crate::grid::{ColorImage, DepthMap, Grid};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TextureSpec {
    pub seed: u64,
    /// Size in meters of one cell of the coarsest noise octave.
    pub scale: f64,
    pub octaves: usize,
}

impl Default for TextureSpec {
    fn default() -> Self {
        TextureSpec {
            seed: 1,
            scale: 0.08,
            octaves: 4,
        }
    }
}

/// Interval `[min, max]` along a surface's `u` axis rendered with constant
/// albedo, optionally limited to `[v_min, v_max]` along its `v` axis.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Band {
    pub min: f64,
    pub max: f64,
    pub v_extent: Option<(f64, f64)>,
}

impl Band {
    pub fn contains(&self, s: f64, t: f64) -> bool {
        s >= self.min && s <= self.max && self.v_extent.is_none_or(|(lo, hi)| t >= lo && t <= hi)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlaneSurface {
    pub point: Vec3,
    /// Unit normal; the surface is visible from this side only.
    pub normal: Vec3,
    /// In-plane unit axes spanning texture coordinates.
    pub u_axis: Vec3,
    pub v_axis: Vec3,
    /// Half sizes along `u` and `v`; unbounded when `None`.
    pub half_extent: Option<(f64, f64)>,
    pub texture: TextureSpec,
    pub bands: Vec<Band>,
}

impl PlaneSurface {
    /// Plane through `point` with normal `normal`; the texture `u` axis is
    /// the projection of `u_hint` onto the plane.
    pub fn new(point: Vec3, normal: Vec3, u_hint: Vec3, texture: TextureSpec) -> Result<Self> {
        let n = normal
            .try_normalize(1e-12)
            .ok_or_else(|| MvsError::InvalidScene("plane normal has zero length".into()))?;
        let u = (u_hint - n * n.dot(&u_hint))
            .try_normalize(1e-9)
            .ok_or_else(|| MvsError::InvalidScene("u axis is parallel to the plane normal".into()))?;
        let v = n.cross(&u);
        Ok(PlaneSurface {
            point,
            normal: n,
            u_axis: u,
            v_axis: v,
            half_extent: None,
            texture,
            bands: Vec::new(),
        })
    }

    /// Ray parameter of the visible-side intersection, if any.
    fn intersect(&self, origin: &Vec3, dir: &Vec3) -> Option<f64> {
        let denom = self.normal.dot(dir);
        if denom >= -1e-12 {
            return None;
        }
        let t = self.normal.dot(&(self.point - origin)) / denom;
        if !(t > 1e-9) {
            return None;
        }
        if let Some((hu, hv)) = self.half_extent {
            let rel = origin + dir * t - self.point;
            if rel.dot(&self.u_axis).abs() > hu || rel.dot(&self.v_axis).abs() > hv {
                return None;
            }
        }
        Some(t)
    }

    /// Albedo in `[0.25, 0.75]` at a world point on the surface.
    pub fn albedo(&self, x: &Vec3) -> f64 {
        let rel = x - self.point;
        let s = rel.dot(&self.u_axis);
        let t = rel.dot(&self.v_axis);
        if self.bands.iter().any(|b| b.contains(s, t)) {
            return 0.5;
        }
        0.25 + 0.5 * value_noise(s / self.texture.scale, t / self.texture.scale, &self.texture)
    }
}

fn hash2(ix: i64, iy: i64, seed: u64) -> f64 {
    let mut h = seed ^ 0x51_7C_C1_B7_27_22_0A_95;
    h = h.wrapping_add((ix as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    h ^= h >> 29;
    h = h.wrapping_add((iy as u64).wrapping_mul(0xC2B2_AE3D_27D4_EB4F));
    h ^= h >> 32;
    h = h.wrapping_mul(0xD6E8_FEB8_6659_FD93);
    h ^= h >> 32;
    (h >> 11) as f64 / (1u64 << 53) as f64
}

/// Multi-octave value noise in `[0, 1]`.
pub fn value_noise(s: f64, t: f64, spec: &TextureSpec) -> f64 {
    let fade = |x: f64| x * x * x * (x * (x * 6.0 - 15.0) + 10.0);
    let mut sum = 0.0;
    let mut norm = 0.0;
    let mut amp = 1.0;
    let mut freq = 1.0;
    for octave in 0..spec.octaves.max(1) {
        let seed = spec.seed.wrapping_mul(31).wrapping_add(octave as u64);
        let (x, y) = (s * freq, t * freq);
        let (x0, y0) = (x.floor(), y.floor());
        let (fx, fy) = (fade(x - x0), fade(y - y0));
        let (ix, iy) = (x0 as i64, y0 as i64);
        let a = hash2(ix, iy, seed);
        let b = hash2(ix + 1, iy, seed);
        let c = hash2(ix, iy + 1, seed);
        let d = hash2(ix + 1, iy + 1, seed);
        let top = a + (b - a) * fx;
        let bottom = c + (d - c) * fx;
        sum += amp * (top + (bottom - top) * fy);
        norm += amp;
        amp *= 0.5;
        freq *= 2.0;
    }
    sum / norm
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticScene {
    pub surfaces: Vec<PlaneSurface>,
    /// World-from-camera poses of the views to render.
    pub poses: Vec<Pose>,
    /// Unit direction towards the light.
    pub light: Vec3,
    pub ambient: f64,
}

/// Scene plus the camera it is meant to be rendered with.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneSpec {
    pub scene: SyntheticScene,
    pub intrinsics: CameraIntrinsics,
}

#[derive(Debug, Clone)]
pub struct RenderedView {
    pub image: ColorImage,
    pub pose: Pose,
    /// Ground-truth depth, 0 where no surface is visible.
    pub depth: DepthMap,
    /// Ground-truth camera-frame normals, zero where no surface is visible.
    pub normals: Grid<Vec3>,
}

const CHANNEL_TINT: [f64; 3] = [1.0, 0.92, 0.84];
const SUPERSAMPLE: usize = 3;
/// Minimum fraction of pixels that must see a surface in every view.
const MIN_COVERAGE: f64 = 0.5;

impl SyntheticScene {
    pub fn validate(&self) -> Result<()> {
        if self.surfaces.is_empty() {
            return Err(MvsError::InvalidScene("scene has no surfaces".into()));
        }
        if self.poses.is_empty() {
            return Err(MvsError::InvalidScene("scene has no views".into()));
        }
        if self.light.norm() < 1e-12 || !(0.0..=1.0).contains(&self.ambient) {
            return Err(MvsError::InvalidScene("light direction or ambient term invalid".into()));
        }
        for (i, pose) in self.poses.iter().enumerate() {
            let c = pose.center();
            for (j, s) in self.surfaces.iter().enumerate() {
                if s.normal.dot(&(c - s.point)) <= 1e-9 {
                    return Err(MvsError::InvalidScene(format!(
                        "camera {i} is behind or inside surface {j}"
                    )));
                }
            }
        }
        Ok(())
    }

    /// Nearest visible surface along a ray: (t, surface index).
    fn trace(&self, origin: &Vec3, dir: &Vec3) -> Option<(f64, usize)> {
        let mut best: Option<(f64, usize)> = None;
        for (i, s) in self.surfaces.iter().enumerate() {
            if let Some(t) = s.intersect(origin, dir) {
                if best.is_none_or(|(bt, _)| t < bt) {
                    best = Some((t, i));
                }
            }
        }
        best
    }

    fn shade(&self, origin: &Vec3, dir: &Vec3) -> [f32; 3] {
        let Some((t, i)) = self.trace(origin, dir) else {
            return [0.0; 3];
        };
        let s = &self.surfaces[i];
        let x = origin + dir * t;
        let lambert = s.normal.dot(&self.light.normalize()).max(0.0);
        let intensity = s.albedo(&x) * (self.ambient + (1.0 - self.ambient) * lambert);
        let mut out = [0.0f32; 3];
        for (o, tint) in out.iter_mut().zip(CHANNEL_TINT) {
            *o = (intensity * tint) as f32;
        }
        out
    }

    /// Render one view: supersampled color plus ground truth through the
    /// pixel centers.
    pub fn render_view(&self, pose: &Pose, cam: &CameraIntrinsics) -> RenderedView {
        let (w, h) = (cam.width, cam.height);
        let origin = pose.center();
        let rows: Vec<Vec<([f32; 3], f64, Vec3)>> = (0..h)
            .into_par_iter()
            .map(|y| {
                (0..w)
                    .map(|x| {
                        let mut acc = [0.0f32; 3];
                        for sy in 0..SUPERSAMPLE {
                            for sx in 0..SUPERSAMPLE {
                                let u = x as f64 + (sx as f64 + 0.5) / SUPERSAMPLE as f64;
                                let v = y as f64 + (sy as f64 + 0.5) / SUPERSAMPLE as f64;
                                let dir = pose.transform_vector(&cam.ray(&crate::geometry::Pixel::new(u, v)));
                                let c = self.shade(&origin, &dir);
                                for k in 0..3 {
                                    acc[k] += c[k];
                                }
                            }
                        }
                        let n = (SUPERSAMPLE * SUPERSAMPLE) as f32;
                        let color = [acc[0] / n, acc[1] / n, acc[2] / n];
                        let ray = cam.pixel_ray(x, y);
                        let dir = pose.transform_vector(&ray);
                        match self.trace(&origin, &dir) {
                            // t is measured along a z = 1 ray, so it equals the depth
                            Some((t, i)) => {
                                let normal = pose.inverse().transform_vector(&self.surfaces[i].normal);
                                (color, t, normal)
                            }
                            None => (color, 0.0, Vec3::zeros()),
                        }
                    })
                    .collect()
            })
            .collect();
        let mut image = Vec::with_capacity(w * h);
        let mut depth = Vec::with_capacity(w * h);
        let mut normals = Vec::with_capacity(w * h);
        for (c, d, n) in rows.into_iter().flatten() {
            image.push(c);
            depth.push(d);
            normals.push(n);
        }
        RenderedView {
            image: Grid::from_vec(w, h, image).expect("sized"),
            pose: *pose,
            depth: Grid::from_vec(w, h, depth).expect("sized"),
            normals: Grid::from_vec(w, h, normals).expect("sized"),
        }
    }

    /// Depth range spanned by the visible surfaces over all views, padded.
    pub fn depth_bounds(&self, views: &[RenderedView]) -> Option<DepthRange> {
        let (mut lo, mut hi) = (f64::INFINITY, 0.0f64);
        for v in views {
            for &d in v.depth.data() {
                if d > 0.0 {
                    lo = lo.min(d);
                    hi = hi.max(d);
                }
            }
        }
        DepthRange::new(lo * 0.5, hi * 1.5).ok()
    }
}

/// Render every view of `scene`.
pub fn render_scene(scene: &SyntheticScene, cam: &CameraIntrinsics) -> Result<Vec<RenderedView>> {
    scene.validate()?;
    cam.validate()?;
    let views: Vec<RenderedView> = scene.poses.iter().map(|p| scene.render_view(p, cam)).collect();
    for (i, v) in views.iter().enumerate() {
        let covered = v.depth.data().iter().filter(|d| **d > 0.0).count();
        let frac = covered as f64 / v.depth.len() as f64;
        if frac < MIN_COVERAGE {
            return Err(MvsError::InvalidScene(format!(
                "view {i} sees surfaces in only {:.0}% of its pixels",
                100.0 * frac
            )));
        }
    }
    Ok(views)
}

/// Half-width in meters of the textureless band of the band preset.
pub const PRESET_BAND_HALF_WIDTH: f64 = 0.27;
/// Half-height in meters of the band, 0.3 m short of the plane's edges.
pub const PRESET_BAND_HALF_HEIGHT: f64 = 0.9;

/// The reference test scene: one bounded, slanted, textured plane about 4 m
/// away, seen by five cameras on a horizontal baseline that all look at its
/// center. With `band`, a vertical strip about 40 px wide in the middle view
/// is textureless; it stops short of the plane's top and bottom edges so
/// that texture surrounds it.
pub fn preset_plane_scene(band: bool) -> SceneSpec {
    let intrinsics = CameraIntrinsics::new(300.0, 300.0, 160.0, 120.0, 320, 240).expect("valid preset camera");
    let center = Vec3::new(0.0, 0.0, 4.0);
    let normal = Vec3::new(20f64.to_radians().sin(), -10f64.to_radians().sin(), -1.0);
    let mut plane = PlaneSurface::new(center, normal, Vec3::new(1.0, 0.0, 0.0), TextureSpec::default())
        .expect("valid preset plane");
    plane.half_extent = Some((1.7, 1.2));
    if band {
        plane.bands.push(Band {
            min: -PRESET_BAND_HALF_WIDTH,
            max: PRESET_BAND_HALF_WIDTH,
            v_extent: Some((-PRESET_BAND_HALF_HEIGHT, PRESET_BAND_HALF_HEIGHT)),
        });
    }
    let poses = [-0.6, -0.3, 0.0, 0.3, 0.6]
        .iter()
        .map(|&x| Pose::look_at(Vec3::new(x, 0.0, 0.0), center, Vec3::new(0.0, 1.0, 0.0)).expect("valid preset pose"))
        .collect();
    SceneSpec {
        scene: SyntheticScene {
            surfaces: vec![plane],
            poses,
            light: Vec3::new(0.3, -0.4, -1.0).normalize(),
            ambient: 0.4,
        },
        intrinsics,
    }
}

fn fmt_vec(v: &Vec3) -> String {
    format!("{:?} {:?} {:?}", v.x, v.y, v.z)
}

impl SceneSpec {
    /// Serialize to the sectioned key-value scene format read by
    /// [`SceneSpec::parse`]. Views are written as explicit poses.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let c = &self.intrinsics;
        let _ = writeln!(s, "[camera]");
        let _ = writeln!(s, "width = {}\nheight = {}", c.width, c.height);
        let _ = writeln!(s, "fx = {:?}\nfy = {:?}\ncx = {:?}\ncy = {:?}\n", c.fx, c.fy, c.cx, c.cy);
        let _ = writeln!(s, "[light]");
        let _ = writeln!(s, "direction = {}", fmt_vec(&self.scene.light));
        let _ = writeln!(s, "ambient = {:?}\n", self.scene.ambient);
        for p in &self.scene.poses {
            let _ = writeln!(s, "[view]");
            let r = &p.rotation;
            let _ = writeln!(
                s,
                "rotation = {:?} {:?} {:?} {:?} {:?} {:?} {:?} {:?} {:?}",
                r[(0, 0)],
                r[(0, 1)],
                r[(0, 2)],
                r[(1, 0)],
                r[(1, 1)],
                r[(1, 2)],
                r[(2, 0)],
                r[(2, 1)],
                r[(2, 2)]
            );
            let _ = writeln!(s, "position = {}\n", fmt_vec(&p.translation));
        }
        for pl in &self.scene.surfaces {
            let _ = writeln!(s, "[plane]");
            let _ = writeln!(s, "point = {}", fmt_vec(&pl.point));
            let _ = writeln!(s, "normal = {}", fmt_vec(&pl.normal));
            let _ = writeln!(s, "u_axis = {}", fmt_vec(&pl.u_axis));
            if let Some((a, b)) = pl.half_extent {
                let _ = writeln!(s, "half_extent = {a:?} {b:?}");
            }
            let _ = writeln!(s, "texture_seed = {}", pl.texture.seed);
            let _ = writeln!(s, "texture_scale = {:?}", pl.texture.scale);
            let _ = writeln!(s, "octaves = {}", pl.texture.octaves);
            for b in &pl.bands {
                match b.v_extent {
                    None => {
                        let _ = writeln!(s, "band = {:?} {:?}", b.min, b.max);
                    }
                    Some((lo, hi)) => {
                        let _ = writeln!(s, "band = {:?} {:?} {lo:?} {hi:?}", b.min, b.max);
                    }
                }
            }
            let _ = writeln!(s);
        }
        s
    }

    /// Parse the sectioned key-value scene format. Sections are `[camera]`,
    /// `[light]`, any number of `[view]` (either `eye`/`target`/`down` or
    /// `rotation`/`position`) and any number of `[plane]`.
    pub fn parse(text: &str, path: &Path) -> Result<SceneSpec> {
        let mut sections: Vec<(String, usize, Vec<(usize, String, String)>)> = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line_no = i + 1;
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
                sections.push((name.trim().to_string(), line_no, Vec::new()));
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                return Err(MvsError::parse(path, line_no, format!("expected `key = value`, got `{line}`")));
            };
            let Some(section) = sections.last_mut() else {
                return Err(MvsError::parse(path, line_no, "key outside of any section"));
            };
            section.2.push((line_no, k.trim().to_string(), v.trim().to_string()));
        }

        let mut intrinsics = None;
        let mut light = Vec3::new(0.0, 0.0, -1.0);
        let mut ambient = 0.4;
        let mut poses = Vec::new();
        let mut surfaces = Vec::new();
        for (name, line_no, entries) in &sections {
            let mut kv = KeyValues::new(path, *line_no, entries);
            match name.as_str() {
                "camera" => {
                    let cam = CameraIntrinsics::new(
                        kv.float("fx")?,
                        kv.float("fy")?,
                        kv.float("cx")?,
                        kv.float("cy")?,
                        kv.usize("width")?,
                        kv.usize("height")?,
                    )
                    .map_err(|e| MvsError::parse(path, *line_no, e.to_string()))?;
                    intrinsics = Some(cam);
                }
                "light" => {
                    light = kv.vec3("direction")?.normalize();
                    ambient = kv.float("ambient")?;
                }
                "view" => {
                    let pose = if kv.has("rotation") {
                        let r = kv.floats("rotation", 9)?;
                        let m = crate::geometry::Mat3::from_row_slice(&r);
                        let t = kv.vec3("position")?;
                        Pose::new(m, t).map_err(|e| MvsError::parse(path, *line_no, e.to_string()))?
                    } else {
                        let down = if kv.has("down") {
                            kv.vec3("down")?
                        } else {
                            Vec3::new(0.0, 1.0, 0.0)
                        };
                        Pose::look_at(kv.vec3("eye")?, kv.vec3("target")?, down)
                            .map_err(|e| MvsError::parse(path, *line_no, e.to_string()))?
                    };
                    poses.push(pose);
                }
                "plane" => {
                    let mut texture = TextureSpec::default();
                    if kv.has("texture_seed") {
                        texture.seed = kv.usize("texture_seed")? as u64;
                    }
                    if kv.has("texture_scale") {
                        texture.scale = kv.float("texture_scale")?;
                    }
                    if kv.has("octaves") {
                        texture.octaves = kv.usize("octaves")?;
                    }
                    if !(texture.scale > 0.0) {
                        return Err(MvsError::parse(path, *line_no, "texture_scale must be positive"));
                    }
                    let u_hint = if kv.has("u_axis") {
                        kv.vec3("u_axis")?
                    } else {
                        Vec3::new(1.0, 0.0, 0.0)
                    };
                    let mut plane = PlaneSurface::new(kv.vec3("point")?, kv.vec3("normal")?, u_hint, texture)
                        .map_err(|e| MvsError::parse(path, *line_no, e.to_string()))?;
                    if kv.has("half_extent") {
                        let e = kv.floats("half_extent", 2)?;
                        plane.half_extent = Some((e[0], e[1]));
                    }
                    for b in kv.all_floats("band", &[2, 4])? {
                        plane.bands.push(Band {
                            min: b[0],
                            max: b[1],
                            v_extent: (b.len() == 4).then(|| (b[2], b[3])),
                        });
                    }
                    surfaces.push(plane);
                }
                other => {
                    return Err(MvsError::parse(path, *line_no, format!("unknown section [{other}]")));
                }
            }
            kv.finish()?;
        }
        let intrinsics = intrinsics.ok_or_else(|| MvsError::parse(path, 0, "missing [camera] section"))?;
        let spec = SceneSpec {
            scene: SyntheticScene {
                surfaces,
                poses,
                light,
                ambient,
            },
            intrinsics,
        };
        spec.scene.validate()?;
        Ok(spec)
    }
}

/// Entries of one section, tracking which keys were consumed.
struct KeyValues<'a> {
    path: &'a Path,
    line: usize,
    entries: &'a [(usize, String, String)],
    used: Vec<bool>,
}

impl<'a> KeyValues<'a> {
    fn new(path: &'a Path, line: usize, entries: &'a [(usize, String, String)]) -> Self {
        KeyValues {
            path,
            line,
            entries,
            used: vec![false; entries.len()],
        }
    }

    fn has(&self, key: &str) -> bool {
        self.entries.iter().any(|e| e.1 == key)
    }

    fn raw(&mut self, key: &str) -> Result<(usize, &'a str)> {
        let pos = self
            .entries
            .iter()
            .rposition(|e| e.1 == key)
            .ok_or_else(|| MvsError::parse(self.path, self.line, format!("missing key `{key}`")))?;
        for (i, e) in self.entries.iter().enumerate() {
            if e.1 == key {
                self.used[i] = true;
            }
        }
        Ok((self.entries[pos].0, self.entries[pos].2.as_str()))
    }

    fn parse_floats(&self, line: usize, value: &str, counts: &[usize]) -> Result<Vec<f64>> {
        let vals: std::result::Result<Vec<f64>, _> = value.split_whitespace().map(str::parse::<f64>).collect();
        match vals {
            Ok(v) if counts.contains(&v.len()) && v.iter().all(|x| x.is_finite()) => Ok(v),
            _ => {
                let expected: Vec<String> = counts.iter().map(|c| c.to_string()).collect();
                Err(MvsError::parse(
                    self.path,
                    line,
                    format!("expected {} numbers, got `{value}`", expected.join(" or ")),
                ))
            }
        }
    }

    fn floats(&mut self, key: &str, n: usize) -> Result<Vec<f64>> {
        let (line, v) = self.raw(key)?;
        self.parse_floats(line, v, &[n])
    }

    fn all_floats(&mut self, key: &str, counts: &[usize]) -> Result<Vec<Vec<f64>>> {
        let mut out = Vec::new();
        for (i, e) in self.entries.iter().enumerate() {
            if e.1 == key {
                self.used[i] = true;
                out.push(self.parse_floats(e.0, &e.2, counts)?);
            }
        }
        Ok(out)
    }

    fn float(&mut self, key: &str) -> Result<f64> {
        Ok(self.floats(key, 1)?[0])
    }

    fn vec3(&mut self, key: &str) -> Result<Vec3> {
        let v = self.floats(key, 3)?;
        Ok(Vec3::new(v[0], v[1], v[2]))
    }

    fn usize(&mut self, key: &str) -> Result<usize> {
        let (line, v) = self.raw(key)?;
        v.parse()
            .map_err(|_| MvsError::parse(self.path, line, format!("`{key}` must be a non-negative integer")))
    }

    fn finish(self) -> Result<()> {
        for (e, used) in self.entries.iter().zip(&self.used) {
            if !used {
                return Err(MvsError::parse(self.path, e.0, format!("unknown key `{}`", e.1)));
            }
        }
        Ok(())
    }
}
