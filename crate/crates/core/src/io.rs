//! File formats: PFM float maps, KITTI pose lists, seed lists and 8/16-bit
//! raster images.

use std::fs;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use crate::error::{MvsError, Result};
use crate::geometry::{nearest_rotation, rotation_drift, Mat3, Pixel, Pose, Vec3};
use crate::grid::{ColorImage, DepthMap, Grid};
use crate::seeding::{Seed, SeedSet, SeedSource};

/// Rotation drift above which a pose is re-orthonormalized (with a warning).
pub const POSE_REPAIR_DRIFT: f64 = 1e-6;
/// Rotation drift above which a pose is rejected.
pub const POSE_REJECT_DRIFT: f64 = 1e-3;

fn write_pfm_raw(path: &Path, magic: &str, width: usize, height: usize, channels: usize, data: &[f32]) -> Result<()> {
    if let Some(bad) = data.iter().find(|v| !v.is_finite()) {
        return Err(MvsError::InvalidOutput(format!(
            "{}: refusing to write non-finite value {bad}",
            path.display()
        )));
    }
    let mut buf = Vec::with_capacity(32 + data.len() * 4);
    write!(buf, "{magic}\n{width} {height}\n-1.0\n").expect("writing to memory");
    for y in (0..height).rev() {
        for v in &data[y * width * channels..(y + 1) * width * channels] {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    fs::write(path, buf).map_err(|e| MvsError::io(path, e))
}

fn read_pfm_raw(path: &Path, expect_channels: usize) -> Result<(usize, usize, Vec<f32>)> {
    let file = fs::File::open(path).map_err(|e| MvsError::io(path, e))?;
    let mut reader = BufReader::new(file);
    let mut header = Vec::new();
    for line_no in 1..=3 {
        let mut line = String::new();
        reader.read_line(&mut line).map_err(|e| MvsError::io(path, e))?;
        if line.is_empty() {
            return Err(MvsError::parse(path, line_no, "truncated PFM header"));
        }
        header.push(line.trim().to_string());
    }
    let channels = match header[0].as_str() {
        "Pf" => 1,
        "PF" => 3,
        other => return Err(MvsError::parse(path, 1, format!("bad PFM magic `{other}`"))),
    };
    if channels != expect_channels {
        return Err(MvsError::parse(
            path,
            1,
            format!("expected a {expect_channels}-channel PFM, found {channels}"),
        ));
    }
    let dims: Vec<usize> = header[1]
        .split_whitespace()
        .map(|t| t.parse::<usize>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| MvsError::parse(path, 2, "bad PFM dimensions"))?;
    if dims.len() != 2 {
        return Err(MvsError::parse(path, 2, "bad PFM dimensions"));
    }
    let (width, height) = (dims[0], dims[1]);
    let scale: f64 = header[2]
        .parse()
        .map_err(|_| MvsError::parse(path, 3, "bad PFM scale"))?;
    if scale == 0.0 || !scale.is_finite() {
        return Err(MvsError::parse(path, 3, "bad PFM scale"));
    }
    let little = scale < 0.0;
    let n = width * height * channels;
    let mut bytes = Vec::with_capacity(n * 4);
    reader.read_to_end(&mut bytes).map_err(|e| MvsError::io(path, e))?;
    if bytes.len() != n * 4 {
        return Err(MvsError::parse(
            path,
            4,
            format!("expected {} bytes of pixel data, found {}", n * 4, bytes.len()),
        ));
    }
    let mut data = vec![0.0f32; n];
    let row = width * channels;
    for (file_row, chunk) in bytes.chunks_exact(row * 4).enumerate() {
        let y = height - 1 - file_row;
        for (i, b) in chunk.chunks_exact(4).enumerate() {
            let arr = [b[0], b[1], b[2], b[3]];
            data[y * row + i] = if little {
                f32::from_le_bytes(arr)
            } else {
                f32::from_be_bytes(arr)
            };
        }
    }
    Ok((width, height, data))
}

/// Single-channel little-endian PFM, rows stored bottom-up.
pub fn write_pfm(grid: &Grid<f32>, path: &Path) -> Result<()> {
    write_pfm_raw(path, "Pf", grid.width(), grid.height(), 1, grid.data())
}

pub fn read_pfm(path: &Path) -> Result<Grid<f32>> {
    let (w, h, data) = read_pfm_raw(path, 1)?;
    Grid::from_vec(w, h, data)
}

/// Depth map stored as single-precision PFM.
pub fn write_depth_pfm(depth: &DepthMap, path: &Path) -> Result<()> {
    write_pfm(&depth.map(|d| *d as f32), path)
}

pub fn read_depth_pfm(path: &Path) -> Result<DepthMap> {
    Ok(read_pfm(path)?.map(|v| *v as f64))
}

/// Three-channel PFM holding unit normals.
pub fn write_normal_pfm(normals: &Grid<Vec3>, path: &Path) -> Result<()> {
    let data: Vec<f32> = normals
        .data()
        .iter()
        .flat_map(|n| [n.x as f32, n.y as f32, n.z as f32])
        .collect();
    write_pfm_raw(path, "PF", normals.width(), normals.height(), 3, &data)
}

pub fn read_normal_pfm(path: &Path) -> Result<Grid<Vec3>> {
    let (w, h, data) = read_pfm_raw(path, 3)?;
    let normals = data
        .chunks_exact(3)
        .map(|c| Vec3::new(c[0] as f64, c[1] as f64, c[2] as f64))
        .collect();
    Grid::from_vec(w, h, normals)
}

fn read_lines(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| MvsError::io(path, e))
}

/// Poses from a KITTI odometry file: one row-major 3x4 world-from-camera
/// matrix per non-empty line. Slightly non-orthonormal rotations are
/// projected onto the nearest rotation; badly broken ones are rejected.
pub fn load_kitti_poses(path: &Path) -> Result<Vec<Pose>> {
    parse_kitti_poses(&read_lines(path)?, path)
}

pub fn parse_kitti_poses(text: &str, path: &Path) -> Result<Vec<Pose>> {
    let mut poses = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let values: Vec<f64> = line
            .split_whitespace()
            .map(|t| {
                t.parse::<f64>()
                    .map_err(|_| MvsError::parse(path, line_no, format!("`{t}` is not a number")))
            })
            .collect::<Result<_>>()?;
        if values.len() != 12 {
            return Err(MvsError::parse(
                path,
                line_no,
                format!("expected 12 numbers, found {}", values.len()),
            ));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(MvsError::parse(path, line_no, "non-finite pose entry"));
        }
        let r = Mat3::new(
            values[0], values[1], values[2], values[4], values[5], values[6], values[8], values[9], values[10],
        );
        let t = Vec3::new(values[3], values[7], values[11]);
        let drift = rotation_drift(&r);
        let rotation = if drift > POSE_REJECT_DRIFT {
            return Err(MvsError::parse(
                path,
                line_no,
                format!("rotation is far from orthonormal (drift {drift:.3e})"),
            ));
        } else if drift > POSE_REPAIR_DRIFT {
            log::warn!(
                "{}:{line_no}: re-orthonormalizing rotation (drift {drift:.3e})",
                path.display()
            );
            nearest_rotation(&r).map_err(|e| MvsError::parse(path, line_no, e.to_string()))?
        } else {
            r
        };
        poses.push(Pose {
            rotation,
            translation: t,
        });
    }
    Ok(poses)
}

pub fn format_kitti_poses(poses: &[Pose]) -> String {
    let mut s = String::new();
    for p in poses {
        let r = &p.rotation;
        let t = &p.translation;
        let row = [
            r[(0, 0)],
            r[(0, 1)],
            r[(0, 2)],
            t.x,
            r[(1, 0)],
            r[(1, 1)],
            r[(1, 2)],
            t.y,
            r[(2, 0)],
            r[(2, 1)],
            r[(2, 2)],
            t.z,
        ];
        let line: Vec<String> = row.iter().map(|v| format!("{v:?}")).collect();
        s.push_str(&line.join(" "));
        s.push('\n');
    }
    s
}

pub fn write_kitti_poses(poses: &[Pose], path: &Path) -> Result<()> {
    fs::write(path, format_kitti_poses(poses)).map_err(|e| MvsError::io(path, e))
}

/// Seeds from a text file with one `x y depth` triple per line; `#` starts
/// a comment line.
pub fn load_seeds(path: &Path, frame: usize, source: SeedSource) -> Result<SeedSet> {
    parse_seeds(&read_lines(path)?, path, frame, source)
}

pub fn parse_seeds(text: &str, path: &Path, frame: usize, source: SeedSource) -> Result<SeedSet> {
    let mut set = SeedSet::new(frame);
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let v: Vec<f64> = line
            .split_whitespace()
            .map(|t| {
                t.parse::<f64>()
                    .map_err(|_| MvsError::parse(path, line_no, format!("`{t}` is not a number")))
            })
            .collect::<Result<_>>()?;
        if v.len() != 3 || v.iter().any(|x| !x.is_finite()) {
            return Err(MvsError::parse(path, line_no, "expected `x y depth`"));
        }
        set.insert(Seed {
            pixel: Pixel::new(v[0], v[1]),
            depth: v[2],
            source,
        });
    }
    Ok(set)
}

pub fn format_seeds(seeds: &SeedSet) -> String {
    let mut s = String::from("# x y depth\n");
    for e in seeds.entries() {
        s.push_str(&format!("{:?} {:?} {:?}\n", e.pixel.x, e.pixel.y, e.depth));
    }
    s
}

/// Load a PNG or PNM image as RGB in `[0, 1]`; grayscale inputs are
/// replicated over the three channels.
pub fn read_image(path: &Path) -> Result<ColorImage> {
    let img = image::open(path).map_err(|e| MvsError::Image {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    let rgb = img.to_rgb32f();
    let (w, h) = (rgb.width() as usize, rgb.height() as usize);
    let data = rgb.pixels().map(|p| [p[0], p[1], p[2]]).collect();
    Grid::from_vec(w, h, data)
}

/// Write an 8-bit RGB PNG.
pub fn write_png(img: &ColorImage, path: &Path) -> Result<()> {
    let bytes: Vec<u8> = img
        .data()
        .iter()
        .flat_map(|c| c.map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8))
        .collect();
    image::save_buffer(
        path,
        &bytes,
        img.width() as u32,
        img.height() as u32,
        image::ExtendedColorType::Rgb8,
    )
    .map_err(|e| MvsError::Image {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}
