//! Dense row-major 2D grids used for images, depth maps and per-pixel state.
//!
//! Continuous pixel coordinates follow the half-pixel convention: the center
//! of pixel `(i, j)` sits at `(i + 0.5, j + 0.5)` and the image covers
//! `[0, width) x [0, height)`.

use crate::error::{MvsError, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Grid<T> {
    width: usize,
    height: usize,
    data: Vec<T>,
}

pub type GrayImage = Grid<f32>;
pub type ColorImage = Grid<[f32; 3]>;
pub type DepthMap = Grid<f64>;

impl<T: Clone> Grid<T> {
    pub fn new(width: usize, height: usize, fill: T) -> Self {
        Grid {
            width,
            height,
            data: vec![fill; width * height],
        }
    }
}

impl<T> Grid<T> {
    pub fn from_vec(width: usize, height: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != width * height {
            return Err(MvsError::InvalidInput(format!(
                "grid data has {} elements, expected {}x{}",
                data.len(),
                width,
                height
            )));
        }
        Ok(Grid {
            width,
            height,
            data,
        })
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                data.push(f(x, y));
            }
        }
        Grid {
            width,
            height,
            data,
        }
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize) -> usize {
        y * self.width + x
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> &T {
        &self.data[y * self.width + x]
    }

    #[inline]
    pub fn get_mut(&mut self, x: usize, y: usize) -> &mut T {
        &mut self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, value: T) {
        self.data[y * self.width + x] = value;
    }

    /// Value at signed coordinates, `None` outside the grid.
    #[inline]
    pub fn get_signed(&self, x: isize, y: isize) -> Option<&T> {
        if x < 0 || y < 0 || x as usize >= self.width || y as usize >= self.height {
            None
        } else {
            Some(&self.data[y as usize * self.width + x as usize])
        }
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    pub fn same_shape<U>(&self, other: &Grid<U>) -> bool {
        self.width == other.width && self.height == other.height
    }

    pub fn map<U>(&self, f: impl FnMut(&T) -> U) -> Grid<U> {
        Grid {
            width: self.width,
            height: self.height,
            data: self.data.iter().map(f).collect(),
        }
    }
}

/// Bilinear interpolation weights for a continuous coordinate, or `None`
/// when the coordinate lies outside `[0, width] x [0, height]`.
#[inline]
fn bilinear_taps(width: usize, height: usize, u: f64, v: f64) -> Option<(usize, usize, usize, usize, f64, f64)> {
    if !(u >= 0.0 && v >= 0.0 && u <= width as f64 && v <= height as f64) {
        return None;
    }
    let fx = (u - 0.5).clamp(0.0, (width - 1) as f64);
    let fy = (v - 0.5).clamp(0.0, (height - 1) as f64);
    // clamped above, so truncating through i32 is exact and cheaper than a
    // direct float-to-usize conversion
    let (ix, iy) = (fx as i32, fy as i32);
    let (x0, y0) = (ix as usize, iy as usize);
    let x1 = (x0 + 1).min(width - 1);
    let y1 = (y0 + 1).min(height - 1);
    Some((x0, y0, x1, y1, fx - ix as f64, fy - iy as f64))
}

impl Grid<f32> {
    /// Bilinear sample at continuous coordinates.
    #[inline]
    pub fn sample(&self, u: f64, v: f64) -> Option<f32> {
        let (x0, y0, x1, y1, ax, ay) = bilinear_taps(self.width, self.height, u, v)?;
        let w = self.width;
        let d = &self.data;
        let ax = ax as f32;
        let ay = ay as f32;
        let top = d[y0 * w + x0] + (d[y0 * w + x1] - d[y0 * w + x0]) * ax;
        let bottom = d[y1 * w + x0] + (d[y1 * w + x1] - d[y1 * w + x0]) * ax;
        Some(top + (bottom - top) * ay)
    }
}

impl Grid<f64> {
    #[inline]
    pub fn sample(&self, u: f64, v: f64) -> Option<f64> {
        let (x0, y0, x1, y1, ax, ay) = bilinear_taps(self.width, self.height, u, v)?;
        let w = self.width;
        let d = &self.data;
        let top = d[y0 * w + x0] + (d[y0 * w + x1] - d[y0 * w + x0]) * ax;
        let bottom = d[y1 * w + x0] + (d[y1 * w + x1] - d[y1 * w + x0]) * ax;
        Some(top + (bottom - top) * ay)
    }
}

impl Grid<[f32; 3]> {
    /// Grayscale conversion as the plain average of the three channels.
    pub fn to_gray(&self) -> GrayImage {
        self.map(|c| (c[0] + c[1] + c[2]) / 3.0)
    }

    #[inline]
    pub fn sample(&self, u: f64, v: f64) -> Option<[f32; 3]> {
        let (x0, y0, x1, y1, ax, ay) = bilinear_taps(self.width, self.height, u, v)?;
        let w = self.width;
        let d = &self.data;
        let mut out = [0.0f32; 3];
        let ax = ax as f32;
        let ay = ay as f32;
        for (c, o) in out.iter_mut().enumerate() {
            let top = d[y0 * w + x0][c] + (d[y0 * w + x1][c] - d[y0 * w + x0][c]) * ax;
            let bottom = d[y1 * w + x0][c] + (d[y1 * w + x1][c] - d[y1 * w + x0][c]) * ax;
            *o = top + (bottom - top) * ay;
        }
        Some(out)
    }
}

/// Euclidean distance between two RGB colors.
#[inline]
pub fn color_distance(a: &[f32; 3], b: &[f32; 3]) -> f64 {
    let dr = (a[0] - b[0]) as f64;
    let dg = (a[1] - b[1]) as f64;
    let db = (a[2] - b[2]) as f64;
    (dr * dr + dg * dg + db * db).sqrt()
}
