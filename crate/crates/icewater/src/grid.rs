//! Row-major 2D rasters and the affine pixel->map transform shared by every
//! per-scene product.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Dense row-major raster.
#[derive(Clone, Debug, PartialEq)]
pub struct Grid<T> {
    height: usize,
    width: usize,
    data: Vec<T>,
}

impl<T: Copy> Grid<T> {
    pub fn new(height: usize, width: usize, fill: T) -> Self {
        Grid {
            height,
            width,
            data: vec![fill; height * width],
        }
    }

    pub fn from_vec(height: usize, width: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::GridMismatch {
                what: format!("buffer of {} elements", data.len()),
                expected_h: height,
                expected_w: width,
                got_h: data.len() / width.max(1),
                got_w: width,
            });
        }
        Ok(Grid {
            height,
            width,
            data,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> T {
        debug_assert!(row < self.height && col < self.width);
        self.data[row * self.width + col]
    }

    #[inline]
    pub fn set(&mut self, row: usize, col: usize, value: T) {
        debug_assert!(row < self.height && col < self.width);
        self.data[row * self.width + col] = value;
    }

    pub fn row(&self, row: usize) -> &[T] {
        &self.data[row * self.width..(row + 1) * self.width]
    }

    pub fn as_slice(&self) -> &[T] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    pub fn count(&self, mut pred: impl FnMut(T) -> bool) -> usize {
        self.data.iter().filter(|&&v| pred(v)).count()
    }

    /// Crop to `rect`, which must lie inside the grid.
    pub fn crop(&self, rect: &Rect) -> Result<Grid<T>> {
        if rect.row0 + rect.height > self.height || rect.col0 + rect.width > self.width {
            return Err(Error::RegionOutOfBounds {
                region: rect.describe(),
                h: self.height,
                w: self.width,
            });
        }
        let mut data = Vec::with_capacity(rect.height * rect.width);
        for r in rect.row0..rect.row0 + rect.height {
            let start = r * self.width + rect.col0;
            data.extend_from_slice(&self.data[start..start + rect.width]);
        }
        Ok(Grid {
            height: rect.height,
            width: rect.width,
            data,
        })
    }
}

/// Six-coefficient affine transform from pixel to map coordinates, GDAL
/// ordering: `x = c[0] + col*c[1] + row*c[2]`, `y = c[3] + col*c[4] + row*c[5]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeoTransform(pub [f64; 6]);

impl GeoTransform {
    /// North-up transform with square pixels.
    pub fn north_up(x0: f64, y0: f64, pixel_size: f64) -> Self {
        GeoTransform([x0, pixel_size, 0.0, y0, 0.0, -pixel_size])
    }

    pub fn apply(&self, col: f64, row: f64) -> (f64, f64) {
        let c = &self.0;
        (
            c[0] + col * c[1] + row * c[2],
            c[3] + col * c[4] + row * c[5],
        )
    }

    /// Map coordinates of a pixel's center.
    pub fn pixel_center(&self, row: usize, col: usize) -> (f64, f64) {
        self.apply(col as f64 + 0.5, row as f64 + 0.5)
    }

    /// Transform for a crop whose origin pixel is (row0, col0) of this grid.
    pub fn for_crop(&self, row0: usize, col0: usize) -> GeoTransform {
        let c = &self.0;
        let (x0, y0) = self.apply(col0 as f64, row0 as f64);
        GeoTransform([x0, c[1], c[2], y0, c[4], c[5]])
    }

    pub fn is_axis_aligned(&self) -> bool {
        self.0[2] == 0.0 && self.0[4] == 0.0
    }

    /// Pixel size in map units, taken from the column-step coefficient.
    pub fn pixel_size(&self) -> f64 {
        self.0[1].abs()
    }

    /// Inverse map->pixel for axis-aligned transforms; returns fractional
    /// (col, row) such that `apply` of it recovers (x, y).
    pub fn invert_axis_aligned(&self, x: f64, y: f64) -> Option<(f64, f64)> {
        if !self.is_axis_aligned() || self.0[1] == 0.0 || self.0[5] == 0.0 {
            return None;
        }
        Some(((x - self.0[0]) / self.0[1], (y - self.0[3]) / self.0[5]))
    }

    pub fn approx_eq(&self, other: &GeoTransform) -> bool {
        self.0
            .iter()
            .zip(other.0.iter())
            .all(|(a, b)| (a - b).abs() <= 1e-6 * a.abs().max(b.abs()).max(1.0))
    }
}

/// Pixel-space rectangle: origin row/col plus extent.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Rect {
    pub row0: usize,
    pub col0: usize,
    pub height: usize,
    pub width: usize,
}

impl Rect {
    pub fn full(height: usize, width: usize) -> Self {
        Rect {
            row0: 0,
            col0: 0,
            height,
            width,
        }
    }

    pub fn area(&self) -> usize {
        self.height * self.width
    }

    pub fn contains(&self, row: usize, col: usize) -> bool {
        row >= self.row0
            && row < self.row0 + self.height
            && col >= self.col0
            && col < self.col0 + self.width
    }

    pub fn intersects(&self, other: &Rect) -> bool {
        self.row0 < other.row0 + other.height
            && other.row0 < self.row0 + self.height
            && self.col0 < other.col0 + other.width
            && other.col0 < self.col0 + self.width
    }

    pub fn describe(&self) -> String {
        format!(
            "[{}..{})x[{}..{})",
            self.row0,
            self.row0 + self.height,
            self.col0,
            self.col0 + self.width
        )
    }
}

/// A split region is either a whole scene or a rectangle of it.
///
/// Serialized as the string `"full"` or a `{row0, col0, height, width}`
/// object in the split manifest.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Region {
    #[serde(with = "full_region")]
    Full,
    Rect(Rect),
}

impl Region {
    /// Concrete rectangle for a scene of the given dims.
    pub fn resolve(&self, height: usize, width: usize) -> Rect {
        match self {
            Region::Full => Rect::full(height, width),
            Region::Rect(r) => *r,
        }
    }
}

mod full_region {
    use serde::{de, Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(ser: S) -> Result<S::Ok, S::Error> {
        ser.serialize_str("full")
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(de: D) -> Result<(), D::Error> {
        let s = String::deserialize(de)?;
        if s == "full" {
            Ok(())
        } else {
            Err(de::Error::custom(format!("expected \"full\", got {s:?}")))
        }
    }
}
