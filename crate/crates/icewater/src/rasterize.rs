//! Polygon-to-raster burning for ice charts. A pixel takes the class of the
//! polygon covering its center (even-odd rule including holes); uncovered
//! pixels stay at the ignore value. Overlapping polygons of different
//! classes resolve last-drawn-wins and are counted for the ingest report.

use serde::{Deserialize, Serialize};

use crate::grid::{GeoTransform, Grid};
use crate::scene::{LABEL_ICE, LABEL_IGNORE, LABEL_WATER};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum IceClass {
    Water,
    Ice,
}

impl IceClass {
    pub fn label(self) -> u8 {
        match self {
            IceClass::Water => LABEL_WATER,
            IceClass::Ice => LABEL_ICE,
        }
    }
}

/// One labeled polygon: an outer ring plus optional hole rings, map
/// coordinates, even-odd interior. Multi-part geometries become several
/// `LabeledPolygon`s of the same class.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LabeledPolygon {
    pub class: IceClass,
    pub rings: Vec<Vec<(f64, f64)>>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RasterizeReport {
    /// Pixels whose class was overwritten by a later polygon of a different class.
    pub overlap_conflicts: u64,
}

/// Burn polygons onto an H x W grid.
pub fn rasterize_labels(
    polygons: &[LabeledPolygon],
    geotransform: &GeoTransform,
    height: usize,
    width: usize,
) -> (Grid<u8>, RasterizeReport) {
    let mut grid = Grid::new(height, width, LABEL_IGNORE);
    let mut report = RasterizeReport::default();
    for poly in polygons {
        if geotransform.is_axis_aligned() {
            burn_axis_aligned(poly, geotransform, &mut grid, &mut report);
        } else {
            burn_general(poly, geotransform, &mut grid, &mut report);
        }
    }
    (grid, report)
}

fn assign(grid: &mut Grid<u8>, row: usize, col: usize, class: u8, report: &mut RasterizeReport) {
    let prev = grid.get(row, col);
    if prev != LABEL_IGNORE && prev != class {
        report.overlap_conflicts += 1;
    }
    grid.set(row, col, class);
}

/// Scanline fill: per pixel row, collect ring crossings of the horizontal
/// line through the pixel centers, then a center is interior iff the number
/// of crossings strictly to its right is odd — the same predicate as a
/// point-in-polygon ray cast, so both paths agree exactly.
fn burn_axis_aligned(
    poly: &LabeledPolygon,
    gt: &GeoTransform,
    grid: &mut Grid<u8>,
    report: &mut RasterizeReport,
) {
    let class = poly.class.label();
    let (h, w) = grid.dims();
    let (mut row_lo, mut row_hi, mut col_lo, mut col_hi) = (usize::MAX, 0usize, usize::MAX, 0usize);
    let mut any = false;
    for ring in &poly.rings {
        for &(x, y) in ring {
            if let Some((col, row)) = gt.invert_axis_aligned(x, y) {
                any = true;
                let r = (row - 0.5).floor().max(0.0) as usize;
                let c = (col - 0.5).floor().max(0.0) as usize;
                row_lo = row_lo.min(r);
                col_lo = col_lo.min(c);
                row_hi = row_hi.max((row + 0.5).ceil().min(h as f64) as usize);
                col_hi = col_hi.max((col + 0.5).ceil().min(w as f64) as usize);
            }
        }
    }
    if !any || row_lo >= h || col_lo >= w {
        return;
    }
    let mut crossings: Vec<f64> = Vec::new();
    for row in row_lo..row_hi.min(h) {
        let (_, py) = gt.pixel_center(row, 0);
        crossings.clear();
        for ring in &poly.rings {
            for i in 0..ring.len() {
                let (x1, y1) = ring[i];
                let (x2, y2) = ring[(i + 1) % ring.len()];
                if (y1 > py) != (y2 > py) {
                    crossings.push(x1 + (py - y1) * (x2 - x1) / (y2 - y1));
                }
            }
        }
        if crossings.is_empty() {
            continue;
        }
        crossings.sort_by(|a, b| a.partial_cmp(b).unwrap());
        for col in col_lo..col_hi.min(w) {
            let (px, _) = gt.pixel_center(row, col);
            let right = crossings.len() - crossings.partition_point(|&xc| xc <= px);
            if right % 2 == 1 {
                assign(grid, row, col, class, report);
            }
        }
    }
}

/// Fallback for rotated geotransforms: ray-cast every pixel center.
fn burn_general(
    poly: &LabeledPolygon,
    gt: &GeoTransform,
    grid: &mut Grid<u8>,
    report: &mut RasterizeReport,
) {
    let class = poly.class.label();
    let (h, w) = grid.dims();
    for row in 0..h {
        for col in 0..w {
            let (px, py) = gt.pixel_center(row, col);
            if point_in_polygon(px, py, &poly.rings) {
                assign(grid, row, col, class, report);
            }
        }
    }
}

/// Even-odd ray cast toward +x over all rings.
pub fn point_in_polygon(px: f64, py: f64, rings: &[Vec<(f64, f64)>]) -> bool {
    let mut inside = false;
    for ring in rings {
        for i in 0..ring.len() {
            let (x1, y1) = ring[i];
            let (x2, y2) = ring[(i + 1) % ring.len()];
            if (y1 > py) != (y2 > py) && px < x1 + (py - y1) * (x2 - x1) / (y2 - y1) {
                inside = !inside;
            }
        }
    }
    inside
}
