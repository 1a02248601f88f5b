//! Figure rendering: error-mask PNGs (misclassification in purple over class
//! shading, ignore transparent) and row-normalized confusion-matrix heat
//! maps, plus the confusion CSV.

use std::path::Path;

use image::{Rgba, RgbaImage};

use crate::error::{Error, Result};
use crate::grid::Grid;
use crate::infer::{ErrorMask, ERR_CORRECT, ERR_ERROR};
use crate::metrics::ConfusionMatrix;
use crate::scene::LABEL_ICE;

const PURPLE: Rgba<u8> = Rgba([160, 32, 240, 255]);
const WATER_SHADE: Rgba<u8> = Rgba([38, 48, 66, 255]);
const ICE_SHADE: Rgba<u8> = Rgba([222, 228, 236, 255]);
const TRANSPARENT: Rgba<u8> = Rgba([0, 0, 0, 0]);

/// Render an error mask: correct pixels shaded by their class, errors purple,
/// ignored pixels transparent.
pub fn write_error_png(mask: &ErrorMask, classes: &Grid<u8>, path: &Path) -> Result<()> {
    let (h, w) = mask.mask.dims();
    if classes.dims() != (h, w) {
        return Err(Error::GridMismatch {
            what: "error mask vs classes".into(),
            expected_h: h,
            expected_w: w,
            got_h: classes.height(),
            got_w: classes.width(),
        });
    }
    let mut img = RgbaImage::new(w as u32, h as u32);
    for r in 0..h {
        for c in 0..w {
            let px = match mask.mask.get(r, c) {
                ERR_ERROR => PURPLE,
                ERR_CORRECT => {
                    if classes.get(r, c) == LABEL_ICE {
                        ICE_SHADE
                    } else {
                        WATER_SHADE
                    }
                }
                _ => TRANSPARENT,
            };
            img.put_pixel(c as u32, r as u32, px);
        }
    }
    img.save(path)?;
    Ok(())
}

/// Row-normalized 2x2 heat map; undefined rows render gray. Cell intensity
/// scales with the rate.
pub fn write_confusion_png(cm: &ConfusionMatrix, path: &Path) -> Result<()> {
    const CELL: u32 = 96;
    const GAP: u32 = 2;
    let side = CELL * 2 + GAP * 3;
    let mut img = RgbaImage::from_pixel(side, side, Rgba([255, 255, 255, 255]));
    let rates = cm.row_normalize();
    for (row, row_rates) in rates.iter().enumerate() {
        for col in 0..2usize {
            let color = match row_rates {
                Some(rr) => {
                    let t = rr[col].clamp(0.0, 1.0);
                    // White -> deep blue ramp.
                    let blend = |lo: f64, hi: f64| (lo + (hi - lo) * t) as u8;
                    Rgba([
                        blend(247.0, 8.0),
                        blend(251.0, 48.0),
                        blend(255.0, 107.0),
                        255,
                    ])
                }
                None => Rgba([200, 200, 200, 255]),
            };
            let x0 = GAP + col as u32 * (CELL + GAP);
            let y0 = GAP + row as u32 * (CELL + GAP);
            for dy in 0..CELL {
                for dx in 0..CELL {
                    img.put_pixel(x0 + dx, y0 + dy, color);
                }
            }
        }
    }
    img.save(path)?;
    Ok(())
}

/// Raw counts plus row-normalized rates, rows = actual, cols = predicted.
pub fn write_confusion_csv(cm: &ConfusionMatrix, path: &Path) -> Result<()> {
    let rates = cm.row_normalize();
    let fmt_rate = |row: usize, col: usize| match rates[row] {
        Some(rr) => format!("{:.6}", rr[col]),
        None => "undefined".to_string(),
    };
    let text = format!(
        "actual,predicted_water,predicted_ice,rate_predicted_water,rate_predicted_ice\n\
         water,{},{},{},{}\n\
         ice,{},{},{},{}\n",
        cm.counts[0][0],
        cm.counts[0][1],
        fmt_rate(0, 0),
        fmt_rate(0, 1),
        cm.counts[1][0],
        cm.counts[1][1],
        fmt_rate(1, 0),
        fmt_rate(1, 1),
    );
    std::fs::write(path, text).map_err(|e| Error::file_io(path, e))?;
    Ok(())
}
