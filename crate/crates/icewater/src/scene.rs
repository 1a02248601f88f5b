//! Scenes, the train/validation/test split, and scene clipping.
//!
//! A scene holds three co-registered channels (HH, HV, incidence angle), a
//! rasterized binary label mask with an out-of-band ignore value, and a
//! validity mask. The split follows the fixed month protocol: January and
//! July held out for testing, one half of February / June / August /
//! December for validation, everything else trains in full.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{GeoTransform, Grid, Rect, Region};

pub const LABEL_WATER: u8 = 0;
pub const LABEL_ICE: u8 = 1;
pub const LABEL_IGNORE: u8 = 255;

pub const NUM_CHANNELS: usize = 3;

/// Months held out as the test set.
pub const TEST_MONTHS: [u8; 2] = [1, 7];
/// Months that contribute one half to validation.
pub const VALIDATION_MONTHS: [u8; 4] = [2, 6, 8, 12];

#[derive(Clone, Debug)]
pub struct Scene {
    pub id: String,
    pub month: u8,
    /// Channel order: HH backscatter, HV backscatter, incidence angle (deg).
    pub channels: [Grid<f32>; NUM_CHANNELS],
    pub labels: Grid<u8>,
    pub valid: Grid<bool>,
    pub pixel_size_m: f64,
    pub geotransform: GeoTransform,
}

impl Scene {
    /// Build a scene from co-registered rasters, deriving the validity mask:
    /// a pixel is valid iff all channels are finite and its label is not the
    /// ignore value.
    pub fn assemble(
        id: impl Into<String>,
        month: u8,
        channels: [Grid<f32>; NUM_CHANNELS],
        labels: Grid<u8>,
        geotransform: GeoTransform,
    ) -> Result<Scene> {
        let (h, w) = channels[0].dims();
        for (i, ch) in channels.iter().enumerate().skip(1) {
            if ch.dims() != (h, w) {
                return Err(Error::GridMismatch {
                    what: format!("channel {i}"),
                    expected_h: h,
                    expected_w: w,
                    got_h: ch.height(),
                    got_w: ch.width(),
                });
            }
        }
        if labels.dims() != (h, w) {
            return Err(Error::GridMismatch {
                what: "labels".into(),
                expected_h: h,
                expected_w: w,
                got_h: labels.height(),
                got_w: labels.width(),
            });
        }
        for &v in labels.as_slice() {
            if v != LABEL_WATER && v != LABEL_ICE && v != LABEL_IGNORE {
                return Err(Error::UnknownLabelClass {
                    value: v.to_string(),
                    context: "label raster".into(),
                });
            }
        }
        let mut valid = vec![true; h * w];
        for ch in &channels {
            for (v, &x) in valid.iter_mut().zip(ch.as_slice()) {
                *v &= x.is_finite();
            }
        }
        for (v, &l) in valid.iter_mut().zip(labels.as_slice()) {
            *v &= l != LABEL_IGNORE;
        }
        let pixel_size_m = geotransform.pixel_size();
        if pixel_size_m <= 0.0 || pixel_size_m.is_nan() {
            return Err(Error::GeoMismatch {
                what: "geotransform".into(),
                detail: format!("non-positive pixel size {pixel_size_m}"),
            });
        }
        Ok(Scene {
            id: id.into(),
            month,
            channels,
            labels,
            valid: Grid::from_vec(h, w, valid)?,
            pixel_size_m,
            geotransform,
        })
    }

    pub fn dims(&self) -> (usize, usize) {
        self.labels.dims()
    }

    pub fn valid_fraction(&self) -> f64 {
        let n = self.valid.len();
        if n == 0 {
            return 0.0;
        }
        self.valid.count(|v| v) as f64 / n as f64
    }

    /// Crop every raster to `rect` and shift the geotransform accordingly.
    pub fn clip(&self, rect: &Rect) -> Result<Scene> {
        let channels = [
            self.channels[0].crop(rect)?,
            self.channels[1].crop(rect)?,
            self.channels[2].crop(rect)?,
        ];
        Ok(Scene {
            id: self.id.clone(),
            month: self.month,
            channels,
            labels: self.labels.crop(rect)?,
            valid: self.valid.crop(rect)?,
            pixel_size_m: self.pixel_size_m,
            geotransform: self.geotransform.for_crop(rect.row0, rect.col0),
        })
    }

    /// Clip to a split region (identity for `Region::Full`).
    pub fn clip_region(&self, region: &Region) -> Result<Scene> {
        match region {
            Region::Full => Ok(self.clone()),
            Region::Rect(rect) => self.clip(rect),
        }
    }
}

/// Catalog row: what `build_split_manifest` needs to know about a scene
/// without holding its rasters.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CatalogEntry {
    pub id: String,
    pub month: u8,
    pub height: usize,
    pub width: usize,
}

/// Which half of the four clipped months goes to validation.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ValidationHalf {
    /// Bottom (higher row indices; south in a north-up raster).
    #[default]
    South,
    North,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitRegion {
    pub scene_id: String,
    pub region: Region,
}

/// The materialized split manifest.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetSplit {
    pub train: Vec<SplitRegion>,
    pub validation: Vec<SplitRegion>,
    pub test: Vec<String>,
    /// Recorded so the half-scene assignment is auditable and overridable.
    pub validation_half: ValidationHalf,
}

impl DatasetSplit {
    pub fn train_scene_ids(&self) -> BTreeSet<&str> {
        self.train.iter().map(|r| r.scene_id.as_str()).collect()
    }

    pub fn validation_scene_ids(&self) -> BTreeSet<&str> {
        self.validation
            .iter()
            .map(|r| r.scene_id.as_str())
            .collect()
    }

    /// True iff the scene id appears nowhere in train or validation.
    pub fn is_test_only(&self, id: &str) -> bool {
        self.test.iter().any(|t| t == id)
            && !self.train.iter().any(|r| r.scene_id == id)
            && !self.validation.iter().any(|r| r.scene_id == id)
    }
}

/// Split a scene extent into the train/validation halves.
fn halves(height: usize, width: usize, validation_half: ValidationHalf) -> (Rect, Rect) {
    let top = Rect {
        row0: 0,
        col0: 0,
        height: height / 2,
        width,
    };
    let bottom = Rect {
        row0: height / 2,
        col0: 0,
        height: height - height / 2,
        width,
    };
    match validation_half {
        ValidationHalf::South => (top, bottom),
        ValidationHalf::North => (bottom, top),
    }
}

/// Build the deterministic split manifest from a scene catalog.
///
/// With `require_test`, January and July must both be present; otherwise
/// their absence only produces a warning. Warnings are returned rather than
/// printed so callers can route them into the ingest report.
pub fn build_split_manifest(
    catalog: &[CatalogEntry],
    validation_half: ValidationHalf,
    require_test: bool,
) -> Result<(DatasetSplit, Vec<String>)> {
    let mut seen = BTreeSet::new();
    for entry in catalog {
        if !(1..=12).contains(&entry.month) {
            return Err(Error::UnknownLabelClass {
                value: entry.month.to_string(),
                context: format!("month of scene {}", entry.id),
            });
        }
        if !seen.insert(entry.month) {
            return Err(Error::DuplicateMonth { month: entry.month });
        }
    }
    let missing_test: Vec<u8> = TEST_MONTHS
        .iter()
        .copied()
        .filter(|m| !seen.contains(m))
        .collect();
    if require_test && !missing_test.is_empty() {
        return Err(Error::MissingTestScenes {
            missing: missing_test,
        });
    }

    let mut ordered: Vec<&CatalogEntry> = catalog.iter().collect();
    ordered.sort_by_key(|e| (e.month, e.id.clone()));

    let mut split = DatasetSplit {
        train: Vec::new(),
        validation: Vec::new(),
        test: Vec::new(),
        validation_half,
    };
    let mut warnings = Vec::new();
    if !missing_test.is_empty() {
        warnings.push(format!(
            "catalog has no scenes for test months {missing_test:?}; test set reduced"
        ));
    }
    for entry in ordered {
        if TEST_MONTHS.contains(&entry.month) {
            split.test.push(entry.id.clone());
        } else if VALIDATION_MONTHS.contains(&entry.month) {
            let (train_half, val_half) = halves(entry.height, entry.width, validation_half);
            split.train.push(SplitRegion {
                scene_id: entry.id.clone(),
                region: Region::Rect(train_half),
            });
            split.validation.push(SplitRegion {
                scene_id: entry.id.clone(),
                region: Region::Rect(val_half),
            });
        } else {
            split.train.push(SplitRegion {
                scene_id: entry.id.clone(),
                region: Region::Full,
            });
        }
    }
    if split.validation.is_empty() {
        warnings.push("no validation months in catalog; validation set is empty".into());
    }
    Ok((split, warnings))
}
