//! Training-patch sampling and channel normalization.
//!
//! Patches are randomly placed square windows inside training regions,
//! sampled once per experiment from a seed and fixed across epochs. Channel
//! statistics come from valid training-region pixels only, so validation and
//! test data never leak into normalization.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{Grid, Rect};
use crate::scene::{DatasetSplit, Scene, NUM_CHANNELS};

pub const DEFAULT_PATCH_SIZE: usize = 1000;
pub const DEFAULT_PATCHES_PER_REGION: usize = 100;
/// Patches with less than this fraction of valid pixels are re-drawn.
pub const MIN_VALID_FRACTION: f64 = 0.10;
const MAX_RESAMPLE_ATTEMPTS: u32 = 1000;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchWindow {
    pub scene_id: String,
    pub row0: usize,
    pub col0: usize,
    pub size: usize,
}

impl PatchWindow {
    pub fn rect(&self) -> Rect {
        Rect {
            row0: self.row0,
            col0: self.col0,
            height: self.size,
            width: self.size,
        }
    }
}

/// An extracted training tile: normalized inputs, labels, validity.
#[derive(Clone, Debug)]
pub struct Patch {
    pub window: PatchWindow,
    /// Channel-major normalized inputs, each `size*size`.
    pub inputs: [Grid<f32>; NUM_CHANNELS],
    pub labels: Grid<u8>,
    pub valid: Grid<bool>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormalizationStats {
    pub mean: [f64; NUM_CHANNELS],
    pub std: [f64; NUM_CHANNELS],
    pub valid_pixels: u64,
}

/// The fixed, replayable patch set: windows + stats + the seed that made it.
/// The source training regions are kept so per-epoch re-sampling, when
/// enabled, can redraw windows from the same extents.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PatchSet {
    pub seed: u64,
    pub patch_size: usize,
    pub n_per_region: usize,
    pub windows: Vec<PatchWindow>,
    pub stats: NormalizationStats,
    /// Windows that replaced low-validity draws.
    pub resampled: u32,
    #[serde(default)]
    pub train_regions: Vec<crate::scene::SplitRegion>,
}

/// Draw `n` window origins uniformly over the valid origin range of an
/// `(h, w)` region. Offsets are region-relative.
pub fn sample_patch_specs(
    region_dims: (usize, usize),
    n: usize,
    size: usize,
    seed: u64,
) -> Result<Vec<(usize, usize)>> {
    let (h, w) = region_dims;
    if h < size || w < size {
        return Err(Error::RegionTooSmall {
            region: format!("{h}x{w}"),
            h,
            w,
            size,
        });
    }
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let row0 = rng.random_range(0..=h - size);
        let col0 = rng.random_range(0..=w - size);
        out.push((row0, col0));
    }
    Ok(out)
}

/// Stable per-region seed derivation so the window set does not depend on
/// region iteration order.
fn region_seed(base: u64, scene_id: &str, rect: &Rect) -> u64 {
    let mut h = 0xcbf29ce484222325u64;
    let mut mix = |bytes: &[u8]| {
        for &b in bytes {
            h ^= b as u64;
            h = h.wrapping_mul(0x100000001b3);
        }
    };
    mix(scene_id.as_bytes());
    mix(&(rect.row0 as u64).to_le_bytes());
    mix(&(rect.col0 as u64).to_le_bytes());
    mix(&(rect.height as u64).to_le_bytes());
    mix(&(rect.width as u64).to_le_bytes());
    base ^ h
}

/// Streaming per-channel mean/std over valid pixels of all training regions.
/// Population standard deviation; a constant channel is rejected.
pub fn compute_normalization(
    split: &DatasetSplit,
    scenes: &BTreeMap<String, Scene>,
) -> Result<NormalizationStats> {
    let mut count = 0u64;
    let mut sum = [0f64; NUM_CHANNELS];
    let mut sumsq = [0f64; NUM_CHANNELS];
    for sr in &split.train {
        let scene = scenes
            .get(&sr.scene_id)
            .ok_or_else(|| Error::NoValidPixels {
                context: format!("training scene {} not in store", sr.scene_id),
            })?;
        let (h, w) = scene.dims();
        let rect = sr.region.resolve(h, w);
        for r in rect.row0..rect.row0 + rect.height {
            for c in rect.col0..rect.col0 + rect.width {
                if !scene.valid.get(r, c) {
                    continue;
                }
                count += 1;
                for (ch, grid) in scene.channels.iter().enumerate() {
                    let v = grid.get(r, c) as f64;
                    sum[ch] += v;
                    sumsq[ch] += v * v;
                }
            }
        }
    }
    if count == 0 {
        return Err(Error::NoValidPixels {
            context: "no valid pixels in any training region".into(),
        });
    }
    let mut mean = [0f64; NUM_CHANNELS];
    let mut std = [0f64; NUM_CHANNELS];
    for ch in 0..NUM_CHANNELS {
        mean[ch] = sum[ch] / count as f64;
        let var = (sumsq[ch] / count as f64 - mean[ch] * mean[ch]).max(0.0);
        std[ch] = var.sqrt();
        if std[ch] <= 0.0 {
            return Err(Error::DegenerateChannel { channel: ch });
        }
    }
    Ok(NormalizationStats {
        mean,
        std,
        valid_pixels: count,
    })
}

/// Normalized crop of any rectangular region: inputs standardized per
/// channel with invalid pixels zero-filled, labels and validity as-is.
#[derive(Clone, Debug)]
pub struct RegionSample {
    pub inputs: [Grid<f32>; NUM_CHANNELS],
    pub labels: Grid<u8>,
    pub valid: Grid<bool>,
}

pub fn extract_region(
    scene: &Scene,
    rect: &Rect,
    stats: &NormalizationStats,
) -> Result<RegionSample> {
    let valid = scene.valid.crop(rect)?;
    let labels = scene.labels.crop(rect)?;
    let mut inputs: Vec<Grid<f32>> = Vec::with_capacity(NUM_CHANNELS);
    for ch in 0..NUM_CHANNELS {
        let mut grid = scene.channels[ch].crop(rect)?;
        let (mean, std) = (stats.mean[ch] as f32, stats.std[ch] as f32);
        for (v, &ok) in grid.as_mut_slice().iter_mut().zip(valid.as_slice()) {
            *v = if ok { (*v - mean) / std } else { 0.0 };
        }
        inputs.push(grid);
    }
    let mut it = inputs.into_iter();
    Ok(RegionSample {
        inputs: [it.next().unwrap(), it.next().unwrap(), it.next().unwrap()],
        labels,
        valid,
    })
}

/// Extract and normalize one patch: `(raw - mean) / std` per channel, invalid
/// pixels zero-filled after normalization, labels and validity cropped as-is.
pub fn extract_patch(
    scene: &Scene,
    window: &PatchWindow,
    stats: &NormalizationStats,
) -> Result<Patch> {
    let sample = extract_region(scene, &window.rect(), stats)?;
    Ok(Patch {
        window: window.clone(),
        inputs: sample.inputs,
        labels: sample.labels,
        valid: sample.valid,
    })
}

fn window_valid_fraction(scene: &Scene, rect: &Rect) -> f64 {
    let mut ok = 0usize;
    for r in rect.row0..rect.row0 + rect.height {
        for c in rect.col0..rect.col0 + rect.width {
            ok += scene.valid.get(r, c) as usize;
        }
    }
    ok as f64 / rect.area() as f64
}

/// Draw `n` valid-enough windows from one training region.
fn draw_region_windows(
    scene: &Scene,
    scene_id: &str,
    rect: &Rect,
    n: usize,
    size: usize,
    seed: u64,
) -> Result<(Vec<PatchWindow>, u32)> {
    if rect.height < size || rect.width < size {
        return Err(Error::RegionTooSmall {
            region: format!("{scene_id} {}", rect.describe()),
            h: rect.height,
            w: rect.width,
            size,
        });
    }
    let mut rng = ChaCha20Rng::seed_from_u64(region_seed(seed, scene_id, rect));
    let draw = |rng: &mut ChaCha20Rng| PatchWindow {
        scene_id: scene_id.to_string(),
        row0: rect.row0 + rng.random_range(0..=rect.height - size),
        col0: rect.col0 + rng.random_range(0..=rect.width - size),
        size,
    };
    let mut windows = Vec::with_capacity(n);
    let mut resampled = 0u32;
    for _ in 0..n {
        let mut window = draw(&mut rng);
        let mut attempts = 0u32;
        while window_valid_fraction(scene, &window.rect()) < MIN_VALID_FRACTION {
            attempts += 1;
            if attempts >= MAX_RESAMPLE_ATTEMPTS {
                return Err(Error::PatchResampleExhausted {
                    scene_id: scene_id.to_string(),
                    region: rect.describe(),
                    min_valid_fraction: MIN_VALID_FRACTION,
                    attempts,
                });
            }
            window = draw(&mut rng);
        }
        if attempts > 0 {
            resampled += attempts;
            log::info!(
                "resampled a low-validity patch {attempts} time(s) in {scene_id} {}",
                rect.describe()
            );
        }
        windows.push(window);
    }
    Ok((windows, resampled))
}

/// Build the fixed training patch set for a split: `n_per_region` windows per
/// training region, low-validity draws re-drawn a bounded number of times.
pub fn build_training_set(
    split: &DatasetSplit,
    scenes: &BTreeMap<String, Scene>,
    n_per_region: usize,
    size: usize,
    seed: u64,
) -> Result<PatchSet> {
    let stats = compute_normalization(split, scenes)?;
    let mut windows = Vec::new();
    let mut resampled = 0u32;
    for sr in &split.train {
        let scene = scenes
            .get(&sr.scene_id)
            .ok_or_else(|| Error::NoValidPixels {
                context: format!("training scene {} not in store", sr.scene_id),
            })?;
        let (h, w) = scene.dims();
        let rect = sr.region.resolve(h, w);
        let (mut drawn, re) =
            draw_region_windows(scene, &sr.scene_id, &rect, n_per_region, size, seed)?;
        windows.append(&mut drawn);
        resampled += re;
    }
    Ok(PatchSet {
        seed,
        patch_size: size,
        n_per_region,
        windows,
        stats,
        resampled,
        train_regions: split.train.clone(),
    })
}

/// Fresh windows for one epoch when per-epoch re-sampling is enabled; a pure
/// function of (patch set, epoch). Epoch 0 reproduces the fixed set.
pub fn windows_for_epoch(
    patch_set: &PatchSet,
    scenes: &BTreeMap<String, Scene>,
    epoch: u32,
) -> Result<Vec<PatchWindow>> {
    if epoch == 0 {
        return Ok(patch_set.windows.clone());
    }
    let epoch_seed = patch_set
        .seed
        .wrapping_add((epoch as u64).wrapping_mul(0x9e3779b97f4a7c15));
    let mut windows = Vec::new();
    for sr in &patch_set.train_regions {
        let scene = scenes
            .get(&sr.scene_id)
            .ok_or_else(|| Error::NoValidPixels {
                context: format!("training scene {} not in store", sr.scene_id),
            })?;
        let (h, w) = scene.dims();
        let rect = sr.region.resolve(h, w);
        let (mut drawn, _) = draw_region_windows(
            scene,
            &sr.scene_id,
            &rect,
            patch_set.n_per_region,
            patch_set.patch_size,
            epoch_seed,
        )?;
        windows.append(&mut drawn);
    }
    Ok(windows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::GeoTransform;
    use crate::scene::{
        build_split_manifest, CatalogEntry, ValidationHalf, LABEL_ICE, LABEL_IGNORE, LABEL_WATER,
    };

    fn scene_with(
        id: &str,
        month: u8,
        h: usize,
        w: usize,
        f: impl Fn(usize, usize) -> f32,
    ) -> Scene {
        let mut hh = Grid::new(h, w, 0.0f32);
        for r in 0..h {
            for c in 0..w {
                hh.set(r, c, f(r, c));
            }
        }
        let mut hv = hh.clone();
        for v in hv.as_mut_slice() {
            *v *= 0.5;
        }
        let mut labels = Grid::new(h, w, LABEL_WATER);
        for r in 0..h {
            for c in 0..w / 2 {
                labels.set(r, c, LABEL_ICE);
            }
        }
        let mut ia = Grid::new(h, w, 0.0f32);
        for r in 0..h {
            for c in 0..w {
                ia.set(r, c, 19.0 + c as f32 * 0.1 + r as f32 * 0.01);
            }
        }
        Scene::assemble(
            id,
            month,
            [hh, hv, ia],
            labels,
            GeoTransform::north_up(0.0, 0.0, 80.0),
        )
        .unwrap()
    }

    fn two_value_scene(id: &str, month: u8) -> Scene {
        // Channel values {1, 3} in equal counts -> mean 2, std 1.
        scene_with(id, month, 16, 16, |r, c| {
            if (r * 16 + c) % 2 == 0 {
                1.0
            } else {
                3.0
            }
        })
    }

    fn store_and_split() -> (BTreeMap<String, Scene>, DatasetSplit) {
        let mut scenes = BTreeMap::new();
        scenes.insert("m3".to_string(), two_value_scene("m3", 3));
        let catalog = vec![CatalogEntry {
            id: "m3".into(),
            month: 3,
            height: 16,
            width: 16,
        }];
        let (split, _) = build_split_manifest(&catalog, ValidationHalf::South, false).unwrap();
        (scenes, split)
    }

    #[test]
    fn zero_patches_empty_list() {
        assert!(sample_patch_specs((64, 64), 0, 16, 1).unwrap().is_empty());
    }

    #[test]
    fn same_seed_same_windows() {
        let a = sample_patch_specs((128, 96), 25, 32, 42).unwrap();
        let b = sample_patch_specs((128, 96), 25, 32, 42).unwrap();
        assert_eq!(a, b);
        let c = sample_patch_specs((128, 96), 25, 32, 43).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn origins_within_valid_range() {
        let windows = sample_patch_specs((5000, 5000), 100, 1000, 7).unwrap();
        assert_eq!(windows.len(), 100);
        for (r, c) in windows {
            assert!(r <= 4000 && c <= 4000);
        }
    }

    #[test]
    fn region_smaller_than_patch_rejected() {
        assert!(matches!(
            sample_patch_specs((10, 64), 1, 16, 0),
            Err(Error::RegionTooSmall { .. })
        ));
    }

    #[test]
    fn two_value_channel_mean_two_std_one() {
        let (scenes, split) = store_and_split();
        let stats = compute_normalization(&split, &scenes).unwrap();
        assert!((stats.mean[0] - 2.0).abs() < 1e-12);
        assert!((stats.std[0] - 1.0).abs() < 1e-12);
        assert_eq!(stats.valid_pixels, 256);
    }

    #[test]
    fn constant_channel_rejected() {
        let mut scenes = BTreeMap::new();
        scenes.insert("m3".to_string(), scene_with("m3", 3, 8, 8, |_, _| 5.0));
        let (split, _) = build_split_manifest(
            &[CatalogEntry {
                id: "m3".into(),
                month: 3,
                height: 8,
                width: 8,
            }],
            ValidationHalf::South,
            false,
        )
        .unwrap();
        assert!(matches!(
            compute_normalization(&split, &scenes),
            Err(Error::DegenerateChannel { channel: 0 })
        ));
    }

    #[test]
    fn test_scenes_do_not_affect_stats() {
        let (mut scenes, split) = store_and_split();
        let base = compute_normalization(&split, &scenes).unwrap();
        // Adding a test-month scene to the store must not move the stats.
        scenes.insert(
            "jan".to_string(),
            scene_with("jan", 1, 16, 16, |_, _| 999.0),
        );
        let with_test = compute_normalization(&split, &scenes).unwrap();
        assert_eq!(base, with_test);
    }

    #[test]
    fn normalized_training_pixels_standardized() {
        let (scenes, split) = store_and_split();
        let stats = compute_normalization(&split, &scenes).unwrap();
        let set = build_training_set(&split, &scenes, 4, 8, 11).unwrap();
        let scene = &scenes["m3"];
        let mut values = Vec::new();
        for w in &set.windows {
            let patch = extract_patch(scene, w, &stats).unwrap();
            for (v, &ok) in patch.inputs[0]
                .as_slice()
                .iter()
                .zip(patch.valid.as_slice())
            {
                if ok {
                    values.push(*v as f64);
                }
            }
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        assert!(mean.abs() < 0.05, "mean {mean}");
        assert!((var.sqrt() - 1.0).abs() < 0.05, "std {}", var.sqrt());
    }

    #[test]
    fn patch_normalization_worked_example() {
        // mean 10, std 2, raw 14 -> 2.0; raw == mean -> 0.0.
        let stats = NormalizationStats {
            mean: [10.0; 3],
            std: [2.0; 3],
            valid_pixels: 1,
        };
        let scene = scene_with(
            "s",
            3,
            8,
            8,
            |r, c| if (r, c) == (0, 0) { 14.0 } else { 10.0 },
        );
        let patch = extract_patch(
            &scene,
            &PatchWindow {
                scene_id: "s".into(),
                row0: 0,
                col0: 0,
                size: 3,
            },
            &stats,
        )
        .unwrap();
        assert_eq!(patch.inputs[0].get(0, 0), 2.0);
        assert_eq!(patch.inputs[0].get(1, 1), 0.0);
    }

    #[test]
    fn all_invalid_window_zero_filled() {
        let mut labels = Grid::new(8, 8, LABEL_IGNORE);
        labels.set(7, 7, LABEL_WATER); // keep one valid pixel in the scene
        let scene = Scene::assemble(
            "s",
            3,
            [
                Grid::new(8, 8, 5.0f32),
                Grid::new(8, 8, 5.0),
                Grid::new(8, 8, 5.0),
            ],
            labels,
            GeoTransform::north_up(0.0, 0.0, 80.0),
        )
        .unwrap();
        let stats = NormalizationStats {
            mean: [1.0; 3],
            std: [2.0; 3],
            valid_pixels: 1,
        };
        let patch = extract_patch(
            &scene,
            &PatchWindow {
                scene_id: "s".into(),
                row0: 0,
                col0: 0,
                size: 4,
            },
            &stats,
        )
        .unwrap();
        assert!(patch
            .inputs
            .iter()
            .all(|g| g.as_slice().iter().all(|&v| v == 0.0)));
        assert!(patch.valid.as_slice().iter().all(|&v| !v));
    }

    #[test]
    fn out_of_bounds_window_rejected() {
        let (scenes, _) = store_and_split();
        let stats = NormalizationStats {
            mean: [0.0; 3],
            std: [1.0; 3],
            valid_pixels: 1,
        };
        assert!(extract_patch(
            &scenes["m3"],
            &PatchWindow {
                scene_id: "m3".into(),
                row0: 10,
                col0: 10,
                size: 8
            },
            &stats
        )
        .is_err());
    }

    #[test]
    fn training_set_counts_and_determinism() {
        let mut scenes = BTreeMap::new();
        let mut catalog = Vec::new();
        // Months 2 and 6 are half-train, 3..=5 full train: 5 training regions.
        for month in 2..=6u8 {
            let id = format!("m{month}");
            scenes.insert(id.clone(), two_value_scene(&id, month));
            catalog.push(CatalogEntry {
                id,
                month,
                height: 16,
                width: 16,
            });
        }
        let (split, _) = build_split_manifest(&catalog, ValidationHalf::South, false).unwrap();
        assert_eq!(split.train.len(), 5);
        let set = build_training_set(&split, &scenes, 3, 8, 99).unwrap();
        assert_eq!(set.windows.len(), 15);
        let again = build_training_set(&split, &scenes, 3, 8, 99).unwrap();
        assert_eq!(set.windows, again.windows);
        // Every window inside its source region; none in validation halves.
        for w in &set.windows {
            let sr = split
                .train
                .iter()
                .find(|r| r.scene_id == w.scene_id)
                .unwrap();
            let scene = &scenes[&w.scene_id];
            let (h, wd) = scene.dims();
            let rect = sr.region.resolve(h, wd);
            assert!(rect.contains(w.row0, w.col0));
            assert!(rect.contains(w.row0 + w.size - 1, w.col0 + w.size - 1));
            for vr in &split.validation {
                if vr.scene_id == w.scene_id {
                    assert!(!w.rect().intersects(&vr.region.resolve(h, wd)));
                }
            }
        }
    }

    #[test]
    fn unit_patch_set() {
        let (scenes, split) = store_and_split();
        let set = build_training_set(&split, &scenes, 1, 8, 5).unwrap();
        assert_eq!(set.windows.len(), 1);
    }

    #[test]
    fn per_epoch_resampling_is_fresh_but_deterministic() {
        let (scenes, split) = store_and_split();
        let set = build_training_set(&split, &scenes, 6, 8, 5).unwrap();
        assert_eq!(windows_for_epoch(&set, &scenes, 0).unwrap(), set.windows);
        let e1 = windows_for_epoch(&set, &scenes, 1).unwrap();
        let e2 = windows_for_epoch(&set, &scenes, 2).unwrap();
        assert_eq!(e1, windows_for_epoch(&set, &scenes, 1).unwrap());
        assert_ne!(e1, set.windows);
        assert_ne!(e1, e2);
        assert_eq!(e1.len(), set.windows.len());
        // Fresh windows still respect the region bounds.
        for w in &e1 {
            let scene = &scenes[&w.scene_id];
            let (h, wd) = scene.dims();
            assert!(w.row0 + w.size <= h && w.col0 + w.size <= wd);
        }
    }

    #[test]
    fn low_validity_regions_resample_or_reject() {
        // Scene almost fully ignore-labeled: every window draw fails.
        let mut labels = Grid::new(32, 32, LABEL_IGNORE);
        labels.set(0, 0, LABEL_WATER);
        labels.set(0, 1, LABEL_ICE);
        let mut hh = Grid::new(32, 32, 0.0f32);
        for r in 0..32 {
            for c in 0..32 {
                hh.set(r, c, (r + 2 * c) as f32);
            }
        }
        let mut ia = Grid::new(32, 32, 0.0f32);
        for r in 0..32 {
            for c in 0..32 {
                ia.set(r, c, 19.0 + c as f32 * 0.1 + r as f32 * 0.01);
            }
        }
        let scene = Scene::assemble(
            "m3",
            3,
            [hh.clone(), hh, ia],
            labels,
            GeoTransform::north_up(0.0, 0.0, 80.0),
        )
        .unwrap();
        let mut scenes = BTreeMap::new();
        scenes.insert("m3".to_string(), scene);
        let (split, _) = build_split_manifest(
            &[CatalogEntry {
                id: "m3".into(),
                month: 3,
                height: 32,
                width: 32,
            }],
            ValidationHalf::South,
            false,
        )
        .unwrap();
        assert!(matches!(
            build_training_set(&split, &scenes, 1, 16, 3),
            Err(Error::PatchResampleExhausted { .. })
        ));
    }
}
