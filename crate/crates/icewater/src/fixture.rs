//! Procedural synthetic dataset: wavy-boundary ice/water scenes with polygon
//! labels, written as per-band GeoTIFFs plus GeoJSON, so the whole pipeline
//! runs without the real scenes. Also provides the separable patch set used
//! by training smoke tests and a synthetic pretrained-encoder weight file.

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use candle_core::{Device, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geotiff;
use crate::grid::{GeoTransform, Grid};
use crate::model::{IceNet, ModelSpec};
use crate::nn::ParamGroup;
use crate::rasterize::{rasterize_labels, IceClass, LabeledPolygon};
use crate::sampler::{Patch, PatchWindow};
use crate::scene::{Scene, LABEL_ICE, LABEL_WATER};

pub const PIXEL_SIZE_M: f64 = 80.0;

/// Dataset root manifest listing every scene's rasters and labels.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CatalogFile {
    pub scenes: Vec<CatalogScene>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CatalogScene {
    pub id: String,
    pub month: u8,
    /// One multi-band or three single-band rasters, relative to the root.
    pub channels: Vec<PathBuf>,
    /// Label source (GeoJSON, shapefile, or single-band GeoTIFF), relative.
    pub labels: PathBuf,
}

impl CatalogFile {
    pub fn load(root: &Path) -> Result<CatalogFile> {
        let path = root.join("catalog.json");
        let text = std::fs::read_to_string(&path).map_err(|e| Error::file_io(&path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn save(&self, root: &Path) -> Result<()> {
        let path = root.join("catalog.json");
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(&path, text + "\n").map_err(|e| Error::file_io(&path, e))?;
        Ok(())
    }
}

fn scene_id(month: u8) -> String {
    format!("2018-{month:02}")
}

/// Ice-region polygon for a month: everything left of a wavy vertical
/// boundary, in map coordinates. Every row contains both classes, so any
/// half-scene clip still sees both.
fn ice_polygon(month: u8, size: usize, gt: &GeoTransform) -> LabeledPolygon {
    let phase = month as f64 * 0.7;
    let amp = size as f64 / 8.0;
    let mid = size as f64 / 2.0;
    let steps = 64.min(size);
    let mut ring = Vec::with_capacity(steps + 3);
    for k in 0..=steps {
        let row = size as f64 * k as f64 / steps as f64;
        let col = mid + amp * (row / size as f64 * std::f64::consts::TAU * 2.0 + phase).sin();
        ring.push(gt.apply(col, row));
    }
    ring.push(gt.apply(0.0, size as f64));
    ring.push(gt.apply(0.0, 0.0));
    LabeledPolygon {
        class: IceClass::Ice,
        rings: vec![ring],
    }
}

/// Complement polygon labeled water, leaving a small uncovered square in the
/// top-right corner so every scene has ignore pixels.
fn water_polygon(month: u8, size: usize, gt: &GeoTransform) -> LabeledPolygon {
    let mut ice = ice_polygon(month, size, gt);
    let ring = ice.rings.pop().unwrap();
    let boundary: Vec<(f64, f64)> = ring[..ring.len() - 2].to_vec();
    let hole_side = (size as f64 * 0.12).max(2.0);
    let mut outer: Vec<(f64, f64)> = boundary.into_iter().rev().collect();
    outer.push(gt.apply(size as f64, 0.0));
    outer.push(gt.apply(size as f64, size as f64));
    let hole = vec![
        gt.apply(size as f64 - hole_side, 1.0),
        gt.apply(size as f64 - 1.0, 1.0),
        gt.apply(size as f64 - 1.0, hole_side),
        gt.apply(size as f64 - hole_side, hole_side),
    ];
    LabeledPolygon {
        class: IceClass::Water,
        rings: vec![outer, hole],
    }
}

pub fn label_polygons(month: u8, size: usize, gt: &GeoTransform) -> Vec<LabeledPolygon> {
    vec![ice_polygon(month, size, gt), water_polygon(month, size, gt)]
}

/// Build one synthetic scene in memory.
pub fn make_scene(month: u8, size: usize, seed: u64) -> Result<Scene> {
    let gt = GeoTransform::north_up(0.0, size as f64 * PIXEL_SIZE_M, PIXEL_SIZE_M);
    let polys = label_polygons(month, size, &gt);
    let (labels, _) = rasterize_labels(&polys, &gt, size, size);
    let (channels, _) = synth_channels(month, size, seed, &labels);
    Scene::assemble(scene_id(month), month, channels, labels, gt)
}

fn synth_channels(
    month: u8,
    size: usize,
    seed: u64,
    labels: &Grid<u8>,
) -> ([Grid<f32>; 3], GeoTransform) {
    let gt = GeoTransform::north_up(0.0, size as f64 * PIXEL_SIZE_M, PIXEL_SIZE_M);
    let mut rng = ChaCha20Rng::seed_from_u64(seed ^ ((month as u64) << 32));
    let mut hh = Grid::new(size, size, 0.0f32);
    let mut hv = Grid::new(size, size, 0.0f32);
    let mut ia = Grid::new(size, size, 0.0f32);
    for r in 0..size {
        for c in 0..size {
            // Texture tracks the drawn class; ignore pixels get water-like
            // texture so they are not trivially classifiable.
            let icy = labels.get(r, c) == LABEL_ICE;
            let ripple = ((c as f32) * 0.31).sin() * 1.2 + ((r as f32) * 0.17).cos() * 0.8;
            let blob = ((r as f32) * 0.11).sin() * ((c as f32) * 0.07).cos() * 1.5;
            let n1: f32 = rng.random_range(-1.0..1.0);
            let n2: f32 = rng.random_range(-1.0..1.0);
            let (hh_v, hv_v) = if icy {
                (-12.0 + blob + n1 * 1.5, -18.0 + blob * 0.7 + n2 * 1.4)
            } else {
                (-22.0 + ripple + n1 * 1.2, -28.0 + ripple * 0.6 + n2 * 1.1)
            };
            hh.set(r, c, hh_v);
            hv.set(r, c, hv_v);
            ia.set(
                r,
                c,
                19.0 + 27.0 * c as f32 / size as f32 + rng.random_range(-0.2..0.2),
            );
        }
    }
    // A small non-finite blob exercises the validity mask.
    let r0 = size * 3 / 4;
    for dr in 0..3.min(size - r0) {
        for dc in 0..3.min(size.saturating_sub(1)) {
            hh.set(r0 + dr, dc + 1, f32::NAN);
        }
    }
    ([hh, hv, ia], gt)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FixtureSummary {
    pub root: PathBuf,
    pub months: Vec<u8>,
    pub size: usize,
    pub seed: u64,
    pub pretrained: Option<PathBuf>,
}

/// Write a complete dataset root: per-scene HH/HV/incidence GeoTIFFs, GeoJSON
/// labels, and `catalog.json`. Months `1..=n_scenes`.
pub fn write_dataset(root: &Path, n_scenes: u8, size: usize, seed: u64) -> Result<FixtureSummary> {
    let months: Vec<u8> = (1..=n_scenes.min(12)).collect();
    let mut catalog = CatalogFile { scenes: Vec::new() };
    for &month in &months {
        let id = scene_id(month);
        let dir = root.join("scenes").join(&id);
        std::fs::create_dir_all(&dir).map_err(|e| Error::file_io(&dir, e))?;
        let gt = GeoTransform::north_up(0.0, size as f64 * PIXEL_SIZE_M, PIXEL_SIZE_M);
        let polys = label_polygons(month, size, &gt);
        let (labels, _) = rasterize_labels(&polys, &gt, size, size);
        let (channels, _) = synth_channels(month, size, seed, &labels);
        let rel = |name: &str| PathBuf::from("scenes").join(&id).join(name);
        for (grid, name) in channels.iter().zip(["hh.tif", "hv.tif", "ia.tif"]) {
            geotiff::write_f32(&root.join(rel(name)), grid, &gt)?;
        }
        let geojson = polygons_to_geojson(&polys);
        let labels_rel = rel("labels.geojson");
        std::fs::write(
            root.join(&labels_rel),
            serde_json::to_string_pretty(&geojson)? + "\n",
        )
        .map_err(|e| Error::file_io(root.join(&labels_rel), e))?;
        let channels = vec![rel("hh.tif"), rel("hv.tif"), rel("ia.tif")];
        catalog.scenes.push(CatalogScene {
            id,
            month,
            channels,
            labels: labels_rel,
        });
    }
    catalog.save(root)?;
    Ok(FixtureSummary {
        root: root.to_path_buf(),
        months,
        size,
        seed,
        pretrained: None,
    })
}

fn polygons_to_geojson(polys: &[LabeledPolygon]) -> serde_json::Value {
    let features: Vec<serde_json::Value> = polys
        .iter()
        .map(|p| {
            let rings: Vec<Vec<[f64; 2]>> = p
                .rings
                .iter()
                .map(|ring| ring.iter().map(|&(x, y)| [x, y]).collect())
                .collect();
            serde_json::json!({
                "type": "Feature",
                "properties": {"class": match p.class {
                    IceClass::Water => "water",
                    IceClass::Ice => "ice",
                }},
                "geometry": {"type": "Polygon", "coordinates": rings}
            })
        })
        .collect();
    serde_json::json!({"type": "FeatureCollection", "features": features})
}

/// Strongly separable patches for overfit smoke tests: a wavy ice/water
/// boundary with well-separated channel statistics, already in normalized
/// units, fully valid.
pub fn overfit_patches(n: usize, size: usize, seed: u64) -> Vec<Patch> {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let mut hh = Grid::new(size, size, 0.0f32);
            let mut hv = Grid::new(size, size, 0.0f32);
            let mut ia = Grid::new(size, size, 0.0f32);
            let mut labels = Grid::new(size, size, LABEL_WATER);
            let phase = i as f32 * 0.9;
            for r in 0..size {
                let boundary = size as f32 / 2.0
                    + (size as f32 / 6.0) * ((r as f32 / size as f32) * 6.3 + phase).sin();
                for c in 0..size {
                    let icy = (c as f32) < boundary;
                    let n1: f32 = rng.random_range(-0.3..0.3);
                    let n2: f32 = rng.random_range(-0.3..0.3);
                    hh.set(r, c, if icy { 1.0 + n1 } else { -1.0 + n1 });
                    hv.set(r, c, if icy { 0.8 + n2 } else { -0.8 + n2 });
                    ia.set(r, c, c as f32 / size as f32 - 0.5);
                    if icy {
                        labels.set(r, c, LABEL_ICE);
                    }
                }
            }
            Patch {
                window: PatchWindow {
                    scene_id: format!("overfit-{i}"),
                    row0: 0,
                    col0: 0,
                    size,
                },
                inputs: [hh, hv, ia],
                labels,
                valid: Grid::new(size, size, true),
            }
        })
        .collect()
}

/// Random encoder weights in the pretrained-file schema (ResNet18 tensor
/// names without the `encoder.` prefix), standing in for ImageNet weights.
pub fn write_synthetic_pretrained(path: &Path, spec: &ModelSpec, seed: u64) -> Result<()> {
    let template = IceNet::build(spec.clone(), Device::Cpu)?;
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let mut tensors = HashMap::new();
    for entry in template.params().entries() {
        if entry.group != ParamGroup::Encoder {
            continue;
        }
        let key = entry
            .name
            .strip_prefix("encoder.")
            .unwrap_or(&entry.name)
            .to_string();
        let dims = entry.var.as_tensor().dims().to_vec();
        let n: usize = dims.iter().product();
        let data: Vec<f32> = (0..n).map(|_| rng.random_range(-0.25..0.25)).collect();
        tensors.insert(key, Tensor::from_vec(data, dims, &Device::Cpu)?);
    }
    candle_core::safetensors::save(&tensors, path)?;
    Ok(())
}
