//! Full-scene inference: one fully-convolutional pass over the whole raster,
//! or a memory-safe tiled equivalent that keeps each tile's interior, plus
//! misclassification error masks.

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{Grid, Rect};
use crate::model::IceNet;
use crate::sampler::{extract_region, NormalizationStats, RegionSample};
use crate::scene::{Scene, LABEL_IGNORE};

pub const DEFAULT_TILE: usize = 1024;
pub const DEFAULT_OVERLAP: usize = 256;
/// Rough single-pass activation footprint is ~256 bytes per input pixel;
/// beyond this cap the call refuses and advises tiled mode.
pub const DEFAULT_SINGLE_PASS_CAP_BYTES: u64 = 8 << 30;
const SINGLE_PASS_BYTES_PER_PIXEL: u64 = 256;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "mode")]
pub enum InferenceMode {
    #[default]
    SinglePass,
    Tiled {
        tile: usize,
        overlap: usize,
    },
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct InferenceConfig {
    pub mode: InferenceMode,
    /// Identifier of the checkpoint that produced the map (hash or path).
    pub checkpoint: String,
    pub single_pass_cap_bytes: u64,
}

impl InferenceConfig {
    pub fn new(mode: InferenceMode, checkpoint: impl Into<String>) -> Self {
        InferenceConfig {
            mode,
            checkpoint: checkpoint.into(),
            single_pass_cap_bytes: DEFAULT_SINGLE_PASS_CAP_BYTES,
        }
    }

    /// Stable FNV-1a hash of the inference configuration.
    pub fn hash(&self) -> String {
        let text = format!("{:?}|{}", self.mode, self.single_pass_cap_bytes);
        let mut h = 0xcbf29ce484222325u64;
        for b in text.bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(0x100000001b3);
        }
        format!("{h:016x}")
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Provenance {
    pub checkpoint: String,
    pub config_hash: String,
}

/// Per-pixel class decisions for a whole scene.
#[derive(Clone, Debug)]
pub struct ClassMap {
    pub scene_id: String,
    pub classes: Grid<u8>,
    pub valid: Grid<bool>,
    pub provenance: Provenance,
}

/// Stitching telemetry. When tiles overlap, pixels predicted by two tiles
/// are compared before the kept value wins; with the image-pooling branch
/// enabled the tiles see different global context, and this is where that
/// discrepancy is surfaced instead of hidden.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct InferenceReport {
    pub tiles: u32,
    pub overlap_pixels_compared: u64,
    pub overlap_disagreements: u64,
}

impl InferenceReport {
    pub fn disagreement_rate(&self) -> f64 {
        if self.overlap_pixels_compared == 0 {
            0.0
        } else {
            self.overlap_disagreements as f64 / self.overlap_pixels_compared as f64
        }
    }
}

fn sample_to_tensor(sample: &RegionSample, model: &IceNet) -> Result<Tensor> {
    let (h, w) = sample.labels.dims();
    let mut flat = Vec::with_capacity(3 * h * w);
    for ch in &sample.inputs {
        flat.extend_from_slice(ch.as_slice());
    }
    Ok(Tensor::from_vec(flat, (1, 3, h, w), model.device())?)
}

/// Evaluation-mode argmax classes for one rectangular window.
fn predict_window(
    model: &IceNet,
    scene: &Scene,
    rect: &Rect,
    stats: &NormalizationStats,
) -> Result<Grid<u8>> {
    let sample = extract_region(scene, rect, stats)?;
    let input = sample_to_tensor(&sample, model)?;
    let logits = model.forward_eval(&input)?;
    // Argmax over the class dim; ties resolve to the lower index (water).
    let classes = logits.argmax(1)?.flatten_all()?.to_vec1::<u32>()?;
    Grid::from_vec(
        rect.height,
        rect.width,
        classes.into_iter().map(|c| c as u8).collect(),
    )
}

/// Produce a class map for an entire scene.
pub fn predict_scene(
    model: &IceNet,
    scene: &Scene,
    stats: &NormalizationStats,
    config: &InferenceConfig,
) -> Result<(ClassMap, InferenceReport)> {
    let (h, w) = scene.dims();
    let provenance = Provenance {
        checkpoint: config.checkpoint.clone(),
        config_hash: config.hash(),
    };
    let mut report = InferenceReport::default();
    let classes = match config.mode {
        InferenceMode::SinglePass => {
            let required = SINGLE_PASS_BYTES_PER_PIXEL * (h as u64) * (w as u64);
            if required > config.single_pass_cap_bytes {
                return Err(Error::SinglePassMemory {
                    h,
                    w,
                    required_bytes: required,
                    cap_bytes: config.single_pass_cap_bytes,
                });
            }
            report.tiles = 1;
            predict_window(model, scene, &Rect::full(h, w), stats)?
        }
        InferenceMode::Tiled { tile, overlap } => {
            predict_tiled(model, scene, stats, tile, overlap, &mut report)?
        }
    };
    Ok((
        ClassMap {
            scene_id: scene.id.clone(),
            classes,
            valid: scene.valid.clone(),
            provenance,
        },
        report,
    ))
}

/// Tile origins along one axis: multiples of `step`, with a final clamped
/// tile flush against the far edge.
fn axis_origins(extent: usize, tile: usize, step: usize) -> Vec<usize> {
    if tile >= extent {
        return vec![0];
    }
    let mut origins: Vec<usize> = Vec::new();
    let mut r = 0usize;
    while r + tile <= extent {
        origins.push(r);
        r += step;
    }
    if origins.last().copied() != Some(extent - tile) {
        origins.push(extent - tile);
    }
    origins
}

fn predict_tiled(
    model: &IceNet,
    scene: &Scene,
    stats: &NormalizationStats,
    tile: usize,
    overlap: usize,
    report: &mut InferenceReport,
) -> Result<Grid<u8>> {
    if tile <= 2 * overlap {
        return Err(Error::TileConfig { tile, overlap });
    }
    let (h, w) = scene.dims();
    let margin = overlap / 2;
    let step = tile - overlap;
    let rows = axis_origins(h, tile, step);
    let cols = axis_origins(w, tile, step);
    let mut out = Grid::new(h, w, 0u8);
    let mut written = Grid::new(h, w, false);
    for &r0 in &rows {
        for &c0 in &cols {
            let rect = Rect {
                row0: r0,
                col0: c0,
                height: tile.min(h - r0),
                width: tile.min(w - c0),
            };
            let tile_classes = predict_window(model, scene, &rect, stats)?;
            report.tiles += 1;
            // Compare against pixels some earlier tile already decided.
            for tr in 0..rect.height {
                for tc in 0..rect.width {
                    let (gr, gc) = (rect.row0 + tr, rect.col0 + tc);
                    if written.get(gr, gc) {
                        report.overlap_pixels_compared += 1;
                        if out.get(gr, gc) != tile_classes.get(tr, tc) {
                            report.overlap_disagreements += 1;
                        }
                    }
                }
            }
            // Keep the interior; margins are dropped except at scene borders.
            let keep_r0 = if rect.row0 > 0 { rect.row0 + margin } else { 0 };
            let keep_r1 = if rect.row0 + rect.height < h {
                rect.row0 + rect.height - margin
            } else {
                h
            };
            let keep_c0 = if rect.col0 > 0 { rect.col0 + margin } else { 0 };
            let keep_c1 = if rect.col0 + rect.width < w {
                rect.col0 + rect.width - margin
            } else {
                w
            };
            for gr in keep_r0..keep_r1 {
                for gc in keep_c0..keep_c1 {
                    out.set(gr, gc, tile_classes.get(gr - rect.row0, gc - rect.col0));
                    written.set(gr, gc, true);
                }
            }
        }
    }
    debug_assert!(written.as_slice().iter().all(|&v| v), "tile coverage gap");
    if report.overlap_disagreements > 0 {
        log::info!(
            "tiled inference: {} / {} overlap pixels disagreed ({:.3}%)",
            report.overlap_disagreements,
            report.overlap_pixels_compared,
            100.0 * report.disagreement_rate()
        );
    }
    Ok(out)
}

pub const ERR_CORRECT: u8 = 0;
pub const ERR_ERROR: u8 = 1;
pub const ERR_IGNORE: u8 = 2;

/// Ternary correct/error/ignore raster derived from a class map and labels.
#[derive(Clone, Debug)]
pub struct ErrorMask {
    pub mask: Grid<u8>,
    pub correct: u64,
    pub errors: u64,
    pub ignored: u64,
}

pub fn error_map(pred: &ClassMap, labels: &Grid<u8>) -> Result<ErrorMask> {
    if pred.classes.dims() != labels.dims() {
        return Err(Error::GridMismatch {
            what: "class map vs labels".into(),
            expected_h: labels.height(),
            expected_w: labels.width(),
            got_h: pred.classes.height(),
            got_w: pred.classes.width(),
        });
    }
    let (h, w) = labels.dims();
    let mut mask = Grid::new(h, w, ERR_IGNORE);
    let (mut correct, mut errors, mut ignored) = (0u64, 0u64, 0u64);
    for r in 0..h {
        for c in 0..w {
            if !pred.valid.get(r, c) || labels.get(r, c) == LABEL_IGNORE {
                ignored += 1;
                continue;
            }
            if pred.classes.get(r, c) == labels.get(r, c) {
                mask.set(r, c, ERR_CORRECT);
                correct += 1;
            } else {
                mask.set(r, c, ERR_ERROR);
                errors += 1;
            }
        }
    }
    Ok(ErrorMask {
        mask,
        correct,
        errors,
        ignored,
    })
}
