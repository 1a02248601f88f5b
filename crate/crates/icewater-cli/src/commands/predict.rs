//! `icewater predict` — class map for one scene (or every test scene) from a
//! trained checkpoint, written as a GeoTIFF inheriting the scene transform.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use icewater::geotiff;
use icewater::infer::{predict_scene, InferenceConfig};
use icewater::model::load_checkpoint_cpu;

use crate::commands::{load_prepared, load_scenes, resolve_data_root, Ctx};
use crate::manifest::hash_file;
use crate::{Classify, CliResult};

/// Resolve a checkpoint argument: either a run directory containing
/// `model.safetensors` or an explicit checkpoint stem.
pub fn checkpoint_stem(arg: &Path) -> PathBuf {
    if arg.is_dir() {
        arg.join("model")
    } else {
        arg.with_extension("")
    }
}

pub fn inference_mode(
    base: &crate::config::InferenceSection,
    mode: Option<String>,
    tile: Option<usize>,
    overlap: Option<usize>,
) -> CliResult<icewater::infer::InferenceMode> {
    let mut section = base.clone();
    if let Some(m) = mode {
        section.mode = m;
    }
    if let Some(t) = tile {
        section.tile = t;
    }
    if let Some(o) = overlap {
        section.overlap = o;
    }
    section.mode().usage()
}

#[allow(clippy::too_many_arguments)]
pub fn run(
    ctx: &Ctx,
    checkpoint: &Path,
    prepared_dir: &Path,
    data: Option<PathBuf>,
    scene: Option<String>,
    mode: Option<String>,
    tile: Option<usize>,
    overlap: Option<usize>,
) -> CliResult {
    let out = ctx.out_dir()?.to_path_buf();
    let prepared = load_prepared(prepared_dir)?;
    let stem = checkpoint_stem(checkpoint);
    let (model, meta) = load_checkpoint_cpu(&stem).data()?;
    let mode = inference_mode(&prepared.manifest.config.inference, mode, tile, overlap)?;

    let scene_ids: Vec<String> = match scene {
        Some(id) => vec![id],
        None => prepared.split.test.clone(),
    };
    if scene_ids.is_empty() {
        return Err(crate::usage_error(
            "no scene to predict: pass --scene or prepare a split with test scenes",
        ));
    }
    let wanted: BTreeSet<String> = scene_ids.iter().cloned().collect();
    let data_root = resolve_data_root(data, Some(&prepared.manifest.data_root))?;
    let (scenes, _) = load_scenes(&data_root, Some(&wanted))?;

    std::fs::create_dir_all(&out).data()?;
    let checkpoint_hash = hash_file(&stem.with_extension("safetensors")).data()?;
    let mut config = InferenceConfig::new(mode, checkpoint_hash);
    config.single_pass_cap_bytes = prepared.manifest.config.inference.cap_bytes();
    for id in &scene_ids {
        let scene = scenes.get(id).ok_or_else(|| {
            crate::usage_error(format!("scene {id} not found in the dataset catalog"))
        })?;
        let (map, report) =
            predict_scene(&model, scene, &prepared.patch_set.stats, &config).data()?;
        let tif = out.join(format!("{id}_classmap.tif"));
        geotiff::write_u8(&tif, &map.classes, &scene.geotransform).data()?;
        let info = serde_json::json!({
            "scene_id": id,
            "strategy": meta.strategy,
            "seed": meta.seed,
            "provenance": {
                "checkpoint": map.provenance.checkpoint,
                "config_hash": map.provenance.config_hash,
            },
            "tiles": report.tiles,
            "overlap_pixels_compared": report.overlap_pixels_compared,
            "overlap_disagreements": report.overlap_disagreements,
            "disagreement_rate": report.disagreement_rate(),
        });
        std::fs::write(
            out.join(format!("{id}_inference.json")),
            serde_json::to_string_pretty(&info).data()? + "\n",
        )
        .data()?;
        println!("predict: {id} -> {}", tif.display());
    }
    Ok(())
}
