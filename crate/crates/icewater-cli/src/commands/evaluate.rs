//! `icewater evaluate` — run checkpoints over the held-out test scenes and
//! write class maps, error masks (GeoTIFF + PNG), confusion matrices
//! (CSV + PNG), and metric files, plus the evaluation manifest the report
//! consumes.

use std::collections::BTreeSet;
use std::io::Write;
use std::path::{Path, PathBuf};

use icewater::figures;
use icewater::geotiff;
use icewater::infer::{error_map, predict_scene, InferenceConfig};
use icewater::metrics::ConfusionMatrix;
use icewater::model::load_checkpoint_cpu;

use crate::commands::{load_prepared, load_scenes, resolve_data_root, Ctx};
use crate::manifest::{EvalRow, EvaluationManifest, FileRef, RunManifest};
use crate::{Classify, CliResult};

#[allow(clippy::too_many_arguments)]
pub fn run(
    ctx: &Ctx,
    mut runs: Vec<PathBuf>,
    experiment: Option<PathBuf>,
    prepared_dir: &Path,
    data: Option<PathBuf>,
    mode: Option<String>,
    tile: Option<usize>,
    overlap: Option<usize>,
) -> CliResult {
    let out = ctx.out_dir()?.to_path_buf();
    if let Some(dir) = &experiment {
        let manifest = crate::manifest::ExperimentManifest::load(dir).data()?;
        runs.extend(manifest.run_dirs.iter().map(|r| dir.join(r)));
    }
    if runs.is_empty() {
        return Err(crate::usage_error(
            "nothing to evaluate: pass --run DIR or --experiment DIR",
        ));
    }
    let prepared = load_prepared(prepared_dir)?;
    if prepared.split.test.is_empty() {
        return Err(crate::usage_error(
            "the prepared split has no test scenes to evaluate",
        ));
    }
    let mode =
        super::predict::inference_mode(&prepared.manifest.config.inference, mode, tile, overlap)?;
    let wanted: BTreeSet<String> = prepared.split.test.iter().cloned().collect();
    let data_root = resolve_data_root(data, Some(&prepared.manifest.data_root))?;
    let (scenes, _) = load_scenes(&data_root, Some(&wanted))?;

    std::fs::create_dir_all(&out).data()?;
    let csv_path = out.join("metrics.csv");
    let mut csv = std::fs::File::create(&csv_path).data()?;
    writeln!(
        csv,
        "run,strategy,seed,scene,weighted_f1,macro_f1,micro_iou,macro_iou,weighted_iou,\
         f1_water,f1_ice,iou_water,iou_ice,precision_water,precision_ice,recall_water,recall_ice,\
         support_water,support_ice"
    )
    .data()?;

    let mut rows = Vec::new();
    for run_dir in &runs {
        let stem = super::predict::checkpoint_stem(run_dir);
        // When the run manifest is present, verify the checkpoint is the one
        // it recorded before loading anything.
        let run_manifest = RunManifest::load(run_dir).ok();
        if let Some(manifest) = &run_manifest {
            manifest.checkpoint.verify(run_dir).data()?;
            manifest.checkpoint_sidecar.verify(run_dir).data()?;
        }
        let (model, meta) = load_checkpoint_cpu(&stem).data()?;
        let run_name = run_dir
            .file_name()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "run".into());
        let digest = run_manifest
            .as_ref()
            .map(|m| m.experiment_digest.clone())
            .unwrap_or_default();
        let checkpoint_hash =
            crate::manifest::hash_file(&stem.with_extension("safetensors")).data()?;
        let mut config = InferenceConfig::new(mode, checkpoint_hash);
        config.single_pass_cap_bytes = prepared.manifest.config.inference.cap_bytes();

        for scene_id in &prepared.split.test {
            let scene = scenes.get(scene_id).ok_or_else(|| {
                crate::usage_error(format!("test scene {scene_id} missing from the catalog"))
            })?;
            let scene_dir = out.join(&run_name).join(scene_id);
            std::fs::create_dir_all(&scene_dir).data()?;

            let (map, inference_report) =
                predict_scene(&model, scene, &prepared.patch_set.stats, &config).data()?;
            let mask = error_map(&map, &scene.labels).data()?;
            let cm =
                ConfusionMatrix::from_maps(&map.classes, &scene.labels, &scene.valid).data()?;
            let report = cm.report().data()?;

            geotiff::write_u8(
                &scene_dir.join("classmap.tif"),
                &map.classes,
                &scene.geotransform,
            )
            .data()?;
            geotiff::write_u8(
                &scene_dir.join("errors.tif"),
                &mask.mask,
                &scene.geotransform,
            )
            .data()?;
            figures::write_error_png(&mask, &map.classes, &scene_dir.join("errors.png")).data()?;
            figures::write_confusion_csv(&cm, &scene_dir.join("confusion.csv")).data()?;
            figures::write_confusion_png(&cm, &scene_dir.join("confusion.png")).data()?;
            let metrics_json = serde_json::json!({
                "scene_id": scene_id,
                "strategy": meta.strategy,
                "seed": meta.seed,
                "confusion": cm,
                "report": report,
                "inference": {
                    "tiles": inference_report.tiles,
                    "overlap_pixels_compared": inference_report.overlap_pixels_compared,
                    "overlap_disagreements": inference_report.overlap_disagreements,
                },
                "provenance": {
                    "checkpoint": map.provenance.checkpoint,
                    "config_hash": map.provenance.config_hash,
                },
            });
            std::fs::write(
                scene_dir.join("metrics.json"),
                serde_json::to_string_pretty(&metrics_json).data()? + "\n",
            )
            .data()?;

            writeln!(
                csv,
                "{run_name},{},{},{scene_id},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{},{}",
                meta.strategy,
                meta.seed,
                report.weighted_f1,
                report.macro_f1,
                report.micro_iou,
                report.macro_iou,
                report.weighted_iou,
                report.f1[0],
                report.f1[1],
                report.iou[0],
                report.iou[1],
                report.precision[0],
                report.precision[1],
                report.recall[0],
                report.recall[1],
                report.supports[0] as u64,
                report.supports[1] as u64,
            )
            .data()?;

            let rel = |name: &str| PathBuf::from(&run_name).join(scene_id).join(name);
            rows.push(EvalRow {
                run_name: run_name.clone(),
                strategy: meta.strategy.clone(),
                seed: meta.seed,
                experiment_digest: digest.clone(),
                scene_id: scene_id.clone(),
                metrics: FileRef::create(&out, rel("metrics.json")).data()?,
                confusion_csv: FileRef::create(&out, rel("confusion.csv")).data()?,
                class_map: FileRef::create(&out, rel("classmap.tif")).data()?,
                errors_tif: FileRef::create(&out, rel("errors.tif")).data()?,
                errors_png: FileRef::create(&out, rel("errors.png")).data()?,
            });
            println!(
                "evaluate: {run_name} x {scene_id}: weighted F1 {:.4}, weighted IoU {:.4}",
                report.weighted_f1, report.weighted_iou
            );
        }
    }
    EvaluationManifest { mode, rows }.save(&out).data()?;
    println!("evaluate: wrote {}", out.join("evaluate.json").display());
    Ok(())
}
