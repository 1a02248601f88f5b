//! `icewater prepare` — ingest the dataset root, build the split manifest,
//! training-pixel normalization statistics, and the fixed patch manifest.

use std::path::PathBuf;

use icewater::sampler::build_training_set;
use icewater::scene::{build_split_manifest, CatalogEntry};

use crate::commands::{load_scenes, resolve_data_root, Ctx, IngestReportFile, PrepareManifest};
use crate::config::PipelineConfig;
use crate::manifest::FileRef;
use crate::{Classify, CliResult};

pub fn run(ctx: &Ctx, data: Option<PathBuf>) -> CliResult {
    let out = ctx.out_dir()?;
    let config = PipelineConfig::load_or_default(ctx.config_path.as_deref()).usage()?;
    config.train.validate().usage()?;
    config.model.validate().usage()?;
    let data_root = resolve_data_root(data, None)?;

    let (scenes, reports) = load_scenes(&data_root, None)?;
    let catalog: Vec<CatalogEntry> = scenes
        .values()
        .map(|s| CatalogEntry {
            id: s.id.clone(),
            month: s.month,
            height: s.dims().0,
            width: s.dims().1,
        })
        .collect();
    let (split, warnings) =
        build_split_manifest(&catalog, config.sampler.validation_half, false).data()?;
    for w in &warnings {
        log::warn!("{w}");
    }
    let patch_set = build_training_set(
        &split,
        &scenes,
        config.sampler.patches_per_region,
        config.sampler.patch_size,
        ctx.seed,
    )
    .data()?;

    std::fs::create_dir_all(out).data()?;
    std::fs::write(
        out.join("split_manifest.json"),
        serde_json::to_string_pretty(&split).data()? + "\n",
    )
    .data()?;
    std::fs::write(
        out.join("patch_manifest.json"),
        serde_json::to_string_pretty(&patch_set).data()? + "\n",
    )
    .data()?;
    let report_file = IngestReportFile {
        scenes: reports,
        warnings: warnings.clone(),
    };
    std::fs::write(
        out.join("ingest_report.json"),
        serde_json::to_string_pretty(&report_file).data()? + "\n",
    )
    .data()?;

    let manifest = PrepareManifest {
        data_root,
        seed: ctx.seed,
        config,
        split_manifest: FileRef::create(out, "split_manifest.json").data()?,
        patch_manifest: FileRef::create(out, "patch_manifest.json").data()?,
        ingest_report: FileRef::create(out, "ingest_report.json").data()?,
        warnings,
        version: env!("CARGO_PKG_VERSION").to_string(),
    };
    manifest.save(out).data()?;
    println!(
        "prepare: {} train regions, {} validation regions, {} test scenes, {} patches",
        split.train.len(),
        split.validation.len(),
        split.test.len(),
        patch_set.windows.len()
    );
    Ok(())
}
