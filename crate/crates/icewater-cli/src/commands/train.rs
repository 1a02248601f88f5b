//! `icewater train` — run the training protocol for one or both
//! initialization strategies, writing per-epoch CSV logs, best checkpoints,
//! and run manifests. A failed run is recorded without aborting siblings.

use std::path::{Path, PathBuf};

use icewater::model::{save_checkpoint, CheckpointMeta, IceNet, InitStrategy};
use icewater::train::{train, EpochRecord};

use crate::commands::{load_prepared, resolve_data_root, Ctx};
use crate::manifest::{DirLock, ExperimentManifest, FileRef, RunManifest};
use crate::{Classify, CliResult};

pub fn run(
    ctx: &Ctx,
    prepared_dir: &Path,
    data: Option<PathBuf>,
    init: &str,
    runs: usize,
    pretrained: Option<PathBuf>,
    max_epochs: Option<u32>,
) -> CliResult {
    let out = ctx.out_dir()?.to_path_buf();
    if runs == 0 {
        return Err(crate::usage_error("--runs must be at least 1"));
    }
    let prepared = load_prepared(prepared_dir)?;
    let mut config = match &ctx.config_path {
        Some(path) => crate::config::PipelineConfig::load(path).usage()?,
        None => prepared.manifest.config.clone(),
    };
    if let Some(cap) = max_epochs {
        config.train.max_epochs = cap;
    }
    config.train.validate().usage()?;
    config.model.validate().usage()?;

    let strategies: Vec<&str> = match init {
        "random" => vec!["random"],
        "pretrained" => vec!["pretrained"],
        "both" => vec!["random", "pretrained"],
        other => {
            return Err(crate::usage_error(format!(
                "--init must be random|pretrained|both, got {other:?}"
            )))
        }
    };
    // Pretrained weights must exist before any training starts.
    let pretrained = if strategies.contains(&"pretrained") {
        let path = pretrained.ok_or_else(|| {
            crate::usage_error("--pretrained FILE is required with --init pretrained")
        })?;
        if !path.is_file() {
            return Err(crate::usage_error(format!(
                "pretrained weight file {} does not exist",
                path.display()
            )));
        }
        Some(path)
    } else {
        None
    };

    let _lock = DirLock::acquire(&out).usage()?;
    let data_root = resolve_data_root(data, Some(&prepared.manifest.data_root))?;
    let needed: std::collections::BTreeSet<String> = prepared
        .split
        .train
        .iter()
        .chain(prepared.split.validation.iter())
        .map(|r| r.scene_id.clone())
        .collect();
    let (scenes, _) = crate::commands::load_scenes(&data_root, Some(&needed))?;

    let mut run_dirs = Vec::new();
    let mut failures = Vec::new();
    for strategy_name in &strategies {
        for k in 0..runs {
            let seed = ctx.seed + k as u64;
            let run_name = format!("{strategy_name}-run{k}");
            let run_dir = out.join("runs").join(&run_name);
            std::fs::create_dir_all(&run_dir).data()?;
            let strategy = match *strategy_name {
                "random" => InitStrategy::Random { seed },
                _ => InitStrategy::PretrainedEncoder {
                    source: pretrained.clone().expect("checked above"),
                    seed,
                },
            };
            match train_one(
                ctx, &prepared, &config, &scenes, &strategy, seed, k, &run_dir,
            ) {
                Ok(()) => run_dirs.push(PathBuf::from("runs").join(&run_name)),
                Err(e) => {
                    log::warn!("{run_name} failed: {:#}", e.source);
                    failures.push(format!("{run_name}: {:#}", e.source));
                }
            }
        }
    }
    let complete = failures.is_empty();
    ExperimentManifest {
        strategies: strategies.iter().map(|s| s.to_string()).collect(),
        n_runs: runs,
        base_seed: ctx.seed,
        run_dirs: run_dirs.clone(),
        failures: failures.clone(),
        complete,
    }
    .save(&out)
    .data()?;
    println!(
        "train: {} run(s) completed, {} failed, experiment manifest at {}",
        run_dirs.len(),
        failures.len(),
        out.join("experiment.json").display()
    );
    if !complete {
        return Err(crate::CliError {
            code: crate::EXIT_TRAINING,
            source: anyhow::anyhow!("{} of {} runs failed", failures.len(), runs),
        });
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn train_one(
    ctx: &Ctx,
    prepared: &crate::commands::Prepared,
    config: &crate::config::PipelineConfig,
    scenes: &std::collections::BTreeMap<String, icewater::scene::Scene>,
    strategy: &InitStrategy,
    seed: u64,
    run_index: usize,
    run_dir: &Path,
) -> CliResult {
    let started = ctx.timestamp();
    let mut model = IceNet::build_cpu(config.model.clone()).training()?;
    model.initialize(strategy).data()?;

    let log_path = run_dir.join("epochs.csv");
    let mut csv = std::fs::File::create(&log_path).data()?;
    use std::io::Write;
    writeln!(csv, "epoch,train_loss,val_loss,lr,seconds").data()?;
    let deterministic = ctx.deterministic;
    let on_epoch = |_: &IceNet, record: &EpochRecord| {
        let seconds = if deterministic { 0.0 } else { record.seconds };
        let _ = writeln!(
            csv,
            "{},{:.9},{:.9},{:e},{:.3}",
            record.epoch, record.train_loss, record.val_loss, record.lr, seconds
        );
        log::info!(
            "epoch {:>3}: train {:.5} val {:.5} lr {:e}",
            record.epoch,
            record.train_loss,
            record.val_loss,
            record.lr
        );
        true
    };
    let outcome = train(
        &mut model,
        scenes,
        &prepared.patch_set,
        &prepared.split.validation,
        &config.train,
        seed,
        on_epoch,
    )
    .training()?;

    let meta = CheckpointMeta {
        spec: config.model.clone(),
        strategy: strategy.kind_name().to_string(),
        seed,
        epoch: outcome.restored_epoch,
        val_loss: outcome.state.best_val_loss,
    };
    save_checkpoint(&model, &meta, &run_dir.join("model")).data()?;

    let manifest = RunManifest {
        strategy: strategy.kind_name().to_string(),
        seed,
        run_index,
        config: config.clone(),
        experiment_digest: config.experiment_digest().data()?,
        split_manifest: prepared.manifest.split_manifest.clone(),
        patch_manifest: prepared.manifest.patch_manifest.clone(),
        checkpoint: FileRef::create(run_dir, "model.safetensors").data()?,
        checkpoint_sidecar: FileRef::create(run_dir, "model.json").data()?,
        epoch_log: FileRef::create(run_dir, "epochs.csv").data()?,
        epochs_trained: outcome.state.epoch,
        best_epoch: outcome.state.best_epoch,
        best_val_loss: outcome.state.best_val_loss,
        started,
        finished: ctx.timestamp(),
        version: env!("CARGO_PKG_VERSION").to_string(),
    };
    manifest.save(run_dir).data()?;
    Ok(())
}
