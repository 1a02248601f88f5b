//! `icewater report` — aggregate evaluation outputs into the per-scene,
//! per-strategy comparison table (run means at two decimals with a per-run
//! appendix) and averaged confusion figures. Every number comes from metric
//! files referenced by manifests and verified by hash; nothing is
//! recomputed.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::Deserialize;

use icewater::metrics::{ConfusionMatrix, MetricsReport};

use crate::commands::Ctx;
use crate::manifest::EvaluationManifest;
use crate::{Classify, CliResult};

#[derive(Debug, Deserialize)]
struct MetricsFile {
    confusion: ConfusionMatrix,
    report: MetricsReport,
}

struct RunMetrics {
    run_name: String,
    seed: u64,
    report: MetricsReport,
    confusion: ConfusionMatrix,
}

pub fn run(ctx: &Ctx, evaluations: &[PathBuf]) -> CliResult {
    let out = ctx.out_dir()?.to_path_buf();
    if evaluations.is_empty() {
        return Err(crate::usage_error("pass at least one --evaluation DIR"));
    }
    // (scene, strategy) -> runs; guarded so every run in a strategy shares
    // one experiment digest (apples-to-apples).
    let mut groups: BTreeMap<(String, String), Vec<RunMetrics>> = BTreeMap::new();
    let mut digests: BTreeMap<String, String> = BTreeMap::new();
    for eval_dir in evaluations {
        let manifest = EvaluationManifest::load(eval_dir).data()?;
        for row in &manifest.rows {
            if !row.experiment_digest.is_empty() {
                match digests.get(&row.strategy) {
                    None => {
                        digests.insert(row.strategy.clone(), row.experiment_digest.clone());
                    }
                    Some(existing) if *existing != row.experiment_digest => {
                        return Err(crate::usage_error(format!(
                            "mixed configurations for strategy {:?}: runs {} disagree on the \
                             experiment digest; re-train with one config before reporting",
                            row.strategy, row.run_name
                        )));
                    }
                    Some(_) => {}
                }
            }
            let metrics_path = row.metrics.verify(eval_dir).data()?;
            let parsed: MetricsFile =
                serde_json::from_str(&std::fs::read_to_string(&metrics_path).data()?).data()?;
            groups
                .entry((row.scene_id.clone(), row.strategy.clone()))
                .or_default()
                .push(RunMetrics {
                    run_name: row.run_name.clone(),
                    seed: row.seed,
                    report: parsed.report,
                    confusion: parsed.confusion,
                });
        }
    }
    if groups.is_empty() {
        return Err(crate::usage_error("the evaluations contain no metric rows"));
    }

    std::fs::create_dir_all(&out).data()?;
    let mut table = String::new();
    table.push_str("# Test-scene comparison\n\n");
    table.push_str("Strategy metrics are means over training runs, rounded to two decimals.\n\n");
    table.push_str("| Test scene | Strategy | Runs | Average F1 | Micro avg IOU | Macro avg IOU | Weighted IOU |\n");
    table.push_str("|---|---|---|---|---|---|---|\n");
    let mut report_json = Vec::new();
    for ((scene, strategy), runs) in &groups {
        let reports: Vec<MetricsReport> = runs.iter().map(|r| r.report).collect();
        let mean = MetricsReport::mean_of(&reports).expect("nonempty group");
        table.push_str(&format!(
            "| {scene} | {strategy} | {} | {:.2} | {:.2} | {:.2} | {:.2} |\n",
            runs.len(),
            mean.weighted_f1,
            mean.micro_iou,
            mean.macro_iou,
            mean.weighted_iou
        ));
        report_json.push(serde_json::json!({
            "scene": scene,
            "strategy": strategy,
            "runs": runs.iter().map(|r| serde_json::json!({
                "run": r.run_name,
                "seed": r.seed,
                "metrics": r.report,
            })).collect::<Vec<_>>(),
            "mean": mean,
        }));
        // Averaged row-normalized confusion figure for this group.
        let mean_rates = average_rates(runs.iter().map(|r| &r.confusion));
        write_rates_png(
            &mean_rates,
            &out.join(format!("confusion_{scene}_{strategy}.png")),
        )?;
    }

    table.push_str("\n## Per-run appendix\n\n");
    table.push_str("| Test scene | Strategy | Run | Seed | Average F1 | Micro avg IOU | Macro avg IOU | Weighted IOU |\n");
    table.push_str("|---|---|---|---|---|---|---|---|\n");
    for ((scene, strategy), runs) in &groups {
        for r in runs {
            table.push_str(&format!(
                "| {scene} | {strategy} | {} | {} | {:.2} | {:.2} | {:.2} | {:.2} |\n",
                r.run_name,
                r.seed,
                r.report.weighted_f1,
                r.report.micro_iou,
                r.report.macro_iou,
                r.report.weighted_iou
            ));
        }
    }
    std::fs::write(out.join("report.md"), &table).data()?;
    std::fs::write(
        out.join("report.json"),
        serde_json::to_string_pretty(&report_json).data()? + "\n",
    )
    .data()?;
    println!("report: {}", out.join("report.md").display());
    Ok(())
}

/// Mean row-normalized rates across runs; a row undefined in every run stays
/// undefined.
fn average_rates<'a>(
    confusions: impl Iterator<Item = &'a ConfusionMatrix>,
) -> [Option<[f64; 2]>; 2] {
    let mut sums = [[0f64; 2]; 2];
    let mut counts = [0usize; 2];
    for cm in confusions {
        let rates = cm.row_normalize();
        for (row, rate) in rates.iter().enumerate() {
            if let Some(rr) = rate {
                sums[row][0] += rr[0];
                sums[row][1] += rr[1];
                counts[row] += 1;
            }
        }
    }
    [0, 1].map(|row| {
        (counts[row] > 0).then(|| {
            [
                sums[row][0] / counts[row] as f64,
                sums[row][1] / counts[row] as f64,
            ]
        })
    })
}

fn write_rates_png(rates: &[Option<[f64; 2]>; 2], path: &Path) -> CliResult {
    // Reuse the same rendering as per-run figures by faking counts from the
    // averaged rates at a fixed support; rendering only reads the rates.
    let scale = 1_000_000f64;
    let counts = [0, 1].map(|row| match rates[row] {
        Some(rr) => [(rr[0] * scale) as u64, (rr[1] * scale) as u64],
        None => [0, 0],
    });
    let cm = ConfusionMatrix {
        counts: [counts[0], counts[1]],
    };
    icewater::figures::write_confusion_png(&cm, path).data()
}
