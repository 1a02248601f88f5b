//! Confusion matrices and the F1/IoU metric families over binary ice/water
//! class maps. Rows are actual class, columns predicted; class 0 is water,
//! class 1 is ice. Invalid pixels never enter a count.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::Grid;

pub const NUM_CLASSES: usize = 2;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    /// counts[actual][predicted]
    pub counts: [[u64; NUM_CLASSES]; NUM_CLASSES],
}

impl ConfusionMatrix {
    pub fn zero() -> Self {
        ConfusionMatrix::default()
    }

    /// Count valid pixels of a prediction against labels. Shapes must match;
    /// pixels where `valid` is false are excluded entirely.
    pub fn from_maps(pred: &Grid<u8>, labels: &Grid<u8>, valid: &Grid<bool>) -> Result<Self> {
        if pred.dims() != labels.dims() || pred.dims() != valid.dims() {
            return Err(Error::GridMismatch {
                what: "prediction vs labels/valid".into(),
                expected_h: labels.height(),
                expected_w: labels.width(),
                got_h: pred.height(),
                got_w: pred.width(),
            });
        }
        let mut cm = ConfusionMatrix::zero();
        let (p, l, v) = (pred.as_slice(), labels.as_slice(), valid.as_slice());
        for i in 0..p.len() {
            if !v[i] {
                continue;
            }
            let (a, q) = (l[i] as usize, p[i] as usize);
            if a >= NUM_CLASSES {
                return Err(Error::UnknownLabelClass {
                    value: l[i].to_string(),
                    context: "labels under a valid mask".into(),
                });
            }
            if q >= NUM_CLASSES {
                return Err(Error::UnknownLabelClass {
                    value: p[i].to_string(),
                    context: "class map".into(),
                });
            }
            cm.counts[a][q] += 1;
        }
        Ok(cm)
    }

    /// Elementwise sum; lets tile-level matrices combine in any order.
    pub fn merge(&self, other: &ConfusionMatrix) -> ConfusionMatrix {
        let mut out = *self;
        for a in 0..NUM_CLASSES {
            for p in 0..NUM_CLASSES {
                out.counts[a][p] += other.counts[a][p];
            }
        }
        out
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    /// Row totals = per-class supports (actual pixel counts).
    pub fn supports(&self) -> [u64; NUM_CLASSES] {
        [self.counts[0].iter().sum(), self.counts[1].iter().sum()]
    }

    pub fn errors(&self) -> u64 {
        self.counts[0][1] + self.counts[1][0]
    }

    /// Each row divided by its row sum. A row with zero total has no defined
    /// rates and yields `None` rather than a silent zero.
    pub fn row_normalize(&self) -> [Option<[f64; NUM_CLASSES]>; NUM_CLASSES] {
        let mut out = [None; NUM_CLASSES];
        for (row, counts) in out.iter_mut().zip(self.counts.iter()) {
            let total: u64 = counts.iter().sum();
            if total > 0 {
                *row = Some([
                    counts[0] as f64 / total as f64,
                    counts[1] as f64 / total as f64,
                ]);
            }
        }
        out
    }

    pub fn f1_family(&self) -> Result<F1Family> {
        if self.total() == 0 {
            return Err(Error::EmptyConfusion);
        }
        let supports = self.supports();
        let mut per_class = [0.0; NUM_CLASSES];
        let mut precision = [0.0; NUM_CLASSES];
        let mut recall = [0.0; NUM_CLASSES];
        let mut degenerate = [false; NUM_CLASSES];
        for c in 0..NUM_CLASSES {
            let tp = self.counts[c][c] as f64;
            let col_total = (self.counts[0][c] + self.counts[1][c]) as f64;
            let row_total = supports[c] as f64;
            precision[c] = if col_total > 0.0 { tp / col_total } else { 0.0 };
            recall[c] = if row_total > 0.0 { tp / row_total } else { 0.0 };
            if precision[c] + recall[c] > 0.0 {
                per_class[c] = 2.0 * precision[c] * recall[c] / (precision[c] + recall[c]);
            }
            if col_total == 0.0 || row_total == 0.0 {
                degenerate[c] = true;
            }
        }
        let total = self.total() as f64;
        Ok(F1Family {
            precision,
            recall,
            per_class,
            macro_f1: (per_class[0] + per_class[1]) / 2.0,
            weighted_f1: (supports[0] as f64 * per_class[0] + supports[1] as f64 * per_class[1])
                / total,
            degenerate_classes: degenerate,
        })
    }

    pub fn iou_family(&self) -> Result<IoUFamily> {
        if self.total() == 0 {
            return Err(Error::EmptyConfusion);
        }
        let supports = self.supports();
        let mut per_class = [0.0; NUM_CLASSES];
        let mut degenerate = [false; NUM_CLASSES];
        let mut pooled_tp = 0u64;
        let mut pooled_union = 0u64;
        for c in 0..NUM_CLASSES {
            let tp = self.counts[c][c];
            let fp = self.counts[1 - c][c];
            let fn_ = self.counts[c][1 - c];
            let union = tp + fp + fn_;
            if union > 0 {
                per_class[c] = tp as f64 / union as f64;
            } else {
                degenerate[c] = true;
            }
            pooled_tp += tp;
            pooled_union += union;
        }
        let total = self.total() as f64;
        Ok(IoUFamily {
            per_class,
            micro: if pooled_union > 0 {
                pooled_tp as f64 / pooled_union as f64
            } else {
                0.0
            },
            macro_iou: (per_class[0] + per_class[1]) / 2.0,
            weighted: (supports[0] as f64 * per_class[0] + supports[1] as f64 * per_class[1])
                / total,
            degenerate_classes: degenerate,
        })
    }

    /// Full report combining both families.
    pub fn report(&self) -> Result<MetricsReport> {
        let f1 = self.f1_family()?;
        let iou = self.iou_family()?;
        let supports = self.supports();
        Ok(MetricsReport {
            precision: f1.precision,
            recall: f1.recall,
            f1: f1.per_class,
            iou: iou.per_class,
            macro_f1: f1.macro_f1,
            weighted_f1: f1.weighted_f1,
            micro_iou: iou.micro,
            macro_iou: iou.macro_iou,
            weighted_iou: iou.weighted,
            supports: [supports[0] as f64, supports[1] as f64],
            degenerate_classes: [
                f1.degenerate_classes[0] || iou.degenerate_classes[0],
                f1.degenerate_classes[1] || iou.degenerate_classes[1],
            ],
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct F1Family {
    pub precision: [f64; NUM_CLASSES],
    pub recall: [f64; NUM_CLASSES],
    pub per_class: [f64; NUM_CLASSES],
    pub macro_f1: f64,
    pub weighted_f1: f64,
    /// True for a class with zero support or zero predictions; its F1 was
    /// forced to 0 instead of propagating NaN into run averages.
    pub degenerate_classes: [bool; NUM_CLASSES],
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct IoUFamily {
    pub per_class: [f64; NUM_CLASSES],
    pub micro: f64,
    pub macro_iou: f64,
    pub weighted: f64,
    pub degenerate_classes: [bool; NUM_CLASSES],
}

/// Per-scene evaluation record; the unit that run averaging operates on.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub precision: [f64; NUM_CLASSES],
    pub recall: [f64; NUM_CLASSES],
    pub f1: [f64; NUM_CLASSES],
    pub iou: [f64; NUM_CLASSES],
    pub macro_f1: f64,
    pub weighted_f1: f64,
    pub micro_iou: f64,
    pub macro_iou: f64,
    pub weighted_iou: f64,
    pub supports: [f64; NUM_CLASSES],
    pub degenerate_classes: [bool; NUM_CLASSES],
}

impl MetricsReport {
    /// Arithmetic mean over runs, field by field.
    pub fn mean_of(reports: &[MetricsReport]) -> Option<MetricsReport> {
        if reports.is_empty() {
            return None;
        }
        let n = reports.len() as f64;
        let mean2 = |f: fn(&MetricsReport) -> [f64; 2]| {
            let mut acc = [0.0; 2];
            for r in reports {
                let v = f(r);
                acc[0] += v[0];
                acc[1] += v[1];
            }
            [acc[0] / n, acc[1] / n]
        };
        let mean1 = |f: fn(&MetricsReport) -> f64| reports.iter().map(f).sum::<f64>() / n;
        Some(MetricsReport {
            precision: mean2(|r| r.precision),
            recall: mean2(|r| r.recall),
            f1: mean2(|r| r.f1),
            iou: mean2(|r| r.iou),
            macro_f1: mean1(|r| r.macro_f1),
            weighted_f1: mean1(|r| r.weighted_f1),
            micro_iou: mean1(|r| r.micro_iou),
            macro_iou: mean1(|r| r.macro_iou),
            weighted_iou: mean1(|r| r.weighted_iou),
            supports: mean2(|r| r.supports),
            degenerate_classes: [
                reports.iter().any(|r| r.degenerate_classes[0]),
                reports.iter().any(|r| r.degenerate_classes[1]),
            ],
        })
    }
}
