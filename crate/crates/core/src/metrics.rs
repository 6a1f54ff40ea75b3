//! Evaluation metrics: pixel F-score, Zijdenbos similarity index, accuracy,
//! confusion matrices, and multi-trial aggregation.
//!
//! Zero-denominator conventions: if prediction and ground truth are both
//! empty the score is 1; if exactly one is empty it is 0.

use crate::dataset::ClassLabel;
use crate::imgproc::BinaryMask;
use crate::{Error, Result};
use serde::{Deserialize, Serialize};

/// Per-image segmentation scores, all in [0, 1].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SegScore {
    pub precision: f64,
    pub recall: f64,
    pub fscore: f64,
    pub zsi: f64,
}

fn mask_counts(pred: &BinaryMask, gt: &BinaryMask) -> Result<(u64, u64, u64)> {
    if pred.width != gt.width || pred.height != gt.height {
        return Err(Error::ShapeMismatch(format!(
            "pred {}x{} vs gt {}x{}",
            pred.width, pred.height, gt.width, gt.height
        )));
    }
    let mut tp = 0;
    let mut fp = 0;
    let mut fneg = 0;
    for (&p, &g) in pred.data.iter().zip(&gt.data) {
        match (p, g) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fneg += 1,
            (false, false) => {}
        }
    }
    Ok((tp, fp, fneg))
}

/// Pixel-based precision, recall and F-score of a predicted mask against
/// ground truth. Also carries the ZSI for convenience.
pub fn pixel_fscore(pred: &BinaryMask, gt: &BinaryMask) -> Result<SegScore> {
    let (tp, fp, fneg) = mask_counts(pred, gt)?;
    let (precision, recall, fscore) = if tp + fp == 0 && tp + fneg == 0 {
        (1.0, 1.0, 1.0)
    } else if tp + fp == 0 || tp + fneg == 0 {
        (0.0, 0.0, 0.0)
    } else {
        let p = tp as f64 / (tp + fp) as f64;
        let r = tp as f64 / (tp + fneg) as f64;
        let f = if p + r > 0.0 { 2.0 * p * r / (p + r) } else { 0.0 };
        (p, r, f)
    };
    Ok(SegScore {
        precision,
        recall,
        fscore,
        zsi: zsi(pred, gt)?,
    })
}

/// Zijdenbos similarity index: 2|A∩B| / (|A| + |B|). Both empty gives 1.
pub fn zsi(pred: &BinaryMask, gt: &BinaryMask) -> Result<f64> {
    let (tp, fp, fneg) = mask_counts(pred, gt)?;
    let denom = 2 * tp + fp + fneg;
    if denom == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * tp as f64 / denom as f64)
}

/// How per-class segmentation F-scores are averaged across images.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SegAveraging {
    /// Score each image separately, then average scores within a class.
    #[default]
    PerImage,
    /// Pool pixel counts over all of a class's images, then score once.
    PooledPixels,
}

/// Per-class and overall segmentation scores for a labeled set of mask
/// pairs. `per_class` is indexed like [`ClassLabel::ALL`]; classes with no
/// images report `None`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SegClassScores {
    pub per_class: Vec<Option<f64>>,
    pub mean_fscore: f64,
    pub mean_zsi: f64,
}

/// Score predicted masks against ground truth, grouped by class label.
pub fn seg_class_fscores(
    items: &[(ClassLabel, &BinaryMask, &BinaryMask)],
    mode: SegAveraging,
) -> Result<SegClassScores> {
    if items.is_empty() {
        return Err(Error::InvalidInput("no mask pairs to score".into()));
    }
    let k = ClassLabel::ALL.len();
    let per_class = match mode {
        SegAveraging::PerImage => {
            let mut sums = vec![(0.0, 0usize); k];
            for (label, pred, gt) in items {
                let s = pixel_fscore(pred, gt)?;
                let e = &mut sums[label.index()];
                e.0 += s.fscore;
                e.1 += 1;
            }
            sums.iter()
                .map(|&(s, n)| if n == 0 { None } else { Some(s / n as f64) })
                .collect()
        }
        SegAveraging::PooledPixels => {
            let mut pooled = vec![(0u64, 0u64, 0u64, 0usize); k];
            for (label, pred, gt) in items {
                let (tp, fp, fneg) = mask_counts(pred, gt)?;
                let e = &mut pooled[label.index()];
                e.0 += tp;
                e.1 += fp;
                e.2 += fneg;
                e.3 += 1;
            }
            pooled
                .iter()
                .map(|&(tp, fp, fneg, n)| {
                    if n == 0 {
                        return None;
                    }
                    let denom = 2 * tp + fp + fneg;
                    Some(if denom == 0 {
                        1.0
                    } else {
                        2.0 * tp as f64 / denom as f64
                    })
                })
                .collect()
        }
    };
    let mut fsum = 0.0;
    let mut zsum = 0.0;
    for (_, pred, gt) in items {
        let s = pixel_fscore(pred, gt)?;
        fsum += s.fscore;
        zsum += s.zsi;
    }
    Ok(SegClassScores {
        per_class,
        mean_fscore: fsum / items.len() as f64,
        mean_zsi: zsum / items.len() as f64,
    })
}

/// Square count matrix; rows index the true class, columns the predicted one.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub n: usize,
    pub counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(n: usize) -> Self {
        ConfusionMatrix {
            n,
            counts: vec![0; n * n],
        }
    }

    #[inline]
    pub fn get(&self, truth: usize, pred: usize) -> u64 {
        self.counts[truth * self.n + pred]
    }

    pub fn record(&mut self, truth: usize, pred: usize) {
        self.counts[truth * self.n + pred] += 1;
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..self.n).map(|i| self.get(i, i)).sum()
    }
}

/// Overall accuracy (trace / total) and per-class recall. Classes whose row
/// is empty have no defined recall and report `None`.
pub fn accuracy(cm: &ConfusionMatrix) -> Result<(f64, Vec<Option<f64>>)> {
    let total = cm.total();
    if total == 0 {
        return Err(Error::InvalidInput("empty confusion matrix".into()));
    }
    let overall = cm.trace() as f64 / total as f64;
    let per_class = (0..cm.n)
        .map(|i| {
            let row: u64 = (0..cm.n).map(|j| cm.get(i, j)).sum();
            if row == 0 {
                None
            } else {
                Some(cm.get(i, i) as f64 / row as f64)
            }
        })
        .collect();
    Ok((overall, per_class))
}

/// Results of one evaluation trial.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub confusion: ConfusionMatrix,
    pub overall_accuracy: f64,
    pub per_class_recall: Vec<Option<f64>>,
    /// Per-class mean segmentation F-scores, when the trial evaluated
    /// segmentation; indexed like [`ClassLabel::ALL`].
    pub seg_fscore_per_class: Option<Vec<Option<f64>>>,
    pub seg_fscore_mean: Option<f64>,
    pub seg_zsi_mean: Option<f64>,
}

impl EvalReport {
    pub fn from_confusion(confusion: ConfusionMatrix) -> Result<Self> {
        let (overall, per_class) = accuracy(&confusion)?;
        Ok(EvalReport {
            confusion,
            overall_accuracy: overall,
            per_class_recall: per_class,
            seg_fscore_per_class: None,
            seg_fscore_mean: None,
            seg_zsi_mean: None,
        })
    }
}

/// Mean and standard deviation of one scalar across trials.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct TrialStat {
    pub mean: f64,
    pub std: f64,
}

fn stat(values: &[f64]) -> TrialStat {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    TrialStat {
        mean,
        std: var.sqrt(),
    }
}

/// Cross-trial aggregate of [`EvalReport`]s.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrialSummary {
    pub trials: usize,
    pub accuracy: TrialStat,
    pub seg_fscore: Option<TrialStat>,
    pub seg_zsi: Option<TrialStat>,
    /// Mean per-class segmentation F over trials, in [`ClassLabel::ALL`]
    /// order, followed by their average.
    pub class_fscore_row: Option<Vec<f64>>,
}

/// Aggregate scalar metrics over repeated trials.
pub fn aggregate_trials(reports: &[EvalReport]) -> Result<TrialSummary> {
    if reports.is_empty() {
        return Err(Error::InvalidInput("no reports to aggregate".into()));
    }
    let accs: Vec<f64> = reports.iter().map(|r| r.overall_accuracy).collect();
    let seg_f: Vec<f64> = reports.iter().filter_map(|r| r.seg_fscore_mean).collect();
    let seg_z: Vec<f64> = reports.iter().filter_map(|r| r.seg_zsi_mean).collect();

    let class_fscore_row = if reports.iter().all(|r| r.seg_fscore_per_class.is_some()) {
        let k = ClassLabel::ALL.len();
        let mut row = Vec::with_capacity(k + 1);
        for c in 0..k {
            let vals: Vec<f64> = reports
                .iter()
                .filter_map(|r| r.seg_fscore_per_class.as_ref().unwrap()[c])
                .collect();
            row.push(if vals.is_empty() {
                f64::NAN
            } else {
                vals.iter().sum::<f64>() / vals.len() as f64
            });
        }
        let finite: Vec<f64> = row.iter().copied().filter(|v| v.is_finite()).collect();
        row.push(finite.iter().sum::<f64>() / finite.len().max(1) as f64);
        Some(row)
    } else {
        None
    };

    Ok(TrialSummary {
        trials: reports.len(),
        accuracy: stat(&accs),
        seg_fscore: if seg_f.is_empty() { None } else { Some(stat(&seg_f)) },
        seg_zsi: if seg_z.is_empty() { None } else { Some(stat(&seg_z)) },
        class_fscore_row,
    })
}

/// Header used by the per-class F-score table.
pub fn class_table_header() -> Vec<&'static str> {
    let mut h: Vec<&'static str> = ClassLabel::ALL.iter().map(|c| c.short_name()).collect();
    h.push("Average");
    h
}

/// Render the per-class F-score table as CSV (header plus one row).
pub fn class_table_csv(row: &[f64]) -> String {
    let mut out = class_table_header().join(",");
    out.push('\n');
    let cells: Vec<String> = row.iter().map(|v| format!("{v:.4}")).collect();
    out.push_str(&cells.join(","));
    out.push('\n');
    out
}
