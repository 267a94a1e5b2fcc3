//! Metrics and cross-validation aggregation: confusion matrices,
//! precision/recall, pixel accuracies, the hypothesis product, and
//! mean / standard-error summaries over folds.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::imaging::{class_name, LabelMap, NUM_CLASSES};

/// CxC counts; rows are ground truth, columns predictions.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct ConfusionMatrix {
    pub classes: usize,
    pub counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> ConfusionMatrix {
        ConfusionMatrix {
            classes,
            counts: vec![0; classes * classes],
        }
    }

    pub fn add(&mut self, gt: u8, pred: u8) {
        self.counts[gt as usize * self.classes + pred as usize] += 1;
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) {
        debug_assert_eq!(self.classes, other.classes);
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
    }

    pub fn count(&self, gt: usize, pred: usize) -> u64 {
        self.counts[gt * self.classes + pred]
    }

    pub fn row_sum(&self, gt: usize) -> u64 {
        (0..self.classes).map(|p| self.count(gt, p)).sum()
    }

    pub fn col_sum(&self, pred: usize) -> u64 {
        (0..self.classes).map(|g| self.count(g, pred)).sum()
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Overall fraction of agreeing pairs, as a percentage. None when empty.
    pub fn accuracy(&self) -> Option<f64> {
        let total = self.total();
        if total == 0 {
            return None;
        }
        let diag: u64 = (0..self.classes).map(|c| self.count(c, c)).sum();
        Some(100.0 * diag as f64 / total as f64)
    }

    /// Row-normalized percentages; None for rows with no ground truth.
    pub fn normalized_rows(&self) -> Vec<Vec<Option<f64>>> {
        (0..self.classes)
            .map(|g| {
                let rs = self.row_sum(g);
                (0..self.classes)
                    .map(|p| {
                        if rs == 0 {
                            None
                        } else {
                            Some(100.0 * self.count(g, p) as f64 / rs as f64)
                        }
                    })
                    .collect()
            })
            .collect()
    }
}

/// Tallies per-item (gt, pred) pairs. Lengths must match.
pub fn confusion_matrix(gt: &[u8], pred: &[u8], classes: usize) -> Result<ConfusionMatrix> {
    if gt.len() != pred.len() {
        return Err(Error::DimensionMismatch {
            expected: format!("{} predictions", gt.len()),
            got: format!("{}", pred.len()),
        });
    }
    let mut cm = ConfusionMatrix::new(classes);
    for (&g, &p) in gt.iter().zip(pred) {
        if g as usize >= classes || p as usize >= classes {
            return Err(Error::Data(format!("class out of range: gt {g}, pred {p}")));
        }
        cm.add(g, p);
    }
    Ok(cm)
}

/// Per-class (precision, recall) as fractions in [0,1]; None marks an
/// undefined cell (empty denominator) rather than propagating NaN.
pub fn precision_recall(cm: &ConfusionMatrix) -> Vec<(Option<f64>, Option<f64>)> {
    (0..cm.classes)
        .map(|c| {
            let col = cm.col_sum(c);
            let row = cm.row_sum(c);
            let diag = cm.count(c, c) as f64;
            let precision = if col == 0 { None } else { Some(diag / col as f64) };
            let recall = if row == 0 { None } else { Some(diag / row as f64) };
            (precision, recall)
        })
        .collect()
}

fn damage_class_tallies(gt: &[LabelMap], pred: &[LabelMap]) -> Result<([u64; NUM_CLASSES], [u64; NUM_CLASSES])> {
    if gt.len() != pred.len() {
        return Err(Error::DimensionMismatch {
            expected: format!("{} predicted maps", gt.len()),
            got: format!("{}", pred.len()),
        });
    }
    let mut totals = [0u64; NUM_CLASSES];
    let mut hits = [0u64; NUM_CLASSES];
    for (g, p) in gt.iter().zip(pred) {
        if !g.same_shape(p) {
            return Err(Error::DimensionMismatch {
                expected: format!("{}x{}", g.width, g.height),
                got: format!("{}x{}", p.width, p.height),
            });
        }
        for (a, b) in g.labels.iter().zip(&p.labels) {
            totals[*a as usize] += 1;
            if a == b {
                hits[*a as usize] += 1;
            }
        }
    }
    Ok((totals, hits))
}

/// Mean over the three damage classes of per-class pixel recall, as a
/// percentage. Background is excluded; damage classes absent from the
/// ground truth are excluded from the mean.
pub fn mean_pixel_accuracy(gt: &[LabelMap], pred: &[LabelMap]) -> Result<f64> {
    let (totals, hits) = damage_class_tallies(gt, pred)?;
    let mut sum = 0.0;
    let mut used = 0usize;
    for c in 1..NUM_CLASSES {
        if totals[c] > 0 {
            sum += 100.0 * hits[c] as f64 / totals[c] as f64;
            used += 1;
        }
    }
    if used == 0 {
        return Err(Error::Data(
            "no damage-class pixels in ground truth; mean pixel accuracy undefined".into(),
        ));
    }
    Ok(sum / used as f64)
}

/// Plain fraction of pixels (all classes, background included) labeled
/// correctly, as a percentage.
pub fn global_pixel_accuracy(gt: &[LabelMap], pred: &[LabelMap]) -> Result<f64> {
    let (totals, hits) = damage_class_tallies(gt, pred)?;
    let total: u64 = totals.iter().sum();
    if total == 0 {
        return Err(Error::Data("no pixels to evaluate".into()));
    }
    Ok(100.0 * hits.iter().sum::<u64>() as f64 / total as f64)
}

/// Best-case accuracy of two chained stages: x and y in percent.
pub fn hypothesis_product(x: f64, y: f64) -> f64 {
    x * y / 100.0
}

/// Mean and standard error (sample std over sqrt k) of a per-fold metric.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CvReport {
    pub folds: Vec<f64>,
    pub mean: f64,
    pub stderr: f64,
}

pub fn cv_aggregate(per_fold: &[f64]) -> Result<CvReport> {
    let k = per_fold.len();
    if k < 2 {
        return Err(Error::Data(format!(
            "cross-validation summary needs >= 2 folds, got {k}"
        )));
    }
    let mean = per_fold.iter().sum::<f64>() / k as f64;
    let var = per_fold.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (k - 1) as f64;
    Ok(CvReport {
        folds: per_fold.to_vec(),
        mean,
        stderr: var.sqrt() / (k as f64).sqrt(),
    })
}

// ---------------------------------------------------------------------------
// Rendering

fn fmt_cell(v: Option<f64>) -> String {
    match v {
        Some(x) => format!("{x:.0}"),
        None => "\u{2014}".to_string(), // em dash for undefined cells
    }
}

/// Row-normalized confusion table in the percentage style of the damage
/// reports ("Mild 84 13 3").
pub fn format_confusion_percent(cm: &ConfusionMatrix, skip_background: bool) -> String {
    let start = if skip_background && cm.classes == NUM_CLASSES { 1 } else { 0 };
    let mut out = String::from("GT vs Pred");
    for p in start..cm.classes {
        out.push_str(&format!(" {:>10}", class_name(p as u8)));
    }
    out.push('\n');
    let rows = cm.normalized_rows();
    for g in start..cm.classes {
        out.push_str(&format!("{:<10}", class_name(g as u8)));
        for p in start..cm.classes {
            out.push_str(&format!(" {:>10}", fmt_cell(rows[g][p])));
        }
        out.push('\n');
    }
    out
}

pub fn format_cv(label: &str, report: &CvReport) -> String {
    format!("{label}: {:.2} \u{00b1} {:.2}", report.mean, report.stderr)
}
