//! Agreement metrics between a predicted label map and ground truth:
//! pixel accuracy, confusion matrix, and per-class / mean IoU.

use crate::error::{Error, Result};
use crate::model::LabelMap;

/// Quantitative comparison of one prediction against ground truth.
///
/// The confusion matrix is stored row-major with rows indexed by the ground
/// truth class and columns by the predicted class. IoU of a class is
/// `TP / (TP + FP + FN)` and is undefined (`None`) when the class occurs in
/// neither map; undefined classes are excluded from the mean.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    num_classes: usize,
    confusion: Vec<u64>,
    pixel_accuracy: f64,
    per_class_iou: Vec<Option<f64>>,
    mean_iou: f64,
}

impl EvalReport {
    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    /// Row-major L x L counts; rows = ground truth, columns = prediction.
    pub fn confusion(&self) -> &[u64] {
        &self.confusion
    }

    pub fn confusion_entry(&self, truth: usize, pred: usize) -> u64 {
        self.confusion[truth * self.num_classes + pred]
    }

    pub fn pixel_accuracy(&self) -> f64 {
        self.pixel_accuracy
    }

    pub fn per_class_iou(&self) -> &[Option<f64>] {
        &self.per_class_iou
    }

    pub fn mean_iou(&self) -> f64 {
        self.mean_iou
    }
}

/// Compares `pred` against `truth` pixel by pixel.
pub fn evaluate(pred: &LabelMap, truth: &LabelMap) -> Result<EvalReport> {
    if pred.height() != truth.height() || pred.width() != truth.width() {
        return Err(Error::ShapeMismatch(format!(
            "prediction {}x{} vs ground truth {}x{}",
            pred.height(),
            pred.width(),
            truth.height(),
            truth.width()
        )));
    }
    if pred.num_classes() != truth.num_classes() {
        return Err(Error::ShapeMismatch(format!(
            "prediction has {} classes, ground truth {}",
            pred.num_classes(),
            truth.num_classes()
        )));
    }

    let num_classes = pred.num_classes();
    let mut confusion = vec![0u64; num_classes * num_classes];
    for (&p, &t) in pred.labels().iter().zip(truth.labels()) {
        confusion[t as usize * num_classes + p as usize] += 1;
    }

    let total = pred.pixel_count() as u64;
    let correct: u64 = (0..num_classes).map(|c| confusion[c * num_classes + c]).sum();
    let pixel_accuracy = correct as f64 / total as f64;

    let mut per_class_iou = Vec::with_capacity(num_classes);
    let mut iou_sum = 0.0;
    let mut iou_count = 0usize;
    for c in 0..num_classes {
        let tp = confusion[c * num_classes + c];
        let row_sum: u64 = (0..num_classes).map(|p| confusion[c * num_classes + p]).sum();
        let col_sum: u64 = (0..num_classes).map(|t| confusion[t * num_classes + c]).sum();
        let denom = row_sum + col_sum - tp; // TP + FP + FN
        if denom == 0 {
            per_class_iou.push(None);
        } else {
            let iou = tp as f64 / denom as f64;
            per_class_iou.push(Some(iou));
            iou_sum += iou;
            iou_count += 1;
        }
    }
    let mean_iou = if iou_count > 0 { iou_sum / iou_count as f64 } else { 0.0 };

    Ok(EvalReport {
        num_classes,
        confusion,
        pixel_accuracy,
        per_class_iou,
        mean_iou,
    })
}

/// One row of a confidence-sweep summary.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SweepRow {
    pub p: f64,
    pub pixel_accuracy: f64,
    pub mean_iou: f64,
}

/// Sweep summary ordered by ascending confidence.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepSummary {
    rows: Vec<SweepRow>,
    accuracy_non_decreasing: bool,
}

impl SweepSummary {
    pub fn rows(&self) -> &[SweepRow] {
        &self.rows
    }

    /// Whether accuracy never drops as the confidence grows. Informational:
    /// the expected pattern on well-behaved inputs, not a guarantee.
    pub fn accuracy_non_decreasing(&self) -> bool {
        self.accuracy_non_decreasing
    }
}

/// Orders per-confidence reports by ascending `p` and flags whether accuracy
/// is non-decreasing along the sweep.
pub fn sweep_report(entries: &[(f64, EvalReport)]) -> Result<SweepSummary> {
    if entries.is_empty() {
        return Err(Error::InvalidParameter("sweep needs at least one entry".into()));
    }
    let mut rows: Vec<SweepRow> = entries
        .iter()
        .map(|(p, report)| SweepRow {
            p: *p,
            pixel_accuracy: report.pixel_accuracy(),
            mean_iou: report.mean_iou(),
        })
        .collect();
    rows.sort_by(|a, b| a.p.partial_cmp(&b.p).expect("p values must be comparable"));
    for pair in rows.windows(2) {
        if pair[0].p == pair[1].p {
            return Err(Error::InvalidParameter(format!(
                "duplicate confidence value {} in sweep",
                pair[0].p
            )));
        }
    }
    let accuracy_non_decreasing = rows
        .windows(2)
        .all(|pair| pair[1].pixel_accuracy >= pair[0].pixel_accuracy);
    Ok(SweepSummary { rows, accuracy_non_decreasing })
}
