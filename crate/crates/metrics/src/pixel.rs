use crate::{Result, SegmentationMask};

/// Exact pixel counts of a prediction against ground truth.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
    pub tn: u64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PixelMetrics {
    pub iou: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

pub fn confusion_counts(pred: &SegmentationMask, gt: &SegmentationMask) -> Result<ConfusionCounts> {
    pred.check_same_shape(gt)?;
    let mut counts = ConfusionCounts::default();
    for (&p, &g) in pred.as_slice().iter().zip(gt.as_slice()) {
        match (p, g) {
            (1, 1) => counts.tp += 1,
            (1, 0) => counts.fp += 1,
            (0, 1) => counts.fn_ += 1,
            _ => counts.tn += 1,
        }
    }
    Ok(counts)
}

/// IoU, precision, recall and F1 from confusion counts.
///
/// When both masks are empty (`TP + FP + FN == 0`) every metric is 1.
/// Otherwise a metric whose denominator vanishes is 0.
pub fn pixel_metrics(counts: ConfusionCounts) -> PixelMetrics {
    let ConfusionCounts { tp, fp, fn_, .. } = counts;
    if tp + fp + fn_ == 0 {
        return PixelMetrics {
            iou: 1.0,
            precision: 1.0,
            recall: 1.0,
            f1: 1.0,
        };
    }
    let ratio = |num: u64, den: u64| if den == 0 { 0.0 } else { num as f64 / den as f64 };
    let precision = ratio(tp, tp + fp);
    let recall = ratio(tp, tp + fn_);
    let f1 = if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        0.0
    };
    PixelMetrics {
        iou: ratio(tp, tp + fp + fn_),
        precision,
        recall,
        f1,
    }
}
