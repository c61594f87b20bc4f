use std::fmt::Write as _;

use serde::Serialize;

use crate::{confusion_counts, hausdorff, pixel_metrics, MetricsError, Result, SegmentationMask};

/// Metrics for one image; `hausdorff` is in pixels.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ImageMetrics {
    pub name: String,
    pub iou: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub hausdorff: f64,
}

/// Arithmetic mean and population standard deviation of one metric.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct Summary {
    pub mean: f64,
    pub std: f64,
}

impl Summary {
    fn of(values: impl Iterator<Item = f64> + Clone) -> Self {
        let n = values.clone().count() as f64;
        let mean = values.clone().sum::<f64>() / n;
        let var = values.map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        Summary {
            mean,
            std: var.sqrt(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsReport {
    pub images: Vec<ImageMetrics>,
    pub iou: Summary,
    pub precision: Summary,
    pub recall: Summary,
    pub f1: Summary,
    pub hausdorff: Summary,
}

pub fn evaluate_pair(name: &str, pred: &SegmentationMask, gt: &SegmentationMask) -> Result<ImageMetrics> {
    let m = pixel_metrics(confusion_counts(pred, gt)?);
    Ok(ImageMetrics {
        name: name.to_string(),
        iou: m.iou,
        precision: m.precision,
        recall: m.recall,
        f1: m.f1,
        hausdorff: hausdorff(pred, gt)?,
    })
}

pub fn aggregate(images: Vec<ImageMetrics>) -> Result<MetricsReport> {
    if images.is_empty() {
        return Err(MetricsError::EmptyAggregate);
    }
    let field = |f: fn(&ImageMetrics) -> f64| Summary::of(images.iter().map(f));
    Ok(MetricsReport {
        iou: field(|m| m.iou),
        precision: field(|m| m.precision),
        recall: field(|m| m.recall),
        f1: field(|m| m.f1),
        hausdorff: field(|m| m.hausdorff),
        images,
    })
}

#[derive(Serialize)]
struct KeyValue<'a> {
    iou_mean: f64,
    iou_std: f64,
    precision_mean: f64,
    precision_std: f64,
    recall_mean: f64,
    recall_std: f64,
    f1_mean: f64,
    f1_std: f64,
    hausdorff_mean: f64,
    hausdorff_std: f64,
    images: &'a [ImageMetrics],
}

impl MetricsReport {
    fn summaries(&self) -> [(&'static str, Summary); 5] {
        [
            ("iou", self.iou),
            ("precision", self.precision),
            ("recall", self.recall),
            ("f1", self.f1),
            ("hausdorff", self.hausdorff),
        ]
    }

    /// Tab-separated table: header, one row per image, then `mean` and `std` rows.
    pub fn to_tsv(&self) -> String {
        let mut out = String::from("image\tiou\tprecision\trecall\tf1\thausdorff\n");
        for m in &self.images {
            let _ = writeln!(
                out,
                "{}\t{:.6}\t{:.6}\t{:.6}\t{:.6}\t{:.6}",
                m.name, m.iou, m.precision, m.recall, m.f1, m.hausdorff
            );
        }
        for (label, pick) in [("mean", true), ("std", false)] {
            out.push_str(label);
            for (_, s) in self.summaries() {
                let _ = write!(out, "\t{:.6}", if pick { s.mean } else { s.std });
            }
            out.push('\n');
        }
        out
    }

    /// Structured key-value document with `<metric>_mean` / `<metric>_std`
    /// aggregates plus the per-image records.
    pub fn to_json(&self) -> String {
        let kv = KeyValue {
            iou_mean: self.iou.mean,
            iou_std: self.iou.std,
            precision_mean: self.precision.mean,
            precision_std: self.precision.std,
            recall_mean: self.recall.mean,
            recall_std: self.recall.std,
            f1_mean: self.f1.mean,
            f1_std: self.f1.std,
            hausdorff_mean: self.hausdorff.mean,
            hausdorff_std: self.hausdorff.std,
            images: &self.images,
        };
        serde_json::to_string_pretty(&kv).expect("metrics serialize to JSON")
    }
}
