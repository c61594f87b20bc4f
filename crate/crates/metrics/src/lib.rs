//! Pixel-level segmentation metrics for binary crack masks.
//!
//! Everything here operates on [`SegmentationMask`] values and is exact:
//! confusion counts are integers, the Hausdorff distance is computed by
//! brute force over positive-pixel coordinates.

mod error;
mod hausdorff;
mod mask;
mod pixel;
mod report;

pub use error::MetricsError;
pub use hausdorff::{directed_hausdorff, hausdorff};
pub use mask::SegmentationMask;
pub use pixel::{confusion_counts, pixel_metrics, ConfusionCounts, PixelMetrics};
pub use report::{aggregate, evaluate_pair, ImageMetrics, MetricsReport, Summary};

pub type Result<T> = std::result::Result<T, MetricsError>;
