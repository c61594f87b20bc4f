//! Synthetic crack-like data, augmentation and PGM file I/O.
//!
//! Samples are thin quadratic Bézier curves rasterized on a smooth
//! background. Everything is keyed by a 64-bit seed so a dataset is a pure
//! function of `(seed, config)`.

mod augment;
mod dataset;
mod error;
mod image;
pub mod pgm;
mod synthetic;

pub use augment::{augment, AugmentPlan};
pub use dataset::{build_dataset, load_split, sample_seed, DatasetManifest, ManifestEntry, Split, MANIFEST_NAME};
pub use error::DataError;
pub use image::GrayImage;
pub use serpent_metrics::SegmentationMask;
pub use synthetic::{
    generate_sample, rasterize_curve, Curve, Difficulty, SampleMeta, SyntheticSample, MIN_SIZE,
};

pub type Result<T> = std::result::Result<T, DataError>;
