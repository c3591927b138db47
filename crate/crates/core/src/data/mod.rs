//! Dataset ingestion, splitting, augmentation and preprocessing.

pub mod augment;
pub mod dataset;
mod image;
pub mod preprocess;

pub use augment::{augment, AugmentConfig, SeedPolicy};
pub use dataset::{scan_dataset, split_dataset, stratified_holdout, DatasetIndex, Sample, SkipReport, Split};
pub use image::Image;
pub use preprocess::{preprocess, ChannelMode, PreprocessMode};
