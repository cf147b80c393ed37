//! Template augmentation, decoder training and coarse-to-fine detection.

mod augment;
mod bundle;
mod config;
mod detect;
mod train;

pub use augment::{augment_template, draw_augmentations, Affine};
pub use bundle::TrainedBundle;
pub use config::{AugRanges, PipelineConfig, TrainConfig};
pub use detect::{DetectOptions, DetectionResult, Detector, Matching, Stages, TemplateState};
pub use train::{train_decoders, LossHistory, TrainedDecoders};

pub use config::digest_json;
pub use crate::raster::{crop_local_region, downsample_short_side};
