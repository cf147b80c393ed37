//! One-shot anatomical landmark detection.
//!
//! A single annotated template image trains two lightweight decoders on top of
//! frozen backbone descriptors. Query landmarks are then located by
//! bidirectional matching, first on whole-image (global) features and then on
//! fused global+local features inside a crop around each coarse estimate.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod ablation;
pub mod backbone;
pub mod decoders;
pub mod error;
pub mod evaldata;
pub mod features;
pub mod geometry;
pub mod matching;
pub mod pipeline;
pub mod raster;
pub mod simloss;
pub mod synth;

pub use error::{Error, Result};
pub use features::{FeatureMap, SimilarityMap};
pub use geometry::{CoordTransform, GridPoint, LandmarkSet, Point};
pub use raster::ImageGrid;
