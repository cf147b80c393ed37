//! Dense descriptor grids and scalar similarity grids.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{CoordTransform, GridPoint};

/// `height x width` grid of `dim`-dimensional descriptors, stored row-major
/// with channels innermost (HWC). `transform` maps grid cells into the
/// coordinate frame of the source image.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureMap {
    height: usize,
    width: usize,
    dim: usize,
    data: Vec<f64>,
    pub transform: CoordTransform,
}

impl FeatureMap {
    pub fn new(height: usize, width: usize, dim: usize, data: Vec<f64>, transform: CoordTransform) -> Result<Self> {
        if height == 0 || width == 0 || dim == 0 {
            return Err(Error::InvalidArgument(format!(
                "feature map dims must be >= 1, got {height}x{width}x{dim}"
            )));
        }
        if data.len() != height * width * dim {
            return Err(Error::InvalidArgument(format!(
                "feature map {height}x{width}x{dim} needs {} values, got {}",
                height * width * dim,
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("feature map contains non-finite values".into()));
        }
        Ok(Self {
            height,
            width,
            dim,
            data,
            transform,
        })
    }

    pub fn zeros(height: usize, width: usize, dim: usize) -> Self {
        Self {
            height,
            width,
            dim,
            data: vec![0.0; height * width * dim],
            transform: CoordTransform::identity(),
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn cells(&self) -> usize {
        self.height * self.width
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub(crate) fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn vector(&self, p: GridPoint) -> &[f64] {
        let i = p.linear(self.width) * self.dim;
        &self.data[i..i + self.dim]
    }

    pub fn vector_at(&self, linear: usize) -> &[f64] {
        &self.data[linear * self.dim..(linear + 1) * self.dim]
    }

    pub fn contains(&self, p: GridPoint) -> bool {
        p.row < self.height && p.col < self.width
    }

    pub fn with_transform(mut self, transform: CoordTransform) -> Self {
        self.transform = transform;
        self
    }
}

/// Scalar grid holding cosine similarities or a Gaussian target for one landmark.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimilarityMap {
    height: usize,
    width: usize,
    values: Vec<f64>,
    /// Index of the landmark the map was computed for.
    pub anchor: usize,
}

impl SimilarityMap {
    pub fn new(height: usize, width: usize, values: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 || values.len() != height * width {
            return Err(Error::MapShapeMismatch(format!(
                "{height}x{width} map cannot hold {} values",
                values.len()
            )));
        }
        Ok(Self {
            height,
            width,
            values,
            anchor: 0,
        })
    }

    pub fn for_landmark(mut self, anchor: usize) -> Self {
        self.anchor = anchor;
        self
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn get(&self, p: GridPoint) -> f64 {
        self.values[p.linear(self.width)]
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn cells(&self) -> usize {
        self.values.len()
    }
}
