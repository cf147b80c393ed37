//! Points, grid indices and the affine bookkeeping that ties image pixels to
//! feature-grid cells.
//!
//! Coordinates follow raster order: the origin sits on the center of the
//! top-left pixel, `x` grows rightward and `y` grows downward. The same
//! convention is used for images, feature grids and annotation files.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A continuous 2D point (pixels or grid units, depending on context).
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Point {
    pub x: f64,
    pub y: f64,
}

impl Point {
    pub const fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn is_finite(&self) -> bool {
        self.x.is_finite() && self.y.is_finite()
    }
}

/// Integer cell index on a feature or similarity grid.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct GridPoint {
    pub row: usize,
    pub col: usize,
}

impl GridPoint {
    pub const fn new(row: usize, col: usize) -> Self {
        Self { row, col }
    }

    /// Row-major linear index on a grid of the given width.
    pub fn linear(&self, width: usize) -> usize {
        self.row * width + self.col
    }

    pub fn from_linear(index: usize, width: usize) -> Self {
        Self {
            row: index / width,
            col: index % width,
        }
    }

    pub fn to_point(self) -> Point {
        Point::new(self.col as f64, self.row as f64)
    }
}

/// Euclidean distance between two points.
pub fn euclidean_dist(a: Point, b: Point) -> f64 {
    (a.x - b.x).hypot(a.y - b.y)
}

/// Isotropic scale-and-shift map from a grid frame into an image frame.
///
/// `to_image(p) = p * scale + offset`; `to_feature` is its inverse.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CoordTransform {
    pub scale: f64,
    pub dx: f64,
    pub dy: f64,
}

impl Default for CoordTransform {
    fn default() -> Self {
        Self::identity()
    }
}

impl CoordTransform {
    pub const fn identity() -> Self {
        Self {
            scale: 1.0,
            dx: 0.0,
            dy: 0.0,
        }
    }

    pub fn new(scale: f64, dx: f64, dy: f64) -> Result<Self> {
        if !(scale > 0.0) || !scale.is_finite() || !dx.is_finite() || !dy.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "transform requires finite scale > 0 and finite offset, got scale={scale} offset=({dx}, {dy})"
            )));
        }
        Ok(Self { scale, dx, dy })
    }

    pub const fn translation(dx: f64, dy: f64) -> Self {
        Self { scale: 1.0, dx, dy }
    }

    pub fn to_feature(&self, p: Point) -> Point {
        Point::new((p.x - self.dx) / self.scale, (p.y - self.dy) / self.scale)
    }

    pub fn to_image(&self, p: Point) -> Point {
        Point::new(p.x * self.scale + self.dx, p.y * self.scale + self.dy)
    }

    /// Composition: first `self`, then `outer`.
    pub fn then(&self, outer: &CoordTransform) -> CoordTransform {
        CoordTransform {
            scale: self.scale * outer.scale,
            dx: self.dx * outer.scale + outer.dx,
            dy: self.dy * outer.scale + outer.dy,
        }
    }
}

/// Maps an image-frame point into the grid frame of `t`.
pub fn to_feature_coords(p: Point, t: &CoordTransform) -> Point {
    t.to_feature(p)
}

/// Maps a grid-frame point back into the image frame of `t`.
pub fn to_image_coords(p: Point, t: &CoordTransform) -> Point {
    t.to_image(p)
}

/// Snaps a continuous grid-frame point to the nearest cell, rounding half up
/// independently per axis and clamping into the grid.
pub fn snap_to_grid(p: Point, height: usize, width: usize) -> GridPoint {
    let snap = |v: f64, n: usize| -> usize {
        let r = (v + 0.5).floor();
        if !(r > 0.0) {
            0
        } else if r >= (n - 1) as f64 {
            n - 1
        } else {
            r as usize
        }
    };
    GridPoint::new(snap(p.y, height), snap(p.x, width))
}

/// Ordered landmark coordinates in image pixels.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LandmarkSet {
    pub points: Vec<Point>,
}

impl LandmarkSet {
    pub fn new(points: Vec<Point>) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::InvalidArgument("landmark set must hold at least one point".into()));
        }
        if let Some((i, p)) = points.iter().enumerate().find(|(_, p)| !p.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "landmark {i} has non-finite coordinate ({}, {})",
                p.x, p.y
            )));
        }
        Ok(Self { points })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Checks `0 <= x <= width-1` and `0 <= y <= height-1` for every point.
    pub fn check_bounds(&self, height: usize, width: usize) -> Result<()> {
        for (i, p) in self.points.iter().enumerate() {
            if !in_bounds(*p, height, width) {
                return Err(Error::InvalidArgument(format!(
                    "landmark {i} at ({}, {}) lies outside {height}x{width} image",
                    p.x, p.y
                )));
            }
        }
        Ok(())
    }

    pub fn map(&self, f: impl Fn(Point) -> Point) -> LandmarkSet {
        LandmarkSet {
            points: self.points.iter().map(|p| f(*p)).collect(),
        }
    }
}

pub(crate) fn in_bounds(p: Point, height: usize, width: usize) -> bool {
    p.x >= 0.0 && p.y >= 0.0 && p.x <= (width - 1) as f64 && p.y <= (height - 1) as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn feature_coords_examples() {
        let id = CoordTransform::identity();
        assert_eq!(to_feature_coords(Point::new(0.0, 0.0), &id), Point::new(0.0, 0.0));
        let t = CoordTransform::new(4.0, 0.0, 0.0).unwrap();
        assert_eq!(to_feature_coords(Point::new(8.0, 8.0), &t), Point::new(2.0, 2.0));
        let t = CoordTransform::new(2.0, 4.0, 2.0).unwrap();
        assert_eq!(to_feature_coords(Point::new(10.0, 6.0), &t), Point::new(3.0, 2.0));
    }

    #[test]
    fn image_coords_examples() {
        let id = CoordTransform::identity();
        assert_eq!(to_image_coords(Point::new(0.0, 0.0), &id), Point::new(0.0, 0.0));
        let t = CoordTransform::new(4.0, 0.0, 0.0).unwrap();
        assert_eq!(to_image_coords(Point::new(2.0, 2.0), &t), Point::new(8.0, 8.0));
    }

    #[test]
    fn dist_examples() {
        assert_eq!(euclidean_dist(Point::new(0.0, 0.0), Point::new(0.0, 0.0)), 0.0);
        assert_eq!(euclidean_dist(Point::new(0.0, 0.0), Point::new(3.0, 4.0)), 5.0);
        assert_eq!(euclidean_dist(Point::new(1.0, 1.0), Point::new(4.0, 5.0)), 5.0);
    }

    #[test]
    fn non_positive_scale_rejected() {
        assert!(CoordTransform::new(0.0, 0.0, 0.0).is_err());
        assert!(CoordTransform::new(-1.0, 0.0, 0.0).is_err());
    }

    #[test]
    fn snapping_rounds_half_up_and_clamps() {
        assert_eq!(snap_to_grid(Point::new(1.5, 2.49), 10, 10), GridPoint::new(2, 2));
        assert_eq!(snap_to_grid(Point::new(-0.6, 0.5), 10, 10), GridPoint::new(1, 0));
        assert_eq!(snap_to_grid(Point::new(42.0, 9.6), 10, 10), GridPoint::new(9, 9));
    }

    #[test]
    fn composition_matches_sequential_application() {
        let a = CoordTransform::new(4.0, 3.5, 3.5).unwrap();
        let b = CoordTransform::new(2.0, 0.5, 0.5).unwrap();
        let p = Point::new(3.0, 7.0);
        assert_eq!(a.then(&b).to_image(p), b.to_image(a.to_image(p)));
    }

    #[test]
    fn landmark_bounds() {
        let lms = LandmarkSet::new(vec![Point::new(0.0, 0.0), Point::new(9.0, 4.0)]).unwrap();
        assert!(lms.check_bounds(5, 10).is_ok());
        assert!(lms.check_bounds(4, 10).is_err());
        assert!(LandmarkSet::new(vec![]).is_err());
        assert!(LandmarkSet::new(vec![Point::new(f64::NAN, 0.0)]).is_err());
    }

    proptest! {
        #[test]
        fn triangle_inequality(ax in -1e3..1e3f64, ay in -1e3..1e3f64, bx in -1e3..1e3f64,
                               by in -1e3..1e3f64, cx in -1e3..1e3f64, cy in -1e3..1e3f64) {
            let (a, b, c) = (Point::new(ax, ay), Point::new(bx, by), Point::new(cx, cy));
            let ab = euclidean_dist(a, b);
            prop_assert!(ab >= 0.0);
            prop_assert_eq!(ab, euclidean_dist(b, a));
            prop_assert!(euclidean_dist(a, c) <= ab + euclidean_dist(b, c) + 1e-9);
        }

        // Dyadic scales and offsets keep every intermediate exactly representable.
        #[test]
        fn round_trip_exact_on_dyadic_transforms(x in -4096i32..4096, y in -4096i32..4096,
                                                 e in 0u32..4, dx in -64i32..64, dy in -64i32..64) {
            let t = CoordTransform::new(f64::from(1u32 << e), dx as f64 * 0.5, dy as f64 * 0.5).unwrap();
            let p = Point::new(x as f64 * 0.25, y as f64 * 0.25);
            prop_assert_eq!(t.to_image(t.to_feature(p)), p);
        }

        #[test]
        fn round_trip_close_on_general_transforms(x in 0.0..3000.0f64, y in 0.0..3000.0f64,
                                                  s in 0.1..20.0f64, dx in -50.0..50.0f64, dy in -50.0..50.0f64) {
            let t = CoordTransform::new(s, dx, dy).unwrap();
            let p = Point::new(x, y);
            let q = t.to_image(t.to_feature(p));
            prop_assert!(euclidean_dist(p, q) < 1e-9);
        }
    }
}
