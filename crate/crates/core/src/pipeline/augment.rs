use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{in_bounds, LandmarkSet, Point};
use crate::raster::ImageGrid;

use super::config::AugRanges;

const MAX_RETRIES: usize = 100;

/// Similarity transform about the image center:
/// `p' = c + scale * R(theta) * (p - c) + shift`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Affine {
    pub center: Point,
    pub scale: f64,
    pub theta: f64,
    pub shift: Point,
}

impl Affine {
    pub fn identity(width: usize, height: usize) -> Self {
        Self {
            center: image_center(width, height),
            scale: 1.0,
            theta: 0.0,
            shift: Point::new(0.0, 0.0),
        }
    }

    pub fn apply(&self, p: Point) -> Point {
        let (s, c) = self.theta.sin_cos();
        let (dx, dy) = (p.x - self.center.x, p.y - self.center.y);
        Point::new(
            self.center.x + self.scale * (c * dx - s * dy) + self.shift.x,
            self.center.y + self.scale * (s * dx + c * dy) + self.shift.y,
        )
    }

    pub fn invert(&self, p: Point) -> Point {
        let (s, c) = self.theta.sin_cos();
        let dx = (p.x - self.center.x - self.shift.x) / self.scale;
        let dy = (p.y - self.center.y - self.shift.y) / self.scale;
        Point::new(self.center.x + c * dx + s * dy, self.center.y - s * dx + c * dy)
    }

    fn is_identity(&self) -> bool {
        self.scale == 1.0 && self.theta == 0.0 && self.shift.x == 0.0 && self.shift.y == 0.0
    }

    /// Renders the transformed image; pixels that map outside the source are zero.
    pub fn warp(&self, img: &ImageGrid) -> ImageGrid {
        if self.is_identity() {
            return img.clone();
        }
        let out = ImageGrid::from_fn(img.width(), img.height(), |x, y| {
            let src = self.invert(Point::new(x as f64, y as f64));
            img.sample(src.x, src.y)
        });
        match img.spacing_mm() {
            Some(s) => out.with_spacing(s).expect("spacing already validated"),
            None => out,
        }
    }

    /// Renders only the `size x size` window of the transformed image whose
    /// top-left pixel is `origin`.
    pub fn warp_window(&self, img: &ImageGrid, origin: (i64, i64), size: usize) -> ImageGrid {
        ImageGrid::from_fn(size, size, |x, y| {
            let src = self.invert(Point::new((origin.0 + x as i64) as f64, (origin.1 + y as i64) as f64));
            img.sample(src.x, src.y)
        })
    }
}

fn image_center(width: usize, height: usize) -> Point {
    Point::new((width as f64 - 1.0) / 2.0, (height as f64 - 1.0) / 2.0)
}

fn draw(rng: &mut ChaCha8Rng, ranges: &AugRanges, width: usize, height: usize) -> Affine {
    let mut sym = |m: f64| if m > 0.0 { rng.gen_range(-m..=m) } else { 0.0 };
    let sx = sym(ranges.shift_frac) * width as f64;
    let sy = sym(ranges.shift_frac) * height as f64;
    let theta = sym(ranges.rotate_deg).to_radians();
    let scale = if ranges.scale_max > ranges.scale_min {
        rng.gen_range(ranges.scale_min..=ranges.scale_max)
    } else {
        ranges.scale_min
    };
    Affine {
        center: image_center(width, height),
        scale,
        theta,
        shift: Point::new(sx, sy),
    }
}

/// Draws `count` affines that keep every landmark inside the image, redrawing
/// each up to 100 times.
pub fn draw_augmentations(
    rng: &mut ChaCha8Rng,
    ranges: &AugRanges,
    width: usize,
    height: usize,
    lms: &LandmarkSet,
    count: usize,
) -> Result<Vec<Affine>> {
    (0..count)
        .map(|sample| {
            for _ in 0..MAX_RETRIES {
                let a = draw(rng, ranges, width, height);
                if lms.points.iter().all(|p| in_bounds(a.apply(*p), height, width)) {
                    return Ok(a);
                }
            }
            Err(Error::AugmentationDegenerate { sample })
        })
        .collect()
}

/// Random shift/scale/rotation copies of the template with landmarks mapped
/// through the same transform.
pub fn augment_template(
    img: &ImageGrid,
    lms: &LandmarkSet,
    ranges: &AugRanges,
    count: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<(ImageGrid, LandmarkSet)>> {
    let affines = draw_augmentations(rng, ranges, img.width(), img.height(), lms, count)?;
    Ok(affines
        .iter()
        .map(|a| (a.warp(img), lms.map(|p| a.apply(p))))
        .collect())
}
