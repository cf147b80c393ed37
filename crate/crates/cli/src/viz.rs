//! Static PNG output: landmark overlays and similarity heatmaps.

use std::path::Path;

use image::{Rgb, RgbImage};
use oneshot_landmarks::{ImageGrid, Point, SimilarityMap};

use crate::error::CliError;

const RED: Rgb<u8> = Rgb([230, 30, 30]);
const GREEN: Rgb<u8> = Rgb([30, 210, 60]);

fn gray_to_rgb(img: &ImageGrid) -> RgbImage {
    RgbImage::from_fn(img.width() as u32, img.height() as u32, |x, y| {
        let v = (img.get(x as usize, y as usize).clamp(0.0, 1.0) * 255.0).round() as u8;
        Rgb([v, v, v])
    })
}

fn disc(canvas: &mut RgbImage, p: Point, radius: f64, color: Rgb<u8>) {
    let r = radius.ceil() as i64;
    let (cx, cy) = (p.x.round() as i64, p.y.round() as i64);
    for y in cy - r..=cy + r {
        for x in cx - r..=cx + r {
            let inside = ((x - cx).pow(2) + (y - cy).pow(2)) as f64 <= radius * radius;
            if inside && x >= 0 && y >= 0 && (x as u32) < canvas.width() && (y as u32) < canvas.height() {
                canvas.put_pixel(x as u32, y as u32, color);
            }
        }
    }
}

/// Query image with predictions in red and, when known, ground truth in green.
pub fn overlay(img: &ImageGrid, predicted: &[Point], truth: Option<&[Point]>) -> RgbImage {
    let mut canvas = gray_to_rgb(img);
    let radius = (img.width().min(img.height()) as f64 / 100.0).max(1.5);
    for p in truth.unwrap_or(&[]) {
        disc(&mut canvas, *p, radius, GREEN);
    }
    for p in predicted {
        disc(&mut canvas, *p, radius, RED);
    }
    canvas
}

/// Blue (low) to red (high) ramp over [0, 1].
fn ramp(t: f64) -> Rgb<u8> {
    let t = t.clamp(0.0, 1.0);
    let r = (1.5 - (4.0 * t - 3.0).abs()).clamp(0.0, 1.0);
    let g = (1.5 - (4.0 * t - 2.0).abs()).clamp(0.0, 1.0);
    let b = (1.5 - (4.0 * t - 1.0).abs()).clamp(0.0, 1.0);
    Rgb([(r * 255.0) as u8, (g * 255.0) as u8, (b * 255.0) as u8])
}

/// Cosine map rendered with similarity -1..1 on the color ramp, enlarged by
/// an integer factor so small grids stay visible.
pub fn heatmap(map: &SimilarityMap) -> RgbImage {
    let factor = (128 / map.width().max(map.height())).max(1) as u32;
    let w = map.width() as u32 * factor;
    let h = map.height() as u32 * factor;
    let values = map.values();
    RgbImage::from_fn(w, h, |x, y| {
        let i = (y / factor) as usize * map.width() + (x / factor) as usize;
        ramp((values[i] + 1.0) / 2.0)
    })
}

pub fn save(img: &RgbImage, path: &Path) -> Result<(), CliError> {
    img.save(path)
        .map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn overlay_colors_points() {
        let img = ImageGrid::from_fn(20, 10, |_, _| 0.5);
        let o = overlay(&img, &[Point::new(3.0, 4.0)], Some(&[Point::new(15.0, 5.0)]));
        assert_eq!((o.width(), o.height()), (20, 10));
        assert_eq!(*o.get_pixel(3, 4), RED);
        assert_eq!(*o.get_pixel(15, 5), GREEN);
        assert_eq!(*o.get_pixel(9, 1), Rgb([128, 128, 128]));
    }

    #[test]
    fn heatmap_scales_and_ramps() {
        let m = SimilarityMap::new(2, 4, vec![-1.0, 0.0, 0.5, 1.0, 1.0, 1.0, 1.0, 1.0]).unwrap();
        let h = heatmap(&m);
        assert_eq!((h.width(), h.height()), (128, 64));
        assert_eq!(*h.get_pixel(0, 0), ramp(0.0));
        assert_eq!(*h.get_pixel(127, 0), ramp(1.0));
        assert!(ramp(1.0).0[0] > ramp(1.0).0[2] && ramp(0.0).0[2] > ramp(0.0).0[0]);
    }
}
