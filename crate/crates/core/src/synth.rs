//! Procedural benchmark: a textured template plus deformed, noisy copies with
//! exactly known landmark correspondences.
//!
//! The texture is an analytic function of continuous position, so every query
//! is rendered by evaluating it at deformed coordinates instead of resampling
//! the template. Query pixel `q` shows the texture at `A(q) + e(q)` where `A`
//! is a random similarity about the image center and `e` a smooth sinusoidal
//! displacement; query landmarks solve `A(q) + e(q) = template landmark`.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evaldata::{write_annotations, Calibration, DatasetManifest};
use crate::geometry::{euclidean_dist, LandmarkSet, Point};
use crate::raster::ImageGrid;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthParams {
    pub width: usize,
    pub height: usize,
    pub landmarks: usize,
    /// Number of deformed queries (the template is generated in addition).
    pub queries: usize,
    pub seed: u64,
    pub rotate_deg: f64,
    pub scale_dev: f64,
    pub shift_frac: f64,
    /// Peak displacement of the smooth elastic field, in pixels.
    pub elastic_px: f64,
    /// Standard deviation of additive pixel noise on queries.
    pub noise: f64,
    pub spacing_mm: f64,
}

impl Default for SynthParams {
    fn default() -> Self {
        Self {
            width: 128,
            height: 128,
            landmarks: 5,
            queries: 50,
            seed: 2024,
            rotate_deg: 6.0,
            scale_dev: 0.05,
            shift_frac: 0.05,
            elastic_px: 1.5,
            noise: 0.02,
            spacing_mm: 1.0,
        }
    }
}

impl SynthParams {
    pub fn validate(&self) -> Result<()> {
        if self.width < 16 || self.height < 16 || self.landmarks == 0 {
            return Err(Error::InvalidArgument("synthetic images need >= 16x16 pixels and >= 1 landmark".into()));
        }
        let finite_nonneg = [self.rotate_deg, self.scale_dev, self.shift_frac, self.elastic_px, self.noise];
        if finite_nonneg.iter().any(|v| !(*v >= 0.0) || !v.is_finite()) || self.scale_dev >= 0.5 {
            return Err(Error::InvalidArgument("deformation parameters must be finite, >= 0 (scale_dev < 0.5)".into()));
        }
        if !(self.spacing_mm > 0.0) {
            return Err(Error::InvalidArgument("spacing_mm must be > 0".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug)]
struct Blob {
    cx: f64,
    cy: f64,
    /// Inverse squared radii along the rotated axes.
    ia: f64,
    ib: f64,
    cos: f64,
    sin: f64,
    amp: f64,
    cutoff: f64,
}

#[derive(Clone, Copy, Debug)]
struct Wave {
    kx: f64,
    ky: f64,
    phase: f64,
    amp: f64,
}

/// Smooth random intensity field over the plane.
#[derive(Clone, Debug)]
pub struct Texture {
    blobs: Vec<Blob>,
    waves: Vec<Wave>,
}

impl Texture {
    pub fn random(width: usize, height: usize, rng: &mut ChaCha8Rng) -> Self {
        let short = width.min(height) as f64;
        let area = (width * height) as f64;
        let n_round = (area / 180.0).ceil() as usize;
        let n_long = (area / 600.0).ceil() as usize;
        let mut blobs = Vec::with_capacity(n_round + n_long);
        for i in 0..n_round + n_long {
            let elongated = i >= n_round;
            let r = rng.gen_range(0.02..0.07) * short;
            let (ra, rb) = if elongated { (r * rng.gen_range(2.5..5.0), r * 0.6) } else { (r, r * rng.gen_range(0.7..1.0)) };
            let angle: f64 = rng.gen_range(0.0..std::f64::consts::PI);
            let sign = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
            blobs.push(Blob {
                cx: rng.gen_range(-0.1..1.1) * width as f64,
                cy: rng.gen_range(-0.1..1.1) * height as f64,
                ia: 1.0 / (ra * ra),
                ib: 1.0 / (rb * rb),
                cos: angle.cos(),
                sin: angle.sin(),
                amp: sign * rng.gen_range(0.5..1.0),
                cutoff: 9.0 * ra * ra,
            });
        }
        let waves = (0..3)
            .map(|_| {
                let cycles = rng.gen_range(0.7..2.5);
                let dir: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
                let k = std::f64::consts::TAU * cycles / short;
                Wave {
                    kx: k * dir.cos(),
                    ky: k * dir.sin(),
                    phase: rng.gen_range(0.0..std::f64::consts::TAU),
                    amp: rng.gen_range(0.2..0.4),
                }
            })
            .collect();
        Self { blobs, waves }
    }

    /// Intensity in `(0, 1)` at continuous position `p`.
    pub fn eval(&self, p: Point) -> f64 {
        let mut v = 0.0;
        for b in &self.blobs {
            let (dx, dy) = (p.x - b.cx, p.y - b.cy);
            let d2 = dx * dx + dy * dy;
            if d2 > b.cutoff {
                continue;
            }
            let u = b.cos * dx + b.sin * dy;
            let w = -b.sin * dx + b.cos * dy;
            v += b.amp * (-0.5 * (u * u * b.ia + w * w * b.ib)).exp();
        }
        for w in &self.waves {
            v += w.amp * (w.kx * p.x + w.ky * p.y + w.phase).sin();
        }
        0.5 + 0.45 * (0.8 * v).tanh()
    }
}

/// Query-to-template coordinate map `A(q) + e(q)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Deformation {
    center: Point,
    /// Linear part of `A` (row-major 2x2) and its translation.
    m: [f64; 4],
    t: Point,
    /// `(kx, ky, phase, amp_x, amp_y)` terms of the elastic field.
    waves: Vec<[f64; 5]>,
}

impl Deformation {
    pub fn identity(width: usize, height: usize) -> Self {
        Self {
            center: Point::new((width as f64 - 1.0) / 2.0, (height as f64 - 1.0) / 2.0),
            m: [1.0, 0.0, 0.0, 1.0],
            t: Point::new(0.0, 0.0),
            waves: Vec::new(),
        }
    }

    fn random(p: &SynthParams, rng: &mut ChaCha8Rng) -> Self {
        let mut sym = |m: f64| if m > 0.0 { rng.gen_range(-m..=m) } else { 0.0 };
        let theta = sym(p.rotate_deg).to_radians();
        let scale = 1.0 + sym(p.scale_dev);
        let t = Point::new(sym(p.shift_frac) * p.width as f64, sym(p.shift_frac) * p.height as f64);
        let (s, c) = theta.sin_cos();
        let short = p.width.min(p.height) as f64;
        let waves = if p.elastic_px > 0.0 {
            (0..3)
                .map(|_| {
                    let cycles = rng.gen_range(0.5..1.5);
                    let dir: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
                    let k = std::f64::consts::TAU * cycles / short;
                    // three terms can add up; keep the peak near elastic_px
                    let a = p.elastic_px / 3.0;
                    [k * dir.cos(), k * dir.sin(), rng.gen_range(0.0..std::f64::consts::TAU), a * rng.gen_range(-1.0..1.0), a * rng.gen_range(-1.0..1.0)]
                })
                .collect()
        } else {
            Vec::new()
        };
        Self {
            center: Point::new((p.width as f64 - 1.0) / 2.0, (p.height as f64 - 1.0) / 2.0),
            m: [scale * c, -scale * s, scale * s, scale * c],
            t,
            waves,
        }
    }

    fn elastic(&self, q: Point) -> Point {
        let mut e = Point::new(0.0, 0.0);
        for w in &self.waves {
            let s = (w[0] * q.x + w[1] * q.y + w[2]).sin();
            e.x += w[3] * s;
            e.y += w[4] * s;
        }
        e
    }

    fn affine(&self, q: Point) -> Point {
        let (dx, dy) = (q.x - self.center.x, q.y - self.center.y);
        Point::new(
            self.center.x + self.m[0] * dx + self.m[1] * dy + self.t.x,
            self.center.y + self.m[2] * dx + self.m[3] * dy + self.t.y,
        )
    }

    fn affine_inverse(&self, p: Point) -> Point {
        let det = self.m[0] * self.m[3] - self.m[1] * self.m[2];
        let (dx, dy) = (p.x - self.center.x - self.t.x, p.y - self.center.y - self.t.y);
        Point::new(
            self.center.x + (self.m[3] * dx - self.m[1] * dy) / det,
            self.center.y + (-self.m[2] * dx + self.m[0] * dy) / det,
        )
    }

    /// Template position shown at query position `q`.
    pub fn to_template(&self, q: Point) -> Point {
        let a = self.affine(q);
        let e = self.elastic(q);
        Point::new(a.x + e.x, a.y + e.y)
    }

    /// Query position showing template position `p`, by fixed-point iteration.
    pub fn to_query(&self, p: Point) -> Point {
        let mut q = self.affine_inverse(p);
        for _ in 0..100 {
            let e = self.elastic(q);
            let next = self.affine_inverse(Point::new(p.x - e.x, p.y - e.y));
            let done = euclidean_dist(next, q) < 1e-12;
            q = next;
            if done {
                break;
            }
        }
        q
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthSample {
    pub image: ImageGrid,
    pub landmarks: LandmarkSet,
    /// Mapping between this sample and the template frame.
    pub deformation: Deformation,
}

/// Template (index 0) followed by `queries` deformed samples.
pub fn generate(p: &SynthParams) -> Result<Vec<SynthSample>> {
    p.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(p.seed);
    let texture = Texture::random(p.width, p.height, &mut rng);
    let template_lms = place_landmarks(p, &texture, &mut rng);
    let noise = Normal::new(0.0, p.noise.max(f64::MIN_POSITIVE)).expect("valid std");
    let margin = 2.0;
    let mut out = Vec::with_capacity(p.queries + 1);
    out.push(render(&texture, &Deformation::identity(p.width, p.height), p, template_lms.clone()));
    while out.len() < p.queries + 1 {
        let d = Deformation::random(p, &mut rng);
        let q_lms: Vec<Point> = template_lms.iter().map(|l| d.to_query(*l)).collect();
        let inside = q_lms.iter().all(|q| {
            q.x >= margin && q.y >= margin && q.x <= p.width as f64 - 1.0 - margin && q.y <= p.height as f64 - 1.0 - margin
        });
        if !inside {
            continue;
        }
        let mut sample = render(&texture, &d, p, q_lms);
        if p.noise > 0.0 {
            let px: Vec<f64> = sample
                .image
                .pixels()
                .iter()
                .map(|v| (v + noise.sample(&mut rng)).clamp(0.0, 1.0))
                .collect();
            sample.image = ImageGrid::new(p.width, p.height, px)?;
        }
        out.push(sample);
    }
    Ok(out)
}

fn render(texture: &Texture, d: &Deformation, p: &SynthParams, lms: Vec<Point>) -> SynthSample {
    let image = ImageGrid::from_fn(p.width, p.height, |x, y| texture.eval(d.to_template(Point::new(x as f64, y as f64))));
    SynthSample {
        image,
        landmarks: LandmarkSet::new(lms).expect("finite landmarks"),
        deformation: d.clone(),
    }
}

/// Landmarks spread over the central region, at least a few pixels apart.
/// Each is the most corner-like of several random candidates, so landmarks
/// sit on local structure rather than in flat areas.
fn place_landmarks(p: &SynthParams, texture: &Texture, rng: &mut ChaCha8Rng) -> Vec<Point> {
    const CANDIDATES: usize = 16;
    let (w, h) = (p.width as f64, p.height as f64);
    let min_gap = (w.min(h) / (p.landmarks as f64).sqrt() / 3.0).max(2.0);
    let mut pts: Vec<Point> = Vec::with_capacity(p.landmarks);
    let mut tries = 0;
    while pts.len() < p.landmarks {
        let mut best: Option<(f64, Point)> = None;
        for _ in 0..CANDIDATES {
            let c = Point::new(rng.gen_range(0.2..0.8) * w, rng.gen_range(0.2..0.8) * h);
            tries += 1;
            if tries <= 10_000 && !pts.iter().all(|q| euclidean_dist(*q, c) >= min_gap) {
                continue;
            }
            let score = cornerness(texture, c);
            if best.is_none_or(|(b, _)| score > b) {
                best = Some((score, c));
            }
        }
        if let Some((_, c)) = best {
            pts.push(c);
        }
    }
    pts
}

/// Smaller eigenvalue of the structure tensor over a 9x9 window.
fn cornerness(texture: &Texture, c: Point) -> f64 {
    let (mut sxx, mut sxy, mut syy) = (0.0, 0.0, 0.0);
    for dy in -4..=4 {
        for dx in -4..=4 {
            let x = c.x + dx as f64;
            let y = c.y + dy as f64;
            let gx = texture.eval(Point::new(x + 0.5, y)) - texture.eval(Point::new(x - 0.5, y));
            let gy = texture.eval(Point::new(x, y + 0.5)) - texture.eval(Point::new(x, y - 0.5));
            sxx += gx * gx;
            sxy += gx * gy;
            syy += gy * gy;
        }
    }
    let half_trace = 0.5 * (sxx + syy);
    let det = sxx * syy - sxy * sxy;
    half_trace - (half_trace * half_trace - det).max(0.0).sqrt()
}

/// Writes images, annotations and a manifest loadable by
/// [`crate::evaldata::load_dataset`]. Sample 0 is the template.
pub fn write_dataset(dir: &Path, name: &str, samples: &[SynthSample], spacing_mm: f64) -> Result<()> {
    let img_dir = dir.join("images");
    let ann_dir = dir.join("annotations");
    for d in [&img_dir, &ann_dir] {
        std::fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
    }
    let ids: Vec<String> = (0..samples.len()).map(|i| format!("{i:03}")).collect();
    for (id, s) in ids.iter().zip(samples) {
        s.image.save_png(&img_dir.join(format!("{id}.png")))?;
        write_annotations(&ann_dir.join(format!("{id}.csv")), &s.landmarks.points)?;
    }
    let manifest = DatasetManifest {
        name: name.to_string(),
        image_dir: "images".into(),
        annotation_dir: "annotations".into(),
        landmark_count: samples.first().map_or(0, |s| s.landmarks.len()),
        calibration: Calibration::spacing(spacing_mm),
        template: ids.first().cloned().unwrap_or_default(),
        test: ids.iter().skip(1).cloned().collect(),
        image_ext: "png".into(),
    };
    manifest.save(&dir.join("manifest.json"))
}
