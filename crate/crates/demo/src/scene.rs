//! Everything the page draws, as plain Rust so it can be tested natively.

use oneshot_landmarks::backbone::{Backbone, BackboneSpec};
use oneshot_landmarks::geometry::{euclidean_dist, snap_to_grid};
use oneshot_landmarks::matching::{argmax_match, bdm_match, MatchConfig};
use oneshot_landmarks::simloss::{cosine_similarity_map, gaussian_target_map, GaussianTargetSpec};
use oneshot_landmarks::synth::{generate, Deformation, SynthParams};
use oneshot_landmarks::{FeatureMap, GridPoint, ImageGrid, Point, Result, SimilarityMap};

pub const SIDE: usize = 128;

/// Blue (low) to red (high) over [0, 1].
pub fn ramp(t: f64) -> [u8; 3] {
    let t = t.clamp(0.0, 1.0);
    let c = |center: f64| ((1.5 - (4.0 * t - center).abs()).clamp(0.0, 1.0) * 255.0) as u8;
    [c(3.0), c(2.0), c(1.0)]
}

fn gray_rgba(img: &ImageGrid) -> Vec<u8> {
    let mut out = Vec::with_capacity(img.pixels().len() * 4);
    for v in img.pixels() {
        let g = (v.clamp(0.0, 1.0) * 255.0).round() as u8;
        out.extend_from_slice(&[g, g, g, 255]);
    }
    out
}

/// Renders `map` at `width x height` pixels; `cell_of` maps a pixel to its cell.
fn map_rgba(map: &SimilarityMap, width: usize, height: usize, lo: f64, hi: f64, cell_of: impl Fn(Point) -> GridPoint) -> Vec<u8> {
    let mut out = Vec::with_capacity(width * height * 4);
    for y in 0..height {
        for x in 0..width {
            let v = map.get(cell_of(Point::new(x as f64, y as f64)));
            let [r, g, b] = ramp((v - lo) / (hi - lo));
            out.extend_from_slice(&[r, g, b, 255]);
        }
    }
    out
}

/// A `grid x grid` Gaussian target centered at `(cx, cy)`, drawn `SIDE`
/// pixels square.
pub fn gaussian_rgba(grid: usize, cx: f64, cy: f64, sigma: f64) -> Result<Vec<u8>> {
    let spec = GaussianTargetSpec {
        sigma,
        center: Point::new(cx, cy),
    };
    let map = gaussian_target_map(grid, grid, &spec)?;
    let cell = SIDE as f64 / grid as f64;
    Ok(map_rgba(&map, SIDE, SIDE, 0.0, 1.0, |p| {
        snap_to_grid(Point::new((p.x + 0.5) / cell - 0.5, (p.y + 0.5) / cell - 0.5), grid, grid)
    }))
}

/// Where argmax and bidirectional matching place one clicked template point.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Comparison {
    pub argmax: Point,
    pub bdm: Point,
    pub truth: Point,
}

impl Comparison {
    pub fn argmax_error(&self) -> f64 {
        euclidean_dist(self.argmax, self.truth)
    }

    pub fn bdm_error(&self) -> f64 {
        euclidean_dist(self.bdm, self.truth)
    }
}

/// A synthetic template, one deformed query and their frozen features.
pub struct Scene {
    template: ImageGrid,
    query: ImageGrid,
    deformation: Deformation,
    f_t: FeatureMap,
    f_q: FeatureMap,
}

impl Scene {
    pub fn new(seed: u64, noise: f64) -> Result<Self> {
        let params = SynthParams {
            width: SIDE,
            height: SIDE,
            queries: 1,
            seed,
            ..SynthParams::default()
        };
        let mut samples = generate(&params)?;
        let query = samples.pop().expect("one query");
        let template = samples.pop().expect("template");
        let spec = if noise > 0.0 {
            BackboneSpec::synthetic_noisy(noise, seed)
        } else {
            BackboneSpec::default()
        };
        let backbone = Backbone::new(spec)?;
        Ok(Self {
            f_t: backbone.extract_features(&template.image)?,
            f_q: backbone.extract_features(&query.image)?,
            template: template.image,
            query: query.image,
            deformation: query.deformation,
        })
    }

    pub fn template_rgba(&self) -> Vec<u8> {
        gray_rgba(&self.template)
    }

    pub fn query_rgba(&self) -> Vec<u8> {
        gray_rgba(&self.query)
    }

    fn template_cell(&self, p: Point) -> GridPoint {
        snap_to_grid(self.f_t.transform.to_feature(p), self.f_t.height(), self.f_t.width())
    }

    fn query_pixel(&self, cell: GridPoint) -> Point {
        self.f_q.transform.to_image(cell.to_point())
    }

    /// Cosine similarity of every query cell to the template cell under
    /// pixel `(x, y)`.
    pub fn similarity(&self, x: f64, y: f64) -> Result<SimilarityMap> {
        let anchor = self.f_t.vector(self.template_cell(Point::new(x, y)));
        cosine_similarity_map(&self.f_q, anchor)
    }

    /// [`Scene::similarity`] drawn over the query image, -1..1 on the ramp.
    pub fn similarity_rgba(&self, x: f64, y: f64) -> Result<Vec<u8>> {
        let map = self.similarity(x, y)?;
        let t = self.f_q.transform;
        let (h, w) = (self.f_q.height(), self.f_q.width());
        Ok(map_rgba(&map, SIDE, SIDE, -1.0, 1.0, |p| snap_to_grid(t.to_feature(p), h, w)))
    }

    pub fn compare(&self, x: f64, y: f64, k: usize) -> Result<Comparison> {
        let clicked = Point::new(x, y);
        let p_t = self.template_cell(clicked);
        let argmax = argmax_match(&self.f_q, self.f_t.vector(p_t))?;
        let bdm = bdm_match(&self.f_t, &self.f_q, p_t, &MatchConfig { k })?;
        Ok(Comparison {
            argmax: self.query_pixel(argmax),
            bdm: self.query_pixel(bdm.query_point),
            truth: self.deformation.to_query(clicked),
        })
    }
}
