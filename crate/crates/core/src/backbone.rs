//! Frozen dense-feature extraction.
//!
//! Three backbone kinds share one geometry: a patch of `patch_size` pixels
//! slid with `stride`, one descriptor per patch. The two synthetic kinds are
//! deterministic and cheap. `external-vit` delegates to a caller-supplied
//! [`DescriptorProvider`] (for example a process wrapping a pretrained vision
//! transformer); the toolkit never updates its weights.
//!
//! The synthetic descriptor of a patch concatenates quadrature responses of
//! Gaussian-windowed sinusoids at 1, 2, 4 and 8 cycles per image side in four
//! orientations (32 channels) with the patch mean and variance, then
//! L2-normalizes. The phase of each sinusoid response moves linearly with the
//! patch position relative to surrounding structure, so the descriptor is a
//! smooth positional code in the frame of the image content. Low bands make
//! it similar over wide areas; high bands make it locally discriminative.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::FeatureMap;
use crate::geometry::CoordTransform;
use crate::raster::ImageGrid;

/// Channel count of the synthetic descriptors.
pub const SYNTHETIC_DIM: usize = 34;

const FREQUENCIES: [f64; 4] = [1.0, 2.0, 4.0, 8.0];
const ORIENTATIONS: usize = 4;
const VARIANCE_WEIGHT: f64 = 4.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BackboneKind {
    SyntheticPositional,
    SyntheticNoisy,
    ExternalVit,
}

impl std::str::FromStr for BackboneKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "synthetic-positional" => Ok(Self::SyntheticPositional),
            "synthetic-noisy" => Ok(Self::SyntheticNoisy),
            "external-vit" => Ok(Self::ExternalVit),
            other => Err(Error::InvalidArgument(format!("unknown backbone kind '{other}'"))),
        }
    }
}

/// Attention component a transformer adapter should read descriptors from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Head {
    Key,
    Query,
    Value,
    Token,
}

impl Head {
    pub const ALL: [Head; 4] = [Head::Key, Head::Query, Head::Value, Head::Token];

    pub fn as_str(&self) -> &'static str {
        match self {
            Head::Key => "key",
            Head::Query => "query",
            Head::Value => "value",
            Head::Token => "token",
        }
    }
}

impl std::str::FromStr for Head {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Head::ALL
            .into_iter()
            .find(|h| h.as_str() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown head '{s}'")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BackboneSpec {
    pub kind: BackboneKind,
    pub patch_size: usize,
    pub stride: usize,
    /// 1-based transformer block index passed to external adapters.
    pub layer: usize,
    pub head: Head,
    pub dim: usize,
    /// Perturbation magnitude for `synthetic-noisy` (norm of the added noise
    /// relative to the unit descriptor).
    pub noise: f64,
    pub seed: u64,
}

impl Default for BackboneSpec {
    fn default() -> Self {
        Self {
            kind: BackboneKind::SyntheticPositional,
            patch_size: 8,
            stride: 4,
            layer: 9,
            head: Head::Key,
            dim: SYNTHETIC_DIM,
            noise: 0.0,
            seed: 0,
        }
    }
}

impl BackboneSpec {
    pub fn synthetic_noisy(noise: f64, seed: u64) -> Self {
        Self {
            kind: BackboneKind::SyntheticNoisy,
            noise,
            seed,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.stride < 1 || self.patch_size < self.stride {
            return Err(Error::InvalidArgument(format!(
                "backbone needs patch_size >= stride >= 1, got patch {} stride {}",
                self.patch_size, self.stride
            )));
        }
        if self.layer < 1 || self.dim < 1 {
            return Err(Error::InvalidArgument("backbone layer and dim must be >= 1".into()));
        }
        if self.kind != BackboneKind::ExternalVit && self.dim != SYNTHETIC_DIM {
            return Err(Error::InvalidArgument(format!(
                "synthetic backbones produce {SYNTHETIC_DIM} channels, spec asks for {}",
                self.dim
            )));
        }
        if !(self.noise >= 0.0) || !self.noise.is_finite() {
            return Err(Error::InvalidArgument(format!("noise must be >= 0, got {}", self.noise)));
        }
        Ok(())
    }
}

/// Patch grid laid over an image, with the transform from cell index to the
/// receptive-field center in image pixels.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PatchGridGeometry {
    pub grid_h: usize,
    pub grid_w: usize,
    pub transform: CoordTransform,
}

pub fn grid_geometry(height: usize, width: usize, spec: &BackboneSpec) -> Result<PatchGridGeometry> {
    if height < spec.patch_size || width < spec.patch_size {
        return Err(Error::ImageTooSmall {
            height,
            width,
            patch: spec.patch_size,
        });
    }
    let center = (spec.patch_size as f64 - 1.0) / 2.0;
    Ok(PatchGridGeometry {
        grid_h: (height - spec.patch_size) / spec.stride + 1,
        grid_w: (width - spec.patch_size) / spec.stride + 1,
        transform: CoordTransform {
            scale: spec.stride as f64,
            dx: center,
            dy: center,
        },
    })
}

/// Descriptors delivered by an external adapter, HWC order.
#[derive(Clone, Debug, PartialEq)]
pub struct DescriptorGrid {
    pub grid_h: usize,
    pub grid_w: usize,
    pub dim: usize,
    pub data: Vec<f32>,
}

/// Source of patch descriptors for `external-vit` backbones.
///
/// Implementations must return one descriptor per cell of `geometry`, read
/// from the given 1-based `layer` and `head`, and must be deterministic.
pub trait DescriptorProvider: Send + Sync {
    fn descriptors(
        &self,
        image: &ImageGrid,
        layer: usize,
        head: Head,
        geometry: &PatchGridGeometry,
    ) -> Result<DescriptorGrid>;
}

/// A backbone spec plus the optional external adapter it delegates to.
#[derive(Clone)]
pub struct Backbone {
    spec: BackboneSpec,
    adapter: Option<Arc<dyn DescriptorProvider>>,
}

impl std::fmt::Debug for Backbone {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Backbone")
            .field("spec", &self.spec)
            .field("adapter", &self.adapter.is_some())
            .finish()
    }
}

impl Backbone {
    pub fn new(spec: BackboneSpec) -> Result<Self> {
        spec.validate()?;
        Ok(Self { spec, adapter: None })
    }

    pub fn spec(&self) -> &BackboneSpec {
        &self.spec
    }

    /// Routes subsequent `external-vit` extraction through `loader`.
    /// Registration is expected once, before the backbone is shared.
    pub fn register_external_adapter(&mut self, loader: Arc<dyn DescriptorProvider>) {
        self.adapter = Some(loader);
    }

    pub fn geometry(&self, height: usize, width: usize) -> Result<PatchGridGeometry> {
        grid_geometry(height, width, &self.spec)
    }

    pub fn extract_features(&self, img: &ImageGrid) -> Result<FeatureMap> {
        let geometry = self.geometry(img.height(), img.width())?;
        match self.spec.kind {
            BackboneKind::SyntheticPositional => synthetic_descriptors(img, &self.spec, &geometry),
            BackboneKind::SyntheticNoisy => {
                let mut map = synthetic_descriptors(img, &self.spec, &geometry)?;
                perturb(&mut map, img, &self.spec);
                Ok(map)
            }
            BackboneKind::ExternalVit => {
                let adapter = self.adapter.as_ref().ok_or(Error::NoBackboneAdapter)?;
                let grid = adapter.descriptors(img, self.spec.layer, self.spec.head, &geometry)?;
                let expected = (geometry.grid_h, geometry.grid_w, self.spec.dim);
                let actual = (grid.grid_h, grid.grid_w, grid.dim);
                if expected != actual || grid.data.len() != grid.grid_h * grid.grid_w * grid.dim {
                    return Err(Error::AdapterShapeMismatch { expected, actual });
                }
                FeatureMap::new(
                    grid.grid_h,
                    grid.grid_w,
                    grid.dim,
                    grid.data.iter().map(|v| f64::from(*v)).collect(),
                    geometry.transform,
                )
            }
        }
    }
}

/// Convenience wrapper for backbones without an adapter.
pub fn extract_features(img: &ImageGrid, spec: &BackboneSpec) -> Result<FeatureMap> {
    Backbone::new(spec.clone())?.extract_features(img)
}

struct Window {
    weights: Vec<f64>,
    radius: i64,
}

impl Window {
    fn gaussian(sigma: f64) -> Self {
        let radius = (3.0 * sigma).ceil() as i64;
        let mut weights: Vec<f64> = (-radius..=radius)
            .map(|d| (-(d * d) as f64 / (2.0 * sigma * sigma)).exp())
            .collect();
        let sum: f64 = weights.iter().sum();
        weights.iter_mut().for_each(|w| *w /= sum);
        Self { weights, radius }
    }
}

fn synthetic_descriptors(img: &ImageGrid, spec: &BackboneSpec, geometry: &PatchGridGeometry) -> Result<FeatureMap> {
    let (w, h) = (img.width(), img.height());
    let (gh, gw) = (geometry.grid_h, geometry.grid_w);
    let side = w.min(h) as f64;
    let mean = img.pixels().iter().sum::<f64>() / img.pixels().len() as f64;
    let centered: Vec<f64> = img.pixels().iter().map(|v| v - mean).collect();

    let cx: Vec<f64> = (0..gw).map(|c| geometry.transform.to_image(crate::Point::new(c as f64, 0.0)).x).collect();
    let cy: Vec<f64> = (0..gh).map(|r| geometry.transform.to_image(crate::Point::new(0.0, r as f64)).y).collect();

    let mut data = vec![0.0; gh * gw * SYNTHETIC_DIM];
    // Row-pass scratch: per image row and grid column, one complex value.
    let mut row_re = vec![0.0; h * gw];
    let mut row_im = vec![0.0; h * gw];
    let mut row_dc = vec![0.0; h * gw];

    for (fi, &freq) in FREQUENCIES.iter().enumerate() {
        let wavelength = side / freq;
        let sigma = wavelength / 2.0;
        let k = 2.0 * std::f64::consts::PI / wavelength;
        // Morlet correction removes the DC response of the windowed sinusoid.
        let dc_correction = (-(k * sigma).powi(2) / 2.0).exp();
        let win = Window::gaussian(sigma);

        // DC row pass (shared by all orientations).
        for y in 0..h {
            for (c, &x_c) in cx.iter().enumerate() {
                let (lo, hi) = span(x_c, win.radius, w);
                let mut acc = 0.0;
                for x in lo..hi {
                    let d = x as f64 - x_c;
                    acc += centered[y * w + x] * weight_at(&win, d);
                }
                row_dc[y * gw + c] = acc;
            }
        }

        for o in 0..ORIENTATIONS {
            let theta = o as f64 * std::f64::consts::PI / ORIENTATIONS as f64;
            let (kx, ky) = (k * theta.cos(), k * theta.sin());
            for y in 0..h {
                for (c, &x_c) in cx.iter().enumerate() {
                    let (lo, hi) = span(x_c, win.radius, w);
                    let (mut re, mut im) = (0.0, 0.0);
                    for x in lo..hi {
                        let d = x as f64 - x_c;
                        let v = centered[y * w + x] * weight_at(&win, d);
                        let (s, co) = (kx * d).sin_cos();
                        re += v * co;
                        im += v * s;
                    }
                    row_re[y * gw + c] = re;
                    row_im[y * gw + c] = im;
                }
            }
            let channel = (fi * ORIENTATIONS + o) * 2;
            for (r, &y_c) in cy.iter().enumerate() {
                let (lo, hi) = span(y_c, win.radius, h);
                for c in 0..gw {
                    let (mut re, mut im, mut dc) = (0.0, 0.0, 0.0);
                    for y in lo..hi {
                        let d = y as f64 - y_c;
                        let g = weight_at(&win, d);
                        let (s, co) = (ky * d).sin_cos();
                        let (a, b) = (row_re[y * gw + c], row_im[y * gw + c]);
                        // (a + ib) * g * (cos + i sin)
                        re += g * (a * co - b * s);
                        im += g * (a * s + b * co);
                        dc += g * row_dc[y * gw + c];
                    }
                    let base = (r * gw + c) * SYNTHETIC_DIM + channel;
                    data[base] = re - dc_correction * dc;
                    data[base + 1] = im;
                }
            }
        }
    }

    for r in 0..gh {
        for c in 0..gw {
            let (pm, pv) = img.patch_stats(c * spec.stride, r * spec.stride, spec.patch_size);
            let cell = &mut data[(r * gw + c) * SYNTHETIC_DIM..(r * gw + c + 1) * SYNTHETIC_DIM];
            cell[32] = pm - mean;
            cell[33] = VARIANCE_WEIGHT * pv;
            normalize(cell);
        }
    }
    FeatureMap::new(gh, gw, SYNTHETIC_DIM, data, geometry.transform)
}

fn span(center: f64, radius: i64, extent: usize) -> (usize, usize) {
    let lo = (center - radius as f64).ceil().max(0.0) as usize;
    let hi = ((center + radius as f64).floor() as i64 + 1).clamp(0, extent as i64) as usize;
    (lo.min(hi), hi)
}

fn weight_at(win: &Window, d: f64) -> f64 {
    // Receptive centers sit on half-pixel positions for even patches; interpolate the kernel.
    let pos = d + win.radius as f64;
    let i0 = pos.floor();
    let t = pos - i0;
    let i0 = i0 as i64;
    let at = |i: i64| -> f64 {
        if i < 0 || i as usize >= win.weights.len() {
            0.0
        } else {
            win.weights[i as usize]
        }
    };
    if t == 0.0 {
        at(i0)
    } else {
        at(i0) * (1.0 - t) + at(i0 + 1) * t
    }
}

fn normalize(v: &mut [f64]) {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm > 0.0 {
        v.iter_mut().for_each(|x| *x /= norm);
    }
}

fn perturb(map: &mut FeatureMap, img: &ImageGrid, spec: &BackboneSpec) {
    if spec.noise == 0.0 {
        return;
    }
    let checksum = img.checksum();
    let mut seed_bytes = [0u8; 8];
    seed_bytes.copy_from_slice(&checksum[..8]);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed ^ u64::from_le_bytes(seed_bytes));
    let dim = map.dim();
    let std = spec.noise / (dim as f64).sqrt();
    for cell in map.data_mut().chunks_mut(dim) {
        for v in cell.iter_mut() {
            let n: f64 = StandardNormal.sample(&mut rng);
            *v += std * n;
        }
        normalize(cell);
    }
}

const DESCRIPTOR_MAGIC: &[u8; 4] = b"OSDF";
const DESCRIPTOR_VERSION: u32 = 1;

/// Precomputed descriptors exchanged with out-of-process adapters.
///
/// Binary layout, little-endian:
///
/// | field      | type            |
/// |------------|-----------------|
/// | magic      | `b"OSDF"`       |
/// | version    | u32 (= 1)       |
/// | grid_h     | u32             |
/// | grid_w     | u32             |
/// | dim        | u32             |
/// | scale      | f64             |
/// | dx         | f64             |
/// | dy         | f64             |
/// | checksum   | 32 bytes        |
/// | data       | f32 x h*w*dim, HWC order |
#[derive(Clone, Debug, PartialEq)]
pub struct DescriptorFile {
    pub grid: DescriptorGrid,
    pub transform: CoordTransform,
    /// SHA-256 of the source image as computed by [`ImageGrid::checksum`].
    pub source_checksum: [u8; 32],
}

impl DescriptorFile {
    pub fn write_to(&self, out: &mut impl Write) -> std::io::Result<()> {
        out.write_all(DESCRIPTOR_MAGIC)?;
        out.write_u32::<LittleEndian>(DESCRIPTOR_VERSION)?;
        out.write_u32::<LittleEndian>(self.grid.grid_h as u32)?;
        out.write_u32::<LittleEndian>(self.grid.grid_w as u32)?;
        out.write_u32::<LittleEndian>(self.grid.dim as u32)?;
        out.write_f64::<LittleEndian>(self.transform.scale)?;
        out.write_f64::<LittleEndian>(self.transform.dx)?;
        out.write_f64::<LittleEndian>(self.transform.dy)?;
        out.write_all(&self.source_checksum)?;
        for v in &self.grid.data {
            out.write_f32::<LittleEndian>(*v)?;
        }
        Ok(())
    }

    pub fn read_from(input: &mut impl Read) -> Result<Self> {
        let bad = |m: &str| Error::Format(format!("descriptor file: {m}"));
        let mut magic = [0u8; 4];
        input.read_exact(&mut magic).map_err(|_| bad("truncated header"))?;
        if &magic != DESCRIPTOR_MAGIC {
            return Err(bad("bad magic"));
        }
        let rd = |input: &mut dyn Read| input.read_u32::<LittleEndian>().map_err(|_| bad("truncated header"));
        let version = rd(input)?;
        if version != DESCRIPTOR_VERSION {
            return Err(bad(&format!("unsupported version {version}")));
        }
        let grid_h = rd(input)? as usize;
        let grid_w = rd(input)? as usize;
        let dim = rd(input)? as usize;
        let mut f = || input.read_f64::<LittleEndian>().map_err(|_| bad("truncated header"));
        let transform = CoordTransform {
            scale: f()?,
            dx: f()?,
            dy: f()?,
        };
        let mut source_checksum = [0u8; 32];
        input.read_exact(&mut source_checksum).map_err(|_| bad("truncated header"))?;
        let n = grid_h
            .checked_mul(grid_w)
            .and_then(|v| v.checked_mul(dim))
            .ok_or_else(|| bad("shape overflow"))?;
        let mut data = vec![0f32; n];
        input
            .read_f32_into::<LittleEndian>(&mut data)
            .map_err(|_| bad("truncated data"))?;
        Ok(Self {
            grid: DescriptorGrid {
                grid_h,
                grid_w,
                dim,
                data,
            },
            transform,
            source_checksum,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        self.write_to(&mut w).map_err(|e| Error::io(path, e))?;
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read_from(&mut BufReader::new(file))
    }
}

/// Directory of descriptor files named `<checksum-hex>.L<layer>.<head>.osdf`.
#[derive(Clone, Debug)]
pub struct DescriptorStore {
    root: PathBuf,
}

impl DescriptorStore {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn path_for(&self, checksum: &[u8; 32], layer: usize, head: Head) -> PathBuf {
        let hex: String = checksum.iter().map(|b| format!("{b:02x}")).collect();
        self.root.join(format!("{hex}.L{layer}.{}.osdf", head.as_str()))
    }
}

impl DescriptorProvider for DescriptorStore {
    fn descriptors(
        &self,
        image: &ImageGrid,
        layer: usize,
        head: Head,
        _geometry: &PatchGridGeometry,
    ) -> Result<DescriptorGrid> {
        let checksum = image.checksum();
        let path = self.path_for(&checksum, layer, head);
        let file = DescriptorFile::load(&path)?;
        if file.source_checksum != checksum {
            return Err(Error::Format(format!("{}: checksum does not match image", path.display())));
        }
        Ok(file.grid)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::GridPoint;
    use crate::simloss::cosine_similarity_map;

    fn texture(w: usize, h: usize) -> ImageGrid {
        ImageGrid::from_fn(w, h, |x, y| {
            let (x, y) = (x as f64, y as f64);
            0.5 + 0.2 * (x * 0.21).sin() * (y * 0.13).cos()
                + 0.15 * ((x - 30.0).powi(2) + (y - 20.0).powi(2)).sqrt().mul_add(-0.05, 1.0).max(0.0)
                + 0.1 * (0.07 * (x + 2.0 * y)).sin()
        })
    }

    #[test]
    fn geometry_examples() {
        let spec = BackboneSpec::default();
        let g = grid_geometry(224, 224, &spec).unwrap();
        assert_eq!((g.grid_h, g.grid_w), (55, 55));
        assert_eq!(g.transform, CoordTransform { scale: 4.0, dx: 3.5, dy: 3.5 });
        let g = grid_geometry(8, 8, &spec).unwrap();
        assert_eq!((g.grid_h, g.grid_w), (1, 1));
        assert_eq!(grid_geometry(7, 7, &spec).unwrap_err().tag(), "image-too-small");
    }

    #[test]
    fn origin_cell_maps_to_first_patch_center() {
        let spec = BackboneSpec { patch_size: 6, stride: 3, ..Default::default() };
        let g = grid_geometry(30, 40, &spec).unwrap();
        let p = g.transform.to_image(crate::Point::new(0.0, 0.0));
        assert_eq!((p.x, p.y), (2.5, 2.5));
    }

    #[test]
    fn invalid_specs_rejected() {
        assert!(BackboneSpec { stride: 0, ..Default::default() }.validate().is_err());
        assert!(BackboneSpec { stride: 9, ..Default::default() }.validate().is_err());
        assert!(BackboneSpec { layer: 0, ..Default::default() }.validate().is_err());
        assert!(BackboneSpec { dim: 8, ..Default::default() }.validate().is_err());
        assert!(BackboneSpec { kind: BackboneKind::ExternalVit, dim: 8, ..Default::default() }
            .validate()
            .is_ok());
    }

    #[test]
    fn synthetic_map_shape_and_norm() {
        let img = texture(64, 48);
        let map = extract_features(&img, &BackboneSpec::default()).unwrap();
        assert_eq!((map.height(), map.width(), map.dim()), (11, 15, SYNTHETIC_DIM));
        assert_eq!(map.transform.scale, 4.0);
        for cell in map.data().chunks(SYNTHETIC_DIM) {
            let n: f64 = cell.iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((n - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn frozen_and_non_mutating() {
        let img = texture(40, 40);
        let before = img.clone();
        let spec = BackboneSpec::synthetic_noisy(0.2, 7);
        let a = extract_features(&img, &spec).unwrap();
        let b = extract_features(&img, &spec).unwrap();
        assert_eq!(a, b);
        assert_eq!(img, before);
    }

    #[test]
    fn self_matching_consistency() {
        let img = texture(64, 64);
        let map = extract_features(&img, &BackboneSpec::default()).unwrap();
        for linear in 0..map.cells() {
            let s = cosine_similarity_map(&map, map.vector_at(linear)).unwrap();
            let best = s
                .values()
                .iter()
                .enumerate()
                .fold(0, |b, (i, v)| if *v > s.values()[b] { i } else { b });
            assert_eq!(best, linear);
        }
    }

    #[test]
    fn noisy_descriptors_stay_close() {
        let img = texture(64, 64);
        let eps = 0.05;
        let clean = extract_features(&img, &BackboneSpec::default()).unwrap();
        let a = extract_features(&img, &BackboneSpec::synthetic_noisy(eps, 1)).unwrap();
        let b = extract_features(&img, &BackboneSpec::synthetic_noisy(eps, 2)).unwrap();
        assert_ne!(a, b);
        for i in 0..clean.cells() {
            let cos: f64 = a.vector_at(i).iter().zip(b.vector_at(i)).map(|(x, y)| x * y).sum();
            assert!(cos >= 1.0 - 4.0 * eps * eps, "cell {i}: {cos}");
            let cos0: f64 = a.vector_at(i).iter().zip(clean.vector_at(i)).map(|(x, y)| x * y).sum();
            assert!(cos0 >= 1.0 - 2.0 * eps * eps);
        }
    }

    #[test]
    fn translation_equivariance_in_interior() {
        // Shifting content by one stride moves descriptors by one cell.
        let big = texture(96, 96);
        let a = big.window(8, 8, 64, 64);
        let b = big.window(12, 8, 64, 64);
        let fa = extract_features(&a, &BackboneSpec::default()).unwrap();
        let fb = extract_features(&b, &BackboneSpec::default()).unwrap();
        let anchor = fa.vector(GridPoint::new(7, 8));
        let s = cosine_similarity_map(&fb, anchor).unwrap();
        let best = s
            .values()
            .iter()
            .enumerate()
            .fold(0, |b, (i, v)| if *v > s.values()[b] { i } else { b });
        assert_eq!(GridPoint::from_linear(best, fb.width()), GridPoint::new(7, 7));
    }

    struct Constant {
        dim: usize,
        shrink: usize,
        seen: std::sync::Mutex<Vec<(usize, Head)>>,
    }

    impl DescriptorProvider for Constant {
        fn descriptors(&self, _: &ImageGrid, layer: usize, head: Head, g: &PatchGridGeometry) -> Result<DescriptorGrid> {
            self.seen.lock().unwrap().push((layer, head));
            let h = g.grid_h - self.shrink;
            Ok(DescriptorGrid {
                grid_h: h,
                grid_w: g.grid_w,
                dim: self.dim,
                data: vec![0.5; h * g.grid_w * self.dim],
            })
        }
    }

    fn external(head: Head) -> BackboneSpec {
        BackboneSpec {
            kind: BackboneKind::ExternalVit,
            dim: 6,
            head,
            ..Default::default()
        }
    }

    #[test]
    fn external_without_adapter_errors() {
        let bb = Backbone::new(external(Head::Key)).unwrap();
        let err = bb.extract_features(&texture(32, 32)).unwrap_err();
        assert_eq!(err.tag(), "no-backbone-adapter");
    }

    #[test]
    fn adapter_passthrough_and_head_routing() {
        let adapter = Arc::new(Constant { dim: 6, shrink: 0, seen: Default::default() });
        for head in [Head::Key, Head::Token] {
            let mut bb = Backbone::new(external(head)).unwrap();
            bb.register_external_adapter(adapter.clone());
            let map = bb.extract_features(&texture(224, 224)).unwrap();
            assert_eq!((map.height(), map.width(), map.dim()), (55, 55, 6));
            assert_eq!(map.transform, CoordTransform { scale: 4.0, dx: 3.5, dy: 3.5 });
            assert!(map.data().iter().all(|v| *v == 0.5));
        }
        assert_eq!(*adapter.seen.lock().unwrap(), vec![(9, Head::Key), (9, Head::Token)]);
    }

    #[test]
    fn adapter_shape_mismatch() {
        let mut bb = Backbone::new(external(Head::Key)).unwrap();
        bb.register_external_adapter(Arc::new(Constant { dim: 6, shrink: 1, seen: Default::default() }));
        let err = bb.extract_features(&texture(224, 224)).unwrap_err();
        assert_eq!(err.tag(), "adapter-shape-mismatch");
    }

    #[test]
    fn descriptor_store_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let img = texture(40, 40);
        let spec = external(Head::Value);
        let g = grid_geometry(40, 40, &spec).unwrap();
        let n = g.grid_h * g.grid_w * 6;
        let file = DescriptorFile {
            grid: DescriptorGrid {
                grid_h: g.grid_h,
                grid_w: g.grid_w,
                dim: 6,
                data: (0..n).map(|i| i as f32 * 0.25 - 3.0).collect(),
            },
            transform: g.transform,
            source_checksum: img.checksum(),
        };
        let store = DescriptorStore::new(dir.path());
        file.save(&store.path_for(&img.checksum(), 9, Head::Value)).unwrap();

        let mut bb = Backbone::new(spec).unwrap();
        bb.register_external_adapter(Arc::new(store));
        let map = bb.extract_features(&img).unwrap();
        assert_eq!(map.data()[5], 5.0 * 0.25 - 3.0);

        let loaded = DescriptorFile::load(&DescriptorStore::new(dir.path()).path_for(&img.checksum(), 9, Head::Value))
            .unwrap();
        assert_eq!(loaded, file);
    }

    #[test]
    fn descriptor_file_rejects_garbage() {
        let mut bytes: &[u8] = b"NOPE0000";
        assert_eq!(DescriptorFile::read_from(&mut bytes).unwrap_err().tag(), "format-error");
    }
}
