//! Trainable global and local feature decoders.
//!
//! A decoder is a stack of resolution-doubling blocks, either `bilinear x2 ->
//! conv3x3` (the default for both stages) or stride-2 transposed
//! convolutions, followed by an exact bilinear resize to the requested size.
//! ReLU sits between blocks but not after the last one.
//!
//! Transposed convolutions learn one kernel per output phase, which lets them
//! encode the position of a pixel relative to the backbone patch grid. Local
//! features then match by grid phase instead of content whenever template and
//! query crops are offset by a non-multiple of the stride, so they are only
//! available as an explicit option.

pub(crate) mod ops;
mod optim;

use std::io::{Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::FeatureMap;
use crate::geometry::{CoordTransform, GridPoint, Point};
use crate::simloss::{cosine_map_backward, self_similarity_map, LossKind};
use ops::{Taps, Tensor};

pub use optim::Adam;

/// Output channels of the decoders under the default configuration.
pub const DEFAULT_OUT_DIM: usize = 256;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stage {
    Global,
    Local,
}

impl Stage {
    pub fn as_str(&self) -> &'static str {
        match self {
            Stage::Global => "global",
            Stage::Local => "local",
        }
    }
}

/// How a decoder block doubles spatial resolution.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Upsampling {
    /// Bilinear x2 followed by a 3x3 convolution.
    #[default]
    ResizeConv,
    /// Stride-2 transposed convolution with a 4x4 kernel.
    Transposed,
}

#[derive(Clone, Copy, Debug)]
enum Layer {
    Up2,
    Conv3 { cin: usize, cout: usize, offset: usize },
    ConvT4 { cin: usize, cout: usize, offset: usize },
    Relu,
}

impl Layer {
    fn weight_len(cin: usize, cout: usize, taps: usize) -> usize {
        taps * cin * cout + cout
    }
}

/// Weights and architecture of one decoder. All weights live in one flat
/// vector; the layer table is derived from `stage`, `in_dim` and `widths`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecoderParams {
    pub stage: Stage,
    #[serde(default)]
    pub upsampling: Upsampling,
    pub in_dim: usize,
    pub widths: Vec<usize>,
    pub seed: u64,
    pub weights: Vec<f64>,
}

fn layer_plan(upsampling: Upsampling, in_dim: usize, widths: &[usize]) -> (Vec<Layer>, usize) {
    let mut layers = Vec::new();
    let mut offset = 0;
    let mut cin = in_dim;
    for (i, &cout) in widths.iter().enumerate() {
        if i > 0 {
            layers.push(Layer::Relu);
        }
        match upsampling {
            Upsampling::ResizeConv => {
                layers.push(Layer::Up2);
                layers.push(Layer::Conv3 { cin, cout, offset });
                offset += Layer::weight_len(cin, cout, 9);
            }
            Upsampling::Transposed => {
                layers.push(Layer::ConvT4 { cin, cout, offset });
                offset += Layer::weight_len(cin, cout, 16);
            }
        }
        cin = cout;
    }
    (layers, offset)
}

/// Taps of a stride-2 transposed convolution that performs bilinear x2
/// upsampling (pixel-center aligned).
const BILINEAR_X2: [f64; 4] = [0.25, 0.75, 0.75, 0.25];

/// Decoder with two blocks of `out_dim` channels each.
pub fn init_decoder(stage: Stage, in_dim: usize, out_dim: usize, seed: u64) -> Result<DecoderParams> {
    init_decoder_with_widths(stage, in_dim, &[out_dim, out_dim], seed)
}

/// Decoder with one block per entry of `widths`; the last entry is the
/// output dimension.
pub fn init_decoder_with_widths(stage: Stage, in_dim: usize, widths: &[usize], seed: u64) -> Result<DecoderParams> {
    init_decoder_with(stage, Upsampling::default(), in_dim, widths, seed)
}

pub fn init_decoder_with(
    stage: Stage,
    upsampling: Upsampling,
    in_dim: usize,
    widths: &[usize],
    seed: u64,
) -> Result<DecoderParams> {
    if in_dim == 0 || widths.is_empty() || widths.contains(&0) {
        return Err(Error::InvalidArgument(format!(
            "decoder dims must be >= 1 (in_dim {in_dim}, widths {widths:?})"
        )));
    }
    let (layers, total) = layer_plan(upsampling, in_dim, widths);
    let mut weights = vec![0.0; total];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for layer in &layers {
        match *layer {
            Layer::Conv3 { cin, cout, offset } => {
                let bound = (6.0 / (9 * cin) as f64).sqrt();
                for w in &mut weights[offset..offset + 9 * cin * cout] {
                    *w = rng.gen_range(-bound..bound);
                }
            }
            Layer::ConvT4 { cin, cout, offset } => {
                // Bilinear x2 kernel times a random channel mix, so every
                // output phase starts from the same smooth interpolation.
                let bound = (6.0 / cin as f64).sqrt();
                let mix: Vec<f64> = (0..cin * cout).map(|_| rng.gen_range(-bound..bound)).collect();
                for ci in 0..cin {
                    for ky in 0..4 {
                        for kx in 0..4 {
                            let k = BILINEAR_X2[ky] * BILINEAR_X2[kx];
                            for co in 0..cout {
                                weights[offset + ci * 16 * cout + (ky * 4 + kx) * cout + co] = k * mix[ci * cout + co];
                            }
                        }
                    }
                }
            }
            _ => {}
        }
    }
    Ok(DecoderParams {
        stage,
        upsampling,
        in_dim,
        widths: widths.to_vec(),
        seed,
        weights,
    })
}

/// Intermediate activations of one forward pass, kept for backpropagation.
pub(crate) struct Trace {
    inputs: Vec<Tensor>,
    pre_resize: (usize, usize),
    resize: (Taps, Taps),
}

impl DecoderParams {
    pub fn out_dim(&self) -> usize {
        *self.widths.last().expect("widths validated non-empty")
    }

    pub fn param_count(&self) -> usize {
        self.weights.len()
    }

    fn layers(&self) -> Vec<Layer> {
        layer_plan(self.upsampling, self.in_dim, &self.widths).0
    }

    /// Checks that the weight vector matches the declared architecture and
    /// holds only finite values.
    pub fn validate(&self) -> Result<()> {
        if self.in_dim == 0 || self.widths.is_empty() || self.widths.contains(&0) {
            return Err(Error::Format("decoder widths must be >= 1".into()));
        }
        let (_, total) = layer_plan(self.upsampling, self.in_dim, &self.widths);
        if total != self.weights.len() {
            return Err(Error::Format(format!(
                "decoder expects {total} weights, found {}",
                self.weights.len()
            )));
        }
        if self.weights.iter().any(|w| !w.is_finite()) {
            return Err(Error::Format("decoder weights must be finite".into()));
        }
        Ok(())
    }

    fn check_input(&self, f: &FeatureMap, out_h: usize, out_w: usize) -> Result<()> {
        if f.dim() != self.in_dim {
            return Err(Error::InvalidArgument(format!(
                "{} decoder expects {} input channels, got {}",
                self.stage.as_str(),
                self.in_dim,
                f.dim()
            )));
        }
        if out_h < f.height() || out_w < f.width() {
            return Err(Error::InvalidUpsampleTarget {
                input: (f.height(), f.width()),
                target: (out_h, out_w),
            });
        }
        Ok(())
    }

    pub(crate) fn forward(&self, f: &FeatureMap, out_h: usize, out_w: usize, keep: bool) -> Result<(Tensor, Option<Trace>)> {
        self.check_input(f, out_h, out_w)?;
        let mut x = Tensor {
            h: f.height(),
            w: f.width(),
            c: f.dim(),
            data: f.data().to_vec(),
        };
        let mut inputs = Vec::new();
        for layer in self.layers() {
            let y = match layer {
                Layer::Up2 => {
                    let ty = Taps::resize(x.h, 2 * x.h);
                    let tx = Taps::resize(x.w, 2 * x.w);
                    ops::bilinear_forward(&x, &ty, &tx)
                }
                Layer::Conv3 { cin, cout, offset } => {
                    let (w, b) = self.conv_weights(offset, 9 * cin, cout);
                    ops::conv3_forward(&x, w, &b[..cout], cout)
                }
                Layer::ConvT4 { cin, cout, offset } => {
                    let (w, b) = self.conv_weights(offset, cin, 16 * cout);
                    ops::convt4_forward(&x, w, &b[..cout], cout)
                }
                Layer::Relu => ops::relu_forward(&x),
            };
            if keep {
                inputs.push(x);
            }
            x = y;
        }
        let pre_resize = (x.h, x.w);
        let resize = (Taps::resize(x.h, out_h), Taps::resize(x.w, out_w));
        let out = ops::bilinear_forward(&x, &resize.0, &resize.1);
        let trace = keep.then_some(Trace {
            inputs,
            pre_resize,
            resize,
        });
        Ok((out, trace))
    }

    /// Weight matrix (`rows x cols`, row-major) and everything after it; the
    /// bias is the head of the second slice.
    fn conv_weights(&self, offset: usize, rows: usize, cols: usize) -> (&[f64], &[f64]) {
        let n = rows * cols;
        (&self.weights[offset..offset + n], &self.weights[offset + n..])
    }

    /// Accumulates the weight gradient of a forward pass into `grad`, given
    /// the gradient w.r.t. the decoder output.
    pub(crate) fn backward(&self, trace: &Trace, d_out: Tensor, grad: &mut [f64]) {
        let (ph, pw) = trace.pre_resize;
        let mut g = ops::bilinear_backward(ph, pw, &d_out, &trace.resize.0, &trace.resize.1);
        let layers = self.layers();
        for (layer, x) in layers.iter().zip(&trace.inputs).rev() {
            g = match *layer {
                Layer::Up2 => {
                    let ty = Taps::resize(x.h, 2 * x.h);
                    let tx = Taps::resize(x.w, 2 * x.w);
                    ops::bilinear_backward(x.h, x.w, &g, &ty, &tx)
                }
                Layer::Conv3 { cin, cout, offset } => {
                    let n = 9 * cin * cout;
                    let (gw, gb) = grad[offset..offset + n + cout].split_at_mut(n);
                    ops::conv3_backward(x, &self.weights[offset..offset + n], cout, &g, gw, gb)
                }
                Layer::ConvT4 { cin, cout, offset } => {
                    let n = 16 * cin * cout;
                    let (gw, gb) = grad[offset..offset + n + cout].split_at_mut(n);
                    ops::convt4_backward(x, &self.weights[offset..offset + n], cout, &g, gw, gb)
                }
                Layer::Relu => ops::relu_backward(x, &g),
            };
        }
    }

    fn decode(&self, f: &FeatureMap, out_h: usize, out_w: usize) -> Result<FeatureMap> {
        let (out, _) = self.forward(f, out_h, out_w, false)?;
        FeatureMap::new(out.h, out.w, out.c, out.data, CoordTransform::identity())
    }
}

fn expect_stage(p: &DecoderParams, stage: Stage) -> Result<()> {
    if p.stage != stage {
        return Err(Error::InvalidArgument(format!(
            "expected a {} decoder, got a {} decoder",
            stage.as_str(),
            p.stage.as_str()
        )));
    }
    Ok(())
}

/// Decodes whole-image backbone features to `target_h x target_w`. The output
/// is per-pixel in downsampled-image coordinates (identity transform).
pub fn global_decode(f: &FeatureMap, p: &DecoderParams, target_h: usize, target_w: usize) -> Result<FeatureMap> {
    expect_stage(p, Stage::Global)?;
    p.decode(f, target_h, target_w)
}

/// Decodes crop backbone features to `crop_h x crop_w`, in crop coordinates.
pub fn local_decode(f: &FeatureMap, p: &DecoderParams, crop_h: usize, crop_w: usize) -> Result<FeatureMap> {
    expect_stage(p, Stage::Local)?;
    p.decode(f, crop_h, crop_w)
}

/// Elementwise sum of a local map and a global region, after bilinearly
/// resizing the region to the local map's size. Keeps the local transform.
pub fn fuse_features(local: &FeatureMap, global_region: &FeatureMap) -> Result<FeatureMap> {
    if local.dim() != global_region.dim() {
        return Err(Error::FuseDimMismatch {
            local: local.dim(),
            global: global_region.dim(),
        });
    }
    let mut data = local.data().to_vec();
    if (global_region.height(), global_region.width()) == (local.height(), local.width()) {
        for (d, g) in data.iter_mut().zip(global_region.data()) {
            *d += g;
        }
    } else {
        let src = Tensor {
            h: global_region.height(),
            w: global_region.width(),
            c: global_region.dim(),
            data: global_region.data().to_vec(),
        };
        let ty = Taps::resize(src.h, local.height());
        let tx = Taps::resize(src.w, local.width());
        let resized = ops::bilinear_forward(&src, &ty, &tx);
        for (d, g) in data.iter_mut().zip(&resized.data) {
            *d += g;
        }
    }
    FeatureMap::new(local.height(), local.width(), local.dim(), data, local.transform)
}

/// Samples `global` (whose grid maps to image space through `global_to_image`)
/// at every pixel of an `h x w` crop whose pixels map to the same image space
/// through `crop_to_image`. This is the global sub-window under the crop,
/// bilinearly resized to the crop's size. Positions outside the global grid
/// are clamped to its border.
pub fn global_region(
    global: &FeatureMap,
    global_to_image: &CoordTransform,
    crop_to_image: &CoordTransform,
    h: usize,
    w: usize,
) -> FeatureMap {
    let project = |p: Point| global_to_image.to_feature(crop_to_image.to_image(p));
    let ty = Taps::from_positions((0..h).map(|v| project(Point::new(0.0, v as f64)).y), global.height());
    let tx = Taps::from_positions((0..w).map(|u| project(Point::new(u as f64, 0.0)).x), global.width());
    let src = Tensor {
        h: global.height(),
        w: global.width(),
        c: global.dim(),
        data: global.data().to_vec(),
    };
    let out = ops::bilinear_forward(&src, &ty, &tx);
    FeatureMap::new(h, w, global.dim(), out.data, *crop_to_image).expect("resampled finite features")
}

/// Loss of a decoded map summed over landmark anchors (averaged), and its
/// gradient w.r.t. the decoder weights. Each anchor's similarity map is the
/// cosine map of the decoded features against the decoded feature at that
/// anchor.
pub fn loss_and_gradient(
    p: &DecoderParams,
    f: &FeatureMap,
    out_h: usize,
    out_w: usize,
    anchors: &[GridPoint],
    sigma: f64,
    loss: &LossKind,
) -> Result<(f64, Vec<f64>)> {
    if anchors.is_empty() {
        return Err(Error::InvalidArgument("at least one anchor is required".into()));
    }
    let (out, trace) = p.forward(f, out_h, out_w, true)?;
    let trace = trace.expect("trace requested");
    let decoded = FeatureMap::new(out.h, out.w, out.c, out.data, CoordTransform::identity())?;
    let mut d_feat = vec![0.0; decoded.data().len()];
    let mut total = 0.0;
    let scale = 1.0 / anchors.len() as f64;
    for &a in anchors {
        if !decoded.contains(a) {
            return Err(Error::CenterOutOfBounds {
                x: a.col as f64,
                y: a.row as f64,
                height: out_h,
                width: out_w,
            });
        }
        let s = self_similarity_map(&decoded, a)?;
        let (l, mut g) = loss.map_loss(&s, a, sigma)?;
        total += l * scale;
        g.iter_mut().for_each(|v| *v *= scale);
        cosine_map_backward(&decoded, a, &g, &mut d_feat)?;
    }
    let mut grad = vec![0.0; p.weights.len()];
    let d_out = Tensor {
        h: decoded.height(),
        w: decoded.width(),
        c: decoded.dim(),
        data: d_feat,
    };
    p.backward(&trace, d_out, &mut grad);
    Ok((total, grad))
}

const CHECKPOINT_MAGIC: &[u8; 4] = b"OSDC";
const CHECKPOINT_VERSION: u32 = 1;

/// Decoder plus the digest of the training configuration that produced it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecoderCheckpoint {
    pub params: DecoderParams,
    pub out_dim: usize,
    pub config_digest: String,
}

impl DecoderCheckpoint {
    pub fn new(params: DecoderParams, config_digest: impl Into<String>) -> Self {
        Self {
            out_dim: params.out_dim(),
            params,
            config_digest: config_digest.into(),
        }
    }

    pub fn write_to(&self, out: &mut impl Write) -> Result<()> {
        out.write_all(CHECKPOINT_MAGIC)
            .and_then(|_| out.write_all(&CHECKPOINT_VERSION.to_le_bytes()))
            .map_err(|e| Error::Format(e.to_string()))?;
        bincode::serialize_into(out, self).map_err(|e| Error::Format(e.to_string()))
    }

    pub fn read_from(input: &mut impl Read) -> Result<Self> {
        let mut head = [0u8; 8];
        input
            .read_exact(&mut head)
            .map_err(|e| Error::Format(format!("truncated checkpoint: {e}")))?;
        if &head[..4] != CHECKPOINT_MAGIC {
            return Err(Error::Format("not a decoder checkpoint".into()));
        }
        let version = u32::from_le_bytes(head[4..].try_into().expect("4 bytes"));
        if version != CHECKPOINT_VERSION {
            return Err(Error::Format(format!("unsupported checkpoint version {version}")));
        }
        let ck: DecoderCheckpoint = bincode::deserialize_from(input).map_err(|e| Error::Format(e.to_string()))?;
        ck.params.validate()?;
        if ck.out_dim != ck.params.out_dim() {
            return Err(Error::Format("checkpoint out_dim disagrees with widths".into()));
        }
        Ok(ck)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = std::io::BufWriter::new(file);
        self.write_to(&mut w)?;
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read_from(&mut std::io::BufReader::new(file))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn features(h: usize, w: usize, d: usize, seed: u64) -> FeatureMap {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..h * w * d).map(|_| rng.gen_range(-1.0..1.0)).collect();
        FeatureMap::new(h, w, d, data, CoordTransform::identity()).unwrap()
    }

    #[test]
    fn init_is_seeded() {
        let a = init_decoder(Stage::Global, 8, 16, 3).unwrap();
        let b = init_decoder(Stage::Global, 8, 16, 3).unwrap();
        let c = init_decoder(Stage::Global, 8, 16, 4).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.weights, c.weights);
        assert_eq!(a.out_dim(), 16);
        assert!(a.validate().is_ok());
    }

    #[test]
    fn default_width_is_256() {
        let p = init_decoder(Stage::Local, 4, DEFAULT_OUT_DIM, 0).unwrap();
        assert_eq!(p.out_dim(), 256);
        assert_eq!(p.param_count(), 9 * 4 * 256 + 256 + 9 * 256 * 256 + 256);
        let t = init_decoder_with(Stage::Local, Upsampling::Transposed, 4, &[256, 256], 0).unwrap();
        assert_eq!(t.param_count(), 16 * 4 * 256 + 256 + 16 * 256 * 256 + 256);
    }

    #[test]
    fn zero_dims_rejected() {
        assert!(init_decoder(Stage::Global, 0, 4, 0).is_err());
        assert!(init_decoder(Stage::Global, 4, 0, 0).is_err());
    }

    #[test]
    fn output_sizes_are_exact() {
        let g = init_decoder_with_widths(Stage::Global, 3, &[4, 5], 1).unwrap();
        let l = init_decoder_with_widths(Stage::Local, 3, &[4, 5], 1).unwrap();
        let t = init_decoder_with(Stage::Local, Upsampling::Transposed, 3, &[4, 5], 1).unwrap();
        let f = features(7, 9, 3, 2);
        for (h, w) in [(28, 36), (30, 41), (7, 9), (29, 29)] {
            let out = global_decode(&f, &g, h, w).unwrap();
            assert_eq!((out.height(), out.width(), out.dim()), (h, w, 5));
            for p in [&l, &t] {
                let out = local_decode(&f, p, h, w).unwrap();
                assert_eq!((out.height(), out.width(), out.dim()), (h, w, 5));
            }
        }
    }

    #[test]
    fn output_transform_is_identity() {
        let g = init_decoder_with_widths(Stage::Global, 3, &[4], 1).unwrap();
        let out = global_decode(&features(5, 5, 3, 0), &g, 20, 20).unwrap();
        let p = out.transform.to_image(Point::new(0.0, 0.0));
        assert_eq!(p, Point::new(0.0, 0.0));
    }

    #[test]
    fn smaller_target_rejected() {
        let g = init_decoder_with_widths(Stage::Global, 3, &[4], 1).unwrap();
        let err = global_decode(&features(8, 8, 3, 0), &g, 7, 16).unwrap_err();
        assert_eq!(err.tag(), "invalid-upsample-target");
        let l = init_decoder_with_widths(Stage::Local, 3, &[4], 1).unwrap();
        assert_eq!(local_decode(&features(8, 8, 3, 0), &l, 16, 4).unwrap_err().tag(), "invalid-upsample-target");
    }

    #[test]
    fn stage_mismatch_rejected() {
        let g = init_decoder_with_widths(Stage::Global, 3, &[4], 1).unwrap();
        assert!(local_decode(&features(4, 4, 3, 0), &g, 8, 8).is_err());
    }

    #[test]
    fn zero_weights_give_constant_bias() {
        for up in [Upsampling::ResizeConv, Upsampling::Transposed] {
            let mut l = init_decoder_with(Stage::Local, up, 3, &[4, 2], 1).unwrap();
            l.weights.iter_mut().for_each(|w| *w = 0.0);
            let n = l.weights.len();
            l.weights[n - 2] = 0.25;
            l.weights[n - 1] = -1.5;
            let out = local_decode(&features(4, 5, 3, 9), &l, 16, 20).unwrap();
            for px in out.data().chunks_exact(2) {
                assert_eq!(px, &[0.25, -1.5]);
            }
        }
    }

    #[test]
    fn decode_leaves_input_untouched_and_is_deterministic() {
        let f = features(6, 6, 3, 5);
        let before = f.clone();
        let g = init_decoder_with_widths(Stage::Global, 3, &[4, 4], 7).unwrap();
        let a = global_decode(&f, &g, 24, 24).unwrap();
        let b = global_decode(&f, &g, 24, 24).unwrap();
        assert_eq!(f, before);
        assert_eq!(a, b);
    }

    #[test]
    fn perturbing_a_weight_changes_output() {
        let f = features(5, 5, 3, 5);
        let mut g = init_decoder_with_widths(Stage::Global, 3, &[4, 4], 7).unwrap();
        let a = global_decode(&f, &g, 20, 20).unwrap();
        g.weights[3] += 0.1;
        let b = global_decode(&f, &g, 20, 20).unwrap();
        assert_ne!(a, b);
    }

    /// Fully random weights (biases included) so no decoded pixel collapses
    /// to the zero vector, where cosine similarity is discontinuous.
    fn random_decoder(stage: Stage, up: Upsampling, seed: u64) -> DecoderParams {
        let mut p = init_decoder_with(stage, up, 3, &[4, 5], seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabc);
        p.weights.iter_mut().for_each(|w| *w = rng.gen_range(-0.5..0.5));
        p
    }

    fn check_gradient(p: &DecoderParams, f: &FeatureMap, out: (usize, usize), anchors: &[GridPoint], loss: LossKind) {
        let (_, grad) = loss_and_gradient(p, f, out.0, out.1, anchors, 2.0, &loss).unwrap();
        let obj = |w: &[f64]| {
            let mut q = p.clone();
            q.weights.copy_from_slice(w);
            loss_and_gradient(&q, f, out.0, out.1, anchors, 2.0, &loss).unwrap().0
        };
        let mut worst: f64 = 0.0;
        for i in (0..p.weights.len()).step_by(7) {
            let h = 1e-5;
            let mut wp = p.weights.clone();
            wp[i] += h;
            let mut wm = p.weights.clone();
            wm[i] -= h;
            let fd = (obj(&wp) - obj(&wm)) / (2.0 * h);
            let rel = (fd - grad[i]).abs() / fd.abs().max(grad[i].abs()).max(1e-6);
            worst = worst.max(rel);
        }
        assert!(worst < 1e-4, "worst relative error {worst}");
    }

    #[test]
    fn global_gradient_matches_finite_differences() {
        let p = random_decoder(Stage::Global, Upsampling::ResizeConv, 11);
        let f = features(3, 4, 3, 12);
        let anchors = [GridPoint::new(2, 3), GridPoint::new(9, 10)];
        check_gradient(&p, &f, (13, 15), &anchors, LossKind::DistanceAware);
    }

    #[test]
    fn local_gradient_matches_finite_differences() {
        let f = features(3, 3, 3, 14);
        for up in [Upsampling::ResizeConv, Upsampling::Transposed] {
            let p = random_decoder(Stage::Local, up, 13);
            check_gradient(&p, &f, (12, 12), &[GridPoint::new(6, 5)], LossKind::DistanceAware);
            check_gradient(&p, &f, (12, 12), &[GridPoint::new(6, 5)], LossKind::OnehotMse);
            check_gradient(&p, &f, (12, 12), &[GridPoint::new(6, 5)], LossKind::Contrastive { temperature: 0.5 });
        }
    }

    #[test]
    fn fuse_identities() {
        let a = features(4, 4, 3, 1);
        let zero = FeatureMap::zeros(4, 4, 3);
        assert_eq!(fuse_features(&a, &zero).unwrap().data(), a.data());
        assert_eq!(fuse_features(&zero, &a).unwrap().data(), a.data());
        let b = features(4, 4, 3, 2);
        assert_eq!(fuse_features(&a, &b).unwrap().data(), fuse_features(&b, &a).unwrap().data());
    }

    #[test]
    fn fuse_resizes_global_region() {
        let local = FeatureMap::zeros(8, 8, 2);
        let region = FeatureMap::new(1, 1, 2, vec![0.5, -2.0], CoordTransform::identity()).unwrap();
        let fused = fuse_features(&local, &region).unwrap();
        for px in fused.data().chunks_exact(2) {
            assert_eq!(px, &[0.5, -2.0]);
        }
        let bad = FeatureMap::zeros(8, 8, 3);
        assert_eq!(fuse_features(&local, &bad).unwrap_err().tag(), "fuse-dim-mismatch");
    }

    #[test]
    fn global_region_follows_geometry() {
        // global grid at half resolution of image space
        let g = FeatureMap::new(
            4,
            4,
            1,
            (0..16).map(|i| (i % 4) as f64).collect(),
            CoordTransform::identity(),
        )
        .unwrap();
        let g_to_img = CoordTransform::new(2.0, 0.5, 0.5).unwrap();
        let crop = CoordTransform::translation(2.5, 0.5);
        let r = global_region(&g, &g_to_img, &crop, 2, 2);
        // crop pixel (0,0) -> image (2.5, 0.5) -> global (1.0, 0.0)
        assert!((r.data()[0] - 1.0).abs() < 1e-12);
        // crop pixel (1,0) -> image (3.5, 0.5) -> global (1.5, 0.0)
        assert!((r.data()[1] - 1.5).abs() < 1e-12);
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let p = init_decoder_with(Stage::Local, Upsampling::Transposed, 5, &[6, 7], 99).unwrap();
        let ck = DecoderCheckpoint::new(p, "abc123");
        let mut buf = Vec::new();
        ck.write_to(&mut buf).unwrap();
        let back = DecoderCheckpoint::read_from(&mut buf.as_slice()).unwrap();
        assert_eq!(back, ck);
        assert!(back
            .params
            .weights
            .iter()
            .zip(&ck.params.weights)
            .all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn checkpoint_rejects_garbage() {
        assert_eq!(DecoderCheckpoint::read_from(&mut &b"nope"[..]).unwrap_err().tag(), "format-error");
        assert_eq!(DecoderCheckpoint::read_from(&mut &b"OSDC\x01\0\0\0zz"[..]).unwrap_err().tag(), "format-error");
    }
}
