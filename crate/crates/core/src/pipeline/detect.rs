use serde::{Deserialize, Serialize};

use crate::backbone::Backbone;
use crate::decoders::{fuse_features, global_decode, global_region, local_decode, DecoderParams, Stage};
use crate::error::{Error, Result};
use crate::features::{FeatureMap, SimilarityMap};
use crate::geometry::{snap_to_grid, CoordTransform, GridPoint, LandmarkSet, Point};
use crate::matching::{argmax_result, bdm_match, MatchResult};
use crate::raster::{crop_local_region, downsample_short_side, ImageGrid};
use crate::simloss::cosine_similarity_map;

use super::config::PipelineConfig;
use super::train::{train_decoders, LossHistory};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Matching {
    Argmax,
    Bdm,
}

/// How much of the pipeline runs.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stages {
    /// Match raw backbone descriptors of the downsampled images.
    Raw,
    /// Match globally decoded features (coarse only).
    Global,
    /// Coarse global match refined by fused local features.
    GlobalLocal,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DetectOptions {
    pub matching: Matching,
    pub stages: Stages,
}

impl Default for DetectOptions {
    fn default() -> Self {
        Self {
            matching: Matching::Bdm,
            stages: Stages::GlobalLocal,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectionResult {
    /// Final predictions in original query pixels.
    pub points: Vec<Point>,
    /// Coarse predictions in original query pixels.
    pub coarse: Vec<Point>,
    pub coarse_matches: Vec<MatchResult>,
    /// Empty unless the local stage ran.
    pub fine_matches: Vec<MatchResult>,
}

/// Fused local template features around one landmark.
#[derive(Clone, Debug, PartialEq)]
struct LocalTemplate {
    fused: FeatureMap,
    anchor: GridPoint,
}

/// Template-side features cached after training. Grid-to-image transforms of
/// the stored maps point into original template pixels.
#[derive(Clone, Debug, PartialEq)]
pub struct TemplateState {
    template: ImageGrid,
    landmarks: LandmarkSet,
    raw: FeatureMap,
    raw_anchors: Vec<GridPoint>,
    global: FeatureMap,
    global_anchors: Vec<GridPoint>,
    local: Vec<LocalTemplate>,
}

impl TemplateState {
    pub fn template(&self) -> &ImageGrid {
        &self.template
    }

    pub fn landmarks(&self) -> &LandmarkSet {
        &self.landmarks
    }

    pub fn global_features(&self) -> &FeatureMap {
        &self.global
    }

    pub fn global_anchors(&self) -> &[GridPoint] {
        &self.global_anchors
    }
}

fn snap_all(lms: &LandmarkSet, f: &FeatureMap) -> Vec<GridPoint> {
    lms.points
        .iter()
        .map(|p| snap_to_grid(f.transform.to_feature(*p), f.height(), f.width()))
        .collect()
}

fn clamp_to_image(p: Point, img: &ImageGrid) -> Point {
    Point::new(
        p.x.clamp(0.0, (img.width() - 1) as f64),
        p.y.clamp(0.0, (img.height() - 1) as f64),
    )
}

/// Trained decoders plus template state: everything needed to detect.
#[derive(Clone, Debug)]
pub struct Detector {
    backbone: Backbone,
    config: PipelineConfig,
    global: DecoderParams,
    local: DecoderParams,
    state: TemplateState,
}

/// Features of one downsampled query image.
struct QueryFeatures {
    raw: FeatureMap,
    global: Option<FeatureMap>,
}

impl Detector {
    /// Trains both decoders on `template` and caches the template state.
    pub fn train(backbone: Backbone, config: PipelineConfig, template: ImageGrid, lms: LandmarkSet) -> Result<(Self, LossHistory)> {
        let trained = train_decoders(&template, &lms, &backbone, &config)?;
        let det = Self::new(backbone, config, trained.global, trained.local, template, lms)?;
        Ok((det, trained.history))
    }

    pub fn new(
        backbone: Backbone,
        config: PipelineConfig,
        global: DecoderParams,
        local: DecoderParams,
        template: ImageGrid,
        landmarks: LandmarkSet,
    ) -> Result<Self> {
        Self::build(backbone, config, global, local, template, landmarks, None)
    }

    /// As [`Detector::new`], reusing previously computed global template
    /// features instead of decoding them again.
    pub(crate) fn build(
        backbone: Backbone,
        config: PipelineConfig,
        global: DecoderParams,
        local: DecoderParams,
        template: ImageGrid,
        landmarks: LandmarkSet,
        cached_global: Option<FeatureMap>,
    ) -> Result<Self> {
        config.validate()?;
        if global.stage != Stage::Global || local.stage != Stage::Local {
            return Err(Error::InvalidArgument("decoder stages are swapped".into()));
        }
        if global.in_dim != backbone.spec().dim || local.in_dim != backbone.spec().dim {
            return Err(Error::InvalidArgument(format!(
                "decoders expect {} / {} input channels, backbone produces {}",
                global.in_dim,
                local.in_dim,
                backbone.spec().dim
            )));
        }
        landmarks.check_bounds(template.height(), template.width())?;
        let mut det = Self {
            backbone,
            config,
            global,
            local,
            state: TemplateState {
                template: template.clone(),
                landmarks: landmarks.clone(),
                raw: FeatureMap::zeros(1, 1, 1),
                raw_anchors: Vec::new(),
                global: FeatureMap::zeros(1, 1, 1),
                global_anchors: Vec::new(),
                local: Vec::new(),
            },
        };
        let q = det.query_features(&template, true)?;
        let global_map = match cached_global {
            Some(g) => g,
            None => q.global.expect("global features requested"),
        };
        det.state.raw_anchors = snap_all(&landmarks, &q.raw);
        det.state.raw = q.raw;
        det.state.global_anchors = snap_all(&landmarks, &global_map);
        det.state.global = global_map;
        det.state.local = landmarks
            .points
            .iter()
            .map(|p| {
                let (fused, crop_tf) = det.fused_crop(&template, *p, &det.state.global)?;
                let local_p = crop_tf.to_feature(*p);
                let anchor = snap_to_grid(local_p, fused.height(), fused.width());
                Ok(LocalTemplate { fused, anchor })
            })
            .collect::<Result<_>>()?;
        Ok(det)
    }

    pub fn config(&self) -> &PipelineConfig {
        &self.config
    }

    pub fn backbone(&self) -> &Backbone {
        &self.backbone
    }

    pub fn global_decoder(&self) -> &DecoderParams {
        &self.global
    }

    pub fn local_decoder(&self) -> &DecoderParams {
        &self.local
    }

    pub fn state(&self) -> &TemplateState {
        &self.state
    }

    pub fn landmark_count(&self) -> usize {
        self.state.landmarks.len()
    }

    fn query_features(&self, img: &ImageGrid, decode: bool) -> Result<QueryFeatures> {
        let (ds, to_orig) = downsample_short_side(img, self.config.short_side);
        let raw = self.backbone.extract_features(&ds)?;
        let global = if decode {
            Some(global_decode(&raw, &self.global, ds.height(), ds.width())?.with_transform(to_orig))
        } else {
            None
        };
        let raw_tf = raw.transform.then(&to_orig);
        Ok(QueryFeatures {
            raw: raw.with_transform(raw_tf),
            global,
        })
    }

    /// Local features of the crop around `center`, fused with the matching
    /// region of `global`. The returned transform maps crop to image pixels.
    fn fused_crop(&self, img: &ImageGrid, center: Point, global: &FeatureMap) -> Result<(FeatureMap, CoordTransform)> {
        let size = self.config.crop_size;
        let (crop, crop_tf) = crop_local_region(img, center, size);
        let f = self.backbone.extract_features(&crop)?;
        let local = local_decode(&f, &self.local, size, size)?.with_transform(crop_tf);
        let region = global_region(global, &global.transform, &crop_tf, size, size);
        Ok((fuse_features(&local, &region)?, crop_tf))
    }

    fn match_one(&self, f_t: &FeatureMap, f_q: &FeatureMap, anchor: GridPoint, matching: Matching) -> Result<MatchResult> {
        match matching {
            Matching::Argmax => argmax_result(f_t, f_q, anchor),
            Matching::Bdm => bdm_match(f_t, f_q, anchor, &self.config.matching),
        }
    }

    fn coarse_from(&self, q: &QueryFeatures, query: &ImageGrid, opts: &DetectOptions) -> Result<(Vec<Point>, Vec<MatchResult>)> {
        let (f_t, f_q, anchors) = match (opts.stages, &q.global) {
            (Stages::Raw, _) => (&self.state.raw, &q.raw, &self.state.raw_anchors),
            (_, Some(g)) => (&self.state.global, g, &self.state.global_anchors),
            (_, None) => unreachable!("global features are computed for decoded stages"),
        };
        let mut points = Vec::with_capacity(anchors.len());
        let mut matches = Vec::with_capacity(anchors.len());
        for &a in anchors {
            let m = self.match_one(f_t, f_q, a, opts.matching)?;
            points.push(clamp_to_image(f_q.transform.to_image(m.query_point.to_point()), query));
            matches.push(m);
        }
        Ok((points, matches))
    }

    /// Coarse predictions (original query pixels) with per-landmark diagnostics.
    pub fn coarse_detect(&self, query: &ImageGrid, opts: &DetectOptions) -> Result<(Vec<Point>, Vec<MatchResult>)> {
        let q = self.query_features(query, opts.stages != Stages::Raw)?;
        self.coarse_from(&q, query, opts)
    }

    fn fine_from(&self, query: &ImageGrid, global_q: &FeatureMap, coarse: &[Point], matching: Matching) -> Result<(Vec<Point>, Vec<MatchResult>)> {
        if coarse.len() != self.state.local.len() {
            return Err(Error::InvalidArgument(format!(
                "expected {} coarse points, got {}",
                self.state.local.len(),
                coarse.len()
            )));
        }
        let mut points = Vec::with_capacity(coarse.len());
        let mut matches = Vec::with_capacity(coarse.len());
        for (pc, t) in coarse.iter().zip(&self.state.local) {
            let (fused_q, crop_tf) = self.fused_crop(query, *pc, global_q)?;
            let m = self.match_one(&t.fused, &fused_q, t.anchor, matching)?;
            points.push(clamp_to_image(crop_tf.to_image(m.query_point.to_point()), query));
            matches.push(m);
        }
        Ok((points, matches))
    }

    /// Refines coarse predictions with fused local features.
    pub fn fine_detect(&self, query: &ImageGrid, coarse: &[Point], matching: Matching) -> Result<(Vec<Point>, Vec<MatchResult>)> {
        let q = self.query_features(query, true)?;
        self.fine_from(query, q.global.as_ref().expect("decoded"), coarse, matching)
    }

    pub fn detect(&self, query: &ImageGrid) -> Result<DetectionResult> {
        self.detect_with(query, &DetectOptions::default())
    }

    pub fn detect_with(&self, query: &ImageGrid, opts: &DetectOptions) -> Result<DetectionResult> {
        let q = self.query_features(query, opts.stages != Stages::Raw)?;
        let (coarse, coarse_matches) = self.coarse_from(&q, query, opts)?;
        if opts.stages != Stages::GlobalLocal {
            return Ok(DetectionResult {
                points: coarse.clone(),
                coarse,
                coarse_matches,
                fine_matches: Vec::new(),
            });
        }
        let global_q = q.global.as_ref().expect("decoded");
        let (points, fine_matches) = self.fine_from(query, global_q, &coarse, opts.matching)?;
        Ok(DetectionResult {
            points,
            coarse,
            coarse_matches,
            fine_matches,
        })
    }

    /// Cosine similarity of every decoded query pixel to each template
    /// landmark feature, on the downsampled query grid, plus the transform
    /// from that grid to original query pixels.
    pub fn global_similarity_maps(&self, query: &ImageGrid) -> Result<(Vec<SimilarityMap>, CoordTransform)> {
        let q = self.query_features(query, true)?;
        let g = q.global.expect("decoded");
        let maps = self
            .state
            .global_anchors
            .iter()
            .enumerate()
            .map(|(i, a)| Ok(cosine_similarity_map(&g, self.state.global.vector(*a))?.for_landmark(i)))
            .collect::<Result<_>>()?;
        Ok((maps, g.transform))
    }
}
