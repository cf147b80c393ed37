use log::{debug, info};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::Backbone;
use crate::decoders::{init_decoder_with, init_decoder_with_widths, loss_and_gradient, Adam, DecoderParams, Stage};
use crate::error::{Error, Result};
use crate::features::FeatureMap;
use crate::geometry::{in_bounds, snap_to_grid, GridPoint, LandmarkSet, Point};
use crate::raster::{crop_origin, downsample_short_side, ImageGrid};

use super::augment::{draw_augmentations, Affine};
use super::config::PipelineConfig;

/// Per-step training losses (batch means).
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossHistory {
    pub global: Vec<f64>,
    pub local: Vec<f64>,
}

impl LossHistory {
    /// Mean of the last `n` entries of a loss curve.
    pub fn tail_mean(values: &[f64], n: usize) -> Option<f64> {
        let n = n.min(values.len());
        (n > 0).then(|| values[values.len() - n..].iter().sum::<f64>() / n as f64)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainedDecoders {
    pub global: DecoderParams,
    pub local: DecoderParams,
    pub history: LossHistory,
}

struct GlobalSample {
    features: FeatureMap,
    anchors: Vec<GridPoint>,
    height: usize,
    width: usize,
}

fn global_sample(template: &ImageGrid, lms: &LandmarkSet, a: &Affine, backbone: &Backbone, short_side: usize) -> Result<GlobalSample> {
    let warped = a.warp(template);
    let (ds, to_orig) = downsample_short_side(&warped, short_side);
    let features = backbone.extract_features(&ds)?;
    let anchors = lms
        .points
        .iter()
        .map(|p| snap_to_grid(to_orig.to_feature(a.apply(*p)), ds.height(), ds.width()))
        .collect();
    Ok(GlobalSample {
        features,
        anchors,
        height: ds.height(),
        width: ds.width(),
    })
}

/// Trains the global then the local decoder on augmentations of the template.
/// The backbone is only read.
pub fn train_decoders(
    template: &ImageGrid,
    lms: &LandmarkSet,
    backbone: &Backbone,
    cfg: &PipelineConfig,
) -> Result<TrainedDecoders> {
    cfg.validate()?;
    lms.check_bounds(template.height(), template.width())?;
    let tc = &cfg.train;
    let in_dim = backbone.spec().dim;
    let mut global = init_decoder_with_widths(Stage::Global, in_dim, &tc.decoder_widths, tc.seed)?;
    let mut local = init_decoder_with(
        Stage::Local,
        tc.local_upsampling,
        in_dim,
        &tc.decoder_widths,
        tc.seed.wrapping_add(1),
    )?;
    let mut history = LossHistory::default();
    let mut rng = ChaCha8Rng::seed_from_u64(tc.seed);
    let affines = draw_augmentations(&mut rng, &tc.aug_ranges, template.width(), template.height(), lms, tc.aug_count)?;

    if tc.iters_global > 0 {
        info!("training global decoder for {} steps", tc.iters_global);
        let mut cache: Vec<Option<GlobalSample>> = (0..affines.len()).map(|_| None).collect();
        let mut opt = Adam::new(tc.lr, global.param_count());
        for step in 0..tc.iters_global {
            let mut grad = vec![0.0; global.param_count()];
            let mut loss = 0.0;
            for _ in 0..tc.batch {
                let j = rng.gen_range(0..affines.len());
                if cache[j].is_none() {
                    cache[j] = Some(global_sample(template, lms, &affines[j], backbone, cfg.short_side)?);
                }
                let s = cache[j].as_ref().expect("filled above");
                let (l, g) = loss_and_gradient(&global, &s.features, s.height, s.width, &s.anchors, tc.sigma_global, &tc.loss)?;
                loss += l;
                grad.iter_mut().zip(&g).for_each(|(a, b)| *a += b);
            }
            let scale = 1.0 / tc.batch as f64;
            loss *= scale;
            if !loss.is_finite() {
                return Err(Error::TrainingDiverged { stage: "global", step });
            }
            grad.iter_mut().for_each(|g| *g *= scale);
            opt.step(&mut global.weights, &grad);
            history.global.push(loss);
            if step % 100 == 0 {
                debug!("global step {step}: loss {loss:.6}");
            }
        }
    }

    if tc.iters_local > 0 {
        info!("training local decoder for {} steps", tc.iters_local);
        let size = cfg.crop_size;
        let jitter = tc.crop_jitter.min((size as f64 - 1.0) / 2.0);
        let mut opt = Adam::new(tc.lr, local.param_count());
        for step in 0..tc.iters_local {
            let mut grad = vec![0.0; local.param_count()];
            let mut loss = 0.0;
            for _ in 0..tc.batch {
                let a = &affines[rng.gen_range(0..affines.len())];
                let lm = a.apply(lms.points[rng.gen_range(0..lms.len())]);
                let (origin, anchor) = loop {
                    let (jx, jy) = if jitter > 0.0 {
                        (rng.gen_range(-jitter..=jitter), rng.gen_range(-jitter..=jitter))
                    } else {
                        (0.0, 0.0)
                    };
                    let center = Point::new(lm.x + jx, lm.y + jy);
                    let origin = crop_origin(center, size, template.width(), template.height());
                    let local_lm = Point::new(lm.x - origin.0 as f64, lm.y - origin.1 as f64);
                    if in_bounds(local_lm, size, size) {
                        break (origin, snap_to_grid(local_lm, size, size));
                    }
                };
                let crop = a.warp_window(template, origin, size);
                let features = backbone.extract_features(&crop)?;
                let (l, g) = loss_and_gradient(&local, &features, size, size, &[anchor], tc.sigma_local, &tc.loss)?;
                loss += l;
                grad.iter_mut().zip(&g).for_each(|(a, b)| *a += b);
            }
            let scale = 1.0 / tc.batch as f64;
            loss *= scale;
            if !loss.is_finite() {
                return Err(Error::TrainingDiverged { stage: "local", step });
            }
            grad.iter_mut().for_each(|g| *g *= scale);
            opt.step(&mut local.weights, &grad);
            history.local.push(loss);
            if step % 100 == 0 {
                debug!("local step {step}: loss {loss:.6}");
            }
        }
    }

    Ok(TrainedDecoders { global, local, history })
}
