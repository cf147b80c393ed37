use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::backbone::BackboneSpec;
use crate::decoders::{Upsampling, DEFAULT_OUT_DIM};
use crate::error::{Error, Result};
use crate::matching::MatchConfig;
use crate::simloss::LossKind;

/// Ranges of the random affine applied to the template during augmentation.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugRanges {
    /// Maximum translation as a fraction of the image size, per axis.
    pub shift_frac: f64,
    pub scale_min: f64,
    pub scale_max: f64,
    pub rotate_deg: f64,
}

impl Default for AugRanges {
    fn default() -> Self {
        Self {
            shift_frac: 0.10,
            scale_min: 0.9,
            scale_max: 1.1,
            rotate_deg: 10.0,
        }
    }
}

impl AugRanges {
    pub fn none() -> Self {
        Self {
            shift_frac: 0.0,
            scale_min: 1.0,
            scale_max: 1.0,
            rotate_deg: 0.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch: usize,
    pub iters_global: usize,
    pub iters_local: usize,
    pub sigma_global: f64,
    pub sigma_local: f64,
    pub aug_count: usize,
    pub aug_ranges: AugRanges,
    /// Local training crops are centered up to this many pixels away from the
    /// supervised landmark.
    pub crop_jitter: f64,
    /// Channel widths of the decoder blocks; the last one is the output dim.
    pub decoder_widths: Vec<usize>,
    pub local_upsampling: Upsampling,
    pub loss: LossKind,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::head()
    }
}

impl TrainConfig {
    pub fn head() -> Self {
        Self {
            lr: 2e-4,
            batch: 4,
            iters_global: 20000,
            iters_local: 1000,
            sigma_global: 5.0,
            sigma_local: 2.0,
            aug_count: 500,
            aug_ranges: AugRanges::default(),
            crop_jitter: 16.0,
            decoder_widths: vec![DEFAULT_OUT_DIM, DEFAULT_OUT_DIM],
            local_upsampling: Upsampling::ResizeConv,
            loss: LossKind::DistanceAware,
            seed: 0,
        }
    }

    pub fn hand() -> Self {
        Self {
            iters_local: 3000,
            sigma_global: 8.0,
            sigma_local: 8.0,
            ..Self::head()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return bad(format!("lr must be > 0, got {}", self.lr));
        }
        if self.batch < 1 || self.aug_count < 1 {
            return bad("batch and aug_count must be >= 1".into());
        }
        if !(self.sigma_global > 0.0) || !(self.sigma_local > 0.0) {
            return bad("sigma values must be > 0".into());
        }
        if !(self.crop_jitter >= 0.0) {
            return bad("crop_jitter must be >= 0".into());
        }
        if self.decoder_widths.is_empty() || self.decoder_widths.contains(&0) {
            return bad("decoder_widths must be non-empty and >= 1".into());
        }
        let r = &self.aug_ranges;
        if !(r.shift_frac >= 0.0) || !(r.rotate_deg >= 0.0) || !(r.scale_min > 0.0) || r.scale_max < r.scale_min {
            return bad(format!("invalid augmentation ranges {r:?}"));
        }
        if let LossKind::Contrastive { temperature } = self.loss {
            if !(temperature > 0.0) {
                return bad("contrastive temperature must be > 0".into());
            }
        }
        Ok(())
    }
}

/// Everything that determines training and detection.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub backbone: BackboneSpec,
    pub train: TrainConfig,
    pub matching: MatchConfig,
    /// Short side of the downsampled image seen by the global stage.
    pub short_side: usize,
    /// Side of the square full-resolution crop seen by the local stage.
    pub crop_size: usize,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self::head()
    }
}

impl PipelineConfig {
    pub fn head() -> Self {
        Self {
            backbone: BackboneSpec::default(),
            train: TrainConfig::head(),
            matching: MatchConfig { k: 3 },
            short_side: 224,
            crop_size: 224,
        }
    }

    pub fn hand() -> Self {
        Self {
            train: TrainConfig::hand(),
            matching: MatchConfig { k: 5 },
            ..Self::head()
        }
    }

    /// Desk-scale settings for the procedural benchmark: small images, narrow
    /// decoders and short schedules.
    pub fn synthetic() -> Self {
        Self {
            backbone: BackboneSpec::synthetic_noisy(0.45, 7),
            train: TrainConfig {
                iters_global: 300,
                iters_local: 150,
                sigma_global: 2.0,
                sigma_local: 3.0,
                aug_count: 64,
                crop_jitter: 12.0,
                lr: 2e-3,
                decoder_widths: vec![24, 24],
                ..TrainConfig::head()
            },
            matching: MatchConfig { k: 3 },
            short_side: 64,
            crop_size: 48,
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "head" => Ok(Self::head()),
            "hand" => Ok(Self::hand()),
            "synthetic" => Ok(Self::synthetic()),
            other => Err(Error::InvalidArgument(format!(
                "unknown preset '{other}' (expected head, hand or synthetic)"
            ))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        self.train.validate()?;
        if self.matching.k < 1 {
            return Err(Error::InvalidArgument("k must be >= 1".into()));
        }
        if self.short_side < self.backbone.patch_size || self.crop_size < self.backbone.patch_size {
            return Err(Error::InvalidArgument(format!(
                "short_side ({}) and crop_size ({}) must be >= patch size {}",
                self.short_side, self.crop_size, self.backbone.patch_size
            )));
        }
        Ok(())
    }

    /// Hex SHA-256 of the canonical JSON encoding.
    pub fn digest(&self) -> String {
        digest_json(self)
    }
}

/// Hex SHA-256 of the JSON encoding of `value`.
pub fn digest_json<T: Serialize>(value: &T) -> String {
    let json = serde_json::to_vec(value).expect("config serializes");
    let hash = Sha256::digest(&json);
    hash.iter().map(|b| format!("{b:02x}")).collect()
}
