use std::io::{Read, Write};
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::backbone::{Backbone, DescriptorProvider};
use crate::decoders::DecoderCheckpoint;
use crate::error::{Error, Result};
use crate::features::FeatureMap;
use crate::geometry::{GridPoint, LandmarkSet};
use crate::raster::ImageGrid;

use super::config::PipelineConfig;
use super::detect::Detector;

const MAGIC: &[u8; 4] = b"OSTB";
const VERSION: u32 = 1;

/// On-disk trained state: configuration (including the backbone spec), both
/// decoder checkpoints, the template with its landmarks, and the cached
/// global template features with their snapped landmark cells.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainedBundle {
    #[serde(with = "json_text")]
    pub config: PipelineConfig,
    pub global: DecoderCheckpoint,
    pub local: DecoderCheckpoint,
    pub template: ImageGrid,
    pub landmarks: LandmarkSet,
    pub global_features: FeatureMap,
    pub global_anchors: Vec<GridPoint>,
    pub config_digest: String,
}

impl TrainedBundle {
    pub fn from_detector(det: &Detector) -> Self {
        let digest = det.config().digest();
        let state = det.state();
        Self {
            config: det.config().clone(),
            global: DecoderCheckpoint::new(det.global_decoder().clone(), digest.clone()),
            local: DecoderCheckpoint::new(det.local_decoder().clone(), digest.clone()),
            template: state.template().clone(),
            landmarks: state.landmarks().clone(),
            global_features: state.global_features().clone(),
            global_anchors: state.global_anchors().to_vec(),
            config_digest: digest,
        }
    }

    /// Rebuilds a detector. External backbones need their adapter passed in.
    pub fn into_detector(self, adapter: Option<Arc<dyn DescriptorProvider>>) -> Result<Detector> {
        let mut backbone = Backbone::new(self.config.backbone.clone())?;
        if let Some(a) = adapter {
            backbone.register_external_adapter(a);
        }
        let det = Detector::build(
            backbone,
            self.config,
            self.global.params,
            self.local.params,
            self.template,
            self.landmarks,
            Some(self.global_features),
        )?;
        if det.state().global_anchors() != self.global_anchors.as_slice() {
            return Err(Error::Format("bundle landmark cells disagree with its features".into()));
        }
        Ok(det)
    }

    pub fn write_to(&self, out: &mut impl Write) -> Result<()> {
        out.write_all(MAGIC)
            .and_then(|_| out.write_all(&VERSION.to_le_bytes()))
            .map_err(|e| Error::Format(e.to_string()))?;
        bincode::serialize_into(out, self).map_err(|e| Error::Format(e.to_string()))
    }

    pub fn read_from(input: &mut impl Read) -> Result<Self> {
        let mut head = [0u8; 8];
        input
            .read_exact(&mut head)
            .map_err(|e| Error::Format(format!("truncated bundle: {e}")))?;
        if &head[..4] != MAGIC {
            return Err(Error::Format("not a trained bundle".into()));
        }
        let version = u32::from_le_bytes(head[4..].try_into().expect("4 bytes"));
        if version != VERSION {
            return Err(Error::Format(format!("unsupported bundle version {version}")));
        }
        let b: TrainedBundle = bincode::deserialize_from(input).map_err(|e| Error::Format(e.to_string()))?;
        b.global.params.validate()?;
        b.local.params.validate()?;
        Ok(b)
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

/// The configuration holds tagged enums, which a non-self-describing binary
/// format cannot decode, so it is embedded as JSON text.
mod json_text {
    use serde::de::Error as _;
    use serde::ser::Error as _;
    use serde::{Deserialize, Deserializer, Serializer};

    use crate::pipeline::PipelineConfig;

    pub fn serialize<S: Serializer>(c: &PipelineConfig, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&serde_json::to_string(c).map_err(S::Error::custom)?)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<PipelineConfig, D::Error> {
        let text = String::deserialize(d)?;
        serde_json::from_str(&text).map_err(D::Error::custom)
    }
}
