//! Ablation sweeps: train once per distinct (loss, head, layer) setting and
//! evaluate every requested matching/stage variant on a dataset.

use std::fmt::Write as _;
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::backbone::{Backbone, DescriptorProvider, Head};
use crate::error::{Error, Result};
use crate::evaldata::{evaluate, Dataset, EvalReport, WithOptions};
use crate::pipeline::{DetectOptions, Detector, Matching, PipelineConfig, Stages};
use crate::simloss::{LossKind, DEFAULT_TEMPERATURE};

/// One configuration to evaluate.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Variant {
    pub label: String,
    pub matching: Matching,
    pub stages: Stages,
    pub loss: LossKind,
    pub head: Head,
    pub layer: usize,
}

impl Variant {
    fn from_base(label: &str, base: &PipelineConfig, matching: Matching, stages: Stages) -> Self {
        Self {
            label: label.to_string(),
            matching,
            stages,
            loss: base.train.loss,
            head: base.backbone.head,
            layer: base.backbone.layer,
        }
    }

    fn training_key(&self) -> (LossKind, Head, usize) {
        (self.loss, self.head, self.layer)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationGrid {
    pub variants: Vec<Variant>,
}

impl AblationGrid {
    /// argmax/raw, BDM/raw, BDM/global, BDM/global+local.
    pub fn stages(base: &PipelineConfig) -> Self {
        let v = |l, m, s| Variant::from_base(l, base, m, s);
        Self {
            variants: vec![
                v("argmax-raw", Matching::Argmax, Stages::Raw),
                v("bdm-raw", Matching::Bdm, Stages::Raw),
                v("bdm-global", Matching::Bdm, Stages::Global),
                v("bdm-global-local", Matching::Bdm, Stages::GlobalLocal),
            ],
        }
    }

    /// The three supervision losses, compared on the global stage.
    pub fn losses(base: &PipelineConfig) -> Self {
        let losses = [
            LossKind::DistanceAware,
            LossKind::OnehotMse,
            LossKind::Contrastive {
                temperature: DEFAULT_TEMPERATURE,
            },
        ];
        Self {
            variants: losses
                .into_iter()
                .map(|loss| Variant {
                    loss,
                    ..Variant::from_base(loss.name(), base, Matching::Bdm, Stages::Global)
                })
                .collect(),
        }
    }

    /// Full pipeline with each of the four descriptor heads. Heads only change
    /// descriptors produced by external adapters.
    pub fn heads(base: &PipelineConfig) -> Self {
        Self {
            variants: Head::ALL
                .into_iter()
                .map(|head| Variant {
                    head,
                    ..Variant::from_base(head.as_str(), base, Matching::Bdm, Stages::GlobalLocal)
                })
                .collect(),
        }
    }

    pub fn layers(base: &PipelineConfig, layers: &[usize]) -> Self {
        Self {
            variants: layers
                .iter()
                .map(|&layer| Variant {
                    layer,
                    ..Variant::from_base(&format!("layer-{layer}"), base, Matching::Bdm, Stages::GlobalLocal)
                })
                .collect(),
        }
    }

    pub fn by_name(name: &str, base: &PipelineConfig, layers: &[usize]) -> Result<Self> {
        match name {
            "stages" => Ok(Self::stages(base)),
            "losses" => Ok(Self::losses(base)),
            "heads" => Ok(Self::heads(base)),
            "layers" => Ok(Self::layers(base, layers)),
            other => Err(Error::InvalidArgument(format!(
                "unknown ablation grid '{other}' (expected stages, losses, heads or layers)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: Variant,
    pub mre_mm: f64,
    pub sdr_pct: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub thresholds_mm: Vec<f64>,
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    pub fn row(&self, label: &str) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.variant.label == label)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("label,matching,stages,loss,head,layer,mre_mm");
        for t in &self.thresholds_mm {
            let _ = write!(out, ",sdr_{t}");
        }
        out.push('\n');
        for r in &self.rows {
            let v = &r.variant;
            let _ = write!(
                out,
                "{},{},{},{},{},{},{}",
                v.label,
                matching_name(v.matching),
                stages_name(v.stages),
                v.loss.name(),
                v.head.as_str(),
                v.layer,
                r.mre_mm
            );
            for s in &r.sdr_pct {
                let _ = write!(out, ",{s}");
            }
            out.push('\n');
        }
        out
    }

    pub fn to_markdown(&self) -> String {
        let mut out = String::from("| configuration | MRE (mm) |");
        for t in &self.thresholds_mm {
            let _ = write!(out, " SDR {t} mm (%) |");
        }
        out.push_str("\n|---|---:|");
        out.push_str(&"---:|".repeat(self.thresholds_mm.len()));
        out.push('\n');
        for r in &self.rows {
            let _ = write!(out, "| {} | {:.3} |", r.variant.label, r.mre_mm);
            for s in &r.sdr_pct {
                let _ = write!(out, " {s:.2} |");
            }
            out.push('\n');
        }
        out
    }

    /// Writes `<stem>.csv` and `<stem>.md` into `dir`.
    pub fn save(&self, dir: &Path, stem: &str) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for (ext, body) in [("csv", self.to_csv()), ("md", self.to_markdown())] {
            let path = dir.join(format!("{stem}.{ext}"));
            std::fs::write(&path, body).map_err(|e| Error::io(&path, e))?;
        }
        Ok(())
    }
}

fn matching_name(m: Matching) -> &'static str {
    match m {
        Matching::Argmax => "argmax",
        Matching::Bdm => "bdm",
    }
}

fn stages_name(s: Stages) -> &'static str {
    match s {
        Stages::Raw => "raw",
        Stages::Global => "global",
        Stages::GlobalLocal => "global-local",
    }
}

/// Trains one detector per distinct (loss, head, layer) in `grid` and
/// evaluates each variant on the test split of `dataset`. Local decoders are
/// only trained when some variant sharing that detector needs them.
pub fn run_ablation(
    dataset: &Dataset,
    base: &PipelineConfig,
    grid: &AblationGrid,
    thresholds_mm: &[f64],
    adapter: Option<Arc<dyn DescriptorProvider>>,
) -> Result<AblationTable> {
    if grid.variants.is_empty() {
        return Err(Error::InvalidArgument("ablation grid is empty".into()));
    }
    let mut rows: Vec<Option<AblationRow>> = vec![None; grid.variants.len()];
    let mut done = vec![false; grid.variants.len()];
    for i in 0..grid.variants.len() {
        if done[i] {
            continue;
        }
        let key = grid.variants[i].training_key();
        let group: Vec<usize> = (i..grid.variants.len())
            .filter(|&j| !done[j] && grid.variants[j].training_key() == key)
            .collect();
        let mut config = base.clone();
        config.train.loss = key.0;
        config.backbone.head = key.1;
        config.backbone.layer = key.2;
        if group.iter().all(|&j| grid.variants[j].stages != Stages::GlobalLocal) {
            config.train.iters_local = 0;
        }
        let mut backbone = Backbone::new(config.backbone.clone())?;
        if let Some(a) = &adapter {
            backbone.register_external_adapter(a.clone());
        }
        log::info!("ablation: training for {} / {} / layer {}", key.0.name(), key.1.as_str(), key.2);
        let (detector, _) = Detector::train(
            backbone,
            config,
            dataset.template.image.clone(),
            dataset.template.landmarks.clone(),
        )?;
        for j in group {
            let v = &grid.variants[j];
            let opts = DetectOptions {
                matching: v.matching,
                stages: v.stages,
            };
            let report: EvalReport = evaluate(dataset, &WithOptions(&detector, opts), thresholds_mm)?;
            log::info!("ablation: {} MRE {:.4}", v.label, report.mre_mm);
            rows[j] = Some(AblationRow {
                variant: v.clone(),
                mre_mm: report.mre_mm,
                sdr_pct: report.sdr_pct.clone(),
            });
            done[j] = true;
        }
    }
    Ok(AblationTable {
        thresholds_mm: thresholds_mm.to_vec(),
        rows: rows.into_iter().map(|r| r.expect("every variant evaluated")).collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_shapes() {
        let base = PipelineConfig::synthetic();
        assert_eq!(AblationGrid::stages(&base).variants.len(), 4);
        let losses = AblationGrid::losses(&base);
        assert_eq!(losses.variants.len(), 3);
        assert!(losses.variants.iter().all(|v| v.stages == Stages::Global));
        let heads: Vec<Head> = AblationGrid::heads(&base).variants.iter().map(|v| v.head).collect();
        assert_eq!(heads, Head::ALL.to_vec());
        let layers = AblationGrid::layers(&base, &[3, 9, 12]);
        assert_eq!(layers.variants.iter().map(|v| v.layer).collect::<Vec<_>>(), vec![3, 9, 12]);
        assert!(AblationGrid::by_name("bogus", &base, &[]).is_err());
    }

    #[test]
    fn table_output() {
        let base = PipelineConfig::synthetic();
        let grid = AblationGrid::stages(&base);
        let table = AblationTable {
            thresholds_mm: vec![1.0, 2.0],
            rows: grid
                .variants
                .iter()
                .enumerate()
                .map(|(i, v)| AblationRow {
                    variant: v.clone(),
                    mre_mm: 4.0 - i as f64,
                    sdr_pct: vec![10.0, 20.0],
                })
                .collect(),
        };
        let csv = table.to_csv();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines.len(), 5);
        assert_eq!(lines[0], "label,matching,stages,loss,head,layer,mre_mm,sdr_1,sdr_2");
        assert_eq!(lines[1], "argmax-raw,argmax,raw,distance-aware,key,9,4,10,20");
        let md = table.to_markdown();
        assert!(md.contains("| bdm-global-local | 1.000 | 10.00 | 20.00 |"));
        assert_eq!(table.row("bdm-raw").unwrap().mre_mm, 3.0);
    }
}
