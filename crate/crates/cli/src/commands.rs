use std::path::{Path, PathBuf};
use std::sync::Arc;

use log::{info, warn};
use oneshot_landmarks::ablation::{run_ablation, AblationGrid};
use oneshot_landmarks::backbone::{Backbone, DescriptorProvider, DescriptorStore};
use oneshot_landmarks::evaldata::{
    evaluate as run_evaluation, load_dataset, read_annotations, read_annotations_any, thresholds_for, write_annotations,
    DatasetManifest,
};
use oneshot_landmarks::pipeline::{Detector, LossHistory, TrainedBundle};
use oneshot_landmarks::synth::{generate, write_dataset, SynthParams};
use oneshot_landmarks::{ImageGrid, Point};
use serde::Serialize;

use crate::config::{read_config_value, resolve, write_record, Overrides, RunConfig};
use crate::error::CliError;
use crate::viz;
use crate::ConfigArgs;

fn adapter(descriptors: Option<PathBuf>) -> Option<Arc<dyn DescriptorProvider>> {
    descriptors.map(|d| Arc::new(DescriptorStore::new(d)) as Arc<dyn DescriptorProvider>)
}

fn overrides(cfg: &ConfigArgs, manifest: Option<PathBuf>) -> Overrides {
    Overrides {
        preset: cfg.preset.clone(),
        manifest,
        out: cfg.out.clone(),
        seed: cfg.seed,
        k: cfg.k,
        backbone: cfg.backbone.clone(),
    }
}

fn require_file(path: &Path, what: &str) -> Result<(), CliError> {
    if path.is_file() {
        Ok(())
    } else {
        Err(CliError::Validation(format!("{what} not found: {}", path.display())))
    }
}

fn create_dir(dir: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))
}

fn write_loss_history(path: &Path, h: &LossHistory) -> Result<(), CliError> {
    let mut text = String::from("stage,step,loss\n");
    for (stage, values) in [("global", &h.global), ("local", &h.local)] {
        for (i, v) in values.iter().enumerate() {
            text.push_str(&format!("{stage},{i},{v}\n"));
        }
    }
    std::fs::write(path, text).map_err(|e| CliError::io(path, e))
}

/// Path of the template image a manifest points at.
fn manifest_template_image(manifest_path: &Path) -> Result<PathBuf, CliError> {
    let m = DatasetManifest::load(manifest_path)?;
    let base = manifest_path.parent().unwrap_or(Path::new("."));
    Ok(base.join(&m.image_dir).join(format!("{}.{}", m.template, m.image_ext)))
}

pub fn train(
    cfg: &ConfigArgs,
    manifest: Option<PathBuf>,
    template: Option<PathBuf>,
    landmarks: Option<PathBuf>,
) -> Result<(), CliError> {
    let rc = resolve("train", cfg.config.as_deref(), &overrides(cfg, manifest))?;
    let (image, lms) = match (&template, &landmarks, &rc.manifest) {
        (Some(t), Some(l), _) => {
            require_file(t, "template image")?;
            require_file(l, "landmark file")?;
            (ImageGrid::load(t)?, read_annotations_any(l)?)
        }
        (None, None, Some(m)) => {
            require_file(m, "manifest")?;
            require_file(&manifest_template_image(m)?, "template image")?;
            let ds = load_dataset(m)?;
            (ds.template.image, ds.template.landmarks)
        }
        _ => {
            return Err(CliError::Validation(
                "train needs --manifest, or --template together with --landmarks".into(),
            ))
        }
    };
    let mut backbone = Backbone::new(rc.pipeline.backbone.clone())?;
    if let Some(a) = adapter(cfg.descriptors.clone()) {
        backbone.register_external_adapter(a);
    }
    info!(
        "training {} landmarks for {}/{} iterations",
        lms.len(),
        rc.pipeline.train.iters_global,
        rc.pipeline.train.iters_local
    );
    let (det, history) = Detector::train(backbone, rc.pipeline.clone(), image, lms)?;
    create_dir(&rc.out)?;
    let bundle_path = rc.out.join("model.bundle");
    TrainedBundle::from_detector(&det).save(&bundle_path)?;
    write_loss_history(&rc.out.join("loss_history.csv"), &history)?;
    rc.write_beside_outputs()?;
    println!("wrote {}", bundle_path.display());
    Ok(())
}

fn load_detector(bundle: &Path, k: Option<usize>, descriptors: Option<PathBuf>) -> Result<Detector, CliError> {
    require_file(bundle, "bundle")?;
    let mut b = TrainedBundle::load(bundle)?;
    if let Some(k) = k {
        b.config.matching.k = k;
    }
    Ok(b.into_detector(adapter(descriptors))?)
}

fn bundle_run_config(command: &str, preset: &str, det: &Detector, manifest: Option<PathBuf>, out: PathBuf) -> RunConfig {
    RunConfig {
        command: command.into(),
        preset: preset.into(),
        pipeline: det.config().clone(),
        manifest,
        out,
        seed: det.config().train.seed,
    }
}

fn collect_images(inputs: &[PathBuf]) -> Vec<PathBuf> {
    let mut out = Vec::new();
    for p in inputs {
        if p.is_dir() {
            let mut found: Vec<PathBuf> = std::fs::read_dir(p)
                .map(|rd| rd.filter_map(|e| e.ok().map(|e| e.path())).collect())
                .unwrap_or_default();
            found.retain(|f| f.extension().is_some_and(|e| e.eq_ignore_ascii_case("png")));
            found.sort();
            out.extend(found);
        } else {
            out.push(p.clone());
        }
    }
    out
}

fn write_viz(det: &Detector, img: &ImageGrid, points: &[Point], truth: Option<&[Point]>, dir: &Path, stem: &str) -> Result<(), CliError> {
    viz::save(&viz::overlay(img, points, truth), &dir.join(format!("{stem}_overlay.png")))?;
    let (maps, _) = det.global_similarity_maps(img)?;
    for (i, m) in maps.iter().enumerate() {
        viz::save(&viz::heatmap(m), &dir.join(format!("{stem}_heatmap_{i}.png")))?;
    }
    Ok(())
}

pub fn detect(
    bundle: &Path,
    inputs: &[PathBuf],
    annotations: Option<&Path>,
    k: Option<usize>,
    descriptors: Option<PathBuf>,
    viz: bool,
    out: PathBuf,
) -> Result<(), CliError> {
    let det = load_detector(bundle, k, descriptors)?;
    create_dir(&out)?;
    let images = collect_images(inputs);
    if images.is_empty() {
        return Err(CliError::Validation("no input images".into()));
    }
    let mut skipped = 0;
    for path in &images {
        let stem = path.file_stem().map_or_else(|| "image".into(), |s| s.to_string_lossy().into_owned());
        let img = match ImageGrid::load(path) {
            Ok(img) => img,
            Err(e) => {
                warn!("skipping {}: {e}", path.display());
                skipped += 1;
                continue;
            }
        };
        let result = det.detect(&img)?;
        write_annotations(&out.join(format!("{stem}.csv")), &result.points)?;
        if viz {
            let truth = match annotations.map(|d| d.join(format!("{stem}.csv"))) {
                Some(p) if p.is_file() => Some(read_annotations(&p, det.landmark_count())?.points),
                _ => None,
            };
            write_viz(&det, &img, &result.points, truth.as_deref(), &out, &stem)?;
        }
        info!("{}: {} landmarks", path.display(), result.points.len());
    }
    bundle_run_config("detect", "bundle", &det, None, out).write_beside_outputs()?;
    if skipped > 0 {
        return Err(CliError::Runtime(format!("{skipped} of {} images could not be read", images.len())));
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
pub fn evaluate(
    bundle: &Path,
    manifest: &Path,
    preset: &str,
    thresholds: Option<Vec<f64>>,
    k: Option<usize>,
    descriptors: Option<PathBuf>,
    viz: bool,
    out: PathBuf,
) -> Result<(), CliError> {
    let thresholds = match thresholds {
        Some(t) => t,
        None => thresholds_for(preset)?,
    };
    require_file(manifest, "manifest")?;
    let det = load_detector(bundle, k, descriptors)?;
    let ds = load_dataset(manifest)?;
    let report = run_evaluation(&ds, &det, &thresholds)?;
    create_dir(&out)?;
    report.save(&out, "report")?;
    if viz {
        let dir = out.join("viz");
        create_dir(&dir)?;
        for s in &ds.test {
            let points = det.detect(&s.image)?.points;
            write_viz(&det, &s.image, &points, Some(&s.landmarks.points), &dir, &s.id)?;
        }
    }
    bundle_run_config("evaluate", preset, &det, Some(manifest.to_path_buf()), out).write_beside_outputs()?;
    println!("MRE {:.4} mm over {} points", report.mre_mm, report.per_point.len());
    for (t, p) in report.thresholds_mm.iter().zip(&report.sdr_pct) {
        println!("SDR < {t} mm: {p:.2}%");
    }
    Ok(())
}

pub fn ablate(
    cfg: &ConfigArgs,
    manifest: Option<PathBuf>,
    grids: &[String],
    layers: &[usize],
    thresholds: Option<Vec<f64>>,
) -> Result<(), CliError> {
    let rc = resolve("ablate", cfg.config.as_deref(), &overrides(cfg, manifest))?;
    let grids: Vec<(String, AblationGrid)> = grids
        .iter()
        .map(|g| AblationGrid::by_name(g, &rc.pipeline, layers).map(|grid| (g.clone(), grid)))
        .collect::<Result<_, _>>()?;
    let thresholds = match thresholds {
        Some(t) => t,
        None => thresholds_for(&rc.preset)?,
    };
    let manifest = match &rc.manifest {
        Some(m) => {
            require_file(m, "manifest")?;
            m.clone()
        }
        None => {
            let dir = rc.out.join("dataset");
            let params = SynthParams {
                queries: 50,
                ..SynthParams::default()
            };
            info!("generating synthetic benchmark in {}", dir.display());
            write_dataset(&dir, "synthetic", &generate(&params)?, params.spacing_mm)?;
            dir.join("manifest.json")
        }
    };
    let ds = load_dataset(&manifest)?;
    create_dir(&rc.out)?;
    for (name, grid) in &grids {
        let table = run_ablation(&ds, &rc.pipeline, grid, &thresholds, adapter(cfg.descriptors.clone()))?;
        table.save(&rc.out, &format!("ablation_{name}"))?;
        println!("{}", table.to_markdown());
    }
    rc.write_beside_outputs()?;
    Ok(())
}

#[derive(Serialize)]
struct SynthRecord<'a> {
    command: &'static str,
    name: &'a str,
    params: &'a SynthParams,
}

pub fn synth(
    config: Option<&Path>,
    seed: Option<u64>,
    queries: Option<usize>,
    landmarks: Option<usize>,
    name: &str,
    out: &Path,
) -> Result<(), CliError> {
    let mut params = match config {
        Some(path) => serde_json::from_value(read_config_value(path)?)
            .map_err(|e| CliError::Validation(format!("{}: {e}", path.display())))?,
        None => SynthParams::default(),
    };
    if let Some(s) = seed {
        params.seed = s;
    }
    if let Some(q) = queries {
        params.queries = q;
    }
    if let Some(l) = landmarks {
        params.landmarks = l;
    }
    params.validate()?;
    let samples = generate(&params)?;
    write_dataset(out, name, &samples, params.spacing_mm)?;
    write_record(
        out,
        &SynthRecord {
            command: "synth",
            name,
            params: &params,
        },
    )?;
    println!("wrote {} images to {}", samples.len(), out.display());
    Ok(())
}
