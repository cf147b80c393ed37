//! Dataset manifests, annotation files, metrics and evaluation reports.

mod metrics;
mod report;

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{euclidean_dist, LandmarkSet, Point};
use crate::pipeline::{DetectOptions, Detector};
use crate::raster::ImageGrid;

pub use metrics::{mre, radial_errors, sdr, thresholds_for, HAND_THRESHOLDS_MM, HEAD_THRESHOLDS_MM};
pub use report::{replay, EvalReport, PointError};

/// Physical pixel size, either fixed or derived per image from two
/// landmarks a known distance apart.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Calibration {
    Spacing(SpacingCalibration),
    Wrist(WristCalibration),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpacingCalibration {
    pub spacing_mm: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WristCalibration {
    pub wrist_pair: (usize, usize),
    #[serde(default = "default_wrist_mm")]
    pub length_mm: f64,
}

fn default_wrist_mm() -> f64 {
    50.0
}

impl Calibration {
    pub fn spacing(mm: f64) -> Self {
        Calibration::Spacing(SpacingCalibration { spacing_mm: mm })
    }

    pub fn wrist(a: usize, b: usize) -> Self {
        Calibration::Wrist(WristCalibration {
            wrist_pair: (a, b),
            length_mm: default_wrist_mm(),
        })
    }

    /// Millimeters per pixel for an image annotated with `lms`.
    pub fn mm_per_px(&self, lms: &LandmarkSet) -> Result<f64> {
        let v = match self {
            Calibration::Spacing(s) => s.spacing_mm,
            Calibration::Wrist(w) => {
                let (a, b) = w.wrist_pair;
                let (pa, pb) = match (lms.points.get(a), lms.points.get(b)) {
                    (Some(pa), Some(pb)) => (*pa, *pb),
                    _ => {
                        return Err(Error::InvalidArgument(format!(
                            "wrist pair ({a}, {b}) out of range for {} landmarks",
                            lms.len()
                        )))
                    }
                };
                w.length_mm / euclidean_dist(pa, pb)
            }
        };
        if !(v > 0.0) || !v.is_finite() {
            return Err(Error::InvalidArgument(format!("calibration yields invalid spacing {v}")));
        }
        Ok(v)
    }
}

/// JSON description of a dataset. Directories are relative to the manifest
/// file unless absolute.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub name: String,
    pub image_dir: PathBuf,
    pub annotation_dir: PathBuf,
    pub landmark_count: usize,
    pub calibration: Calibration,
    pub template: String,
    pub test: Vec<String>,
    #[serde(default = "default_ext")]
    pub image_ext: String,
}

fn default_ext() -> String {
    "png".into()
}

impl DatasetManifest {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let m: DatasetManifest = serde_json::from_str(&text).map_err(|e| Error::parse(path, e.to_string()))?;
        if m.landmark_count == 0 {
            return Err(Error::parse(path, "landmark_count must be >= 1"));
        }
        Ok(m)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).map_err(|e| Error::Format(e.to_string()))?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}

/// One annotated image.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub id: String,
    pub image: ImageGrid,
    pub landmarks: LandmarkSet,
    pub mm_per_px: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub template: Sample,
    pub test: Vec<Sample>,
}

/// Reads an annotation CSV with rows `index,x,y` (zero-based index, pixel
/// coordinates, optional header). Rows may come in any order but every index
/// in `0..expected` must appear once.
pub fn read_annotations(path: &Path, expected: usize) -> Result<LandmarkSet> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| Error::parse(path, e.to_string()))?;
    let mut slots: Vec<Option<Point>> = vec![None; expected];
    let mut rows = 0;
    for (line, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| Error::parse(path, e.to_string()))?;
        if rec.len() != 3 {
            return Err(Error::parse(path, format!("line {}: expected 3 fields, found {}", line + 1, rec.len())));
        }
        let index: usize = match rec[0].parse() {
            Ok(i) => i,
            Err(_) if line == 0 => continue,
            Err(_) => return Err(Error::parse(path, format!("line {}: bad index '{}'", line + 1, &rec[0]))),
        };
        let coord = |s: &str| -> Result<f64> {
            s.parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| Error::parse(path, format!("line {}: non-finite coordinate '{s}'", line + 1)))
        };
        let p = Point::new(coord(&rec[1])?, coord(&rec[2])?);
        rows += 1;
        match slots.get_mut(index) {
            Some(slot @ None) => *slot = Some(p),
            Some(Some(_)) => return Err(Error::parse(path, format!("duplicate landmark index {index}"))),
            None => {}
        }
    }
    if rows != expected || slots.iter().any(Option::is_none) {
        return Err(Error::parse(path, format!("expected {expected} landmarks, found {rows}")));
    }
    LandmarkSet::new(slots.into_iter().map(|p| p.expect("checked")).collect())
}

/// [`read_annotations`] with the landmark count taken from the file's rows.
pub fn read_annotations_any(path: &Path) -> Result<LandmarkSet> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let rows = text
        .lines()
        .filter(|l| l.split(',').next().is_some_and(|f| f.trim().parse::<usize>().is_ok()))
        .count();
    if rows == 0 {
        return Err(Error::parse(path, "no landmark rows"));
    }
    read_annotations(path, rows)
}

pub fn write_annotations(path: &Path, lms: &[Point]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::Format(e.to_string()))?;
    let io = |e: csv::Error| Error::Format(format!("{}: {e}", path.display()));
    w.write_record(["index", "x", "y"]).map_err(io)?;
    for (i, p) in lms.iter().enumerate() {
        w.write_record([i.to_string(), p.x.to_string(), p.y.to_string()]).map_err(io)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn resolve(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

fn load_sample(m: &DatasetManifest, base: &Path, id: &str) -> Result<Sample> {
    let img_path = resolve(base, &m.image_dir).join(format!("{id}.{}", m.image_ext));
    let ann_path = resolve(base, &m.annotation_dir).join(format!("{id}.csv"));
    if !img_path.exists() {
        return Err(Error::parse(&img_path, "image file not found"));
    }
    if !ann_path.exists() {
        return Err(Error::parse(&ann_path, "annotation file not found"));
    }
    let image = ImageGrid::load(&img_path)?;
    let landmarks = read_annotations(&ann_path, m.landmark_count)?;
    let mm_per_px = m
        .calibration
        .mm_per_px(&landmarks)
        .map_err(|e| Error::parse(&ann_path, e.to_string()))?;
    Ok(Sample {
        id: id.to_string(),
        image,
        landmarks,
        mm_per_px,
    })
}

/// Loads and validates every image and annotation named by the manifest.
pub fn load_dataset(manifest_path: &Path) -> Result<Dataset> {
    let manifest = DatasetManifest::load(manifest_path)?;
    let base = manifest_path.parent().unwrap_or(Path::new("."));
    let template = load_sample(&manifest, base, &manifest.template)?;
    let test = manifest
        .test
        .iter()
        .map(|id| load_sample(&manifest, base, id))
        .collect::<Result<_>>()?;
    Ok(Dataset { manifest, template, test })
}

/// Anything that maps an image to one point per landmark.
pub trait LandmarkDetector {
    fn detect_points(&self, img: &ImageGrid) -> Result<Vec<Point>>;
}

impl LandmarkDetector for Detector {
    fn detect_points(&self, img: &ImageGrid) -> Result<Vec<Point>> {
        Ok(self.detect(img)?.points)
    }
}

/// A detector run with non-default options.
pub struct WithOptions<'a>(pub &'a Detector, pub DetectOptions);

impl LandmarkDetector for WithOptions<'_> {
    fn detect_points(&self, img: &ImageGrid) -> Result<Vec<Point>> {
        Ok(self.0.detect_with(img, &self.1)?.points)
    }
}

/// Runs the detector on every test image and aggregates errors over all
/// (image, landmark) pairs, in manifest order.
pub fn evaluate(dataset: &Dataset, detector: &dyn LandmarkDetector, thresholds_mm: &[f64]) -> Result<EvalReport> {
    let mut points = Vec::new();
    for s in &dataset.test {
        let preds = detector.detect_points(&s.image)?;
        let errs = radial_errors(&preds, &s.landmarks.points, s.mm_per_px)?;
        for (i, ((p, g), e)) in preds.iter().zip(&s.landmarks.points).zip(errs).enumerate() {
            points.push(PointError {
                image: s.id.clone(),
                landmark: i,
                pred_x: p.x,
                pred_y: p.y,
                gt_x: g.x,
                gt_y: g.y,
                error_px: euclidean_dist(*p, *g),
                mm_per_px: s.mm_per_px,
                error_mm: e,
            });
        }
    }
    EvalReport::from_points(points, thresholds_mm)
}
