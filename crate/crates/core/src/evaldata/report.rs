use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::metrics::{mean, sdr};
use crate::error::{Error, Result};

/// Error of one predicted landmark on one image.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PointError {
    pub image: String,
    pub landmark: usize,
    pub pred_x: f64,
    pub pred_y: f64,
    pub gt_x: f64,
    pub gt_y: f64,
    pub error_px: f64,
    pub mm_per_px: f64,
    pub error_mm: f64,
}

const CSV_HEADER: [&str; 9] = [
    "image", "landmark", "pred_x", "pred_y", "gt_x", "gt_y", "error_px", "mm_per_px", "error_mm",
];

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub mre_mm: f64,
    pub thresholds_mm: Vec<f64>,
    pub sdr_pct: Vec<f64>,
    pub per_point: Vec<PointError>,
}

#[derive(Serialize, Deserialize)]
struct ReportJson {
    mre_mm: f64,
    thresholds_mm: Vec<f64>,
    sdr: BTreeMap<String, f64>,
    per_point: Vec<PointError>,
}

impl EvalReport {
    /// Aggregates per-point errors; MRE is the plain mean of `error_mm` in
    /// the given order.
    pub fn from_points(per_point: Vec<PointError>, thresholds_mm: &[f64]) -> Result<Self> {
        let errors: Vec<f64> = per_point.iter().map(|p| p.error_mm).collect();
        if errors.is_empty() {
            return Err(Error::InvalidArgument("report needs at least one point".into()));
        }
        Ok(Self {
            mre_mm: mean(&errors),
            thresholds_mm: thresholds_mm.to_vec(),
            sdr_pct: sdr(&errors, thresholds_mm)?,
            per_point,
        })
    }

    /// SDR keyed by threshold, for JSON output.
    pub fn sdr_map(&self) -> BTreeMap<String, f64> {
        self.thresholds_mm
            .iter()
            .zip(&self.sdr_pct)
            .map(|(t, s)| (t.to_string(), *s))
            .collect()
    }

    pub fn to_json(&self) -> Result<String> {
        let j = ReportJson {
            mre_mm: self.mre_mm,
            thresholds_mm: self.thresholds_mm.clone(),
            sdr: self.sdr_map(),
            per_point: self.per_point.clone(),
        };
        serde_json::to_string_pretty(&j).map_err(|e| Error::Format(e.to_string()))
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let j: ReportJson = serde_json::from_str(text).map_err(|e| Error::Format(e.to_string()))?;
        let sdr_pct = j
            .thresholds_mm
            .iter()
            .map(|t| {
                j.sdr
                    .get(&t.to_string())
                    .copied()
                    .ok_or_else(|| Error::Format(format!("sdr missing threshold {t}")))
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            mre_mm: j.mre_mm,
            thresholds_mm: j.thresholds_mm,
            sdr_pct,
            per_point: j.per_point,
        })
    }

    /// Flat per-point CSV. Floats use the shortest representation that
    /// parses back to the same value.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
        let fail = |e: csv::Error| Error::Format(format!("{}: {e}", path.display()));
        w.write_record(CSV_HEADER).map_err(fail)?;
        for p in &self.per_point {
            let row = [
                p.image.clone(),
                p.landmark.to_string(),
                p.pred_x.to_string(),
                p.pred_y.to_string(),
                p.gt_x.to_string(),
                p.gt_y.to_string(),
                p.error_px.to_string(),
                p.mm_per_px.to_string(),
                p.error_mm.to_string(),
            ];
            w.write_record(&row).map_err(fail)?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    /// Writes `<stem>.json` and `<stem>.csv` into `dir`.
    pub fn save(&self, dir: &Path, stem: &str) -> Result<()> {
        let json = dir.join(format!("{stem}.json"));
        std::fs::write(&json, self.to_json()?).map_err(|e| Error::io(&json, e))?;
        self.write_csv(&dir.join(format!("{stem}.csv")))
    }
}

/// Recomputes a report from a per-point CSV written by [`EvalReport::write_csv`].
pub fn replay(csv_path: &Path, thresholds_mm: &[f64]) -> Result<EvalReport> {
    let mut rdr = csv::Reader::from_path(csv_path).map_err(|e| Error::parse(csv_path, e.to_string()))?;
    let mut points = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| Error::parse(csv_path, e.to_string()))?;
        if rec.len() != CSV_HEADER.len() {
            return Err(Error::parse(csv_path, format!("row {}: expected {} fields", i + 1, CSV_HEADER.len())));
        }
        let num = |k: usize| -> Result<f64> {
            rec[k]
                .parse::<f64>()
                .map_err(|_| Error::parse(csv_path, format!("row {}: bad {} '{}'", i + 1, CSV_HEADER[k], &rec[k])))
        };
        points.push(PointError {
            image: rec[0].to_string(),
            landmark: rec[1]
                .parse()
                .map_err(|_| Error::parse(csv_path, format!("row {}: bad landmark index", i + 1)))?,
            pred_x: num(2)?,
            pred_y: num(3)?,
            gt_x: num(4)?,
            gt_y: num(5)?,
            error_px: num(6)?,
            mm_per_px: num(7)?,
            error_mm: num(8)?,
        });
    }
    EvalReport::from_points(points, thresholds_mm)
}
