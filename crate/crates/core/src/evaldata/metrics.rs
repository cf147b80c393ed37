use crate::error::{Error, Result};
use crate::geometry::{euclidean_dist, Point};

/// SDR thresholds for the cephalometric (head) benchmark, in mm.
pub const HEAD_THRESHOLDS_MM: [f64; 4] = [2.0, 2.5, 3.0, 4.0];
/// SDR thresholds for the hand benchmark, in mm.
pub const HAND_THRESHOLDS_MM: [f64; 3] = [2.0, 4.0, 10.0];

/// Per-pair Euclidean errors scaled to millimeters.
pub fn radial_errors(preds: &[Point], gts: &[Point], mm_per_px: f64) -> Result<Vec<f64>> {
    if preds.len() != gts.len() {
        return Err(Error::InvalidArgument(format!(
            "{} predictions vs {} ground-truth points",
            preds.len(),
            gts.len()
        )));
    }
    if preds.is_empty() {
        return Err(Error::InvalidArgument("no points to compare".into()));
    }
    if !(mm_per_px > 0.0) || !mm_per_px.is_finite() {
        return Err(Error::InvalidArgument(format!("mm_per_px must be > 0, got {mm_per_px}")));
    }
    Ok(preds.iter().zip(gts).map(|(p, g)| euclidean_dist(*p, *g) * mm_per_px).collect())
}

/// Mean radial error in millimeters.
pub fn mre(preds: &[Point], gts: &[Point], mm_per_px: f64) -> Result<f64> {
    let e = radial_errors(preds, gts, mm_per_px)?;
    Ok(mean(&e))
}

pub(crate) fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

/// Percentage of errors strictly below each threshold.
pub fn sdr(errors_mm: &[f64], thresholds_mm: &[f64]) -> Result<Vec<f64>> {
    if errors_mm.is_empty() {
        return Err(Error::InvalidArgument("sdr needs at least one error".into()));
    }
    if thresholds_mm.iter().any(|t| !(*t > 0.0)) || thresholds_mm.windows(2).any(|w| w[1] < w[0]) {
        return Err(Error::InvalidArgument(format!(
            "thresholds must be positive and ascending, got {thresholds_mm:?}"
        )));
    }
    let n = errors_mm.len() as f64;
    Ok(thresholds_mm
        .iter()
        .map(|t| 100.0 * errors_mm.iter().filter(|e| **e < *t).count() as f64 / n)
        .collect())
}

/// Named threshold presets.
pub fn thresholds_for(preset: &str) -> Result<Vec<f64>> {
    match preset {
        "head" => Ok(HEAD_THRESHOLDS_MM.to_vec()),
        "hand" => Ok(HAND_THRESHOLDS_MM.to_vec()),
        // pixel-scale thresholds for the procedural benchmark (1 mm = 1 px)
        "synthetic" => Ok(vec![1.0, 2.0, 4.0]),
        other => Err(Error::InvalidArgument(format!("unknown threshold preset '{other}'"))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn p(x: f64, y: f64) -> Point {
        Point::new(x, y)
    }

    #[test]
    fn mre_examples() {
        let a = [p(1.0, 2.0), p(3.0, 4.0)];
        assert_eq!(mre(&a, &a, 0.1).unwrap(), 0.0);
        assert_eq!(mre(&[p(0.0, 0.0)], &[p(3.0, 4.0)], 0.1).unwrap(), 0.5);
        let got = mre(&[p(0.0, 0.0), p(0.0, 0.0)], &[p(3.0, 4.0), p(9.0, 12.0)], 0.1).unwrap();
        assert!((got - 1.0).abs() < 1e-15);
    }

    #[test]
    fn mre_rejects_mismatch() {
        assert!(mre(&[p(0.0, 0.0)], &[], 0.1).is_err());
        assert!(mre(&[p(0.0, 0.0)], &[p(0.0, 0.0)], 0.0).is_err());
    }

    #[test]
    fn sdr_examples() {
        assert_eq!(sdr(&[0.0, 0.0], &HAND_THRESHOLDS_MM).unwrap(), vec![100.0, 100.0, 100.0]);
        assert_eq!(sdr(&[1.0, 3.0], &[2.0]).unwrap(), vec![50.0]);
        assert_eq!(sdr(&[2.0], &[2.0]).unwrap(), vec![0.0]);
        assert!(sdr(&[], &[2.0]).is_err());
        assert!(sdr(&[1.0], &[3.0, 2.0]).is_err());
    }

    #[test]
    fn presets() {
        assert_eq!(thresholds_for("head").unwrap(), vec![2.0, 2.5, 3.0, 4.0]);
        assert_eq!(thresholds_for("hand").unwrap(), vec![2.0, 4.0, 10.0]);
    }

    proptest! {
        #[test]
        fn sdr_is_monotone(errors in prop::collection::vec(0.0f64..20.0, 1..50), mut ts in prop::collection::vec(0.01f64..25.0, 1..8)) {
            ts.sort_by(f64::total_cmp);
            let s = sdr(&errors, &ts).unwrap();
            for w in s.windows(2) {
                prop_assert!(w[0] <= w[1]);
            }
            prop_assert!(s.iter().all(|v| (0.0..=100.0).contains(v)));
        }

        #[test]
        fn mre_is_rigid_invariant(
            pts in prop::collection::vec((-50.0f64..50.0, -50.0f64..50.0, -50.0f64..50.0, -50.0f64..50.0), 1..10),
            theta in -3.2f64..3.2, tx in -20.0f64..20.0, ty in -20.0f64..20.0,
        ) {
            let preds: Vec<Point> = pts.iter().map(|q| p(q.0, q.1)).collect();
            let gts: Vec<Point> = pts.iter().map(|q| p(q.2, q.3)).collect();
            let (s, c) = theta.sin_cos();
            let m = |q: &Point| p(c * q.x - s * q.y + tx, s * q.x + c * q.y + ty);
            let a = mre(&preds, &gts, 0.1).unwrap();
            let b = mre(&preds.iter().map(m).collect::<Vec<_>>(), &gts.iter().map(m).collect::<Vec<_>>(), 0.1).unwrap();
            prop_assert!((a - b).abs() < 1e-9);
        }
    }
}
