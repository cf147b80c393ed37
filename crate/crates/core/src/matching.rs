//! Landmark correspondence on feature maps.
//!
//! [`bdm_match`] implements bidirectional matching: among the `k` query cells
//! most similar to the template landmark, keep the one whose own best match
//! back on the template lands closest to the known landmark.
//!
//! Ties are resolved deterministically. Forward and inverse argmax pick the
//! first cell in row-major order; top-k orders by descending similarity then
//! row-major; the final selection minimizes inverse-matching distance, then
//! prefers higher forward similarity, then the row-major-first query cell.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{FeatureMap, SimilarityMap};
use crate::geometry::GridPoint;
use crate::simloss::cosine_similarity_map;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct MatchConfig {
    pub k: usize,
}

impl Default for MatchConfig {
    fn default() -> Self {
        Self { k: 3 }
    }
}

/// Selected correspondence plus the intermediate candidate sets.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MatchResult {
    /// Predicted cell on the query map.
    pub query_point: GridPoint,
    /// Where `query_point` matches back onto the template map.
    pub template_point: GridPoint,
    /// Top-k forward candidates, best first.
    pub candidates: Vec<GridPoint>,
    /// `(query candidate, inverse match)` pairs, in candidate order.
    pub pairs: Vec<(GridPoint, GridPoint)>,
    /// Distance from `template_point` to the template landmark, in grid units.
    pub inverse_error: f64,
    /// Cosine similarity of `query_point` to the template landmark feature.
    pub forward_similarity: f64,
}

fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate().skip(1) {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

/// Cell of `f_q` most similar to `anchor`.
pub fn argmax_match(f_q: &FeatureMap, anchor: &[f64]) -> Result<GridPoint> {
    let s = cosine_similarity_map(f_q, anchor)?;
    Ok(GridPoint::from_linear(argmax(s.values()), s.width()))
}

/// The `k` highest cells of `s`, by descending value then row-major index.
pub fn top_k_candidates(s: &SimilarityMap, k: usize) -> Result<Vec<GridPoint>> {
    let cells = s.cells();
    if k > cells {
        return Err(Error::KTooLarge { k, cells });
    }
    if k == 0 {
        return Err(Error::InvalidArgument("k must be >= 1".into()));
    }
    let values = s.values();
    let mut order: Vec<usize> = (0..cells).collect();
    // Stable sort keeps row-major order among equal values (0.0 and -0.0
    // included).
    order.sort_by(|a, b| values[*b].partial_cmp(&values[*a]).unwrap_or(std::cmp::Ordering::Equal));
    Ok(order[..k].iter().map(|i| GridPoint::from_linear(*i, s.width())).collect())
}

/// Cell of the template map most similar to a query descriptor.
pub fn inverse_match(f_t: &FeatureMap, query_feature: &[f64]) -> Result<GridPoint> {
    argmax_match(f_t, query_feature)
}

/// Bidirectional matching of template landmark `p_t` (a cell of `f_t`) into `f_q`.
pub fn bdm_match(f_t: &FeatureMap, f_q: &FeatureMap, p_t: GridPoint, cfg: &MatchConfig) -> Result<MatchResult> {
    if !f_t.contains(p_t) {
        return Err(Error::CenterOutOfBounds {
            x: p_t.col as f64,
            y: p_t.row as f64,
            height: f_t.height(),
            width: f_t.width(),
        });
    }
    if f_t.dim() != f_q.dim() {
        return Err(Error::MapShapeMismatch(format!(
            "template has {} channels, query has {}",
            f_t.dim(),
            f_q.dim()
        )));
    }
    let forward = cosine_similarity_map(f_q, f_t.vector(p_t))?;
    let candidates = top_k_candidates(&forward, cfg.k)?;

    let mut pairs = Vec::with_capacity(candidates.len());
    for c_q in &candidates {
        pairs.push((*c_q, inverse_match(f_t, f_q.vector(*c_q))?));
    }

    // Squared distances between cells are exact integers, so equal distances
    // compare equal.
    let squared = |c: GridPoint| {
        let dr = c.row as f64 - p_t.row as f64;
        let dc = c.col as f64 - p_t.col as f64;
        dr * dr + dc * dc
    };
    let mut best: Option<(usize, f64, f64)> = None;
    for (i, (c_q, c_t)) in pairs.iter().enumerate() {
        let dist = squared(*c_t);
        let sim = forward.get(*c_q);
        let better = match best {
            None => true,
            Some((j, bd, bs)) => {
                dist < bd
                    || (dist == bd && sim > bs)
                    || (dist == bd && sim == bs && c_q.linear(f_q.width()) < pairs[j].0.linear(f_q.width()))
            }
        };
        if better {
            best = Some((i, dist, sim));
        }
    }
    let (i, dist2, forward_similarity) = best.expect("k >= 1 yields at least one pair");
    let inverse_error = dist2.sqrt();
    Ok(MatchResult {
        query_point: pairs[i].0,
        template_point: pairs[i].1,
        candidates,
        pairs,
        inverse_error,
        forward_similarity,
    })
}

/// Plain forward matching packaged as a [`MatchResult`] (k = 1, no inverse filtering).
pub fn argmax_result(f_t: &FeatureMap, f_q: &FeatureMap, p_t: GridPoint) -> Result<MatchResult> {
    bdm_match(f_t, f_q, p_t, &MatchConfig { k: 1 })
}

/// Like [`bdm_match`] but clamps `k` to the query grid size with a warning.
pub fn bdm_match_clamped(f_t: &FeatureMap, f_q: &FeatureMap, p_t: GridPoint, cfg: &MatchConfig) -> Result<MatchResult> {
    let cells = f_q.cells();
    if cfg.k > cells {
        log::warn!("k={} exceeds {} query cells; clamping", cfg.k, cells);
        return bdm_match(f_t, f_q, p_t, &MatchConfig { k: cells });
    }
    bdm_match(f_t, f_q, p_t, cfg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::CoordTransform;

    fn fmap(h: usize, w: usize, d: usize, data: Vec<f64>) -> FeatureMap {
        FeatureMap::new(h, w, d, data, CoordTransform::identity()).unwrap()
    }

    fn smap(h: usize, w: usize, v: Vec<f64>) -> SimilarityMap {
        SimilarityMap::new(h, w, v).unwrap()
    }

    /// Feature map whose cosine with anchor (1, 0) reproduces the given similarities.
    fn from_similarities(h: usize, w: usize, sims: &[f64]) -> FeatureMap {
        let data = sims.iter().flat_map(|s| [*s, (1.0 - s * s).max(0.0).sqrt()]).collect();
        fmap(h, w, 2, data)
    }

    #[test]
    fn argmax_examples() {
        let f = from_similarities(2, 2, &[0.2, 0.9, 0.9, 0.1]);
        assert_eq!(argmax_match(&f, &[1.0, 0.0]).unwrap(), GridPoint::new(0, 1));
        let c = fmap(2, 2, 2, vec![1.0; 8]);
        assert_eq!(argmax_match(&c, &[0.3, 0.4]).unwrap(), GridPoint::new(0, 0));
        assert_eq!(argmax_match(&c, &[0.0, 0.0]).unwrap_err().tag(), "zero-anchor");
    }

    #[test]
    fn argmax_self_match() {
        let data: Vec<f64> = (0..3 * 3 * 2).map(|i| ((i * 7 % 11) as f64) - 5.0).collect();
        let f = fmap(3, 3, 2, data);
        // All cells are pairwise non-parallel in this fixture except where noted by the assert.
        for cell in 0..9 {
            let p = GridPoint::from_linear(cell, 3);
            let got = argmax_match(&f, f.vector(p)).unwrap();
            let s = cosine_similarity_map(&f, f.vector(p)).unwrap();
            assert_eq!(s.get(got), s.get(p));
        }
    }

    #[test]
    fn top_k_examples() {
        let s = smap(2, 2, vec![0.9, 0.1, 0.5, 0.7]);
        assert_eq!(top_k_candidates(&s, 1).unwrap(), vec![GridPoint::new(0, 0)]);
        assert_eq!(
            top_k_candidates(&s, 2).unwrap(),
            vec![GridPoint::new(0, 0), GridPoint::new(1, 1)]
        );
        let c = smap(2, 2, vec![0.3; 4]);
        assert_eq!(
            top_k_candidates(&c, 3).unwrap(),
            vec![GridPoint::new(0, 0), GridPoint::new(0, 1), GridPoint::new(1, 0)]
        );
        assert_eq!(top_k_candidates(&c, 5).unwrap_err().tag(), "k-too-large");
        let z = smap(1, 3, vec![-0.0, 0.0, -0.5]);
        assert_eq!(top_k_candidates(&z, 1).unwrap(), vec![GridPoint::new(0, 0)]);
    }

    #[test]
    fn inverse_examples() {
        let f_t = fmap(1, 2, 2, vec![1.0, 0.0, 0.0, 1.0]);
        assert_eq!(inverse_match(&f_t, &[0.9, 0.1]).unwrap(), GridPoint::new(0, 0));
        let c = fmap(2, 3, 2, vec![0.5; 12]);
        assert_eq!(inverse_match(&c, &[0.1, 0.9]).unwrap(), GridPoint::new(0, 0));
        assert_eq!(inverse_match(&c, &[0.0, 0.0]).unwrap_err().tag(), "zero-anchor");
    }

    #[test]
    fn k1_equals_argmax() {
        let data: Vec<f64> = (0..4 * 4 * 3).map(|i| ((i * 13 % 7) as f64 - 3.0) * 0.5).collect();
        let f_t = fmap(4, 4, 3, data.clone());
        let f_q = fmap(4, 4, 3, data.iter().rev().copied().collect());
        for cell in 0..16 {
            let p = GridPoint::from_linear(cell, 4);
            if f_t.vector(p).iter().all(|v| *v == 0.0) {
                continue;
            }
            let r = bdm_match(&f_t, &f_q, p, &MatchConfig { k: 1 }).unwrap();
            assert_eq!(r.query_point, argmax_match(&f_q, f_t.vector(p)).unwrap());
            assert_eq!(r.candidates.len(), 1);
        }
    }

    #[test]
    fn identity_matching() {
        // Pairwise distinct unit directions.
        let data: Vec<f64> = (0..9)
            .flat_map(|i| {
                let a = i as f64 * 0.6;
                [a.cos(), a.sin(), 0.3 * (i as f64)]
            })
            .collect();
        let f = fmap(3, 3, 3, data);
        for cell in 0..9 {
            let p = GridPoint::from_linear(cell, 3);
            let r = bdm_match(&f, &f, p, &MatchConfig { k: 3 }).unwrap();
            assert_eq!(r.query_point, p);
            assert_eq!(r.inverse_error, 0.0);
        }
    }

    #[test]
    fn bdm_rejects_ambiguous_forward_peak() {
        // Unit directions by angle; fillers point far away from the landmark cluster.
        let dir = |deg: f64| {
            let r = deg.to_radians();
            [r.cos(), r.sin()]
        };
        let filler = |i: usize| dir(100.0 + 22.0 * i as f64);
        // Template: landmark at (0,0), a lookalike patch two cells away at (0,2).
        let t: Vec<f64> = (0..9)
            .flat_map(|cell| match cell {
                0 => dir(0.0),
                2 => dir(20.0),
                i => filler(i),
            })
            .collect();
        // Query: the true landmark at (1,1), a duplicate at (2,2) that is closer
        // to the landmark descriptor but closer still to the lookalike.
        let q: Vec<f64> = (0..9)
            .flat_map(|cell| match cell {
                4 => dir(-12.0),
                8 => dir(11.0),
                i => filler(i + 1),
            })
            .collect();
        let f_t = fmap(3, 3, 2, t);
        let f_q = fmap(3, 3, 2, q);
        let p_t = GridPoint::new(0, 0);

        assert_eq!(argmax_match(&f_q, f_t.vector(p_t)).unwrap(), GridPoint::new(2, 2));
        let r = bdm_match(&f_t, &f_q, p_t, &MatchConfig { k: 2 }).unwrap();
        assert_eq!(
            r.pairs,
            vec![
                (GridPoint::new(2, 2), GridPoint::new(0, 2)),
                (GridPoint::new(1, 1), GridPoint::new(0, 0)),
            ]
        );
        assert_eq!(r.query_point, GridPoint::new(1, 1));
        assert_eq!(r.template_point, p_t);
        assert_eq!(r.inverse_error, 0.0);
        assert!(r.candidates.contains(&r.query_point));
    }

    #[test]
    fn clamped_variant_accepts_large_k() {
        let f = fmap(1, 2, 2, vec![1.0, 0.0, 0.0, 1.0]);
        assert!(bdm_match(&f, &f, GridPoint::new(0, 0), &MatchConfig { k: 5 }).is_err());
        let r = bdm_match_clamped(&f, &f, GridPoint::new(0, 0), &MatchConfig { k: 5 }).unwrap();
        assert_eq!(r.candidates.len(), 2);
    }

    #[test]
    fn out_of_grid_landmark() {
        let f = fmap(1, 2, 2, vec![1.0, 0.0, 0.0, 1.0]);
        assert!(bdm_match(&f, &f, GridPoint::new(1, 0), &MatchConfig::default()).is_err());
    }
}
