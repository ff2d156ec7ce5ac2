//! Retrieval and matching metrics.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use super::matching::{match_lesions, MatchNode, MatchingConfig};
use crate::error::{Error, Result};
use crate::model::squared_distance;

/// Average retrieval error of a continuous cue: mean Euclidean distance
/// between the query cue and each retrieved cue.
pub fn are_continuous<R: AsRef<[f64]>>(query: &[f64], retrieved: &[R]) -> Result<f64> {
    if retrieved.is_empty() {
        return Err(Error::Empty("retrieval list"));
    }
    let mut total = 0.0;
    for r in retrieved {
        let r = r.as_ref();
        if r.len() != query.len() {
            return Err(Error::DimensionMismatch {
                expected: query.len(),
                actual: r.len(),
            });
        }
        total += squared_distance(query, r).sqrt();
    }
    Ok(total / retrieved.len() as f64)
}

/// Type retrieval error: one minus the fraction of retrieved lesions
/// sharing the query's type.
pub fn are_type(query: u8, retrieved: &[u8]) -> Result<f64> {
    if retrieved.is_empty() {
        return Err(Error::Empty("retrieval list"));
    }
    let same = retrieved.iter().filter(|t| **t == query).count();
    Ok(1.0 - same as f64 / retrieved.len() as f64)
}

/// Pair-counting scores of a grouping against the truth.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PairwiseScores {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub true_positives: u64,
    pub false_positives: u64,
    pub false_negatives: u64,
}

fn pairs(n: u64) -> u64 {
    n * n.saturating_sub(1) / 2
}

fn group_index(groups: &[Vec<u64>]) -> Result<HashMap<u64, usize>> {
    let mut map = HashMap::new();
    for (g, members) in groups.iter().enumerate() {
        for &id in members {
            if map.insert(id, g).is_some() {
                return Err(Error::DuplicateLesion(id));
            }
        }
    }
    Ok(map)
}

/// Precision and recall over all unordered lesion pairs: a pair is a true
/// positive when it shares both a predicted and a true group. Empty
/// denominators count as perfect (`0/0 = 1`).
pub fn pairwise_pr(predicted: &[Vec<u64>], truth: &[Vec<u64>]) -> Result<PairwiseScores> {
    let pred = group_index(predicted)?;
    let tru = group_index(truth)?;
    if pred.len() != tru.len() || pred.keys().any(|k| !tru.contains_key(k)) {
        return Err(Error::UniverseMismatch);
    }
    let mut cells: HashMap<(usize, usize), u64> = HashMap::new();
    for (id, p) in &pred {
        *cells.entry((*p, tru[id])).or_default() += 1;
    }
    let tp: u64 = cells.values().map(|c| pairs(*c)).sum();
    let pred_pairs: u64 = predicted.iter().map(|g| pairs(g.len() as u64)).sum();
    let true_pairs: u64 = truth.iter().map(|g| pairs(g.len() as u64)).sum();
    let (fp, fn_) = (pred_pairs - tp, true_pairs - tp);
    let ratio = |num: u64, den: u64| if den == 0 { 1.0 } else { num as f64 / den as f64 };
    let precision = ratio(tp, tp + fp);
    let recall = ratio(tp, tp + fn_);
    let f1 = if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        0.0
    };
    Ok(PairwiseScores {
        precision,
        recall,
        f1,
        true_positives: tp,
        false_positives: fp,
        false_negatives: fn_,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrPoint {
    pub t2: f64,
    pub precision: f64,
    pub recall: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrCurve {
    pub points: Vec<PrPoint>,
    pub auc: f64,
}

/// Area under the precision-recall curve, normalized by the recall range
/// the sweep covers. Points are sorted by recall; repeated recall values
/// keep their highest precision; trapezoids join consecutive points and
/// nothing is extrapolated past the outermost recalls. A sweep that never
/// changes recall scores its (best) precision.
pub fn auc_from_points(points: &[PrPoint]) -> f64 {
    let mut pts: Vec<(f64, f64)> = points.iter().map(|p| (p.recall, p.precision)).collect();
    if pts.is_empty() {
        return 0.0;
    }
    pts.sort_by(|a, b| a.0.total_cmp(&b.0).then(b.1.total_cmp(&a.1)));
    pts.dedup_by(|later, earlier| later.0 == earlier.0);
    if pts.len() == 1 {
        return pts[0].1;
    }
    let area: f64 = pts
        .windows(2)
        .map(|w| (w[1].0 - w[0].0) * 0.5 * (w[0].1 + w[1].1))
        .sum();
    area / (pts[pts.len() - 1].0 - pts[0].0)
}

/// Runs matching for every `t2` in `sweep` (with fixed `t1`) over all
/// patients and scores the pooled groups against `truth`.
pub fn pr_curve_auc(
    patients: &[Vec<MatchNode>],
    truth: &[Vec<u64>],
    t1: f64,
    sweep: &[f64],
) -> Result<PrCurve> {
    if sweep.len() < 2 {
        return Err(Error::Config("precision-recall sweep needs at least two t2 values".into()));
    }
    let mut points = Vec::with_capacity(sweep.len());
    for &t2 in sweep {
        let cfg = MatchingConfig { t1, t2 };
        let mut groups = Vec::new();
        for p in patients.iter().filter(|p| !p.is_empty()) {
            groups.extend(match_lesions(p, &cfg)?);
        }
        let s = pairwise_pr(&groups, truth)?;
        points.push(PrPoint {
            t2,
            precision: s.precision,
            recall: s.recall,
        });
    }
    let auc = auc_from_points(&points);
    Ok(PrCurve { points, auc })
}
