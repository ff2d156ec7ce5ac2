//! Self-supervised body-part regression.
//!
//! A scalar regressor scores axial slices from their feature vectors only.
//! Training draws `m` equidistant slices `j, j+k, ..., j+k(m-1)` from each
//! volume and penalizes scores that are out of order (`-log sigmoid` of
//! consecutive gaps) or unevenly spaced (smooth L1 on second differences).
//! Scores are then mapped to a relative `z` coordinate in `[0, 1]`.

use std::fs::File;
use std::io::BufWriter;
use std::path::Path;

use rand::seq::index::sample as sample_indices;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::net::{sgd_step, Gradients, Mlp, SgdConfig};

/// Ordered slice features of one CT volume, superior to inferior.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    pub volume_id: u64,
    pub patient_id: u64,
    pub study_id: u64,
    pub slices: Vec<Vec<f64>>,
    /// Generator ground truth, when available.
    pub true_z: Option<Vec<f64>>,
}

impl Volume {
    pub fn len(&self) -> usize {
        self.slices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slices.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SsbrConfig {
    pub m_slices: usize,
    pub volumes_per_batch: usize,
    pub slices_per_batch: usize,
    pub learning_rate: f64,
    pub max_iterations: usize,
    pub hard_r_threshold: f64,
    pub oversample_factor: usize,
    pub hidden_dims: Vec<usize>,
}

impl Default for SsbrConfig {
    fn default() -> Self {
        SsbrConfig {
            m_slices: 8,
            volumes_per_batch: 32,
            slices_per_batch: 256,
            learning_rate: 0.002,
            max_iterations: 1500,
            hard_r_threshold: 0.5,
            oversample_factor: 3,
            hidden_dims: vec![32],
        }
    }
}

impl SsbrConfig {
    pub fn validate(&self) -> Result<()> {
        if self.m_slices < 3 {
            return Err(Error::Config("m_slices must be at least 3".into()));
        }
        if self.slices_per_batch != self.m_slices * self.volumes_per_batch {
            return Err(Error::Config(
                "slices_per_batch must equal m_slices * volumes_per_batch".into(),
            ));
        }
        if !(self.learning_rate > 0.0) || self.oversample_factor == 0 {
            return Err(Error::Config(
                "learning_rate and oversample_factor must be positive".into(),
            ));
        }
        Ok(())
    }

    /// Layer widths of the regressor for `input_dim`-dimensional slices.
    pub fn layer_dims(&self, input_dim: usize) -> Vec<usize> {
        let mut dims = vec![input_dim];
        dims.extend(&self.hidden_dims);
        dims.push(1);
        dims
    }
}

/// Number of `(j, k)` pairs with `k >= 1` placing `m` equidistant slices
/// inside a volume of `len` slices.
pub fn feasible_slice_sets(len: usize, m: usize) -> usize {
    if m < 2 {
        return 0;
    }
    (1..)
        .map(|k| k * (m - 1))
        .take_while(|span| *span < len)
        .map(|span| len - span)
        .sum()
}

/// Uniformly samples `(j, k)` over all feasible pairs and returns
/// `j, j+k, ..., j+k(m-1)`.
pub fn sample_slice_set(len: usize, m: usize, rng: &mut impl Rng) -> Result<Vec<usize>> {
    let total = feasible_slice_sets(len, m);
    if total == 0 {
        return Err(Error::InfeasibleSliceSet { len, m });
    }
    let mut r = rng.random_range(0..total);
    let mut k = 1;
    loop {
        let starts = len - k * (m - 1);
        if r < starts {
            return Ok((0..m).map(|i| r + k * i).collect());
        }
        r -= starts;
        k += 1;
    }
}

/// Smooth L1: `0.5 x^2` for `|x| < 1`, `|x| - 0.5` otherwise.
pub fn smooth_l1(x: f64) -> f64 {
    if x.abs() < 1.0 {
        0.5 * x * x
    } else {
        x.abs() - 0.5
    }
}

fn smooth_l1_grad(x: f64) -> f64 {
    if x.abs() < 1.0 {
        x
    } else {
        x.signum()
    }
}

/// `-log(sigmoid(x))`, stable for large |x|.
fn neg_log_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        (-x).exp().ln_1p()
    } else {
        -x + x.exp().ln_1p()
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Order and distance terms of the body-part loss, kept separately.
#[derive(Debug, Clone, PartialEq)]
pub struct SsbrLoss {
    pub order: f64,
    pub dist: f64,
    /// Gradient with respect to each score, grouped like the input.
    pub grads: Vec<Vec<f64>>,
}

impl SsbrLoss {
    pub fn total(&self) -> f64 {
        self.order + self.dist
    }
}

/// Loss over groups of scores, one group per volume in slice order.
pub fn ssbr_loss<S: AsRef<[f64]>>(scores: &[S]) -> SsbrLoss {
    let mut out = SsbrLoss {
        order: 0.0,
        dist: 0.0,
        grads: Vec::with_capacity(scores.len()),
    };
    for s in scores {
        let s = s.as_ref();
        let mut g = vec![0.0; s.len()];
        let gaps: Vec<f64> = s.windows(2).map(|w| w[1] - w[0]).collect();
        for (i, d) in gaps.iter().enumerate() {
            out.order += neg_log_sigmoid(*d);
            // d/dd [-log sigmoid(d)] = -sigmoid(-d)
            let gd = -sigmoid(-d);
            g[i + 1] += gd;
            g[i] -= gd;
        }
        for (i, w) in gaps.windows(2).enumerate() {
            let x = w[1] - w[0];
            out.dist += smooth_l1(x);
            // x = s[i+2] - 2 s[i+1] + s[i]
            let gx = smooth_l1_grad(x);
            g[i + 2] += gx;
            g[i + 1] -= 2.0 * gx;
            g[i] += gx;
        }
        out.grads.push(g);
    }
    out
}

/// Pearson correlation; zero when either side is constant.
pub fn pearson(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len().min(y.len());
    if n < 2 {
        return 0.0;
    }
    let mx = x[..n].iter().sum::<f64>() / n as f64;
    let my = y[..n].iter().sum::<f64>() / n as f64;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x[..n].iter().zip(&y[..n]) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        0.0
    } else {
        sxy / (sxx * syy).sqrt()
    }
}

/// Scores for every slice of a volume.
pub fn score_volume(net: &Mlp, volume: &Volume) -> Result<Vec<f64>> {
    volume
        .slices
        .iter()
        .map(|s| net.forward(s).map(|o| o[0]))
        .collect()
}

/// Correlation between slice index and predicted score.
pub fn volume_correlation(net: &Mlp, volume: &Volume) -> Result<f64> {
    let scores = score_volume(net, volume)?;
    let idx: Vec<f64> = (0..scores.len()).map(|i| i as f64).collect();
    Ok(pearson(&idx, &scores))
}

/// Training list for the second phase: each eligible volume once, plus
/// `oversample_factor - 1` extra copies of each hard volume.
pub fn resampled_training_set(eligible: &[usize], hard: &[usize], oversample_factor: usize) -> Vec<usize> {
    let mut out = eligible.to_vec();
    for _ in 1..oversample_factor {
        out.extend_from_slice(hard);
    }
    out
}

#[derive(Debug, Clone)]
pub struct SsbrOutcome {
    pub net: Mlp,
    /// Per-volume index/score correlation after the first phase, aligned
    /// with the input volumes (`NaN` for ineligible volumes).
    pub phase1_r: Vec<f64>,
    /// Indices of volumes flagged hard after the first phase.
    pub hard_volumes: Vec<usize>,
    pub phase1_set: Vec<usize>,
    pub phase2_set: Vec<usize>,
    /// Mean loss per iteration over both phases.
    pub history: Vec<f64>,
}

fn run_phase(
    volumes: &[Volume],
    train_set: &[usize],
    net: &mut Mlp,
    cfg: &SsbrConfig,
    history: &mut Vec<f64>,
    rng: &mut impl Rng,
) -> Result<()> {
    let sgd = SgdConfig::constant(cfg.learning_rate, cfg.max_iterations);
    for it in 0..cfg.max_iterations {
        let picks = sample_indices(rng, train_set.len(), cfg.volumes_per_batch);
        let mut traces = Vec::with_capacity(cfg.slices_per_batch);
        let mut scores = Vec::with_capacity(cfg.volumes_per_batch);
        for p in picks.iter() {
            let vol = &volumes[train_set[p]];
            let ix = sample_slice_set(vol.len(), cfg.m_slices, rng)?;
            let mut s = Vec::with_capacity(ix.len());
            for i in ix {
                let t = net.forward_trace(&vol.slices[i])?;
                s.push(t.output[0]);
                traces.push(t);
            }
            scores.push(s);
        }
        let loss = ssbr_loss(&scores);
        let mut grads = Gradients::zeros_like(net);
        for (t, g) in traces.iter().zip(loss.grads.iter().flatten()) {
            net.accumulate(t, &[*g], &mut grads)?;
        }
        sgd_step(net, &grads, &sgd, it)?;
        history.push(loss.total() / scores.len() as f64);
    }
    Ok(())
}

/// Two-phase training: all eligible volumes first, then again with hard
/// volumes (index/score correlation below `hard_r_threshold`)
/// oversampled. The second phase continues from the first phase weights.
pub fn train_ssbr(
    volumes: &[Volume],
    mut net: Mlp,
    cfg: &SsbrConfig,
    rng: &mut impl Rng,
) -> Result<SsbrOutcome> {
    cfg.validate()?;
    if net.output_dim() != 1 || net.normalize_output {
        return Err(Error::Config("regressor must emit one unnormalized score".into()));
    }
    let eligible: Vec<usize> = volumes
        .iter()
        .enumerate()
        .filter(|(_, v)| v.len() >= cfg.m_slices)
        .map(|(i, _)| i)
        .collect();
    if eligible.len() < cfg.volumes_per_batch {
        return Err(Error::Config(format!(
            "{} eligible volumes, {} needed per batch",
            eligible.len(),
            cfg.volumes_per_batch
        )));
    }

    let mut history = Vec::with_capacity(2 * cfg.max_iterations);
    run_phase(volumes, &eligible, &mut net, cfg, &mut history, rng)?;

    let mut phase1_r = vec![f64::NAN; volumes.len()];
    let mut hard = Vec::new();
    for &i in &eligible {
        let r = volume_correlation(&net, &volumes[i])?;
        phase1_r[i] = r;
        if r < cfg.hard_r_threshold {
            hard.push(i);
        }
    }
    let phase2_set = resampled_training_set(&eligible, &hard, cfg.oversample_factor);
    run_phase(volumes, &phase2_set, &mut net, cfg, &mut history, rng)?;

    Ok(SsbrOutcome {
        net,
        phase1_r,
        hard_volumes: hard,
        phase1_set: eligible,
        phase2_set,
        history,
    })
}

/// Percentile with linear interpolation between order statistics.
pub fn percentile(sorted: &[f64], p: f64) -> f64 {
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let pos = p / 100.0 * (n - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// Affine map from the [p1, p99] score range onto `[0, 1]`, clamped.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoreNormalizer {
    pub low: f64,
    pub high: f64,
}

impl ScoreNormalizer {
    pub fn fit(scores: &[f64]) -> Result<Self> {
        let mut sorted: Vec<f64> = scores.iter().copied().filter(|v| v.is_finite()).collect();
        if sorted.is_empty() {
            return Err(Error::Empty("scores"));
        }
        sorted.sort_by(f64::total_cmp);
        let low = percentile(&sorted, 1.0);
        let high = percentile(&sorted, 99.0);
        if !(high > low) {
            return Err(Error::ConstantScores);
        }
        Ok(ScoreNormalizer { low, high })
    }

    pub fn z(&self, score: f64) -> f64 {
        ((score - self.low) / (self.high - self.low)).clamp(0.0, 1.0)
    }
}

/// Fits the normalizer on `scores` and returns it with the z of each score.
pub fn normalize_scores(scores: &[f64]) -> Result<(ScoreNormalizer, Vec<f64>)> {
    let n = ScoreNormalizer::fit(scores)?;
    let z = scores.iter().map(|s| n.z(*s)).collect();
    Ok((n, z))
}

/// Coarse body region of a relative z coordinate: 0 chest, 1 abdomen,
/// 2 pelvis, split at thirds.
pub fn body_region(true_z: f64) -> u8 {
    if true_z < 1.0 / 3.0 {
        0
    } else if true_z < 2.0 / 3.0 {
        1
    } else {
        2
    }
}

/// Two score thresholds splitting slices into three ordered regions.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RegionThresholds {
    pub lower: f64,
    pub upper: f64,
}

impl RegionThresholds {
    pub fn classify(&self, score: f64) -> u8 {
        if score < self.lower {
            0
        } else if score < self.upper {
            1
        } else {
            2
        }
    }

    /// Chooses the pair of thresholds, among up to 400 quantile cut points,
    /// that maximizes accuracy on `(score, region)` pairs.
    pub fn fit(scores: &[f64], regions: &[u8]) -> Result<Self> {
        if scores.is_empty() || scores.len() != regions.len() {
            return Err(Error::Empty("labeled scores"));
        }
        let mut pairs: Vec<(f64, u8)> = scores.iter().copied().zip(regions.iter().copied()).collect();
        pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
        let n = pairs.len();
        // prefix[c][i]: slices of region c among the i lowest scores
        let mut prefix = [vec![0usize; n + 1], vec![0usize; n + 1], vec![0usize; n + 1]];
        for (i, (_, r)) in pairs.iter().enumerate() {
            for (c, p) in prefix.iter_mut().enumerate() {
                p[i + 1] = p[i] + usize::from(*r as usize == c);
            }
        }
        let steps = n.min(400);
        let mut cuts: Vec<usize> = (0..=steps).map(|q| q * n / steps).collect();
        cuts.dedup();
        let mut best = (0usize, 0usize, 0usize);
        for (a, &i) in cuts.iter().enumerate() {
            for &j in &cuts[a..] {
                let correct = prefix[0][i] + (prefix[1][j] - prefix[1][i]) + (prefix[2][n] - prefix[2][j]);
                if correct > best.0 {
                    best = (correct, i, j);
                }
            }
        }
        let cut_value = |i: usize| -> f64 {
            if i == 0 {
                f64::NEG_INFINITY
            } else if i == n {
                f64::INFINITY
            } else {
                0.5 * (pairs[i - 1].0 + pairs[i].0)
            }
        };
        Ok(RegionThresholds {
            lower: cut_value(best.1),
            upper: cut_value(best.2),
        })
    }
}

/// One row of the scores table.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SliceScore {
    pub volume_id: u64,
    pub slice_idx: usize,
    pub score: f64,
    pub z: f64,
}

pub fn write_scores(rows: &[SliceScore], path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = csv::Writer::from_writer(BufWriter::new(file));
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

pub fn read_scores(path: &Path) -> Result<Vec<SliceScore>> {
    let mut rdr = csv::Reader::from_path(path)?;
    rdr.deserialize().map(|r| r.map_err(Error::from)).collect()
}

/// Writes volumes as CSV: `volume_id, patient_id, study_id, slice_idx,
/// true_z, s_0 .. s_{D-1}` (`true_z` empty when unknown).
pub fn write_volumes(volumes: &[Volume], path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = csv::Writer::from_writer(BufWriter::new(file));
    let dim = volumes.iter().find_map(|v| v.slices.first()).map_or(0, Vec::len);
    let mut header: Vec<String> = ["volume_id", "patient_id", "study_id", "slice_idx", "true_z"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    header.extend((0..dim).map(|j| format!("s_{j}")));
    w.write_record(&header)?;
    for v in volumes {
        for (i, s) in v.slices.iter().enumerate() {
            let mut row = vec![
                v.volume_id.to_string(),
                v.patient_id.to_string(),
                v.study_id.to_string(),
                i.to_string(),
                v.true_z.as_ref().map(|z| z[i].to_string()).unwrap_or_default(),
            ];
            row.extend(s.iter().map(f64::to_string));
            w.write_record(&row)?;
        }
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

/// Reads volumes written by [`write_volumes`]. Rows of one volume must be
/// contiguous and in slice order.
pub fn read_volumes(path: &Path) -> Result<Vec<Volume>> {
    let mut rdr = csv::Reader::from_path(path)?;
    let bad = |row: usize, m: String| Error::BadRow {
        path: path.to_path_buf(),
        row,
        message: m,
    };
    let mut out: Vec<Volume> = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let row = i + 1;
        let rec = rec?;
        let field = |k: usize| rec.get(k).unwrap_or("").trim();
        let num = |k: usize| -> Result<u64> {
            field(k)
                .parse()
                .map_err(|_| bad(row, format!("cannot parse `{}`", field(k))))
        };
        let (vid, pid, sid, idx) = (num(0)?, num(1)?, num(2)?, num(3)? as usize);
        let tz = if field(4).is_empty() {
            None
        } else {
            Some(
                field(4)
                    .parse::<f64>()
                    .map_err(|_| bad(row, "bad true_z".into()))?,
            )
        };
        let feats = rec
            .iter()
            .skip(5)
            .map(|s| s.trim().parse::<f64>().map_err(|_| bad(row, format!("bad feature `{s}`"))))
            .collect::<Result<Vec<_>>>()?;
        let start_new = out.last().is_none_or(|v| v.volume_id != vid);
        if start_new {
            out.push(Volume {
                volume_id: vid,
                patient_id: pid,
                study_id: sid,
                slices: Vec::new(),
                true_z: tz.map(|_| Vec::new()),
            });
        }
        let v = out.last_mut().unwrap();
        if idx != v.slices.len() {
            return Err(bad(row, format!("slice {idx} out of order in volume {vid}")));
        }
        v.slices.push(feats);
        match (&mut v.true_z, tz) {
            (Some(z), Some(t)) => z.push(t),
            (None, None) => {}
            _ => return Err(bad(row, "true_z present on only some slices".into())),
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn smooth_l1_values() {
        assert_eq!(smooth_l1(0.0), 0.0);
        assert_eq!(smooth_l1(0.5), 0.125);
        assert_eq!(smooth_l1(2.0), 1.5);
        assert_eq!(smooth_l1(-2.0), 1.5);
        // continuous and C1 at the joint
        assert!((smooth_l1(1.0 - 1e-9) - smooth_l1(1.0)).abs() < 1e-8);
        assert!((smooth_l1_grad(1.0 - 1e-12) - smooth_l1_grad(1.0)).abs() < 1e-9);
    }

    #[test]
    fn ordered_scores() {
        let l = ssbr_loss(&[vec![0.0, 1.0, 2.0]]);
        assert!((l.order - 0.62652).abs() < 1e-5, "{}", l.order);
        assert_eq!(l.dist, 0.0);
        let r = ssbr_loss(&[vec![2.0, 1.0, 0.0]]);
        assert!((r.order - 2.62652).abs() < 1e-5, "{}", r.order);
        assert!(r.order > l.order);
    }

    #[test]
    fn equal_gaps_have_no_distance_loss() {
        let l = ssbr_loss(&[vec![-3.0, -1.5, 0.0, 1.5, 3.0], vec![7.0, 4.0, 1.0]]);
        assert_eq!(l.dist, 0.0);
    }

    #[test]
    fn log_sigmoid_is_stable() {
        let l = ssbr_loss(&[vec![800.0, 0.0]]);
        assert!((l.order - 800.0).abs() < 1e-9);
        assert!(l.grads[0].iter().all(|g| g.is_finite()));
    }

    #[test]
    fn transpositions_never_lower_order_loss() {
        let base = [0.0, 0.7, 1.1, 2.5];
        let reference = ssbr_loss(&[base.to_vec()]).order;
        for i in 0..4 {
            for j in i + 1..4 {
                let mut s = base;
                s.swap(i, j);
                assert!(ssbr_loss(&[s.to_vec()]).order >= reference);
            }
        }
    }

    #[test]
    fn forced_slice_set() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(feasible_slice_sets(8, 8), 1);
        assert_eq!(sample_slice_set(8, 8, &mut rng).unwrap(), (0..8).collect::<Vec<_>>());
        assert!(sample_slice_set(7, 8, &mut rng).is_err());
    }

    #[test]
    fn slice_sets_are_equidistant_and_in_range() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for len in 8..60 {
            let ix = sample_slice_set(len, 8, &mut rng).unwrap();
            let k = ix[1] - ix[0];
            assert!(k >= 1);
            assert!(ix.windows(2).all(|w| w[1] - w[0] == k));
            assert!(*ix.last().unwrap() < len);
        }
    }

    #[test]
    fn feasibility_count_matches_enumeration() {
        for len in 0..=20usize {
            let mut brute = 0;
            for j in 0..len {
                for k in 1..len {
                    if j + 2 * k < len {
                        brute += 1;
                    }
                }
            }
            let closed: usize = (1..=len).map(|k| len.saturating_sub(2 * k)).sum();
            assert_eq!(feasible_slice_sets(len, 3), brute, "len {len}");
            assert_eq!(closed, brute);
        }
    }

    #[test]
    fn slice_set_sampling_is_uniform_over_pairs() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (len, m) = (9, 3);
        let total = feasible_slice_sets(len, m);
        let mut counts = std::collections::HashMap::new();
        let n = 40_000;
        for _ in 0..n {
            let ix = sample_slice_set(len, m, &mut rng).unwrap();
            *counts.entry((ix[0], ix[1] - ix[0])).or_insert(0usize) += 1;
        }
        assert_eq!(counts.len(), total);
        let expect = n as f64 / total as f64;
        for c in counts.values() {
            assert!((*c as f64 - expect).abs() < 5.0 * expect.sqrt());
        }
    }

    #[test]
    fn uniform_scores_normalize_to_unit_interval() {
        let scores: Vec<f64> = (0..=8000).map(|i| -3.0 + 8.0 * i as f64 / 8000.0).collect();
        let (n, z) = normalize_scores(&scores).unwrap();
        assert_eq!(n.z(-3.0 + 1e-6), 0.0);
        assert_eq!(n.z(5.0 - 1e-6), 1.0);
        assert!(z.windows(2).all(|w| w[0] <= w[1]));
        // below p1 clamps to exactly zero
        assert!(n.low > -3.0);
        assert_eq!(n.z(n.low - 0.01), 0.0);
        assert!((n.low - (-3.0 + 0.08)).abs() < 1e-9);
    }

    #[test]
    fn constant_scores_rejected() {
        assert!(matches!(normalize_scores(&[2.0; 10]), Err(Error::ConstantScores)));
    }

    #[test]
    fn no_hard_volumes_keeps_training_set() {
        let eligible = vec![0, 1, 2, 5];
        assert_eq!(resampled_training_set(&eligible, &[], 3), eligible);
        assert_eq!(
            resampled_training_set(&eligible, &[1], 3),
            vec![0, 1, 2, 5, 1, 1]
        );
    }

    #[test]
    fn pearson_of_linear_data() {
        let x = [1.0, 2.0, 3.0, 4.0];
        assert!((pearson(&x, &[2.0, 4.0, 6.0, 8.0]) - 1.0).abs() < 1e-12);
        assert!((pearson(&x, &[8.0, 6.0, 4.0, 2.0]) + 1.0).abs() < 1e-12);
    }

    #[test]
    fn region_thresholds_separate_clean_data() {
        let scores: Vec<f64> = (0..300).map(|i| i as f64 / 300.0).collect();
        let regions: Vec<u8> = scores.iter().map(|z| body_region(*z)).collect();
        let t = RegionThresholds::fit(&scores, &regions).unwrap();
        let correct = scores
            .iter()
            .zip(&regions)
            .filter(|(s, r)| t.classify(**s) == **r)
            .count();
        assert_eq!(correct, 300);
    }
}
