//! Ground-truthed synthetic cohorts.
//!
//! Every patient carries a few lesion instances. Each instance has a type,
//! a location drawn around one of its type's sites and a base size, and is
//! measured once per study (occasionally twice, on a second series) with
//! small cue jitter and size drift. Features are
//!
//! ```text
//! center[type] + G_loc * location + G_size * size
//!     + instance offset + nuisance (low rank, per study) + noise
//! ```
//!
//! Each patient study also yields a volume of slice features that are smooth
//! monotone functions of the slice's true z.

use std::fs::File;
use std::io::BufWriter;
use std::path::Path;

use rand::distr::weighted::WeightedIndex;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{CueVector, Dataset, DiameterMeasurement, LesionRecord, Segment, Split};
use crate::ssbr::Volume;

const IMAGE_PX: f64 = 512.0;
const PIXEL_MM: f64 = 0.7;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticConfig {
    pub n_types: usize,
    pub n_patients: usize,
    /// Inclusive range.
    pub studies_per_patient: [usize; 2],
    /// Inclusive range of distinct lesion instances per patient.
    pub lesions_per_patient: [usize; 2],
    /// Probability that a measurement is repeated on a second series.
    pub extra_series_prob: f64,
    pub feature_dim: usize,
    /// Expected distance between two type centers.
    pub type_center_separation: f64,
    /// Norm of the feature direction attached to each cue dimension.
    pub cue_feature_gain: f64,
    /// Per-dimension sd of the persistent per-instance feature offset.
    pub instance_sd: f64,
    /// Per-dimension sd of the per-measurement isotropic noise.
    pub feature_noise_sd: f64,
    /// Per-direction sd of the low-rank nuisance, drawn once per study.
    pub nuisance_sd: f64,
    pub nuisance_rank: usize,
    /// Sd of the follow-up location jitter (truncated at 1.5 sd).
    pub cue_noise_sd: f64,
    /// Maximum relative size change between studies.
    pub size_drift: f64,
    pub sites_per_type: usize,
    /// Per-dimension sd of instance locations around their site.
    pub location_spread: f64,
    /// Range of long diameters in mm, sampled log-uniformly.
    pub size_range_mm: [f64; 2],
    pub label_flip_rate: f64,
    pub seed_fraction: f64,
    pub val_fraction: f64,
    pub test_fraction: f64,
    pub type_proportions: Option<Vec<f64>>,
    /// Inclusive range.
    pub slices_per_volume: [usize; 2],
    pub slice_feature_dim: usize,
    pub slice_noise_sd: f64,
    /// Each volume's slice features are scaled by a gain drawn from
    /// `1 ± slice_gain_jitter`.
    pub slice_gain_jitter: f64,
    /// `None` leaves the seed to the caller (the run configuration derives
    /// one from its global seed).
    pub rng_seed: Option<u64>,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            n_types: 8,
            n_patients: 240,
            studies_per_patient: [1, 4],
            lesions_per_patient: [1, 4],
            extra_series_prob: 0.3,
            feature_dim: 32,
            type_center_separation: 8.0,
            cue_feature_gain: 10.0,
            instance_sd: 0.15,
            feature_noise_sd: 0.1,
            nuisance_sd: 3.0,
            nuisance_rank: 4,
            cue_noise_sd: 0.004,
            size_drift: 0.3,
            sites_per_type: 2,
            location_spread: 0.01,
            size_range_mm: [4.0, 60.0],
            label_flip_rate: 0.0,
            seed_fraction: 0.25,
            val_fraction: 0.1,
            test_fraction: 0.25,
            type_proportions: None,
            slices_per_volume: [80, 120],
            slice_feature_dim: 16,
            slice_noise_sd: 0.02,
            slice_gain_jitter: 0.03,
            rng_seed: None,
        }
    }
}

fn check_range(name: &str, r: [usize; 2]) -> Result<()> {
    if r[0] == 0 || r[0] > r[1] {
        return Err(Error::Config(format!("{name} must be a non-empty positive range")));
    }
    Ok(())
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        check_range("studies_per_patient", self.studies_per_patient)?;
        check_range("lesions_per_patient", self.lesions_per_patient)?;
        check_range("slices_per_volume", self.slices_per_volume)?;
        if self.n_types < 2 || self.n_types > 255 {
            return Err(Error::Config("n_types must be in 2..=255".into()));
        }
        for (name, v) in [
            ("n_patients", self.n_patients),
            ("feature_dim", self.feature_dim),
            ("sites_per_type", self.sites_per_type),
            ("slice_feature_dim", self.slice_feature_dim),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        for (name, v) in [
            ("extra_series_prob", self.extra_series_prob),
            ("label_flip_rate", self.label_flip_rate),
            ("seed_fraction", self.seed_fraction),
            ("val_fraction", self.val_fraction),
            ("test_fraction", self.test_fraction),
            ("size_drift", self.size_drift),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Config(format!("{name} = {v} is outside [0, 1]")));
            }
        }
        for (name, v) in [
            ("type_center_separation", self.type_center_separation),
            ("cue_feature_gain", self.cue_feature_gain),
            ("instance_sd", self.instance_sd),
            ("feature_noise_sd", self.feature_noise_sd),
            ("nuisance_sd", self.nuisance_sd),
            ("cue_noise_sd", self.cue_noise_sd),
            ("location_spread", self.location_spread),
            ("slice_noise_sd", self.slice_noise_sd),
            ("slice_gain_jitter", self.slice_gain_jitter),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be finite and non-negative")));
            }
        }
        let [lo, hi] = self.size_range_mm;
        if !(lo > 0.0 && lo <= hi) {
            return Err(Error::Config("size_range_mm must satisfy 0 < min <= max".into()));
        }
        if self.slices_per_volume[0] < 2 {
            return Err(Error::Config("volumes need at least two slices".into()));
        }
        let split_total = self.seed_fraction + self.val_fraction + self.test_fraction;
        if split_total > 1.0 + 1e-12 {
            return Err(Error::Config(format!(
                "split fractions sum to {split_total}, more patients than exist"
            )));
        }
        if let Some(p) = &self.type_proportions {
            if p.len() != self.n_types || p.iter().any(|w| !(*w >= 0.0)) || p.iter().sum::<f64>() <= 0.0
            {
                return Err(Error::Config(
                    "type_proportions needs n_types non-negative weights with a positive sum".into(),
                ));
            }
        }
        Ok(())
    }
}

/// Generator truth for one lesion measurement.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TruthRow {
    pub lesion_id: u64,
    pub instance_id: u64,
    pub true_type: u8,
    pub true_z: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Cohort {
    /// Raw (unnormalized) cues; seed labels possibly flipped.
    pub dataset: Dataset,
    /// Aligned with `dataset.records`.
    pub truth: Vec<TruthRow>,
    /// Features without instance offset, nuisance or noise; aligned with
    /// `dataset.records`.
    pub clean_features: Vec<Vec<f64>>,
    pub volumes: Vec<Volume>,
}

impl Cohort {
    /// Lesion ids grouped by instance, each group sorted, groups ordered by
    /// their smallest id.
    pub fn instance_groups(&self) -> Vec<Vec<u64>> {
        instance_groups(&self.truth)
    }
}

/// Groups truth rows by `instance_id`.
pub fn instance_groups(truth: &[TruthRow]) -> Vec<Vec<u64>> {
    let mut map: std::collections::BTreeMap<u64, Vec<u64>> = Default::default();
    for t in truth {
        map.entry(t.instance_id).or_default().push(t.lesion_id);
    }
    let mut groups: Vec<Vec<u64>> = map
        .into_values()
        .map(|mut g| {
            g.sort_unstable();
            g
        })
        .collect();
    groups.sort_by_key(|g| g[0]);
    groups
}

/// `N(0, sd)` truncated to `[-1.5 sd, 1.5 sd]` by rejection.
fn truncated(rng: &mut impl Rng, sd: f64) -> f64 {
    if sd == 0.0 {
        return 0.0;
    }
    let n = Normal::new(0.0, sd).expect("finite sd");
    loop {
        let x = n.sample(rng);
        if x.abs() <= 1.5 * sd {
            return x;
        }
    }
}

fn gaussian_vec(rng: &mut impl Rng, dim: usize, sd: f64) -> Vec<f64> {
    let n = Normal::new(0.0, sd.max(0.0)).expect("finite sd");
    (0..dim).map(|_| n.sample(rng)).collect()
}

fn unit_vec(rng: &mut impl Rng, dim: usize) -> Vec<f64> {
    loop {
        let v = gaussian_vec(rng, dim, 1.0);
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-9 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

fn axpy(out: &mut [f64], a: f64, x: &[f64]) {
    for (o, v) in out.iter_mut().zip(x) {
        *o += a * v;
    }
}

struct Instance {
    id: u64,
    kind: u8,
    location: [f64; 3],
    long_mm: f64,
    aspect: f64,
    offset: Vec<f64>,
}

struct SliceModel {
    slope: Vec<f64>,
    center: Vec<f64>,
}

impl SliceModel {
    fn new(rng: &mut impl Rng, dim: usize) -> Self {
        SliceModel {
            slope: (0..dim).map(|_| rng.random_range(3.0..10.0)).collect(),
            center: (0..dim).map(|_| rng.random_range(0.0..1.0)).collect(),
        }
    }

    fn slice(&self, rng: &mut impl Rng, z: f64, gain: f64, noise: f64) -> Vec<f64> {
        let n = Normal::new(0.0, noise).expect("finite sd");
        self.slope
            .iter()
            .zip(&self.center)
            .map(|(a, b)| gain / (1.0 + (-a * (z - b)).exp()) + n.sample(rng))
            .collect()
    }
}

/// Generates a cohort; deterministic in `cfg` (the seed defaults to 0 when
/// unset).
pub fn generate_cohort(cfg: &SyntheticConfig) -> Result<Cohort> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.rng_seed.unwrap_or(0));
    let d = cfg.feature_dim;

    let center_sd = cfg.type_center_separation / (2.0 * d as f64).sqrt();
    let centers: Vec<Vec<f64>> = (0..cfg.n_types).map(|_| gaussian_vec(&mut rng, d, center_sd)).collect();
    let cue_dirs: Vec<Vec<f64>> = (0..5).map(|_| unit_vec(&mut rng, d)).collect();
    let nuisance: Vec<Vec<f64>> = (0..cfg.nuisance_rank).map(|_| unit_vec(&mut rng, d)).collect();
    let sites: Vec<Vec<[f64; 3]>> = (0..cfg.n_types)
        .map(|_| {
            (0..cfg.sites_per_type)
                .map(|_| {
                    [
                        rng.random_range(0.15..0.85),
                        rng.random_range(0.15..0.85),
                        rng.random_range(0.1..0.9),
                    ]
                })
                .collect()
        })
        .collect();
    let slice_model = SliceModel::new(&mut rng, cfg.slice_feature_dim);
    let type_dist = match &cfg.type_proportions {
        Some(p) => WeightedIndex::new(p).map_err(|e| Error::Config(e.to_string()))?,
        None => WeightedIndex::new(vec![1.0; cfg.n_types]).expect("uniform weights"),
    };

    // Patient-level split assignment.
    let n = cfg.n_patients;
    let n_seed = (cfg.seed_fraction * n as f64).round() as usize;
    let n_val = (cfg.val_fraction * n as f64).round() as usize;
    let n_test = (cfg.test_fraction * n as f64).round() as usize;
    if n_seed + n_val + n_test > n {
        return Err(Error::Config(format!(
            "{} seed + {n_val} validation + {n_test} test patients requested from {n}",
            n_seed
        )));
    }
    if cfg.seed_fraction > 0.0 && n_seed == 0 {
        return Err(Error::Config("seed fraction rounds to zero patients".into()));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    let mut split_of = vec![Split::Unlabeled; n];
    for (rank, &p) in order.iter().enumerate() {
        split_of[p] = if rank < n_seed {
            Split::Seed
        } else if rank < n_seed + n_val {
            Split::Validation
        } else if rank < n_seed + n_val + n_test {
            Split::Test
        } else {
            Split::Unlabeled
        };
    }

    let log_lo = cfg.size_range_mm[0].ln();
    let log_hi = cfg.size_range_mm[1].ln();
    let size_max = cfg.size_range_mm[1] * (1.0 + cfg.size_drift);
    let mut records = Vec::new();
    let mut truth = Vec::new();
    let mut clean = Vec::new();
    let mut volumes = Vec::new();
    let mut next_lesion = 1u64;
    let mut next_instance = 1u64;

    for (p, &split) in split_of.iter().enumerate() {
        let patient_id = p as u64 + 1;
        let n_studies = rng.random_range(cfg.studies_per_patient[0]..=cfg.studies_per_patient[1]);
        let n_inst = rng.random_range(cfg.lesions_per_patient[0]..=cfg.lesions_per_patient[1]);
        let instances: Vec<Instance> = (0..n_inst)
            .map(|_| {
                let kind = type_dist.sample(&mut rng);
                let site = sites[kind][rng.random_range(0..cfg.sites_per_type)];
                let spread = gaussian_vec(&mut rng, 3, cfg.location_spread);
                let location: [f64; 3] = std::array::from_fn(|k| (site[k] + spread[k]).clamp(0.02, 0.98));
                let id = next_instance;
                next_instance += 1;
                Instance {
                    id,
                    kind: kind as u8,
                    location,
                    long_mm: rng.random_range(log_lo..=log_hi).exp(),
                    aspect: rng.random_range(0.5..0.95),
                    offset: gaussian_vec(&mut rng, d, cfg.instance_sd),
                }
            })
            .collect();

        for s in 0..n_studies {
            let study_id = s as u64 + 1;
            let n_slices = rng.random_range(cfg.slices_per_volume[0]..=cfg.slices_per_volume[1]);
            let z0 = rng.random_range(0.0..0.05);
            let z1 = rng.random_range(0.95..1.0);
            let gain = rng.random_range(1.0 - cfg.slice_gain_jitter..=1.0 + cfg.slice_gain_jitter);
            let zs: Vec<f64> = (0..n_slices)
                .map(|j| z0 + (z1 - z0) * j as f64 / (n_slices - 1) as f64)
                .collect();
            let slices = zs
                .iter()
                .map(|&z| slice_model.slice(&mut rng, z, gain, cfg.slice_noise_sd))
                .collect();
            volumes.push(Volume {
                volume_id: volumes.len() as u64 + 1,
                patient_id,
                study_id,
                slices,
                true_z: Some(zs.clone()),
            });

            for inst in &instances {
                // Size drift relative to the first study.
                let drift = if s == 0 {
                    1.0
                } else {
                    1.0 + truncated(&mut rng, cfg.size_drift / 1.5)
                };
                let series = if rng.random::<f64>() < cfg.extra_series_prob { 2 } else { 1 };
                // Acquisition nuisance is shared by every series of a study.
                let nuisance_g: Vec<f64> = nuisance
                    .iter()
                    .map(|_| Normal::new(0.0, cfg.nuisance_sd).expect("finite sd").sample(&mut rng))
                    .collect();
                for series_id in 1..=series {
                    let mut loc = inst.location;
                    for l in &mut loc {
                        *l = (*l + truncated(&mut rng, cfg.cue_noise_sd)).clamp(0.0, 1.0);
                    }
                    let long_mm = inst.long_mm * drift;
                    let short_mm = long_mm * inst.aspect;
                    let slice_idx = nearest_slice(&zs, loc[2]);
                    let diameters = diameters_at(&mut rng, loc, long_mm, short_mm);

                    let size_n = [long_mm / size_max, short_mm / size_max];
                    let mut c = centers[inst.kind as usize].clone();
                    for (k, v) in loc.iter().chain(&size_n).enumerate() {
                        axpy(&mut c, cfg.cue_feature_gain * v, &cue_dirs[k]);
                    }
                    let mut f = c.clone();
                    axpy(&mut f, 1.0, &inst.offset);
                    for (dir, g) in nuisance.iter().zip(&nuisance_g) {
                        axpy(&mut f, *g, dir);
                    }
                    axpy(&mut f, 1.0, &gaussian_vec(&mut rng, d, cfg.feature_noise_sd));

                    let mut label = None;
                    if split != Split::Unlabeled {
                        let mut l = inst.kind;
                        if split == Split::Seed && rng.random::<f64>() < cfg.label_flip_rate {
                            let shift = rng.random_range(1..cfg.n_types) as u8;
                            l = ((l as usize + shift as usize) % cfg.n_types) as u8;
                        }
                        label = Some(l);
                    }
                    let lesion_id = next_lesion;
                    next_lesion += 1;
                    records.push(LesionRecord {
                        lesion_id,
                        patient_id,
                        study_id,
                        series_id: series_id as u64,
                        slice_idx: slice_idx as u32,
                        diameters,
                        raw_location: loc,
                        cues: CueVector {
                            type_label: if split == Split::Seed { label } else { None },
                            location: loc,
                            size: [long_mm, short_mm],
                        },
                        true_type: label,
                        split,
                        feature: f,
                    });
                    truth.push(TruthRow {
                        lesion_id,
                        instance_id: inst.id,
                        true_type: inst.kind,
                        true_z: inst.location[2],
                    });
                    clean.push(c);
                }
            }
        }
    }

    Ok(Cohort {
        dataset: Dataset::new(records)?,
        truth,
        clean_features: clean,
        volumes,
    })
}

fn nearest_slice(zs: &[f64], z: f64) -> usize {
    let mut best = 0;
    for (j, v) in zs.iter().enumerate() {
        if (v - z).abs() < (zs[best] - z).abs() {
            best = j;
        }
    }
    best
}

fn diameters_at(rng: &mut impl Rng, loc: [f64; 3], long_mm: f64, short_mm: f64) -> DiameterMeasurement {
    let (cx, cy) = (loc[0] * IMAGE_PX, loc[1] * IMAGE_PX);
    let theta: f64 = rng.random_range(0.0..std::f64::consts::PI);
    let (c, s) = (theta.cos(), theta.sin());
    let hl = 0.5 * long_mm / PIXEL_MM;
    let hs = 0.5 * short_mm / PIXEL_MM;
    DiameterMeasurement {
        long_axis: Segment::new(cx - hl * c, cy - hl * s, cx + hl * c, cy + hl * s),
        short_axis: Segment::new(cx + hs * s, cy - hs * c, cx - hs * s, cy + hs * c),
        long_mm,
        short_mm,
    }
}

pub fn write_truth(rows: &[TruthRow], path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = csv::Writer::from_writer(BufWriter::new(file));
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

pub fn read_truth(path: &Path) -> Result<Vec<TruthRow>> {
    let mut rdr = csv::Reader::from_reader(File::open(path).map_err(|e| Error::io(path, e))?);
    rdr.deserialize().map(|r| r.map_err(Error::from)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SyntheticConfig {
        SyntheticConfig {
            n_patients: 40,
            rng_seed: Some(7),
            ..Default::default()
        }
    }

    #[test]
    fn same_seed_same_cohort() {
        let a = generate_cohort(&small()).unwrap();
        let b = generate_cohort(&small()).unwrap();
        assert_eq!(a, b);
        let mut other = small();
        other.rng_seed = Some(8);
        assert_ne!(a.dataset, generate_cohort(&other).unwrap().dataset);
    }

    #[test]
    fn zero_flip_rate_keeps_seed_labels() {
        let c = generate_cohort(&small()).unwrap();
        let mut seeds = 0;
        for (r, t) in c.dataset.records.iter().zip(&c.truth) {
            if r.split == Split::Seed {
                seeds += 1;
                assert_eq!(r.cues.type_label, Some(t.true_type));
            }
            if r.split == Split::Unlabeled {
                assert_eq!(r.true_type, None);
            }
        }
        assert!(seeds > 0);
    }

    #[test]
    fn replicas_stay_within_jitter_bound() {
        let cfg = small();
        let c = generate_cohort(&cfg).unwrap();
        let by_id: std::collections::HashMap<u64, &LesionRecord> =
            c.dataset.records.iter().map(|r| (r.lesion_id, r)).collect();
        for g in c.instance_groups() {
            for a in &g {
                for b in &g {
                    let (ra, rb) = (by_id[a], by_id[b]);
                    for k in 0..3 {
                        let diff = (ra.raw_location[k] - rb.raw_location[k]).abs();
                        assert!(diff < 3.0 * cfg.cue_noise_sd, "{diff}");
                    }
                }
            }
        }
    }

    #[test]
    fn measurements_are_valid() {
        let c = generate_cohort(&small()).unwrap();
        for r in &c.dataset.records {
            r.diameters.validate().unwrap();
            crate::ingest::bbox_from_diameters(&r.diameters).unwrap();
            let v = &c.volumes.iter().find(|v| v.patient_id == r.patient_id && v.study_id == r.study_id);
            assert!((r.slice_idx as usize) < v.unwrap().len());
        }
    }

    #[test]
    fn infeasible_splits_rejected() {
        let cfg = SyntheticConfig {
            seed_fraction: 0.7,
            test_fraction: 0.5,
            ..small()
        };
        assert!(generate_cohort(&cfg).is_err());
        let cfg = SyntheticConfig {
            n_patients: 1,
            seed_fraction: 0.1,
            ..small()
        };
        assert!(generate_cohort(&cfg).is_err());
    }
}
