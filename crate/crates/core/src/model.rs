//! Domain types shared across the pipeline and the embedding-space distance.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Number of lesion types used throughout (bone, abdomen, mediastinum,
/// liver, lung, kidney, soft tissue, pelvis).
pub const NUM_TYPES: usize = 8;

/// Which part of the cohort a lesion belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Split {
    /// Labeled seed lesions used to fit the type classifier.
    Seed,
    Validation,
    Test,
    Unlabeled,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Seed => "seed",
            Split::Validation => "val",
            Split::Test => "test",
            Split::Unlabeled => "unlabeled",
        }
    }

    pub fn parse(s: &str) -> Option<Split> {
        match s.trim() {
            "seed" => Some(Split::Seed),
            "val" => Some(Split::Validation),
            "test" => Some(Split::Test),
            "unlabeled" => Some(Split::Unlabeled),
            _ => None,
        }
    }

    /// Splits whose cues are used to fit normalizers and train embeddings.
    pub fn is_training(self) -> bool {
        matches!(self, Split::Seed | Split::Unlabeled)
    }
}

/// A line segment in pixel coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Segment {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl Segment {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Self {
        Segment { x1, y1, x2, y2 }
    }

    pub fn endpoints(&self) -> [(f64, f64); 2] {
        [(self.x1, self.y1), (self.x2, self.y2)]
    }
}

/// RECIST-style pair of diameters: the longest diameter and its longest
/// perpendicular diameter, with their physical lengths.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DiameterMeasurement {
    pub long_axis: Segment,
    pub short_axis: Segment,
    pub long_mm: f64,
    pub short_mm: f64,
}

impl DiameterMeasurement {
    pub fn validate(&self) -> Result<()> {
        if !(self.short_mm > 0.0) {
            return Err(Error::InvalidMeasurement(format!(
                "short diameter {} mm is not positive",
                self.short_mm
            )));
        }
        if self.long_mm < self.short_mm {
            return Err(Error::InvalidMeasurement(format!(
                "long diameter {} mm shorter than short diameter {} mm",
                self.long_mm, self.short_mm
            )));
        }
        Ok(())
    }
}

/// Weak supervision attached to a lesion. `location` and `size` are in
/// `[0, 1]` once the owning dataset has been normalized.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CueVector {
    pub type_label: Option<u8>,
    pub location: [f64; 3],
    pub size: [f64; 2],
}

/// One annotated finding.
#[derive(Debug, Clone, PartialEq)]
pub struct LesionRecord {
    pub lesion_id: u64,
    pub patient_id: u64,
    /// Per-patient ordinal, increasing with acquisition time.
    pub study_id: u64,
    pub series_id: u64,
    pub slice_idx: u32,
    pub diameters: DiameterMeasurement,
    /// Location as read from the annotation table, before normalization.
    pub raw_location: [f64; 3],
    pub cues: CueVector,
    /// Annotated type, when one exists (seed, validation and test rows).
    pub true_type: Option<u8>,
    pub split: Split,
    pub feature: Vec<f64>,
}

impl LesionRecord {
    pub fn raw_size(&self) -> [f64; 2] {
        [self.diameters.long_mm, self.diameters.short_mm]
    }
}

/// Per-dimension maxima used to map raw cues into `[0, 1]`:
/// `[loc_x, loc_y, loc_z, long_mm, short_mm]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CueNormalizers {
    pub maxima: [f64; 5],
}

impl CueNormalizers {
    pub const NAMES: [&'static str; 5] = ["loc_x", "loc_y", "loc_z", "long_mm", "short_mm"];

    /// Normalized `(location, size)` for a raw record. Values are clamped to
    /// `[0, 1]` because validation and test rows reuse the training maxima.
    pub fn apply(&self, raw_location: [f64; 3], raw_size: [f64; 2]) -> ([f64; 3], [f64; 2]) {
        let m = &self.maxima;
        let n = |v: f64, max: f64| (v / max).clamp(0.0, 1.0);
        (
            [
                n(raw_location[0], m[0]),
                n(raw_location[1], m[1]),
                n(raw_location[2], m[2]),
            ],
            [n(raw_size[0], m[3]), n(raw_size[1], m[4])],
        )
    }
}

/// A collection of lesion records with a common feature dimension.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub records: Vec<LesionRecord>,
    /// Feature dimension; zero when features have not been attached yet.
    pub feature_dim: usize,
    pub cue_normalizers: Option<CueNormalizers>,
}

impl Dataset {
    pub fn new(records: Vec<LesionRecord>) -> Result<Self> {
        let mut seen = std::collections::HashSet::with_capacity(records.len());
        for r in &records {
            if !seen.insert(r.lesion_id) {
                return Err(Error::DuplicateLesion(r.lesion_id));
            }
        }
        let feature_dim = records.first().map_or(0, |r| r.feature.len());
        for r in &records {
            if r.feature.len() != feature_dim {
                return Err(Error::DimensionMismatch {
                    expected: feature_dim,
                    actual: r.feature.len(),
                });
            }
        }
        Ok(Dataset {
            records,
            feature_dim,
            cue_normalizers: None,
        })
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn index_of(&self, lesion_id: u64) -> Option<usize> {
        self.records.iter().position(|r| r.lesion_id == lesion_id)
    }

    /// Attaches features keyed by lesion id. Every record must be covered.
    pub fn attach_features(
        &mut self,
        features: &std::collections::HashMap<u64, Vec<f64>>,
    ) -> Result<()> {
        if features.len() != self.records.len() {
            return Err(Error::FeatureJoin(format!(
                "{} feature rows for {} annotations",
                features.len(),
                self.records.len()
            )));
        }
        let mut dim = None;
        for r in &mut self.records {
            let f = features.get(&r.lesion_id).ok_or_else(|| {
                Error::FeatureJoin(format!("no feature row for lesion_id {}", r.lesion_id))
            })?;
            match dim {
                None => dim = Some(f.len()),
                Some(d) if d != f.len() => {
                    return Err(Error::DimensionMismatch {
                        expected: d,
                        actual: f.len(),
                    })
                }
                _ => {}
            }
            r.feature = f.clone();
        }
        self.feature_dim = dim.unwrap_or(0);
        Ok(())
    }
}

/// An L2-normalized point in the embedding space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Embedding(pub Vec<f64>);

impl Embedding {
    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn norm(&self) -> f64 {
        self.0.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn distance(&self, other: &Embedding) -> Result<f64> {
        distance(&self.0, &other.0)
    }
}

/// Euclidean distance between two vectors of equal length.
pub fn distance(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::DimensionMismatch {
            expected: a.len(),
            actual: b.len(),
        });
    }
    Ok(squared_distance(a, b).sqrt())
}

/// Squared Euclidean distance; callers guarantee equal lengths.
pub(crate) fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Returns `v / (||v|| + 1e-12)`.
pub fn l2_normalize(v: &[f64]) -> Vec<f64> {
    let n = dot(v, v).sqrt() + crate::net::NORM_EPS;
    v.iter().map(|x| x / n).collect()
}
