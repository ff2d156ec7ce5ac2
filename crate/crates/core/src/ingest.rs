//! Annotation tables, feature files, bounding boxes and cue normalization.
//!
//! Annotation CSV columns (header required, order free):
//!
//! ```text
//! lesion_id, patient_id, study_id, series_id, slice_idx,
//! long_x1, long_y1, long_x2, long_y2, short_x1, short_y1, short_x2, short_y2,
//! long_mm, short_mm, loc_x, loc_y, loc_z, type_label, split
//! ```
//!
//! `type_label` is empty for unlabeled rows; `split` is one of
//! `seed`, `val`, `test`, `unlabeled`.
//!
//! Feature files are either CSV (`lesion_id, f_0, ..., f_{D-1}`) or the
//! flat binary layout: magic `LGF1`, `u32` row count, `u32` dimension, then
//! little-endian `f64` values row-major, one row per annotation row in
//! annotation order.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{
    CueNormalizers, CueVector, Dataset, DiameterMeasurement, LesionRecord, Segment, Split,
    NUM_TYPES,
};

/// Padding, in pixels, added on every side of the tight diameter box.
pub const BOX_PADDING_PX: f64 = 5.0;

pub const ANNOTATION_COLUMNS: [&str; 20] = [
    "lesion_id",
    "patient_id",
    "study_id",
    "series_id",
    "slice_idx",
    "long_x1",
    "long_y1",
    "long_x2",
    "long_y2",
    "short_x1",
    "short_y1",
    "short_x2",
    "short_y2",
    "long_mm",
    "short_mm",
    "loc_x",
    "loc_y",
    "loc_z",
    "type_label",
    "split",
];

const FEATURE_MAGIC: &[u8; 4] = b"LGF1";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub x_min: f64,
    pub y_min: f64,
    pub x_max: f64,
    pub y_max: f64,
}

impl BoundingBox {
    pub fn contains(&self, other: &BoundingBox) -> bool {
        self.x_min <= other.x_min
            && self.y_min <= other.y_min
            && self.x_max >= other.x_max
            && self.y_max >= other.y_max
    }
}

/// Axis-aligned box over the four diameter endpoints, padded by `padding`
/// pixels on each side.
pub fn bbox_with_padding(d: &DiameterMeasurement, padding: f64) -> Result<BoundingBox> {
    let pts: Vec<(f64, f64)> = d
        .long_axis
        .endpoints()
        .into_iter()
        .chain(d.short_axis.endpoints())
        .collect();
    if pts.iter().any(|(x, y)| !x.is_finite() || !y.is_finite()) {
        return Err(Error::InvalidMeasurement("non-finite endpoint".into()));
    }
    if pts.iter().all(|p| *p == pts[0]) {
        return Err(Error::DegenerateMeasurement);
    }
    let fold = |f: fn(f64, f64) -> f64, init: f64, sel: fn(&(f64, f64)) -> f64| {
        pts.iter().map(sel).fold(init, f)
    };
    Ok(BoundingBox {
        x_min: fold(f64::min, f64::INFINITY, |p| p.0) - padding,
        y_min: fold(f64::min, f64::INFINITY, |p| p.1) - padding,
        x_max: fold(f64::max, f64::NEG_INFINITY, |p| p.0) + padding,
        y_max: fold(f64::max, f64::NEG_INFINITY, |p| p.1) + padding,
    })
}

/// Lesion bounding box: the tight box around both diameters plus 5 px.
pub fn bbox_from_diameters(d: &DiameterMeasurement) -> Result<BoundingBox> {
    bbox_with_padding(d, BOX_PADDING_PX)
}

struct Columns {
    idx: HashMap<&'static str, usize>,
}

impl Columns {
    fn new(path: &Path, headers: &csv::StringRecord, required: &[&'static str]) -> Result<Self> {
        let mut idx = HashMap::new();
        for &name in required {
            let pos = headers
                .iter()
                .position(|h| h.trim() == name)
                .ok_or_else(|| Error::MissingColumn {
                    path: path.to_path_buf(),
                    column: name.to_string(),
                })?;
            idx.insert(name, pos);
        }
        Ok(Columns { idx })
    }

    fn get<'r>(&self, rec: &'r csv::StringRecord, name: &str) -> &'r str {
        rec.get(self.idx[name]).unwrap_or("").trim()
    }
}

fn bad_row(path: &Path, row: usize, message: impl Into<String>) -> Error {
    Error::BadRow {
        path: path.to_path_buf(),
        row,
        message: message.into(),
    }
}

fn parse_num<T: std::str::FromStr>(
    path: &Path,
    row: usize,
    col: &str,
    raw: &str,
) -> Result<T> {
    raw.parse()
        .map_err(|_| bad_row(path, row, format!("column `{col}`: cannot parse `{raw}`")))
}

fn parse_row(
    path: &Path,
    row: usize,
    cols: &Columns,
    rec: &csv::StringRecord,
) -> Result<LesionRecord> {
    let int = |c: &str| parse_num::<u64>(path, row, c, cols.get(rec, c));
    let real = |c: &str| -> Result<f64> {
        let v: f64 = parse_num(path, row, c, cols.get(rec, c))?;
        if v.is_finite() {
            Ok(v)
        } else {
            Err(bad_row(path, row, format!("column `{c}` is not finite")))
        }
    };

    let diameters = DiameterMeasurement {
        long_axis: Segment::new(
            real("long_x1")?,
            real("long_y1")?,
            real("long_x2")?,
            real("long_y2")?,
        ),
        short_axis: Segment::new(
            real("short_x1")?,
            real("short_y1")?,
            real("short_x2")?,
            real("short_y2")?,
        ),
        long_mm: real("long_mm")?,
        short_mm: real("short_mm")?,
    };
    diameters
        .validate()
        .map_err(|e| bad_row(path, row, e.to_string()))?;

    let raw_location = [real("loc_x")?, real("loc_y")?, real("loc_z")?];
    let label_raw = cols.get(rec, "type_label");
    let true_type = if label_raw.is_empty() {
        None
    } else {
        let t: u8 = parse_num(path, row, "type_label", label_raw)?;
        if t as usize >= NUM_TYPES {
            return Err(bad_row(path, row, format!("type_label {t} out of range")));
        }
        Some(t)
    };
    let split_raw = cols.get(rec, "split");
    let split = Split::parse(split_raw)
        .ok_or_else(|| bad_row(path, row, format!("unknown split `{split_raw}`")))?;

    Ok(LesionRecord {
        lesion_id: int("lesion_id")?,
        patient_id: int("patient_id")?,
        study_id: int("study_id")?,
        series_id: int("series_id")?,
        slice_idx: parse_num(path, row, "slice_idx", cols.get(rec, "slice_idx"))?,
        diameters,
        raw_location,
        cues: CueVector {
            type_label: if split == Split::Seed { true_type } else { None },
            location: raw_location,
            size: [diameters.long_mm, diameters.short_mm],
        },
        true_type,
        split,
        feature: Vec::new(),
    })
}

/// Reads an annotation table and, optionally, a feature file joined on
/// `lesion_id` (CSV) or on row order (binary).
pub fn parse_annotations(path: &Path, features_path: Option<&Path>) -> Result<Dataset> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(false)
        .from_reader(BufReader::new(file));
    let headers = rdr.headers()?.clone();
    let cols = Columns::new(path, &headers, &ANNOTATION_COLUMNS)?;

    let mut records = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let row = i + 1;
        let rec = rec.map_err(|e| bad_row(path, row, e.to_string()))?;
        records.push(parse_row(path, row, &cols, &rec)?);
    }
    let mut dataset = Dataset::new(records)?;

    if let Some(fp) = features_path {
        let features = read_features(fp)?;
        match features {
            FeatureTable::Keyed(map) => dataset.attach_features(&map)?,
            FeatureTable::Ordered(rows) => {
                if rows.len() != dataset.len() {
                    return Err(Error::FeatureJoin(format!(
                        "{} feature rows for {} annotations",
                        rows.len(),
                        dataset.len()
                    )));
                }
                let map = dataset
                    .records
                    .iter()
                    .map(|r| r.lesion_id)
                    .zip(rows)
                    .collect();
                dataset.attach_features(&map)?;
            }
        }
    }
    Ok(dataset)
}

/// Writes the annotation table with raw (unnormalized) cues.
pub fn write_annotations(dataset: &Dataset, path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = csv::Writer::from_writer(BufWriter::new(file));
    w.write_record(ANNOTATION_COLUMNS)?;
    for r in &dataset.records {
        let d = &r.diameters;
        let label = r.true_type.map(|t| t.to_string()).unwrap_or_default();
        w.write_record([
            r.lesion_id.to_string(),
            r.patient_id.to_string(),
            r.study_id.to_string(),
            r.series_id.to_string(),
            r.slice_idx.to_string(),
            d.long_axis.x1.to_string(),
            d.long_axis.y1.to_string(),
            d.long_axis.x2.to_string(),
            d.long_axis.y2.to_string(),
            d.short_axis.x1.to_string(),
            d.short_axis.y1.to_string(),
            d.short_axis.x2.to_string(),
            d.short_axis.y2.to_string(),
            d.long_mm.to_string(),
            d.short_mm.to_string(),
            r.raw_location[0].to_string(),
            r.raw_location[1].to_string(),
            r.raw_location[2].to_string(),
            label,
            r.split.as_str().to_string(),
        ])?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

/// Feature rows as read from disk.
#[derive(Debug, Clone, PartialEq)]
pub enum FeatureTable {
    /// CSV rows keyed by lesion id.
    Keyed(HashMap<u64, Vec<f64>>),
    /// Binary rows in annotation order.
    Ordered(Vec<Vec<f64>>),
}

/// Reads a feature file, detecting the binary layout by its magic bytes.
pub fn read_features(path: &Path) -> Result<FeatureTable> {
    let mut bytes = Vec::new();
    File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    if bytes.starts_with(FEATURE_MAGIC) {
        return decode_features_bin(&bytes).map(FeatureTable::Ordered);
    }

    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_reader(bytes.as_slice());
    let headers = rdr.headers()?.clone();
    if headers.get(0).map(str::trim) != Some("lesion_id") {
        return Err(Error::MissingColumn {
            path: path.to_path_buf(),
            column: "lesion_id".into(),
        });
    }
    let dim = headers.len() - 1;
    let mut map = HashMap::new();
    for (i, rec) in rdr.records().enumerate() {
        let row = i + 1;
        let rec = rec.map_err(|e| bad_row(path, row, e.to_string()))?;
        let id: u64 = parse_num(path, row, "lesion_id", rec.get(0).unwrap_or("").trim())?;
        let mut v = Vec::with_capacity(dim);
        for (j, raw) in rec.iter().skip(1).enumerate() {
            v.push(parse_num::<f64>(path, row, &format!("f_{j}"), raw.trim())?);
        }
        if map.insert(id, v).is_some() {
            return Err(Error::DuplicateLesion(id));
        }
    }
    Ok(FeatureTable::Keyed(map))
}

fn decode_features_bin(bytes: &[u8]) -> Result<Vec<Vec<f64>>> {
    let bad = |m: &str| Error::FeatureJoin(format!("binary feature file: {m}"));
    if bytes.len() < 12 {
        return Err(bad("truncated header"));
    }
    let count = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let dim = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let body = &bytes[12..];
    if body.len() != count * dim * 8 {
        return Err(bad("body length does not match header"));
    }
    let values: Vec<f64> = body
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    if dim == 0 {
        return Ok(vec![Vec::new(); count]);
    }
    Ok(values.chunks(dim).map(<[f64]>::to_vec).collect())
}

pub fn write_features_csv(dataset: &Dataset, path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = csv::Writer::from_writer(BufWriter::new(file));
    let mut header = vec!["lesion_id".to_string()];
    header.extend((0..dataset.feature_dim).map(|j| format!("f_{j}")));
    w.write_record(&header)?;
    for r in &dataset.records {
        let mut row = vec![r.lesion_id.to_string()];
        row.extend(r.feature.iter().map(f64::to_string));
        w.write_record(&row)?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

/// Writes the `LGF1` binary feature layout in dataset row order.
pub fn write_features_bin(dataset: &Dataset, path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let io = |e| Error::io(path, e);
    w.write_all(FEATURE_MAGIC).map_err(io)?;
    w.write_all(&(dataset.len() as u32).to_le_bytes()).map_err(io)?;
    w.write_all(&(dataset.feature_dim as u32).to_le_bytes())
        .map_err(io)?;
    for r in &dataset.records {
        for v in &r.feature {
            w.write_all(&v.to_le_bytes()).map_err(io)?;
        }
    }
    w.flush().map_err(io)
}

/// Fits per-dimension maxima on the training split (seed + unlabeled);
/// falls back to every row when no training rows exist.
pub fn fit_normalizers(dataset: &Dataset) -> Result<CueNormalizers> {
    let training: Vec<&LesionRecord> = dataset
        .records
        .iter()
        .filter(|r| r.split.is_training())
        .collect();
    let rows: Vec<&LesionRecord> = if training.is_empty() {
        dataset.records.iter().collect()
    } else {
        training
    };
    let mut maxima = [f64::NEG_INFINITY; 5];
    for r in rows {
        let raw = [
            r.raw_location[0],
            r.raw_location[1],
            r.raw_location[2],
            r.diameters.long_mm,
            r.diameters.short_mm,
        ];
        for (m, v) in maxima.iter_mut().zip(raw) {
            *m = m.max(v);
        }
    }
    for (m, name) in maxima.iter().zip(CueNormalizers::NAMES) {
        if !(*m > 0.0) {
            return Err(Error::NonPositiveMaximum(name));
        }
    }
    Ok(CueNormalizers { maxima })
}

/// Recomputes every record's location and size cues from its raw values
/// using `normalizers`.
pub fn apply_normalizers(dataset: &Dataset, normalizers: CueNormalizers) -> Dataset {
    let mut out = dataset.clone();
    for r in &mut out.records {
        let (loc, size) = normalizers.apply(r.raw_location, r.raw_size());
        r.cues.location = loc;
        r.cues.size = size;
    }
    out.cue_normalizers = Some(normalizers);
    out
}

/// Divides each of the five cue dimensions by its maximum. A dataset that
/// already carries normalizers is re-normalized with them, so repeated
/// calls are idempotent.
pub fn normalize_cues(dataset: &Dataset) -> Result<Dataset> {
    let normalizers = match dataset.cue_normalizers {
        Some(n) => n,
        None => fit_normalizers(dataset)?,
    };
    Ok(apply_normalizers(dataset, normalizers))
}
