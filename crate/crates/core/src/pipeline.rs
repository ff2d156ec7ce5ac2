//! File-based stages: each reads the artifacts of earlier stages from a
//! work directory and writes its own.
//!
//! | stage    | reads                                   | writes |
//! |----------|-----------------------------------------|--------|
//! | gen      | config                                  | `annotations.csv`, `features.bin`, `ground_truth.csv`, `volumes.csv` |
//! | ingest   | annotations, features                   | `normalizers.json` |
//! | ssbr     | volumes, annotations                    | `ssbr.lgm`, `scores.csv`, `annotations_z.csv`, `ssbr_summary.json` |
//! | train    | annotations (z if present), features    | `embedder.lgm`, `loss_history.csv`, `pseudo_labels.csv`, `train_summary.json` |
//! | embed    | annotations, features, embedder         | `embeddings.csv` |
//! | retrieve | embeddings, annotations                 | `retrieval.csv` |
//! | match    | embeddings, annotations                 | `matches.csv` |
//! | eval     | everything above plus ground truth      | `metrics.csv`, `pr_curve_<method>.csv`, `summary.json` |

use std::collections::{BTreeMap, HashMap};
use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::{stage_seed, RunConfig};
use crate::error::{Error, Result};
use crate::graph::{
    are_continuous, are_type, kmeans, match_all, nmi, pairwise_pr, pr_curve_auc, purity, IndexEntry,
    MatchNode, PrCurve, RetrievalIndex,
};
use crate::ingest::{normalize_cues, parse_annotations, write_annotations, write_features_bin};
use crate::model::{l2_normalize, Dataset, Split};
use crate::net::{load_checkpoint, save_checkpoint, Mlp};
use crate::pseudolabel::{embed_all, fit_and_assign, refine, softmax_classify, write_pseudo_labels};
use crate::sampling::{self, write_loss_history, LossRecord};
use crate::ssbr::{
    body_region, pearson, read_volumes, score_volume, train_ssbr, write_scores, write_volumes,
    RegionThresholds, ScoreNormalizer, SliceScore,
};
use crate::synthetic::{generate_cohort, instance_groups, read_truth, write_truth, Cohort, TruthRow};

/// Artifact locations inside a work directory.
#[derive(Debug, Clone)]
pub struct WorkDir(pub PathBuf);

impl WorkDir {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        WorkDir(dir.into())
    }

    pub fn file(&self, name: &str) -> PathBuf {
        self.0.join(name)
    }

    pub fn annotations(&self) -> PathBuf {
        self.file("annotations.csv")
    }
    pub fn annotations_z(&self) -> PathBuf {
        self.file("annotations_z.csv")
    }
    pub fn features(&self) -> PathBuf {
        self.file("features.bin")
    }
    pub fn truth(&self) -> PathBuf {
        self.file("ground_truth.csv")
    }
    pub fn volumes(&self) -> PathBuf {
        self.file("volumes.csv")
    }
    pub fn embedder(&self) -> PathBuf {
        self.file("embedder.lgm")
    }
    pub fn embeddings(&self) -> PathBuf {
        self.file("embeddings.csv")
    }
    pub fn metrics(&self) -> PathBuf {
        self.file("metrics.csv")
    }

    fn ensure(&self) -> Result<()> {
        std::fs::create_dir_all(&self.0).map_err(|e| Error::io(&self.0, e))
    }

    /// The annotation table training should use: the one with SSBR-derived
    /// z coordinates when the ssbr stage has run.
    pub fn training_annotations(&self) -> PathBuf {
        let z = self.annotations_z();
        if z.exists() {
            z
        } else {
            self.annotations()
        }
    }
}

fn write_json<T: Serialize>(value: &T, path: &Path) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

fn rng_for(cfg: &RunConfig, stage: &str) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(stage_seed(cfg.rng_seed, stage))
}

/// Loads annotations plus features and normalizes cues.
pub fn load_dataset(dir: &WorkDir) -> Result<Dataset> {
    let ds = parse_annotations(&dir.training_annotations(), Some(&dir.features()))?;
    normalize_cues(&ds)
}

// ---------------------------------------------------------------- gen

pub fn run_gen(cfg: &RunConfig, dir: &WorkDir) -> Result<Cohort> {
    cfg.validate()?;
    dir.ensure()?;
    let cohort = generate_cohort(&cfg.synthetic_config())?;
    // A fresh cohort invalidates z coordinates from an earlier ssbr run.
    let stale = dir.annotations_z();
    if stale.exists() {
        std::fs::remove_file(&stale).map_err(|e| Error::io(&stale, e))?;
    }
    write_annotations(&cohort.dataset, &dir.annotations())?;
    write_features_bin(&cohort.dataset, &dir.features())?;
    write_truth(&cohort.truth, &dir.truth())?;
    write_volumes(&cohort.volumes, &dir.volumes())?;
    Ok(cohort)
}

// ---------------------------------------------------------------- ingest

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IngestReport {
    pub records: usize,
    pub feature_dim: usize,
    pub per_split: BTreeMap<String, usize>,
    pub normalizer_names: Vec<String>,
    pub normalizer_maxima: Vec<f64>,
}

pub fn run_ingest(dir: &WorkDir) -> Result<IngestReport> {
    let ds = load_dataset(dir)?;
    let n = ds.cue_normalizers.expect("normalized dataset");
    let mut per_split = BTreeMap::new();
    for r in &ds.records {
        *per_split.entry(r.split.as_str().to_string()).or_insert(0) += 1;
    }
    let report = IngestReport {
        records: ds.len(),
        feature_dim: ds.feature_dim,
        per_split,
        normalizer_names: crate::model::CueNormalizers::NAMES.iter().map(|s| s.to_string()).collect(),
        normalizer_maxima: n.maxima.to_vec(),
    };
    write_json(&report, &dir.file("normalizers.json"))?;
    Ok(report)
}

// ---------------------------------------------------------------- ssbr

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SsbrReport {
    pub train_volumes: usize,
    pub heldout_volumes: usize,
    pub hard_volumes: usize,
    /// Median per-volume Pearson r between score and true z on held-out
    /// volumes (`NaN` without ground truth).
    pub heldout_median_r: f64,
    /// Three-region threshold accuracy of z on held-out slices.
    pub heldout_region_accuracy: f64,
    pub thresholds: RegionThresholds,
    pub normalizer: ScoreNormalizer,
}

fn median(mut v: Vec<f64>) -> f64 {
    if v.is_empty() {
        return f64::NAN;
    }
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Trains the body-part regressor on volumes of non-test patients, scores
/// every volume, and rewrites lesion z coordinates from the scores.
pub fn run_ssbr(cfg: &RunConfig, dir: &WorkDir) -> Result<SsbrReport> {
    cfg.ssbr.validate()?;
    let volumes = read_volumes(&dir.volumes())?;
    let annotations = parse_annotations(&dir.annotations(), None)?;
    let test_patients: std::collections::HashSet<u64> = annotations
        .records
        .iter()
        .filter(|r| r.split == Split::Test)
        .map(|r| r.patient_id)
        .collect();
    let (train_ix, held_ix): (Vec<usize>, Vec<usize>) =
        (0..volumes.len()).partition(|&i| !test_patients.contains(&volumes[i].patient_id));
    let train_vols: Vec<_> = train_ix.iter().map(|&i| volumes[i].clone()).collect();
    let dim = volumes
        .first()
        .and_then(|v| v.slices.first())
        .map(Vec::len)
        .ok_or(Error::Empty("volumes"))?;

    let mut rng = rng_for(cfg, "ssbr");
    let net = Mlp::new(&cfg.ssbr.layer_dims(dim), false, &mut rng)?;
    let outcome = train_ssbr(&train_vols, net, &cfg.ssbr, &mut rng)?;
    let net = outcome.net;

    let scores: Vec<Vec<f64>> = volumes
        .iter()
        .map(|v| score_volume(&net, v))
        .collect::<Result<_>>()?;
    let train_scores: Vec<f64> = train_ix.iter().flat_map(|&i| scores[i].iter().copied()).collect();
    let normalizer = ScoreNormalizer::fit(&train_scores)?;

    let mut rows = Vec::new();
    for (v, s) in volumes.iter().zip(&scores) {
        for (j, score) in s.iter().enumerate() {
            rows.push(SliceScore {
                volume_id: v.volume_id,
                slice_idx: j,
                score: *score,
                z: normalizer.z(*score),
            });
        }
    }
    write_scores(&rows, &dir.file("scores.csv"))?;
    save_checkpoint(
        &net,
        &dir.file("ssbr.lgm"),
        2 * cfg.ssbr.max_iterations,
        serde_json::to_value(&cfg.ssbr)?,
    )?;

    // Region thresholds on z, fit on training volumes.
    let mut fit_z = Vec::new();
    let mut fit_regions = Vec::new();
    for &i in &train_ix {
        if let Some(tz) = &volumes[i].true_z {
            for (s, t) in scores[i].iter().zip(tz) {
                fit_z.push(normalizer.z(*s));
                fit_regions.push(body_region(*t));
            }
        }
    }
    let thresholds = if fit_z.is_empty() {
        RegionThresholds {
            lower: 1.0 / 3.0,
            upper: 2.0 / 3.0,
        }
    } else {
        RegionThresholds::fit(&fit_z, &fit_regions)?
    };
    let mut rs = Vec::new();
    let (mut correct, mut total) = (0usize, 0usize);
    for &i in &held_ix {
        if let Some(tz) = &volumes[i].true_z {
            rs.push(pearson(&scores[i], tz));
            for (s, t) in scores[i].iter().zip(tz) {
                total += 1;
                correct += usize::from(thresholds.classify(normalizer.z(*s)) == body_region(*t));
            }
        }
    }

    // Lesion z from the score of its slice.
    let by_study: HashMap<(u64, u64), usize> = volumes
        .iter()
        .enumerate()
        .map(|(i, v)| ((v.patient_id, v.study_id), i))
        .collect();
    let mut with_z = annotations.clone();
    for r in &mut with_z.records {
        let vi = by_study.get(&(r.patient_id, r.study_id)).ok_or_else(|| {
            Error::Config(format!(
                "no volume for patient {} study {}",
                r.patient_id, r.study_id
            ))
        })?;
        let s = scores[*vi].get(r.slice_idx as usize).ok_or_else(|| {
            Error::Config(format!("lesion {} slice index out of range", r.lesion_id))
        })?;
        r.raw_location[2] = normalizer.z(*s);
    }
    write_annotations(&with_z, &dir.annotations_z())?;

    let report = SsbrReport {
        train_volumes: train_ix.len(),
        heldout_volumes: held_ix.len(),
        hard_volumes: outcome.hard_volumes.len(),
        heldout_median_r: median(rs),
        heldout_region_accuracy: if total == 0 {
            f64::NAN
        } else {
            correct as f64 / total as f64
        },
        thresholds,
        normalizer,
    };
    write_json(&report, &dir.file("ssbr_summary.json"))?;
    Ok(report)
}

// ---------------------------------------------------------------- train

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub iterations: usize,
    pub refine_iterations: usize,
    pub first_100_loss: f64,
    pub last_100_loss: f64,
    /// Pseudo-label accuracy on the unlabeled split against generator
    /// truth, before and after refinement (absent without truth).
    pub initial_label_accuracy: Option<f64>,
    pub refined_label_accuracy: Option<f64>,
}

fn mean(v: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = v.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        f64::NAN
    } else {
        s / n as f64
    }
}

/// Number of type classes: one more than the largest seed label.
pub fn class_count(ds: &Dataset) -> Result<usize> {
    ds.records
        .iter()
        .filter(|r| r.split == Split::Seed)
        .filter_map(|r| r.true_type)
        .max()
        .map(|m| m as usize + 1)
        .ok_or(Error::Empty("seed labels"))
}

fn truth_types(dir: &WorkDir, ds: &Dataset) -> Result<Option<Vec<u8>>> {
    if !dir.truth().exists() {
        return Ok(None);
    }
    let truth = read_truth(&dir.truth())?;
    let map: HashMap<u64, &TruthRow> = truth.iter().map(|t| (t.lesion_id, t)).collect();
    ds.records
        .iter()
        .map(|r| {
            map.get(&r.lesion_id)
                .map(|t| t.true_type)
                .ok_or(Error::UnknownLesion(r.lesion_id))
        })
        .collect::<Result<Vec<u8>>>()
        .map(Some)
}

/// Accuracy of `labels` on the unlabeled split.
pub fn unlabeled_accuracy(ds: &Dataset, labels: &[u8], truth: &[u8]) -> f64 {
    let hits: Vec<f64> = ds
        .records
        .iter()
        .zip(labels.iter().zip(truth))
        .filter(|(r, _)| r.split == Split::Unlabeled)
        .map(|(_, (l, t))| f64::from(u8::from(l == t)))
        .collect();
    mean(hits.into_iter())
}

/// Outcome of the in-memory training driver.
#[derive(Debug, Clone)]
pub struct Trained {
    pub net: Mlp,
    pub initial_labels: Vec<u8>,
    pub refined_labels: Vec<u8>,
    pub history: Vec<LossRecord>,
    pub refine_history: Vec<LossRecord>,
}

/// Initial pseudo-labels from raw features, triplet training, then the
/// configured refinement rounds.
pub fn train_embedder(cfg: &RunConfig, ds: &Dataset, rng: &mut ChaCha8Rng) -> Result<Trained> {
    let n_classes = class_count(ds)?;
    let initial = fit_and_assign(
        &ds.records.iter().map(|r| r.feature.as_slice()).collect::<Vec<_>>(),
        ds,
        cfg.pseudolabel.k,
        n_classes,
    )?;
    let net = Mlp::new(&cfg.embedder.layer_dims(ds.feature_dim), true, rng)?;
    let opt: Vec<Option<u8>> = initial.iter().copied().map(Some).collect();
    let (mut net, history) =
        sampling::train(ds, &opt, net, &cfg.sgd, &cfg.sampler, &cfg.margins, rng)?;
    let mut labels = initial.clone();
    let mut refine_history = Vec::new();
    for _ in 0..cfg.pseudolabel.refinement_rounds {
        let r = refine(ds, net, &cfg.pseudolabel, n_classes, &cfg.sampler, &cfg.margins, rng)?;
        net = r.net;
        labels = r.labels;
        refine_history.extend(r.history);
    }
    Ok(Trained {
        net,
        initial_labels: initial,
        refined_labels: labels,
        history,
        refine_history,
    })
}

pub fn run_train(cfg: &RunConfig, dir: &WorkDir) -> Result<TrainReport> {
    cfg.validate()?;
    let ds = load_dataset(dir)?;
    let mut rng = rng_for(cfg, "train");
    let t = train_embedder(cfg, &ds, &mut rng)?;

    let offset = t.history.len();
    let mut all = t.history.clone();
    all.extend(t.refine_history.iter().map(|r| LossRecord {
        iteration: r.iteration + offset,
        ..*r
    }));
    write_loss_history(&all, &dir.file("loss_history.csv"))?;
    let pl = dir.file("pseudo_labels.csv");
    write_pseudo_labels(&ds, &t.initial_labels, "initial", &pl, false)?;
    write_pseudo_labels(&ds, &t.refined_labels, "refined", &pl, true)?;
    save_checkpoint(
        &t.net,
        &dir.embedder(),
        all.len(),
        serde_json::to_value(cfg)?,
    )?;

    let truth = truth_types(dir, &ds)?;
    let losses: Vec<f64> = t.history.iter().map(|r| r.loss).collect();
    let head = losses.len().min(100);
    let report = TrainReport {
        iterations: t.history.len(),
        refine_iterations: t.refine_history.len(),
        first_100_loss: mean(losses[..head].iter().copied()),
        last_100_loss: mean(losses[losses.len() - head..].iter().copied()),
        initial_label_accuracy: truth.as_ref().map(|tt| unlabeled_accuracy(&ds, &t.initial_labels, tt)),
        refined_label_accuracy: truth.as_ref().map(|tt| unlabeled_accuracy(&ds, &t.refined_labels, tt)),
    };
    write_json(&report, &dir.file("train_summary.json"))?;
    Ok(report)
}

// ---------------------------------------------------------------- embed

pub fn write_embeddings(ids: &[u64], embeddings: &[Vec<f64>], path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = csv::Writer::from_writer(BufWriter::new(file));
    let dim = embeddings.first().map_or(0, Vec::len);
    let mut header = vec!["lesion_id".to_string()];
    header.extend((0..dim).map(|j| format!("e_{j}")));
    w.write_record(&header)?;
    for (id, e) in ids.iter().zip(embeddings) {
        let mut row = vec![id.to_string()];
        row.extend(e.iter().map(f64::to_string));
        w.write_record(&row)?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

/// `(lesion_id, embedding)` rows in file order.
pub fn read_embeddings(path: &Path) -> Result<Vec<(u64, Vec<f64>)>> {
    let mut rdr = csv::Reader::from_reader(File::open(path).map_err(|e| Error::io(path, e))?);
    let mut out = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let bad = |m: String| Error::BadRow {
            path: path.to_path_buf(),
            row: i + 1,
            message: m,
        };
        let mut fields = rec.iter();
        let id = fields
            .next()
            .unwrap_or("")
            .parse()
            .map_err(|_| bad("bad lesion_id".into()))?;
        let e = fields
            .map(|f| f.parse::<f64>().map_err(|_| bad(format!("cannot parse `{f}`"))))
            .collect::<Result<Vec<f64>>>()?;
        out.push((id, e));
    }
    Ok(out)
}

pub fn run_embed(dir: &WorkDir) -> Result<usize> {
    let ds = load_dataset(dir)?;
    let (net, _) = load_checkpoint(&dir.embedder())?;
    let emb = embed_all(&net, &ds)?;
    let ids: Vec<u64> = ds.records.iter().map(|r| r.lesion_id).collect();
    write_embeddings(&ids, &emb, &dir.embeddings())?;
    Ok(emb.len())
}

fn embedded_index(dir: &WorkDir) -> Result<(Dataset, Vec<Vec<f64>>)> {
    let ds = parse_annotations(&dir.training_annotations(), None)?;
    let rows = read_embeddings(&dir.embeddings())?;
    let map: HashMap<u64, Vec<f64>> = rows.into_iter().collect();
    let emb = ds
        .records
        .iter()
        .map(|r| map.get(&r.lesion_id).cloned().ok_or(Error::UnknownLesion(r.lesion_id)))
        .collect::<Result<Vec<_>>>()?;
    Ok((ds, emb))
}

// ---------------------------------------------------------------- retrieve

/// Retrieves the `k` nearest lesions for each query (all lesions when
/// `queries` is empty) and writes `query_id, rank, retrieved_id, distance`.
pub fn run_retrieve(
    dir: &WorkDir,
    queries: &[u64],
    k: usize,
    exclude_same_patient: bool,
) -> Result<usize> {
    let (ds, emb) = embedded_index(dir)?;
    let entries = ds
        .records
        .iter()
        .zip(emb)
        .map(|(r, e)| IndexEntry {
            lesion_id: r.lesion_id,
            patient_id: r.patient_id,
            embedding: e,
        })
        .collect();
    let index = RetrievalIndex::new(entries)?;
    let ids: Vec<u64> = if queries.is_empty() {
        ds.records.iter().map(|r| r.lesion_id).collect()
    } else {
        queries.to_vec()
    };
    let path = dir.file("retrieval.csv");
    let file = File::create(&path).map_err(|e| Error::io(&path, e))?;
    let mut w = csv::Writer::from_writer(BufWriter::new(file));
    w.write_record(["query_id", "rank", "retrieved_id", "distance"])?;
    for q in &ids {
        for (rank, h) in index.retrieve(*q, k, exclude_same_patient)?.iter().enumerate() {
            w.write_record([
                q.to_string(),
                (rank + 1).to_string(),
                h.lesion_id.to_string(),
                h.distance.to_string(),
            ])?;
        }
    }
    w.flush().map_err(|e| Error::io(&path, e))?;
    Ok(ids.len())
}

// ---------------------------------------------------------------- match

fn match_nodes(ds: &Dataset, emb: &[Vec<f64>], keep: impl Fn(Split) -> bool) -> Vec<Vec<MatchNode>> {
    let nodes: Vec<MatchNode> = ds
        .records
        .iter()
        .zip(emb)
        .filter(|(r, _)| keep(r.split))
        .map(|(r, e)| MatchNode {
            lesion_id: r.lesion_id,
            patient_id: r.patient_id,
            study_id: r.study_id,
            embedding: e.clone(),
        })
        .collect();
    crate::graph::by_patient(nodes)
}

/// Matches every patient and writes `patient_id, group_id, lesion_id`.
pub fn run_match(cfg: &RunConfig, dir: &WorkDir) -> Result<usize> {
    cfg.matching.validate()?;
    let (ds, emb) = embedded_index(dir)?;
    let patients = match_nodes(&ds, &emb, |_| true);
    let result = match_all(&patients, &cfg.matching)?;
    let path = dir.file("matches.csv");
    let file = File::create(&path).map_err(|e| Error::io(&path, e))?;
    let mut w = csv::Writer::from_writer(BufWriter::new(file));
    w.write_record(["patient_id", "group_id", "lesion_id"])?;
    let mut count = 0;
    for (pid, groups) in &result {
        for (g, members) in groups.iter().enumerate() {
            count += 1;
            for id in members {
                w.write_record([pid.to_string(), g.to_string(), id.to_string()])?;
            }
        }
    }
    w.flush().map_err(|e| Error::io(&path, e))?;
    Ok(count)
}

// ---------------------------------------------------------------- eval

/// Metric columns of the evaluation table.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    Are,
    Purity,
    Nmi,
    Accuracy,
    Auc,
}

impl Metric {
    pub const ALL: [Metric; 5] = [Metric::Are, Metric::Purity, Metric::Nmi, Metric::Accuracy, Metric::Auc];

    pub fn parse(s: &str) -> Option<Metric> {
        match s.trim() {
            "are" => Some(Metric::Are),
            "purity" => Some(Metric::Purity),
            "nmi" => Some(Metric::Nmi),
            "accuracy" => Some(Metric::Accuracy),
            "auc" => Some(Metric::Auc),
            _ => None,
        }
    }
}

/// One row of the evaluation table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodMetrics {
    pub method: String,
    pub are_type: Option<f64>,
    pub are_location: Option<f64>,
    pub are_size: Option<f64>,
    pub purity: Option<f64>,
    pub nmi: Option<f64>,
    pub accuracy: Option<f64>,
    pub auc: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub rows: Vec<MethodMetrics>,
    pub curves: Vec<(String, PrCurve)>,
}

/// Evaluation inputs independent of the embedding method.
pub struct EvalData<'a> {
    pub dataset: &'a Dataset,
    /// Ground-truth types aligned with the dataset.
    pub types: &'a [u8],
    /// Ground-truth instance groups of the test split.
    pub test_groups: Vec<Vec<u64>>,
}

/// Scores one embedding of the dataset on the test split.
pub fn evaluate_embedding(
    cfg: &RunConfig,
    data: &EvalData,
    method: &str,
    emb: &[Vec<f64>],
    metrics: &[Metric],
    rng: &mut ChaCha8Rng,
) -> Result<(MethodMetrics, Option<PrCurve>)> {
    let ds = data.dataset;
    let test: Vec<usize> = (0..ds.len()).filter(|&i| ds.records[i].split == Split::Test).collect();
    if test.is_empty() {
        return Err(Error::Empty("test split"));
    }
    let want = |m: Metric| metrics.contains(&m);
    let mut row = MethodMetrics {
        method: method.into(),
        are_type: None,
        are_location: None,
        are_size: None,
        purity: None,
        nmi: None,
        accuracy: None,
        auc: None,
    };

    if want(Metric::Are) {
        let entries = test
            .iter()
            .map(|&i| IndexEntry {
                lesion_id: ds.records[i].lesion_id,
                patient_id: ds.records[i].patient_id,
                embedding: emb[i].clone(),
            })
            .collect();
        let index = RetrievalIndex::new(entries)?;
        let pos: HashMap<u64, usize> = test.iter().map(|&i| (ds.records[i].lesion_id, i)).collect();
        let (mut t, mut l, mut s) = (Vec::new(), Vec::new(), Vec::new());
        for &q in &test {
            let hits = index.retrieve(ds.records[q].lesion_id, cfg.eval.top_k, cfg.eval.exclude_same_patient)?;
            let got: Vec<usize> = hits.iter().map(|h| pos[&h.lesion_id]).collect();
            let qr = &ds.records[q];
            t.push(are_type(data.types[q], &got.iter().map(|&i| data.types[i]).collect::<Vec<_>>())?);
            l.push(are_continuous(
                &qr.cues.location,
                &got.iter().map(|&i| ds.records[i].cues.location).collect::<Vec<_>>(),
            )?);
            s.push(are_continuous(
                &qr.cues.size,
                &got.iter().map(|&i| ds.records[i].cues.size).collect::<Vec<_>>(),
            )?);
        }
        row.are_type = Some(mean(t.into_iter()));
        row.are_location = Some(mean(l.into_iter()));
        row.are_size = Some(mean(s.into_iter()));
    }

    if want(Metric::Purity) || want(Metric::Nmi) {
        let pts: Vec<&[f64]> = test.iter().map(|&i| emb[i].as_slice()).collect();
        let labels: Vec<u8> = test.iter().map(|&i| data.types[i]).collect();
        let k = class_count(ds)?.min(pts.len());
        let km = kmeans(&pts, k, cfg.eval.kmeans_restarts, rng)?;
        if want(Metric::Purity) {
            row.purity = Some(purity(&km.assignments, &labels));
        }
        if want(Metric::Nmi) {
            row.nmi = Some(nmi(&km.assignments, &labels));
        }
    }

    if want(Metric::Accuracy) {
        let seeds: Vec<usize> = (0..ds.len())
            .filter(|&i| ds.records[i].split == Split::Seed && ds.records[i].true_type.is_some())
            .collect();
        let train: Vec<&[f64]> = seeds.iter().map(|&i| emb[i].as_slice()).collect();
        let train_labels: Vec<u8> = seeds.iter().map(|&i| ds.records[i].true_type.unwrap()).collect();
        let test_pts: Vec<&[f64]> = test.iter().map(|&i| emb[i].as_slice()).collect();
        let test_labels: Vec<u8> = test.iter().map(|&i| data.types[i]).collect();
        let c = softmax_classify(
            &train,
            &train_labels,
            &test_pts,
            &test_labels,
            class_count(ds)?,
            &cfg.softmax,
        )?;
        row.accuracy = Some(c.accuracy);
    }

    let mut curve = None;
    if want(Metric::Auc) {
        let patients = match_nodes(ds, emb, |s| s == Split::Test);
        let c = pr_curve_auc(&patients, &data.test_groups, cfg.matching.t1, &cfg.eval.t2_sweep)?;
        row.auc = Some(c.auc);
        curve = Some(c);
    }
    Ok((row, curve))
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

pub fn write_metrics(rows: &[MethodMetrics], path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = csv::Writer::from_writer(BufWriter::new(file));
    w.write_record(["method", "are_type", "are_location", "are_size", "purity", "nmi", "accuracy"])?;
    for r in rows {
        w.write_record([
            r.method.clone(),
            opt(r.are_type),
            opt(r.are_location),
            opt(r.are_size),
            opt(r.purity),
            opt(r.nmi),
            opt(r.accuracy),
        ])?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

pub fn write_pr_curve(curve: &PrCurve, path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = csv::Writer::from_writer(BufWriter::new(file));
    w.write_record(["t2", "precision", "recall"])?;
    for p in &curve.points {
        w.write_record([p.t2.to_string(), p.precision.to_string(), p.recall.to_string()])?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

pub const BASELINE: &str = "feature_baseline";
pub const TRAINED: &str = "trained_embedding";

/// Evaluates the L2-normalized raw features and the trained embedding on
/// the test split.
pub fn run_eval(cfg: &RunConfig, dir: &WorkDir, metrics: &[Metric]) -> Result<EvalReport> {
    let ds = load_dataset(dir)?;
    let truth_rows = if dir.truth().exists() {
        Some(read_truth(&dir.truth())?)
    } else {
        None
    };
    let types: Vec<u8> = match truth_types(dir, &ds)? {
        Some(t) => t,
        None => ds
            .records
            .iter()
            .map(|r| match (r.split, r.true_type) {
                (Split::Test, None) => Err(Error::Config(format!(
                    "test lesion {} has no type label",
                    r.lesion_id
                ))),
                (_, t) => Ok(t.unwrap_or(u8::MAX)),
            })
            .collect::<Result<_>>()?,
    };
    let test_ids: std::collections::HashSet<u64> = ds
        .records
        .iter()
        .filter(|r| r.split == Split::Test)
        .map(|r| r.lesion_id)
        .collect();
    let test_groups = match &truth_rows {
        Some(rows) => {
            let rows: Vec<TruthRow> = rows.iter().filter(|t| test_ids.contains(&t.lesion_id)).copied().collect();
            instance_groups(&rows)
        }
        None if metrics.contains(&Metric::Auc) => {
            return Err(Error::Config("matching AUC needs ground_truth.csv".into()))
        }
        None => Vec::new(),
    };
    let data = EvalData {
        dataset: &ds,
        types: &types,
        test_groups,
    };
    let (net, _) = load_checkpoint(&dir.embedder())?;
    let baseline: Vec<Vec<f64>> = ds.records.iter().map(|r| l2_normalize(&r.feature)).collect();
    let trained = embed_all(&net, &ds)?;

    let mut rows = Vec::new();
    let mut curves = Vec::new();
    for (name, emb) in [(BASELINE, &baseline), (TRAINED, &trained)] {
        let mut rng = rng_for(cfg, &format!("eval/{name}"));
        let (row, curve) = evaluate_embedding(cfg, &data, name, emb, metrics, &mut rng)?;
        if let Some(c) = curve {
            write_pr_curve(&c, &dir.file(&format!("pr_curve_{name}.csv")))?;
            curves.push((name.to_string(), c));
        }
        rows.push(row);
    }
    write_metrics(&rows, &dir.metrics())?;
    let report = EvalReport { rows, curves };
    let default_pairwise = if data.test_groups.is_empty() {
        None
    } else {
        let patients = match_nodes(&ds, &trained, |s| s == Split::Test);
        let groups: Vec<Vec<u64>> = match_all(&patients, &cfg.matching)?
            .into_iter()
            .flat_map(|(_, g)| g)
            .collect();
        Some(pairwise_pr(&groups, &data.test_groups)?)
    };
    write_json(
        &serde_json::json!({
            "metrics": report.rows,
            "auc": report.curves.iter().map(|(n, c)| (n.clone(), c.auc)).collect::<BTreeMap<_, _>>(),
            "trained_pairwise_at_default_t2": default_pairwise,
        }),
        &dir.file("summary.json"),
    )?;
    Ok(report)
}

/// Every stage in order on a fresh work directory.
pub fn run_pipeline(cfg: &RunConfig, dir: &WorkDir) -> Result<EvalReport> {
    run_gen(cfg, dir)?;
    run_ingest(dir)?;
    run_ssbr(cfg, dir)?;
    run_train(cfg, dir)?;
    run_embed(dir)?;
    run_retrieve(dir, &[], cfg.eval.top_k, cfg.eval.exclude_same_patient)?;
    run_match(cfg, dir)?;
    run_eval(cfg, dir, &Metric::ALL)
}
