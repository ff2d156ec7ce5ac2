//! Sequential sampling of lesion quintuples and the hierarchical triplet
//! loss, plus the embedder training loop built on them.
//!
//! A sequence `(A, B, C, D, E)` relaxes similarity one cue at a time:
//! `B` matches the anchor in type, location and size, `C` in type and
//! location only, `D` in type only, and `E` has a different type. The
//! sequence contributes three triplets `ABC`, `ACD`, `ADE` whose margins
//! grow with the level of dissimilarity.

use std::collections::HashMap;
use std::fs::File;
use std::io::BufWriter;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{squared_distance, Dataset, Split};
use crate::net::{sgd_step, Gradients, Mlp, SgdConfig, Trace};

/// Cue-distance thresholds for the sampler. Two lesions are similar in a
/// cue when its distance is below `t_low` and dissimilar above `t_high`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplerConfig {
    pub t_low: f64,
    pub t_high: f64,
    pub max_redraws: usize,
    /// When false, `B`, `C` and `D` must come from a different patient
    /// than the anchor.
    pub allow_same_patient: bool,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig {
            t_low: 0.02,
            t_high: 0.1,
            max_redraws: 50,
            allow_same_patient: true,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0 < self.t_low && self.t_low < self.t_high) {
            return Err(Error::Config("sampler needs 0 < t_low < t_high".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MarginConfig {
    pub m1: f64,
    pub m2: f64,
    pub m3: f64,
    pub sequences_per_batch: usize,
}

impl Default for MarginConfig {
    fn default() -> Self {
        MarginConfig {
            m1: 0.1,
            m2: 0.2,
            m3: 0.4,
            sequences_per_batch: 24,
        }
    }
}

impl MarginConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0 < self.m1 && self.m1 < self.m2 && self.m2 < self.m3) {
            return Err(Error::Config("margins need 0 < m1 < m2 < m3".into()));
        }
        if self.sequences_per_batch == 0 {
            return Err(Error::Config("sequences_per_batch must be positive".into()));
        }
        Ok(())
    }
}

/// Dataset indices of one sampled quintuple.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Sequence {
    pub a: usize,
    pub b: usize,
    pub c: usize,
    pub d: usize,
    pub e: usize,
}

impl Sequence {
    pub fn as_array(&self) -> [usize; 5] {
        [self.a, self.b, self.c, self.d, self.e]
    }
}

#[derive(Debug, Clone)]
struct Candidates {
    b: Vec<usize>,
    c: Vec<usize>,
    d: Vec<usize>,
}

/// Draws sequences from a fixed pool of labeled lesions.
#[derive(Debug)]
pub struct Sampler<'a> {
    dataset: &'a Dataset,
    labels: &'a [Option<u8>],
    pool: Vec<usize>,
    by_label: HashMap<u8, Vec<usize>>,
    cfg: SamplerConfig,
    cache: HashMap<usize, Candidates>,
}

/// Indices eligible for triplet training: unlabeled-split lesions with a
/// pseudo-label. Seed, validation and test lesions are never sampled.
pub fn training_pool(dataset: &Dataset, labels: &[Option<u8>]) -> Vec<usize> {
    dataset
        .records
        .iter()
        .enumerate()
        .filter(|(i, r)| r.split == Split::Unlabeled && labels[*i].is_some())
        .map(|(i, _)| i)
        .collect()
}

impl<'a> Sampler<'a> {
    pub fn new(
        dataset: &'a Dataset,
        labels: &'a [Option<u8>],
        pool: Vec<usize>,
        cfg: SamplerConfig,
    ) -> Result<Self> {
        cfg.validate()?;
        if labels.len() != dataset.len() {
            return Err(Error::DimensionMismatch {
                expected: dataset.len(),
                actual: labels.len(),
            });
        }
        let mut by_label: HashMap<u8, Vec<usize>> = HashMap::new();
        for &i in &pool {
            let l = labels[i].ok_or_else(|| {
                Error::Config(format!("pool lesion at index {i} has no label"))
            })?;
            by_label.entry(l).or_default().push(i);
        }
        if by_label.len() < 2 {
            return Err(Error::Config(
                "sampling needs at least two pseudo-label classes".into(),
            ));
        }
        Ok(Sampler {
            dataset,
            labels,
            pool,
            by_label,
            cfg,
            cache: HashMap::new(),
        })
    }

    pub fn pool(&self) -> &[usize] {
        &self.pool
    }

    fn candidates(&mut self, anchor: usize) -> &Candidates {
        let (dataset, labels, cfg, by_label) = (self.dataset, self.labels, self.cfg, &self.by_label);
        self.cache.entry(anchor).or_insert_with(|| {
            let a = &dataset.records[anchor];
            let label = labels[anchor].expect("pool lesions are labeled");
            let mut cands = Candidates {
                b: Vec::new(),
                c: Vec::new(),
                d: Vec::new(),
            };
            for &j in &by_label[&label] {
                let r = &dataset.records[j];
                if j == anchor || (!cfg.allow_same_patient && r.patient_id == a.patient_id) {
                    continue;
                }
                let loc = squared_distance(&a.cues.location, &r.cues.location).sqrt();
                let size = squared_distance(&a.cues.size, &r.cues.size).sqrt();
                if loc < cfg.t_low {
                    if size < cfg.t_low {
                        cands.b.push(j);
                    } else if size > cfg.t_high {
                        cands.c.push(j);
                    }
                } else if loc > cfg.t_high {
                    cands.d.push(j);
                }
            }
            cands
        })
    }

    /// Samples one sequence, redrawing the anchor whenever a slot has no
    /// candidate.
    pub fn sample(&mut self, rng: &mut impl Rng) -> Result<Sequence> {
        let mut starving = 'B';
        for _ in 0..self.cfg.max_redraws.max(1) {
            let a = self.pool[rng.random_range(0..self.pool.len())];
            let cands = self.candidates(a);
            let slot = [('B', &cands.b), ('C', &cands.c), ('D', &cands.d)]
                .into_iter()
                .find(|(_, v)| v.is_empty());
            if let Some((s, _)) = slot {
                starving = s;
                continue;
            }
            let b = cands.b[rng.random_range(0..cands.b.len())];
            let c = cands.c[rng.random_range(0..cands.c.len())];
            let d = cands.d[rng.random_range(0..cands.d.len())];
            let label = self.labels[a];
            // Uniform over lesions with a different label (at least one exists).
            let e = loop {
                let e = self.pool[rng.random_range(0..self.pool.len())];
                if self.labels[e] != label {
                    break e;
                }
            };
            return Ok(Sequence { a, b, c, d, e });
        }
        Err(Error::SamplerStarved {
            slot: starving,
            redraws: self.cfg.max_redraws,
        })
    }
}

/// Free-function form of [`Sampler::sample`] over the default training pool.
pub fn sample_sequence(
    dataset: &Dataset,
    labels: &[Option<u8>],
    cfg: SamplerConfig,
    rng: &mut impl Rng,
) -> Result<Sequence> {
    let pool = training_pool(dataset, labels);
    Sampler::new(dataset, labels, pool, cfg)?.sample(rng)
}

/// Loss value and per-role embedding gradients for a batch of sequences.
#[derive(Debug, Clone, PartialEq)]
pub struct TripletLoss {
    pub loss: f64,
    /// Gradients with respect to the `A..E` embeddings of each sequence.
    pub grads: Vec<[Vec<f64>; 5]>,
}

/// The three hinge terms of one sequence, before averaging.
pub fn sequence_hinges(e: &[Vec<f64>; 5], m: &MarginConfig) -> [f64; 3] {
    let ab = squared_distance(&e[0], &e[1]);
    let ac = squared_distance(&e[0], &e[2]);
    let ad = squared_distance(&e[0], &e[3]);
    let ae = squared_distance(&e[0], &e[4]);
    [ab - ac + m.m1, ac - ad + m.m2, ad - ae + m.m3]
}

/// `1/(2S) * sum_s [max(0, d2_AB - d2_AC + m1) + max(0, d2_AC - d2_AD + m2)
/// + max(0, d2_AD - d2_AE + m3)]` and its gradient. A hinge sitting exactly
/// at zero contributes no gradient.
pub fn hierarchical_triplet_loss(batch: &[[Vec<f64>; 5]], m: &MarginConfig) -> TripletLoss {
    let s = batch.len().max(1) as f64;
    let scale = 1.0 / (2.0 * s);
    let mut loss = 0.0;
    let mut grads = Vec::with_capacity(batch.len());
    for e in batch {
        let dim = e[0].len();
        let mut g: [Vec<f64>; 5] = std::array::from_fn(|_| vec![0.0; dim]);
        let hinges = sequence_hinges(e, m);
        // Active hinges are summed through signed distance coefficients so
        // a distance shared by two active hinges cancels exactly.
        let mut coef = [0i32; 4];
        let mut margin_sum = 0.0;
        let margins = [m.m1, m.m2, m.m3];
        // Triplet t compares (anchor, near=t+1, far=t+2) in role indices.
        for (t, h) in hinges.iter().enumerate() {
            if *h <= 0.0 {
                continue;
            }
            coef[t] += 1;
            coef[t + 1] -= 1;
            margin_sum += margins[t];
            let (near, far) = (t + 1, t + 2);
            for k in 0..dim {
                let a = e[0][k];
                let dn = a - e[near][k];
                let df = a - e[far][k];
                g[0][k] += scale * 2.0 * (dn - df);
                g[near][k] -= scale * 2.0 * dn;
                g[far][k] += scale * 2.0 * df;
            }
        }
        let mut seq_loss = 0.0;
        for (c, r) in coef.iter().zip(1..5) {
            if *c != 0 {
                seq_loss += *c as f64 * squared_distance(&e[0], &e[r]);
            }
        }
        loss += seq_loss + margin_sum;
        grads.push(g);
    }
    TripletLoss {
        loss: loss * scale,
        grads,
    }
}

/// One row of the loss history.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub iteration: usize,
    pub loss: f64,
    pub lr: f64,
}

/// Loss and parameter gradients of one batch of sequences.
pub fn batch_loss_and_grads(
    net: &Mlp,
    dataset: &Dataset,
    sequences: &[Sequence],
    margins: &MarginConfig,
) -> Result<(f64, Gradients)> {
    let mut traces: Vec<[Trace; 5]> = Vec::with_capacity(sequences.len());
    for seq in sequences {
        let ix = seq.as_array();
        let t: [Trace; 5] = [
            net.forward_trace(&dataset.records[ix[0]].feature)?,
            net.forward_trace(&dataset.records[ix[1]].feature)?,
            net.forward_trace(&dataset.records[ix[2]].feature)?,
            net.forward_trace(&dataset.records[ix[3]].feature)?,
            net.forward_trace(&dataset.records[ix[4]].feature)?,
        ];
        traces.push(t);
    }
    let embs: Vec<[Vec<f64>; 5]> = traces
        .iter()
        .map(|t| std::array::from_fn(|r| t[r].output.clone()))
        .collect();
    let tl = hierarchical_triplet_loss(&embs, margins);
    let mut grads = Gradients::zeros_like(net);
    for (t, g) in traces.iter().zip(&tl.grads) {
        for r in 0..5 {
            net.accumulate(&t[r], &g[r], &mut grads)?;
        }
    }
    Ok((tl.loss, grads))
}

/// Trains the embedder for `sgd.max_iterations` batches of
/// `margins.sequences_per_batch` sequences drawn from the unlabeled pool.
pub fn train(
    dataset: &Dataset,
    labels: &[Option<u8>],
    mut net: Mlp,
    sgd: &SgdConfig,
    sampler_cfg: &SamplerConfig,
    margins: &MarginConfig,
    rng: &mut impl Rng,
) -> Result<(Mlp, Vec<LossRecord>)> {
    sgd.validate()?;
    margins.validate()?;
    if sgd.max_iterations == 0 {
        return Ok((net, Vec::new()));
    }
    let pool = training_pool(dataset, labels);
    let mut sampler = Sampler::new(dataset, labels, pool, *sampler_cfg)?;
    let mut history = Vec::with_capacity(sgd.max_iterations);
    let mut batch = Vec::with_capacity(margins.sequences_per_batch);
    for it in 0..sgd.max_iterations {
        batch.clear();
        for _ in 0..margins.sequences_per_batch {
            batch.push(sampler.sample(rng)?);
        }
        let (loss, grads) = batch_loss_and_grads(&net, dataset, &batch, margins)?;
        sgd_step(&mut net, &grads, sgd, it)?;
        history.push(LossRecord {
            iteration: it,
            loss,
            lr: sgd.lr_at(it),
        });
    }
    Ok((net, history))
}

pub fn write_loss_history(history: &[LossRecord], path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = csv::Writer::from_writer(BufWriter::new(file));
    w.write_record(["iteration", "loss", "lr"])?;
    for r in history {
        w.write_record([r.iteration.to_string(), r.loss.to_string(), r.lr.to_string()])?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

pub fn read_loss_history(path: &Path) -> Result<Vec<LossRecord>> {
    let mut rdr = csv::Reader::from_path(path)?;
    rdr.deserialize().map(|r| r.map_err(Error::from)).collect()
}
