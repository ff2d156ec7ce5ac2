//! Type pseudo-labels from a small labeled seed set, the softmax
//! evaluation classifier, and the single refinement round.

use std::fs::File;
use std::io::BufWriter;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{squared_distance, Dataset, Split};
use crate::net::{Mlp, SgdConfig};
use crate::sampling::{self, LossRecord, MarginConfig, SamplerConfig};

/// k-nearest-neighbor classifier over seed references.
#[derive(Debug, Clone)]
pub struct KnnClassifier {
    refs: Vec<Vec<f64>>,
    labels: Vec<u8>,
    k: usize,
    n_classes: usize,
}

impl KnnClassifier {
    /// Fails when a class in `0..n_classes` has no reference.
    pub fn fit(refs: Vec<Vec<f64>>, labels: Vec<u8>, k: usize, n_classes: usize) -> Result<Self> {
        if refs.len() != labels.len() {
            return Err(Error::DimensionMismatch {
                expected: refs.len(),
                actual: labels.len(),
            });
        }
        if k == 0 || k > refs.len() {
            return Err(Error::Config(format!(
                "k = {k} with {} references",
                refs.len()
            )));
        }
        for c in 0..n_classes as u8 {
            if !labels.contains(&c) {
                return Err(Error::EmptySeedClass(c));
            }
        }
        Ok(KnnClassifier {
            refs,
            labels,
            k,
            n_classes,
        })
    }

    /// Majority label among the `k` nearest references. Neighbors are
    /// ordered by (distance, label); vote ties go to the smaller mean
    /// distance, then the smaller class index.
    pub fn predict(&self, x: &[f64]) -> u8 {
        let mut nn: Vec<(f64, u8)> = self
            .refs
            .iter()
            .zip(&self.labels)
            .map(|(r, l)| (squared_distance(r, x).sqrt(), *l))
            .collect();
        let k = self.k;
        nn.select_nth_unstable_by(k - 1, |a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        let mut votes = vec![0usize; self.n_classes.max(1 + *self.labels.iter().max().unwrap() as usize)];
        let mut dist = vec![0.0; votes.len()];
        for (d, l) in &nn[..k] {
            votes[*l as usize] += 1;
            dist[*l as usize] += d;
        }
        let mut best = 0usize;
        for c in 1..votes.len() {
            let better = votes[c] > votes[best]
                || (votes[c] == votes[best]
                    && votes[c] > 0
                    && dist[c] / (votes[c] as f64) < dist[best] / (votes[best] as f64));
            if better {
                best = c;
            }
        }
        best as u8
    }
}

/// Fits the classifier on seed points and labels every other lesion.
/// Seed lesions keep their annotated label.
pub fn fit_and_assign<P: AsRef<[f64]>>(
    points: &[P],
    dataset: &Dataset,
    k: usize,
    n_classes: usize,
) -> Result<Vec<u8>> {
    if points.len() != dataset.len() {
        return Err(Error::DimensionMismatch {
            expected: dataset.len(),
            actual: points.len(),
        });
    }
    let mut refs = Vec::new();
    let mut labels = Vec::new();
    for (p, r) in points.iter().zip(&dataset.records) {
        if r.split == Split::Seed {
            let l = r.true_type.ok_or_else(|| {
                Error::Config(format!("seed lesion {} has no type label", r.lesion_id))
            })?;
            refs.push(p.as_ref().to_vec());
            labels.push(l);
        }
    }
    let knn = KnnClassifier::fit(refs, labels, k, n_classes)?;
    Ok(points
        .iter()
        .zip(&dataset.records)
        .map(|(p, r)| match (r.split, r.true_type) {
            (Split::Seed, Some(t)) => t,
            _ => knn.predict(p.as_ref()),
        })
        .collect())
}

/// Multinomial logistic regression with a bias term.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SoftmaxModel {
    /// `n_classes` rows of `dim + 1` weights (last entry is the bias).
    pub weights: Vec<Vec<f64>>,
}

impl SoftmaxModel {
    pub fn logits(&self, x: &[f64]) -> Vec<f64> {
        self.weights
            .iter()
            .map(|w| w[x.len()] + w.iter().zip(x).map(|(a, b)| a * b).sum::<f64>())
            .collect()
    }

    pub fn predict(&self, x: &[f64]) -> u8 {
        let l = self.logits(x);
        let mut best = 0;
        for c in 1..l.len() {
            if l[c] > l[best] {
                best = c;
            }
        }
        best as u8
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SoftmaxConfig {
    pub learning_rate: f64,
    pub max_iterations: usize,
    pub tolerance: f64,
    pub l2: f64,
}

impl Default for SoftmaxConfig {
    fn default() -> Self {
        SoftmaxConfig {
            learning_rate: 0.5,
            max_iterations: 10_000,
            tolerance: 1e-6,
            l2: 1e-4,
        }
    }
}

/// Fitted model, how the optimization ended, and its final gradient norm.
#[derive(Debug, Clone)]
pub struct SoftmaxFit {
    pub model: SoftmaxModel,
    pub iterations: usize,
    pub grad_norm: f64,
}

/// Full-batch gradient descent on mean cross-entropy plus `l2/2 ||W||^2`
/// (bias unpenalized) until the gradient norm falls below `tolerance` or
/// `max_iterations` is reached.
pub fn fit_softmax<P: AsRef<[f64]>>(
    points: &[P],
    labels: &[u8],
    n_classes: usize,
    cfg: &SoftmaxConfig,
) -> Result<SoftmaxFit> {
    if points.is_empty() || points.len() != labels.len() {
        return Err(Error::Empty("softmax training set"));
    }
    let distinct: std::collections::BTreeSet<u8> = labels.iter().copied().collect();
    if distinct.len() < 2 {
        return Err(Error::Config("softmax needs at least two classes".into()));
    }
    let dim = points[0].as_ref().len();
    let n = points.len() as f64;
    let mut w = vec![vec![0.0; dim + 1]; n_classes];
    let mut grad = vec![vec![0.0; dim + 1]; n_classes];
    let mut grad_norm = f64::INFINITY;
    let mut iterations = 0;
    while iterations < cfg.max_iterations {
        for g in grad.iter_mut() {
            g.iter_mut().for_each(|v| *v = 0.0);
        }
        let model = SoftmaxModel { weights: w };
        for (p, &y) in points.iter().zip(labels) {
            let x = p.as_ref();
            let logits = model.logits(x);
            let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
            let z: f64 = exps.iter().sum();
            for c in 0..n_classes {
                let coef = (exps[c] / z - f64::from(u8::from(c == y as usize))) / n;
                for (g, xv) in grad[c].iter_mut().zip(x) {
                    *g += coef * xv;
                }
                grad[c][dim] += coef;
            }
        }
        w = model.weights;
        grad_norm = 0.0;
        for (wc, gc) in w.iter().zip(grad.iter_mut()) {
            for j in 0..dim {
                gc[j] += cfg.l2 * wc[j];
            }
            grad_norm += gc.iter().map(|v| v * v).sum::<f64>();
        }
        grad_norm = grad_norm.sqrt();
        if !grad_norm.is_finite() {
            return Err(Error::Diverged(grad_norm));
        }
        if grad_norm < cfg.tolerance {
            break;
        }
        for (wc, gc) in w.iter_mut().zip(&grad) {
            for (a, g) in wc.iter_mut().zip(gc) {
                *a -= cfg.learning_rate * g;
            }
        }
        iterations += 1;
    }
    let model = SoftmaxModel { weights: w };
    if model.weights.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::Diverged(grad_norm));
    }
    Ok(SoftmaxFit {
        model,
        iterations,
        grad_norm,
    })
}

/// Predictions, accuracy and confusion matrix (`[truth][predicted]`).
#[derive(Debug, Clone, PartialEq)]
pub struct Classification {
    pub predicted: Vec<u8>,
    pub accuracy: f64,
    pub confusion: Vec<Vec<usize>>,
}

/// Trains the softmax classifier on `train` and evaluates it on `test`.
pub fn softmax_classify<P: AsRef<[f64]>, Q: AsRef<[f64]>>(
    train: &[P],
    train_labels: &[u8],
    test: &[Q],
    test_labels: &[u8],
    n_classes: usize,
    cfg: &SoftmaxConfig,
) -> Result<Classification> {
    let fit = fit_softmax(train, train_labels, n_classes, cfg)?;
    let predicted: Vec<u8> = test.iter().map(|x| fit.model.predict(x.as_ref())).collect();
    let mut confusion = vec![vec![0usize; n_classes]; n_classes];
    let mut correct = 0;
    for (p, t) in predicted.iter().zip(test_labels) {
        confusion[*t as usize][*p as usize] += 1;
        correct += usize::from(p == t);
    }
    let accuracy = if predicted.is_empty() {
        0.0
    } else {
        correct as f64 / predicted.len() as f64
    };
    Ok(Classification {
        predicted,
        accuracy,
        confusion,
    })
}

/// Settings for the pseudo-label stage and its refinement round.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PseudoLabelConfig {
    pub k: usize,
    pub refine_learning_rate: f64,
    pub refine_iterations: usize,
    /// Number of refinement rounds run by the pipeline.
    pub refinement_rounds: usize,
}

impl Default for PseudoLabelConfig {
    fn default() -> Self {
        PseudoLabelConfig {
            k: 5,
            refine_learning_rate: 0.0002,
            refine_iterations: 1000,
            refinement_rounds: 1,
        }
    }
}

/// Embeds every record with `net`.
pub fn embed_all(net: &Mlp, dataset: &Dataset) -> Result<Vec<Vec<f64>>> {
    dataset.records.iter().map(|r| net.forward(&r.feature)).collect()
}

#[derive(Debug, Clone)]
pub struct Refinement {
    pub labels: Vec<u8>,
    pub net: Mlp,
    pub history: Vec<LossRecord>,
}

/// One refinement round: re-embed, refit the seed classifier on the
/// embeddings, reassign pseudo-labels, and fine-tune at the low learning
/// rate. Fine-tuning runs even if no label changed.
pub fn refine(
    dataset: &Dataset,
    net: Mlp,
    cfg: &PseudoLabelConfig,
    n_classes: usize,
    sampler: &SamplerConfig,
    margins: &MarginConfig,
    rng: &mut impl Rng,
) -> Result<Refinement> {
    let embeddings = embed_all(&net, dataset)?;
    let labels = fit_and_assign(&embeddings, dataset, cfg.k, n_classes)?;
    let opt: Vec<Option<u8>> = labels.iter().copied().map(Some).collect();
    let sgd = SgdConfig::constant(cfg.refine_learning_rate, cfg.refine_iterations);
    let (net, history) = sampling::train(dataset, &opt, net, &sgd, sampler, margins, rng)?;
    Ok(Refinement {
        labels,
        net,
        history,
    })
}

pub fn write_pseudo_labels(
    dataset: &Dataset,
    labels: &[u8],
    stage: &str,
    path: &Path,
    append: bool,
) -> Result<()> {
    let file = std::fs::OpenOptions::new()
        .create(true)
        .write(true)
        .append(append)
        .truncate(!append)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    let mut w = csv::WriterBuilder::new()
        .has_headers(false)
        .from_writer(BufWriter::new(file));
    if !append {
        w.write_record(["lesion_id", "pseudo_label", "stage"])?;
    }
    for (r, l) in dataset.records.iter().zip(labels) {
        w.write_record([r.lesion_id.to_string(), l.to_string(), stage.to_string()])?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

/// Rows of a pseudo-label file as `(lesion_id, label, stage)`.
pub fn read_pseudo_labels(path: &Path) -> Result<Vec<(u64, u8, String)>> {
    let mut rdr = csv::Reader::from_reader(File::open(path).map_err(|e| Error::io(path, e))?);
    rdr.deserialize().map(|r| r.map_err(Error::from)).collect()
}
