#![allow(dead_code)]

pub mod matching;
pub mod pairs;

use lesion_graph::config::RunConfig;
use lesion_graph::ingest::normalize_cues;
use lesion_graph::pipeline::class_count;
use lesion_graph::pseudolabel::fit_and_assign;
use lesion_graph::sampling::Sequence;
use lesion_graph::synthetic::generate_cohort;
use lesion_graph::{Dataset, Split};

/// Default synthetic cohort with normalized cues and kNN pseudo-labels on
/// the raw features (unlabeled split only).
pub fn labeled_cohort(rng_seed: u64) -> (Dataset, Vec<Option<u8>>) {
    let cfg = RunConfig {
        rng_seed,
        ..RunConfig::default()
    };
    let cohort = generate_cohort(&cfg.synthetic_config()).unwrap();
    let ds = normalize_cues(&cohort.dataset).unwrap();
    let feats: Vec<&[f64]> = ds.records.iter().map(|r| r.feature.as_slice()).collect();
    let n = class_count(&ds).unwrap();
    let labels = fit_and_assign(&feats, &ds, cfg.pseudolabel.k, n).unwrap();
    let labels = ds
        .records
        .iter()
        .zip(labels)
        .map(|(r, l)| (r.split == Split::Unlabeled).then_some(l))
        .collect();
    (ds, labels)
}

fn euclid(a: &[f64], b: &[f64]) -> f64 {
    let mut s = 0.0;
    for i in 0..a.len() {
        s += (a[i] - b[i]) * (a[i] - b[i]);
    }
    s.sqrt()
}

/// Independent check of every sequence constraint.
pub fn check_sequence(
    ds: &Dataset,
    labels: &[Option<u8>],
    seq: &Sequence,
    t_low: f64,
    t_high: f64,
) -> Result<(), String> {
    let ix = [seq.a, seq.b, seq.c, seq.d, seq.e];
    for i in 0..5 {
        for j in i + 1..5 {
            if ix[i] == ix[j] {
                return Err(format!("repeated index {}", ix[i]));
            }
        }
    }
    for &i in &ix {
        if ds.records[i].split != Split::Unlabeled {
            return Err(format!("index {i} is outside the unlabeled pool"));
        }
    }
    let lab = |i: usize| labels[i].ok_or(format!("index {i} has no label"));
    let rec = |i: usize| &ds.records[i];
    let loc = |i: usize, j: usize| euclid(&rec(i).cues.location, &rec(j).cues.location);
    let size = |i: usize, j: usize| euclid(&rec(i).cues.size, &rec(j).cues.size);
    let a = seq.a;
    let la = lab(a)?;
    for (name, i) in [("B", seq.b), ("C", seq.c), ("D", seq.d)] {
        if lab(i)? != la {
            return Err(format!("{name} label differs from the anchor"));
        }
    }
    if lab(seq.e)? == la {
        return Err("E shares the anchor label".into());
    }
    if !(loc(a, seq.b) < t_low && size(a, seq.b) < t_low) {
        return Err(format!("B not similar: loc {} size {}", loc(a, seq.b), size(a, seq.b)));
    }
    if !(loc(a, seq.c) < t_low && size(a, seq.c) > t_high) {
        return Err(format!("C outside bands: loc {} size {}", loc(a, seq.c), size(a, seq.c)));
    }
    if !(loc(a, seq.d) > t_high) {
        return Err(format!("D location too close: {}", loc(a, seq.d)));
    }
    Ok(())
}
