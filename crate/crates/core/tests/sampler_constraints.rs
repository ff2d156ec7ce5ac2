mod common;

use std::collections::HashMap;

use lesion_graph::model::{CueVector, DiameterMeasurement, LesionRecord, Segment};
use lesion_graph::sampling::{training_pool, Sampler, SamplerConfig};
use lesion_graph::{Dataset, Error, Split};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[test]
fn sampled_sequences_satisfy_every_constraint() {
    let (ds, labels) = common::labeled_cohort(3);
    let cfg = SamplerConfig::default();
    let mut sampler = Sampler::new(&ds, &labels, training_pool(&ds, &labels), cfg).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for n in 0..2000 {
        let s = sampler.sample(&mut rng).unwrap();
        if let Err(e) = common::check_sequence(&ds, &labels, &s, cfg.t_low, cfg.t_high) {
            panic!("sequence {n} {s:?}: {e}");
        }
    }
}

#[test]
fn same_seed_same_sequences() {
    let (ds, labels) = common::labeled_cohort(5);
    let draw = |seed| {
        let mut s = Sampler::new(&ds, &labels, training_pool(&ds, &labels), SamplerConfig::default()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..100).map(|_| s.sample(&mut rng).unwrap()).collect::<Vec<_>>()
    };
    assert_eq!(draw(4), draw(4));
    assert_ne!(draw(4), draw(5));
}

#[test]
fn every_slot_candidate_is_reachable() {
    // Anchor 0 has two B candidates; both must show up.
    let ds = toy(&[
        (0, [0.50, 0.5, 0.5], [0.30, 0.2]),
        (0, [0.51, 0.5, 0.5], [0.30, 0.2]),
        (0, [0.50, 0.51, 0.5], [0.30, 0.2]),
        (0, [0.50, 0.5, 0.5], [0.60, 0.4]),
        (0, [0.90, 0.9, 0.9], [0.30, 0.2]),
        (1, [0.10, 0.1, 0.1], [0.10, 0.1]),
    ]);
    let labels: Vec<Option<u8>> = ds.records.iter().map(|r| r.true_type).collect();
    let mut sampler = Sampler::new(&ds, &labels, vec![0, 1, 2, 3, 4, 5], SamplerConfig::default()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut seen: HashMap<usize, usize> = HashMap::new();
    for _ in 0..4000 {
        let s = sampler.sample(&mut rng).unwrap();
        if s.a == 0 {
            *seen.entry(s.b).or_default() += 1;
        }
        common::check_sequence(&ds, &labels, &s, 0.02, 0.1).unwrap();
    }
    assert!(seen.get(&1).copied().unwrap_or(0) > 20, "{seen:?}");
    assert!(seen.get(&2).copied().unwrap_or(0) > 20, "{seen:?}");
}

#[test]
fn starving_slot_is_reported() {
    // No lesion has a same-label neighbor at a far location: D starves.
    let ds = toy(&[
        (0, [0.50, 0.5, 0.5], [0.30, 0.2]),
        (0, [0.51, 0.5, 0.5], [0.30, 0.2]),
        (0, [0.50, 0.5, 0.5], [0.60, 0.4]),
        (1, [0.10, 0.1, 0.1], [0.10, 0.1]),
    ]);
    let labels: Vec<Option<u8>> = ds.records.iter().map(|r| r.true_type).collect();
    let mut sampler = Sampler::new(&ds, &labels, vec![0, 1, 2, 3], SamplerConfig::default()).unwrap();
    let err = sampler.sample(&mut ChaCha8Rng::seed_from_u64(0)).unwrap_err();
    assert!(matches!(err, Error::SamplerStarved { redraws: 50, .. }), "{err}");
}

#[test]
fn single_class_pool_is_rejected() {
    let ds = toy(&[(0, [0.5, 0.5, 0.5], [0.3, 0.2]), (0, [0.1, 0.1, 0.1], [0.3, 0.2])]);
    let labels: Vec<Option<u8>> = ds.records.iter().map(|r| r.true_type).collect();
    assert!(Sampler::new(&ds, &labels, vec![0, 1], SamplerConfig::default()).is_err());
}

/// Unlabeled-split lesions with already normalized cues.
fn toy(rows: &[(u8, [f64; 3], [f64; 2])]) -> Dataset {
    let records = rows
        .iter()
        .enumerate()
        .map(|(i, (label, loc, size))| LesionRecord {
            lesion_id: i as u64 + 1,
            patient_id: i as u64 + 1,
            study_id: 1,
            series_id: 1,
            slice_idx: 0,
            diameters: DiameterMeasurement {
                long_axis: Segment::new(0.0, 0.0, 10.0, 0.0),
                short_axis: Segment::new(5.0, -2.0, 5.0, 2.0),
                long_mm: 10.0,
                short_mm: 4.0,
            },
            raw_location: *loc,
            cues: CueVector {
                type_label: None,
                location: *loc,
                size: *size,
            },
            true_type: Some(*label),
            split: Split::Unlabeled,
            feature: vec![0.0; 2],
        })
        .collect();
    Dataset::new(records).unwrap()
}
