use lesion_graph::sampling::{hierarchical_triplet_loss, MarginConfig};
use lesion_graph::ssbr::ssbr_loss;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn identical_embeddings_cost_half_the_margin_sum() {
    let e = vec![0.6, 0.8];
    let batch = vec![std::array::from_fn(|_| e.clone())];
    let tl = hierarchical_triplet_loss(&batch, &MarginConfig::default());
    // (0.1 + 0.2 + 0.4) / 2
    assert!((tl.loss - 0.35).abs() <= 2.0 * f64::EPSILON, "{}", tl.loss);
}

#[test]
fn loss_averages_over_sequences() {
    let e = vec![1.0, 0.0];
    let batch = vec![std::array::from_fn(|_| e.clone()); 4];
    let tl = hierarchical_triplet_loss(&batch, &MarginConfig::default());
    assert!((tl.loss - 0.35).abs() <= 2.0 * f64::EPSILON);
}

#[test]
fn well_separated_sequence_costs_nothing() {
    // Squared anchor distances 0, 0.2, 0.5, 1.0 clear every margin.
    let at = |d2: f64| vec![d2.sqrt(), 0.0];
    let batch = vec![[at(0.0), at(0.0), at(0.2), at(0.5), at(1.0)]];
    let tl = hierarchical_triplet_loss(&batch, &MarginConfig::default());
    assert_eq!(tl.loss, 0.0);
    assert!(tl.grads[0].iter().flatten().all(|g| *g == 0.0));
}

#[test]
fn three_evenly_spaced_scores() {
    // Two unit gaps: 2 * ln(1 + e^-1); the second difference is zero.
    let l = ssbr_loss(&[vec![0.0, 1.0, 2.0]]);
    let want = 2.0 * (1.0 + (-1.0f64).exp()).ln();
    assert!((l.total() - 0.62652).abs() < 1e-4);
    assert!((l.total() - want).abs() < 1e-12);
    assert_eq!(l.dist, 0.0);
}

fn numeric_grad(f: impl Fn(&[f64]) -> f64, x: &[f64]) -> Vec<f64> {
    let h = 1e-6;
    (0..x.len())
        .map(|i| {
            let mut p = x.to_vec();
            let mut m = x.to_vec();
            p[i] += h;
            m[i] -= h;
            (f(&p) - f(&m)) / (2.0 * h)
        })
        .collect()
}

#[test]
fn triplet_gradients_match_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let m = MarginConfig::default();
    for _ in 0..50 {
        let dim = 3;
        let flat: Vec<f64> = (0..2 * 5 * dim).map(|_| rng.random_range(-0.6..0.6)).collect();
        let unpack = |x: &[f64]| -> Vec<[Vec<f64>; 5]> {
            x.chunks(5 * dim)
                .map(|s| std::array::from_fn(|r| s[r * dim..(r + 1) * dim].to_vec()))
                .collect()
        };
        let tl = hierarchical_triplet_loss(&unpack(&flat), &m);
        let analytic: Vec<f64> = tl.grads.iter().flatten().flatten().copied().collect();
        let numeric = numeric_grad(|x| hierarchical_triplet_loss(&unpack(x), &m).loss, &flat);
        for (a, n) in analytic.iter().zip(&numeric) {
            assert!((a - n).abs() < 1e-6, "{a} vs {n}");
        }
    }
}

#[test]
fn ssbr_gradients_match_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..50 {
        let scores: Vec<f64> = (0..8).map(|_| rng.random_range(-3.0..3.0)).collect();
        let l = ssbr_loss(&[scores.clone()]);
        let numeric = numeric_grad(|x| ssbr_loss(&[x.to_vec()]).total(), &scores);
        for (a, n) in l.grads[0].iter().zip(&numeric) {
            assert!((a - n).abs() < 1e-6, "{a} vs {n}");
        }
    }
}
