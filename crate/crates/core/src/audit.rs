//! Finite-difference audit of the two training objectives through the
//! embedder.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::net::{grad_check, Gradients, Mlp};
use crate::sampling::{hierarchical_triplet_loss, sequence_hinges, MarginConfig};
use crate::ssbr::ssbr_loss;

/// Central-difference step.
pub const AUDIT_STEP: f64 = 1e-5;
/// Points closer than this to a ReLU kink or a hinge corner are redrawn.
pub const KINK_CLEARANCE: f64 = 1e-4;
/// Central differences at `AUDIT_STEP` carry roughly 1e-11 of roundoff on an
/// O(1) loss, which is already 1e-4 relative error on a 1e-7 gradient. Trials
/// with a nonzero gradient component below this floor are redrawn.
pub const MIN_RESOLVABLE_GRAD: f64 = 1e-6;

fn unresolvable<I: IntoIterator<Item = f64>>(grads: I) -> bool {
    grads.into_iter().any(|g| g != 0.0 && g.abs() < MIN_RESOLVABLE_GRAD)
}

/// Triplet objective over a fixed batch of `(A..E)` inputs.
pub fn triplet_objective(net: &Mlp, batch: &[[Vec<f64>; 5]], margins: &MarginConfig) -> (f64, Gradients) {
    let traces: Vec<Vec<_>> = batch
        .iter()
        .map(|seq| seq.iter().map(|x| net.forward_trace(x).expect("audit input")).collect())
        .collect();
    let embs: Vec<[Vec<f64>; 5]> = traces
        .iter()
        .map(|t| std::array::from_fn(|r| t[r].output.clone()))
        .collect();
    let tl = hierarchical_triplet_loss(&embs, margins);
    let mut grads = Gradients::zeros_like(net);
    for (t, g) in traces.iter().zip(&tl.grads) {
        for r in 0..5 {
            net.accumulate(&t[r], &g[r], &mut grads).expect("audit shapes");
        }
    }
    (tl.loss, grads)
}

/// Body-part objective over fixed per-volume slice sets.
pub fn ssbr_objective(net: &Mlp, volumes: &[Vec<Vec<f64>>]) -> (f64, Gradients) {
    let traces: Vec<Vec<_>> = volumes
        .iter()
        .map(|v| v.iter().map(|x| net.forward_trace(x).expect("audit input")).collect())
        .collect();
    let scores: Vec<Vec<f64>> = traces
        .iter()
        .map(|v| v.iter().map(|t| t.output[0]).collect())
        .collect();
    let loss = ssbr_loss(&scores);
    let mut grads = Gradients::zeros_like(net);
    for (v, g) in traces.iter().zip(&loss.grads) {
        for (t, gs) in v.iter().zip(g) {
            net.accumulate(t, &[*gs], &mut grads).expect("audit shapes");
        }
    }
    (loss.total(), grads)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AuditReport {
    pub trials: usize,
    pub triplet_max_error: f64,
    pub ssbr_max_error: f64,
    /// Draws rejected for sitting near a kink or below the gradient floor.
    pub redraws: usize,
}

impl AuditReport {
    pub fn max_error(&self) -> f64 {
        self.triplet_max_error.max(self.ssbr_max_error)
    }
}

fn random_vec(rng: &mut impl Rng, dim: usize) -> Vec<f64> {
    (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect()
}

/// Random net with nonzero biases. With zero biases an input that keeps a
/// single hidden unit alive maps onto a ray, and normalization then makes
/// that unit's weights exactly gradient-free.
fn random_net(rng: &mut impl Rng, dims: &[usize], normalize: bool) -> Result<Mlp> {
    let mut net = Mlp::new(dims, normalize, rng)?;
    for l in &mut net.layers {
        for b in &mut l.biases {
            *b = rng.random_range(-0.5..0.5);
        }
    }
    Ok(net)
}

fn random_dims(rng: &mut impl Rng, out: usize) -> Vec<usize> {
    let mut dims = vec![rng.random_range(3..=8)];
    for _ in 0..rng.random_range(1..=2) {
        dims.push(rng.random_range(4..=10));
    }
    dims.push(out);
    dims
}

/// Parameters whose only effect is to shift every score of a volume by the
/// same amount. Both body-part loss terms see score differences only, so
/// these gradients are identically zero and a finite difference there
/// measures roundoff. A parameter qualifies when its score sensitivity is
/// bitwise equal across the slices of every volume (the output bias always
/// does, as does the bias of a unit whose path to the score stays alive on
/// every slice).
pub fn shift_invariant_params(net: &Mlp, volumes: &[Vec<Vec<f64>>]) -> Result<Vec<usize>> {
    let mut uniform = vec![true; net.param_count()];
    for v in volumes {
        let mut first: Option<Vec<f64>> = None;
        for x in v {
            let mut g = Gradients::zeros_like(net);
            net.accumulate(&net.forward_trace(x)?, &[1.0], &mut g)?;
            let sens: Vec<f64> = g.flat().collect();
            match &first {
                None => first = Some(sens),
                Some(f) => {
                    for (u, (a, b)) in uniform.iter_mut().zip(f.iter().zip(&sens)) {
                        *u &= a == b;
                    }
                }
            }
        }
    }
    Ok(uniform.iter().enumerate().filter(|(_, u)| **u).map(|(i, _)| i).collect())
}

/// Runs `trials` random nets and batches per objective and reports the
/// largest relative error over every parameter.
pub fn gradient_audit(trials: usize, seed: u64) -> Result<AuditReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let margins = MarginConfig::default();
    let mut report = AuditReport {
        trials,
        triplet_max_error: 0.0,
        ssbr_max_error: 0.0,
        redraws: 0,
    };

    let mut done = 0;
    while done < trials {
        let out = rng.random_range(2..=5);
        let dims = random_dims(&mut rng, out);
        let net = random_net(&mut rng, &dims, true)?;
        let s = rng.random_range(1..=4);
        let batch: Vec<[Vec<f64>; 5]> = (0..s)
            .map(|_| std::array::from_fn(|_| random_vec(&mut rng, dims[0])))
            .collect();
        let flat: Vec<&Vec<f64>> = batch.iter().flatten().collect();
        if net.min_hidden_margin(&flat)? < KINK_CLEARANCE {
            report.redraws += 1;
            continue;
        }
        let near_corner = batch.iter().any(|seq| {
            let e: [Vec<f64>; 5] = std::array::from_fn(|r| net.forward(&seq[r]).expect("audit input"));
            sequence_hinges(&e, &margins).iter().any(|h| h.abs() < KINK_CLEARANCE)
        });
        if near_corner || unresolvable(triplet_objective(&net, &batch, &margins).1.flat()) {
            report.redraws += 1;
            continue;
        }
        let err = grad_check(&net, |n| triplet_objective(n, &batch, &margins), AUDIT_STEP, None);
        report.triplet_max_error = report.triplet_max_error.max(err);
        done += 1;
    }

    let mut done = 0;
    while done < trials {
        let dims = random_dims(&mut rng, 1);
        let net = random_net(&mut rng, &dims, false)?;
        let m = rng.random_range(3..=6);
        let vols: Vec<Vec<Vec<f64>>> = (0..rng.random_range(1..=3))
            .map(|_| (0..m).map(|_| random_vec(&mut rng, dims[0])).collect())
            .collect();
        let flat: Vec<&Vec<f64>> = vols.iter().flatten().collect();
        if net.min_hidden_margin(&flat)? < KINK_CLEARANCE {
            report.redraws += 1;
            continue;
        }
        let invariant = shift_invariant_params(&net, &vols)?;
        let checked: Vec<usize> = (0..net.param_count()).filter(|i| !invariant.contains(i)).collect();
        let (_, g) = ssbr_objective(&net, &vols);
        let flat_g: Vec<f64> = g.flat().collect();
        if unresolvable(checked.iter().map(|&i| flat_g[i])) {
            report.redraws += 1;
            continue;
        }
        let err = grad_check(&net, |n| ssbr_objective(n, &vols), AUDIT_STEP, Some(&checked));
        let scale = g.norm().max(1.0);
        if invariant.iter().any(|&i| flat_g[i].abs() > 1e-12 * scale) {
            report.ssbr_max_error = report.ssbr_max_error.max(1.0);
        }
        report.ssbr_max_error = report.ssbr_max_error.max(err);
        done += 1;
    }
    Ok(report)
}
