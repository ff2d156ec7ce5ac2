//! End-to-end acceptance run. Prints one PASS/FAIL line per criterion and
//! exits nonzero when any fails.

mod common;

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use common::matching::{random_instance, reference};
use common::pairs::{enumerate_pairs, random_partition};
use lesion_graph::audit::gradient_audit;
use lesion_graph::config::RunConfig;
use lesion_graph::graph::{match_lesions, pairwise_pr};
use lesion_graph::pipeline::{
    run_gen, run_ingest, run_pipeline, run_ssbr, run_train, EvalReport, MethodMetrics, SsbrReport, WorkDir, BASELINE,
    TRAINED,
};
use lesion_graph::sampling::{hierarchical_triplet_loss, training_pool, MarginConfig, Sampler, SamplerConfig};
use lesion_graph::ssbr::ssbr_loss;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn secs(d: Duration) -> String {
    format!("{:.1}s", d.as_secs_f64())
}

fn gradient_audit_criterion() -> Outcome {
    let start = Instant::now();
    let r = gradient_audit(20, 20240601).map_err(|e| e.to_string())?;
    let took = start.elapsed();
    check(
        r.trials >= 20 && r.max_error() < 1e-4 && took < Duration::from_secs(30),
        format!(
            "max relative error {:.2e} (triplet {:.2e}, ssbr {:.2e}) over {} nets each in {}",
            r.max_error(),
            r.triplet_max_error,
            r.ssbr_max_error,
            r.trials,
            secs(took)
        ),
    )
}

fn closed_form_criterion() -> Outcome {
    let e = vec![0.0, 1.0, 0.0];
    let tl = hierarchical_triplet_loss(&[std::array::from_fn(|_| e.clone())], &MarginConfig::default());
    // (0.1 + 0.2 + 0.4) / 2 by hand; a couple of ulps of summation roundoff.
    let triplet_ok = (tl.loss - 0.35).abs() <= 2.0 * f64::EPSILON;
    let s = ssbr_loss(&[vec![0.0, 1.0, 2.0]]).total();
    let ssbr_ok = (s - 0.62652).abs() <= 1e-4;
    check(triplet_ok && ssbr_ok, format!("triplet {:.17} (want 0.35), ssbr {s:.6} (want 0.62652)", tl.loss))
}

fn sampler_criterion() -> Outcome {
    let (ds, labels) = common::labeled_cohort(RunConfig::default().rng_seed);
    let cfg = SamplerConfig::default();
    let mut sampler = Sampler::new(&ds, &labels, training_pool(&ds, &labels), cfg).map_err(|e| e.to_string())?;
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let mut bad = 0;
    let mut first = None;
    for _ in 0..10_000 {
        let s = sampler.sample(&mut rng).map_err(|e| e.to_string())?;
        if let Err(e) = common::check_sequence(&ds, &labels, &s, cfg.t_low, cfg.t_high) {
            bad += 1;
            first.get_or_insert(e);
        }
    }
    check(
        bad == 0,
        format!("{} of 10000 sequences valid{}", 10_000 - bad, first.map(|e| format!("; first failure: {e}")).unwrap_or_default()),
    )
}

fn matching_criterion() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(31337);
    let mut mismatches = 0;
    for _ in 0..1000 {
        let (lesions, cfg) = random_instance(&mut rng);
        let got = match_lesions(&lesions, &cfg).map_err(|e| e.to_string())?;
        if got != reference(&lesions, cfg.t1, cfg.t2) {
            mismatches += 1;
        }
    }
    let took = start.elapsed();
    check(
        mismatches == 0 && took < Duration::from_secs(10),
        format!("{} of 1000 instances equal the reference in {}", 1000 - mismatches, secs(took)),
    )
}

fn pairwise_criterion() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4242);
    let mut mismatches = 0;
    for _ in 0..1000 {
        let ids: Vec<u64> = (0..rng.random_range(1..=12u64)).map(|i| 10 + 2 * i).collect();
        let pred = random_partition(&ids, &mut rng);
        let truth = random_partition(&ids, &mut rng);
        let (tp, fp, fn_) = enumerate_pairs(&ids, &pred, &truth);
        let s = pairwise_pr(&pred, &truth).map_err(|e| e.to_string())?;
        let p = if tp + fp == 0 { 1.0 } else { tp as f64 / (tp + fp) as f64 };
        let r = if tp + fn_ == 0 { 1.0 } else { tp as f64 / (tp + fn_) as f64 };
        if (s.true_positives, s.false_positives, s.false_negatives) != (tp, fp, fn_) || s.precision != p || s.recall != r {
            mismatches += 1;
        }
    }
    let hand = pairwise_pr(&[vec![1, 2, 3]], &[vec![1, 2], vec![3]]).map_err(|e| e.to_string())?;
    let hand_ok = hand.precision == 1.0 / 3.0 && hand.recall == 1.0;
    check(
        mismatches == 0 && hand_ok,
        format!(
            "{} of 1000 partitions agree; hand case precision {} recall {}",
            1000 - mismatches,
            hand.precision,
            hand.recall
        ),
    )
}

fn row<'a>(report: &'a EvalReport, name: &str) -> Result<&'a MethodMetrics, String> {
    report.rows.iter().find(|r| r.method == name).ok_or(format!("no {name} row"))
}

fn end_to_end_criterion(report: &EvalReport, took: Duration) -> Outcome {
    let t = row(report, TRAINED)?;
    let b = row(report, BASELINE)?;
    let need = |v: Option<f64>, n: &str| v.ok_or(format!("{n} missing"));
    let (t_are, b_are) = (need(t.are_type, "are_type")?, need(b.are_type, "are_type")?);
    let (t_auc, b_auc) = (need(t.auc, "auc")?, need(b.auc, "auc")?);
    check(
        t_are <= 0.05 && t_auc >= 0.95 && t_are < b_are && t_auc > b_auc && took < Duration::from_secs(600),
        format!("type ARE {t_are:.4} (baseline {b_are:.4}), matching AUC {t_auc:.4} (baseline {b_auc:.4}) in {}", secs(took)),
    )
}

fn refinement_criterion() -> Outcome {
    let results: Vec<Result<(f64, f64), String>> = std::thread::scope(|s| {
        let handles: Vec<_> = (0..10u64)
            .map(|seed| {
                s.spawn(move || -> Result<(f64, f64), String> {
                    let cfg = RunConfig::default()
                        .with_overrides(&[format!("rng_seed={seed}"), "synthetic.label_flip_rate=0.2".into()])
                        .map_err(|e| e.to_string())?;
                    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
                    let dir = WorkDir::new(tmp.path());
                    let go = || -> lesion_graph::Result<_> {
                        run_gen(&cfg, &dir)?;
                        run_ingest(&dir)?;
                        run_ssbr(&cfg, &dir)?;
                        run_train(&cfg, &dir)
                    };
                    let t = go().map_err(|e| e.to_string())?;
                    match (t.initial_label_accuracy, t.refined_label_accuracy) {
                        (Some(a), Some(b)) => Ok((a, b)),
                        _ => Err("label accuracy missing".into()),
                    }
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().unwrap_or(Err("panicked".into()))).collect()
    });
    let mut wins = 0;
    let mut cells = Vec::new();
    for (seed, r) in results.iter().enumerate() {
        match r {
            Ok((a, b)) => {
                if b >= a {
                    wins += 1;
                }
                cells.push(format!("{seed}:{a:.3}->{b:.3}"));
            }
            Err(e) => cells.push(format!("{seed}:error {e}")),
        }
    }
    check(wins >= 8, format!("refined >= initial on {wins}/10 seeds [{}]", cells.join(" ")))
}

fn ssbr_criterion(dir: &Path) -> Outcome {
    let text = std::fs::read_to_string(dir.join("ssbr_summary.json")).map_err(|e| e.to_string())?;
    let r: SsbrReport = serde_json::from_str(&text).map_err(|e| e.to_string())?;
    check(
        r.heldout_median_r >= 0.99 && r.heldout_region_accuracy >= 0.95,
        format!(
            "held-out median r {:.5}, region accuracy {:.4} over {} volumes",
            r.heldout_median_r, r.heldout_region_accuracy, r.heldout_volumes
        ),
    )
}

fn determinism_criterion(a: &Path, b: &Path) -> Outcome {
    let read = |d: &Path| std::fs::read(d.join("metrics.csv")).map_err(|e| e.to_string());
    let (x, y) = (read(a)?, read(b)?);
    check(x == y && !x.is_empty(), format!("metrics.csv {} bytes, identical: {}", x.len(), x == y))
}

fn guarded(f: impl FnOnce() -> Outcome) -> Outcome {
    catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
        let msg = p
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_default();
        Err(format!("panicked: {msg}"))
    })
}

fn main() -> ExitCode {
    let mut results: Vec<(u8, &str, Outcome)> = Vec::new();
    let mut report = |n: u8, name: &'static str, o: Outcome| {
        match &o {
            Ok(d) => println!("PASS {n} {name}: {d}"),
            Err(d) => println!("FAIL {n} {name}: {d}"),
        }
        results.push((n, name, o));
    };

    report(1, "gradient audit", guarded(gradient_audit_criterion));
    report(2, "closed-form losses", guarded(closed_form_criterion));
    report(3, "sampler constraints", guarded(sampler_criterion));
    report(4, "matching oracle", guarded(matching_criterion));
    report(5, "pairwise oracle", guarded(pairwise_criterion));

    // Two independent default runs: the first feeds criteria 6 and 8, the
    // pair feeds criterion 9.
    let (tmp_a, tmp_b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let cfg = RunConfig::default();
    let (run_a, run_b) = std::thread::scope(|s| {
        let spawn = |p: &Path| {
            let dir = WorkDir::new(p);
            let cfg = &cfg;
            s.spawn(move || {
                let start = Instant::now();
                run_pipeline(cfg, &dir).map(|r| (r, start.elapsed())).map_err(|e| e.to_string())
            })
        };
        let (a, b) = (spawn(tmp_a.path()), spawn(tmp_b.path()));
        (
            a.join().unwrap_or(Err("panicked".into())),
            b.join().unwrap_or(Err("panicked".into())),
        )
    });

    report(
        6,
        "synthetic end-to-end",
        match &run_a {
            Ok((r, took)) => guarded(|| end_to_end_criterion(r, *took)),
            Err(e) => Err(format!("pipeline failed: {e}")),
        },
    );
    report(7, "refinement trend", guarded(refinement_criterion));
    report(
        8,
        "body-part regression",
        match &run_a {
            Ok(_) => guarded(|| ssbr_criterion(tmp_a.path())),
            Err(e) => Err(format!("pipeline failed: {e}")),
        },
    );
    report(
        9,
        "determinism",
        match (&run_a, &run_b) {
            (Ok(_), Ok(_)) => guarded(|| determinism_criterion(tmp_a.path(), tmp_b.path())),
            _ => Err("a pipeline run failed".into()),
        },
    );

    let failed = results.iter().filter(|r| r.2.is_err()).count();
    println!("{} of {} criteria passed", results.len() - failed, results.len());
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
