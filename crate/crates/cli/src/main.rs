//! `lesion-graph` command-line driver.
//!
//! Exit codes: 0 on success, 1 for usage and validation errors, 2 when a
//! stage fails while running.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use lesion_graph::audit::gradient_audit;
use lesion_graph::config::RunConfig;
use lesion_graph::pipeline::{self, Metric, MethodMetrics, WorkDir};
use lesion_graph::Error;

/// Learns lesion similarity embeddings and matches lesions across studies.
#[derive(Debug, Parser)]
#[command(name = "lesion-graph", version)]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Global {
    /// JSON run configuration; defaults apply to missing keys.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Override one configuration key, e.g. `--set sgd.max_iterations=500`.
    /// Repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Work directory holding every artifact (overrides `paths.work_dir`).
    #[arg(long, visible_alias = "out", global = true, value_name = "DIR")]
    dir: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic cohort: annotations, features, volumes, truth.
    Gen,
    /// Validate and normalize the annotations; writes normalizers.json.
    Ingest,
    /// Train the body-part regressor and rewrite lesion z coordinates.
    Ssbr,
    /// Train the embedder with pseudo-labels and refinement.
    Train,
    /// Embed every lesion with the trained embedder.
    Embed,
    /// Nearest-neighbor retrieval in the embedding space.
    Retrieve(RetrieveArgs),
    /// Group each patient's lesions across studies.
    Match,
    /// Evaluate the trained embedding against the raw-feature baseline.
    Eval(EvalArgs),
    /// Finite-difference audit of both training objectives.
    Gradcheck(GradcheckArgs),
    /// Run gen, ingest, ssbr, train, embed, retrieve, match and eval.
    Pipeline,
}

#[derive(Debug, Args)]
struct RetrieveArgs {
    /// Query lesion ids (comma separated); all lesions when omitted.
    #[arg(long = "query", value_delimiter = ',', value_name = "IDS")]
    queries: Vec<u64>,
    /// Results per query (defaults to `eval.top_k`).
    #[arg(long)]
    k: Option<usize>,
    /// Allow results from the query's own patient.
    #[arg(long)]
    include_same_patient: bool,
}

#[derive(Debug, Args)]
struct EvalArgs {
    /// Metrics to compute: are, purity, nmi, accuracy, auc.
    #[arg(long, value_delimiter = ',', default_value = "are,purity,nmi,accuracy,auc")]
    metrics: Vec<String>,
}

#[derive(Debug, Args)]
struct GradcheckArgs {
    /// Random nets per objective.
    #[arg(long, default_value_t = 20)]
    trials: usize,
    /// Audit seed (defaults to the run seed).
    #[arg(long)]
    seed: Option<u64>,
}

/// Tolerance of the gradient audit.
const GRADCHECK_TOLERANCE: f64 = 1e-4;

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_validation() { 1 } else { 2 })
        }
    }
}

fn load_config(g: &Global) -> lesion_graph::Result<RunConfig> {
    let base = match &g.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    let mut cfg = base.with_overrides(&g.overrides)?;
    if let Some(d) = &g.dir {
        cfg.paths.work_dir = d.to_string_lossy().into_owned();
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Formats with four significant digits.
fn sig4(x: f64) -> String {
    if !x.is_finite() {
        return x.to_string();
    }
    if x == 0.0 {
        return "0.000".into();
    }
    let decimals = (3 - x.abs().log10().floor() as i32).max(0) as usize;
    let s = format!("{x:.decimals$}");
    // Rounding can carry into a new leading digit (9.9996 -> 10.000).
    let digits = s.chars().filter(char::is_ascii_digit).skip_while(|c| *c == '0').count();
    if digits > 4 && decimals > 0 {
        format!("{x:.prec$}", prec = decimals - 1)
    } else {
        s
    }
}

fn opt(x: Option<f64>) -> String {
    x.map(sig4).unwrap_or_else(|| "-".into())
}

fn print_metrics(rows: &[MethodMetrics]) {
    println!("method,are_type,are_location,are_size,purity,nmi,accuracy,auc");
    for r in rows {
        println!(
            "{},{},{},{},{},{},{},{}",
            r.method,
            opt(r.are_type),
            opt(r.are_location),
            opt(r.are_size),
            opt(r.purity),
            opt(r.nmi),
            opt(r.accuracy),
            opt(r.auc)
        );
    }
}

fn parse_metrics(names: &[String]) -> lesion_graph::Result<Vec<Metric>> {
    let mut out = Vec::new();
    for n in names {
        let m = Metric::parse(n).ok_or_else(|| Error::Config(format!("unknown metric `{n}`")))?;
        if !out.contains(&m) {
            out.push(m);
        }
    }
    if out.is_empty() {
        return Err(Error::Config("no metrics requested".into()));
    }
    Ok(out)
}

fn existing_dir(cfg: &RunConfig) -> lesion_graph::Result<WorkDir> {
    let dir = WorkDir::new(&cfg.paths.work_dir);
    if !dir.0.is_dir() {
        return Err(Error::Config(format!("work directory {} does not exist", dir.0.display())));
    }
    Ok(dir)
}

fn run(cli: Cli) -> lesion_graph::Result<ExitCode> {
    let cfg = load_config(&cli.global)?;
    match cli.command {
        Command::Gen => {
            let dir = WorkDir::new(&cfg.paths.work_dir);
            let cohort = pipeline::run_gen(&cfg, &dir)?;
            println!(
                "generated {} lesions, {} volumes in {}",
                cohort.dataset.len(),
                cohort.volumes.len(),
                dir.0.display()
            );
        }
        Command::Ingest => {
            let r = pipeline::run_ingest(&existing_dir(&cfg)?)?;
            println!("ingested {} records, feature dim {}", r.records, r.feature_dim);
            for (split, n) in &r.per_split {
                println!("  {split}: {n}");
            }
        }
        Command::Ssbr => {
            let r = pipeline::run_ssbr(&cfg, &existing_dir(&cfg)?)?;
            println!(
                "ssbr: {} training volumes, {} held out, {} hard",
                r.train_volumes, r.heldout_volumes, r.hard_volumes
            );
            println!("held-out median r: {}", sig4(r.heldout_median_r));
            println!("held-out region accuracy: {}", sig4(r.heldout_region_accuracy));
        }
        Command::Train => {
            let r = pipeline::run_train(&cfg, &existing_dir(&cfg)?)?;
            println!(
                "trained {} + {} refinement iterations",
                r.iterations, r.refine_iterations
            );
            println!(
                "loss: first 100 {} last 100 {}",
                sig4(r.first_100_loss),
                sig4(r.last_100_loss)
            );
            println!(
                "pseudo-label accuracy: initial {} refined {}",
                opt(r.initial_label_accuracy),
                opt(r.refined_label_accuracy)
            );
        }
        Command::Embed => {
            let n = pipeline::run_embed(&existing_dir(&cfg)?)?;
            println!("embedded {n} lesions");
        }
        Command::Retrieve(a) => {
            let k = a.k.unwrap_or(cfg.eval.top_k);
            let dir = existing_dir(&cfg)?;
            let n = pipeline::run_retrieve(&dir, &a.queries, k, !a.include_same_patient)?;
            println!("retrieved top-{k} for {n} queries into {}", dir.file("retrieval.csv").display());
        }
        Command::Match => {
            let dir = existing_dir(&cfg)?;
            let n = pipeline::run_match(&cfg, &dir)?;
            println!("{n} lesion groups written to {}", dir.file("matches.csv").display());
        }
        Command::Eval(a) => {
            let metrics = parse_metrics(&a.metrics)?;
            let report = pipeline::run_eval(&cfg, &existing_dir(&cfg)?, &metrics)?;
            print_metrics(&report.rows);
        }
        Command::Gradcheck(a) => {
            if a.trials == 0 {
                return Err(Error::Config("--trials must be positive".into()));
            }
            let r = gradient_audit(a.trials, a.seed.unwrap_or(cfg.rng_seed))?;
            println!(
                "{}",
                serde_json::json!({
                    "trials": r.trials,
                    "redraws": r.redraws,
                    "triplet_max_error": r.triplet_max_error,
                    "ssbr_max_error": r.ssbr_max_error,
                })
            );
            println!("max relative error: {}", sig4(r.max_error()));
            if r.max_error() >= GRADCHECK_TOLERANCE {
                return Ok(ExitCode::from(2));
            }
        }
        Command::Pipeline => {
            let dir = WorkDir::new(&cfg.paths.work_dir);
            let report = pipeline::run_pipeline(&cfg, &dir)?;
            print_metrics(&report.rows);
        }
    }
    Ok(ExitCode::SUCCESS)
}
