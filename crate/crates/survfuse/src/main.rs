use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use survfuse::commands::{self, load_toml};
use survfuse::km::format_p;
use survfuse::run::threads_from_env;
use survfuse::{Error, Result};
use survfuse_core::synth::SynthConfig;
use survfuse_core::RunConfig;

#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;

/// Multimodal survival prediction: synthetic cohorts, cross-validated
/// training, evaluation and Kaplan–Meier plots.
///
/// SURVFUSE_THREADS caps the number of worker threads.
#[derive(Parser)]
#[command(name = "survfuse", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic cohort in the dataset layout.
    Synth(SynthArgs),
    /// Cross-validate on a dataset; writes report.toml and per-fold checkpoints.
    Train(TrainArgs),
    /// Score a dataset with a saved checkpoint; writes eval.toml.
    Eval(EvalArgs),
    /// Kaplan–Meier curves (km.csv, km.svg) from a report.
    Km(KmArgs),
    /// Run the finite-difference gradient check sweep.
    Gradcheck,
}

#[derive(Args)]
struct SynthArgs {
    /// Cohort settings (TOML); defaults when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    /// Run settings (TOML); defaults when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dataset directory; overrides `data_dir` in the config.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    folds: Option<usize>,
    /// Fraction of tokens kept by attention pooling, in (0, 1].
    #[arg(long = "pool-ratio")]
    pool_ratio: Option<f64>,
    /// Output directory; overrides `out_dir` in the config.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct KmArgs {
    #[arg(long)]
    report: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

fn pick_path(flag: Option<PathBuf>, configured: Option<&String>, what: &str) -> Result<PathBuf> {
    flag.or_else(|| configured.map(PathBuf::from))
        .ok_or_else(|| Error::Usage(format!("no {what} given: pass --{what} or set {what}_dir in the config")))
}

fn print_report(report: &survfuse_core::cv::CvReport) {
    for f in &report.folds {
        let c = f.c_index.map_or("undefined".to_owned(), |c| format!("{c:.4}"));
        let p = f.logrank_p.map_or("n/a".to_owned(), format_p);
        println!(
            "fold {}: c_index {c} over {} pairs, log-rank p {p}, {} epochs (best {})",
            f.fold_id, f.pair_count, f.epochs_trained, f.best_epoch
        );
    }
    if let Some(a) = &report.aggregate {
        println!("c_index {} over {} folds", a.display, a.folds);
    }
    if let Some(lr) = &report.pooled_log_rank {
        println!("pooled log-rank statistic {:.4}, p {}", lr.statistic, format_p(lr.p_value));
    }
    for w in &report.warnings {
        eprintln!("warning: {w}");
    }
}

fn run(cli: Cli) -> Result<bool> {
    let threads = threads_from_env()?;
    match cli.command {
        Command::Synth(a) => {
            let mut cfg: SynthConfig = match &a.config {
                Some(p) => load_toml(p)?,
                None => SynthConfig::default(),
            };
            if let Some(s) = a.seed {
                cfg.seed = s;
            }
            let ds = commands::synth(&cfg, &a.out)?;
            println!("wrote {} patients to {}", ds.patients.len(), a.out.display());
        }
        Command::Train(a) => {
            let mut cfg: RunConfig = match &a.config {
                Some(p) => load_toml(p)?,
                None => RunConfig::default(),
            };
            if let Some(s) = a.seed {
                cfg.seed = s;
            }
            if let Some(f) = a.folds {
                cfg.train.folds = f;
            }
            if let Some(k) = a.pool_ratio {
                cfg.model.pool_ratio = k;
            }
            let data = pick_path(a.data, cfg.data_dir.as_ref(), "data")?;
            let out = pick_path(a.out, cfg.out_dir.as_ref(), "out")?;
            let artifacts = commands::train(&cfg, &data, &out, threads)?;
            print_report(&artifacts.report);
            println!("wrote {}", artifacts.report_path.display());
        }
        Command::Eval(a) => {
            let report = commands::eval(&a.checkpoint, &a.data, &a.out)?;
            print_report(&report);
            println!("wrote {}", a.out.join(commands::EVAL_REPORT_FILE).display());
        }
        Command::Km(a) => {
            let (figure, files) = commands::km(&a.report, &a.out)?;
            println!("wrote {}", files.csv.display());
            match (&files.svg, figure.log_rank, figure.gap) {
                (Some(svg), Some(lr), Some(gap)) => {
                    println!("wrote {} (log-rank p = {})", svg.display(), format_p(lr.p_value));
                    println!(
                        "survival gap at median follow-up t = {:.3}: low {:.3}, high {:.3}, gap {:.3}",
                        gap.time, gap.low, gap.high, gap.gap
                    );
                }
                _ => eprintln!("warning: only one risk group present; no figure or log-rank test"),
            }
        }
        Command::Gradcheck => {
            let summary = commands::gradcheck(threads)?;
            for r in &summary.cases {
                let c = &r.case;
                println!(
                    "C={} d_model={} T={} heads={} seed={}: {}/{} coordinates within tolerance, max rel err {:.2e}, {:.1}s",
                    c.phenotypes,
                    c.model_dim,
                    c.depth,
                    c.heads,
                    c.seed,
                    r.stats.passed,
                    r.stats.checked,
                    r.stats.max_relative_error,
                    r.elapsed.as_secs_f64()
                );
            }
            println!(
                "total {}/{} ({:.3}%) in {:.1}s",
                summary.total.passed,
                summary.total.checked,
                100.0 * summary.total.pass_fraction(),
                summary.elapsed.as_secs_f64()
            );
            return Ok(summary.passed());
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
