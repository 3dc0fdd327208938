//! Parallel execution of independent jobs (cross-validation folds,
//! gradient-check cases) on a rayon pool sized by `SURVFUSE_THREADS`.
//!
//! Results are collected in job order, so output never depends on the
//! thread count.

use rayon::prelude::*;
use survfuse_core::cv::{assemble_report, plan_folds, run_fold, CvReport, Dataset, FoldOutcome};
use survfuse_core::RunConfig;

use crate::error::{Error, Result};

pub const THREADS_ENV: &str = "SURVFUSE_THREADS";

/// Thread cap from `SURVFUSE_THREADS`; `None` when unset (rayon's default).
pub fn threads_from_env() -> Result<Option<usize>> {
    match std::env::var(THREADS_ENV) {
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(Some(n)),
            _ => Err(Error::Usage(format!("{THREADS_ENV} must be a positive integer, got {v:?}"))),
        },
        Err(std::env::VarError::NotPresent) => Ok(None),
        Err(e) => Err(Error::Usage(format!("{THREADS_ENV}: {e}"))),
    }
}

/// Runs `f` inside a pool with at most `threads` workers.
pub fn in_pool<T: Send>(threads: Option<usize>, f: impl FnOnce() -> T + Send) -> Result<T> {
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(n) = threads {
        builder = builder.num_threads(n);
    }
    let pool = builder
        .build()
        .map_err(|e| Error::Usage(format!("cannot start worker pool: {e}")))?;
    Ok(pool.install(f))
}

/// Maps `f` over `items` in parallel, keeping input order.
pub fn par_map<I: Sync, T: Send>(threads: Option<usize>, items: &[I], f: impl Fn(&I) -> T + Sync + Send) -> Result<Vec<T>> {
    in_pool(threads, || items.par_iter().map(&f).collect())
}

/// Cross-validation with folds trained concurrently.
pub fn run_cv_parallel(config: &RunConfig, dataset: &Dataset, threads: Option<usize>) -> Result<(CvReport, Vec<FoldOutcome>)> {
    config.validate()?;
    let (patients, excluded) = dataset.complete();
    let ids: Vec<&str> = patients.iter().map(|p| p.id()).collect();
    let plans = plan_folds(&ids, config.train.folds, config.train.validation_fraction, config.seed)?;
    let outcomes = par_map(threads, &plans, |plan| run_fold(config, &patients, plan))?
        .into_iter()
        .collect::<survfuse_core::Result<Vec<_>>>()?;
    Ok((assemble_report(&outcomes, excluded)?, outcomes))
}
