//! The work behind each CLI subcommand, callable from library code.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use serde::de::DeserializeOwned;
use survfuse_core::cv::{aggregate, evaluate_fold, pooled_log_rank, CvReport, Dataset};
use survfuse_core::gradcheck::{pipeline_gradcheck, GradcheckStats, PipelineCase};
use survfuse_core::synth::{synth_cohort, SynthConfig};
use survfuse_core::RunConfig;

use crate::error::{Error, Result};
use crate::km::{emit, figure_from_predictions, KmFigure, KmFiles};
use crate::{checkpoint, dataset, report, run};

pub const REPORT_FILE: &str = "report.toml";
pub const EVAL_REPORT_FILE: &str = "eval.toml";
pub const CHECKPOINT_DIR: &str = "checkpoints";

/// Finite-difference step, relative-error tolerance and gradient floor of
/// the pipeline gradient check.
pub const GRADCHECK_STEP: f64 = 1e-4;
pub const GRADCHECK_TOLERANCE: f64 = 1e-3;
pub const GRADCHECK_FLOOR: f64 = 1e-8;
pub const GRADCHECK_MIN_PASS: f64 = 0.99;

pub fn load_toml<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    toml::from_str(&text).map_err(|e| Error::format(path, e.to_string()))
}

pub fn checkpoint_path(out: &Path, fold_id: usize) -> PathBuf {
    out.join(CHECKPOINT_DIR).join(format!("fold_{fold_id}.ckpt"))
}

/// Generates a synthetic cohort and writes it in the dataset layout.
pub fn synth(config: &SynthConfig, out: &Path) -> Result<Dataset> {
    let data = Dataset::from_synth(&synth_cohort(config)?);
    dataset::write_dataset(out, &data)?;
    Ok(data)
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainArtifacts {
    pub report: CvReport,
    pub report_path: PathBuf,
    pub checkpoints: Vec<PathBuf>,
}

/// Cross-validates on the dataset in `data` and writes `report.toml` and one
/// checkpoint per fold under `out`.
///
/// Path settings are cleared from the configuration stored in checkpoints,
/// so the artifacts depend only on the dataset and the model/training
/// settings.
pub fn train(config: &RunConfig, data: &Path, out: &Path, threads: Option<usize>) -> Result<TrainArtifacts> {
    let mut config = config.clone();
    config.data_dir = None;
    config.out_dir = None;
    let ds = dataset::read_dataset(data)?;
    let (report, outcomes) = run::run_cv_parallel(&config, &ds, threads)?;

    fs::create_dir_all(out.join(CHECKPOINT_DIR)).map_err(|e| Error::io(out, e))?;
    let mut checkpoints = Vec::with_capacity(outcomes.len());
    for o in &outcomes {
        let path = checkpoint_path(out, o.report.fold_id);
        checkpoint::save(&path, &o.training.checkpoint, &ds.gene_names)?;
        checkpoints.push(path);
    }
    let report_path = out.join(REPORT_FILE);
    report::save(&report_path, &report)?;
    Ok(TrainArtifacts {
        report,
        report_path,
        checkpoints,
    })
}

/// Scores every complete patient of `data` with a saved checkpoint and
/// writes the single-fold report to `out/eval.toml`.
pub fn eval(checkpoint_file: &Path, data: &Path, out: &Path) -> Result<CvReport> {
    let saved = checkpoint::load(checkpoint_file)?;
    let ds = dataset::read_dataset(data)?;
    if ds.gene_names != saved.gene_names {
        return Err(Error::Usage(format!(
            "gene columns of {} do not match the {} genes the checkpoint was trained on",
            data.display(),
            saved.gene_names.len()
        )));
    }
    let (patients, excluded) = ds.complete();
    if patients.is_empty() {
        return Err(Error::Usage(format!("{} has no patient with both modalities", data.display())));
    }
    let fold = evaluate_fold(&saved.checkpoint, &patients)?;
    let mut warnings: Vec<String> = excluded
        .iter()
        .map(|id| format!("patient {id} is missing a modality and was excluded"))
        .collect();
    if fold.c_index.is_none() {
        warnings.push("no comparable pairs; C-index undefined".into());
    }
    let folds = vec![fold];
    let report = CvReport {
        aggregate: aggregate(&folds.iter().filter_map(|f| f.c_index).collect::<Vec<_>>()),
        pooled_log_rank: pooled_log_rank(&folds)?,
        folds,
        excluded,
        warnings,
    };
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    report::save(&out.join(EVAL_REPORT_FILE), &report)?;
    Ok(report)
}

/// Kaplan–Meier curves of the pooled test predictions in a report.
pub fn km(report_file: &Path, out: &Path) -> Result<(KmFigure, KmFiles)> {
    let r = report::load(report_file)?;
    let predictions: Vec<_> = r.folds.iter().flat_map(|f| f.predictions.iter().cloned()).collect();
    let figure = figure_from_predictions(&predictions)?;
    let files = emit(&figure, out)?;
    Ok((figure, files))
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradcheckCaseResult {
    pub case: PipelineCase,
    pub stats: GradcheckStats,
    pub elapsed: Duration,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradcheckSummary {
    pub cases: Vec<GradcheckCaseResult>,
    pub total: GradcheckStats,
    pub elapsed: Duration,
}

impl GradcheckSummary {
    /// Every case, and the sweep as a whole, meets the pass fraction.
    pub fn passed(&self) -> bool {
        self.total.pass_fraction() >= GRADCHECK_MIN_PASS
            && self.cases.iter().all(|c| c.stats.pass_fraction() >= GRADCHECK_MIN_PASS)
    }
}

/// Runs the seeded pipeline gradient-check sweep, cases in parallel.
pub fn gradcheck(threads: Option<usize>) -> Result<GradcheckSummary> {
    let start = Instant::now();
    let cases = PipelineCase::sweep();
    let results = run::par_map(threads, &cases, |case| {
        let t = Instant::now();
        pipeline_gradcheck(case, GRADCHECK_STEP, GRADCHECK_TOLERANCE, GRADCHECK_FLOOR).map(|stats| GradcheckCaseResult {
            case: case.clone(),
            stats,
            elapsed: t.elapsed(),
        })
    })?
    .into_iter()
    .collect::<survfuse_core::Result<Vec<_>>>()?;
    let mut total = GradcheckStats::default();
    for r in &results {
        total.merge(&r.stats);
    }
    Ok(GradcheckSummary {
        cases: results,
        total,
        elapsed: start.elapsed(),
    })
}
