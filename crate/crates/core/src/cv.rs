//! Cross-validated training with early stopping, and the per-fold and
//! aggregate evaluation reports.
//!
//! Patients are assigned to folds by hashing their id with the run seed, so a
//! patient's fold never depends on which other patients are present. Inside
//! each fold the non-test patients are split into training and validation
//! the same way. Gene modules and the gene scaler are fitted on the training
//! patients only.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::encoders::{cluster_genes, GeneScaler, ModuleMembership, PatchFeatureSet};
use crate::error::{Error, Result};
use crate::graph::{Graph, ParamStore};
use crate::head::SurvivalRecord;
use crate::metrics::{evaluate_cohort, log_rank, split_by_group, LogRank, RiskGroup};
use crate::model::{PatientInput, FusionNet};
use crate::optim::AdamState;
use crate::rng::{derive, string_key};
use crate::synth::SynthCohort;

const FOLD_STREAM: u64 = 0xF01D;
const VALIDATION_STREAM: u64 = 0x7A11;
const GENE_STREAM: u64 = 0x6E4E;
const MODEL_STREAM: u64 = 0x30DE;

/// One patient as ingested; either modality may be missing.
#[derive(Clone, Debug, PartialEq)]
pub struct PatientData {
    pub record: SurvivalRecord,
    pub patches: Option<PatchFeatureSet>,
    pub expression: Option<Vec<f64>>,
}

impl PatientData {
    pub fn id(&self) -> &str {
        &self.record.patient_id
    }

    fn is_complete(&self) -> bool {
        self.patches.is_some() && self.expression.is_some()
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Dataset {
    pub gene_names: Vec<String>,
    pub patients: Vec<PatientData>,
}

impl Dataset {
    pub fn from_synth(cohort: &SynthCohort) -> Self {
        let patients = cohort
            .records
            .iter()
            .zip(&cohort.patches)
            .zip(&cohort.expression)
            .map(|((r, p), e)| PatientData {
                record: r.clone(),
                patches: Some(p.clone()),
                expression: Some(e.clone()),
            })
            .collect();
        Self {
            gene_names: cohort.gene_names.clone(),
            patients,
        }
    }

    /// Patients with both modalities, and the ids of those without.
    pub fn complete(&self) -> (Vec<&PatientData>, Vec<String>) {
        let mut ok = Vec::new();
        let mut excluded = Vec::new();
        for p in &self.patients {
            if p.is_complete() {
                ok.push(p);
            } else {
                excluded.push(p.id().into());
            }
        }
        (ok, excluded)
    }
}

/// Index lists into the complete-patient list.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FoldPlan {
    pub fold_id: usize,
    pub train: Vec<usize>,
    pub validation: Vec<usize>,
    pub test: Vec<usize>,
}

pub fn fold_of(seed: u64, patient_id: &str, folds: usize) -> usize {
    (string_key(derive(seed, FOLD_STREAM), patient_id) % folds as u64) as usize
}

pub fn plan_folds(ids: &[&str], folds: usize, validation_fraction: f64, seed: u64) -> Result<Vec<FoldPlan>> {
    if folds < 2 {
        return Err(Error::Config("folds must be at least 2".into()));
    }
    let assigned: Vec<usize> = ids.iter().map(|id| fold_of(seed, id, folds)).collect();
    let mut plans = Vec::with_capacity(folds);
    for f in 0..folds {
        let test: Vec<usize> = (0..ids.len()).filter(|&i| assigned[i] == f).collect();
        let vseed = derive(seed, VALIDATION_STREAM ^ ((f as u64) << 32));
        let mut rest: Vec<(u64, usize)> = (0..ids.len())
            .filter(|&i| assigned[i] != f)
            .map(|i| (string_key(vseed, ids[i]), i))
            .collect();
        rest.sort_unstable();
        let n_val = if rest.len() < 2 {
            0
        } else {
            (libm::round(validation_fraction * rest.len() as f64) as usize).clamp(1, rest.len() - 1)
        };
        let mut validation: Vec<usize> = rest[..n_val].iter().map(|&(_, i)| i).collect();
        let mut train: Vec<usize> = rest[n_val..].iter().map(|&(_, i)| i).collect();
        validation.sort_unstable();
        train.sort_unstable();
        plans.push(FoldPlan {
            fold_id: f,
            train,
            validation,
            test,
        });
    }
    Ok(plans)
}

/// Trained parameters plus everything needed to rebuild the model.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: RunConfig,
    pub fold_id: usize,
    pub membership: ModuleMembership,
    pub scaler: GeneScaler,
    pub params: ParamStore,
    /// Epoch (1-based) whose parameters are stored.
    pub epoch: usize,
    /// Epochs run before early stopping or the epoch limit.
    pub epochs_trained: usize,
    pub best_validation_loss: f64,
}

impl Checkpoint {
    fn init_seed(config: &RunConfig, fold_id: usize) -> u64 {
        derive(config.seed, MODEL_STREAM ^ fold_id as u64)
    }

    /// Rebuilds the network structure and checks that the stored parameters
    /// fit it.
    pub fn model(&self) -> Result<FusionNet> {
        let (net, fresh) = FusionNet::init(&self.config.model, &self.membership, Self::init_seed(&self.config, self.fold_id))?;
        if fresh.len() != self.params.len() {
            return Err(Error::Input(format!(
                "checkpoint has {} parameters, model expects {}",
                self.params.len(),
                fresh.len()
            )));
        }
        for ((_, n1, t1), (_, n2, t2)) in fresh.iter().zip(self.params.iter()) {
            if n1 != n2 || t1.shape() != t2.shape() {
                return Err(Error::Input(format!(
                    "checkpoint parameter {n2} {:?} does not match model parameter {n1} {:?}",
                    t2.shape(),
                    t1.shape()
                )));
            }
        }
        Ok(net)
    }

    pub fn prepare(&self, patient: &PatientData) -> Result<PatientInput> {
        let (Some(p), Some(e)) = (&patient.patches, &patient.expression) else {
            return Err(Error::Input(format!("patient {} is missing a modality", patient.id())));
        };
        PatientInput::prepare(
            p,
            e,
            &self.scaler,
            self.config.model.phenotypes,
            self.config.seed,
            self.config.train.kmeans_max_iter,
        )
    }

    pub fn predict(&self, patients: &[&PatientData]) -> Result<Vec<f64>> {
        let net = self.model()?;
        let inputs = patients.iter().map(|p| self.prepare(p)).collect::<Result<Vec<_>>>()?;
        net.predict(&self.params, &inputs)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub epochs_trained: usize,
    pub train_loss: Vec<f64>,
    pub validation_loss: Vec<f64>,
    pub warnings: Vec<String>,
}

fn prepare_all(
    patients: &[&PatientData],
    scaler: &GeneScaler,
    config: &RunConfig,
) -> Result<(Vec<PatientInput>, Vec<SurvivalRecord>)> {
    let mut inputs = Vec::with_capacity(patients.len());
    for p in patients {
        let (Some(patches), Some(expr)) = (&p.patches, &p.expression) else {
            return Err(Error::Input(format!("patient {} is missing a modality", p.id())));
        };
        inputs.push(PatientInput::prepare(
            patches,
            expr,
            scaler,
            config.model.phenotypes,
            config.seed,
            config.train.kmeans_max_iter,
        )?);
    }
    Ok((inputs, patients.iter().map(|p| p.record.clone()).collect()))
}

/// Trains one fold: one full-cohort partial-likelihood step per epoch,
/// early stopping on validation loss, best-validation parameters kept.
pub fn train_fold(config: &RunConfig, fold_id: usize, train: &[&PatientData], validation: &[&PatientData]) -> Result<TrainOutcome> {
    config.validate()?;
    if train.is_empty() {
        return Err(Error::Input(format!("fold {fold_id} has no training patients")));
    }
    if !train.iter().any(|p| p.record.event) {
        return Err(Error::AllCensored);
    }
    let mut warnings = Vec::new();
    let expr: Vec<&[f64]> = train
        .iter()
        .map(|p| p.expression.as_deref().ok_or_else(|| Error::Input(format!("patient {} has no expression", p.id()))))
        .collect::<Result<_>>()?;
    let clustering = cluster_genes(&expr, config.model.phenotypes, derive(config.seed, GENE_STREAM ^ fold_id as u64))?;
    warnings.extend(clustering.warnings);
    let scaler = GeneScaler::fit(&expr)?;

    let (train_inputs, train_records) = prepare_all(train, &scaler, config)?;
    let (val_inputs, val_records) = prepare_all(validation, &scaler, config)?;
    if val_inputs.is_empty() {
        warnings.push(format!("fold {fold_id}: no validation patients; early stopping uses the training loss"));
    } else if !val_records.iter().any(|r| r.event) {
        warnings.push(format!("fold {fold_id}: validation set has no events; its loss is constant"));
    }

    let (net, mut store) = FusionNet::init(&config.model, &clustering.membership, Checkpoint::init_seed(config, fold_id))?;
    let mut adam = AdamState::new(config.optim.clone(), &store);
    let mut best = (f64::INFINITY, 0usize, store.clone());
    let mut since_best = 0usize;
    let mut train_loss = Vec::new();
    let mut validation_loss = Vec::new();
    for epoch in 1..=config.train.max_epochs {
        let grads = {
            let mut g = Graph::new(&store);
            let (loss, _) = net.cohort_loss(&mut g, &train_inputs, &train_records)?;
            train_loss.push(g.value(loss).item()?);
            g.backward(loss)?
        };
        adam.step(&mut store, &grads)?;
        let v = if val_inputs.is_empty() {
            net.evaluate_loss(&store, &train_inputs, &train_records)?
        } else {
            net.evaluate_loss(&store, &val_inputs, &val_records)?
        };
        if !v.is_finite() {
            return Err(Error::Contract(format!("fold {fold_id}: non-finite validation loss at epoch {epoch}")));
        }
        validation_loss.push(v);
        if v < best.0 {
            best = (v, epoch, store.clone());
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= config.train.patience {
                break;
            }
        }
    }
    let (best_validation_loss, epoch, params) = best;
    Ok(TrainOutcome {
        checkpoint: Checkpoint {
            config: config.clone(),
            fold_id,
            membership: clustering.membership,
            scaler,
            params,
            epoch,
            epochs_trained: validation_loss.len(),
            best_validation_loss,
        },
        epochs_trained: validation_loss.len(),
        train_loss,
        validation_loss,
        warnings,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub patient_id: String,
    pub risk: f64,
    pub time: f64,
    pub event: bool,
    pub group: RiskGroup,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FoldReport {
    pub fold_id: usize,
    /// Absent when the test fold has no comparable pairs.
    pub c_index: Option<f64>,
    pub pair_count: usize,
    /// Absent when the test fold lands entirely in one risk group.
    pub logrank_p: Option<f64>,
    pub logrank_statistic: Option<f64>,
    pub epochs_trained: usize,
    pub best_epoch: usize,
    pub best_validation_loss: f64,
    pub predictions: Vec<Prediction>,
}

/// Scores the held-out patients of one fold.
pub fn evaluate_fold(checkpoint: &Checkpoint, test: &[&PatientData]) -> Result<FoldReport> {
    let risks = checkpoint.predict(test)?;
    let records: Vec<SurvivalRecord> = test.iter().map(|p| p.record.clone()).collect();
    let (concordance, groups, lr) = if records.len() >= 2 {
        let e = evaluate_cohort(&risks, &records, checkpoint.config.train.tie_rule)?;
        (e.concordance, e.groups, e.log_rank)
    } else {
        (None, alloc::vec![RiskGroup::Low; records.len()], None)
    };
    let predictions = records
        .iter()
        .zip(&risks)
        .zip(&groups)
        .map(|((r, &risk), &group)| Prediction {
            patient_id: r.patient_id.clone(),
            risk,
            time: r.time,
            event: r.event,
            group,
        })
        .collect();
    Ok(FoldReport {
        fold_id: checkpoint.fold_id,
        c_index: concordance.map(|c| c.index),
        pair_count: concordance.map_or(0, |c| c.comparable_pairs),
        logrank_p: lr.map(|l| l.p_value),
        logrank_statistic: lr.map(|l| l.statistic),
        epochs_trained: checkpoint.epochs_trained,
        best_epoch: checkpoint.epoch,
        best_validation_loss: checkpoint.best_validation_loss,
        predictions,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub mean: f64,
    /// Sample standard deviation across folds (0 for a single fold).
    pub std: f64,
    pub folds: usize,
    /// `mean±(std)` with three decimals.
    pub display: String,
}

pub fn aggregate(values: &[f64]) -> Option<Aggregate> {
    if values.is_empty() {
        return None;
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let std = if values.len() > 1 {
        libm::sqrt(values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0))
    } else {
        0.0
    };
    Some(Aggregate {
        mean,
        std,
        folds: values.len(),
        display: format_mean_std(mean, std),
    })
}

pub fn format_mean_std(mean: f64, std: f64) -> String {
    format!("{mean:.3}±({std:.3})")
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CvReport {
    pub folds: Vec<FoldReport>,
    pub aggregate: Option<Aggregate>,
    /// Log-rank test of the per-fold median groups pooled over all test folds.
    pub pooled_log_rank: Option<LogRank>,
    pub excluded: Vec<String>,
    pub warnings: Vec<String>,
}

pub fn pooled_log_rank(folds: &[FoldReport]) -> Result<Option<LogRank>> {
    let mut records = Vec::new();
    let mut groups = Vec::new();
    for p in folds.iter().flat_map(|f| &f.predictions) {
        records.push(SurvivalRecord::new(p.patient_id.clone(), p.time, p.event)?);
        groups.push(p.group);
    }
    let (low, high) = split_by_group(&records, &groups);
    if low.is_empty() || high.is_empty() {
        return Ok(None);
    }
    log_rank(&high, &low).map(Some)
}

/// Result of one fold job.
#[derive(Clone, Debug, PartialEq)]
pub struct FoldOutcome {
    pub report: FoldReport,
    pub training: TrainOutcome,
}

/// Trains and evaluates one planned fold. Independent of every other fold,
/// so folds may run concurrently.
pub fn run_fold(config: &RunConfig, patients: &[&PatientData], plan: &FoldPlan) -> Result<FoldOutcome> {
    let pick = |idx: &[usize]| idx.iter().map(|&i| patients[i]).collect::<Vec<_>>();
    let training = train_fold(config, plan.fold_id, &pick(&plan.train), &pick(&plan.validation))?;
    let report = evaluate_fold(&training.checkpoint, &pick(&plan.test))?;
    Ok(FoldOutcome { report, training })
}

/// Combines finished folds (in fold order) into the run report.
pub fn assemble_report(outcomes: &[FoldOutcome], excluded: Vec<String>) -> Result<CvReport> {
    let mut warnings: Vec<String> = excluded
        .iter()
        .map(|id| format!("patient {id} is missing a modality and was excluded"))
        .collect();
    for o in outcomes {
        warnings.extend(o.training.warnings.iter().cloned());
        if o.report.c_index.is_none() {
            warnings.push(format!("fold {}: no comparable test pairs; C-index undefined", o.report.fold_id));
        }
    }
    let folds: Vec<FoldReport> = outcomes.iter().map(|o| o.report.clone()).collect();
    let c: Vec<f64> = folds.iter().filter_map(|f| f.c_index).collect();
    Ok(CvReport {
        aggregate: aggregate(&c),
        pooled_log_rank: pooled_log_rank(&folds)?,
        folds,
        excluded,
        warnings,
    })
}

/// Sequential cross-validation over the complete patients of `dataset`.
pub fn run_cv(config: &RunConfig, dataset: &Dataset) -> Result<(CvReport, Vec<FoldOutcome>)> {
    config.validate()?;
    let (patients, excluded) = dataset.complete();
    let ids: Vec<&str> = patients.iter().map(|p| p.id()).collect();
    let plans = plan_folds(&ids, config.train.folds, config.train.validation_fraction, config.seed)?;
    let outcomes = plans
        .iter()
        .map(|plan| run_fold(config, &patients, plan))
        .collect::<Result<Vec<_>>>()?;
    Ok((assemble_report(&outcomes, excluded)?, outcomes))
}
