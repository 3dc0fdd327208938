//! Central finite differences, kept independent of the tape so they can
//! serve as an oracle for [`Graph::backward`](crate::graph::Graph::backward).

use alloc::vec::Vec;

use crate::config::ModelConfig;
use crate::encoders::{cluster_genes, GeneScaler};
use crate::error::Result;
use crate::graph::{Gradients, Graph, ParamStore};
use crate::model::{PatientInput, FusionNet};
use crate::synth::{synth_cohort, SynthConfig};

/// `(f(p + h e_i) - f(p - h e_i)) / 2h` for every coordinate `i`.
pub fn fd_gradient(mut f: impl FnMut(&[f64]) -> f64, params: &[f64], step: f64) -> Vec<f64> {
    let mut p = params.to_vec();
    let mut out = Vec::with_capacity(p.len());
    for i in 0..p.len() {
        let orig = p[i];
        p[i] = orig + step;
        let hi = f(&p);
        p[i] = orig - step;
        let lo = f(&p);
        p[i] = orig;
        out.push((hi - lo) / (2.0 * step));
    }
    out
}

/// Finite-difference gradients for every coordinate of every parameter.
pub fn fd_param_gradients(
    store: &ParamStore,
    mut f: impl FnMut(&ParamStore) -> f64,
    step: f64,
) -> Gradients {
    let mut work = store.clone();
    let mut out = Gradients::zeros_like(store);
    for id in store.ids() {
        let mut g = store.get(id).clone();
        for k in 0..g.len() {
            let orig = work.get(id).data()[k];
            work.get_mut(id).data_mut()[k] = orig + step;
            let hi = f(&work);
            work.get_mut(id).data_mut()[k] = orig - step;
            let lo = f(&work);
            work.get_mut(id).data_mut()[k] = orig;
            g.data_mut()[k] = (hi - lo) / (2.0 * step);
        }
        out.set(id, g);
    }
    out
}

/// `|a - b| / max(|a|, |b|)`, zero when both vanish.
pub fn relative_error(a: f64, b: f64) -> f64 {
    let scale = libm::fmax(libm::fabs(a), libm::fabs(b));
    if scale == 0.0 {
        0.0
    } else {
        libm::fabs(a - b) / scale
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct GradcheckStats {
    /// Coordinates whose gradient magnitude exceeds the significance floor.
    pub checked: usize,
    pub passed: usize,
    pub max_relative_error: f64,
    /// Coordinates below the floor on both sides.
    pub skipped: usize,
}

impl GradcheckStats {
    pub fn pass_fraction(&self) -> f64 {
        if self.checked == 0 {
            1.0
        } else {
            self.passed as f64 / self.checked as f64
        }
    }

    pub fn merge(&mut self, other: &Self) {
        self.checked += other.checked;
        self.passed += other.passed;
        self.skipped += other.skipped;
        self.max_relative_error = libm::fmax(self.max_relative_error, other.max_relative_error);
    }
}

/// Compares analytic and numeric gradients coordinate by coordinate.
pub fn compare(
    store: &ParamStore,
    analytic: &Gradients,
    numeric: &Gradients,
    tolerance: f64,
    floor: f64,
) -> GradcheckStats {
    let mut stats = GradcheckStats::default();
    for id in store.ids() {
        let n = store.get(id).len();
        for k in 0..n {
            let a = analytic.get(id).map_or(0.0, |t| t.data()[k]);
            let d = numeric.get(id).map_or(0.0, |t| t.data()[k]);
            if libm::fabs(a) <= floor && libm::fabs(d) <= floor {
                stats.skipped += 1;
                continue;
            }
            stats.checked += 1;
            let e = relative_error(a, d);
            stats.max_relative_error = libm::fmax(stats.max_relative_error, e);
            if e < tolerance {
                stats.passed += 1;
            }
        }
    }
    stats
}

/// One configuration of the full-pipeline gradient check.
#[derive(Clone, Debug, PartialEq)]
pub struct PipelineCase {
    pub phenotypes: usize,
    pub model_dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub seed: u64,
}

impl PipelineCase {
    /// The 20 seeded configurations swept by the acceptance gradient check.
    pub fn sweep() -> Vec<PipelineCase> {
        let cs = [2, 4, 8];
        let dims = [8, 16];
        let depths = [1, 2];
        let heads = [1, 2, 4];
        (0..20u64)
            .map(|i| {
                let k = i as usize;
                PipelineCase {
                    phenotypes: cs[k % 3],
                    model_dim: dims[(k / 3) % 2],
                    depth: depths[(k / 2) % 2],
                    heads: heads[(k / 5) % 3],
                    seed: 1000 + i,
                }
            })
            .collect()
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            phenotypes: self.phenotypes,
            patch_dim: 6,
            embed_dim: (self.model_dim / 2).max(1),
            model_dim: self.model_dim,
            heads: self.heads,
            depth: self.depth,
            mlp_ratio: 2,
            gene_hidden: 4,
            pool_heads: 2,
            pool_ratio: 0.5,
            pool_renormalize: false,
            head_hidden: [16, 8],
            risk_sigmoid: true,
            layer_norm_eps: 1e-5,
        }
    }
}

/// Builds a 4-patient synthetic cohort, runs encoders → fusion → pooling →
/// head → partial likelihood, and compares tape gradients of every parameter
/// against central differences.
pub fn pipeline_gradcheck(case: &PipelineCase, step: f64, tolerance: f64, floor: f64) -> Result<GradcheckStats> {
    let cfg = case.model_config();
    let synth = synth_cohort(&SynthConfig {
        patients: 4,
        phenotypes: cfg.phenotypes,
        patch_dim: cfg.patch_dim,
        genes: cfg.phenotypes * 3,
        patches_min: cfg.phenotypes + 2,
        patches_max: cfg.phenotypes + 6,
        effect_size: 1.0,
        censoring_rate: 0.25,
        seed: case.seed,
        ..SynthConfig::default()
    })?;
    let expression: Vec<&[f64]> = synth.expression.iter().map(Vec::as_slice).collect();
    let membership = cluster_genes(&expression, cfg.phenotypes, case.seed)?.membership;
    let scaler = GeneScaler::fit(&expression)?;
    let inputs = synth
        .patches
        .iter()
        .zip(&synth.expression)
        .map(|(p, e)| PatientInput::prepare(p, e, &scaler, cfg.phenotypes, case.seed, 50))
        .collect::<Result<Vec<_>>>()?;
    let mut records = synth.records.clone();
    // An event on the earliest time gives a risk set of the whole cohort, so
    // the loss depends on every patient.
    let earliest = (0..records.len())
        .min_by(|&a, &b| records[a].time.total_cmp(&records[b].time))
        .expect("non-empty cohort");
    records[earliest].event = true;

    let (net, store) = FusionNet::init(&cfg, &membership, case.seed)?;
    let mut g = Graph::new(&store);
    let (loss, _) = net.cohort_loss(&mut g, &inputs, &records)?;
    let analytic = g.backward(loss)?;
    drop(g);

    let numeric = fd_param_gradients(
        &store,
        |s| {
            let mut g = Graph::new(s);
            match net.cohort_loss(&mut g, &inputs, &records) {
                Ok((l, _)) => g.value(l).data()[0],
                Err(_) => f64::NAN,
            }
        },
        step,
    );
    Ok(compare(&store, &analytic, &numeric, tolerance, floor))
}
