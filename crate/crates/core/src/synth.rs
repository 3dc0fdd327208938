//! Seeded synthetic cohorts with a planted risk signal in both modalities.
//!
//! Every patient has a binary group `g` and a continuous latent risk
//! `u = (2g − 1) + 0.5·ε`. Patch features are drawn around `C` shared
//! phenotype prototypes and shifted along one fixed unit direction by
//! `effect·u`; gene expression follows `C` co-expressed blocks, half of
//! which also carry `effect·u`. Event times are exponential with hazard
//! `λ₀·exp(effect·u)` and are censored by an independent exponential whose
//! rate is tuned to hit the requested censoring fraction in expectation.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::encoders::PatchFeatureSet;
use crate::error::{Error, Result};
use crate::head::SurvivalRecord;
use crate::rng::{derive, seeded};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub patients: usize,
    pub phenotypes: usize,
    pub patch_dim: usize,
    pub genes: usize,
    pub patches_min: usize,
    pub patches_max: usize,
    /// Strength of the latent risk in features and hazard; 0 gives a null cohort.
    pub effect_size: f64,
    /// Expected fraction of censored patients, in [0, 1).
    pub censoring_rate: f64,
    /// Baseline hazard per month.
    pub baseline_hazard: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            patients: 200,
            phenotypes: 8,
            patch_dim: 32,
            genes: 64,
            patches_min: 16,
            patches_max: 32,
            effect_size: 3.0,
            censoring_rate: 0.2,
            baseline_hazard: 1.0 / 30.0,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.patients == 0 || self.phenotypes == 0 || self.patch_dim == 0 {
            return Err(Error::Config("patients, phenotypes and patch_dim must be positive".into()));
        }
        if self.genes < self.phenotypes {
            return Err(Error::Config(format!(
                "need at least one gene per module: {} genes for {} modules",
                self.genes, self.phenotypes
            )));
        }
        if self.patches_min < self.phenotypes || self.patches_max < self.patches_min {
            return Err(Error::Config(format!(
                "patch counts must satisfy phenotypes <= patches_min <= patches_max, got {}..={} for {}",
                self.patches_min, self.patches_max, self.phenotypes
            )));
        }
        if !(0.0..1.0).contains(&self.censoring_rate) {
            return Err(Error::Config("censoring_rate must lie in [0, 1)".into()));
        }
        if !(self.baseline_hazard > 0.0) || !self.effect_size.is_finite() {
            return Err(Error::Config("baseline_hazard must be positive and effect_size finite".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthCohort {
    pub patches: Vec<PatchFeatureSet>,
    pub gene_names: Vec<String>,
    /// Patients × genes.
    pub expression: Vec<Vec<f64>>,
    pub records: Vec<SurvivalRecord>,
    /// Continuous latent risk `u`.
    pub latent: Vec<f64>,
    /// Binary group `g`.
    pub groups: Vec<bool>,
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    rng.sample(StandardNormal)
}

fn exponential(rng: &mut ChaCha8Rng, rate: f64) -> f64 {
    let u: f64 = rng.random();
    -libm::log1p(-u) / rate
}

/// Rate `λ_c` such that the mean of `λ_c / (λ_c + λ_i)` equals `target`.
fn censoring_hazard(hazards: &[f64], target: f64) -> f64 {
    if target <= 0.0 {
        return 0.0;
    }
    let frac = |c: f64| hazards.iter().map(|&h| c / (c + h)).sum::<f64>() / hazards.len() as f64;
    let (mut lo, mut hi) = (0.0, 1.0);
    while frac(hi) < target {
        hi *= 2.0;
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if frac(mid) < target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

pub fn synth_cohort(cfg: &SynthConfig) -> Result<SynthCohort> {
    cfg.validate()?;
    let c = cfg.phenotypes;
    let d = cfg.patch_dim;

    let mut world = seeded(derive(cfg.seed, 1));
    let prototypes: Vec<Vec<f64>> = (0..c).map(|_| (0..d).map(|_| 2.0 * normal(&mut world)).collect()).collect();
    let mut direction: Vec<f64> = (0..d).map(|_| normal(&mut world)).collect();
    let norm = libm::sqrt(direction.iter().map(|v| v * v).sum::<f64>());
    direction.iter_mut().for_each(|v| *v /= norm);
    let block_of: Vec<usize> = (0..cfg.genes).map(|j| j * c / cfg.genes).collect();
    let gene_loading: Vec<f64> = (0..cfg.genes).map(|_| 0.5 + world.random::<f64>()).collect();

    let mut rng = seeded(derive(cfg.seed, 2));
    let mut patches = Vec::with_capacity(cfg.patients);
    let mut expression = Vec::with_capacity(cfg.patients);
    let mut latent = Vec::with_capacity(cfg.patients);
    let mut groups = Vec::with_capacity(cfg.patients);
    let mut hazards = Vec::with_capacity(cfg.patients);
    let mut event_times = Vec::with_capacity(cfg.patients);
    for i in 0..cfg.patients {
        let g = rng.random_bool(0.5);
        let u = if g { 1.0 } else { -1.0 } + 0.5 * normal(&mut rng);
        let shift = cfg.effect_size * u;

        let m = rng.random_range(cfg.patches_min..=cfg.patches_max);
        let rows: Vec<Vec<f64>> = (0..m)
            .map(|p| {
                // Cover every phenotype before sampling the rest at random.
                let k = if p < c { p } else { rng.random_range(0..c) };
                (0..d)
                    .map(|j| prototypes[k][j] + shift * direction[j] + normal(&mut rng))
                    .collect()
            })
            .collect();
        patches.push(PatchFeatureSet::new(format!("P{i:04}"), rows)?);

        let factors: Vec<f64> = (0..c).map(|_| normal(&mut rng)).collect();
        let expr: Vec<f64> = (0..cfg.genes)
            .map(|j| {
                let b = block_of[j];
                let signal = if b.is_multiple_of(2) { shift } else { 0.0 };
                gene_loading[j] * (factors[b] + signal) + 0.5 * normal(&mut rng)
            })
            .collect();
        expression.push(expr);

        let hazard = cfg.baseline_hazard * libm::exp(shift);
        event_times.push(exponential(&mut rng, hazard));
        hazards.push(hazard);
        latent.push(u);
        groups.push(g);
    }

    let lc = censoring_hazard(&hazards, cfg.censoring_rate);
    let mut records = Vec::with_capacity(cfg.patients);
    for (i, &t) in event_times.iter().enumerate() {
        let cens = if lc > 0.0 { exponential(&mut rng, lc) } else { f64::INFINITY };
        let (time, event) = if t <= cens { (t, true) } else { (cens, false) };
        records.push(SurvivalRecord::new(format!("P{i:04}"), time, event)?);
    }

    Ok(SynthCohort {
        patches,
        gene_names: (0..cfg.genes).map(|j| format!("G{j:04}")).collect(),
        expression,
        records,
        latent,
        groups,
    })
}
