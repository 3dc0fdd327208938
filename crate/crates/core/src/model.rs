//! The assembled network: encoders, fusion transformer, attention pooling
//! and risk head.

use alloc::string::String;
use alloc::vec::Vec;

use crate::config::ModelConfig;
use crate::encoders::{assign_phenotypes, GeneModuleEncoder, GeneScaler, ModuleMembership, PatchFeatureSet, PhenotypeEncoder};
use crate::error::{Error, Result};
use crate::graph::{Graph, ParamStore, Var};
use crate::head::{mlp_head, HeadParams, RiskOutput, SurvivalRecord};
use crate::kmeans::groups_of;
use crate::mhap::{mhap_forward_detailed, MhapParams, PoolOutput};
use crate::nn::Linear;
use crate::rng::{derive, seeded, string_key};
use crate::tensor::Tensor;
use crate::tsmcat::{tsmcat_forward, FusionState, TsmcatParams};

const INIT_STREAM: u64 = 0x1417;

/// One patient's model input after phenotype clustering and gene scaling.
#[derive(Clone, Debug, PartialEq)]
pub struct PatientInput {
    pub patient_id: String,
    /// `m × d` patch features.
    pub patches: Tensor,
    /// Patch rows of each phenotype.
    pub phenotype_groups: Vec<Vec<usize>>,
    /// Standardised expression row.
    pub expression: Vec<f64>,
}

impl PatientInput {
    /// Clusters the patches into `phenotypes` groups (seeded by the patient
    /// id, so the result does not depend on cohort order) and standardises
    /// the expression row.
    pub fn prepare(
        patches: &PatchFeatureSet,
        expression: &[f64],
        scaler: &GeneScaler,
        phenotypes: usize,
        seed: u64,
        kmeans_max_iter: usize,
    ) -> Result<Self> {
        let key = string_key(seed, &patches.patient_id);
        let assignment = assign_phenotypes(patches, phenotypes, key, kmeans_max_iter)?;
        Ok(Self {
            patient_id: patches.patient_id.clone(),
            patches: patches.to_tensor(),
            phenotype_groups: groups_of(&assignment, phenotypes),
            expression: scaler.transform(expression)?,
        })
    }
}

/// Graph handles for one patient's forward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct PatientForward {
    /// `C × d_k` phenotype features.
    pub phenotypes: Var,
    /// `C × d_k` gene-module features.
    pub modules: Var,
    pub fusion: Vec<FusionState>,
    pub img_pool: Vec<PoolOutput>,
    pub gene_pool: Vec<PoolOutput>,
    pub risk: RiskOutput,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FusionNet {
    pub config: ModelConfig,
    pub phenotype_encoder: PhenotypeEncoder,
    pub gene_encoder: GeneModuleEncoder,
    /// `d_k → d_model` entry maps for the two streams.
    pub img_in: Linear,
    pub gene_in: Linear,
    pub fusion: TsmcatParams,
    pub img_pool: MhapParams,
    pub gene_pool: MhapParams,
    pub head: HeadParams,
}

impl FusionNet {
    /// Builds the network and its freshly initialised parameters. Parameter
    /// registration order is fixed, so the same `seed` always yields the
    /// same store.
    pub fn init(cfg: &ModelConfig, membership: &ModuleMembership, seed: u64) -> Result<(Self, ParamStore)> {
        cfg.validate()?;
        if membership.len() != cfg.phenotypes {
            return Err(Error::Config(alloc::format!(
                "gene membership has {} modules but the model expects {}",
                membership.len(),
                cfg.phenotypes
            )));
        }
        let mut store = ParamStore::new();
        let mut rng = seeded(derive(seed, INIT_STREAM));
        let rng = &mut rng;
        let s = &mut store;
        let phenotype_encoder = PhenotypeEncoder::new(s, rng, cfg.patch_dim, cfg.embed_dim);
        let gene_encoder = GeneModuleEncoder::new(s, rng, membership, cfg.gene_hidden, cfg.embed_dim);
        let img_in = Linear::new(s, rng, "img_in", cfg.embed_dim, cfg.model_dim, true);
        let gene_in = Linear::new(s, rng, "gene_in", cfg.embed_dim, cfg.model_dim, true);
        let fusion = TsmcatParams::new(s, rng, cfg.depth, cfg.model_dim, cfg.heads, cfg.mlp_ratio, cfg.layer_norm_eps)?;
        let fused = 2 * cfg.model_dim;
        let img_pool = MhapParams::new(s, rng, "img_pool", fused, cfg.pool_heads, cfg.pool_ratio, cfg.pool_renormalize)?;
        let gene_pool = MhapParams::new(s, rng, "gene_pool", fused, cfg.pool_heads, cfg.pool_ratio, cfg.pool_renormalize)?;
        let joint = img_pool.output_dim() + gene_pool.output_dim();
        let head = HeadParams::new(s, rng, joint, cfg.head_hidden, cfg.risk_sigmoid);
        Ok((
            Self {
                config: cfg.clone(),
                phenotype_encoder,
                gene_encoder,
                img_in,
                gene_in,
                fusion,
                img_pool,
                gene_pool,
                head,
            },
            store,
        ))
    }

    pub fn membership(&self) -> &ModuleMembership {
        &self.gene_encoder.membership
    }

    pub fn forward_detailed(&self, g: &mut Graph, input: &PatientInput) -> Result<PatientForward> {
        let x = g.constant(input.patches.clone());
        let phenotypes = self.phenotype_encoder.encode(g, x, &input.phenotype_groups)?;
        let modules = self.gene_encoder.encode(g, &input.expression)?;
        let p0 = self.img_in.forward(g, phenotypes)?;
        let g0 = self.gene_in.forward(g, modules)?;
        let fusion = tsmcat_forward(g, &self.fusion, p0, g0)?;
        let last = *fusion.last().expect("depth validated");
        let (y_p, img_pool) = mhap_forward_detailed(g, &self.img_pool, last.img)?;
        let (y_g, gene_pool) = mhap_forward_detailed(g, &self.gene_pool, last.gene)?;
        let risk = mlp_head(g, &self.head, y_p, y_g)?;
        Ok(PatientForward {
            phenotypes,
            modules,
            fusion,
            img_pool,
            gene_pool,
            risk,
        })
    }

    /// `1 × 1` risk score node.
    pub fn forward(&self, g: &mut Graph, input: &PatientInput) -> Result<Var> {
        Ok(self.forward_detailed(g, input)?.risk.risk)
    }

    /// Forwards every patient into one graph and attaches the full-cohort
    /// partial likelihood. Returns the loss and the `n × 1` risk column.
    pub fn cohort_loss(&self, g: &mut Graph, inputs: &[PatientInput], records: &[SurvivalRecord]) -> Result<(Var, Var)> {
        if inputs.is_empty() {
            return Err(Error::Input("cohort loss over no patients".into()));
        }
        if inputs.len() != records.len() {
            return Err(Error::dim("cohort_loss", &[inputs.len()], &[records.len()]));
        }
        for (i, r) in inputs.iter().zip(records) {
            if i.patient_id != r.patient_id {
                return Err(Error::Input(alloc::format!(
                    "inputs and records are misaligned: {} vs {}",
                    i.patient_id,
                    r.patient_id
                )));
            }
        }
        let risks = inputs
            .iter()
            .map(|p| self.forward(g, p))
            .collect::<Result<Vec<_>>>()?;
        let risks = g.concat_rows(&risks)?;
        let times: Vec<f64> = records.iter().map(|r| r.time).collect();
        let events: Vec<bool> = records.iter().map(|r| r.event).collect();
        let loss = g.cox_loss(risks, &times, &events)?;
        Ok((loss, risks))
    }

    /// Risk score of every patient, one graph per patient.
    pub fn predict(&self, store: &ParamStore, inputs: &[PatientInput]) -> Result<Vec<f64>> {
        inputs
            .iter()
            .map(|p| {
                let mut g = Graph::new(store);
                let r = self.forward(&mut g, p)?;
                g.value(r).item()
            })
            .collect()
    }

    /// Partial likelihood of `records` under the current parameters.
    pub fn evaluate_loss(&self, store: &ParamStore, inputs: &[PatientInput], records: &[SurvivalRecord]) -> Result<f64> {
        let risks = self.predict(store, inputs)?;
        let times: Vec<f64> = records.iter().map(|r| r.time).collect();
        let events: Vec<bool> = records.iter().map(|r| r.event).collect();
        crate::head::neg_log_partial_likelihood(&risks, &times, &events)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoders::cluster_genes;
    use crate::gradcheck::PipelineCase;
    use crate::synth::{synth_cohort, SynthConfig};

    fn tiny() -> (ModelConfig, Vec<PatientInput>, Vec<SurvivalRecord>, ModuleMembership) {
        let cfg = PipelineCase {
            phenotypes: 2,
            model_dim: 8,
            depth: 2,
            heads: 2,
            seed: 5,
        }
        .model_config();
        let s = synth_cohort(&SynthConfig {
            patients: 6,
            phenotypes: 2,
            patch_dim: cfg.patch_dim,
            genes: 6,
            patches_min: 3,
            patches_max: 6,
            seed: 5,
            ..SynthConfig::default()
        })
        .unwrap();
        let expr: Vec<&[f64]> = s.expression.iter().map(Vec::as_slice).collect();
        let membership = cluster_genes(&expr, 2, 5).unwrap().membership;
        let scaler = GeneScaler::fit(&expr).unwrap();
        let inputs = s
            .patches
            .iter()
            .zip(&s.expression)
            .map(|(p, e)| PatientInput::prepare(p, e, &scaler, 2, 5, 50).unwrap())
            .collect();
        (cfg, inputs, s.records, membership)
    }

    #[test]
    fn init_is_deterministic() {
        let (cfg, _, _, m) = tiny();
        let (_, a) = FusionNet::init(&cfg, &m, 3).unwrap();
        let (_, b) = FusionNet::init(&cfg, &m, 3).unwrap();
        let (_, c) = FusionNet::init(&cfg, &m, 4).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn membership_must_match_phenotypes() {
        let (mut cfg, _, _, m) = tiny();
        cfg.phenotypes = 3;
        assert!(FusionNet::init(&cfg, &m, 0).is_err());
    }

    #[test]
    fn cohort_loss_agrees_with_per_patient_prediction() {
        let (cfg, inputs, records, m) = tiny();
        let (net, store) = FusionNet::init(&cfg, &m, 1).unwrap();
        let mut g = Graph::new(&store);
        let (loss, risks) = net.cohort_loss(&mut g, &inputs, &records).unwrap();
        let predicted = net.predict(&store, &inputs).unwrap();
        assert_eq!(g.value(risks).data(), predicted.as_slice());
        assert_eq!(g.value(loss).item().unwrap(), net.evaluate_loss(&store, &inputs, &records).unwrap());
        assert!(predicted.iter().all(|&r| r > 0.0 && r < 1.0));
    }

    #[test]
    fn misaligned_records_are_rejected() {
        let (cfg, inputs, mut records, m) = tiny();
        let (net, store) = FusionNet::init(&cfg, &m, 1).unwrap();
        records.swap(0, 1);
        let mut g = Graph::new(&store);
        assert!(net.cohort_loss(&mut g, &inputs, &records).is_err());
        assert!(net.cohort_loss(&mut g, &inputs[..2], &records).is_err());
    }

    #[test]
    fn prepare_does_not_depend_on_cohort_order() {
        let s = synth_cohort(&SynthConfig {
            patients: 3,
            phenotypes: 2,
            patch_dim: 4,
            genes: 4,
            patches_min: 4,
            patches_max: 8,
            ..SynthConfig::default()
        })
        .unwrap();
        let scaler = GeneScaler::identity(4);
        let a = PatientInput::prepare(&s.patches[2], &s.expression[2], &scaler, 2, 9, 50).unwrap();
        let b = PatientInput::prepare(&s.patches[2], &s.expression[2], &scaler, 2, 9, 50).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.phenotype_groups.iter().map(Vec::len).sum::<usize>(), s.patches[2].len());
    }
}
