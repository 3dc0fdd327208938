//! Patient-level representations for both modalities.
//!
//! Image side: a patient's patch feature vectors are clustered into `C`
//! phenotypes, every patch passes through one shared affine map and ReLU
//! (a 1×1 convolution over the patch axis), and each phenotype is the mean
//! of its patches. Gene side: genes are grouped into `C` co-expression
//! modules by k-means on z-scored gene profiles, and each module's member
//! values go through that module's own two-layer MLP.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::graph::{Graph, ParamStore, Var};
use crate::kmeans::{groups_of, kmeans};
use crate::nn::Linear;
use crate::tensor::Tensor;

/// Pre-extracted deep features of one patient's patches.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchFeatureSet {
    pub patient_id: String,
    pub patches: Vec<Vec<f64>>,
}

impl PatchFeatureSet {
    pub fn new(patient_id: impl Into<String>, patches: Vec<Vec<f64>>) -> Result<Self> {
        let patient_id = patient_id.into();
        let Some(first) = patches.first() else {
            return Err(Error::Input(format!("patient {patient_id} has no patches")));
        };
        let d = first.len();
        if d == 0 || patches.iter().any(|p| p.len() != d) {
            return Err(Error::Input(format!(
                "patient {patient_id}: patches must share a positive dimension"
            )));
        }
        if patches.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::Input(format!("patient {patient_id}: non-finite patch feature")));
        }
        Ok(Self { patient_id, patches })
    }

    pub fn dim(&self) -> usize {
        self.patches[0].len()
    }

    pub fn len(&self) -> usize {
        self.patches.len()
    }

    pub fn is_empty(&self) -> bool {
        self.patches.is_empty()
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::from_rows(&self.patches).expect("validated on construction")
    }
}

/// Phenotype index for every patch, from seeded k-means.
pub fn assign_phenotypes(patches: &PatchFeatureSet, phenotypes: usize, seed: u64, max_iter: usize) -> Result<Vec<usize>> {
    Ok(kmeans(&patches.patches, phenotypes, seed, max_iter)?.assignment)
}

/// Weight-shared patch encoder: affine + ReLU per patch, mean per phenotype.
#[derive(Clone, Debug, PartialEq)]
pub struct PhenotypeEncoder {
    pub fcn: Linear,
}

impl PhenotypeEncoder {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, patch_dim: usize, embed_dim: usize) -> Self {
        Self {
            fcn: Linear::new(store, rng, "phenotype_fcn", patch_dim, embed_dim, true),
        }
    }

    /// `patches` is `m × d`; `groups[i]` lists the patch rows of phenotype `i`.
    /// Returns the `C × d_k` matrix `P`.
    pub fn encode(&self, g: &mut Graph, patches: Var, groups: &[Vec<usize>]) -> Result<Var> {
        if let Some(i) = groups.iter().position(Vec::is_empty) {
            return Err(Error::Input(format!("phenotype {i} has no patches")));
        }
        let h = self.fcn.forward(g, patches)?;
        let h = g.relu(h);
        let rows = groups
            .iter()
            .map(|idx| {
                let sel = g.gather_rows(h, idx)?;
                g.mean_rows(sel)
            })
            .collect::<Result<Vec<_>>>()?;
        g.concat_rows(&rows)
    }
}

/// Patient-level image representation.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureBag {
    /// `C × d_k`, one row per phenotype.
    pub phenotypes: Tensor,
    /// Patch count per phenotype.
    pub counts: Vec<usize>,
}

pub fn encode_phenotypes(
    store: &ParamStore,
    encoder: &PhenotypeEncoder,
    patches: &PatchFeatureSet,
    assignment: &[usize],
    phenotypes: usize,
) -> Result<FeatureBag> {
    if assignment.len() != patches.len() || assignment.iter().any(|&a| a >= phenotypes) {
        return Err(Error::Input("phenotype assignment does not cover the patches".into()));
    }
    let groups = groups_of(assignment, phenotypes);
    let mut g = Graph::new(store);
    let x = g.constant(patches.to_tensor());
    let p = encoder.encode(&mut g, x, &groups)?;
    Ok(FeatureBag {
        phenotypes: g.value(p).clone(),
        counts: groups.iter().map(Vec::len).collect(),
    })
}

/// Partition of gene indices into modules; members ascend within a module.
#[derive(Clone, Debug, PartialEq)]
pub struct ModuleMembership {
    pub modules: Vec<Vec<usize>>,
    pub genes: usize,
}

impl ModuleMembership {
    pub fn new(mut modules: Vec<Vec<usize>>, genes: usize) -> Result<Self> {
        let mut seen = alloc::vec![false; genes];
        for m in &mut modules {
            if m.is_empty() {
                return Err(Error::Input("gene module is empty".into()));
            }
            m.sort_unstable();
            for &gi in m.iter() {
                if gi >= genes {
                    return Err(Error::Input(format!("gene index {gi} out of range for {genes} genes")));
                }
                if seen[gi] {
                    return Err(Error::Input(format!("gene {gi} belongs to more than one module")));
                }
                seen[gi] = true;
            }
        }
        if let Some(missing) = seen.iter().position(|s| !s) {
            return Err(Error::Input(format!("gene {missing} belongs to no module")));
        }
        Ok(Self { modules, genes })
    }

    pub fn len(&self) -> usize {
        self.modules.len()
    }

    pub fn is_empty(&self) -> bool {
        self.modules.is_empty()
    }

    /// Module index for every gene.
    pub fn labels(&self) -> Vec<usize> {
        let mut out = alloc::vec![0; self.genes];
        for (j, m) in self.modules.iter().enumerate() {
            for &gi in m {
                out[gi] = j;
            }
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GeneClustering {
    pub membership: ModuleMembership,
    pub warnings: Vec<String>,
}

fn check_rectangular(rows: &[&[f64]]) -> Result<usize> {
    let Some(first) = rows.first() else {
        return Err(Error::Input("expression matrix has no patients".into()));
    };
    let genes = first.len();
    if genes == 0 || rows.iter().any(|r| r.len() != genes) {
        return Err(Error::Input("expression rows must share a positive gene count".into()));
    }
    if rows.iter().flat_map(|r| r.iter()).any(|v| !v.is_finite()) {
        return Err(Error::Input("expression matrix contains non-finite values".into()));
    }
    Ok(genes)
}

/// Groups genes (columns of `expression`, rows are patients) into `modules`
/// co-expression modules via k-means on z-scored gene profiles.
pub fn cluster_genes(expression: &[&[f64]], modules: usize, seed: u64) -> Result<GeneClustering> {
    let genes = check_rectangular(expression)?;
    let n = expression.len();
    if n < 2 {
        return Err(Error::Input("gene clustering needs at least two patients".into()));
    }
    if genes < modules {
        return Err(Error::Input(format!("{genes} genes cannot form {modules} modules")));
    }
    let mut warnings = Vec::new();
    let profiles: Vec<Vec<f64>> = (0..genes)
        .map(|j| {
            let col: Vec<f64> = expression.iter().map(|r| r[j]).collect();
            let mean = col.iter().sum::<f64>() / n as f64;
            let var = col.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1) as f64;
            let sd = libm::sqrt(var);
            if sd > 0.0 {
                col.iter().map(|v| (v - mean) / sd).collect()
            } else {
                warnings.push(format!("gene {j} has zero variance; clustered on its centred profile"));
                col.iter().map(|v| v - mean).collect()
            }
        })
        .collect();
    let result = kmeans(&profiles, modules, seed, 100)?;
    let membership = ModuleMembership::new(result.groups(), genes)?;
    Ok(GeneClustering { membership, warnings })
}

/// Per-gene standardisation fitted on training patients.
#[derive(Clone, Debug, PartialEq)]
pub struct GeneScaler {
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
}

impl GeneScaler {
    pub fn fit(expression: &[&[f64]]) -> Result<Self> {
        let genes = check_rectangular(expression)?;
        let n = expression.len() as f64;
        let mut mean = alloc::vec![0.0; genes];
        let mut scale = alloc::vec![0.0; genes];
        for (j, (m, s)) in mean.iter_mut().zip(&mut scale).enumerate() {
            *m = expression.iter().map(|r| r[j]).sum::<f64>() / n;
            let var = expression.iter().map(|r| (r[j] - *m) * (r[j] - *m)).sum::<f64>() / n;
            let sd = libm::sqrt(var);
            *s = if sd > 0.0 { sd } else { 1.0 };
        }
        Ok(Self { mean, scale })
    }

    pub fn identity(genes: usize) -> Self {
        Self {
            mean: alloc::vec![0.0; genes],
            scale: alloc::vec![1.0; genes],
        }
    }

    pub fn transform(&self, row: &[f64]) -> Result<Vec<f64>> {
        if row.len() != self.mean.len() {
            return Err(Error::dim("gene_scaler", &[self.mean.len()], &[row.len()]));
        }
        Ok(row
            .iter()
            .zip(self.mean.iter().zip(&self.scale))
            .map(|(v, (m, s))| (v - m) / s)
            .collect())
    }
}

/// One MLP per module: `m_j → hidden → ReLU → d_k`.
#[derive(Clone, Debug, PartialEq)]
pub struct GeneModuleEncoder {
    pub membership: ModuleMembership,
    pub mlps: Vec<(Linear, Linear)>,
}

impl GeneModuleEncoder {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        membership: &ModuleMembership,
        hidden: usize,
        embed_dim: usize,
    ) -> Self {
        let mlps = membership
            .modules
            .iter()
            .enumerate()
            .map(|(j, m)| {
                (
                    Linear::new(store, rng, &format!("gene_module{j}.fc1"), m.len(), hidden, true),
                    Linear::new(store, rng, &format!("gene_module{j}.fc2"), hidden, embed_dim, true),
                )
            })
            .collect();
        Self {
            membership: membership.clone(),
            mlps,
        }
    }

    /// Returns the `C × d_k` matrix `G` for one patient's expression row.
    pub fn encode(&self, g: &mut Graph, expression: &[f64]) -> Result<Var> {
        let mut rows = Vec::with_capacity(self.mlps.len());
        for (members, (fc1, fc2)) in self.membership.modules.iter().zip(&self.mlps) {
            let values = members
                .iter()
                .map(|&gi| {
                    expression.get(gi).copied().ok_or_else(|| {
                        Error::Input(format!(
                            "gene index {gi} out of range for a row of {} genes",
                            expression.len()
                        ))
                    })
                })
                .collect::<Result<Vec<f64>>>()?;
            let x = g.constant(Tensor::row(&values)?);
            let h = fc1.forward(g, x)?;
            let h = g.relu(h);
            rows.push(fc2.forward(g, h)?);
        }
        g.concat_rows(&rows)
    }
}

/// Patient-level gene representation.
#[derive(Clone, Debug, PartialEq)]
pub struct GeneModuleSet {
    /// `C × d_k`, one row per module.
    pub modules: Tensor,
    pub membership: ModuleMembership,
}

pub fn encode_gene_modules(store: &ParamStore, encoder: &GeneModuleEncoder, expression: &[f64]) -> Result<GeneModuleSet> {
    let mut g = Graph::new(store);
    let v = encoder.encode(&mut g, expression)?;
    Ok(GeneModuleSet {
        modules: g.value(v).clone(),
        membership: encoder.membership.clone(),
    })
}
