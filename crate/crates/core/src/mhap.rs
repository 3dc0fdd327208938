//! Multi-head attention pooling with top-rank token masking.
//!
//! A pooling head projects the `N × d_in` input to queries (through a
//! reducing GELU MLP), keys and values, computes the attention matrix, keeps
//! the `⌈k·N⌉` tokens that receive the most attention (column mass, ties to
//! the lower index), zeroes the attention columns of every other token,
//! multiplies by the values and averages the output rows of the kept tokens.
//! Head outputs are concatenated.

use alloc::format;
use alloc::vec::Vec;

use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::graph::{Graph, ParamStore, Var};
use crate::nn::{GeluMlp, Linear};
use crate::tensor::Tensor;
use crate::tsmcat::attention_with_weights;

#[derive(Clone, Debug, PartialEq)]
pub struct PoolHeadParams {
    pub query: Linear,
    pub query_mlp: GeluMlp,
    pub key: Linear,
    pub value: Linear,
}

impl PoolHeadParams {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, in_dim: usize) -> Self {
        let dq = (in_dim / 2).max(1);
        Self {
            query: Linear::new(store, rng, &format!("{name}.query"), in_dim, in_dim, false),
            query_mlp: GeluMlp::new(store, rng, &format!("{name}.query_mlp"), [in_dim, dq, dq]),
            key: Linear::new(store, rng, &format!("{name}.key"), in_dim, dq, false),
            value: Linear::new(store, rng, &format!("{name}.value"), in_dim, in_dim, false),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MhapParams {
    pub heads: Vec<PoolHeadParams>,
    pub ratio: f64,
    pub renormalize: bool,
    pub in_dim: usize,
}

impl MhapParams {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        in_dim: usize,
        heads: usize,
        ratio: f64,
        renormalize: bool,
    ) -> Result<Self> {
        check_ratio(ratio)?;
        if heads == 0 {
            return Err(Error::Config("pooling needs at least one head".into()));
        }
        let heads = (0..heads)
            .map(|h| PoolHeadParams::new(store, rng, &format!("{name}.head{h}"), in_dim))
            .collect();
        Ok(Self {
            heads,
            ratio,
            renormalize,
            in_dim,
        })
    }

    pub fn output_dim(&self) -> usize {
        self.heads.len() * self.in_dim
    }
}

fn check_ratio(ratio: f64) -> Result<()> {
    if ratio > 0.0 && ratio <= 1.0 {
        Ok(())
    } else {
        Err(Error::Config(format!("pooling ratio must lie in (0, 1], got {ratio}")))
    }
}

/// `⌈ratio·n⌉`, clamped to `[1, n]`. Products within 1e-9 of an integer are
/// rounded first so that e.g. `0.1·30` keeps 3 tokens, not 4.
pub fn retained_count(ratio: f64, n: usize) -> usize {
    let x = ratio * n as f64;
    let r = libm::round(x);
    let k = if libm::fabs(x - r) <= 1e-9 * libm::fmax(1.0, x) {
        r
    } else {
        libm::ceil(x)
    };
    (k as usize).clamp(1, n.max(1))
}

/// Indices (ascending) of the `⌈ratio·N⌉` tokens with the largest attention
/// column mass in an `M × N` attention matrix. Ties go to the lower index.
pub fn top_rank(att: &Tensor, ratio: f64) -> Result<Vec<usize>> {
    check_ratio(ratio)?;
    let mass = att.col_sums()?;
    let keep = retained_count(ratio, mass.len());
    let mut order: Vec<usize> = (0..mass.len()).collect();
    order.sort_by(|&a, &b| mass[b].total_cmp(&mass[a]).then(a.cmp(&b)));
    let mut kept: Vec<usize> = order[..keep].to_vec();
    kept.sort_unstable();
    Ok(kept)
}

/// Zeroes the attention columns of dropped tokens, applies the masked matrix
/// to `v` and averages the output rows of the retained tokens.
pub fn masked_pool(g: &mut Graph, att: Var, v: Var, retained: &[usize], renormalize: bool) -> Result<Var> {
    let (_, n) = g.value(att).dims()?;
    let mut keep = alloc::vec![false; n];
    for &r in retained {
        if r >= n {
            return Err(Error::Input(format!("retained token {r} out of range for {n} tokens")));
        }
        keep[r] = true;
    }
    let masked = g.mask_cols(att, &keep)?;
    let masked = if renormalize { g.normalize_rows(masked)? } else { masked };
    let y = g.matmul(masked, v)?;
    let rows = g.gather_rows(y, retained)?;
    g.mean_rows(rows)
}

#[derive(Clone, Debug, PartialEq)]
pub struct PoolOutput {
    /// `1 × d_in` pooled vector.
    pub output: Var,
    pub attention: Var,
    pub value: Var,
    pub retained: Vec<usize>,
}

pub fn self_attention_pool(
    g: &mut Graph,
    head: &PoolHeadParams,
    z: Var,
    ratio: f64,
    renormalize: bool,
) -> Result<PoolOutput> {
    let (n, d) = g.value(z).dims()?;
    if n == 0 {
        return Err(Error::Input("attention pooling over zero tokens".into()));
    }
    if d != head.query.in_dim {
        return Err(Error::dim("self_attention_pool", g.value(z).shape(), &[head.query.in_dim]));
    }
    let q = head.query.forward(g, z)?;
    let q = head.query_mlp.forward(g, q)?;
    let k = head.key.forward(g, z)?;
    let value = head.value.forward(g, z)?;
    let (_, attention) = attention_with_weights(g, q, k, value)?;
    let retained = top_rank(g.value(attention), ratio)?;
    let output = masked_pool(g, attention, value, &retained, renormalize)?;
    Ok(PoolOutput {
        output,
        attention,
        value,
        retained,
    })
}

/// Pools `Z` with every head and concatenates the results into a
/// `1 × heads·d_in` vector.
pub fn mhap_forward(g: &mut Graph, params: &MhapParams, z: Var) -> Result<Var> {
    mhap_forward_detailed(g, params, z).map(|(v, _)| v)
}

pub fn mhap_forward_detailed(g: &mut Graph, params: &MhapParams, z: Var) -> Result<(Var, Vec<PoolOutput>)> {
    let heads = params
        .heads
        .iter()
        .map(|h| self_attention_pool(g, h, z, params.ratio, params.renormalize))
        .collect::<Result<Vec<_>>>()?;
    let outs: Vec<Var> = heads.iter().map(|h| h.output).collect();
    let cat = if outs.len() == 1 { outs[0] } else { g.concat_cols(&outs)? };
    Ok((cat, heads))
}
