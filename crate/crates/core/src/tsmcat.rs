//! Two-stream multimodal co-attention transformer.
//!
//! Each level runs four post-norm blocks: a self-attention block per
//! modality (intra-modal stream) and a co-attention block per modality whose
//! queries come from its own modality while keys and values come from the
//! other (inter-modal stream). The two streams of a modality are concatenated
//! along the feature axis, giving `C × 2·d_model`; a learned linear map brings
//! that back to `d_model` before the next level.

use alloc::format;
use alloc::vec::Vec;

use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::graph::{Graph, ParamStore, Var};
use crate::nn::{GeluMlp, LayerNorm, Linear};

/// `softmax(Q Kᵀ / sqrt(d)) V`, also returning the attention weights.
pub fn attention_with_weights(g: &mut Graph, q: Var, k: Var, v: Var) -> Result<(Var, Var)> {
    let (_, dq) = g.value(q).dims()?;
    let (nk, dk) = g.value(k).dims()?;
    let (nv, _) = g.value(v).dims()?;
    if dq != dk {
        return Err(Error::dim("attention(q, k)", g.value(q).shape(), g.value(k).shape()));
    }
    if nk != nv {
        return Err(Error::dim("attention(k, v)", g.value(k).shape(), g.value(v).shape()));
    }
    let scores = g.matmul_nt(q, k, 1.0 / libm::sqrt(dq as f64))?;
    let weights = g.softmax_rows(scores)?;
    let out = g.matmul(weights, v)?;
    Ok((out, weights))
}

pub fn scaled_dot_attention(g: &mut Graph, q: Var, k: Var, v: Var) -> Result<Var> {
    attention_with_weights(g, q, k, v).map(|(o, _)| o)
}

#[derive(Clone, Debug, PartialEq)]
pub struct AttentionParams {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
    pub heads: usize,
    pub model_dim: usize,
}

impl AttentionParams {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, model_dim: usize, heads: usize) -> Result<Self> {
        if heads == 0 || !model_dim.is_multiple_of(heads) {
            return Err(Error::Config(format!(
                "model dimension {model_dim} is not divisible by {heads} heads"
            )));
        }
        Ok(Self {
            query: Linear::new(store, rng, &format!("{name}.query"), model_dim, model_dim, false),
            key: Linear::new(store, rng, &format!("{name}.key"), model_dim, model_dim, false),
            value: Linear::new(store, rng, &format!("{name}.value"), model_dim, model_dim, false),
            output: Linear::new(store, rng, &format!("{name}.output"), model_dim, model_dim, true),
            heads,
            model_dim,
        })
    }

    pub fn head_dim(&self) -> usize {
        self.model_dim / self.heads
    }
}

/// Heads read disjoint column blocks of the projected Q, K, V.
pub fn multi_head_attention(g: &mut Graph, p: &AttentionParams, q_in: Var, kv_in: Var) -> Result<Var> {
    multi_head_attention_with_weights(g, p, q_in, kv_in).map(|(o, _)| o)
}

pub fn multi_head_attention_with_weights(
    g: &mut Graph,
    p: &AttentionParams,
    q_in: Var,
    kv_in: Var,
) -> Result<(Var, Vec<Var>)> {
    for x in [q_in, kv_in] {
        let (_, c) = g.value(x).dims()?;
        if c != p.model_dim {
            return Err(Error::dim("multi_head_attention", g.value(x).shape(), &[p.model_dim]));
        }
    }
    let q = p.query.forward(g, q_in)?;
    let k = p.key.forward(g, kv_in)?;
    let v = p.value.forward(g, kv_in)?;
    let d = p.head_dim();
    let mut outs = Vec::with_capacity(p.heads);
    let mut weights = Vec::with_capacity(p.heads);
    for h in 0..p.heads {
        let qh = g.slice_cols(q, h * d, d)?;
        let kh = g.slice_cols(k, h * d, d)?;
        let vh = g.slice_cols(v, h * d, d)?;
        let (o, w) = attention_with_weights(g, qh, kh, vh)?;
        outs.push(o);
        weights.push(w);
    }
    let cat = if outs.len() == 1 { outs[0] } else { g.concat_cols(&outs)? };
    Ok((p.output.forward(g, cat)?, weights))
}

#[derive(Clone, Debug, PartialEq)]
pub struct TransformerBlockParams {
    pub attention: AttentionParams,
    pub norm1: LayerNorm,
    pub mlp: GeluMlp,
    pub norm2: LayerNorm,
}

impl TransformerBlockParams {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        model_dim: usize,
        heads: usize,
        mlp_ratio: usize,
        eps: f64,
    ) -> Result<Self> {
        Ok(Self {
            attention: AttentionParams::new(store, rng, &format!("{name}.attn"), model_dim, heads)?,
            norm1: LayerNorm::new(store, &format!("{name}.norm1"), model_dim, eps),
            mlp: GeluMlp::new(store, rng, &format!("{name}.mlp"), [model_dim, model_dim * mlp_ratio, model_dim]),
            norm2: LayerNorm::new(store, &format!("{name}.norm2"), model_dim, eps),
        })
    }
}

/// Post-norm block: `x1 = LN(q + MHA(q, kv, kv))`, `out = LN(x1 + MLP(x1))`.
pub fn block_forward(g: &mut Graph, p: &TransformerBlockParams, q_in: Var, kv_in: Var) -> Result<Var> {
    let a = multi_head_attention(g, &p.attention, q_in, kv_in)?;
    let x = g.add(q_in, a)?;
    let x1 = p.norm1.forward(g, x)?;
    let m = p.mlp.forward(g, x1)?;
    let y = g.add(x1, m)?;
    p.norm2.forward(g, y)
}

pub fn transformer_block(g: &mut Graph, p: &TransformerBlockParams, x: Var) -> Result<Var> {
    block_forward(g, p, x, x)
}

/// Image queries attend over gene keys/values and vice versa.
pub fn co_attention_block(
    g: &mut Graph,
    img: &TransformerBlockParams,
    gene: &TransformerBlockParams,
    p: Var,
    gm: Var,
) -> Result<(Var, Var)> {
    if g.value(p).shape() != g.value(gm).shape() {
        return Err(Error::dim("co_attention_block", g.value(p).shape(), g.value(gm).shape()));
    }
    let p_ctr = block_forward(g, img, p, gm)?;
    let g_ctr = block_forward(g, gene, gm, p)?;
    Ok((p_ctr, g_ctr))
}

#[derive(Clone, Debug, PartialEq)]
pub struct LevelParams {
    pub img_self: TransformerBlockParams,
    pub img_cross: TransformerBlockParams,
    pub gene_self: TransformerBlockParams,
    pub gene_cross: TransformerBlockParams,
    /// `2·d_model → d_model` maps applied to the previous level's output;
    /// absent on the first level.
    pub reproject: Option<(Linear, Linear)>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TsmcatParams {
    pub levels: Vec<LevelParams>,
    pub model_dim: usize,
}

impl TsmcatParams {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        depth: usize,
        model_dim: usize,
        heads: usize,
        mlp_ratio: usize,
        eps: f64,
    ) -> Result<Self> {
        if depth < 1 {
            return Err(Error::Config("fusion depth must be at least 1".into()));
        }
        let mut levels = Vec::with_capacity(depth);
        for t in 0..depth {
            let block = |n: &str, store: &mut ParamStore, rng: &mut ChaCha8Rng| {
                TransformerBlockParams::new(store, rng, &format!("tsmcat{t}.{n}"), model_dim, heads, mlp_ratio, eps)
            };
            let img_self = block("img_self", store, rng)?;
            let img_cross = block("img_cross", store, rng)?;
            let gene_self = block("gene_self", store, rng)?;
            let gene_cross = block("gene_cross", store, rng)?;
            let reproject = (t > 0).then(|| {
                (
                    Linear::new(store, rng, &format!("tsmcat{t}.img_reproject"), 2 * model_dim, model_dim, true),
                    Linear::new(store, rng, &format!("tsmcat{t}.gene_reproject"), 2 * model_dim, model_dim, true),
                )
            });
            levels.push(LevelParams {
                img_self,
                img_cross,
                gene_self,
                gene_cross,
                reproject,
            });
        }
        Ok(Self { levels, model_dim })
    }
}

/// Outputs of one fusion level.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FusionState {
    pub depth: usize,
    pub img_intra: Var,
    pub img_cross: Var,
    /// `[img_intra | img_cross]`, `C × 2·d_model`.
    pub img: Var,
    pub gene_intra: Var,
    pub gene_cross: Var,
    pub gene: Var,
}

/// Runs every level on `C × d_model` inputs and returns one state per level;
/// the last state's `img` / `gene` are the fused representations.
pub fn tsmcat_forward(g: &mut Graph, params: &TsmcatParams, p0: Var, g0: Var) -> Result<Vec<FusionState>> {
    if params.levels.is_empty() {
        return Err(Error::Config("fusion depth must be at least 1".into()));
    }
    let mut states: Vec<FusionState> = Vec::with_capacity(params.levels.len());
    let (mut p, mut gm) = (p0, g0);
    for (t, level) in params.levels.iter().enumerate() {
        if let (Some((rp, rg)), Some(prev)) = (&level.reproject, states.last()) {
            p = rp.forward(g, prev.img)?;
            gm = rg.forward(g, prev.gene)?;
        }
        let img_intra = transformer_block(g, &level.img_self, p)?;
        let gene_intra = transformer_block(g, &level.gene_self, gm)?;
        let (img_cross, gene_cross) = co_attention_block(g, &level.img_cross, &level.gene_cross, p, gm)?;
        let img = g.concat_cols(&[img_intra, img_cross])?;
        let gene = g.concat_cols(&[gene_intra, gene_cross])?;
        states.push(FusionState {
            depth: t + 1,
            img_intra,
            img_cross,
            img,
            gene_intra,
            gene_cross,
            gene,
        });
    }
    Ok(states)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;
    use crate::tensor::Tensor;
    use rand::Rng;

    fn random(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Tensor {
        Tensor::matrix(r, c, (0..r * c).map(|_| rng.random_range(-1.5..1.5)).collect()).unwrap()
    }

    #[test]
    fn single_key_returns_its_value() {
        let store = ParamStore::new();
        let mut g = Graph::new(&store);
        let q = g.constant(Tensor::from_rows(&[[1.0, 2.0], [-3.0, 0.5], [0.0, 0.0]]).unwrap());
        let k = g.constant(Tensor::from_rows(&[[0.7, -0.2]]).unwrap());
        let v = g.constant(Tensor::from_rows(&[[4.0, 5.0, 6.0]]).unwrap());
        let o = scaled_dot_attention(&mut g, q, k, v).unwrap();
        for i in 0..3 {
            assert_eq!(g.value(o).row_slice(i), &[4.0, 5.0, 6.0]);
        }
    }

    #[test]
    fn orthogonal_queries_average_values() {
        let store = ParamStore::new();
        let mut g = Graph::new(&store);
        let q = g.constant(Tensor::from_rows(&[[1.0, 0.0]]).unwrap());
        let k = g.constant(Tensor::from_rows(&[[0.0, 1.0], [0.0, -2.0], [0.0, 3.0]]).unwrap());
        let v = g.constant(Tensor::from_rows(&[[1.0, 0.0], [2.0, 3.0], [6.0, -3.0]]).unwrap());
        let o = scaled_dot_attention(&mut g, q, k, v).unwrap();
        assert!((g.value(o).get(0, 0) - 3.0).abs() < 1e-15);
        assert!(g.value(o).get(0, 1).abs() < 1e-15);
    }

    #[test]
    fn hand_computed_attention() {
        // Q = [[1,0],[0,1]], K = [[1,1],[2,0],[0,2]], V = [[1],[2],[3]], d = 2.
        // Query 0 scores [1,2,0]/sqrt2, query 1 scores [1,0,2]/sqrt2.
        // Reference outputs from a 40-digit evaluation of the same expressions.
        let store = ParamStore::new();
        let mut g = Graph::new(&store);
        let q = g.constant(Tensor::from_rows(&[[1.0, 0.0], [0.0, 1.0]]).unwrap());
        let k = g.constant(Tensor::from_rows(&[[1.0, 1.0], [2.0, 0.0], [0.0, 2.0]]).unwrap());
        let v = g.constant(Tensor::from_rows(&[[1.0], [2.0], [3.0]]).unwrap());
        let o = scaled_dot_attention(&mut g, q, k, v).unwrap();
        let want = [1.856_033_835_302_117_994_6, 2.291_979_935_474_101_959_6];
        for (a, b) in g.value(o).data().iter().zip(want) {
            assert!((a - b).abs() < 1e-14, "{a} vs {b}");
        }
    }

    #[test]
    fn shape_errors() {
        let store = ParamStore::new();
        let mut g = Graph::new(&store);
        let q = g.constant(Tensor::zeros(2, 3));
        let k = g.constant(Tensor::zeros(4, 2));
        let v = g.constant(Tensor::zeros(4, 2));
        assert!(matches!(scaled_dot_attention(&mut g, q, k, v), Err(Error::Dimension { .. })));
        let k = g.constant(Tensor::zeros(4, 3));
        let v = g.constant(Tensor::zeros(5, 2));
        assert!(scaled_dot_attention(&mut g, q, k, v).is_err());
    }

    fn set_identity(store: &mut ParamStore, l: &Linear) {
        *store.get_mut(l.weight) = Tensor::identity(l.in_dim);
        if let Some(b) = l.bias {
            store.get_mut(b).data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
    }

    #[test]
    fn single_head_identity_projection_is_plain_attention() {
        let mut store = ParamStore::new();
        let mut rng = seeded(4);
        let p = AttentionParams::new(&mut store, &mut rng, "a", 4, 1).unwrap();
        for l in [&p.query, &p.key, &p.value, &p.output] {
            set_identity(&mut store, l);
        }
        let x = random(&mut rng, 3, 4);
        let y = random(&mut rng, 5, 4);
        let mut g = Graph::new(&store);
        let xv = g.constant(x);
        let yv = g.constant(y);
        let mha = multi_head_attention(&mut g, &p, xv, yv).unwrap();
        let sda = scaled_dot_attention(&mut g, xv, yv, yv).unwrap();
        assert!(g.value(mha).max_abs_diff(g.value(sda)) < 1e-15);
    }

    #[test]
    fn two_heads_match_per_head_oracle() {
        let mut store = ParamStore::new();
        let mut rng = seeded(8);
        let p = AttentionParams::new(&mut store, &mut rng, "a", 4, 2).unwrap();
        let x = random(&mut rng, 4, 4);
        let mut g = Graph::new(&store);
        let xv = g.constant(x.clone());
        let out = multi_head_attention(&mut g, &p, xv, xv).unwrap();

        // Plain-tensor per-head loop.
        let q = x.matmul(store.get(p.query.weight)).unwrap();
        let k = x.matmul(store.get(p.key.weight)).unwrap();
        let v = x.matmul(store.get(p.value.weight)).unwrap();
        let mut cat = Tensor::zeros(4, 4);
        for h in 0..2 {
            for i in 0..4 {
                let scores: Vec<f64> = (0..4)
                    .map(|j| (0..2).map(|c| q.get(i, h * 2 + c) * k.get(j, h * 2 + c)).sum::<f64>() / 2f64.sqrt())
                    .collect();
                let max = scores.iter().cloned().fold(f64::MIN, f64::max);
                let e: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
                let z: f64 = e.iter().sum();
                for c in 0..2 {
                    let val: f64 = (0..4).map(|j| e[j] / z * v.get(j, h * 2 + c)).sum();
                    cat.set(i, h * 2 + c, val);
                }
            }
        }
        let mut want = cat.matmul(store.get(p.output.weight)).unwrap();
        let b = store.get(p.output.bias.unwrap()).data().to_vec();
        for i in 0..4 {
            for j in 0..4 {
                let v = want.get(i, j) + b[j];
                want.set(i, j, v);
            }
        }
        assert!(g.value(out).max_abs_diff(&want) < 1e-12);
    }

    #[test]
    fn key_permutation_leaves_outputs_unchanged() {
        let mut store = ParamStore::new();
        let mut rng = seeded(9);
        let p = AttentionParams::new(&mut store, &mut rng, "a", 8, 4).unwrap();
        let q = random(&mut rng, 3, 8);
        let kv = random(&mut rng, 5, 8);
        let perm = [3, 0, 4, 1, 2];
        let kv_perm = Tensor::from_rows(&perm.iter().map(|&i| kv.row_slice(i).to_vec()).collect::<Vec<_>>()).unwrap();
        let mut g = Graph::new(&store);
        let qv = g.constant(q);
        let a = g.constant(kv);
        let b = g.constant(kv_perm);
        let oa = multi_head_attention(&mut g, &p, qv, a).unwrap();
        let ob = multi_head_attention(&mut g, &p, qv, b).unwrap();
        assert!(g.value(oa).max_abs_diff(g.value(ob)) < 1e-12);
    }

    #[test]
    fn zeroed_block_passes_normalised_input() {
        let mut store = ParamStore::new();
        let mut rng = seeded(10);
        let eps = 1e-12;
        let p = TransformerBlockParams::new(&mut store, &mut rng, "b", 6, 2, 2, eps).unwrap();
        let zero: Vec<_> = [
            p.attention.output.weight,
            p.attention.output.bias.unwrap(),
            p.mlp.fc2.weight,
            p.mlp.fc2.bias.unwrap(),
        ]
        .into_iter()
        .collect();
        for id in zero {
            store.get_mut(id).data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        let x = random(&mut rng, 5, 6);
        let mut g = Graph::new(&store);
        let xv = g.constant(x.clone());
        let out = transformer_block(&mut g, &p, xv).unwrap();
        assert_eq!(g.value(out).shape(), &[5, 6]);
        for i in 0..5 {
            let row = x.row_slice(i);
            let mean = row.iter().sum::<f64>() / 6.0;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 6.0;
            for j in 0..6 {
                let want = (row[j] - mean) / (var + eps).sqrt();
                assert!((g.value(out).get(i, j) - want).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn co_attention_rejects_mismatched_modalities() {
        let mut store = ParamStore::new();
        let mut rng = seeded(12);
        let a = TransformerBlockParams::new(&mut store, &mut rng, "a", 4, 2, 2, 1e-5).unwrap();
        let b = TransformerBlockParams::new(&mut store, &mut rng, "b", 4, 2, 2, 1e-5).unwrap();
        let mut g = Graph::new(&store);
        let p = g.constant(Tensor::zeros(3, 4));
        let q = g.constant(Tensor::zeros(2, 4));
        assert!(co_attention_block(&mut g, &a, &b, p, q).is_err());
    }

    #[test]
    fn co_attention_unrolled_oracle() {
        // Two phenotypes, model width 2, one head; every matrix written out.
        let mut store = ParamStore::new();
        let mut rng = seeded(13);
        let img = TransformerBlockParams::new(&mut store, &mut rng, "img", 2, 1, 1, 1e-5).unwrap();
        let gene = TransformerBlockParams::new(&mut store, &mut rng, "gene", 2, 1, 1, 1e-5).unwrap();
        let p = Tensor::from_rows(&[[0.5, -1.0], [1.5, 0.25]]).unwrap();
        let gm = Tensor::from_rows(&[[-0.75, 2.0], [0.1, 0.3]]).unwrap();
        let mut g = Graph::new(&store);
        let pv = g.constant(p.clone());
        let gv = g.constant(gm.clone());
        let (pc, gc) = co_attention_block(&mut g, &img, &gene, pv, gv).unwrap();

        let s = &store;
        let lin = |x: &Tensor, l: &Linear| -> Tensor {
            let mut y = x.matmul(s.get(l.weight)).unwrap();
            if let Some(b) = l.bias {
                for i in 0..y.rows() {
                    for j in 0..y.cols() {
                        let v = y.get(i, j) + s.get(b).data()[j];
                        y.set(i, j, v);
                    }
                }
            }
            y
        };
        let ln = |x: &Tensor, n: &LayerNorm| -> Tensor {
            let mut y = x.clone();
            for i in 0..x.rows() {
                let r = x.row_slice(i);
                let m = r.iter().sum::<f64>() / r.len() as f64;
                let v = r.iter().map(|a| (a - m) * (a - m)).sum::<f64>() / r.len() as f64;
                for j in 0..r.len() {
                    y.set(i, j, (r[j] - m) / (v + n.eps).sqrt() * s.get(n.gamma).data()[j] + s.get(n.beta).data()[j]);
                }
            }
            y
        };
        let gelu = |x: f64| 0.5 * x * (1.0 + libm::erf(x / 2f64.sqrt()));
        let block = |q_in: &Tensor, kv_in: &Tensor, b: &TransformerBlockParams| -> Tensor {
            let q = lin(q_in, &b.attention.query);
            let k = lin(kv_in, &b.attention.key);
            let v = lin(kv_in, &b.attention.value);
            let att = q.matmul(&k.transpose().unwrap()).unwrap().map(|x| x / 2f64.sqrt()).softmax_rows().unwrap();
            let a = lin(&att.matmul(&v).unwrap(), &b.attention.output);
            let x1 = ln(&q_in.zip_map(&a, "t", |x, y| x + y).unwrap(), &b.norm1);
            let h = lin(&x1, &b.mlp.fc1).map(gelu);
            let m = lin(&h, &b.mlp.fc2);
            ln(&x1.zip_map(&m, "t", |x, y| x + y).unwrap(), &b.norm2)
        };
        assert!(g.value(pc).max_abs_diff(&block(&p, &gm, &img)) < 1e-12);
        assert!(g.value(gc).max_abs_diff(&block(&gm, &p, &gene)) < 1e-12);
    }

    #[test]
    fn depth_one_shapes_and_depth_zero_error() {
        let mut store = ParamStore::new();
        let mut rng = seeded(14);
        assert!(TsmcatParams::new(&mut store, &mut rng, 0, 8, 2, 2, 1e-5).is_err());
        let params = TsmcatParams::new(&mut store, &mut rng, 1, 8, 2, 2, 1e-5).unwrap();
        let mut g = Graph::new(&store);
        let p = g.constant(random(&mut rng, 5, 8));
        let q = g.constant(random(&mut rng, 5, 8));
        let states = tsmcat_forward(&mut g, &params, p, q).unwrap();
        assert_eq!(states.len(), 1);
        assert_eq!(g.value(states[0].img).shape(), &[5, 16]);
        assert_eq!(g.value(states[0].gene).shape(), &[5, 16]);
        assert_eq!(g.value(states[0].img_intra).shape(), g.value(states[0].img_cross).shape());
    }
}
