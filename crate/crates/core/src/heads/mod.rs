//! Projection heads: the global MLP, the vanilla region MLP and the
//! context-conditioned cross-attention head, plus ROIAlign pooling.

mod roialign;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{encode_position, AttentionSpec, CrossAttention, Linear, Mlp, StatUpdate};
use crate::params::ParamStore;
use crate::tensor::Tensor;

pub use roialign::{region_roi, roi_align, st_roialign, Roi, RoiSampling};

/// Guard for normalizing all-zero vectors; they stay zero.
pub const NORM_EPS: f64 = 1e-12;

pub const GLOBAL_HEAD: &str = "head.global";
pub const VANILLA_HEAD: &str = "head.vanilla";
pub const CONTEXT_HEAD: &str = "head.context";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HeadsConfig {
    pub global_hidden: usize,
    pub global_out: usize,
    pub vanilla_hidden: usize,
    pub attention: AttentionSpec,
    pub roi: RoiSampling,
    /// Batch-normalize the hidden layers of the MLP heads.
    pub hidden_norm: bool,
}

impl Default for HeadsConfig {
    fn default() -> Self {
        HeadsConfig {
            global_hidden: 256,
            global_out: 128,
            vanilla_hidden: 128,
            // 126 rather than 128: divisible by 3 heads and by the 6 sin/cos
            // blocks of the positional encoding
            attention: AttentionSpec {
                layers: 3,
                heads: 3,
                hidden_dim: 126,
                ffn_dim: 252,
            },
            roi: RoiSampling::Exact,
            hidden_norm: true,
        }
    }
}

impl HeadsConfig {
    pub fn validate(&self) -> Result<()> {
        if self.global_hidden == 0 || self.global_out == 0 || self.vanilla_hidden == 0 {
            return Err(Error::Config("heads: widths must be positive".into()));
        }
        self.attention.validate().map_err(|e| Error::Config(format!("heads.attention: {e}")))?;
        if let RoiSampling::Grid { bins, samples } = self.roi {
            if bins == 0 || samples == 0 {
                return Err(Error::Config("heads.roi: bins and samples must be positive".into()));
            }
        }
        Ok(())
    }
}

fn head_mlp(store: &mut ParamStore, name: &str, widths: &[usize], config: &HeadsConfig) -> Result<Mlp> {
    if config.hidden_norm {
        Mlp::with_hidden_norm(store, name, widths)
    } else {
        Mlp::new(store, name, widths)
    }
}

/// linear-ReLU-linear-ReLU-linear on pooled `C5_g` features.
#[derive(Debug, Clone)]
pub struct GlobalHead {
    pub mlp: Mlp,
}

impl GlobalHead {
    pub fn new(store: &mut ParamStore, in_dim: usize, config: &HeadsConfig) -> Result<Self> {
        let widths = [in_dim, config.global_hidden, config.global_hidden, config.global_out];
        Ok(GlobalHead {
            mlp: head_mlp(store, GLOBAL_HEAD, &widths, config)?,
        })
    }

    /// `[N, C] -> [N, out]` before normalization.
    pub fn project(&self, store: &ParamStore, pooled: &Tensor) -> Result<Tensor> {
        self.mlp.forward(store, pooled)
    }

    pub fn forward(&self, store: &ParamStore, pooled: &Tensor) -> Result<Tensor> {
        self.project(store, pooled)?.l2_normalize(1, NORM_EPS)
    }

    pub fn forward_mode(&self, store: &ParamStore, pooled: &Tensor, train: bool, stats: &mut Vec<StatUpdate>) -> Result<Tensor> {
        self.mlp.forward_mode(store, pooled, train, stats)?.l2_normalize(1, NORM_EPS)
    }
}

/// `z = MLP(h)`, used when no context is provided.
#[derive(Debug, Clone)]
pub struct VanillaRegionHead {
    pub mlp: Mlp,
}

impl VanillaRegionHead {
    pub fn new(store: &mut ParamStore, channels: usize, config: &HeadsConfig) -> Result<Self> {
        Ok(VanillaRegionHead {
            mlp: head_mlp(store, VANILLA_HEAD, &[channels, config.vanilla_hidden, channels], config)?,
        })
    }

    pub fn project(&self, store: &ParamStore, h: &Tensor) -> Result<Tensor> {
        self.mlp.forward(store, h)
    }

    pub fn forward(&self, store: &ParamStore, h: &Tensor) -> Result<Tensor> {
        self.project(store, h)?.l2_normalize(1, NORM_EPS)
    }

    pub fn forward_mode(&self, store: &ParamStore, h: &Tensor, train: bool, stats: &mut Vec<StatUpdate>) -> Result<Tensor> {
        self.mlp.forward_mode(store, h, train, stats)?.l2_normalize(1, NORM_EPS)
    }
}

/// Context tokens `[M, C]` with their `(t, y, x)` feature-map positions.
/// An empty set (no tokens) selects the vanilla head.
#[derive(Debug, Clone)]
pub struct ContextSet {
    tokens: Option<Tensor>,
    positions: Vec<[f64; 3]>,
}

impl ContextSet {
    pub fn new(tokens: Tensor, positions: Vec<[f64; 3]>) -> Result<Self> {
        if tokens.rank() != 2 || tokens.shape()[0] != positions.len() {
            return Err(Error::invalid(format!(
                "context: {} positions for tokens of shape {:?}",
                positions.len(),
                tokens.shape()
            )));
        }
        Ok(ContextSet {
            tokens: Some(tokens),
            positions,
        })
    }

    pub fn empty() -> Self {
        ContextSet {
            tokens: None,
            positions: Vec::new(),
        }
    }

    pub fn tokens(&self) -> Option<&Tensor> {
        self.tokens.as_ref()
    }

    pub fn positions(&self) -> &[[f64; 3]] {
        &self.positions
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    /// Token order sorted by position, then by value, so that any
    /// permutation of the set yields the same computation.
    fn canonical_order(&self, tokens: &Tensor) -> Vec<usize> {
        let c = tokens.shape()[1];
        let data = tokens.data();
        let mut order: Vec<usize> = (0..self.len()).collect();
        order.sort_by(|&a, &b| {
            let (pa, pb) = (self.positions[a], self.positions[b]);
            pa.iter()
                .zip(&pb)
                .map(|(x, y)| x.total_cmp(y))
                .chain(data[a * c..(a + 1) * c].iter().zip(&data[b * c..(b + 1) * c]).map(|(x, y)| x.total_cmp(y)))
                .find(|o| o.is_ne())
                .unwrap_or(std::cmp::Ordering::Equal)
        });
        order
    }
}

fn positional_table(positions: &[[f64; 3]], dim: usize, dtype: crate::DType) -> Result<Tensor> {
    let data: Vec<f64> = positions.iter().flat_map(|p| encode_position(p[0], p[1], p[2], dim)).collect();
    Tensor::from_vec(data, &[positions.len(), dim], dtype)
}

/// `z = normalize(W_out CrossAttn(W_q h + PE(p_h), W_c F'_c + PE(p_c)))`
#[derive(Debug, Clone)]
pub struct ContextHead {
    pub query_proj: Linear,
    pub context_proj: Linear,
    pub attention: CrossAttention,
    pub out_proj: Linear,
}

impl ContextHead {
    pub fn new(store: &mut ParamStore, channels: usize, config: &HeadsConfig) -> Result<Self> {
        let d = config.attention.hidden_dim;
        Ok(ContextHead {
            query_proj: Linear::new(store, &format!("{CONTEXT_HEAD}.query_proj"), channels, d)?,
            context_proj: Linear::new(store, &format!("{CONTEXT_HEAD}.context_proj"), channels, d)?,
            attention: CrossAttention::new(store, &format!("{CONTEXT_HEAD}.attention"), config.attention)?,
            out_proj: Linear::new(store, &format!("{CONTEXT_HEAD}.out_proj"), d, channels)?,
        })
    }

    /// `h` is `[n, C]` with one `(t, y, x)` query position per row.
    pub fn project(&self, store: &ParamStore, h: &Tensor, query_pos: &[[f64; 3]], ctx: &ContextSet) -> Result<Tensor> {
        let Some(all_tokens) = ctx.tokens() else {
            return Err(Error::invalid("context head needs at least one context token; use the vanilla head"));
        };
        if h.rank() != 2 || h.shape()[0] != query_pos.len() {
            return Err(Error::invalid(format!(
                "context head: {} query positions for features of shape {:?}",
                query_pos.len(),
                h.shape()
            )));
        }
        let d = self.attention.spec.hidden_dim;
        let order = ctx.canonical_order(all_tokens);
        let tokens = all_tokens.index_select(&order)?;
        let positions: Vec<[f64; 3]> = order.iter().map(|&i| ctx.positions[i]).collect();

        let q = self
            .query_proj
            .forward(store, h)?
            .add(&positional_table(query_pos, d, h.dtype())?)?;
        let m = self
            .context_proj
            .forward(store, &tokens)?
            .add(&positional_table(&positions, d, tokens.dtype())?)?;
        let x = self.attention.forward(store, &q, &m)?;
        self.out_proj.forward(store, &x)
    }

    pub fn forward(&self, store: &ParamStore, h: &Tensor, query_pos: &[[f64; 3]], ctx: &ContextSet) -> Result<Tensor> {
        self.project(store, h, query_pos, ctx)?.l2_normalize(1, NORM_EPS)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::ParamKind;
    use crate::tensor::{gradcheck, DType};
    use rand::{Rng, SeedableRng};

    fn rand_tensor(rng: &mut impl Rng, shape: &[usize]) -> Tensor {
        let n = shape.iter().product();
        Tensor::f64((0..n).map(|_| rng.gen_range(-1.0..1.0)).collect(), shape).unwrap()
    }

    fn toy_config() -> HeadsConfig {
        HeadsConfig {
            global_hidden: 5,
            global_out: 3,
            vanilla_hidden: 4,
            attention: AttentionSpec {
                layers: 2,
                heads: 2,
                hidden_dim: 12,
                ffn_dim: 8,
            },
            roi: RoiSampling::Exact,
            hidden_norm: false,
        }
    }

    fn zero_biases(store: &mut ParamStore) {
        let ids: Vec<_> = store
            .iter()
            .filter(|(_, p)| p.kind == ParamKind::Bias)
            .map(|(id, p)| (id, p.tensor.numel()))
            .collect();
        for (id, n) in ids {
            store.set_values(id, vec![0.0; n]).unwrap();
        }
    }

    #[test]
    fn global_zero_input() {
        let mut store = ParamStore::new(DType::F64, 0);
        let head = GlobalHead::new(&mut store, 4, &toy_config()).unwrap();
        zero_biases(&mut store);
        let x = Tensor::zeros(&[2, 4], DType::F64);
        assert!(head.project(&store, &x).unwrap().data().iter().all(|v| *v == 0.0));
        assert!(head.forward(&store, &x).unwrap().data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn global_hand_oracle_and_unit_norm() {
        let cfg = HeadsConfig {
            global_hidden: 2,
            global_out: 2,
            ..toy_config()
        };
        let mut store = ParamStore::new(DType::F64, 0);
        let head = GlobalHead::new(&mut store, 2, &cfg).unwrap();
        // layer weights are [in, out]
        let w = [vec![1.0, 0.0, 0.0, 1.0], vec![2.0, 0.0, 1.0, -1.0], vec![1.0, 1.0, 0.0, 1.0]];
        let b = [vec![0.0, -1.0], vec![0.5, 0.0], vec![0.0, 0.0]];
        for (i, l) in head.mlp.layers.iter().enumerate() {
            store.set_values(l.weight, w[i].clone()).unwrap();
            store.set_values(l.bias, b[i].clone()).unwrap();
        }
        let x = Tensor::f64(vec![3.0, 2.0], &[1, 2]).unwrap();
        // h1 = relu([3, 1]) ; h2 = relu([3*2 + 1*1 + 0.5, -1]) = [7.5, 0] ; out = [7.5, 7.5]
        assert_eq!(head.project(&store, &x).unwrap().data(), &[7.5, 7.5]);

        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new(DType::F64, 1);
        let head = GlobalHead::new(&mut store, 6, &toy_config()).unwrap();
        let z = head.forward(&store, &rand_tensor(&mut rng, &[5, 6])).unwrap();
        for row in z.data().chunks(3) {
            let n: f64 = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((n - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn vanilla_zero_and_hand() {
        let cfg = HeadsConfig {
            vanilla_hidden: 2,
            ..toy_config()
        };
        let mut store = ParamStore::new(DType::F64, 0);
        let head = VanillaRegionHead::new(&mut store, 2, &cfg).unwrap();
        let [l1, l2] = [&head.mlp.layers[0], &head.mlp.layers[1]];
        for l in [l1, l2] {
            store.set_values(l.weight, vec![0.0; 4]).unwrap();
            store.set_values(l.bias, vec![0.0; 2]).unwrap();
        }
        let x = Tensor::f64(vec![1.0, -2.0], &[1, 2]).unwrap();
        assert_eq!(head.project(&store, &x).unwrap().data(), &[0.0, 0.0]);
        store.set_values(l1.weight, vec![1.0, -1.0, 1.0, 1.0]).unwrap();
        store.set_values(l2.weight, vec![1.0, 2.0, 0.0, 1.0]).unwrap();
        store.set_values(l2.bias, vec![0.25, 0.0]).unwrap();
        let x = Tensor::f64(vec![2.0, 1.0], &[1, 2]).unwrap();
        // h1 = relu([3, -1]) = [3, 0]; out = [3 + 0.25, 6]
        assert_eq!(head.project(&store, &x).unwrap().data(), &[3.25, 6.0]);
    }

    #[test]
    fn roialign_plus_vanilla_gradcheck() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(2);
        let mut store = ParamStore::new(DType::F64, 2);
        let head = VanillaRegionHead::new(&mut store, 3, &toy_config()).unwrap();
        let f = rand_tensor(&mut rng, &[1, 1, 4, 4, 3]);
        let rois = [
            Roi { batch: 0, t: 0, y0: 0.3, x0: 0.5, y1: 2.9, x1: 3.5 },
            Roi { batch: 0, t: 0, y0: 1.0, x0: 0.0, y1: 4.0, x1: 2.2 },
        ];
        let w = rand_tensor(&mut rng, &[2, 3]);
        let err = gradcheck(
            |v| Ok(head.forward(&store, &roi_align(&v[0], &rois, RoiSampling::Exact)?)?.mul(&w)?.sum()),
            &[f],
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn hidden_norm_head_train_mode() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let cfg = HeadsConfig {
            hidden_norm: true,
            ..toy_config()
        };
        let mut store = ParamStore::new(DType::F64, 5);
        let head = GlobalHead::new(&mut store, 4, &cfg).unwrap();
        assert_eq!(head.mlp.norms.len(), 2);
        let x = rand_tensor(&mut rng, &[6, 4]);
        let w = rand_tensor(&mut rng, &[6, 3]);
        let err = gradcheck(
            |v| Ok(head.forward_mode(&store, &v[0], true, &mut Vec::new())?.mul(&w)?.sum()),
            &[x.clone()],
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "{err}");
        // each hidden norm reports its batch statistics once
        let mut stats = Vec::new();
        let z = head.forward_mode(&store, &x, true, &mut stats).unwrap();
        assert_eq!(stats.len(), 2);
        for row in z.data().chunks(3) {
            // a row whose hidden units are all cut by ReLU stays zero
            let n = row.iter().map(|v| v * v).sum::<f64>();
            assert!((n - 1.0).abs() < 1e-9 || n == 0.0, "{n}");
        }
        // shifting every input row by the same vector leaves training-mode
        // outputs unchanged up to rounding
        let shifted = x.add(&Tensor::f64(vec![3.0, -1.0, 0.5, 2.0], &[4]).unwrap()).unwrap();
        let z2 = head.forward_mode(&store, &shifted, true, &mut Vec::new()).unwrap();
        for (a, b) in z.data().iter().zip(z2.data()) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    fn toy_context(rng: &mut impl Rng, m: usize, c: usize) -> ContextSet {
        let tokens = rand_tensor(rng, &[m, c]);
        let positions = (0..m).map(|i| [(i / 4) as f64, (i % 4 / 2) as f64 + 0.5, (i % 2) as f64 + 0.5]).collect();
        ContextSet::new(tokens, positions).unwrap()
    }

    #[test]
    fn context_permutation_is_bit_identical() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::new(DType::F64, 3);
        let head = ContextHead::new(&mut store, 5, &toy_config()).unwrap();
        let ctx = toy_context(&mut rng, 8, 5);
        let h = rand_tensor(&mut rng, &[2, 5]);
        let qp = [[0.0, 1.0, 1.2], [1.0, 0.3, 1.7]];
        let perm = [5, 2, 7, 0, 1, 6, 3, 4];
        let shuffled = ContextSet::new(
            ctx.tokens().unwrap().index_select(&perm).unwrap(),
            perm.iter().map(|&i| ctx.positions()[i]).collect(),
        )
        .unwrap();
        let a = head.forward(&store, &h, &qp, &ctx).unwrap();
        let b = head.forward(&store, &h, &qp, &shuffled).unwrap();
        assert_eq!(a.data(), b.data());

        // moving one token changes the output
        let mut moved = ctx.positions().to_vec();
        moved[3] = [1.0, 1.5, 0.5];
        let c = head.forward(&store, &h, &qp, &ContextSet::new(ctx.tokens().unwrap().clone(), moved).unwrap()).unwrap();
        assert!(a.data().iter().zip(c.data()).any(|(x, y)| (x - y).abs() > 1e-9));
    }

    #[test]
    fn context_empty_is_error() {
        let mut store = ParamStore::new(DType::F64, 3);
        let head = ContextHead::new(&mut store, 5, &toy_config()).unwrap();
        let ctx = ContextSet::empty();
        let h = Tensor::zeros(&[1, 5], DType::F64);
        assert!(head.forward(&store, &h, &[[0.0; 3]], &ctx).is_err());
    }

    #[test]
    fn context_gradcheck_all_inputs_and_weights() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(4);
        let mut store = ParamStore::new(DType::F64, 4);
        let head = ContextHead::new(&mut store, 4, &toy_config()).unwrap();
        let ctx = toy_context(&mut rng, 4, 4);
        let h = rand_tensor(&mut rng, &[2, 4]);
        let qp = [[0.0, 1.0, 1.2], [1.0, 0.3, 1.7]];
        let w = rand_tensor(&mut rng, &[2, 4]);
        let ids: Vec<_> = store.iter().map(|(id, _)| id).collect();
        let mut inputs = vec![h, ctx.tokens().unwrap().clone()];
        inputs.extend(ids.iter().map(|&id| store.get(id).clone()));
        let err = gradcheck(
            |v| {
                let mut s = store.clone();
                for (k, &id) in ids.iter().enumerate() {
                    s.replace(id, v[k + 2].clone())?;
                }
                let c = ContextSet::new(v[1].clone(), ctx.positions().to_vec())?;
                Ok(head.forward(&s, &v[0], &qp, &c)?.mul(&w)?.sum())
            },
            &inputs,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn single_self_token_aligns_output() {
        // identity projections, attention and feed-forward contributions
        // zeroed: the output reduces to h plus the query's position code
        let c = 12;
        let cfg = HeadsConfig {
            attention: AttentionSpec {
                layers: 1,
                heads: 2,
                hidden_dim: c,
                ffn_dim: 4,
            },
            ..toy_config()
        };
        let mut store = ParamStore::new(DType::F64, 5);
        let head = ContextHead::new(&mut store, c, &cfg).unwrap();
        zero_biases(&mut store);
        let eye: Vec<f64> = (0..c * c).map(|i| if i / c == i % c { 1.0 } else { 0.0 }).collect();
        for l in [&head.query_proj, &head.context_proj, &head.out_proj] {
            store.set_values(l.weight, eye.clone()).unwrap();
        }
        let layer = &head.attention.layers[0];
        store.set_values(layer.out.weight, vec![0.0; c * c]).unwrap();
        store.set_values(layer.ffn_out.weight, vec![0.0; 4 * c]).unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(6);
        let h = Tensor::f64((0..c).map(|_| rng.gen_range(-20.0..20.0)).collect(), &[1, c]).unwrap();
        let ctx = ContextSet::new(h.clone(), vec![[1.0, 0.5, 0.5]]).unwrap();
        let z = head.forward(&store, &h, &[[1.0, 0.5, 0.5]], &ctx).unwrap();
        let hn: f64 = h.data().iter().map(|v| v * v).sum::<f64>().sqrt();
        let cos: f64 = z.data().iter().zip(h.data()).map(|(a, b)| a * b).sum::<f64>() / hn;
        assert!(cos > 0.99, "{cos}");
    }
}
