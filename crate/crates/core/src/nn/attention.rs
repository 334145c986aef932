use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::linear::Linear;
use crate::params::{Init, ParamId, ParamKind, ParamStore};
use crate::tensor::Tensor;

pub const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttentionSpec {
    pub layers: usize,
    pub heads: usize,
    pub hidden_dim: usize,
    pub ffn_dim: usize,
}

impl AttentionSpec {
    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 || self.heads == 0 || self.ffn_dim == 0 {
            return Err(Error::invalid(format!("attention spec has a zero count: {self:?}")));
        }
        if self.hidden_dim % self.heads != 0 {
            return Err(Error::invalid(format!(
                "hidden_dim {} not divisible by {} heads",
                self.hidden_dim, self.heads
            )));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.hidden_dim / self.heads
    }
}

/// softmax(Q_h K_h^T / sqrt(d_h)) V_h per head, heads concatenated.
/// `q` is `[Nq, D]`, `k` and `v` are `[Nk, D]`.
pub fn scaled_dot_product_attention(q: &Tensor, k: &Tensor, v: &Tensor, heads: usize) -> Result<Tensor> {
    let (qs, ks, vs) = (q.shape(), k.shape(), v.shape());
    if qs.len() != 2 || ks.len() != 2 || ks != vs || qs[1] != ks[1] {
        return Err(Error::ShapeMismatch {
            op: "attention",
            lhs: qs.to_vec(),
            rhs: ks.to_vec(),
        });
    }
    let d = qs[1];
    if heads == 0 || d % heads != 0 {
        return Err(Error::invalid(format!("{d} channels not divisible by {heads} heads")));
    }
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let (lo, hi) = (h * dh, (h + 1) * dh);
        let (qh, kh, vh) = (q.slice(1, lo, hi)?, k.slice(1, lo, hi)?, v.slice(1, lo, hi)?);
        let scores = qh.matmul(&kh.transpose()?)?.scale(scale);
        outs.push(scores.softmax(1)?.matmul(&vh)?);
    }
    let refs: Vec<&Tensor> = outs.iter().collect();
    Tensor::concat(&refs, 1)
}

#[derive(Debug, Clone)]
struct LayerNormParams {
    gamma: ParamId,
    beta: ParamId,
}

impl LayerNormParams {
    fn new(store: &mut ParamStore, name: &str, dim: usize) -> Result<Self> {
        Ok(LayerNormParams {
            gamma: store.add(&format!("{name}.gamma"), ParamKind::Norm, &[dim], Init::Ones)?,
            beta: store.add(&format!("{name}.beta"), ParamKind::Norm, &[dim], Init::Zeros)?,
        })
    }

    fn forward(&self, store: &ParamStore, x: &Tensor) -> Result<Tensor> {
        x.layer_norm(store.get(self.gamma), store.get(self.beta), LN_EPS)
    }
}

#[derive(Debug, Clone)]
pub struct CrossAttentionLayer {
    ln_query: LayerNormParams,
    ln_memory: LayerNormParams,
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub out: Linear,
    ln_ffn: LayerNormParams,
    pub ffn_in: Linear,
    pub ffn_out: Linear,
}

/// Pre-norm transformer decoder stack without self-attention: each layer is
/// cross-attention from the query tokens to the memory tokens followed by a
/// ReLU feed-forward block, both residual.
#[derive(Debug, Clone)]
pub struct CrossAttention {
    pub spec: AttentionSpec,
    pub layers: Vec<CrossAttentionLayer>,
}

impl CrossAttention {
    pub fn new(store: &mut ParamStore, name: &str, spec: AttentionSpec) -> Result<Self> {
        spec.validate()?;
        let d = spec.hidden_dim;
        let layers = (0..spec.layers)
            .map(|l| {
                let p = format!("{name}.layer{l}");
                Ok(CrossAttentionLayer {
                    ln_query: LayerNormParams::new(store, &format!("{p}.ln_query"), d)?,
                    ln_memory: LayerNormParams::new(store, &format!("{p}.ln_memory"), d)?,
                    q: Linear::new(store, &format!("{p}.q"), d, d)?,
                    k: Linear::new(store, &format!("{p}.k"), d, d)?,
                    v: Linear::new(store, &format!("{p}.v"), d, d)?,
                    out: Linear::new(store, &format!("{p}.out"), d, d)?,
                    ln_ffn: LayerNormParams::new(store, &format!("{p}.ln_ffn"), d)?,
                    ffn_in: Linear::new(store, &format!("{p}.ffn_in"), d, spec.ffn_dim)?,
                    ffn_out: Linear::new(store, &format!("{p}.ffn_out"), spec.ffn_dim, d)?,
                })
            })
            .collect::<Result<_>>()?;
        Ok(CrossAttention { spec, layers })
    }

    /// `query` is `[Nq, D]`, `memory` is `[Nk, D]` with `Nk >= 1`.
    pub fn forward(&self, store: &ParamStore, query: &Tensor, memory: &Tensor) -> Result<Tensor> {
        let d = self.spec.hidden_dim;
        for (name, t) in [("query", query), ("memory", memory)] {
            if t.rank() != 2 || t.shape()[1] != d {
                return Err(Error::invalid(format!(
                    "cross-attention {name} must be [n, {d}], got {:?}",
                    t.shape()
                )));
            }
        }
        let mut x = query.clone();
        for layer in &self.layers {
            let xn = layer.ln_query.forward(store, &x)?;
            let mn = layer.ln_memory.forward(store, memory)?;
            let q = layer.q.forward(store, &xn)?;
            let k = layer.k.forward(store, &mn)?;
            let v = layer.v.forward(store, &mn)?;
            let att = scaled_dot_product_attention(&q, &k, &v, self.spec.heads)?;
            x = x.add(&layer.out.forward(store, &att)?)?;
            let h = layer.ffn_in.forward(store, &layer.ln_ffn.forward(store, &x)?)?.relu();
            x = x.add(&layer.ffn_out.forward(store, &h)?)?;
        }
        Ok(x)
    }
}
