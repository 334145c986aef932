use super::norm::{Norm, NormMode, StatUpdate};
use crate::error::{Error, Result};
use crate::params::{Init, ParamId, ParamKind, ParamStore};
use crate::tensor::Tensor;

/// y = x W + b over the last axis of `x`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub in_dim: usize,
    pub out_dim: usize,
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, in_dim: usize, out_dim: usize) -> Result<Self> {
        let weight = store.add(
            &format!("{name}.weight"),
            ParamKind::Kernel,
            &[in_dim, out_dim],
            Init::FanIn(in_dim),
        )?;
        let bias = store.add(&format!("{name}.bias"), ParamKind::Bias, &[out_dim], Init::Zeros)?;
        Ok(Linear {
            in_dim,
            out_dim,
            weight,
            bias,
        })
    }

    pub fn forward(&self, store: &ParamStore, x: &Tensor) -> Result<Tensor> {
        let s = x.shape();
        if s.last() != Some(&self.in_dim) {
            return Err(Error::ShapeMismatch {
                op: "linear",
                lhs: s.to_vec(),
                rhs: vec![self.in_dim, self.out_dim],
            });
        }
        let rows = x.numel() / self.in_dim;
        let flat = if s.len() == 2 { x.clone() } else { x.reshape(&[rows, self.in_dim])? };
        let y = flat.matmul(store.get(self.weight))?.add(store.get(self.bias))?;
        if s.len() == 2 {
            Ok(y)
        } else {
            let mut out = s.to_vec();
            *out.last_mut().expect("rank >= 1") = self.out_dim;
            y.reshape(&out)
        }
    }
}

/// Stack of linear layers with ReLU between them (none after the last),
/// optionally batch-normalizing each hidden layer before its ReLU.
#[derive(Debug, Clone)]
pub struct Mlp {
    pub layers: Vec<Linear>,
    pub norms: Vec<Norm>,
}

impl Mlp {
    /// `widths` lists input, hidden and output widths; at least two entries.
    pub fn new(store: &mut ParamStore, name: &str, widths: &[usize]) -> Result<Self> {
        Self::build(store, name, widths, false)
    }

    pub fn with_hidden_norm(store: &mut ParamStore, name: &str, widths: &[usize]) -> Result<Self> {
        Self::build(store, name, widths, true)
    }

    fn build(store: &mut ParamStore, name: &str, widths: &[usize], norm: bool) -> Result<Self> {
        if widths.len() < 2 || widths.contains(&0) {
            return Err(Error::invalid(format!("{name}: bad MLP widths {widths:?}")));
        }
        let mut layers = Vec::with_capacity(widths.len() - 1);
        let mut norms = Vec::new();
        for (i, w) in widths.windows(2).enumerate() {
            layers.push(Linear::new(store, &format!("{name}.fc{i}"), w[0], w[1])?);
            if norm && i + 2 < widths.len() {
                norms.push(Norm::new(store, &format!("{name}.bn{i}"), w[1], NormMode::Batch)?);
            }
        }
        Ok(Mlp { layers, norms })
    }

    pub fn in_dim(&self) -> usize {
        self.layers[0].in_dim
    }

    pub fn out_dim(&self) -> usize {
        self.layers.last().expect("non-empty").out_dim
    }

    /// Inference: hidden norms, if any, use their running statistics.
    pub fn forward(&self, store: &ParamStore, x: &Tensor) -> Result<Tensor> {
        self.forward_mode(store, x, false, &mut Vec::new())
    }

    /// With `train`, hidden norms use batch statistics over the rows of `x`
    /// and push their running-average updates onto `stats`.
    pub fn forward_mode(&self, store: &ParamStore, x: &Tensor, train: bool, stats: &mut Vec<StatUpdate>) -> Result<Tensor> {
        let mut h = x.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(store, &h)?;
            if i + 1 < self.layers.len() {
                if let Some(norm) = self.norms.get(i) {
                    let (y, update) = norm.forward(store, &h, train)?;
                    stats.extend(update);
                    h = y;
                }
                h = h.relu();
            }
        }
        Ok(h)
    }
}
