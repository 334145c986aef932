//! Named parameter storage.
//!
//! Layers hold [`ParamId`] handles and read the current tensors from a
//! [`ParamStore`] at forward time; the optimizer swaps in fresh leaves after
//! each update, so tensors that entered a graph are never mutated.

use std::collections::HashMap;

use rand::Rng as _;

use crate::error::{Error, Result};
use crate::rng::rng_for;
use crate::tensor::{DType, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamKind {
    /// Convolution or linear weights; the only kind that receives weight decay.
    Kernel,
    Bias,
    /// Normalization scale/shift.
    Norm,
    /// Non-trainable state such as running statistics.
    Buffer,
}

#[derive(Debug, Clone)]
pub enum Init {
    Zeros,
    Ones,
    /// U(-1/sqrt(fan_in), 1/sqrt(fan_in)).
    FanIn(usize),
    Uniform(f64),
    Values(Vec<f64>),
}

#[derive(Debug, Clone)]
pub struct Param {
    pub name: String,
    pub kind: ParamKind,
    pub tensor: Tensor,
}

#[derive(Debug, Clone)]
pub struct ParamStore {
    dtype: DType,
    seed: u64,
    params: Vec<Param>,
    index: HashMap<String, ParamId>,
}

impl ParamStore {
    pub fn new(dtype: DType, seed: u64) -> Self {
        ParamStore {
            dtype,
            seed,
            params: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Registers a parameter. Random initial values depend only on the store
    /// seed and the parameter name, not on registration order.
    pub fn add(&mut self, name: &str, kind: ParamKind, shape: &[usize], init: Init) -> Result<ParamId> {
        if self.index.contains_key(name) {
            return Err(Error::invalid(format!("duplicate parameter name {name}")));
        }
        let n: usize = shape.iter().product();
        let data = match init {
            Init::Zeros => vec![0.0; n],
            Init::Ones => vec![1.0; n],
            Init::FanIn(fan_in) => {
                let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
                let mut rng = rng_for(self.seed, name, 0);
                (0..n).map(|_| rng.gen_range(-bound..bound)).collect()
            }
            Init::Uniform(bound) => {
                let mut rng = rng_for(self.seed, name, 0);
                (0..n).map(|_| rng.gen_range(-bound..=bound)).collect()
            }
            Init::Values(v) => v,
        };
        let tensor = if kind == ParamKind::Buffer {
            Tensor::from_vec(data, shape, self.dtype)?
        } else {
            Tensor::param(data, shape, self.dtype)?
        };
        let id = ParamId(self.params.len());
        self.index.insert(name.to_string(), id);
        self.params.push(Param {
            name: name.to_string(),
            kind,
            tensor,
        });
        Ok(id)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].tensor
    }

    pub fn param(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor> {
        self.id(name).map(|id| self.get(id))
    }

    /// Replaces values, keeping trainability of the slot.
    pub fn set_values(&mut self, id: ParamId, data: Vec<f64>) -> Result<()> {
        let p = &mut self.params[id.0];
        let shape = p.tensor.shape().to_vec();
        p.tensor = if p.kind == ParamKind::Buffer {
            Tensor::from_vec(data, &shape, self.dtype)?
        } else {
            Tensor::param(data, &shape, self.dtype)?
        };
        Ok(())
    }

    /// Swaps in a tensor of the same shape, e.g. a leaf owned by a gradient
    /// check or a graph-connected value.
    pub fn replace(&mut self, id: ParamId, tensor: Tensor) -> Result<()> {
        let p = &mut self.params[id.0];
        if p.tensor.shape() != tensor.shape() {
            return Err(Error::ShapeMismatch {
                op: "param replace",
                lhs: p.tensor.shape().to_vec(),
                rhs: tensor.shape().to_vec(),
            });
        }
        p.tensor = tensor;
        Ok(())
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Number of trainable scalars.
    pub fn num_trainable(&self) -> usize {
        self.params
            .iter()
            .filter(|p| p.kind != ParamKind::Buffer)
            .map(|p| p.tensor.numel())
            .sum()
    }

    /// Number of trainable scalars in parameters whose name starts with `prefix`.
    pub fn num_trainable_with_prefix(&self, prefix: &str) -> usize {
        self.params
            .iter()
            .filter(|p| p.kind != ParamKind::Buffer && p.name.starts_with(prefix))
            .map(|p| p.tensor.numel())
            .sum()
    }

    /// Bitwise fingerprint of all values (FNV-1a over the f64 bit patterns).
    pub fn checksum(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for p in &self.params {
            for v in p.tensor.data() {
                h ^= v.to_bits();
                h = h.wrapping_mul(0x0000_0100_0000_01b3);
            }
        }
        h
    }

    /// Copy with every trainable tensor re-wrapped as a fresh leaf, so graphs
    /// built from the copy are independent of graphs built from `self`.
    pub fn fresh_leaves(&self) -> ParamStore {
        let mut out = self.clone();
        for p in &mut out.params {
            if p.kind != ParamKind::Buffer {
                p.tensor = p.tensor.to_param();
            }
        }
        out
    }

    /// Copy with all values cast to `dtype`.
    pub fn cast(&self, dtype: DType) -> ParamStore {
        let mut out = self.clone();
        out.dtype = dtype;
        for p in &mut out.params {
            p.tensor = p.tensor.cast(dtype);
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn init_depends_on_name_not_order() {
        let mut a = ParamStore::new(DType::F64, 3);
        let mut b = ParamStore::new(DType::F64, 3);
        a.add("x", ParamKind::Kernel, &[4], Init::FanIn(4)).unwrap();
        a.add("y", ParamKind::Kernel, &[4], Init::FanIn(4)).unwrap();
        b.add("y", ParamKind::Kernel, &[4], Init::FanIn(4)).unwrap();
        b.add("x", ParamKind::Kernel, &[4], Init::FanIn(4)).unwrap();
        assert_eq!(a.by_name("x").unwrap().data(), b.by_name("x").unwrap().data());
        assert_ne!(a.by_name("x").unwrap().data(), a.by_name("y").unwrap().data());
    }

    #[test]
    fn duplicate_names_rejected() {
        let mut s = ParamStore::new(DType::F64, 0);
        s.add("w", ParamKind::Kernel, &[1], Init::Zeros).unwrap();
        assert!(s.add("w", ParamKind::Bias, &[1], Init::Zeros).is_err());
    }

    #[test]
    fn buffers_are_not_trainable() {
        let mut s = ParamStore::new(DType::F64, 0);
        let b = s.add("running_mean", ParamKind::Buffer, &[2], Init::Zeros).unwrap();
        let w = s.add("w", ParamKind::Kernel, &[2], Init::Ones).unwrap();
        assert!(!s.get(b).is_trainable());
        assert!(s.get(w).is_trainable());
        assert_eq!(s.num_trainable(), 2);
    }
}
