//! Dense tensors with reverse-mode automatic differentiation.
//!
//! A [`Tensor`] is an immutable, reference-counted buffer. Operations that
//! involve at least one tensor requiring gradients record a backward closure
//! and their parents, forming a DAG that [`Tensor::backward`] walks in
//! reverse creation order.
//!
//! Values are stored as `f64`. Tensors tagged [`DType::F32`] have every
//! produced value rounded to single precision, so f32 graphs behave like
//! f32 arithmetic while sharing one kernel implementation.

mod gemm;
mod gradcheck;
pub mod io;
mod ops;

use std::cell::Cell;
use std::collections::HashMap;
use std::fmt;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use crate::error::{Error, Result};

pub use gemm::{gemm, Transpose};
pub use gradcheck::{gradcheck, gradcheck_report, gradcheck_sweep, GradcheckReport};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DType {
    F32,
    F64,
}

impl DType {
    pub fn code(self) -> u8 {
        match self {
            DType::F32 => 1,
            DType::F64 => 2,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            1 => Some(DType::F32),
            2 => Some(DType::F64),
            _ => None,
        }
    }

    pub fn size_of(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
        }
    }

    /// Result dtype of an operation over inputs of `self` and `other`.
    pub fn promote(self, other: DType) -> DType {
        if self == DType::F64 || other == DType::F64 {
            DType::F64
        } else {
            DType::F32
        }
    }

    #[inline]
    pub(crate) fn round_slice(self, data: &mut [f64]) {
        if self == DType::F32 {
            for v in data.iter_mut() {
                *v = *v as f32 as f64;
            }
        }
    }
}

/// Unique, monotonically increasing identity of a tensor node.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct TensorId(u64);

static NEXT_ID: AtomicU64 = AtomicU64::new(1);

fn next_id() -> TensorId {
    TensorId(NEXT_ID.fetch_add(1, Ordering::Relaxed))
}

thread_local! {
    static GRAD_ENABLED: Cell<bool> = const { Cell::new(true) };
}

/// Runs `f` without recording any differentiation graph on this thread.
pub fn no_grad<R>(f: impl FnOnce() -> R) -> R {
    let prev = GRAD_ENABLED.with(|g| g.replace(false));
    let out = f();
    GRAD_ENABLED.with(|g| g.set(prev));
    out
}

fn grad_enabled() -> bool {
    GRAD_ENABLED.with(|g| g.get())
}

/// Backward closure: receives the output gradient and returns one optional
/// gradient buffer per parent (`None` when the parent needs none).
pub type BackwardFn = Box<dyn Fn(&[f64]) -> Vec<Option<Vec<f64>>> + Send + Sync>;

struct GradFn {
    kind: &'static str,
    parents: Vec<Tensor>,
    backward: BackwardFn,
}

struct Node {
    id: TensorId,
    shape: Vec<usize>,
    dtype: DType,
    data: Vec<f64>,
    requires_grad: bool,
    trainable: bool,
    grad_fn: Option<GradFn>,
}

#[derive(Clone)]
pub struct Tensor(Arc<Node>);

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut d = f.debug_struct("Tensor");
        d.field("shape", &self.0.shape).field("dtype", &self.0.dtype);
        if let Some(g) = &self.0.grad_fn {
            d.field("op", &g.kind);
        }
        if self.numel() <= 16 {
            d.field("data", &self.0.data);
        }
        d.finish()
    }
}

pub(crate) fn numel_of(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl Tensor {
    fn leaf(data: Vec<f64>, shape: Vec<usize>, dtype: DType, trainable: bool) -> Result<Self> {
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::invalid(format!("zero extent in shape {shape:?}")));
        }
        if numel_of(&shape) != data.len() {
            return Err(Error::ShapeMismatch {
                op: "from_vec",
                lhs: shape,
                rhs: vec![data.len()],
            });
        }
        let mut data = data;
        dtype.round_slice(&mut data);
        Ok(Tensor(Arc::new(Node {
            id: next_id(),
            shape,
            dtype,
            data,
            requires_grad: trainable,
            trainable,
            grad_fn: None,
        })))
    }

    /// Constant (non-trainable) tensor.
    pub fn from_vec(data: Vec<f64>, shape: &[usize], dtype: DType) -> Result<Self> {
        Self::leaf(data, shape.to_vec(), dtype, false)
    }

    /// Constant f64 tensor.
    pub fn f64(data: Vec<f64>, shape: &[usize]) -> Result<Self> {
        Self::from_vec(data, shape, DType::F64)
    }

    /// Trainable leaf; gradients for it are reported by [`Tensor::backward`].
    pub fn param(data: Vec<f64>, shape: &[usize], dtype: DType) -> Result<Self> {
        Self::leaf(data, shape.to_vec(), dtype, true)
    }

    pub fn scalar(value: f64, dtype: DType) -> Self {
        Self::leaf(vec![value], vec![], dtype, false).expect("scalar shape is valid")
    }

    pub fn zeros(shape: &[usize], dtype: DType) -> Self {
        Self::leaf(vec![0.0; numel_of(shape)], shape.to_vec(), dtype, false)
            .expect("zeros with positive extents")
    }

    pub fn full(shape: &[usize], value: f64, dtype: DType) -> Self {
        Self::leaf(vec![value; numel_of(shape)], shape.to_vec(), dtype, false)
            .expect("full with positive extents")
    }

    /// Builds the result of a custom operation. `backward` is recorded only
    /// when gradients are enabled and some parent requires them.
    pub fn from_op(
        kind: &'static str,
        mut data: Vec<f64>,
        shape: Vec<usize>,
        parents: &[&Tensor],
        backward: BackwardFn,
    ) -> Tensor {
        debug_assert_eq!(numel_of(&shape), data.len(), "{kind}: output size");
        let dtype = parents
            .iter()
            .map(|p| p.dtype())
            .reduce(DType::promote)
            .unwrap_or(DType::F64);
        dtype.round_slice(&mut data);
        let requires_grad = grad_enabled() && parents.iter().any(|p| p.requires_grad());
        let grad_fn = requires_grad.then(|| GradFn {
            kind,
            parents: parents.iter().map(|&p| p.clone()).collect(),
            backward,
        });
        Tensor(Arc::new(Node {
            id: next_id(),
            shape,
            dtype,
            data,
            requires_grad,
            trainable: false,
            grad_fn,
        }))
    }

    pub fn id(&self) -> TensorId {
        self.0.id
    }

    pub fn shape(&self) -> &[usize] {
        &self.0.shape
    }

    pub fn rank(&self) -> usize {
        self.0.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.0.data.len()
    }

    pub fn dtype(&self) -> DType {
        self.0.dtype
    }

    pub fn data(&self) -> &[f64] {
        &self.0.data
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.0.data.clone()
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    pub fn is_trainable(&self) -> bool {
        self.0.trainable
    }

    /// Kind of the producing operation, `None` for leaves and untracked results.
    pub fn op_kind(&self) -> Option<&'static str> {
        self.0.grad_fn.as_ref().map(|g| g.kind)
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(self.numel(), 1, "item() on tensor of shape {:?}", self.shape());
        self.0.data[0]
    }

    /// Same values, cut from the graph.
    pub fn detach(&self) -> Tensor {
        Tensor(Arc::new(Node {
            id: next_id(),
            shape: self.0.shape.clone(),
            dtype: self.0.dtype,
            data: self.0.data.clone(),
            requires_grad: false,
            trainable: false,
            grad_fn: None,
        }))
    }

    /// Fresh trainable leaf holding the same values.
    pub fn to_param(&self) -> Tensor {
        Tensor(Arc::new(Node {
            id: next_id(),
            shape: self.0.shape.clone(),
            dtype: self.0.dtype,
            data: self.0.data.clone(),
            requires_grad: true,
            trainable: true,
            grad_fn: None,
        }))
    }

    /// Copy converted to `dtype`.
    pub fn cast(&self, dtype: DType) -> Tensor {
        let mut data = self.0.data.clone();
        dtype.round_slice(&mut data);
        Tensor(Arc::new(Node {
            id: next_id(),
            shape: self.0.shape.clone(),
            dtype,
            data,
            requires_grad: false,
            trainable: self.0.trainable,
            grad_fn: None,
        }))
    }

    /// Reverse-mode sweep from a scalar root. Gradients of fan-out nodes are
    /// summed in decreasing node-id order, which is a fixed topological order.
    pub fn backward(&self) -> Result<GradMap> {
        if self.numel() != 1 {
            return Err(Error::NonScalarRoot(self.shape().to_vec()));
        }
        let mut grads = GradMap::default();
        if !self.requires_grad() {
            return Ok(grads);
        }

        let mut nodes: HashMap<TensorId, Tensor> = HashMap::new();
        let mut stack = vec![self.clone()];
        while let Some(t) = stack.pop() {
            if nodes.contains_key(&t.id()) {
                continue;
            }
            if let Some(g) = &t.0.grad_fn {
                for p in &g.parents {
                    if p.requires_grad() && !nodes.contains_key(&p.id()) {
                        stack.push(p.clone());
                    }
                }
            }
            nodes.insert(t.id(), t);
        }
        let mut order: Vec<TensorId> = nodes.keys().copied().collect();
        order.sort_unstable_by(|a, b| b.cmp(a));

        let mut pending: HashMap<TensorId, Vec<f64>> = HashMap::new();
        pending.insert(self.id(), vec![1.0]);
        for id in order {
            let node = &nodes[&id];
            let Some(grad) = pending.remove(&id) else {
                continue;
            };
            if let Some(g) = &node.0.grad_fn {
                let parent_grads = (g.backward)(&grad);
                debug_assert_eq!(parent_grads.len(), g.parents.len(), "{}", g.kind);
                for (p, pg) in g.parents.iter().zip(parent_grads) {
                    let Some(pg) = pg else { continue };
                    if !p.requires_grad() {
                        continue;
                    }
                    debug_assert_eq!(pg.len(), p.numel(), "{}: parent grad size", g.kind);
                    match pending.get_mut(&p.id()) {
                        Some(acc) => acc.iter_mut().zip(&pg).for_each(|(a, b)| *a += b),
                        None => {
                            pending.insert(p.id(), pg);
                        }
                    }
                }
            } else if node.is_trainable() {
                let mut grad = grad;
                node.dtype().round_slice(&mut grad);
                let gt = Tensor::leaf(grad, node.shape().to_vec(), node.dtype(), false)?;
                grads.grads.insert(id, gt);
            }
        }
        Ok(grads)
    }
}

/// Gradients of a scalar with respect to the trainable leaves reachable
/// from it.
#[derive(Debug, Default, Clone)]
pub struct GradMap {
    grads: HashMap<TensorId, Tensor>,
}

impl GradMap {
    pub fn get(&self, t: &Tensor) -> Option<&Tensor> {
        self.grads.get(&t.id())
    }

    /// Gradient of `t`, zeros when `t` was not reachable from the root.
    pub fn get_or_zeros(&self, t: &Tensor) -> Tensor {
        self.get(t)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(t.shape(), t.dtype()))
    }

    pub fn contains(&self, t: &Tensor) -> bool {
        self.grads.contains_key(&t.id())
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }
}
