//! A small reverse-mode automatic differentiation engine over dense `f32`
//! tensors.
//!
//! Tensors are immutable, reference counted, and row-major. An operation
//! records its inputs only when at least one of them requires a gradient, so
//! inference code paths build no graph at all. Calling [`Tensor::backward`]
//! on a scalar walks the recorded graph and returns a [`Gradients`] map keyed
//! by tensor identity.
//!
//! Shape errors are programming errors and panic with a descriptive message,
//! in the same spirit as slice indexing.

mod backward;
mod conv;
mod gemm;
mod norm;
mod ops;

use std::fmt;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

pub use backward::Gradients;
pub use conv::{Conv2dOpts, Padding};

static NEXT_ID: AtomicU64 = AtomicU64::new(1);

fn next_id() -> u64 {
    NEXT_ID.fetch_add(1, Ordering::Relaxed)
}

/// Dense row-major `f32` tensor with optional gradient tracking.
#[derive(Clone)]
pub struct Tensor(Arc<Node>);

pub(crate) struct Node {
    id: u64,
    shape: Vec<usize>,
    data: Arc<Vec<f32>>,
    requires_grad: bool,
    op: Op,
}

pub(crate) enum Op {
    Leaf,
    Add(Tensor, Tensor),
    Sub(Tensor, Tensor),
    Mul(Tensor, Tensor),
    Div(Tensor, Tensor),
    Affine(Tensor, f32),
    LinComb(Tensor, Tensor, f32, f32),
    Exp(Tensor),
    Ln(Tensor),
    Sqrt(Tensor),
    Relu(Tensor),
    Silu(Tensor),
    Abs(Tensor),
    Clamp(Tensor, f32, f32),
    SumAll(Tensor),
    SumAxis(Tensor, usize),
    Reshape(Tensor),
    Permute(Tensor, Vec<usize>),
    MatMul {
        a: Tensor,
        b: Tensor,
        ta: bool,
        tb: bool,
    },
    Softmax(Tensor),
    MaskedFill(Tensor, Arc<Vec<bool>>),
    Concat(Vec<Tensor>, usize),
    Narrow(Tensor, usize, usize),
    Conv2d {
        x: Tensor,
        w: Tensor,
        b: Option<Tensor>,
        opts: Conv2dOpts,
    },
    GroupNorm {
        x: Tensor,
        gamma: Tensor,
        beta: Tensor,
        groups: usize,
        stats: Vec<(f32, f32)>,
    },
    LayerNorm {
        x: Tensor,
        gamma: Tensor,
        beta: Tensor,
        stats: Vec<(f32, f32)>,
    },
    AvgPool2(Tensor),
    Upsample2(Tensor),
    Embedding(Tensor, Arc<Vec<usize>>),
}

impl Tensor {
    pub(crate) fn from_op(data: Vec<f32>, shape: Vec<usize>, op: Op) -> Tensor {
        debug_assert_eq!(data.len(), shape.iter().product::<usize>());
        let requires_grad = op.any_input_requires_grad();
        let op = if requires_grad { op } else { Op::Leaf };
        Tensor(Arc::new(Node {
            id: next_id(),
            shape,
            data: Arc::new(data),
            requires_grad,
            op,
        }))
    }

    /// A constant tensor (no gradient tracking).
    pub fn from_vec(data: Vec<f32>, shape: &[usize]) -> Tensor {
        assert_eq!(
            data.len(),
            shape.iter().product::<usize>(),
            "data length {} does not match shape {:?}",
            data.len(),
            shape
        );
        Tensor(Arc::new(Node {
            id: next_id(),
            shape: shape.to_vec(),
            data: Arc::new(data),
            requires_grad: false,
            op: Op::Leaf,
        }))
    }

    /// A leaf tensor that accumulates gradients.
    pub fn var(data: Vec<f32>, shape: &[usize]) -> Tensor {
        Tensor::from_vec(data, shape).to_var()
    }

    pub fn zeros(shape: &[usize]) -> Tensor {
        Tensor::full(shape, 0.0)
    }

    pub fn ones(shape: &[usize]) -> Tensor {
        Tensor::full(shape, 1.0)
    }

    pub fn full(shape: &[usize], value: f32) -> Tensor {
        Tensor::from_vec(vec![value; shape.iter().product()], shape)
    }

    pub fn scalar(value: f32) -> Tensor {
        Tensor::from_vec(vec![value], &[])
    }

    /// Same data, detached from any graph.
    pub fn detach(&self) -> Tensor {
        Tensor(Arc::new(Node {
            id: next_id(),
            shape: self.0.shape.clone(),
            data: Arc::clone(&self.0.data),
            requires_grad: false,
            op: Op::Leaf,
        }))
    }

    /// Same data as a fresh gradient-tracking leaf.
    pub fn to_var(&self) -> Tensor {
        Tensor(Arc::new(Node {
            id: next_id(),
            shape: self.0.shape.clone(),
            data: Arc::clone(&self.0.data),
            requires_grad: true,
            op: Op::Leaf,
        }))
    }

    pub fn id(&self) -> u64 {
        self.0.id
    }

    pub fn shape(&self) -> &[usize] {
        &self.0.shape
    }

    pub fn rank(&self) -> usize {
        self.0.shape.len()
    }

    pub fn dim(&self, axis: usize) -> usize {
        self.0.shape[axis]
    }

    pub fn numel(&self) -> usize {
        self.0.data.len()
    }

    pub fn data(&self) -> &[f32] {
        &self.0.data
    }

    pub fn to_vec(&self) -> Vec<f32> {
        self.0.data.as_ref().clone()
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    /// Value of a one-element tensor.
    pub fn item(&self) -> f32 {
        assert_eq!(self.numel(), 1, "item() on tensor of shape {:?}", self.shape());
        self.0.data[0]
    }

    pub fn all_finite(&self) -> bool {
        self.0.data.iter().all(|v| v.is_finite())
    }

    pub(crate) fn node(&self) -> &Node {
        &self.0
    }
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let preview: Vec<f32> = self.data().iter().take(8).copied().collect();
        f.debug_struct("Tensor")
            .field("shape", &self.shape())
            .field("requires_grad", &self.requires_grad())
            .field("data", &preview)
            .finish()
    }
}

impl Op {
    fn inputs(&self) -> Vec<&Tensor> {
        match self {
            Op::Leaf => vec![],
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::Div(a, b) | Op::LinComb(a, b, _, _) => vec![a, b],
            Op::Affine(x, _)
            | Op::Exp(x)
            | Op::Ln(x)
            | Op::Sqrt(x)
            | Op::Relu(x)
            | Op::Silu(x)
            | Op::Abs(x)
            | Op::Clamp(x, _, _)
            | Op::SumAll(x)
            | Op::SumAxis(x, _)
            | Op::Reshape(x)
            | Op::Permute(x, _)
            | Op::Softmax(x)
            | Op::MaskedFill(x, _)
            | Op::Narrow(x, _, _)
            | Op::AvgPool2(x)
            | Op::Upsample2(x)
            | Op::Embedding(x, _) => vec![x],
            Op::MatMul { a, b, .. } => vec![a, b],
            Op::Concat(xs, _) => xs.iter().collect(),
            Op::Conv2d { x, w, b, .. } => {
                let mut v = vec![x, w];
                if let Some(b) = b {
                    v.push(b);
                }
                v
            }
            Op::GroupNorm { x, gamma, beta, .. } | Op::LayerNorm { x, gamma, beta, .. } => {
                vec![x, gamma, beta]
            }
        }
    }

    fn any_input_requires_grad(&self) -> bool {
        self.inputs().iter().any(|t| t.requires_grad())
    }
}

pub(crate) fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

pub(crate) fn contiguous_strides(shape: &[usize]) -> Vec<usize> {
    let mut strides = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        strides[i] = strides[i + 1] * shape[i + 1];
    }
    strides
}
