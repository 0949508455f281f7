use std::fmt;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use crate::{Result, TensorError};

static NEXT_ID: AtomicU64 = AtomicU64::new(1);

/// What a backward closure sees: the upstream gradient, the forward output
/// and which inputs actually need a gradient.
pub(crate) struct BackwardCtx<'a> {
    pub grad: &'a [f64],
    pub out: &'a [f64],
    pub needs: &'a [bool],
}

pub(crate) type BackwardFn = Box<dyn Fn(&BackwardCtx<'_>) -> Vec<Option<Vec<f64>>> + Send + Sync>;

pub(crate) struct GradFn {
    pub inputs: Vec<Tensor>,
    pub backward: BackwardFn,
}

pub(crate) struct Node {
    pub id: u64,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
    pub requires_grad: bool,
    pub grad_fn: Option<GradFn>,
}

// Long graphs would otherwise drop recursively, one stack frame per node.
impl Drop for Node {
    fn drop(&mut self) {
        let mut pending = Vec::new();
        if let Some(GradFn { inputs, backward }) = self.grad_fn.take() {
            drop(backward);
            pending = inputs;
        }
        while let Some(t) = pending.pop() {
            if let Ok(mut node) = Arc::try_unwrap(t.0) {
                if let Some(GradFn { inputs, backward }) = node.grad_fn.take() {
                    drop(backward);
                    pending.extend(inputs);
                }
            }
        }
    }
}

/// Immutable n-dimensional array of `f64`, row-major.
///
/// Cloning is cheap (reference counted) and clones share graph identity.
#[derive(Clone)]
pub struct Tensor(pub(crate) Arc<Node>);

impl Tensor {
    fn build(data: Vec<f64>, shape: Vec<usize>, requires_grad: bool, grad_fn: Option<GradFn>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor(Arc::new(Node {
            id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
            shape,
            data,
            requires_grad,
            grad_fn,
        }))
    }

    /// Constant tensor (no gradient tracking).
    pub fn new(data: Vec<f64>, shape: &[usize]) -> Result<Self> {
        check_len(&data, shape)?;
        Ok(Self::build(data, shape.to_vec(), false, None))
    }

    /// Trainable leaf tensor.
    pub fn param(data: Vec<f64>, shape: &[usize]) -> Result<Self> {
        check_len(&data, shape)?;
        Ok(Self::build(data, shape.to_vec(), true, None))
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::build(vec![0.0; shape.iter().product()], shape.to_vec(), false, None)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        Self::build(vec![value; shape.iter().product()], shape.to_vec(), false, None)
    }

    pub fn scalar(value: f64) -> Self {
        Self::build(vec![value], vec![], false, None)
    }

    /// 1-D constant from a slice.
    pub fn vector(values: &[f64]) -> Self {
        Self::build(values.to_vec(), vec![values.len()], false, None)
    }

    pub(crate) fn from_op(data: Vec<f64>, shape: Vec<usize>, inputs: Vec<Tensor>, backward: BackwardFn) -> Self {
        if inputs.iter().any(Tensor::requires_grad) {
            Self::build(data, shape, true, Some(GradFn { inputs, backward }))
        } else {
            Self::build(data, shape, false, None)
        }
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

    pub fn data(&self) -> &[f64] {
        &self.0.data
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    pub(crate) fn id(&self) -> u64 {
        self.0.id
    }

    /// Value of a one-element tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(self.numel(), 1, "item() on tensor of shape {:?}", self.shape());
        self.0.data[0]
    }

    /// Same values, cut off from the graph.
    pub fn detach(&self) -> Tensor {
        Self::build(self.0.data.clone(), self.0.shape.clone(), false, None)
    }

    /// Same values as a fresh trainable leaf.
    pub fn to_param(&self) -> Tensor {
        Self::build(self.0.data.clone(), self.0.shape.clone(), true, None)
    }

    /// New leaf with the same shape and gradient flag but different values.
    pub fn with_data(&self, data: Vec<f64>) -> Result<Tensor> {
        check_len(&data, self.shape())?;
        Ok(Self::build(data, self.0.shape.clone(), self.requires_grad(), None))
    }

    pub fn is_finite(&self) -> bool {
        self.0.data.iter().all(|v| v.is_finite())
    }

    /// Graph identity (not value equality).
    pub fn same_node(&self, other: &Tensor) -> bool {
        Arc::ptr_eq(&self.0, &other.0)
    }
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let preview: Vec<f64> = self.data().iter().take(8).copied().collect();
        f.debug_struct("Tensor")
            .field("shape", &self.shape())
            .field("requires_grad", &self.requires_grad())
            .field("data", &preview)
            .finish()
    }
}

fn check_len(data: &[f64], shape: &[usize]) -> Result<()> {
    if shape.iter().product::<usize>() != data.len() {
        return Err(TensorError::DataLength {
            len: data.len(),
            shape: shape.to_vec(),
        });
    }
    Ok(())
}
