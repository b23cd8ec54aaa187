use std::fmt;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};

use super::ops::{forward, PrimitiveOp, LEAKY_SLOPE};
use super::Real;
use crate::error::{Error, Result};

static NEXT_ID: AtomicU64 = AtomicU64::new(1);

pub(crate) struct Node<T: Real> {
    pub(crate) op: PrimitiveOp,
    pub(crate) parents: Vec<Tensor<T>>,
}

pub(crate) struct Inner<T: Real> {
    pub(crate) id: u64,
    pub(crate) shape: Vec<usize>,
    pub(crate) data: Arc<[T]>,
    pub(crate) requires_grad: bool,
    pub(crate) node: Option<Node<T>>,
    pub(crate) grad: Mutex<Option<Vec<T>>>,
}

/// Reference-counted handle to an immutable array plus its graph node.
///
/// Cloning a `Tensor` clones the handle, not the data. Leaves created with
/// [`Tensor::param`] track gradients; results of [`forward`] track gradients
/// whenever any input does.
pub struct Tensor<T: Real = f32>(pub(crate) Arc<Inner<T>>);

impl<T: Real> Clone for Tensor<T> {
    fn clone(&self) -> Self {
        Tensor(Arc::clone(&self.0))
    }
}

impl<T: Real> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut d = f.debug_struct("Tensor");
        d.field("shape", &self.0.shape)
            .field("dtype", &T::NAME)
            .field("requires_grad", &self.0.requires_grad);
        if let Some(node) = &self.0.node {
            d.field("op", &node.op.name());
        }
        if self.numel() <= 8 {
            d.field("data", &&self.0.data[..]);
        }
        d.finish()
    }
}

fn check_shape(shape: &[usize], len: usize) -> Result<()> {
    if shape.is_empty() || shape.contains(&0) {
        return Err(Error::invalid(format!(
            "tensor extents must be positive, got {shape:?}"
        )));
    }
    let n: usize = shape.iter().product();
    if n != len {
        return Err(Error::invalid(format!(
            "shape {shape:?} needs {n} elements, got {len}"
        )));
    }
    Ok(())
}

impl<T: Real> Tensor<T> {
    pub(crate) fn from_parts(
        shape: Vec<usize>,
        data: Arc<[T]>,
        requires_grad: bool,
        node: Option<Node<T>>,
    ) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor(Arc::new(Inner {
            id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
            shape,
            data,
            requires_grad,
            node,
            grad: Mutex::new(None),
        }))
    }

    /// Constant tensor (no gradient tracking).
    pub fn new(shape: &[usize], data: Vec<T>) -> Result<Self> {
        check_shape(shape, data.len())?;
        Ok(Self::from_parts(shape.to_vec(), data.into(), false, None))
    }

    /// Trainable leaf tensor.
    pub fn param(shape: &[usize], data: Vec<T>) -> Result<Self> {
        check_shape(shape, data.len())?;
        Ok(Self::from_parts(shape.to_vec(), data.into(), true, None))
    }

    pub fn full(shape: &[usize], value: T) -> Result<Self> {
        let n = shape.iter().product();
        Self::new(shape, vec![value; n])
    }

    pub fn zeros(shape: &[usize]) -> Result<Self> {
        Self::full(shape, T::ZERO)
    }

    pub fn scalar(value: T) -> Self {
        Self::from_parts(vec![1], vec![value].into(), false, None)
    }

    pub fn from_f64_slice(shape: &[usize], data: &[f64]) -> Result<Self> {
        Self::new(shape, data.iter().map(|&v| T::from_f64(v)).collect())
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

    pub fn numel(&self) -> usize {
        self.0.data.len()
    }

    pub fn data(&self) -> &[T] {
        &self.0.data
    }

    pub fn to_vec(&self) -> Vec<T> {
        self.0.data.to_vec()
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.0.data.iter().map(|v| v.to_f64()).collect()
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    /// The primitive that produced this tensor, if it is a graph node.
    pub fn op(&self) -> Option<&PrimitiveOp> {
        self.0.node.as_ref().map(|n| &n.op)
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> Result<f64> {
        if self.numel() != 1 {
            return Err(Error::invalid(format!(
                "item() needs one element, tensor has shape {:?}",
                self.shape()
            )));
        }
        Ok(self.0.data[0].to_f64())
    }

    /// Accumulated gradient, if backward has reached this tensor.
    pub fn grad(&self) -> Option<Vec<T>> {
        self.0.grad.lock().expect("grad lock poisoned").clone()
    }

    pub fn zero_grad(&self) {
        *self.0.grad.lock().expect("grad lock poisoned") = None;
    }

    pub(crate) fn accumulate_grad(&self, g: Vec<T>) {
        let mut slot = self.0.grad.lock().expect("grad lock poisoned");
        match slot.as_mut() {
            Some(existing) => {
                for (e, v) in existing.iter_mut().zip(g) {
                    *e += v;
                }
            }
            None => *slot = Some(g),
        }
    }

    /// Same values, cut from the graph.
    pub fn detach(&self) -> Self {
        Self::from_parts(self.0.shape.clone(), Arc::clone(&self.0.data), false, None)
    }

    /// Same values as a fresh trainable leaf.
    pub fn to_param(&self) -> Self {
        Self::from_parts(self.0.shape.clone(), Arc::clone(&self.0.data), true, None)
    }

    /// Converts element type; the result is a leaf with the same tracking flag.
    pub fn cast<U: Real>(&self) -> Tensor<U> {
        let data: Vec<U> = self
            .0
            .data
            .iter()
            .map(|v| U::from_f64(v.to_f64()))
            .collect();
        Tensor::from_parts(
            self.0.shape.clone(),
            data.into(),
            self.0.requires_grad,
            None,
        )
    }

    /// Bitwise equality of shape and contents.
    pub fn bit_eq(&self, other: &Tensor<T>) -> bool {
        self.shape() == other.shape()
            && self
                .data()
                .iter()
                .zip(other.data())
                .all(|(a, b)| a.bits() == b.bits())
    }

    pub fn add(&self, rhs: &Tensor<T>) -> Result<Self> {
        forward(&PrimitiveOp::Add, &[self.clone(), rhs.clone()])
    }

    pub fn sub(&self, rhs: &Tensor<T>) -> Result<Self> {
        forward(&PrimitiveOp::Sub, &[self.clone(), rhs.clone()])
    }

    pub fn mul(&self, rhs: &Tensor<T>) -> Result<Self> {
        forward(&PrimitiveOp::Mul, &[self.clone(), rhs.clone()])
    }

    pub fn matmul(&self, rhs: &Tensor<T>) -> Result<Self> {
        forward(&PrimitiveOp::MatMul, &[self.clone(), rhs.clone()])
    }

    pub fn leaky_relu(&self) -> Result<Self> {
        forward(
            &PrimitiveOp::LeakyRelu { slope: LEAKY_SLOPE },
            &[self.clone()],
        )
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        forward(
            &PrimitiveOp::Reshape {
                shape: shape.to_vec(),
            },
            &[self.clone()],
        )
    }

    pub fn concat_channels(parts: &[Tensor<T>]) -> Result<Self> {
        forward(&PrimitiveOp::ConcatChannel, parts)
    }

    pub fn slice_channels(&self, start: usize, end: usize) -> Result<Self> {
        forward(&PrimitiveOp::SliceChannel { start, end }, &[self.clone()])
    }

    pub fn mean(&self) -> Result<Self> {
        forward(&PrimitiveOp::ReduceMean, &[self.clone()])
    }

    pub fn sum(&self) -> Result<Self> {
        forward(&PrimitiveOp::ReduceSum, &[self.clone()])
    }

    pub fn square(&self) -> Result<Self> {
        forward(&PrimitiveOp::Square, &[self.clone()])
    }

    pub fn sqrt(&self) -> Result<Self> {
        forward(&PrimitiveOp::Sqrt, &[self.clone()])
    }

    pub fn scale(&self, factor: f64) -> Result<Self> {
        forward(&PrimitiveOp::ScalarMul { factor }, &[self.clone()])
    }

    pub fn tanh(&self) -> Result<Self> {
        forward(&PrimitiveOp::Tanh, &[self.clone()])
    }

    /// `out[i] = self.flat[indices[i]]`, reshaped to `shape`.
    pub fn gather(&self, indices: Arc<[usize]>, shape: &[usize]) -> Result<Self> {
        forward(
            &PrimitiveOp::Gather {
                indices,
                shape: shape.to_vec(),
            },
            &[self.clone()],
        )
    }

    /// Size of the last axis.
    pub fn channels(&self) -> usize {
        *self.0.shape.last().expect("tensor has at least one axis")
    }
}
