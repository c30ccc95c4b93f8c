//! Dense tensors with tape-based reverse-mode differentiation.
//!
//! A [`Tensor`] is an immutable, reference-counted value. Operations that
//! involve at least one tensor with `requires_grad` record a backward closure
//! together with their inputs; [`Tensor::backward`] replays those closures in
//! reverse creation order. Node ids are allocated from a monotone counter, so
//! every input of a node has a smaller id than the node itself and sorting the
//! reachable set by descending id is a valid reverse topological order.
//!
//! Everything is generic over [`Real`], which is implemented for `f32`
//! (training) and `f64` (gradient checking).

mod conv;
mod norm;
mod ops;
mod optim;
mod params;
mod sparse;

use std::cell::{Cell, Ref, RefCell};
use std::collections::{HashMap, HashSet};
use std::fmt;
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign, SubAssign};
use std::rc::Rc;

use num_traits::{Float, ToPrimitive};

use crate::error::{Error, Result};

pub use conv::{conv3d, conv3d_transpose};
pub use norm::{batchnorm, BatchNormState, NormMode};
pub use ops::{concat, linear};
pub use optim::{Adam, AdamConfig, ParamGroup};
pub use params::{
    kaiming_uniform, load_checkpoint, save_checkpoint, Checkpoint, CheckpointManifest, ModelParams, TensorRecord,
    CHECKPOINT_MAGIC,
};
pub use sparse::{sparse_matmul, SparseMatrix};

/// Floating-point element type of a tensor.
pub trait Real:
    Float
    + ToPrimitive
    + Sum
    + AddAssign
    + SubAssign
    + MulAssign
    + Default
    + fmt::Debug
    + fmt::Display
    + Send
    + Sync
    + 'static
{
    const DTYPE: &'static str;
    const BYTES: usize;

    fn from_real(v: f64) -> Self;
    fn write_le(self, out: &mut Vec<u8>);
    fn read_le(bytes: &[u8]) -> Self;

    #[inline]
    fn as_f64(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }
}

impl Real for f32 {
    const DTYPE: &'static str = "f32";
    const BYTES: usize = 4;

    #[inline]
    fn from_real(v: f64) -> Self {
        v as f32
    }
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Self {
        f32::from_le_bytes([bytes[0], bytes[1], bytes[2], bytes[3]])
    }
}

impl Real for f64 {
    const DTYPE: &'static str = "f64";
    const BYTES: usize = 8;

    #[inline]
    fn from_real(v: f64) -> Self {
        v
    }
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Self {
        let mut b = [0u8; 8];
        b.copy_from_slice(&bytes[..8]);
        f64::from_le_bytes(b)
    }
}

/// Inputs handed to a backward closure.
pub struct BackwardCtx<'a, T: Real> {
    /// Gradient of the loss with respect to this node's output.
    pub grad: &'a [T],
    /// This node's forward value.
    pub out: &'a [T],
    pub inputs: &'a [Tensor<T>],
}

impl<T: Real> BackwardCtx<'_, T> {
    /// Whether input `i` needs a gradient at all.
    #[inline]
    pub fn needs(&self, i: usize) -> bool {
        self.inputs[i].requires_grad()
    }
}

type BackwardFn<T> = Box<dyn Fn(&BackwardCtx<'_, T>) -> Vec<Option<Vec<T>>>>;

struct GradFn<T: Real> {
    name: &'static str,
    inputs: Vec<Tensor<T>>,
    backward: BackwardFn<T>,
}

struct Node<T: Real> {
    id: u64,
    shape: Vec<usize>,
    data: Vec<T>,
    requires_grad: bool,
    grad: RefCell<Option<Vec<T>>>,
    grad_fn: Option<GradFn<T>>,
}

thread_local! {
    static NEXT_ID: Cell<u64> = const { Cell::new(0) };
}

fn next_id() -> u64 {
    NEXT_ID.with(|c| {
        let id = c.get();
        c.set(id + 1);
        id
    })
}

/// Reference-counted handle to an immutable n-dimensional array.
pub struct Tensor<T: Real>(Rc<Node<T>>);

impl<T: Real> Clone for Tensor<T> {
    fn clone(&self) -> Self {
        Tensor(Rc::clone(&self.0))
    }
}

impl<T: Real> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let op = self.0.grad_fn.as_ref().map(|g| g.name).unwrap_or("leaf");
        f.debug_struct("Tensor")
            .field("shape", &self.0.shape)
            .field("requires_grad", &self.0.requires_grad)
            .field("op", &op)
            .finish()
    }
}

pub(crate) fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl<T: Real> Tensor<T> {
    fn from_node(shape: Vec<usize>, data: Vec<T>, requires_grad: bool, grad_fn: Option<GradFn<T>>) -> Self {
        debug_assert_eq!(numel(&shape), data.len());
        Tensor(Rc::new(Node {
            id: next_id(),
            shape,
            data,
            requires_grad,
            grad: RefCell::new(None),
            grad_fn,
        }))
    }

    /// Constant tensor; fails if the extents do not cover `data` exactly.
    pub fn new(shape: &[usize], data: Vec<T>) -> Result<Self> {
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::invalid("tensor", format!("zero extent in shape {shape:?}")));
        }
        if numel(shape) != data.len() {
            return Err(Error::shape(
                "tensor",
                "data length",
                format!("shape {shape:?} needs {} values, got {}", numel(shape), data.len()),
            ));
        }
        Ok(Self::from_node(shape.to_vec(), data, false, None))
    }

    /// Trainable leaf tensor.
    pub fn parameter(shape: &[usize], data: Vec<T>) -> Result<Self> {
        let t = Self::new(shape, data)?;
        Ok(Self::from_node(t.0.shape.clone(), t.0.data.clone(), true, None))
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::from_node(shape.to_vec(), vec![T::zero(); numel(shape)], false, None)
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        Self::from_node(shape.to_vec(), vec![value; numel(shape)], false, None)
    }

    pub fn scalar(value: T) -> Self {
        Self::from_node(vec![1], vec![value], false, None)
    }

    /// Same values, detached from the graph, as a new leaf.
    pub fn detach(&self) -> Self {
        Self::from_node(self.0.shape.clone(), self.0.data.clone(), false, None)
    }

    /// Copy of this tensor as a fresh trainable leaf.
    pub fn to_parameter(&self) -> Self {
        Self::from_node(self.0.shape.clone(), self.0.data.clone(), true, None)
    }

    /// Record an operation. `backward` is only kept if some input requires a
    /// gradient; otherwise the result is a plain constant.
    pub fn from_op(
        name: &'static str,
        shape: Vec<usize>,
        data: Vec<T>,
        inputs: Vec<Tensor<T>>,
        backward: impl Fn(&BackwardCtx<'_, T>) -> Vec<Option<Vec<T>>> + 'static,
    ) -> Self {
        let requires_grad = inputs.iter().any(|t| t.requires_grad());
        let grad_fn = requires_grad.then(|| GradFn {
            name,
            inputs,
            backward: Box::new(backward),
        });
        Self::from_node(shape, data, requires_grad, grad_fn)
    }

    #[inline]
    pub fn shape(&self) -> &[usize] {
        &self.0.shape
    }

    #[inline]
    pub fn data(&self) -> &[T] {
        &self.0.data
    }

    #[inline]
    pub fn numel(&self) -> usize {
        self.0.data.len()
    }

    #[inline]
    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    pub fn id(&self) -> u64 {
        self.0.id
    }

    pub fn op_name(&self) -> Option<&'static str> {
        self.0.grad_fn.as_ref().map(|g| g.name)
    }

    pub fn grad(&self) -> Option<Ref<'_, Vec<T>>> {
        let g = self.0.grad.borrow();
        if g.is_some() {
            Some(Ref::map(g, |g| g.as_ref().unwrap()))
        } else {
            None
        }
    }

    pub fn grad_vec(&self) -> Option<Vec<T>> {
        self.0.grad.borrow().clone()
    }

    pub fn zero_grad(&self) {
        *self.0.grad.borrow_mut() = None;
    }

    /// Single value of a one-element tensor.
    pub fn item(&self) -> T {
        self.0.data[0]
    }

    pub fn to_vec(&self) -> Vec<T> {
        self.0.data.clone()
    }

    pub fn ptr_eq(&self, other: &Tensor<T>) -> bool {
        Rc::ptr_eq(&self.0, &other.0)
    }

    /// Reverse-mode sweep from a scalar loss. Gradients accumulate into every
    /// reachable tensor that requires one; call [`Tensor::zero_grad`] (or
    /// [`ModelParams::zero_grad`]) between steps.
    pub fn backward(&self) -> Result<()> {
        if self.numel() != 1 {
            return Err(Error::invalid(
                "backward",
                format!("loss must be scalar, got shape {:?}", self.shape()),
            ));
        }
        if !self.requires_grad() {
            return Ok(());
        }

        let mut reachable: Vec<Tensor<T>> = Vec::new();
        let mut seen: HashSet<u64> = HashSet::new();
        let mut stack = vec![self.clone()];
        seen.insert(self.id());
        while let Some(t) = stack.pop() {
            if let Some(gf) = &t.0.grad_fn {
                for inp in &gf.inputs {
                    if inp.requires_grad() && seen.insert(inp.id()) {
                        stack.push(inp.clone());
                    }
                }
            }
            reachable.push(t);
        }
        reachable.sort_by(|a, b| b.id().cmp(&a.id()));

        let mut pending: HashMap<u64, Vec<T>> = HashMap::new();
        pending.insert(self.id(), vec![T::one()]);

        for t in &reachable {
            let Some(g) = pending.remove(&t.id()) else {
                continue;
            };
            if let Some(gf) = &t.0.grad_fn {
                let ctx = BackwardCtx {
                    grad: &g,
                    out: &t.0.data,
                    inputs: &gf.inputs,
                };
                let input_grads = (gf.backward)(&ctx);
                debug_assert_eq!(input_grads.len(), gf.inputs.len(), "op {}", gf.name);
                for (inp, ig) in gf.inputs.iter().zip(input_grads) {
                    let Some(ig) = ig else { continue };
                    if !inp.requires_grad() {
                        continue;
                    }
                    debug_assert_eq!(ig.len(), inp.numel(), "op {} grad length", gf.name);
                    match pending.get_mut(&inp.id()) {
                        Some(acc) => acc.iter_mut().zip(&ig).for_each(|(a, &b)| *a += b),
                        None => {
                            pending.insert(inp.id(), ig);
                        }
                    }
                }
            }
            let mut slot = t.0.grad.borrow_mut();
            match slot.as_mut() {
                Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, &b)| *a += b),
                None => *slot = Some(g),
            }
        }
        Ok(())
    }
}

impl<T: Real> Drop for Node<T> {
    // Long chains (deformation blocks, training graphs) would otherwise drop
    // recursively and can overflow the stack.
    fn drop(&mut self) {
        let mut stack: Vec<Tensor<T>> = match self.grad_fn.take() {
            Some(gf) => gf.inputs,
            None => return,
        };
        while let Some(t) = stack.pop() {
            if let Ok(mut node) = Rc::try_unwrap(t.0) {
                if let Some(gf) = node.grad_fn.take() {
                    stack.extend(gf.inputs);
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_must_match_data() {
        assert!(Tensor::<f64>::new(&[2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::<f64>::new(&[2, 0], vec![]).is_err());
        let t = Tensor::<f64>::new(&[2, 3], vec![0.0; 6]).unwrap();
        assert_eq!(t.numel(), 6);
    }

    #[test]
    fn backward_requires_scalar() {
        let x = Tensor::<f64>::parameter(&[3], vec![1.0, 2.0, 3.0]).unwrap();
        assert!(x.backward().is_err());
    }

    #[test]
    fn sum_gives_ones() {
        let x = Tensor::<f64>::parameter(&[2, 2], vec![1.0, -2.0, 3.0, 0.5]).unwrap();
        x.sum().backward().unwrap();
        assert_eq!(x.grad_vec().unwrap(), vec![1.0; 4]);
    }

    #[test]
    fn sum_of_squares_gives_twice_x() {
        let x = Tensor::<f64>::parameter(&[3], vec![1.0, -2.0, 0.25]).unwrap();
        x.mul(&x).unwrap().sum().backward().unwrap();
        assert_eq!(x.grad_vec().unwrap(), vec![2.0, -4.0, 0.5]);
    }

    #[test]
    fn repeated_backward_accumulates() {
        let x = Tensor::<f64>::parameter(&[2], vec![1.0, 2.0]).unwrap();
        let loss = x.sum();
        loss.backward().unwrap();
        loss.backward().unwrap();
        assert_eq!(x.grad_vec().unwrap(), vec![2.0, 2.0]);
        x.zero_grad();
        assert!(x.grad().is_none());
    }

    #[test]
    fn every_reachable_requires_grad_node_gets_grad() {
        let x = Tensor::<f64>::parameter(&[2], vec![1.0, 2.0]).unwrap();
        let y = x.scale(3.0);
        let z = y.relu();
        z.sum().backward().unwrap();
        assert!(y.grad().is_some());
        assert!(z.grad().is_some());
        assert_eq!(x.grad_vec().unwrap(), vec![3.0, 3.0]);
    }

    #[test]
    fn deep_chain_drops_without_overflow() {
        let x = Tensor::<f32>::parameter(&[1], vec![1.0]).unwrap();
        let mut y = x.clone();
        for _ in 0..200_000 {
            y = y.scale(1.0);
        }
        drop(y);
    }
}
