//! Dense row-major tensors with reverse-mode automatic differentiation.
//!
//! A [`Tensor`] is an immutable value plus an optional lineage node recording
//! the primitive that produced it. Calling [`Tensor::backward`] on a scalar
//! walks the lineage in reverse topological order and accumulates
//! `d root / d leaf` into every reachable leaf that requires grad.
//!
//! Only leaves hold gradients. Intermediate gradients live in a scratch map
//! for the duration of one backward pass. The graph itself is owned by the
//! tensors and is released when the last handle to the root is dropped.

mod elementwise;
pub mod kink;
mod linalg;
mod reduce;
mod shape;

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign, SubAssign};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};

use num_traits::Float;

use crate::error::{Error, Result};

pub use elementwise::broadcast_shape;
pub(crate) use linalg::{gemm_acc, gemm_nt_acc, gemm_tn_acc};
pub use shape::concat;

/// Scalar element type. Implemented for `f32` (training) and `f64`
/// (verification).
pub trait Real:
    Float
    + Default
    + fmt::Debug
    + fmt::Display
    + Send
    + Sync
    + Sum
    + AddAssign
    + SubAssign
    + MulAssign
    + 'static
{
    const NAME: &'static str;

    fn from_f64(v: f64) -> Self;
    fn as_f64(self) -> f64;

    #[inline]
    fn from_usize(v: usize) -> Self {
        Self::from_f64(v as f64)
    }
}

impl Real for f32 {
    const NAME: &'static str = "f32";
    #[inline]
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Real for f64 {
    const NAME: &'static str = "f64";
    #[inline]
    fn from_f64(v: f64) -> Self {
        v
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self
    }
}

/// Backward rule: receives the output gradient and a mask of which parents
/// need a gradient, returns one optional gradient per parent.
pub(crate) type BackwardFn<T> = Box<dyn Fn(&[T], &[bool]) -> Vec<Option<Vec<T>>> + Send + Sync>;

struct Node<T: Real> {
    op: &'static str,
    parents: Vec<Tensor<T>>,
    backward: BackwardFn<T>,
}

struct Inner<T: Real> {
    id: u64,
    shape: Vec<usize>,
    data: Vec<T>,
    requires_grad: bool,
    grad: Mutex<Option<Vec<T>>>,
    node: Option<Node<T>>,
}

static NEXT_ID: AtomicU64 = AtomicU64::new(0);

fn next_id() -> u64 {
    NEXT_ID.fetch_add(1, Ordering::Relaxed)
}

/// Shared handle to an immutable tensor value.
pub struct Tensor<T: Real>(Arc<Inner<T>>);

impl<T: Real> Clone for Tensor<T> {
    fn clone(&self) -> Self {
        Tensor(Arc::clone(&self.0))
    }
}

impl<T: Real> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut s = f.debug_struct("Tensor");
        s.field("shape", &self.0.shape)
            .field("requires_grad", &self.0.requires_grad);
        if let Some(node) = &self.0.node {
            s.field("op", &node.op);
        }
        if self.0.data.len() <= 16 {
            s.field("data", &self.0.data);
        }
        s.finish()
    }
}

pub fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl<T: Real> Tensor<T> {
    fn build(data: Vec<T>, shape: Vec<usize>, requires_grad: bool, node: Option<Node<T>>) -> Self {
        debug_assert_eq!(numel(&shape), data.len());
        Tensor(Arc::new(Inner {
            id: next_id(),
            shape,
            data,
            requires_grad,
            grad: Mutex::new(None),
            node,
        }))
    }

    /// Constant (non-differentiable) tensor.
    pub fn new(data: Vec<T>, shape: &[usize]) -> Result<Self> {
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::invalid("tensor", format!("zero extent in shape {shape:?}")));
        }
        if numel(shape) != data.len() {
            return Err(Error::invalid(
                "tensor",
                format!("shape {shape:?} needs {} values, got {}", numel(shape), data.len()),
            ));
        }
        Ok(Self::build(data, shape.to_vec(), false, None))
    }

    /// Leaf tensor that accumulates gradients.
    pub fn param(data: Vec<T>, shape: &[usize]) -> Result<Self> {
        let t = Self::new(data, shape)?;
        Ok(t.into_leaf(true))
    }

    pub fn from_f64(data: &[f64], shape: &[usize]) -> Result<Self> {
        Self::new(data.iter().map(|&v| T::from_f64(v)).collect(), shape)
    }

    pub fn full(shape: &[usize], v: T) -> Self {
        Self::build(vec![v; numel(shape)], shape.to_vec(), false, None)
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, T::one())
    }

    pub fn scalar(v: T) -> Self {
        Self::full(&[1], v)
    }

    /// Fresh leaf with the same values, detached from any lineage.
    pub fn detach(&self) -> Self {
        Self::build(self.0.data.clone(), self.0.shape.clone(), false, None)
    }

    /// Fresh leaf with the same values and the given `requires_grad` flag.
    pub fn into_leaf(self, requires_grad: bool) -> Self {
        match Arc::try_unwrap(self.0) {
            Ok(inner) => Self::build(inner.data, inner.shape, requires_grad, None),
            Err(shared) => Self::build(shared.data.clone(), shared.shape.clone(), requires_grad, None),
        }
    }

    /// Records the output of a primitive. Lineage is kept only when some
    /// parent requires grad.
    pub(crate) fn from_op(
        op: &'static str,
        data: Vec<T>,
        shape: Vec<usize>,
        parents: Vec<Tensor<T>>,
        backward: BackwardFn<T>,
    ) -> Self {
        let requires_grad = parents.iter().any(|p| p.requires_grad());
        let node = requires_grad.then(|| Node {
            op,
            parents,
            backward,
        });
        Self::build(data, shape, requires_grad, node)
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
        self.0.data.clone()
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.0.data.iter().map(|v| v.as_f64()).collect()
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> T {
        self.0.data[0]
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    /// Name of the producing primitive, if lineage was recorded.
    pub fn op_name(&self) -> Option<&'static str> {
        self.0.node.as_ref().map(|n| n.op)
    }

    pub fn grad(&self) -> Option<Vec<T>> {
        self.0.grad.lock().expect("grad lock poisoned").clone()
    }

    pub fn zero_grad(&self) {
        *self.0.grad.lock().expect("grad lock poisoned") = None;
    }

    pub fn ptr_eq(&self, other: &Self) -> bool {
        Arc::ptr_eq(&self.0, &other.0)
    }

    /// Converts element type, producing a detached constant.
    pub fn cast<U: Real>(&self) -> Tensor<U> {
        let data = self.0.data.iter().map(|v| U::from_f64(v.as_f64())).collect();
        Tensor::build(data, self.0.shape.clone(), false, None)
    }

    fn accumulate_grad(&self, g: &[T]) {
        let mut slot = self.0.grad.lock().expect("grad lock poisoned");
        match slot.as_mut() {
            Some(acc) => acc.iter_mut().zip(g).for_each(|(a, &b)| *a += b),
            None => *slot = Some(g.to_vec()),
        }
    }

    /// Reverse-mode sweep from a scalar root. Leaf gradients are accumulated
    /// (`+=`), so calling this twice without [`Tensor::zero_grad`] doubles them.
    pub fn backward(&self) -> Result<()> {
        if self.numel() != 1 {
            return Err(Error::NonScalarRoot(self.shape().to_vec()));
        }
        if !self.requires_grad() {
            return Err(Error::NoGradRoot);
        }

        let order = self.topo_order();
        let mut grads: HashMap<u64, Vec<T>> = HashMap::with_capacity(order.len());
        grads.insert(self.id(), vec![T::one()]);

        for t in order.iter().rev() {
            let Some(g) = grads.remove(&t.id()) else {
                continue;
            };
            match &t.0.node {
                None => t.accumulate_grad(&g),
                Some(node) => {
                    let needs: Vec<bool> = node.parents.iter().map(|p| p.requires_grad()).collect();
                    let parent_grads = (node.backward)(&g, &needs);
                    debug_assert_eq!(parent_grads.len(), node.parents.len(), "{}", node.op);
                    for ((parent, pg), need) in node.parents.iter().zip(parent_grads).zip(needs) {
                        let Some(pg) = pg else { continue };
                        if !need {
                            continue;
                        }
                        debug_assert_eq!(pg.len(), parent.numel(), "{} grad size", node.op);
                        match grads.get_mut(&parent.id()) {
                            Some(acc) => acc.iter_mut().zip(&pg).for_each(|(a, &b)| *a += b),
                            None => {
                                grads.insert(parent.id(), pg);
                            }
                        }
                    }
                }
            }
        }
        Ok(())
    }

    /// Post-order over the grad-requiring subgraph (parents before children).
    fn topo_order(&self) -> Vec<Tensor<T>> {
        let mut order = Vec::new();
        let mut visited = HashSet::new();
        let mut stack: Vec<(Tensor<T>, usize)> = vec![(self.clone(), 0)];
        visited.insert(self.id());
        while let Some((t, child)) = stack.pop() {
            let parents = t.0.node.as_ref().map(|n| n.parents.as_slice()).unwrap_or(&[]);
            if child < parents.len() {
                let p = parents[child].clone();
                stack.push((t, child + 1));
                if p.requires_grad() && visited.insert(p.id()) {
                    stack.push((p, 0));
                }
            } else {
                order.push(t);
            }
        }
        order
    }
}

/// Row-major strides for a shape.
pub(crate) fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_sum_grad() {
        let x = Tensor::<f64>::param(vec![1.0, 2.0, 3.0], &[3]).unwrap();
        let y = x.mul(&x).unwrap().sum();
        y.backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![2.0, 4.0, 6.0]);
    }

    #[test]
    fn product_rule() {
        let x = Tensor::<f64>::param(vec![1.0, -2.0, 0.5], &[3]).unwrap();
        let y = Tensor::<f64>::param(vec![4.0, 5.0, -6.0], &[3]).unwrap();
        let root = x.mul(&y).unwrap().add(&x).unwrap().sum();
        root.backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![5.0, 6.0, -5.0]);
        assert_eq!(y.grad().unwrap(), vec![1.0, -2.0, 0.5]);
    }

    #[test]
    fn backward_twice_doubles() {
        let x = Tensor::<f64>::param(vec![0.3, -1.2], &[2]).unwrap();
        let root = x.sigmoid().mul(&x).unwrap().sum();
        root.backward().unwrap();
        let once = x.grad().unwrap();
        root.backward().unwrap();
        let twice = x.grad().unwrap();
        for (a, b) in once.iter().zip(&twice) {
            assert_eq!(2.0 * a, *b);
        }
    }

    #[test]
    fn backward_rejects_bad_roots() {
        let x = Tensor::<f64>::param(vec![1.0, 2.0], &[2]).unwrap();
        assert!(matches!(x.scale(2.0).backward(), Err(Error::NonScalarRoot(_))));
        let c = Tensor::<f64>::new(vec![1.0], &[1]).unwrap();
        assert!(matches!(c.backward(), Err(Error::NoGradRoot)));
    }

    #[test]
    fn constants_never_accumulate() {
        let x = Tensor::<f64>::param(vec![1.0, 2.0], &[2]).unwrap();
        let c = Tensor::<f64>::new(vec![3.0, 4.0], &[2]).unwrap();
        let root = x.mul(&c).unwrap().sum();
        root.backward().unwrap();
        assert!(c.grad().is_none());
        assert!(c.op_name().is_none());
    }

    #[test]
    fn lineage_only_when_needed() {
        let a = Tensor::<f64>::new(vec![1.0, 2.0], &[2]).unwrap();
        let b = Tensor::<f64>::new(vec![3.0, 4.0], &[2]).unwrap();
        let c = a.add(&b).unwrap();
        assert_eq!(c.data(), &[4.0, 6.0]);
        assert!(c.op_name().is_none());
        let p = Tensor::<f64>::param(vec![1.0, 1.0], &[2]).unwrap();
        assert_eq!(p.add(&b).unwrap().op_name(), Some("add"));
    }

    #[test]
    fn shared_subexpression_accumulates_over_paths() {
        // root = sum(x*x + x*x) reaches x through four edges.
        let x = Tensor::<f64>::param(vec![1.5, -0.5], &[2]).unwrap();
        let sq = x.mul(&x).unwrap();
        let root = sq.add(&sq).unwrap().sum();
        root.backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![6.0, -2.0]);
    }

    #[test]
    fn rejects_bad_construction() {
        assert!(Tensor::<f32>::new(vec![1.0; 5], &[2, 3]).is_err());
        assert!(Tensor::<f32>::new(vec![], &[0]).is_err());
    }
}
