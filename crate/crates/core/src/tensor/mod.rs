//! Minimal reverse-mode automatic differentiation over dense f64 tensors.
//!
//! Tensors are immutable after creation except for gradient accumulation
//! during a backward pass and in-place parameter updates by the optimizer
//! between batches. Everything is 64-bit: gradient checking against central
//! finite differences is the correctness backbone of this crate, and f32
//! noise would drown the comparisons.

mod adam;
pub mod check;
mod ops;
pub mod rng;

pub use adam::{Adam, AdamConfig};
pub use ops::{concat, embedding_lookup, stack_rows, weighted_cross_entropy};

use std::cell::{Ref, RefCell};
use std::collections::HashSet;
use std::fmt;
use std::rc::Rc;

/// Gradient callback: receives the node's accumulated output gradient and
/// the parent tensors, and deposits contributions into the parents.
type BackwardFn = Box<dyn Fn(&[f64], &[Tensor])>;

struct Inner {
    id: u64,
    shape: Vec<usize>,
    data: RefCell<Vec<f64>>,
    grad: RefCell<Option<Vec<f64>>>,
    requires_grad: bool,
    parents: Vec<Tensor>,
    backward_fn: Option<BackwardFn>,
}

/// Dense row-major f64 tensor participating in a computation graph.
///
/// Cloning is cheap (reference-counted handle). A tensor either is a leaf
/// (constant or trainable) or was produced by an operation, in which case it
/// keeps its parents alive for the backward pass.
#[derive(Clone)]
pub struct Tensor {
    inner: Rc<Inner>,
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

thread_local! {
    static NEXT_ID: std::cell::Cell<u64> = const { std::cell::Cell::new(0) };
}

fn next_id() -> u64 {
    NEXT_ID.with(|c| {
        let id = c.get();
        c.set(id + 1);
        id
    })
}

impl Tensor {
    fn build(
        shape: Vec<usize>,
        data: Vec<f64>,
        requires_grad: bool,
        parents: Vec<Tensor>,
        backward_fn: Option<BackwardFn>,
    ) -> Tensor {
        assert_eq!(
            numel(&shape),
            data.len(),
            "shape {:?} implies {} elements, data has {}",
            shape,
            numel(&shape),
            data.len()
        );
        Tensor {
            inner: Rc::new(Inner {
                id: next_id(),
                shape,
                data: RefCell::new(data),
                grad: RefCell::new(None),
                requires_grad,
                parents,
                backward_fn,
            }),
        }
    }

    /// Constant tensor; never receives gradients.
    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Tensor {
        Tensor::build(shape.to_vec(), data, false, Vec::new(), None)
    }

    /// Leaf tensor that accumulates gradients during backward passes.
    pub fn leaf(shape: &[usize], data: Vec<f64>) -> Tensor {
        Tensor::build(shape.to_vec(), data, true, Vec::new(), None)
    }

    pub fn zeros(shape: &[usize]) -> Tensor {
        Tensor::from_vec(shape, vec![0.0; numel(shape)])
    }

    pub fn scalar(value: f64) -> Tensor {
        Tensor::from_vec(&[1], vec![value])
    }

    /// Derived node. Prunes the graph when no parent needs gradients.
    pub(crate) fn from_op(
        shape: Vec<usize>,
        data: Vec<f64>,
        parents: Vec<Tensor>,
        backward_fn: BackwardFn,
    ) -> Tensor {
        let requires = parents.iter().any(|p| p.requires_grad());
        if requires {
            Tensor::build(shape, data, true, parents, Some(backward_fn))
        } else {
            Tensor::build(shape, data, false, Vec::new(), None)
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.inner.shape
    }

    pub fn ndim(&self) -> usize {
        self.inner.shape.len()
    }

    pub fn len(&self) -> usize {
        numel(&self.inner.shape)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn requires_grad(&self) -> bool {
        self.inner.requires_grad
    }

    /// Borrow of the underlying buffer. Keep the borrow short: the optimizer
    /// and finite-difference probes mutate the same buffer via `set_data`.
    pub fn data(&self) -> Ref<'_, Vec<f64>> {
        self.inner.data.borrow()
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.inner.data.borrow().clone()
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(
            self.len(),
            1,
            "item() on tensor of shape {:?}",
            self.shape()
        );
        self.inner.data.borrow()[0]
    }

    pub fn value_at(&self, idx: usize) -> f64 {
        self.inner.data.borrow()[idx]
    }

    /// Overwrite the buffer in place (optimizer updates, checkpoint loads).
    pub fn set_data(&self, data: &[f64]) {
        assert_eq!(
            data.len(),
            self.len(),
            "set_data length {} does not match shape {:?}",
            data.len(),
            self.shape()
        );
        self.inner.data.borrow_mut().copy_from_slice(data);
    }

    /// Overwrite a single element (finite-difference probing).
    pub fn set_value(&self, idx: usize, value: f64) {
        self.inner.data.borrow_mut()[idx] = value;
    }

    pub fn grad(&self) -> Option<Vec<f64>> {
        self.inner.grad.borrow().clone()
    }

    pub fn zero_grad(&self) {
        *self.inner.grad.borrow_mut() = None;
    }

    pub(crate) fn accumulate_grad(&self, contrib: &[f64]) {
        if !self.inner.requires_grad {
            return;
        }
        let mut slot = self.inner.grad.borrow_mut();
        match slot.as_mut() {
            Some(g) => {
                for (gi, ci) in g.iter_mut().zip(contrib) {
                    *gi += ci;
                }
            }
            None => {
                assert_eq!(contrib.len(), self.len());
                *slot = Some(contrib.to_vec());
            }
        }
    }

    fn id(&self) -> u64 {
        self.inner.id
    }

    /// Reverse-mode gradient propagation from a scalar output. After this
    /// returns, every reachable leaf with `requires_grad` holds its full
    /// gradient (accumulated on top of whatever was already there).
    pub fn backward(&self) {
        assert_eq!(
            self.len(),
            1,
            "backward() requires a scalar output, got shape {:?}",
            self.shape()
        );
        if !self.inner.requires_grad {
            return;
        }
        self.accumulate_grad(&[1.0]);
        for node in topological_order(self) {
            let grad = {
                let slot = node.inner.grad.borrow();
                match slot.as_ref() {
                    Some(g) => g.clone(),
                    None => continue, // no gradient reached this node
                }
            };
            if let Some(f) = &node.inner.backward_fn {
                f(&grad, &node.inner.parents);
            }
        }
    }
}

/// Nodes ordered so that every node appears before all of its parents.
fn topological_order(root: &Tensor) -> Vec<Tensor> {
    enum Frame {
        Enter(Tensor),
        Exit(Tensor),
    }
    let mut order = Vec::new();
    let mut visited: HashSet<u64> = HashSet::new();
    let mut stack = vec![Frame::Enter(root.clone())];
    while let Some(frame) = stack.pop() {
        match frame {
            Frame::Enter(t) => {
                if !visited.insert(t.id()) {
                    continue;
                }
                stack.push(Frame::Exit(t.clone()));
                for p in &t.inner.parents {
                    if p.requires_grad() && !visited.contains(&p.id()) {
                        stack.push(Frame::Enter(p.clone()));
                    }
                }
            }
            Frame::Exit(t) => order.push(t),
        }
    }
    order.reverse();
    order
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let data = self.inner.data.borrow();
        let preview: Vec<f64> = data.iter().take(8).copied().collect();
        f.debug_struct("Tensor")
            .field("shape", &self.inner.shape)
            .field("requires_grad", &self.inner.requires_grad)
            .field("data", &preview)
            .finish()
    }
}

/// Named trainable tensor. Names are unique within a model and double as
/// checkpoint keys.
#[derive(Clone)]
pub struct Parameter {
    pub name: String,
    pub tensor: Tensor,
    /// Rows (of a 2-D tensor) whose gradient is discarded and whose values
    /// the optimizer never touches, e.g. the PAD embedding row.
    pub frozen_rows: Vec<usize>,
}

impl Parameter {
    pub fn new(name: impl Into<String>, tensor: Tensor) -> Parameter {
        Parameter {
            name: name.into(),
            tensor,
            frozen_rows: Vec::new(),
        }
    }

    pub fn with_frozen_rows(mut self, rows: Vec<usize>) -> Parameter {
        self.frozen_rows = rows;
        self
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn leaf_grad_populated_after_backward() {
        let a = Tensor::leaf(&[2], vec![1.0, 2.0]);
        let b = Tensor::leaf(&[2], vec![3.0, 4.0]);
        let s = a.add(&b).sum();
        s.backward();
        assert_eq!(a.grad().unwrap(), vec![1.0, 1.0]);
        assert_eq!(b.grad().unwrap(), vec![1.0, 1.0]);
    }

    #[test]
    fn shared_node_accumulates_both_paths() {
        // y = x + x, dy/dx = 2
        let x = Tensor::leaf(&[1], vec![3.0]);
        let y = x.add(&x).sum();
        y.backward();
        assert_eq!(x.grad().unwrap(), vec![2.0]);
    }

    #[test]
    fn diamond_graph_orders_backward_correctly() {
        // z = (x*2) + (x*3); dz/dx = 5
        let x = Tensor::leaf(&[1], vec![1.5]);
        let a = x.scale(2.0);
        let b = x.scale(3.0);
        let z = a.add(&b).sum();
        z.backward();
        assert_eq!(x.grad().unwrap(), vec![5.0]);
    }

    #[test]
    fn constants_do_not_collect_grads() {
        let c = Tensor::from_vec(&[2], vec![1.0, 1.0]);
        let x = Tensor::leaf(&[2], vec![2.0, 2.0]);
        let s = c.add(&x).sum();
        s.backward();
        assert!(c.grad().is_none());
        assert_eq!(x.grad().unwrap(), vec![1.0, 1.0]);
    }

    #[test]
    fn rebuilt_graph_gives_identical_grads() {
        // No stale-state dependence: recomputing the same graph from the
        // same leaves reproduces the gradients bit for bit.
        let x = Tensor::leaf(&[3], vec![0.3, -1.2, 2.2]);
        let w = Tensor::leaf(&[3], vec![0.7, 0.1, -0.4]);
        let run = |x: &Tensor, w: &Tensor| {
            let h = x.relu().add(w);
            h.masked_softmax(None).sum()
        };
        run(&x, &w).backward();
        let gx1 = x.grad().unwrap();
        let gw1 = w.grad().unwrap();
        x.zero_grad();
        w.zero_grad();
        run(&x, &w).backward();
        assert_eq!(x.grad().unwrap(), gx1);
        assert_eq!(w.grad().unwrap(), gw1);
    }

    #[test]
    #[should_panic(expected = "scalar")]
    fn backward_rejects_non_scalar() {
        let x = Tensor::leaf(&[2], vec![1.0, 2.0]);
        x.backward();
    }
}
