//! Dense tensors on a reverse-mode differentiation graph.
//!
//! A [`Tensor`] is a row-major buffer plus a node in an acyclic graph.
//! Operations record a backward step; [`Tensor::backward`] walks the graph in
//! reverse topological order and accumulates `d(loss)/d(node)` into the `grad`
//! buffer of every `requires_grad` ancestor. Repeated backward calls without a
//! reset keep accumulating; the training loop zeroes parameter grads each step.
//!
//! Graphs are built and differentiated by one logical thread (node ids come
//! from a thread-local counter). Buffers of non-leaf tensors are never
//! mutated once created; leaf data is only rewritten by the optimizer, between
//! graphs.

use std::cell::{Cell, RefCell};
use std::collections::{HashMap, HashSet};
use std::rc::Rc;

use crate::error::{Error, Result};
use crate::numerics::Scalar;

thread_local! {
    static NEXT_ID: Cell<u64> = const { Cell::new(0) };
    static GRAD_ENABLED: Cell<bool> = const { Cell::new(true) };
}

fn next_id() -> u64 {
    NEXT_ID.with(|c| {
        let id = c.get();
        c.set(id + 1);
        id
    })
}

/// Runs `f` with gradient recording disabled; ops executed inside produce
/// constant tensors with no parents. Used on pure inference paths.
pub fn no_grad<R>(f: impl FnOnce() -> R) -> R {
    let prev = GRAD_ENABLED.with(|c| c.replace(false));
    let out = f();
    GRAD_ENABLED.with(|c| c.set(prev));
    out
}

pub(crate) fn grad_enabled() -> bool {
    GRAD_ENABLED.with(|c| c.get())
}

/// Backward rule attached to a non-leaf node.
pub(crate) trait BackwardStep<S: Scalar> {
    /// Given `d(loss)/d(node)`, accumulate contributions into the parents.
    fn step(&self, grad_out: &[S], node: &Inner<S>, sink: &mut GradSink<S>);
    fn name(&self) -> &'static str;
}

pub(crate) struct Inner<S: Scalar> {
    id: u64,
    shape: Vec<usize>,
    pub(crate) data: RefCell<Vec<S>>,
    grad: RefCell<Option<Vec<S>>>,
    requires_grad: bool,
    pub(crate) parents: Vec<Tensor<S>>,
    backward: Option<Box<dyn BackwardStep<S>>>,
}

/// Dense n-dimensional array participating in the differentiation graph.
/// Cloning is cheap (shared node).
#[derive(Clone)]
pub struct Tensor<S: Scalar>(pub(crate) Rc<Inner<S>>);

impl<S: Scalar> Tensor<S> {
    fn new_inner(
        shape: Vec<usize>,
        data: Vec<S>,
        requires_grad: bool,
        parents: Vec<Tensor<S>>,
        backward: Option<Box<dyn BackwardStep<S>>>,
    ) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor(Rc::new(Inner {
            id: next_id(),
            shape,
            data: RefCell::new(data),
            grad: RefCell::new(None),
            requires_grad,
            parents,
            backward,
        }))
    }

    /// Constant leaf (no gradient).
    pub fn from_vec(shape: Vec<usize>, data: Vec<S>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::Contract(format!(
                "tensor shape {:?} implies {} elements, got {}",
                shape,
                numel,
                data.len()
            )));
        }
        Ok(Self::new_inner(shape, data, false, Vec::new(), None))
    }

    /// Trainable leaf: participates in backward, owns a grad buffer.
    pub fn param(shape: Vec<usize>, data: Vec<S>) -> Result<Self> {
        let t = Self::from_vec(shape, data)?;
        // Re-tag as requiring grad; safe because the node is fresh.
        Ok(Self::new_inner(
            t.0.shape.clone(),
            t.0.data.borrow().clone(),
            true,
            Vec::new(),
            None,
        ))
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel = shape.iter().product();
        Self::new_inner(shape, vec![S::zero(); numel], false, Vec::new(), None)
    }

    pub fn full(shape: Vec<usize>, v: S) -> Self {
        let numel = shape.iter().product();
        Self::new_inner(shape, vec![v; numel], false, Vec::new(), None)
    }

    /// Rank-0 constant.
    pub fn scalar(v: S) -> Self {
        Self::new_inner(Vec::new(), vec![v], false, Vec::new(), None)
    }

    /// Node produced by an op. Gradient recording is dropped when disabled
    /// (see [`no_grad`]) or when no parent requires grad.
    pub(crate) fn from_op(
        shape: Vec<usize>,
        data: Vec<S>,
        parents: Vec<Tensor<S>>,
        backward: Box<dyn BackwardStep<S>>,
    ) -> Self {
        let track = grad_enabled() && parents.iter().any(|p| p.0.requires_grad);
        if track {
            Self::new_inner(shape, data, true, parents, Some(backward))
        } else {
            Self::new_inner(shape, data, false, Vec::new(), None)
        }
    }

    pub fn id(&self) -> u64 {
        self.0.id
    }

    pub fn shape(&self) -> &[usize] {
        &self.0.shape
    }

    pub fn numel(&self) -> usize {
        self.0.shape.iter().product()
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    /// True for graph leaves (constants and parameters).
    pub fn is_leaf(&self) -> bool {
        self.0.backward.is_none()
    }

    /// Copy of the underlying buffer.
    pub fn to_vec(&self) -> Vec<S> {
        self.0.data.borrow().clone()
    }

    /// Value of a rank-0 / single-element tensor.
    pub fn item(&self) -> S {
        debug_assert_eq!(self.numel(), 1);
        self.0.data.borrow()[0]
    }

    pub fn value_at(&self, i: usize) -> S {
        self.0.data.borrow()[i]
    }

    /// Rows/cols of a rank-2 tensor.
    pub fn dims2(&self) -> Result<(usize, usize)> {
        match self.0.shape.as_slice() {
            [r, c] => Ok((*r, *c)),
            _ => Err(Error::Contract(format!(
                "expected a rank-2 tensor, got shape {:?}",
                self.0.shape
            ))),
        }
    }

    /// Overwrites leaf data (optimizer update path).
    pub fn set_data(&self, new: &[S]) {
        debug_assert!(self.is_leaf(), "only leaf data may be rewritten");
        debug_assert_eq!(new.len(), self.numel());
        self.0.data.borrow_mut().copy_from_slice(new);
    }

    /// Applies `f` to the leaf buffer in place.
    pub fn update_data(&self, f: impl FnOnce(&mut [S])) {
        debug_assert!(self.is_leaf());
        f(&mut self.0.data.borrow_mut());
    }

    /// Copy of the accumulated gradient, if any backward pass reached this node.
    pub fn grad(&self) -> Option<Vec<S>> {
        self.0.grad.borrow().clone()
    }

    pub fn zero_grad(&self) {
        *self.0.grad.borrow_mut() = None;
    }

    /// Constant leaf sharing this tensor's current values (gradient barrier).
    pub fn detach(&self) -> Tensor<S> {
        Self::new_inner(
            self.0.shape.clone(),
            self.0.data.borrow().clone(),
            false,
            Vec::new(),
            None,
        )
    }

    pub fn all_finite(&self) -> bool {
        self.0.data.borrow().iter().all(|v| v.is_finite())
    }

    fn accumulate_grad(&self, g: &[S]) {
        let mut slot = self.0.grad.borrow_mut();
        match slot.as_mut() {
            Some(buf) => {
                for (b, &v) in buf.iter_mut().zip(g) {
                    *b += v;
                }
            }
            None => *slot = Some(g.to_vec()),
        }
    }

    /// Reverse-mode sweep from a scalar loss. Populates `grad` on every
    /// `requires_grad` ancestor (accumulating into whatever is already there).
    pub fn backward(&self) -> Result<()> {
        if self.numel() != 1 {
            return Err(Error::Contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.0.shape
            )));
        }
        if !self.0.requires_grad {
            return Ok(()); // fully detached graph: nothing to populate
        }
        let order = topo_order(self);
        let mut sink = GradSink::new();
        sink.seed(self.0.id);
        // `order` lists parents before children; walk from the loss down.
        for node in order.iter().rev() {
            let Some(g) = sink.take(node.0.id) else {
                continue;
            };
            if let Some(op) = &node.0.backward {
                op.step(&g, &node.0, &mut sink);
            }
            node.accumulate_grad(&g);
        }
        Ok(())
    }
}

impl<S: Scalar> std::fmt::Debug for Tensor<S> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Tensor")
            .field("id", &self.0.id)
            .field("shape", &self.0.shape)
            .field("requires_grad", &self.0.requires_grad)
            .finish()
    }
}

/// Post-order over `requires_grad` ancestors; deterministic (parent order).
fn topo_order<S: Scalar>(root: &Tensor<S>) -> Vec<Tensor<S>> {
    enum Visit<S: Scalar> {
        Enter(Tensor<S>),
        Exit(Tensor<S>),
    }
    let mut order = Vec::new();
    let mut visited: HashSet<u64> = HashSet::new();
    let mut stack = vec![Visit::Enter(root.clone())];
    while let Some(v) = stack.pop() {
        match v {
            Visit::Enter(t) => {
                if !visited.insert(t.0.id) {
                    continue;
                }
                stack.push(Visit::Exit(t.clone()));
                for p in t.0.parents.iter().rev() {
                    if p.0.requires_grad && !visited.contains(&p.0.id) {
                        stack.push(Visit::Enter(p.clone()));
                    }
                }
            }
            Visit::Exit(t) => order.push(t),
        }
    }
    order
}

/// Per-sweep gradient accumulator keyed by node id. Only ever accessed by
/// key, so map iteration order cannot leak into the arithmetic.
pub(crate) struct GradSink<S: Scalar> {
    slots: HashMap<u64, Vec<S>>,
}

impl<S: Scalar> GradSink<S> {
    fn new() -> Self {
        GradSink {
            slots: HashMap::new(),
        }
    }

    fn seed(&mut self, id: u64) {
        self.slots.insert(id, vec![S::one()]);
    }

    fn take(&mut self, id: u64) -> Option<Vec<S>> {
        self.slots.remove(&id)
    }

    /// Mutable gradient slot for `t`, or None when no gradient is required.
    pub(crate) fn slot(&mut self, t: &Tensor<S>) -> Option<&mut [S]> {
        if !t.0.requires_grad {
            return None;
        }
        Some(
            self.slots
                .entry(t.0.id)
                .or_insert_with(|| vec![S::zero(); t.numel()])
                .as_mut_slice(),
        )
    }
}
