use std::cell::RefCell;
use std::collections::HashMap;
use std::fmt;
use std::rc::Rc;

use super::ops::Op;
use super::{ParamId, Parameter, Real, Tensor};
use crate::error::{Error, Result};

pub(crate) struct Node<T> {
    pub shape: Vec<usize>,
    pub value: Rc<Vec<T>>,
    pub op: Op,
    pub requires_grad: bool,
    /// Accumulated gradient; populated on leaves only.
    pub grad: Option<Vec<T>>,
}

#[derive(Default)]
pub(crate) struct Inner<T> {
    pub nodes: Vec<Node<T>>,
    params: HashMap<ParamId, usize>,
}

/// An append-only record of operations. Nodes are pushed after their
/// parents, so reverse insertion order is a valid reverse topological order.
///
/// A tape is single-threaded; run independent tapes on separate threads.
pub struct Tape<T> {
    pub(crate) inner: Rc<RefCell<Inner<T>>>,
}

impl<T> Clone for Tape<T> {
    fn clone(&self) -> Self {
        Self {
            inner: Rc::clone(&self.inner),
        }
    }
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// A value on a [`Tape`].
pub struct Var<T> {
    pub(crate) tape: Tape<T>,
    pub(crate) id: usize,
    pub(crate) shape: Vec<usize>,
}

impl<T> Clone for Var<T> {
    fn clone(&self) -> Self {
        Self {
            tape: self.tape.clone(),
            id: self.id,
            shape: self.shape.clone(),
        }
    }
}

impl<T> fmt::Debug for Var<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Var")
            .field("id", &self.id)
            .field("shape", &self.shape)
            .finish()
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self {
            inner: Rc::new(RefCell::new(Inner {
                nodes: Vec::new(),
                params: HashMap::new(),
            })),
        }
    }

    pub fn len(&self) -> usize {
        self.inner.borrow().nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub(crate) fn push(
        &self,
        shape: Vec<usize>,
        value: Vec<T>,
        op: Op,
        requires_grad: bool,
    ) -> Var<T> {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        let op = if requires_grad { op } else { Op::Leaf };
        let mut inner = self.inner.borrow_mut();
        let id = inner.nodes.len();
        inner.nodes.push(Node {
            shape: shape.clone(),
            value: Rc::new(value),
            op,
            requires_grad,
            grad: None,
        });
        Var {
            tape: self.clone(),
            id,
            shape,
        }
    }

    pub fn leaf(&self, tensor: Tensor<T>, requires_grad: bool) -> Var<T> {
        let shape = tensor.shape().to_vec();
        self.push(shape, tensor.into_data(), Op::Leaf, requires_grad)
    }

    /// A leaf that receives gradients.
    pub fn var(&self, tensor: Tensor<T>) -> Var<T> {
        self.leaf(tensor, true)
    }

    pub fn constant(&self, tensor: Tensor<T>) -> Var<T> {
        self.leaf(tensor, false)
    }

    pub fn scalar(&self, value: T) -> Var<T> {
        self.constant(Tensor::scalar(value))
    }

    /// Bind a trainable parameter. Binding the same parameter twice yields
    /// the same leaf, so fan-out gradients accumulate on one node.
    pub fn param(&self, p: &Parameter<T>) -> Var<T> {
        if let Some(&id) = self.inner.borrow().params.get(&p.id()) {
            return Var {
                tape: self.clone(),
                id,
                shape: p.tensor.shape().to_vec(),
            };
        }
        let v = self.var(p.tensor.clone());
        self.inner.borrow_mut().params.insert(p.id(), v.id);
        v
    }

    /// Bind a parameter as a constant: used for the network that is not
    /// being updated in the current phase.
    pub fn frozen(&self, p: &Parameter<T>) -> Var<T> {
        self.constant(p.tensor.clone())
    }

    /// Accumulated gradient of a bound parameter, if it received any.
    pub fn param_grad(&self, p: &Parameter<T>) -> Option<Tensor<T>> {
        let inner = self.inner.borrow();
        let &id = inner.params.get(&p.id())?;
        let node = &inner.nodes[id];
        node.grad
            .as_ref()
            .map(|g| Tensor::new(node.shape.clone(), g.clone()).expect("grad shape"))
    }

    pub fn zero_grad(&self) {
        for node in self.inner.borrow_mut().nodes.iter_mut() {
            node.grad = None;
        }
    }

    /// Reverse-mode sweep from a scalar `loss`. Gradients of every
    /// `requires_grad` leaf reachable from `loss` are accumulated (added to
    /// whatever a previous sweep left there).
    pub fn backward(&self, loss: &Var<T>) -> Result<()> {
        if loss.shape.iter().product::<usize>() != 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                loss.shape
            )));
        }
        let mut inner = self.inner.borrow_mut();
        if !inner.nodes[loss.id].requires_grad {
            return Ok(());
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; loss.id + 1];
        grads[loss.id] = Some(vec![T::one()]);
        let mut leaf_grads = Vec::new();
        {
            let nodes = &inner.nodes;
            for id in (0..=loss.id).rev() {
                let Some(g) = grads[id].take() else { continue };
                let node = &nodes[id];
                if let Op::Leaf = node.op {
                    leaf_grads.push((id, g));
                    continue;
                }
                node.op.backward(nodes, node, &g, &mut grads);
            }
        }
        for (id, g) in leaf_grads {
            let node = &mut inner.nodes[id];
            match node.grad.as_mut() {
                Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, &b)| *a = *a + b),
                None => node.grad = Some(g),
            }
        }
        Ok(())
    }
}

impl<T: Real> Var<T> {
    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn tape(&self) -> &Tape<T> {
        &self.tape
    }

    pub(crate) fn data(&self) -> Rc<Vec<T>> {
        Rc::clone(&self.tape.inner.borrow().nodes[self.id].value)
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.inner.borrow().nodes[self.id].requires_grad
    }

    pub fn value(&self) -> Tensor<T> {
        Tensor::new(self.shape.clone(), self.data().as_ref().clone()).expect("node shape")
    }

    pub fn all_finite(&self) -> bool {
        self.data().iter().all(|v| v.is_finite())
    }

    pub fn to_vec(&self) -> Vec<T> {
        self.data().as_ref().clone()
    }

    /// The single element of a scalar.
    pub fn item(&self) -> T {
        let d = self.data();
        debug_assert_eq!(d.len(), 1);
        d[0]
    }

    /// Accumulated gradient (leaves only).
    pub fn grad(&self) -> Option<Tensor<T>> {
        let inner = self.tape.inner.borrow();
        let node = &inner.nodes[self.id];
        node.grad
            .as_ref()
            .map(|g| Tensor::new(node.shape.clone(), g.clone()).expect("grad shape"))
    }

    /// Same value, cut from the graph.
    pub fn detach(&self) -> Var<T> {
        self.tape.constant(self.value())
    }
}

/// Add `src` into an optional gradient slot.
pub(crate) fn accumulate<T: Real>(slot: &mut Option<Vec<T>>, src: Vec<T>) {
    match slot {
        Some(acc) => acc.iter_mut().zip(&src).for_each(|(a, &b)| *a = *a + b),
        None => *slot = Some(src),
    }
}
