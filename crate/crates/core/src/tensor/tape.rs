use std::cell::RefCell;
use std::fmt;
use std::rc::Rc;

use super::{Result, Scalar, Tensor, TensorError};

/// Vector-Jacobian product of one recorded op.
///
/// Receives the gradient of the op's output and a mask telling which inputs
/// need a gradient; returns one entry per input (`None` where not needed).
pub type BackwardFn<T> = Box<dyn Fn(&Tensor<T>, &[bool]) -> Vec<Option<Tensor<T>>>>;

struct Node<T> {
    value: Rc<Tensor<T>>,
    requires_grad: bool,
    parents: Vec<usize>,
    backward: Option<BackwardFn<T>>,
    grad: Option<Tensor<T>>,
}

/// Linear record of a forward computation.
///
/// Nodes are appended in execution order, so every op's inputs precede it
/// and a single reverse sweep is a valid topological traversal.
pub struct Tape<T: Scalar> {
    nodes: RefCell<Vec<Node<T>>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> fmt::Debug for Tape<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tape").field("nodes", &self.len()).finish()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// A differentiable leaf (parameter or input whose gradient is wanted).
    pub fn leaf(&self, value: Tensor<T>) -> Var<'_, T> {
        self.insert(Rc::new(value), true, Vec::new(), None)
    }

    /// A constant: never receives a gradient and stops propagation.
    pub fn constant(&self, value: Tensor<T>) -> Var<'_, T> {
        self.insert(Rc::new(value), false, Vec::new(), None)
    }

    /// Records an op with a caller-supplied backward rule.
    ///
    /// The output requires a gradient iff any input does; otherwise the
    /// backward rule is dropped.
    pub fn custom<'t>(
        &'t self,
        op: &'static str,
        inputs: &[Var<'t, T>],
        value: impl Into<Rc<Tensor<T>>>,
        backward: BackwardFn<T>,
    ) -> Result<Var<'t, T>> {
        for v in inputs {
            self.check_owner(v)?;
        }
        let value = value.into();
        if !value.is_finite() {
            return Err(TensorError::NonFinite { op });
        }
        let requires_grad = inputs.iter().any(|v| v.requires_grad());
        let parents = inputs.iter().map(|v| v.id).collect();
        let backward = requires_grad.then_some(backward);
        Ok(self.insert(value, requires_grad, parents, backward))
    }

    fn insert(
        &self,
        value: Rc<Tensor<T>>,
        requires_grad: bool,
        parents: Vec<usize>,
        backward: Option<BackwardFn<T>>,
    ) -> Var<'_, T> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            requires_grad,
            parents,
            backward,
            grad: None,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    pub(crate) fn check_owner(&self, v: &Var<'_, T>) -> Result<()> {
        if std::ptr::eq(self, v.tape) {
            Ok(())
        } else {
            Err(TensorError::TapeMismatch)
        }
    }

    /// Reverse sweep from a scalar loss. Leaf gradients from a previous call
    /// are replaced; within one sweep, contributions from every use of a
    /// tensor are summed.
    pub fn backward(&self, loss: Var<'_, T>) -> Result<()> {
        self.check_owner(&loss)?;
        let mut nodes = self.nodes.borrow_mut();
        let root_shape = nodes[loss.id].value.shape().to_vec();
        if root_shape.iter().product::<usize>() != 1 {
            return Err(TensorError::NotScalar(root_shape));
        }
        for n in nodes.iter_mut() {
            n.grad = None;
        }
        if !nodes[loss.id].requires_grad {
            return Ok(());
        }

        let mut pending: Vec<Option<Tensor<T>>> = Vec::new();
        pending.resize_with(loss.id + 1, || None);
        pending[loss.id] = Some(Tensor::ones(&root_shape));
        let mut leaf_grads = Vec::new();

        for id in (0..=loss.id).rev() {
            let Some(grad) = pending[id].take() else {
                continue;
            };
            let node = &nodes[id];
            let Some(backward) = node.backward.as_ref() else {
                if node.parents.is_empty() && node.requires_grad {
                    leaf_grads.push((id, grad));
                }
                continue;
            };
            let needs: Vec<bool> = node.parents.iter().map(|&p| nodes[p].requires_grad).collect();
            let parent_grads = backward(&grad, &needs);
            debug_assert_eq!(parent_grads.len(), node.parents.len());
            for (&p, g) in node.parents.iter().zip(parent_grads) {
                let Some(g) = g else { continue };
                if !nodes[p].requires_grad {
                    continue;
                }
                debug_assert_eq!(g.shape(), nodes[p].value.shape(), "grad shape for node {p}");
                match &mut pending[p] {
                    Some(acc) => {
                        for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                            *a = *a + *b;
                        }
                    }
                    slot @ None => *slot = Some(g),
                }
            }
        }
        for (id, g) in leaf_grads {
            nodes[id].grad = Some(g);
        }
        Ok(())
    }

    fn value_of(&self, id: usize) -> Rc<Tensor<T>> {
        Rc::clone(&self.nodes.borrow()[id].value)
    }
}

/// Handle to a tensor recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t, T: Scalar> {
    pub(crate) tape: &'t Tape<T>,
    pub(crate) id: usize,
}

impl<T: Scalar> fmt::Debug for Var<'_, T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Var")
            .field("id", &self.id)
            .field("shape", &self.shape())
            .finish()
    }
}

impl<'t, T: Scalar> Var<'t, T> {
    pub fn tape(&self) -> &'t Tape<T> {
        self.tape
    }

    pub fn id(&self) -> usize {
        self.id
    }

    pub fn value(&self) -> Rc<Tensor<T>> {
        self.tape.value_of(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.nodes.borrow()[self.id].requires_grad
    }

    /// Gradient of the last `backward` call, for differentiable leaves.
    pub fn grad(&self) -> Option<Tensor<T>> {
        self.tape.nodes.borrow()[self.id].grad.clone()
    }

    /// Scalar value of a one-element variable.
    pub fn item(&self) -> T {
        self.value().item()
    }
}
