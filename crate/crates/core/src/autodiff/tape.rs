use std::cell::{Cell, RefCell};
use std::rc::Rc;

use super::tensor::{Element, Tensor};
use crate::error::{Error, Result};

/// Computes input gradients from the output gradient.
///
/// Receives the upstream gradient and a flag per input saying whether that
/// input wants a gradient; returns one entry per input.
pub(crate) type BackwardFn<F> = Box<dyn Fn(&Tensor<F>, &[bool]) -> Vec<Option<Tensor<F>>>>;

struct Node<F: Element> {
    op: &'static str,
    value: Rc<Tensor<F>>,
    inputs: Vec<usize>,
    requires_grad: bool,
    backward: Option<BackwardFn<F>>,
}

/// Append-only record of a forward computation.
///
/// Node ids are append positions, so ids are already a topological order and
/// backward simply walks them in reverse. A tape supports exactly one
/// backward pass.
pub struct Tape<F: Element> {
    nodes: RefCell<Vec<Node<F>>>,
    consumed: Cell<bool>,
}

impl<F: Element> Default for Tape<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Element> Tape<F> {
    pub fn new() -> Self {
        Tape {
            nodes: RefCell::new(Vec::new()),
            consumed: Cell::new(false),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Registers an input tensor.
    pub fn leaf(&self, value: Tensor<F>, requires_grad: bool) -> Var<'_, F> {
        self.push("leaf", Rc::new(value), Vec::new(), requires_grad, None)
    }

    /// Registers a tensor that never receives a gradient.
    pub fn constant(&self, value: Tensor<F>) -> Var<'_, F> {
        self.leaf(value, false)
    }

    pub(crate) fn push(
        &self,
        op: &'static str,
        value: Rc<Tensor<F>>,
        inputs: Vec<usize>,
        requires_grad: bool,
        backward: Option<BackwardFn<F>>,
    ) -> Var<'_, F> {
        let mut nodes = self.nodes.borrow_mut();
        let id = nodes.len();
        nodes.push(Node {
            op,
            value,
            inputs,
            requires_grad,
            backward,
        });
        Var { tape: self, id }
    }

    /// Records the result of an op. The node requires a gradient iff any input does.
    pub(crate) fn record(
        &self,
        op: &'static str,
        value: Tensor<F>,
        inputs: &[Var<'_, F>],
        backward: BackwardFn<F>,
    ) -> Var<'_, F> {
        let requires_grad = inputs.iter().any(|v| v.requires_grad());
        let ids = inputs.iter().map(|v| v.id).collect();
        let backward = if requires_grad { Some(backward) } else { None };
        self.push(op, Rc::new(value), ids, requires_grad, backward)
    }

    pub(crate) fn value_of(&self, id: usize) -> Rc<Tensor<F>> {
        Rc::clone(&self.nodes.borrow()[id].value)
    }

    pub(crate) fn requires_grad_of(&self, id: usize) -> bool {
        self.nodes.borrow()[id].requires_grad
    }

    /// Reverse-mode sweep from a scalar root.
    pub fn backward(&self, root: Var<'_, F>) -> Result<Gradients<F>> {
        if !std::ptr::eq(root.tape, self) {
            return Err(Error::Autodiff("root belongs to a different tape".into()));
        }
        if self.consumed.get() {
            return Err(Error::Autodiff(
                "backward already ran on this tape; record a new tape".into(),
            ));
        }
        let nodes = self.nodes.borrow();
        let root_node = &nodes[root.id];
        if root_node.value.numel() != 1 {
            return Err(Error::Autodiff(format!(
                "backward needs a scalar root, got shape {:?}",
                root_node.value.shape()
            )));
        }
        self.consumed.set(true);

        let mut grads: Vec<Option<Tensor<F>>> = (0..nodes.len()).map(|_| None).collect();
        if !root_node.requires_grad {
            return Ok(Gradients { grads });
        }
        grads[root.id] = Some(Tensor::full(root_node.value.shape(), F::one()));

        for id in (0..=root.id).rev() {
            let node = &nodes[id];
            let Some(backward) = node.backward.as_ref() else {
                continue;
            };
            let Some(upstream) = grads[id].take() else {
                continue;
            };
            let needs: Vec<bool> = node.inputs.iter().map(|&i| nodes[i].requires_grad).collect();
            let input_grads = backward(&upstream, &needs);
            debug_assert_eq!(input_grads.len(), node.inputs.len(), "op {}", node.op);
            for ((&input, grad), &need) in node.inputs.iter().zip(input_grads).zip(&needs) {
                let (Some(grad), true) = (grad, need) else {
                    continue;
                };
                debug_assert_eq!(grad.shape(), nodes[input].value.shape(), "op {}", node.op);
                match grads[input].as_mut() {
                    Some(acc) => acc.add_assign(&grad),
                    None => grads[input] = Some(grad),
                }
            }
        }
        Ok(Gradients { grads })
    }
}

/// Handle to a value recorded on a [`Tape`].
pub struct Var<'t, F: Element> {
    pub(crate) tape: &'t Tape<F>,
    pub(crate) id: usize,
}

impl<F: Element> Clone for Var<'_, F> {
    fn clone(&self) -> Self {
        *self
    }
}

impl<F: Element> Copy for Var<'_, F> {}

impl<F: Element> std::fmt::Debug for Var<'_, F> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Var")
            .field("id", &self.id)
            .field("shape", &self.shape())
            .finish()
    }
}

impl<'t, F: Element> Var<'t, F> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape<F> {
        self.tape
    }

    pub fn value(&self) -> Rc<Tensor<F>> {
        self.tape.value_of(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.requires_grad_of(self.id)
    }
}

/// Gradients produced by one backward pass, indexed by node.
pub struct Gradients<F: Element> {
    grads: Vec<Option<Tensor<F>>>,
}

impl<F: Element> Gradients<F> {
    /// Gradient of a leaf, or `None` if it does not require one or was not reached.
    pub fn get(&self, var: Var<'_, F>) -> Option<&Tensor<F>> {
        self.grads.get(var.id).and_then(|g| g.as_ref())
    }

    /// Takes the gradient of a leaf out of the map.
    pub fn take(&mut self, var: Var<'_, F>) -> Option<Tensor<F>> {
        self.grads.get_mut(var.id).and_then(|g| g.take())
    }

    /// Gradient of a leaf, zeros if the leaf was not reached.
    pub fn wrt(&self, var: Var<'_, F>) -> Tensor<F> {
        self.get(var)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(&var.shape()))
    }
}
