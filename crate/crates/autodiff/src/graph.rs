//! The recording tape and the `Var` handle that network code composes.
//!
//! A [`Graph`] records every primitive applied to its variables together
//! with whatever the primitive needs for its backward pass. Calling
//! [`Graph::backward`] walks the records in exact reverse order, once.

use std::cell::{Cell, RefCell};
use std::collections::HashMap;
use std::rc::Rc;

use crate::{AutodiffError, ParamId, ParamStore, Real, Tensor};

/// Backward rule of one recorded primitive.
pub(crate) trait BackwardOp<R: Real> {
    /// Gradients w.r.t. each input, in input order. Entries for inputs with
    /// `needs[i] == false` may be `None`.
    fn backward(&self, grad: &Tensor<R>, needs: &[bool]) -> Vec<Option<Tensor<R>>>;
}

struct Node<R: Real> {
    value: Rc<Tensor<R>>,
    inputs: Vec<usize>,
    op: Option<Box<dyn BackwardOp<R>>>,
    requires_grad: bool,
}

/// Computation tape. Confined to one thread; build a fresh one per step.
pub struct Graph<R: Real> {
    nodes: RefCell<Vec<Node<R>>>,
    params: RefCell<HashMap<ParamId, usize>>,
    fault: RefCell<Option<AutodiffError>>,
    consumed: Cell<bool>,
}

impl<R: Real> Default for Graph<R> {
    fn default() -> Self {
        Self::new()
    }
}

impl<R: Real> Graph<R> {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            params: RefCell::new(HashMap::new()),
            fault: RefCell::new(None),
            consumed: Cell::new(false),
        }
    }

    /// Number of recorded nodes (leaves included).
    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// A value that never receives a gradient.
    pub fn constant(&self, value: Tensor<R>) -> Var<'_, R> {
        self.leaf(value, false)
    }

    /// A leaf that accumulates a gradient.
    pub fn variable(&self, value: Tensor<R>) -> Var<'_, R> {
        self.leaf(value, true)
    }

    fn leaf(&self, value: Tensor<R>, requires_grad: bool) -> Var<'_, R> {
        let id = self.record("leaf", value, Vec::new(), None, requires_grad);
        Var { graph: self, id }
    }

    /// Binds a parameter as a gradient-carrying leaf. Repeated calls for the
    /// same id return the same variable.
    pub fn param(&self, store: &ParamStore<R>, id: ParamId) -> Var<'_, R> {
        if let Some(&node) = self.params.borrow().get(&id) {
            return Var {
                graph: self,
                id: node,
            };
        }
        let v = self.variable(store.get(id).clone());
        self.params.borrow_mut().insert(id, v.id);
        v
    }

    /// First non-finite primitive output seen on this tape, if any.
    pub fn fault(&self) -> Option<AutodiffError> {
        self.fault.borrow().clone()
    }

    pub(crate) fn value_of(&self, id: usize) -> Rc<Tensor<R>> {
        Rc::clone(&self.nodes.borrow()[id].value)
    }

    pub(crate) fn requires_grad(&self, id: usize) -> bool {
        self.nodes.borrow()[id].requires_grad
    }

    /// Whether any of `inputs` needs a gradient, i.e. whether an op must save
    /// state for backward.
    pub(crate) fn tracks(&self, inputs: &[Var<'_, R>]) -> bool {
        let nodes = self.nodes.borrow();
        inputs.iter().any(|v| nodes[v.id].requires_grad)
    }

    pub(crate) fn push(
        &self,
        name: &'static str,
        value: Tensor<R>,
        inputs: &[Var<'_, R>],
        op: Option<Box<dyn BackwardOp<R>>>,
    ) -> Var<'_, R> {
        let ids: Vec<usize> = inputs.iter().map(|v| v.id).collect();
        let requires_grad = op.is_some() && self.tracks(inputs);
        let op = if requires_grad { op } else { None };
        let id = self.record(name, value, ids, op, requires_grad);
        Var { graph: self, id }
    }

    fn record(
        &self,
        name: &'static str,
        value: Tensor<R>,
        inputs: Vec<usize>,
        op: Option<Box<dyn BackwardOp<R>>>,
        requires_grad: bool,
    ) -> usize {
        if !value.all_finite() {
            let mut fault = self.fault.borrow_mut();
            if fault.is_none() {
                *fault = Some(AutodiffError::NumericFault { op: name });
            }
        }
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Rc::new(value),
            inputs,
            op,
            requires_grad,
        });
        nodes.len() - 1
    }

    /// Reverse pass from a scalar `loss`. Allowed once per tape.
    pub fn backward(&self, loss: Var<'_, R>) -> Result<Gradients<R>, AutodiffError> {
        if self.consumed.replace(true) {
            return Err(AutodiffError::TapeConsumed);
        }
        if let Some(f) = self.fault() {
            return Err(f);
        }
        let nodes = self.nodes.borrow();
        let root = &nodes[loss.id];
        if root.value.numel() != 1 {
            return Err(AutodiffError::NonScalarLoss(root.value.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor<R>>> = (0..nodes.len()).map(|_| None).collect();
        grads[loss.id] = Some(Tensor::full(root.value.shape().to_vec(), R::ONE));

        for id in (0..=loss.id).rev() {
            let node = &nodes[id];
            let Some(op) = node.op.as_ref() else {
                continue;
            };
            let Some(g) = grads[id].take() else {
                continue;
            };
            let needs: Vec<bool> = node
                .inputs
                .iter()
                .map(|&i| nodes[i].requires_grad)
                .collect();
            let input_grads = op.backward(&g, &needs);
            debug_assert_eq!(input_grads.len(), node.inputs.len());
            for ((&input, ig), need) in node.inputs.iter().zip(input_grads).zip(needs) {
                let (Some(ig), true) = (ig, need) else {
                    continue;
                };
                match &mut grads[input] {
                    Some(acc) => acc.add_assign(&ig),
                    slot => *slot = Some(ig),
                }
            }
            // Interior gradients are not kept; only leaves are reported.
            grads[id] = None;
        }
        for (id, g) in grads.iter().enumerate() {
            if let Some(g) = g {
                if !g.all_finite() {
                    return Err(AutodiffError::NonFiniteGradient { node: id });
                }
            }
        }
        Ok(Gradients {
            grads,
            params: self.params.borrow().clone(),
        })
    }
}

/// Leaf gradients produced by [`Graph::backward`].
pub struct Gradients<R> {
    grads: Vec<Option<Tensor<R>>>,
    params: HashMap<ParamId, usize>,
}

impl<R: Real> Gradients<R> {
    /// Gradient of a leaf variable (`None` if it did not influence the loss).
    pub fn of(&self, var: Var<'_, R>) -> Option<&Tensor<R>> {
        self.grads.get(var.id).and_then(Option::as_ref)
    }

    pub fn param(&self, id: ParamId) -> Option<&Tensor<R>> {
        self.params
            .get(&id)
            .and_then(|&node| self.grads[node].as_ref())
    }

    /// Every bound parameter that received a gradient.
    pub fn params(&self) -> impl Iterator<Item = (ParamId, &Tensor<R>)> {
        self.params
            .iter()
            .filter_map(|(&p, &node)| self.grads[node].as_ref().map(|g| (p, g)))
    }
}

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy)]
pub struct Var<'g, R: Real> {
    pub(crate) graph: &'g Graph<R>,
    pub(crate) id: usize,
}

impl<'g, R: Real> Var<'g, R> {
    pub fn graph(&self) -> &'g Graph<R> {
        self.graph
    }

    pub fn id(&self) -> usize {
        self.id
    }

    pub fn value(&self) -> Rc<Tensor<R>> {
        self.graph.value_of(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    /// Scalar value of a single-element variable.
    pub fn item(&self) -> R {
        self.value().item()
    }

    pub fn requires_grad(&self) -> bool {
        self.graph.requires_grad(self.id)
    }

    /// Same value, cut from the tape (stop-gradient).
    pub fn detach(&self) -> Var<'g, R> {
        self.graph.constant((*self.value()).clone())
    }
}

impl<R: Real> std::fmt::Debug for Var<'_, R> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Var")
            .field("id", &self.id)
            .field("shape", &self.shape())
            .finish()
    }
}
