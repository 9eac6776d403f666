//! Reverse-mode differentiation over an explicit tape.
//!
//! A [`Var`] is either a constant (no tape node) or a node on a [`Tape`].
//! Operations record a node only when at least one input is on a tape, so
//! inference with constant parameters allocates nothing beyond the values.

use std::cell::RefCell;
use std::collections::HashMap;
use std::fmt;
use std::rc::Rc;

use super::tensor::Tensor;
use crate::error::{invalid, Error, Result};

/// Computes input gradients from the output gradient. `needs[i]` tells
/// whether input `i` is on the tape; entries for other inputs may be `None`.
pub(crate) type BackwardFn = Box<dyn Fn(&Tensor, &[bool]) -> Vec<Option<Tensor>>>;

struct Node {
    name: &'static str,
    shape: Vec<usize>,
    inputs: Vec<Option<usize>>,
    backward: Option<BackwardFn>,
}

#[derive(Default)]
struct TapeInner {
    nodes: Vec<Node>,
    limit: Option<usize>,
    overflowed: bool,
}

/// Ordered record of differentiable operations. Cloning shares the tape.
#[derive(Clone, Default)]
pub struct Tape {
    inner: Rc<RefCell<TapeInner>>,
}

impl fmt::Debug for Tape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tape({} nodes)", self.len())
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// Tape that flags overflow once more than `limit` nodes are recorded.
    pub fn with_limit(limit: usize) -> Self {
        let t = Self::default();
        t.inner.borrow_mut().limit = Some(limit);
        t
    }

    pub fn len(&self) -> usize {
        self.inner.borrow().nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn overflowed(&self) -> bool {
        self.inner.borrow().overflowed
    }

    /// A trainable leaf.
    pub fn leaf(&self, value: Tensor) -> Var {
        let id = self.push(Node {
            name: "leaf",
            shape: value.shape().to_vec(),
            inputs: vec![],
            backward: None,
        });
        Var {
            value,
            node: Some(NodeRef {
                tape: self.clone(),
                id,
            }),
        }
    }

    fn push(&self, node: Node) -> usize {
        let mut inner = self.inner.borrow_mut();
        inner.nodes.push(node);
        if let Some(limit) = inner.limit {
            if inner.nodes.len() > limit {
                inner.overflowed = true;
            }
        }
        inner.nodes.len() - 1
    }

    fn same(&self, other: &Tape) -> bool {
        Rc::ptr_eq(&self.inner, &other.inner)
    }

    /// Names of recorded operations in recording order.
    pub fn op_names(&self) -> Vec<&'static str> {
        self.inner.borrow().nodes.iter().map(|n| n.name).collect()
    }
}

#[derive(Clone)]
struct NodeRef {
    tape: Tape,
    id: usize,
}

/// A tensor value, optionally tracked on a tape.
#[derive(Clone)]
pub struct Var {
    value: Tensor,
    node: Option<NodeRef>,
}

impl fmt::Debug for Var {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &self.node {
            Some(n) => write!(f, "Var#{}({:?})", n.id, self.value),
            None => write!(f, "Const({:?})", self.value),
        }
    }
}

impl From<Tensor> for Var {
    fn from(value: Tensor) -> Self {
        Var::constant(value)
    }
}

impl Var {
    pub fn constant(value: Tensor) -> Self {
        Self { value, node: None }
    }

    pub fn value(&self) -> &Tensor {
        &self.value
    }

    pub fn shape(&self) -> &[usize] {
        self.value.shape()
    }

    pub fn requires_grad(&self) -> bool {
        self.node.is_some()
    }

    pub fn tape(&self) -> Option<&Tape> {
        self.node.as_ref().map(|n| &n.tape)
    }

    pub(crate) fn id(&self) -> Option<usize> {
        self.node.as_ref().map(|n| n.id)
    }

    /// Same value, no gradient flows back through it.
    pub fn stop_grad(&self) -> Var {
        Var::constant(self.value.clone())
    }

    /// Record an operation. Returns a constant when no input is tracked.
    pub(crate) fn record(name: &'static str, value: Tensor, inputs: &[&Var], backward: BackwardFn) -> Var {
        let mut tape: Option<&Tape> = None;
        for v in inputs {
            if let Some(n) = &v.node {
                match tape {
                    None => tape = Some(&n.tape),
                    Some(t) => assert!(t.same(&n.tape), "{name}: inputs live on different tapes"),
                }
            }
        }
        let Some(tape) = tape else {
            return Var::constant(value);
        };
        let id = tape.push(Node {
            name,
            shape: value.shape().to_vec(),
            inputs: inputs.iter().map(|v| v.id()).collect(),
            backward: Some(backward),
        });
        Var {
            value,
            node: Some(NodeRef {
                tape: tape.clone(),
                id,
            }),
        }
    }
}

/// Gradients of a loss with respect to the leaves of its tape.
#[derive(Default)]
pub struct Gradients {
    by_node: HashMap<usize, Tensor>,
}

impl Gradients {
    pub fn get(&self, v: &Var) -> Option<&Tensor> {
        v.id().and_then(|id| self.by_node.get(&id))
    }

    pub fn len(&self) -> usize {
        self.by_node.len()
    }

    pub fn is_empty(&self) -> bool {
        self.by_node.is_empty()
    }
}

fn accumulate(slot: &mut Option<Vec<f32>>, g: &Tensor) {
    match slot {
        Some(acc) => {
            for (a, &x) in acc.iter_mut().zip(g.data()) {
                *a += x;
            }
        }
        None => *slot = Some(g.to_vec()),
    }
}

/// Backpropagate from a scalar loss. Every leaf that influences the loss
/// receives the sum of its path gradients.
pub fn backward(loss: &Var) -> Result<Gradients> {
    if loss.value.numel() != 1 {
        return Err(Error::NonScalarLoss(loss.shape().to_vec()));
    }
    let Some(root) = &loss.node else {
        return Err(invalid("backward", "loss is not connected to any trainable value"));
    };
    let inner = root.tape.inner.borrow();
    let mut grads: Vec<Option<Vec<f32>>> = vec![None; root.id + 1];
    grads[root.id] = Some(vec![1.0]);
    let mut out = Gradients::default();
    for id in (0..=root.id).rev() {
        let Some(g) = grads[id].take() else { continue };
        let node = &inner.nodes[id];
        let Some(backward) = &node.backward else {
            out.by_node.insert(id, Tensor::raw(node.shape.clone(), g));
            continue;
        };
        let needs: Vec<bool> = node.inputs.iter().map(|i| i.is_some()).collect();
        let g = Tensor::raw(node.shape.clone(), g);
        let input_grads = backward(&g, &needs);
        for (input, ig) in node.inputs.iter().zip(input_grads) {
            if let (Some(i), Some(ig)) = (input, ig) {
                accumulate(&mut grads[*i], &ig);
            }
        }
    }
    Ok(out)
}

impl Gradients {
    /// Gradient for `v` shaped like `v`, or zeros when `v` did not influence the loss.
    pub fn wrt(&self, v: &Var) -> Tensor {
        match self.get(v) {
            Some(g) => g.clone(),
            None => Tensor::zeros(v.shape()),
        }
    }
}
