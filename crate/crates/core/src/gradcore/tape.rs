//! Reverse-mode differentiation tape.
//!
//! Every forward operation appends a node holding its output value, the
//! handles of its inputs and a [`Backward`] rule. Nodes are only ever
//! appended, so the node vector is already in topological order and the
//! backward pass is a single reverse sweep.

use std::sync::atomic::{AtomicU64, Ordering};

use indexmap::IndexMap;

use super::params::ParamStore;
use super::tensor::Tensor;
use crate::error::{Error, Result};

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var {
    tape: u64,
    idx: usize,
}

impl Var {
    pub fn index(&self) -> usize {
        self.idx
    }
}

/// Gradient rule of one recorded operation.
pub trait Backward {
    fn name(&self) -> &'static str;

    /// Returns the gradient for each input given the gradient of the output.
    /// Inputs with `needs[i] == false` may be answered with `None`.
    fn backward(&self, inputs: &[&Tensor], output: &Tensor, grad_out: &[f64], needs: &[bool]) -> Vec<Option<Vec<f64>>>;
}

struct Node {
    value: Tensor,
    requires_grad: bool,
    inputs: Vec<Var>,
    op: Option<Box<dyn Backward>>,
}

pub struct Tape {
    id: u64,
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    params: IndexMap<String, Var>,
    backward_done: bool,
    fault: Option<String>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
            grads: Vec::new(),
            params: IndexMap::new(),
            backward_done: false,
            fault: None,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records an input value. `requires_grad` leaves receive gradients.
    pub fn leaf(&mut self, mut value: Tensor, requires_grad: bool) -> Var {
        value.grad = None;
        value.requires_grad = requires_grad;
        self.push(value, requires_grad, Vec::new(), None)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    /// Binds parameter `name` from `store` as a gradient-carrying leaf.
    /// Repeated lookups of the same name return the same handle, so a
    /// parameter used twice accumulates both contributions.
    pub fn param(&mut self, store: &ParamStore, name: &str) -> Result<Var> {
        if let Some(&v) = self.params.get(name) {
            return Ok(v);
        }
        let t = store
            .get(name)
            .ok_or_else(|| Error::UnknownParameter(name.to_string()))?;
        let v = self.leaf(t.clone(), true);
        self.params.insert(name.to_string(), v);
        Ok(v)
    }

    /// Same value, cut from the graph.
    pub fn detach(&mut self, v: Var) -> Result<Var> {
        let value = self.value(v)?.clone();
        Ok(self.constant(value))
    }

    pub fn value(&self, v: Var) -> Result<&Tensor> {
        self.check(v)?;
        Ok(&self.nodes[v.idx].value)
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes.get(v.idx).is_some_and(|n| n.requires_grad)
    }

    /// Gradient of the last backward pass with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        if v.tape != self.id {
            return None;
        }
        self.grads.get(v.idx)?.as_deref()
    }

    /// Parameter handles bound on this tape, in binding order.
    pub fn bound_params(&self) -> impl Iterator<Item = (&str, Var)> {
        self.params.iter().map(|(k, v)| (k.as_str(), *v))
    }

    /// Records an operation output. Used by every op implementation.
    pub fn record(&mut self, value: Tensor, inputs: &[Var], op: Box<dyn Backward>) -> Result<Var> {
        for &v in inputs {
            self.check(v)?;
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.idx].requires_grad);
        Ok(self.push(value, requires_grad, inputs.to_vec(), Some(op)))
    }

    fn push(&mut self, value: Tensor, requires_grad: bool, inputs: Vec<Var>, op: Option<Box<dyn Backward>>) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad,
            inputs,
            op,
        });
        Var {
            tape: self.id,
            idx: self.nodes.len() - 1,
        }
    }

    pub(crate) fn check(&self, v: Var) -> Result<()> {
        if v.tape != self.id || v.idx >= self.nodes.len() {
            return Err(Error::Tape(format!("handle {v:?} does not belong to this tape")));
        }
        Ok(())
    }

    /// Scales the gradients produced by every op named `op_name`, so that a
    /// gradient check can be shown to catch a broken rule.
    #[doc(hidden)]
    pub fn inject_fault(&mut self, op_name: &str) {
        self.fault = Some(op_name.to_string());
    }

    /// Clears gradients so that `backward` may run again.
    pub fn reset_grads(&mut self) {
        self.grads.clear();
        self.backward_done = false;
    }

    /// Propagates d(loss)/d(node) to every node that requires a gradient.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        self.check(loss)?;
        if self.backward_done {
            return Err(Error::Tape(
                "backward already ran on this tape; call reset_grads first".into(),
            ));
        }
        let node = &self.nodes[loss.idx];
        if !node.value.shape().is_scalar() {
            return Err(Error::Tape(format!("loss must be scalar, got {}", node.value.shape())));
        }
        if !node.requires_grad {
            return Err(Error::Tape("loss is detached from every gradient leaf".into()));
        }

        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.idx] = Some(vec![1.0]);
        for idx in (0..=loss.idx).rev() {
            let Some(grad_out) = grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            if let Some(op) = &node.op {
                let needs: Vec<bool> = node.inputs.iter().map(|v| self.nodes[v.idx].requires_grad).collect();
                if needs.iter().any(|&n| n) {
                    let inputs: Vec<&Tensor> = node.inputs.iter().map(|v| &self.nodes[v.idx].value).collect();
                    let mut input_grads = op.backward(&inputs, &node.value, &grad_out, &needs);
                    if self.fault.as_deref() == Some(op.name()) {
                        for g in input_grads.iter_mut().flatten() {
                            g.iter_mut().for_each(|x| *x *= 1.1);
                        }
                    }
                    for ((input, g), need) in node.inputs.iter().zip(input_grads).zip(needs) {
                        let (Some(g), true) = (g, need) else {
                            continue;
                        };
                        debug_assert_eq!(g.len(), self.nodes[input.idx].value.numel());
                        match &mut grads[input.idx] {
                            Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                            slot @ None => *slot = Some(g),
                        }
                    }
                }
            }
            grads[idx] = Some(grad_out);
        }
        self.grads = grads;
        self.backward_done = true;
        Ok(())
    }
}
