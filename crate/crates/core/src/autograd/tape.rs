//! Define-by-run tape with reverse-mode gradient propagation.
//!
//! Every forward operation appends a node holding its output value, the ids
//! of its inputs and a backward rule. Node ids are assigned in creation order
//! and inputs must already exist, so the id order is a topological order and
//! the backward sweep simply walks ids from the loss downwards.

use std::fmt;
use std::rc::Rc;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(pub(crate) usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
pub struct Parameter {
    pub name: String,
    pub value: Tensor,
    pub grad: Tensor,
    pub trainable: bool,
}

/// Owns every learnable tensor of a model.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    params: Vec<Parameter>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor, trainable: bool) -> ParamId {
        let grad = Tensor::zeros(value.shape());
        self.params.push(Parameter {
            name: name.into(),
            value,
            grad,
            trainable,
        });
        ParamId(self.params.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Parameter {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter {
        &mut self.params[id.0]
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter> {
        self.params.iter_mut()
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.data_mut().fill(0.0);
        }
    }

    /// Total number of scalar values across all parameters.
    pub fn count(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }
}

/// Read-only view handed to backward rules.
pub struct BackwardCtx<'a> {
    pub inputs: &'a [&'a Tensor],
    pub output: &'a Tensor,
}

/// Maps (forward context, upstream gradient) to one gradient per input.
pub type BackwardFn = dyn Fn(&BackwardCtx<'_>, &Tensor) -> Vec<Tensor>;
pub type ForwardFn = dyn Fn(&[&Tensor]) -> Result<Tensor>;

struct Node {
    op: &'static str,
    value: Tensor,
    inputs: Vec<NodeId>,
    backward: Option<Rc<BackwardFn>>,
    param: Option<ParamId>,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl fmt::Debug for Tape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tape").field("nodes", &self.nodes.len()).finish()
    }
}

/// A user-registered operation: the forward runs exactly as given, and the
/// backward rule replaces the true derivative.
#[derive(Clone)]
pub struct CustomOp {
    name: &'static str,
    forward: Rc<ForwardFn>,
    backward: Rc<BackwardFn>,
}

impl fmt::Debug for CustomOp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "CustomOp({})", self.name)
    }
}

pub fn register_custom_backward(
    name: &'static str,
    forward: impl Fn(&[&Tensor]) -> Result<Tensor> + 'static,
    backward: impl Fn(&BackwardCtx<'_>, &Tensor) -> Vec<Tensor> + 'static,
) -> CustomOp {
    CustomOp {
        name,
        forward: Rc::new(forward),
        backward: Rc::new(backward),
    }
}

impl CustomOp {
    pub fn name(&self) -> &'static str {
        self.name
    }

    pub fn apply(&self, tape: &mut Tape, inputs: &[NodeId]) -> Result<NodeId> {
        let values: Vec<&Tensor> = inputs.iter().map(|&i| tape.value(i)).collect();
        let out = (self.forward)(&values)?;
        tape.push(self.name, out, inputs.to_vec(), self.backward.clone())
    }
}

/// Gradients of the loss with respect to every node reached by a backward sweep.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, id: NodeId) -> Option<&Tensor> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }

    /// Gradient at `id`, or zeros shaped like `like` when the node was unreached.
    pub fn get_or_zeros(&self, id: NodeId, like: &Tensor) -> Tensor {
        self.get(id).cloned().unwrap_or_else(|| Tensor::zeros(like.shape()))
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn op_name(&self, id: NodeId) -> &'static str {
        self.nodes[id.0].op
    }

    pub fn inputs(&self, id: NodeId) -> &[NodeId] {
        &self.nodes[id.0].inputs
    }

    /// Ids of all nodes produced by the op called `name`, in creation order.
    pub fn nodes_named(&self, name: &str) -> Vec<NodeId> {
        self.nodes
            .iter()
            .enumerate()
            .filter(|(_, n)| n.op == name)
            .map(|(i, _)| NodeId(i))
            .collect()
    }

    /// Constant input; gradients stop here.
    pub fn leaf(&mut self, value: Tensor) -> NodeId {
        self.nodes.push(Node {
            op: "leaf",
            value,
            inputs: Vec::new(),
            backward: None,
            param: None,
        });
        NodeId(self.nodes.len() - 1)
    }

    /// Leaf bound to a parameter; its gradient is accumulated into the store.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> NodeId {
        self.nodes.push(Node {
            op: "param",
            value: store.get(id).value.clone(),
            inputs: Vec::new(),
            backward: None,
            param: Some(id),
        });
        NodeId(self.nodes.len() - 1)
    }

    pub fn push(
        &mut self,
        op: &'static str,
        value: Tensor,
        inputs: Vec<NodeId>,
        backward: Rc<BackwardFn>,
    ) -> Result<NodeId> {
        let id = self.nodes.len();
        if let Some(bad) = inputs.iter().find(|i| i.0 >= id) {
            return Err(Error::internal(format!(
                "op {op} references node {} not yet on the tape",
                bad.0
            )));
        }
        if !value.is_finite() {
            return Err(Error::numerical(format!("non-finite output from op {op}")));
        }
        self.nodes.push(Node {
            op,
            value,
            inputs,
            backward: Some(backward),
            param: None,
        });
        Ok(NodeId(id))
    }

    /// Input gradients of one node for a given upstream gradient.
    pub fn vjp(&self, id: NodeId, upstream: &Tensor) -> Result<Vec<Tensor>> {
        let node = &self.nodes[id.0];
        let Some(rule) = &node.backward else {
            return Ok(Vec::new());
        };
        if upstream.shape() != node.value.shape() {
            return Err(Error::internal(format!(
                "upstream grad {:?} does not match output {:?} of {}",
                upstream.shape(),
                node.value.shape(),
                node.op
            )));
        }
        let inputs: Vec<&Tensor> = node.inputs.iter().map(|&i| &self.nodes[i.0].value).collect();
        let ctx = BackwardCtx {
            inputs: &inputs,
            output: &node.value,
        };
        let grads = rule(&ctx, upstream);
        if grads.len() != inputs.len() {
            return Err(Error::internal(format!(
                "{} produced {} grads for {} inputs",
                node.op,
                grads.len(),
                inputs.len()
            )));
        }
        for (g, x) in grads.iter().zip(&inputs) {
            if g.shape() != x.shape() {
                return Err(Error::internal(format!(
                    "{} produced grad {:?} for input {:?}",
                    node.op,
                    g.shape(),
                    x.shape()
                )));
            }
        }
        Ok(grads)
    }

    /// Propagates d(loss)/d(node) to every reachable node and accumulates
    /// parameter gradients into `params`. Repeated calls accumulate.
    pub fn backward(&self, loss: NodeId, params: &mut ParamStore) -> Result<Gradients> {
        let out = &self.nodes[loss.0].value;
        if out.numel() != 1 {
            return Err(Error::config(format!(
                "backward needs a scalar loss, got shape {:?}",
                out.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::full(out.shape(), 1.0));
        for idx in (0..=loss.0).rev() {
            let Some(upstream) = grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            if node.inputs.iter().any(|i| i.0 >= idx) {
                return Err(Error::internal(format!("cycle detected at node {idx}")));
            }
            let input_grads = self.vjp(NodeId(idx), &upstream)?;
            for (inp, g) in node.inputs.iter().zip(input_grads) {
                match &mut grads[inp.0] {
                    Some(acc) => acc.add_assign(&g)?,
                    slot @ None => *slot = Some(g),
                }
            }
            grads[idx] = Some(upstream);
        }
        for (idx, node) in self.nodes.iter().enumerate() {
            if let (Some(pid), Some(g)) = (node.param, &grads[idx]) {
                let p = params.get_mut(pid);
                if p.trainable {
                    p.grad.add_assign(g)?;
                }
            }
        }
        Ok(Gradients { grads })
    }
}
