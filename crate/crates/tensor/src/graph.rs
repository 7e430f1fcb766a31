//! Recorded computation graph with reverse-mode differentiation.
//!
//! Every forward operation appends a node holding its output value and a
//! boxed [`Operator`] that knows how to map an output gradient back onto its
//! inputs. Node indices only ever refer backwards, so the recording order is
//! already a topological order and `backward` is a single reverse sweep.

use std::collections::{BTreeMap, HashMap};

use crate::error::{Result, TensorError};
use crate::params::{ParamId, ParamStore};
use crate::tensor::{Shape, Tensor};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// The backward half of a recorded operation.
pub trait Operator {
    fn name(&self) -> &'static str;

    /// Returns one gradient per input. Entries for inputs with `needs[i] ==
    /// false` may be `None`.
    fn backward(
        &self,
        inputs: &[&Tensor],
        output: &Tensor,
        grad: &Tensor,
        needs: &[bool],
    ) -> Result<Vec<Option<Tensor>>>;
}

enum NodeKind {
    Input(Tensor),
    Param(ParamId),
    Op {
        op: Box<dyn Operator>,
        inputs: Vec<Var>,
        value: Tensor,
    },
}

struct Node {
    kind: NodeKind,
    requires_grad: bool,
}

/// Output of a backward sweep.
#[derive(Debug, Default)]
pub struct Gradients {
    params: BTreeMap<ParamId, Tensor>,
    leaves: BTreeMap<Var, Tensor>,
}

impl Gradients {
    pub fn params(&self) -> impl Iterator<Item = (ParamId, &Tensor)> {
        self.params.iter().map(|(k, v)| (*k, v))
    }

    pub fn param(&self, id: ParamId) -> Option<&Tensor> {
        self.params.get(&id)
    }

    /// Gradient of an input created with [`Graph::input_with_grad`].
    pub fn leaf(&self, var: Var) -> Option<&Tensor> {
        self.leaves.get(&var)
    }
}

pub struct Graph<'p> {
    store: Option<&'p ParamStore>,
    nodes: Vec<Node>,
    param_vars: HashMap<ParamId, Var>,
}

impl Default for Graph<'_> {
    fn default() -> Self {
        Self::without_params()
    }
}

impl<'p> Graph<'p> {
    pub fn new(store: &'p ParamStore) -> Self {
        Graph {
            store: Some(store),
            nodes: Vec::new(),
            param_vars: HashMap::new(),
        }
    }

    pub fn without_params() -> Self {
        Graph {
            store: None,
            nodes: Vec::new(),
            param_vars: HashMap::new(),
        }
    }

    pub fn store(&self) -> Option<&'p ParamStore> {
        self.store
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Constant input; no gradient is tracked for it.
    pub fn input(&mut self, value: Tensor) -> Var {
        self.push(NodeKind::Input(value), false)
    }

    /// Input whose gradient is reported by [`Gradients::leaf`].
    pub fn input_with_grad(&mut self, value: Tensor) -> Var {
        self.push(NodeKind::Input(value), true)
    }

    /// Leaf referring to a stored parameter. Repeated calls return the same node.
    pub fn param(&mut self, id: ParamId) -> Result<Var> {
        if let Some(v) = self.param_vars.get(&id) {
            return Ok(*v);
        }
        let store = self
            .store
            .ok_or_else(|| TensorError::Graph("graph has no parameter store".into()))?;
        if id.0 >= store.len() {
            return Err(TensorError::Graph(format!("parameter id {} out of range", id.0)));
        }
        let trainable = store.get(id).trainable;
        let v = self.push(NodeKind::Param(id), trainable);
        self.param_vars.insert(id, v);
        Ok(v)
    }

    pub fn param_named(&mut self, name: &str) -> Result<Var> {
        let store = self
            .store
            .ok_or_else(|| TensorError::Graph("graph has no parameter store".into()))?;
        let id = store.id(name)?;
        self.param(id)
    }

    pub fn value(&self, var: Var) -> &Tensor {
        match &self.nodes[var.0].kind {
            NodeKind::Input(t) => t,
            NodeKind::Op { value, .. } => value,
            NodeKind::Param(id) => &self.store.expect("param node without store").get(*id).value,
        }
    }

    pub fn shape(&self, var: Var) -> Shape {
        self.value(var).shape()
    }

    pub fn requires_grad(&self, var: Var) -> bool {
        self.nodes[var.0].requires_grad
    }

    /// Appends an operation node whose forward value has already been computed.
    pub fn record(&mut self, op: impl Operator + 'static, inputs: &[Var], value: Tensor) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.push(
            NodeKind::Op {
                op: Box::new(op),
                inputs: inputs.to_vec(),
                value,
            },
            requires_grad,
        )
    }

    fn push(&mut self, kind: NodeKind, requires_grad: bool) -> Var {
        self.nodes.push(Node { kind, requires_grad });
        Var(self.nodes.len() - 1)
    }

    /// Reverse sweep from `output`, seeded with `seed` (same shape as the output).
    pub fn backward(&self, output: Var, seed: Tensor) -> Result<Gradients> {
        if output.0 >= self.nodes.len() {
            return Err(TensorError::Graph(format!("node {} does not exist", output.0)));
        }
        let out_shape = self.shape(output);
        if seed.shape() != out_shape {
            return Err(TensorError::ShapeMismatch {
                op: "backward seed",
                expected: out_shape,
                actual: seed.shape(),
            });
        }
        let mut grads: Vec<Option<Tensor>> = Vec::with_capacity(output.0 + 1);
        grads.resize_with(output.0 + 1, || None);
        grads[output.0] = Some(seed);
        let mut result = Gradients::default();

        for i in (0..=output.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            match &node.kind {
                NodeKind::Input(_) => {
                    result.leaves.insert(Var(i), g);
                }
                NodeKind::Param(id) => {
                    result.params.insert(*id, g);
                }
                NodeKind::Op { op, inputs, value } => {
                    let needs: Vec<bool> = inputs.iter().map(|v| self.nodes[v.0].requires_grad).collect();
                    if !needs.iter().any(|&b| b) {
                        continue;
                    }
                    let in_vals: Vec<&Tensor> = inputs.iter().map(|v| self.value(*v)).collect();
                    let in_grads = op.backward(&in_vals, value, &g, &needs)?;
                    if in_grads.len() != inputs.len() {
                        return Err(TensorError::Graph(format!(
                            "{} returned {} gradients for {} inputs",
                            op.name(),
                            in_grads.len(),
                            inputs.len()
                        )));
                    }
                    for ((v, gi), need) in inputs.iter().zip(in_grads).zip(needs) {
                        let (Some(gi), true) = (gi, need) else { continue };
                        if v.0 >= i {
                            return Err(TensorError::Graph(format!(
                                "cycle: node {i} ({}) consumes node {}",
                                op.name(),
                                v.0
                            )));
                        }
                        if gi.shape() != self.shape(*v) {
                            return Err(TensorError::ShapeMismatch {
                                op: op.name(),
                                expected: self.shape(*v),
                                actual: gi.shape(),
                            });
                        }
                        match &mut grads[v.0] {
                            Some(acc) => acc.add_assign(&gi)?,
                            slot @ None => *slot = Some(gi),
                        }
                    }
                }
            }
        }
        Ok(result)
    }

    /// Backward from a scalar output with seed 1.
    pub fn backward_scalar(&self, output: Var) -> Result<Gradients> {
        let shape = self.shape(output);
        if shape.numel() != 1 {
            return Err(TensorError::dim("backward_scalar", format!("output is {shape}, not a scalar")));
        }
        self.backward(output, Tensor::full(shape, 1.0))
    }
}
