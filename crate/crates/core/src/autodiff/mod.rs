//! Reverse-mode differentiation over a tape of tensor operations.
//!
//! A [`Graph`] is an append-only tape: every node is created after its
//! inputs, so node order is a topological order and [`Graph::backward`] is a
//! single reverse sweep. Model parameters live in a [`ParamSet`]; binding one
//! with [`Graph::with_params`] places parameter `i` at node `i`, which is how
//! gradients are mapped back to parameter handles.

mod gradcheck;
mod ops;

use crate::error::{Error, Result};
use crate::ndtensor::Tensor;
use crate::scalar::Scalar;

pub use gradcheck::{gradcheck, gradcheck_sampled, GradcheckReport};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Adjoint rule for one taped operation.
pub trait Backward<T: Scalar>: Send + Sync {
    fn name(&self) -> &'static str;

    /// Given the forward inputs, the forward output and `∂loss/∂output`,
    /// returns `∂loss/∂input` for every input. `wanted[i]` is false when
    /// input `i` does not lead to a trainable leaf; such entries may be `None`.
    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        output: &Tensor<T>,
        grad: &Tensor<T>,
        wanted: &[bool],
    ) -> Result<Vec<Option<Tensor<T>>>>;
}

enum Origin<T: Scalar> {
    Leaf,
    Op {
        op: Box<dyn Backward<T>>,
        inputs: Vec<Var>,
    },
}

struct Node<T: Scalar> {
    value: Tensor<T>,
    origin: Origin<T>,
    needs_grad: bool,
}

pub struct Graph<T: Scalar> {
    nodes: Vec<Node<T>>,
    n_params: usize,
    fault: Option<String>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), n_params: 0, fault: None }
    }

    /// A tape whose first `params.len()` nodes are the trainable parameters.
    pub fn with_params(params: &ParamSet<T>) -> Self {
        let mut g = Self::new();
        for t in &params.tensors {
            g.leaf(t.clone());
        }
        g.n_params = params.len();
        g
    }

    /// Like [`Graph::with_params`] but nothing requires gradients; used for
    /// plain inference.
    pub fn frozen(params: &ParamSet<T>) -> Self {
        let mut g = Self::new();
        for t in &params.tensors {
            g.constant(t.clone());
        }
        g.n_params = params.len();
        g
    }

    /// Treats the first `n` nodes, which must be leaves, as parameters
    /// `0..n`. Lets a function under [`gradcheck`] address its inputs through
    /// [`ParamId`]s.
    pub fn declare_params(&mut self, n: usize) -> Result<()> {
        if n > self.nodes.len() || self.nodes[..n].iter().any(|nd| !matches!(nd.origin, Origin::Leaf)) {
            return Err(Error::InvalidArgument(format!("the first {n} nodes are not all leaves")));
        }
        self.n_params = n;
        Ok(())
    }

    pub fn param(&self, id: ParamId) -> Var {
        assert!(id.0 < self.n_params, "parameter {} is not bound on this tape", id.0);
        Var(id.0)
    }

    /// Trainable leaf.
    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Origin::Leaf, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Origin::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Test hook: scales the adjoint of every op named `name` by 1.5 so
    /// gradient checks can be shown to catch a broken rule.
    pub fn inject_fault(&mut self, name: &str) {
        self.fault = Some(name.to_string());
    }

    fn push(&mut self, value: Tensor<T>, origin: Origin<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, origin, needs_grad });
        Var(self.nodes.len() - 1)
    }

    /// Records an operation whose forward value has already been computed.
    pub fn apply(
        &mut self,
        op: impl Backward<T> + 'static,
        inputs: &[Var],
        value: Tensor<T>,
    ) -> Result<Var> {
        if cfg!(debug_assertions) && !value.all_finite() {
            return Err(Error::NonFinite(op.name()));
        }
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        let origin = Origin::Op { op: Box::new(op), inputs: inputs.to_vec() };
        Ok(self.push(value, origin, needs_grad))
    }

    /// Gradients of the scalar `loss` with respect to every trainable leaf it
    /// depends on. Fan-out contributions are summed.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let lv = self.value(loss);
        if lv.numel() != 1 {
            return Err(Error::NotScalar(lv.shape().to_vec()));
        }
        if !self.nodes[loss.0].needs_grad {
            return Err(Error::Detached);
        }
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor::full(lv.shape(), T::one()));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            let Origin::Op { op, inputs } = &node.origin else { continue };
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            let in_vals: Vec<&Tensor<T>> = inputs.iter().map(|v| &self.nodes[v.0].value).collect();
            let wanted: Vec<bool> = inputs.iter().map(|v| self.nodes[v.0].needs_grad).collect();
            let mut gin = op.backward(&in_vals, &node.value, &g, &wanted)?;
            if self.fault.as_deref() == Some(op.name()) {
                for t in gin.iter_mut().flatten() {
                    *t = t.map(|v| v * T::lit(1.5));
                }
            }
            for ((v, gi), &w) in inputs.iter().zip(gin).zip(&wanted) {
                let (Some(gi), true) = (gi, w) else { continue };
                if gi.shape() != self.nodes[v.0].value.shape() {
                    return Err(Error::Shape(format!(
                        "`{}` returned gradient {:?} for input {:?}",
                        op.name(),
                        gi.shape(),
                        self.nodes[v.0].value.shape()
                    )));
                }
                grads[v.0] = Some(match grads[v.0].take() {
                    None => gi,
                    Some(acc) => acc.zip_map(&gi, |a, b| a + b)?,
                });
            }
        }
        // keep only leaf gradients
        for (i, g) in grads.iter_mut().enumerate() {
            if !matches!(self.nodes[i].origin, Origin::Leaf) || !self.nodes[i].needs_grad {
                *g = None;
            }
        }
        Ok(Gradients { grads })
    }
}

/// Leaf gradients produced by [`Graph::backward`].
pub struct Gradients<T: Scalar> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn param(&self, id: ParamId) -> Option<&Tensor<T>> {
        self.get(Var(id.0))
    }

    /// Gradient for every parameter in `params`, zeros where the loss does not
    /// depend on it.
    pub fn for_params(&self, params: &ParamSet<T>) -> Vec<Tensor<T>> {
        params
            .tensors
            .iter()
            .enumerate()
            .map(|(i, t)| {
                self.param(ParamId(i))
                    .cloned()
                    .unwrap_or_else(|| Tensor::zeros(t.shape()))
            })
            .collect()
    }
}

/// Handle to a tensor in a [`ParamSet`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

/// Ordered, named collection of trainable tensors.
#[derive(Clone, Debug, Default)]
pub struct ParamSet<T: Scalar> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
}

impl<T: Scalar> ParamSet<T> {
    pub fn new() -> Self {
        Self { names: Vec::new(), tensors: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>) -> ParamId {
        self.names.push(name.into());
        self.tensors.push(value.contiguous());
        ParamId(self.tensors.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.tensors[id.0]
    }

    pub fn set(&mut self, id: ParamId, value: Tensor<T>) -> Result<()> {
        if value.shape() != self.tensors[id.0].shape() {
            return Err(Error::Shape(format!(
                "parameter `{}` is {:?}, got {:?}",
                self.names[id.0],
                self.tensors[id.0].shape(),
                value.shape()
            )));
        }
        self.tensors[id.0] = value.contiguous();
        Ok(())
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn tensors(&self) -> &[Tensor<T>] {
        &self.tensors
    }

    /// Total number of scalar parameters.
    pub fn count(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }
}
