use crate::error::{Error, Result};
use crate::numcore::{Scalar, Tensor};

/// Handle to a node on a [`Graph`] tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

type BackwardFn<T> = Box<dyn Fn(&Tensor<T>, &mut GradSink<'_, T>)>;

struct Node<T> {
    value: Tensor<T>,
    requires_grad: bool,
    backward: Option<BackwardFn<T>>,
}

/// Reverse-mode tape. Ops append nodes via [`Graph::push_op`]; calling
/// [`Graph::backward`] sweeps the tape once in reverse, handing each node's
/// accumulated gradient to its backward closure.
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Tensor<T>>>,
}

/// Gradient accumulator passed to backward closures. Contributions to parents
/// that do not require gradients are dropped.
pub struct GradSink<'a, T> {
    grads: &'a mut [Option<Tensor<T>>],
    requires: &'a [bool],
}

impl<T: Scalar> GradSink<'_, T> {
    /// True when `parent` needs a gradient; closures can skip dead work.
    pub fn wants(&self, parent: Var) -> bool {
        self.requires[parent.0]
    }

    /// Accumulate `contribution` into the gradient of `parent`.
    pub fn add(&mut self, parent: Var, contribution: Tensor<T>) {
        if !self.requires[parent.0] {
            return;
        }
        debug_assert!(contribution.all_finite(), "non-finite gradient contribution");
        match &mut self.grads[parent.0] {
            Some(g) => g.add_assign(&contribution).expect("gradient shape mismatch"),
            slot => *slot = Some(contribution),
        }
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new(), grads: Vec::new() }
    }

    /// Leaf holding external data; never receives a gradient.
    pub fn input(&mut self, value: Tensor<T>) -> Var {
        self.push_leaf(value, false)
    }

    /// Leaf that participates in differentiation.
    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        self.push_leaf(value, true)
    }

    fn push_leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, requires_grad, backward: None });
        Var(self.nodes.len() - 1)
    }

    /// Append an op result. `backward` receives the node's output gradient and
    /// must route contributions to the captured parent [`Var`]s through the
    /// sink. Fails if `value` contains a NaN or infinity, so every op output
    /// on the tape is finite by construction.
    ///
    /// The closure is dropped when no parent requires gradients, which also
    /// stops gradient propagation below this node.
    pub fn push_op(
        &mut self,
        op: &'static str,
        value: Tensor<T>,
        parents: &[Var],
        backward: impl Fn(&Tensor<T>, &mut GradSink<'_, T>) + 'static,
    ) -> Result<Var> {
        if !value.all_finite() {
            return Err(Error::NonFinite { op, detail: format!("output shape {:?}", value.shape()) });
        }
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        let backward: Option<BackwardFn<T>> =
            if requires_grad { Some(Box::new(backward)) } else { None };
        self.nodes.push(Node { value, requires_grad, backward });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Reverse sweep from `loss`, which must hold exactly one element.
    /// Gradients of all reachable nodes that require them are available via
    /// [`Graph::grad`] afterwards.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let n = self.nodes.len();
        if self.nodes[loss.0].value.len() != 1 {
            return Err(Error::Shape(format!(
                "backward root must be a scalar, got shape {:?}",
                self.nodes[loss.0].value.shape()
            )));
        }
        let requires: Vec<bool> = self.nodes.iter().map(|n| n.requires_grad).collect();
        let mut grads: Vec<Option<Tensor<T>>> = Vec::with_capacity(n);
        grads.resize_with(n, || None);
        grads[loss.0] = Some(Tensor::full(self.nodes[loss.0].value.shape(), T::one()));
        for i in (0..n).rev() {
            if grads[i].is_none() {
                continue;
            }
            let Some(backward) = self.nodes[i].backward.as_ref() else { continue };
            let (below, at) = grads.split_at_mut(i);
            let gout = at[0].as_ref().expect("checked above");
            let mut sink = GradSink { grads: below, requires: &requires[..i] };
            backward(gout, &mut sink);
        }
        self.grads = grads;
        Ok(())
    }

    /// Gradient of `v` from the last [`Graph::backward`] call. `None` when the
    /// node does not require gradients or was not reached.
    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}
