use std::cell::RefCell;
use std::fmt;
use std::rc::Rc;

use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Backward closure: receives the gradient of the node output and a mask of
/// which parents need a gradient, returns one optional gradient per parent.
pub(crate) type BackwardFn<T> = Box<dyn Fn(&Tensor<T>, &[bool]) -> Vec<Option<Tensor<T>>>>;

struct Node<T: Scalar> {
    value: Rc<Tensor<T>>,
    parents: Vec<usize>,
    backward: Option<BackwardFn<T>>,
    requires_grad: bool,
}

/// Append-only tape. Every op on a [`Var`] pushes one node; [`Graph::backward`]
/// walks the tape in reverse.
pub struct Graph<T: Scalar> {
    nodes: RefCell<Vec<Node<T>>>,
    record: bool,
}

/// Handle to a node on a [`Graph`].
pub struct Var<'g, T: Scalar> {
    pub(crate) graph: &'g Graph<T>,
    pub(crate) id: usize,
}

impl<T: Scalar> Clone for Var<'_, T> {
    fn clone(&self) -> Self {
        *self
    }
}

impl<T: Scalar> Copy for Var<'_, T> {}

impl<T: Scalar> fmt::Debug for Var<'_, T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.value().shape())
    }
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    /// Graph that records backward closures.
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            record: true,
        }
    }

    /// Graph for pure evaluation: nothing is recorded for backward.
    pub fn inference() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            record: false,
        }
    }

    pub fn is_recording(&self) -> bool {
        self.record
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Input that never receives a gradient.
    pub fn constant(&self, value: Tensor<T>) -> Var<'_, T> {
        self.push_node(value, Vec::new(), None, false)
    }

    /// Input that receives a gradient (parameters, probes).
    pub fn leaf(&self, value: Tensor<T>) -> Var<'_, T> {
        let rg = self.record;
        self.push_node(value, Vec::new(), None, rg)
    }

    pub fn scalar(&self, v: T) -> Var<'_, T> {
        self.constant(Tensor::scalar(v))
    }

    fn push_node(
        &self,
        value: Tensor<T>,
        parents: Vec<usize>,
        backward: Option<BackwardFn<T>>,
        requires_grad: bool,
    ) -> Var<'_, T> {
        let mut nodes = self.nodes.borrow_mut();
        let id = nodes.len();
        nodes.push(Node {
            value: Rc::new(value),
            parents,
            backward,
            requires_grad,
        });
        Var { graph: self, id }
    }

    pub(crate) fn needs_grad(&self, parents: &[usize]) -> bool {
        if !self.record {
            return false;
        }
        let nodes = self.nodes.borrow();
        parents.iter().any(|&p| nodes[p].requires_grad)
    }

    /// Pushes an op result. The backward closure is dropped when no parent
    /// requires a gradient.
    pub(crate) fn push<F>(&self, value: Tensor<T>, parents: &[usize], backward: F) -> Var<'_, T>
    where
        F: Fn(&Tensor<T>, &[bool]) -> Vec<Option<Tensor<T>>> + 'static,
    {
        if self.needs_grad(parents) {
            self.push_node(value, parents.to_vec(), Some(Box::new(backward)), true)
        } else {
            self.push_node(value, parents.to_vec(), None, false)
        }
    }

    pub(crate) fn value_of(&self, id: usize) -> Rc<Tensor<T>> {
        Rc::clone(&self.nodes.borrow()[id].value)
    }

    /// Reverse sweep from a scalar (single element) output.
    pub fn backward(&self, output: Var<'_, T>) -> Gradients<T> {
        let nodes = self.nodes.borrow();
        let n = output.id + 1;
        let mut grads: Vec<Option<Tensor<T>>> = (0..nodes.len()).map(|_| None).collect();
        let out_val = &nodes[output.id].value;
        assert_eq!(out_val.numel(), 1, "backward() needs a scalar output");
        grads[output.id] = Some(Tensor::ones(out_val.shape()));
        for id in (0..n).rev() {
            let node = &nodes[id];
            let Some(bw) = node.backward.as_ref() else {
                continue;
            };
            let Some(g) = grads[id].take() else {
                continue;
            };
            let mask: Vec<bool> = node
                .parents
                .iter()
                .map(|&p| nodes[p].requires_grad)
                .collect();
            let parent_grads = bw(&g, &mask);
            debug_assert_eq!(parent_grads.len(), node.parents.len());
            for ((&p, pg), &need) in node.parents.iter().zip(parent_grads).zip(&mask) {
                if !need {
                    continue;
                }
                let Some(pg) = pg else { continue };
                debug_assert_eq!(
                    pg.shape(),
                    nodes[p].value.shape(),
                    "grad shape for node {p}"
                );
                match &mut grads[p] {
                    Some(acc) => acc.add_assign(&pg),
                    slot => *slot = Some(pg),
                }
            }
            // interior grads are consumed; only leaves keep theirs
            if node.parents.is_empty() {
                grads[id] = Some(g);
            }
        }
        Gradients { grads }
    }
}

/// Result of a reverse sweep, indexed by [`Var`].
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var<'_, T>) -> Option<&Tensor<T>> {
        self.grads.get(v.id).and_then(|g| g.as_ref())
    }

    /// Gradient or zeros of the variable's shape.
    pub fn get_or_zeros(&self, v: Var<'_, T>) -> Tensor<T> {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(v.value().shape()))
    }
}

impl<'g, T: Scalar> Var<'g, T> {
    pub fn graph(&self) -> &'g Graph<T> {
        self.graph
    }

    pub fn id(&self) -> usize {
        self.id
    }

    pub fn value(&self) -> Rc<Tensor<T>> {
        self.graph.value_of(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    pub fn item(&self) -> T {
        self.value().item()
    }

    /// Same value, cut from the tape.
    pub fn detach(&self) -> Var<'g, T> {
        self.graph.constant((*self.value()).clone())
    }
}
