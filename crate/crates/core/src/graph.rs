//! Reverse-mode differentiation over a linear tape.
//!
//! Every primitive pushes one node holding its output value and, when any
//! input participates in differentiation, a backward rule mapping the output
//! gradient to input gradients. [`Graph::backward`] replays the tape in
//! reverse recorded order.

use std::cell::{Ref, RefCell};
use std::rc::Rc;

use crate::params::{ParamId, ParamStore};
use crate::real::Real;
use crate::tensor::Tensor;

/// Backward rule: `(output grad, which inputs need a grad) -> input grads`.
pub(crate) type BackwardFn<T> = Box<dyn Fn(&Tensor<T>, &[bool]) -> Vec<Option<Tensor<T>>>>;

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

struct Node<T> {
    value: Rc<Tensor<T>>,
    requires_grad: bool,
    inputs: Vec<usize>,
    backward: Option<BackwardFn<T>>,
    param: Option<ParamId>,
}

pub struct Graph<T: Real> {
    nodes: RefCell<Vec<Node<T>>>,
    record: bool,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: RefCell::new(Vec::new()), record: true }
    }

    /// A graph that never stores backward rules; forward values are
    /// identical to a recording graph.
    pub fn no_grad() -> Self {
        Self { nodes: RefCell::new(Vec::new()), record: false }
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

    pub fn constant(&self, t: Tensor<T>) -> Var {
        self.push_node(Node { value: Rc::new(t), requires_grad: false, inputs: vec![], backward: None, param: None })
    }

    pub fn leaf(&self, t: Tensor<T>, requires_grad: bool) -> Var {
        self.push_node(Node {
            value: Rc::new(t),
            requires_grad: requires_grad && self.record,
            inputs: vec![],
            backward: None,
            param: None,
        })
    }

    /// Binds a stored parameter as a leaf. Frozen parameters become
    /// constants so no gradient is ever produced for them.
    pub fn param(&self, store: &ParamStore<T>, id: ParamId) -> Var {
        let p = store.get(id);
        self.push_node(Node {
            value: Rc::new(p.value.clone()),
            requires_grad: p.trainable && self.record,
            inputs: vec![],
            backward: None,
            param: Some(id),
        })
    }

    pub fn value(&self, v: Var) -> Rc<Tensor<T>> {
        Rc::clone(&self.nodes.borrow()[v.0].value)
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.0].value.shape().to_vec()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes.borrow()[v.0].requires_grad
    }

    pub(crate) fn with_value<R>(&self, v: Var, f: impl FnOnce(&Tensor<T>) -> R) -> R {
        let nodes: Ref<'_, Vec<Node<T>>> = self.nodes.borrow();
        f(&nodes[v.0].value)
    }

    fn push_node(&self, node: Node<T>) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(node);
        Var(nodes.len() - 1)
    }

    /// Records a primitive. The backward rule is dropped when nothing
    /// upstream requires a gradient or recording is off.
    pub(crate) fn push_op(
        &self,
        value: impl Into<Rc<Tensor<T>>>,
        inputs: &[Var],
        backward: impl Fn(&Tensor<T>, &[bool]) -> Vec<Option<Tensor<T>>> + 'static,
    ) -> Var {
        let needs = self.record && inputs.iter().any(|&v| self.requires_grad(v));
        self.push_node(Node {
            value: value.into(),
            requires_grad: needs,
            inputs: inputs.iter().map(|v| v.0).collect(),
            backward: if needs { Some(Box::new(backward)) } else { None },
            param: None,
        })
    }

    /// Gradients of the scalar `loss` with respect to every node that
    /// requires one.
    pub fn backward(&self, loss: Var) -> Gradients<T> {
        let nodes = self.nodes.borrow();
        assert_eq!(nodes[loss.0].value.numel(), 1, "backward() needs a scalar loss");
        let mut grads: Vec<Option<Tensor<T>>> = (0..nodes.len()).map(|_| None).collect();
        let mut out = Gradients { grads: (0..nodes.len()).map(|_| None).collect() };
        if !nodes[loss.0].requires_grad {
            return out;
        }
        grads[loss.0] = Some(Tensor::ones(nodes[loss.0].value.shape()));
        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            if let Some(bw) = &node.backward {
                let needs: Vec<bool> = node.inputs.iter().map(|&i| nodes[i].requires_grad).collect();
                let input_grads = bw(&g, &needs);
                debug_assert_eq!(input_grads.len(), node.inputs.len());
                for ((&inp, ig), need) in node.inputs.iter().zip(input_grads).zip(needs) {
                    let (Some(ig), true) = (ig, need) else { continue };
                    debug_assert_eq!(ig.shape(), nodes[inp].value.shape(), "gradient shape mismatch");
                    match &mut grads[inp] {
                        Some(acc) => acc.add_assign(&ig),
                        slot => *slot = Some(ig),
                    }
                }
            }
            if node.inputs.is_empty() {
                // leaves keep their gradient
                out.grads[id] = Some(g);
            }
        }
        out
    }

    /// Accumulates leaf gradients into the trainable parameters they were
    /// bound from.
    pub fn accumulate_param_grads(&self, grads: &Gradients<T>, store: &mut ParamStore<T>) {
        let nodes = self.nodes.borrow();
        for (id, node) in nodes.iter().enumerate() {
            if let (Some(pid), Some(g)) = (node.param, grads.grads[id].as_ref()) {
                store.accumulate_grad(pid, g);
            }
        }
    }
}

pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }
}
