use std::cell::RefCell;
use std::fmt;
use std::sync::Arc;

use super::Tensor;
use crate::error::{Error, Result};

/// Backward rule of a recorded operation. Receives the cotangent of the
/// operation's output and a mask telling which parents need a gradient, and
/// returns one optional gradient per parent (same order as recorded).
pub type BackwardFn = Box<dyn Fn(&Tensor, &[bool]) -> Vec<Option<Tensor>>>;

struct Node {
    value: Arc<Tensor>,
    parents: Vec<usize>,
    backward: Option<BackwardFn>,
    requires_grad: bool,
}

/// Wengert list for one forward/backward pass. Single-threaded; build one
/// tape per sample or per graph.
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    record: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl fmt::Debug for Tape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tape")
            .field("nodes", &self.nodes.borrow().len())
            .field("record", &self.record)
            .finish()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            nodes: RefCell::new(Vec::new()),
            record: true,
        }
    }

    /// A tape that never records backward rules; used for inference.
    pub fn inference() -> Self {
        Tape {
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

    fn push(&self, node: Node) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(node);
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    /// Input that never receives a gradient.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.constant_shared(Arc::new(value))
    }

    pub fn constant_shared(&self, value: Arc<Tensor>) -> Var<'_> {
        self.push(Node {
            value,
            parents: Vec::new(),
            backward: None,
            requires_grad: false,
        })
    }

    /// Trainable leaf; its gradient is kept after [`Tape::backward`].
    pub fn leaf(&self, value: Tensor) -> Var<'_> {
        self.param(Arc::new(value))
    }

    pub fn param(&self, value: Arc<Tensor>) -> Var<'_> {
        self.push(Node {
            value,
            parents: Vec::new(),
            backward: None,
            requires_grad: self.record,
        })
    }

    /// Records an operation result. The backward rule is dropped when no
    /// parent requires a gradient.
    pub fn op<'t>(&'t self, value: Tensor, parents: &[Var<'t>], backward: BackwardFn) -> Var<'t> {
        let parent_ids: Vec<usize> = parents.iter().map(|p| p.id).collect();
        let requires_grad = self.record && {
            let nodes = self.nodes.borrow();
            parent_ids.iter().any(|&p| nodes[p].requires_grad)
        };
        self.push(Node {
            value: Arc::new(value),
            parents: if requires_grad { parent_ids } else { Vec::new() },
            backward: if requires_grad { Some(backward) } else { None },
            requires_grad,
        })
    }

    pub fn value(&self, var: Var<'_>) -> Arc<Tensor> {
        Arc::clone(&self.nodes.borrow()[var.id].value)
    }

    pub fn requires_grad(&self, var: Var<'_>) -> bool {
        self.nodes.borrow()[var.id].requires_grad
    }

    /// Reverse sweep from a scalar root. Gradients of intermediate nodes are
    /// released as soon as they have been propagated; leaf gradients remain.
    pub fn backward(&self, root: Var<'_>) -> Result<Gradients> {
        let nodes = self.nodes.borrow();
        let root_value = &nodes[root.id].value;
        if root_value.len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar root, got shape {:?}",
                root_value.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..nodes.len()).map(|_| None).collect();
        grads[root.id] = Some(Tensor::full(root_value.shape(), 1.0));

        for id in (0..=root.id).rev() {
            let node = &nodes[id];
            let Some(backward) = node.backward.as_ref() else {
                continue;
            };
            let Some(grad) = grads[id].take() else {
                continue;
            };
            let needs: Vec<bool> = node
                .parents
                .iter()
                .map(|&p| nodes[p].requires_grad)
                .collect();
            let parent_grads = backward(&grad, &needs);
            debug_assert_eq!(parent_grads.len(), node.parents.len());
            for ((&p, pg), &need) in node.parents.iter().zip(parent_grads).zip(&needs) {
                let Some(pg) = pg else { continue };
                if !need {
                    continue;
                }
                debug_assert_eq!(pg.shape(), nodes[p].value.shape());
                match &mut grads[p] {
                    Some(acc) => acc.add_assign(&pg),
                    slot @ None => *slot = Some(pg),
                }
            }
        }
        Ok(Gradients { grads })
    }
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.shape())
    }
}

impl<'t> Var<'t> {
    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn id(&self) -> usize {
        self.id
    }

    pub fn value(&self) -> Arc<Tensor> {
        self.tape.value(*self)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.requires_grad(*self)
    }
}

/// Leaf gradients returned by [`Tape::backward`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, var: Var<'_>) -> Option<&Tensor> {
        self.grads.get(var.id).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, var: Var<'_>) -> Option<Tensor> {
        self.grads.get_mut(var.id).and_then(|g| g.take())
    }

    /// Gradient of `var`, or zeros of its shape when nothing flowed back.
    pub fn wrt(&self, var: Var<'_>) -> Tensor {
        self.get(var)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(&var.shape()))
    }
}
