use std::cell::RefCell;
use std::collections::HashMap;
use std::fmt;
use std::rc::Rc;

use super::Tensor;
use crate::error::{Error, Result};

/// Storage precision for a training or inference session.
///
/// Arithmetic always runs in `f64`. Under `F32`, parameters, optimizer moments
/// and network inputs are rounded to the nearest `f32` after every update so
/// that 32-bit checkpoints reproduce the in-memory state bit for bit. Gradient
/// checks run under `F64`. A session never mixes the two.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    #[default]
    F32,
    F64,
}

impl Precision {
    pub fn apply(self, t: &mut Tensor) {
        if self == Precision::F32 {
            t.round_f32();
        }
    }
}

type BackwardFn = Box<dyn FnOnce(&Tensor) -> Vec<Option<Tensor>>>;

struct Node {
    parents: Vec<usize>,
    backward: Option<BackwardFn>,
    leaf: bool,
}

#[derive(Default)]
struct TapeInner {
    nodes: Vec<Node>,
    consumed: bool,
}

/// Operation record for one forward/backward session.
///
/// Cloning a `Tape` clones the handle, not the record. Operations are appended
/// in execution order, so an operation's inputs always precede it. A call to
/// [`Tape::backward`] consumes the recorded closures; the tape cannot be
/// differentiated twice.
#[derive(Clone, Default)]
pub struct Tape(Rc<RefCell<TapeInner>>);

impl fmt::Debug for Tape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let inner = self.0.borrow();
        f.debug_struct("Tape")
            .field("nodes", &inner.nodes.len())
            .field("consumed", &inner.consumed)
            .finish()
    }
}

/// A tensor value recorded on a tape.
#[derive(Clone)]
pub struct Var {
    id: usize,
    value: Rc<Tensor>,
    requires_grad: bool,
    tape: Tape,
}

impl fmt::Debug for Var {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Var")
            .field("id", &self.id)
            .field("shape", &self.value.shape())
            .field("requires_grad", &self.requires_grad)
            .finish()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.0.borrow().nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// A differentiable input (parameter or probe).
    pub fn leaf(&self, value: Tensor) -> Var {
        self.push(value, Vec::new(), None, true)
    }

    /// A value that never receives a gradient.
    pub fn constant(&self, value: Tensor) -> Var {
        self.push(value, Vec::new(), None, false)
    }

    /// Record an operation.
    ///
    /// `backward` receives the gradient of the output and returns one optional
    /// gradient per parent, in order. It is dropped unrecorded when no parent
    /// requires a gradient.
    pub fn op<F>(&self, value: Tensor, parents: &[&Var], backward: F) -> Var
    where
        F: FnOnce(&Tensor) -> Vec<Option<Tensor>> + 'static,
    {
        for p in parents {
            assert!(
                Rc::ptr_eq(&p.tape.0, &self.0),
                "operands recorded on different tapes"
            );
        }
        if parents.iter().any(|p| p.requires_grad) {
            let ids = parents.iter().map(|p| p.id).collect();
            self.push(value, ids, Some(Box::new(backward)), false)
        } else {
            self.push(value, Vec::new(), None, false)
        }
    }

    fn push(
        &self,
        value: Tensor,
        parents: Vec<usize>,
        backward: Option<BackwardFn>,
        leaf: bool,
    ) -> Var {
        let mut inner = self.0.borrow_mut();
        let requires_grad = leaf || backward.is_some();
        let id = inner.nodes.len();
        inner.nodes.push(Node {
            parents,
            backward,
            leaf,
        });
        Var {
            id,
            value: Rc::new(value),
            requires_grad,
            tape: self.clone(),
        }
    }

    /// Reverse sweep from a scalar loss. Returns gradients of every leaf
    /// reachable from the loss.
    pub fn backward(&self, loss: &Var) -> Result<Gradients> {
        if !Rc::ptr_eq(&loss.tape.0, &self.0) {
            return Err(Error::Autograd("loss was recorded on another tape".into()));
        }
        if loss.value.numel() != 1 {
            return Err(Error::Autograd(format!(
                "backward needs a scalar loss, got shape {:?}",
                loss.value.shape()
            )));
        }
        if !loss.requires_grad {
            return Err(Error::Autograd(
                "loss is detached: no differentiable input reaches it".into(),
            ));
        }
        let mut work: Vec<(Vec<usize>, Option<BackwardFn>, bool)> = {
            let mut inner = self.0.borrow_mut();
            if inner.consumed {
                return Err(Error::Autograd("tape already consumed by backward".into()));
            }
            inner.consumed = true;
            inner.nodes[..=loss.id]
                .iter_mut()
                .map(|n| (std::mem::take(&mut n.parents), n.backward.take(), n.leaf))
                .collect()
        };
        let mut grads: Vec<Option<Tensor>> = vec![None; loss.id + 1];
        grads[loss.id] = Some(Tensor::full(loss.value.shape(), 1.0));
        let mut out = HashMap::new();
        for id in (0..=loss.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            let (parents, backward, leaf) = std::mem::take(&mut work[id]);
            if leaf {
                out.insert(id, g);
                continue;
            }
            let Some(backward) = backward else { continue };
            let pgrads = backward(&g);
            debug_assert_eq!(pgrads.len(), parents.len());
            for (p, pg) in parents.into_iter().zip(pgrads) {
                let Some(pg) = pg else { continue };
                match &mut grads[p] {
                    Some(acc) => acc.add_assign(&pg),
                    slot @ None => *slot = Some(pg),
                }
            }
        }
        Ok(Gradients { map: out })
    }
}

impl Var {
    pub fn value(&self) -> &Tensor {
        &self.value
    }

    pub(crate) fn value_rc(&self) -> Rc<Tensor> {
        Rc::clone(&self.value)
    }

    pub fn shape(&self) -> &[usize] {
        self.value.shape()
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn tape(&self) -> &Tape {
        &self.tape
    }

    pub fn id(&self) -> usize {
        self.id
    }
}

/// Leaf gradients produced by [`Tape::backward`].
#[derive(Debug, Default)]
pub struct Gradients {
    map: HashMap<usize, Tensor>,
}

impl Gradients {
    pub fn get(&self, v: &Var) -> Option<&Tensor> {
        self.map.get(&v.id)
    }

    /// Gradient of `v`, or zeros when the loss does not depend on it.
    pub fn get_or_zero(&self, v: &Var) -> Tensor {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(v.shape()))
    }

    pub fn take(&mut self, v: &Var) -> Option<Tensor> {
        self.map.remove(&v.id)
    }
}
