//! Reverse-mode autodiff tape.
//!
//! Every differentiable operation appends a node holding its inputs. Backward
//! rules are written with the same differentiable operations, so running
//! [`Tape::grad`] with `create_graph = true` records the backward pass itself
//! and the resulting gradients can be differentiated again.
//!
//! Node ids are assigned in creation order, which is a topological order;
//! the backward sweep walks ids downward and visits each node once.

use std::cell::{Cell, RefCell};
use std::collections::HashMap;
use std::rc::Rc;

use super::{ops, Scalar, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Debug)]
pub(crate) enum Op {
    Leaf,
    Add,
    Sub,
    Mul,
    MulScalar(f64),
    AddScalar,
    PowScalar(f64),
    Tanh,
    Sigmoid,
    Softplus,
    LeakyRelu(f64),
    ClampMin(f64),
    SumTo,
    BroadcastTo,
    Reshape,
    Transpose,
    Matmul,
    Conv2d { stride: usize, pad: usize },
    Conv2dInputGrad { stride: usize, pad: usize },
    Conv2dKernelGrad { stride: usize, pad: usize },
    Upsample2x,
    SumPool2x,
    Concat { axis: usize },
    Narrow { axis: usize, start: usize },
    PadAxis { axis: usize, start: usize },
    Rfft2,
    Rfft2Adjoint,
    Irfft2,
    Irfft2Adjoint,
}

#[derive(Clone)]
pub(crate) struct Input<T> {
    pub value: Rc<Tensor<T>>,
    pub id: Option<usize>,
}

struct Node<T> {
    op: Op,
    inputs: Vec<Input<T>>,
    shape: Vec<usize>,
}

struct TapeInner<T> {
    nodes: RefCell<Vec<Node<T>>>,
    recording: Cell<bool>,
}

/// Recorder for one forward (and optionally backward) computation.
///
/// Cheap to clone; clones share the same record. Confined to one thread.
pub struct Tape<T> {
    inner: Rc<TapeInner<T>>,
}

impl<T> Clone for Tape<T> {
    fn clone(&self) -> Self {
        Tape {
            inner: Rc::clone(&self.inner),
        }
    }
}

/// A tensor value, optionally tracked by a tape node.
pub struct Var<T> {
    value: Rc<Tensor<T>>,
    id: Option<usize>,
    tape: Tape<T>,
}

impl<T> Clone for Var<T> {
    fn clone(&self) -> Self {
        Var {
            value: Rc::clone(&self.value),
            id: self.id,
            tape: self.tape.clone(),
        }
    }
}

impl<T: Scalar> std::fmt::Debug for Var<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Var")
            .field("shape", &self.value.shape())
            .field("id", &self.id)
            .finish()
    }
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape {
            inner: Rc::new(TapeInner {
                nodes: RefCell::new(Vec::new()),
                recording: Cell::new(true),
            }),
        }
    }

    /// A differentiable leaf.
    pub fn leaf(&self, value: Tensor<T>) -> Var<T> {
        let shape = value.shape().to_vec();
        let value = Rc::new(value);
        let id = self.push(Op::Leaf, Vec::new(), shape);
        Var {
            value,
            id: Some(id),
            tape: self.clone(),
        }
    }

    /// An untracked value; gradients never flow into it.
    pub fn constant(&self, value: Tensor<T>) -> Var<T> {
        Var {
            value: Rc::new(value),
            id: None,
            tape: self.clone(),
        }
    }

    pub fn len(&self) -> usize {
        self.inner.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn is_recording(&self) -> bool {
        self.inner.recording.get()
    }

    /// Runs `f` with recording switched off: results are plain values.
    pub fn no_grad<R>(&self, f: impl FnOnce() -> R) -> R {
        let prev = self.inner.recording.replace(false);
        let out = f();
        self.inner.recording.set(prev);
        out
    }

    fn push(&self, op: Op, inputs: Vec<Input<T>>, shape: Vec<usize>) -> usize {
        let mut nodes = self.inner.nodes.borrow_mut();
        nodes.push(Node { op, inputs, shape });
        nodes.len() - 1
    }

    fn same(&self, other: &Tape<T>) -> bool {
        Rc::ptr_eq(&self.inner, &other.inner)
    }

    /// Wraps the result of `op` applied to `inputs`, recording a node when
    /// any input is tracked and recording is on.
    pub(crate) fn record(&self, op: Op, inputs: &[&Var<T>], value: Tensor<T>) -> Var<T> {
        let tracked = self.is_recording() && inputs.iter().any(|v| v.id.is_some());
        let value = Rc::new(value);
        let id = if tracked {
            for v in inputs {
                assert!(
                    v.id.is_none() || self.same(&v.tape),
                    "tracked variable used on a foreign tape"
                );
            }
            let ins = inputs
                .iter()
                .map(|v| Input {
                    value: Rc::clone(&v.value),
                    id: v.id,
                })
                .collect();
            Some(self.push(op, ins, value.shape().to_vec()))
        } else {
            None
        };
        Var {
            value,
            id,
            tape: self.clone(),
        }
    }

    /// Gradients of the scalar `output` with respect to each of `wrt`.
    ///
    /// With `create_graph`, the backward computation is recorded and the
    /// returned variables are themselves differentiable.
    pub fn grad(&self, output: &Var<T>, wrt: &[&Var<T>], create_graph: bool) -> Result<Vec<Var<T>>> {
        if output.value.numel() != 1 {
            return Err(Error::NonScalarLoss(output.value.shape().to_vec()));
        }
        let Some(out_id) = output.id else {
            return Err(Error::GraphNotRetained);
        };
        if !self.same(&output.tape) {
            return Err(Error::InvalidArgument(
                "output belongs to a different tape".into(),
            ));
        }
        let targets: Vec<Option<usize>> = wrt.iter().map(|v| v.id).collect();
        let grads = self.sweep(out_id, &targets, create_graph)?;
        Ok(wrt
            .iter()
            .zip(&targets)
            .map(|(v, id)| {
                id.and_then(|i| grads.get(&i).cloned())
                    .unwrap_or_else(|| self.constant(Tensor::zeros(v.value.shape())))
            })
            .collect())
    }

    /// First-order gradients of a scalar loss for every tracked leaf.
    pub fn backward(&self, loss: &Var<T>) -> Result<Gradients<T>> {
        if loss.value.numel() != 1 {
            return Err(Error::NonScalarLoss(loss.value.shape().to_vec()));
        }
        let Some(out_id) = loss.id else {
            return Ok(Gradients::default());
        };
        let leaves: Vec<Option<usize>> = {
            let nodes = self.inner.nodes.borrow();
            (0..=out_id)
                .filter(|&i| matches!(nodes[i].op, Op::Leaf))
                .map(Some)
                .collect()
        };
        let grads = self.sweep(out_id, &leaves, false)?;
        Ok(Gradients {
            by_id: grads
                .into_iter()
                .map(|(id, v)| (id, Rc::unwrap_or_clone(v.value)))
                .collect(),
        })
    }

    fn sweep(
        &self,
        out_id: usize,
        targets: &[Option<usize>],
        create_graph: bool,
    ) -> Result<HashMap<usize, Var<T>>> {
        let n = out_id + 1;
        let mut is_target = vec![false; n];
        for &t in targets.iter().flatten() {
            if t < n {
                is_target[t] = true;
            }
        }
        // needed[i]: node i is a target or depends on one.
        let mut needed = is_target.clone();
        {
            let nodes = self.inner.nodes.borrow();
            for i in 0..n {
                if !needed[i] && nodes[i].inputs.iter().any(|inp| inp.id.is_some_and(|p| needed[p])) {
                    needed[i] = true;
                }
            }
        }

        let prev = self.inner.recording.replace(create_graph);
        let result = (|| {
            let mut pending: Vec<Option<Var<T>>> = vec![None; n];
            let mut done = HashMap::new();
            pending[out_id] = Some(self.constant(Tensor::ones(&self.shape_of(out_id))));
            for id in (0..n).rev() {
                if !needed[id] {
                    continue;
                }
                let Some(g) = pending[id].take() else { continue };
                let (op, inputs, shape) = {
                    let nodes = self.inner.nodes.borrow();
                    let node = &nodes[id];
                    (node.op.clone(), node.inputs.clone(), node.shape.clone())
                };
                if is_target[id] {
                    done.insert(id, g.clone());
                }
                if matches!(op, Op::Leaf) {
                    continue;
                }
                let vars: Vec<Var<T>> = inputs
                    .iter()
                    .map(|inp| Var {
                        value: Rc::clone(&inp.value),
                        id: inp.id,
                        tape: self.clone(),
                    })
                    .collect();
                let need: Vec<bool> = inputs
                    .iter()
                    .map(|inp| inp.id.is_some_and(|p| needed[p]))
                    .collect();
                let input_grads = ops::vjp(&op, &vars, &shape, &g, &need)?;
                for ((inp, gi), wanted) in inputs.iter().zip(input_grads).zip(&need) {
                    let (Some(pid), Some(gi), true) = (inp.id, gi, *wanted) else {
                        continue;
                    };
                    pending[pid] = Some(match pending[pid].take() {
                        Some(acc) => acc.add(&gi)?,
                        None => gi,
                    });
                }
            }
            Ok(done)
        })();
        self.inner.recording.set(prev);
        result
    }

    fn shape_of(&self, id: usize) -> Vec<usize> {
        self.inner.nodes.borrow()[id].shape.clone()
    }
}

impl<T: Scalar> Var<T> {
    pub fn value(&self) -> &Tensor<T> {
        &self.value
    }

    pub fn shape(&self) -> &[usize] {
        self.value.shape()
    }

    pub fn tape(&self) -> &Tape<T> {
        &self.tape
    }

    /// Whether this value is recorded on the tape.
    pub fn is_tracked(&self) -> bool {
        self.id.is_some()
    }

    pub(crate) fn id(&self) -> Option<usize> {
        self.id
    }

    /// The same value, cut off from the tape.
    pub fn detach(&self) -> Var<T> {
        Var {
            value: Rc::clone(&self.value),
            id: None,
            tape: self.tape.clone(),
        }
    }

    /// Scalar value of a one-element variable.
    pub fn item(&self) -> Result<T> {
        self.value.item()
    }
}

/// First-order gradients keyed by leaf.
#[derive(Default)]
pub struct Gradients<T> {
    by_id: HashMap<usize, Tensor<T>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, var: &Var<T>) -> Option<&Tensor<T>> {
        var.id().and_then(|id| self.by_id.get(&id))
    }

    /// Gradient of `var`, zeros when it did not influence the loss.
    pub fn get_or_zeros(&self, var: &Var<T>) -> Tensor<T> {
        self.get(var)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(var.shape()))
    }
}
