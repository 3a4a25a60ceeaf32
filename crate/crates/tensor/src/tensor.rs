//! The tensor handle and the reverse-mode graph behind it.
//!
//! Every op allocates a fresh node holding its output data. When gradient
//! recording is enabled and any input requires a gradient, the node also keeps
//! its inputs and a backward closure. Node ids grow monotonically, so sorting
//! reachable nodes by descending id yields a valid reverse topological order.

use std::cell::Cell;
use std::collections::HashMap;
use std::fmt;
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::{Arc, Mutex, RwLock, RwLockReadGuard};

use crate::error::{Result, TensorError};
use crate::float::Float;

static NEXT_ID: AtomicU64 = AtomicU64::new(0);

thread_local! {
    static GRAD_ENABLED: Cell<bool> = const { Cell::new(true) };
}

/// Runs `f` with gradient recording disabled on this thread.
pub fn no_grad<R>(f: impl FnOnce() -> R) -> R {
    struct Restore(bool);
    impl Drop for Restore {
        fn drop(&mut self) {
            GRAD_ENABLED.with(|g| g.set(self.0));
        }
    }
    let prev = GRAD_ENABLED.with(|g| g.replace(false));
    let _restore = Restore(prev);
    f()
}

pub fn grad_enabled() -> bool {
    GRAD_ENABLED.with(|g| g.get())
}

pub(crate) struct BackwardArgs<'a, T: Float> {
    pub grad_out: &'a [T],
    pub out: &'a [T],
    pub inputs: &'a [Tensor<T>],
    pub needs: &'a [bool],
}

pub(crate) type BackwardFn<T> = Box<dyn Fn(&BackwardArgs<'_, T>) -> Vec<Option<Vec<T>>> + Send + Sync>;

struct GradFn<T: Float> {
    op: &'static str,
    inputs: Vec<Tensor<T>>,
    backward: BackwardFn<T>,
}

struct Node<T: Float> {
    id: u64,
    shape: Vec<usize>,
    data: RwLock<Vec<T>>,
    grad: Mutex<Option<Vec<T>>>,
    requires_grad: AtomicBool,
    grad_fn: Option<GradFn<T>>,
}

/// N-dimensional row-major array with an optional gradient.
///
/// Cloning is cheap and shares the underlying node.
pub struct Tensor<T: Float = f32> {
    node: Arc<Node<T>>,
}

impl<T: Float> Clone for Tensor<T> {
    fn clone(&self) -> Self {
        Tensor { node: Arc::clone(&self.node) }
    }
}

impl<T: Float> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.node.shape)
            .field("requires_grad", &self.requires_grad())
            .field("op", &self.node.grad_fn.as_ref().map(|g| g.op))
            .finish()
    }
}

pub fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl<T: Float> Tensor<T> {
    fn leaf(shape: Vec<usize>, data: Vec<T>, requires_grad: bool) -> Result<Self> {
        if numel(&shape) != data.len() {
            return Err(TensorError::Shape {
                op: "from_vec",
                detail: format!("shape {:?} holds {} values, got {}", shape, numel(&shape), data.len()),
            });
        }
        if shape.contains(&0) {
            return Err(TensorError::Shape {
                op: "from_vec",
                detail: format!("shape {shape:?} has a zero-length axis"),
            });
        }
        Ok(Tensor {
            node: Arc::new(Node {
                id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
                shape,
                data: RwLock::new(data),
                grad: Mutex::new(None),
                requires_grad: AtomicBool::new(requires_grad),
                grad_fn: None,
            }),
        })
    }

    /// Constant (non-trainable) tensor.
    pub fn from_vec(shape: &[usize], data: Vec<T>) -> Result<Self> {
        Self::leaf(shape.to_vec(), data, false)
    }

    /// Trainable leaf tensor.
    pub fn param(shape: &[usize], data: Vec<T>) -> Result<Self> {
        Self::leaf(shape.to_vec(), data, true)
    }

    pub fn from_f64(shape: &[usize], data: &[f64]) -> Result<Self> {
        Self::from_vec(shape, data.iter().map(|&v| T::from_f64(v)).collect())
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        Self::leaf(shape.to_vec(), vec![value; numel(shape)], false).expect("valid shape")
    }

    pub fn scalar(value: T) -> Self {
        Self::leaf(Vec::new(), vec![value], false).expect("scalar")
    }

    /// Builds the output of an op. Records the backward closure only when
    /// recording is on and some input requires a gradient.
    pub(crate) fn from_op(
        shape: Vec<usize>,
        data: Vec<T>,
        op: &'static str,
        inputs: Vec<Tensor<T>>,
        backward: BackwardFn<T>,
    ) -> Self {
        debug_assert_eq!(numel(&shape), data.len(), "{op} produced wrong length");
        let track = grad_enabled() && inputs.iter().any(|t| t.requires_grad());
        let grad_fn = track.then(|| GradFn { op, inputs, backward });
        Tensor {
            node: Arc::new(Node {
                id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
                shape,
                data: RwLock::new(data),
                grad: Mutex::new(None),
                requires_grad: AtomicBool::new(track),
                grad_fn,
            }),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.node.shape
    }

    pub fn numel(&self) -> usize {
        numel(&self.node.shape)
    }

    pub fn ndim(&self) -> usize {
        self.node.shape.len()
    }

    pub fn data(&self) -> RwLockReadGuard<'_, Vec<T>> {
        self.node.data.read().expect("tensor data lock poisoned")
    }

    pub fn to_vec(&self) -> Vec<T> {
        self.data().clone()
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.data().iter().map(|v| v.as_f64()).collect()
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> T {
        let d = self.data();
        assert_eq!(d.len(), 1, "item() on tensor of shape {:?}", self.node.shape);
        d[0]
    }

    pub fn requires_grad(&self) -> bool {
        self.node.requires_grad.load(Ordering::Relaxed)
    }

    /// Toggles gradient tracking of a leaf, e.g. to freeze a network for one pass.
    pub fn set_requires_grad(&self, on: bool) {
        assert!(self.is_leaf(), "requires_grad can only be toggled on leaves");
        self.node.requires_grad.store(on, Ordering::Relaxed);
    }

    pub fn is_leaf(&self) -> bool {
        self.node.grad_fn.is_none()
    }

    pub fn id(&self) -> u64 {
        self.node.id
    }

    pub fn grad(&self) -> Option<Vec<T>> {
        self.node.grad.lock().expect("grad lock poisoned").clone()
    }

    pub fn zero_grad(&self) {
        *self.node.grad.lock().expect("grad lock poisoned") = None;
    }

    /// Overwrites leaf data in place. Used by optimizers and checkpoint loading.
    pub fn set_data(&self, data: Vec<T>) -> Result<()> {
        if data.len() != self.numel() {
            return Err(TensorError::Shape {
                op: "set_data",
                detail: format!("tensor of shape {:?} cannot take {} values", self.shape(), data.len()),
            });
        }
        *self.node.data.write().expect("tensor data lock poisoned") = data;
        Ok(())
    }

    pub(crate) fn update_data(&self, f: impl FnOnce(&mut [T])) {
        let mut d = self.node.data.write().expect("tensor data lock poisoned");
        f(&mut d);
    }

    /// A constant copy, cut from the graph.
    pub fn detach(&self) -> Self {
        Self::leaf(self.node.shape.clone(), self.to_vec(), false).expect("same shape")
    }

    pub fn is_finite(&self) -> bool {
        self.data().iter().all(|v| v.is_finite())
    }

    /// Reverse pass from a scalar loss. Gradients accumulate into every
    /// reachable tensor that requires one; call [`Tensor::zero_grad`] to reset.
    pub fn backward(&self) -> Result<()> {
        if self.numel() != 1 {
            return Err(TensorError::Contract(format!("backward needs a scalar loss, got shape {:?}", self.shape())));
        }
        if !self.requires_grad() {
            return Err(TensorError::Contract(
                "backward on a tensor that was not produced by a recorded computation".into(),
            ));
        }

        let mut nodes: HashMap<u64, Tensor<T>> = HashMap::new();
        let mut stack = vec![self.clone()];
        while let Some(t) = stack.pop() {
            if nodes.contains_key(&t.id()) {
                continue;
            }
            if let Some(gf) = &t.node.grad_fn {
                for inp in &gf.inputs {
                    if inp.requires_grad() && !nodes.contains_key(&inp.id()) {
                        stack.push(inp.clone());
                    }
                }
            }
            nodes.insert(t.id(), t);
        }
        let mut order: Vec<u64> = nodes.keys().copied().collect();
        order.sort_unstable_by(|a, b| b.cmp(a));

        let mut pending: HashMap<u64, Vec<T>> = HashMap::new();
        pending.insert(self.id(), vec![T::one()]);

        for id in order {
            let node = &nodes[&id];
            let Some(g) = pending.remove(&id) else { continue };
            if let Some(gf) = &node.node.grad_fn {
                let needs: Vec<bool> = gf.inputs.iter().map(|t| t.requires_grad()).collect();
                let out = node.data();
                let grads = (gf.backward)(&BackwardArgs { grad_out: &g, out: &out, inputs: &gf.inputs, needs: &needs });
                drop(out);
                for ((inp, need), ig) in gf.inputs.iter().zip(&needs).zip(grads) {
                    if !*need {
                        continue;
                    }
                    let ig = ig.expect("backward omitted a required gradient");
                    debug_assert_eq!(ig.len(), inp.numel(), "{} gradient length", gf.op);
                    if ig.iter().any(|v| !v.is_finite()) {
                        return Err(TensorError::NonFinite { op: gf.op });
                    }
                    match pending.get_mut(&inp.id()) {
                        Some(acc) => acc.iter_mut().zip(&ig).for_each(|(a, b)| *a = *a + *b),
                        None => {
                            pending.insert(inp.id(), ig);
                        }
                    }
                }
            }
            let mut slot = node.node.grad.lock().expect("grad lock poisoned");
            match slot.as_mut() {
                Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a = *a + *b),
                None => *slot = Some(g),
            }
        }
        Ok(())
    }
}
