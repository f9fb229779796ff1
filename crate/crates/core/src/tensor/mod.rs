//! Dense `f64` tensors with reverse-mode automatic differentiation.
//!
//! A [`Tensor`] is a cheap handle to a shared node. Leaves hold parameters or
//! constants; every operation on a tensor that requires a gradient records the
//! operation and its operands, forming an acyclic graph. Node ids are handed
//! out monotonically at creation time and an operation's operands always
//! exist before its result, so sorting reachable nodes by descending id is a
//! valid reverse topological order for [`Tensor::backward`].
//!
//! Reductions accumulate sequentially in index order, so identical inputs
//! always produce bit-identical outputs and gradients.

mod loss;
mod ops;

use std::cmp::Reverse;
use std::collections::{HashMap, HashSet};
use std::fmt;
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::{Arc, Mutex, RwLock, RwLockReadGuard};

use crate::error::{Error, Result};

pub use loss::{cross_entropy, cross_entropy_labels, entropy, kl_alignment, mse, LOG_FLOOR};
pub use ops::NormStats;
pub(crate) use ops::Op;

static NEXT_ID: AtomicU64 = AtomicU64::new(0);

/// Handle to a node of the computation graph.
#[derive(Clone)]
pub struct Tensor(Arc<Inner>);

struct Inner {
    id: u64,
    shape: Vec<usize>,
    data: RwLock<Vec<f64>>,
    grad: Mutex<Option<Vec<f64>>>,
    requires_grad: AtomicBool,
    op: Option<Op>,
}

impl Tensor {
    fn build(data: Vec<f64>, shape: Vec<usize>, requires_grad: bool, op: Option<Op>) -> Self {
        debug_assert_eq!(data.len(), shape.iter().product::<usize>());
        Tensor(Arc::new(Inner {
            id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
            shape,
            data: RwLock::new(data),
            grad: Mutex::new(None),
            requires_grad: AtomicBool::new(requires_grad),
            op,
        }))
    }

    /// Constant tensor. Fails if `shape` has a zero dimension or does not
    /// match the buffer length.
    pub fn new(data: Vec<f64>, shape: &[usize]) -> Result<Self> {
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::InvalidArgument(format!(
                "shape {shape:?} has a zero-sized dimension"
            )));
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::InvalidArgument(format!(
                "shape {shape:?} needs {numel} values, buffer has {}",
                data.len()
            )));
        }
        Ok(Self::build(data, shape.to_vec(), false, None))
    }

    /// Trainable leaf with a zeroed gradient buffer.
    pub fn parameter(data: Vec<f64>, shape: &[usize]) -> Result<Self> {
        let t = Self::new(data, shape)?;
        t.set_requires_grad(true);
        Ok(t)
    }

    pub fn scalar(value: f64) -> Self {
        Self::build(vec![value], Vec::new(), false, None)
    }

    pub fn zeros(shape: &[usize]) -> Result<Self> {
        Self::new(vec![0.0; shape.iter().product()], shape)
    }

    /// Row-major `rows × cols` constant.
    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Self::new(data, &[rows, cols])
    }

    /// `labels.len() × classes` one-hot constant.
    pub fn one_hot(labels: &[usize], classes: usize) -> Result<Self> {
        let mut data = vec![0.0; labels.len() * classes];
        for (row, &label) in labels.iter().enumerate() {
            if label >= classes {
                return Err(Error::InvalidArgument(format!(
                    "label {label} out of range for {classes} classes"
                )));
            }
            data[row * classes + label] = 1.0;
        }
        Self::new(data, &[labels.len(), classes])
    }

    pub(crate) fn from_op(data: Vec<f64>, shape: Vec<usize>, op: Op) -> Self {
        if op.parents().iter().any(|p| p.requires_grad()) {
            Self::build(data, shape, true, Some(op))
        } else {
            Self::build(data, shape, false, None)
        }
    }

    pub fn id(&self) -> u64 {
        self.0.id
    }

    pub fn shape(&self) -> &[usize] {
        &self.0.shape
    }

    pub fn numel(&self) -> usize {
        self.0.shape.iter().product()
    }

    /// `(rows, cols)` view where `cols` is the last dimension.
    pub fn rows_cols(&self) -> (usize, usize) {
        match self.0.shape.split_last() {
            None => (1, 1),
            Some((&cols, lead)) => (lead.iter().product(), cols),
        }
    }

    pub fn data(&self) -> RwLockReadGuard<'_, Vec<f64>> {
        self.0.data.read().expect("tensor data lock poisoned")
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.data().clone()
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> Result<f64> {
        if self.numel() != 1 {
            return Err(Error::NotScalar(self.shape().to_vec()));
        }
        Ok(self.data()[0])
    }

    /// Overwrites the values of a leaf in place.
    pub fn set_values(&self, values: &[f64]) -> Result<()> {
        if values.len() != self.numel() {
            return Err(Error::Shape {
                op: "set_values",
                left: self.shape().to_vec(),
                right: vec![values.len()],
            });
        }
        self.0
            .data
            .write()
            .expect("tensor data lock poisoned")
            .copy_from_slice(values);
        Ok(())
    }

    pub(crate) fn update_values(&self, f: impl FnOnce(&mut [f64])) {
        f(&mut self.0.data.write().expect("tensor data lock poisoned"));
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad.load(Ordering::Relaxed)
    }

    /// Marks a leaf as trainable (allocating a zero gradient) or frozen
    /// (dropping any gradient). Has no effect on graph nodes.
    pub fn set_requires_grad(&self, flag: bool) {
        if self.0.op.is_some() {
            return;
        }
        self.0.requires_grad.store(flag, Ordering::Relaxed);
        let mut grad = self.0.grad.lock().expect("grad lock poisoned");
        *grad = flag.then(|| vec![0.0; self.numel()]);
    }

    pub fn is_leaf(&self) -> bool {
        self.0.op.is_none()
    }

    pub fn grad(&self) -> Option<Vec<f64>> {
        self.0.grad.lock().expect("grad lock poisoned").clone()
    }

    pub fn zero_grad(&self) {
        if let Some(g) = self.0.grad.lock().expect("grad lock poisoned").as_mut() {
            g.iter_mut().for_each(|v| *v = 0.0);
        }
    }

    fn accumulate_grad(&self, incoming: &[f64]) {
        let mut grad = self.0.grad.lock().expect("grad lock poisoned");
        match grad.as_mut() {
            Some(g) => g.iter_mut().zip(incoming).for_each(|(a, b)| *a += b),
            None => *grad = Some(incoming.to_vec()),
        }
    }

    /// A constant copy that no gradient flows through.
    pub fn detach(&self) -> Tensor {
        Self::build(self.to_vec(), self.shape().to_vec(), false, None)
    }

    /// Back-propagates from a scalar loss. Gradients accumulate across calls
    /// until cleared with [`Tensor::zero_grad`].
    pub fn backward(&self) -> Result<()> {
        self.backward_counted().map(|_| ())
    }

    /// As [`Tensor::backward`], returning the number of graph nodes visited.
    pub fn backward_counted(&self) -> Result<usize> {
        if self.numel() != 1 {
            return Err(Error::NotScalar(self.shape().to_vec()));
        }
        if !self.requires_grad() {
            return Ok(0);
        }

        let mut seen = HashSet::new();
        let mut stack = vec![self.clone()];
        let mut nodes = Vec::new();
        while let Some(node) = stack.pop() {
            if !seen.insert(node.id()) {
                continue;
            }
            if let Some(op) = &node.0.op {
                for parent in op.parents() {
                    if parent.requires_grad() && !seen.contains(&parent.id()) {
                        stack.push(parent.clone());
                    }
                }
            }
            nodes.push(node);
        }
        nodes.sort_by_key(|n| Reverse(n.id()));

        let mut pending: HashMap<u64, Vec<f64>> = HashMap::new();
        pending.insert(self.id(), vec![1.0]);
        let mut visited = 0;
        for node in &nodes {
            let Some(grad) = pending.remove(&node.id()) else {
                continue;
            };
            visited += 1;
            if let Some(op) = &node.0.op {
                let out = node.data();
                op.backward(&out, &grad, &mut |parent: &Tensor, g: Vec<f64>| {
                    if !parent.requires_grad() {
                        return;
                    }
                    match pending.get_mut(&parent.id()) {
                        Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                        None => {
                            pending.insert(parent.id(), g);
                        }
                    }
                });
            }
            node.accumulate_grad(&grad);
        }
        Ok(visited)
    }
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("id", &self.id())
            .field("shape", &self.shape())
            .field("requires_grad", &self.requires_grad())
            .field("leaf", &self.is_leaf())
            .finish()
    }
}
