//! Dense `f64` tensors with tape-based reverse-mode automatic differentiation.
//!
//! Every differentiable op records a node holding its inputs and a backward
//! rule. [`ComputationTape::record`] linearises the graph reachable from a
//! scalar loss into topological order; [`ComputationTape::backward`] replays
//! the backward rules in reverse and accumulates gradients into leaf tensors
//! created with [`Tensor::param`].
//!
//! Tensor data is immutable once created. Only the gradient buffer of a leaf
//! changes, so graphs can be shared freely between threads.

mod conv;
pub(crate) mod gemm;
mod io;
mod norm;
mod ops;

use std::cell::Cell;
use std::collections::HashMap;
use std::fmt;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};

pub use conv::{
    add_channel_bias, conv2d, conv_transpose2d, depthwise_conv2d, max_pool2d, upsample,
    UpsampleMode,
};
pub use io::{read_tensor, write_tensor, TENSOR_MAGIC};
pub use norm::{batch_norm2d, layer_norm, RunningStats};
pub use ops::{sigmoid, silu, silu_grad};

use crate::error::{Error, Result};

static NEXT_ID: AtomicU64 = AtomicU64::new(1);

thread_local! {
    static GRAD_ENABLED: Cell<bool> = const { Cell::new(true) };
}

/// Runs `f` without recording any operations on the tape.
pub fn no_grad<R>(f: impl FnOnce() -> R) -> R {
    struct Restore(bool);
    impl Drop for Restore {
        fn drop(&mut self) {
            GRAD_ENABLED.with(|g| g.set(self.0));
        }
    }
    let _restore = Restore(GRAD_ENABLED.with(|g| g.replace(false)));
    f()
}

pub fn is_grad_enabled() -> bool {
    GRAD_ENABLED.with(|g| g.get())
}

/// Backward rule: receives the output gradient and a per-input "needs grad"
/// mask, returns one optional gradient per input.
pub(crate) type BackwardFn = Box<dyn Fn(&[f64], &[bool]) -> Vec<Option<Vec<f64>>> + Send + Sync>;

struct Node {
    op: &'static str,
    inputs: Vec<Tensor>,
    backward: BackwardFn,
}

struct Inner {
    id: u64,
    shape: Vec<usize>,
    data: Arc<Vec<f64>>,
    requires_grad: bool,
    grad: Mutex<Option<Vec<f64>>>,
    node: Option<Node>,
}

/// A reference-counted handle to an immutable dense tensor.
#[derive(Clone)]
pub struct Tensor(Arc<Inner>);

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut d = f.debug_struct("Tensor");
        d.field("shape", &self.0.shape);
        if self.numel() <= 16 {
            d.field("data", &self.data());
        }
        d.field("requires_grad", &self.0.requires_grad)
            .field("op", &self.0.node.as_ref().map(|n| n.op))
            .finish()
    }
}

pub(crate) fn numel_of(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl Tensor {
    fn build(shape: Vec<usize>, data: Arc<Vec<f64>>, requires_grad: bool, node: Option<Node>) -> Self {
        debug_assert_eq!(numel_of(&shape), data.len());
        Tensor(Arc::new(Inner {
            id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
            shape,
            data,
            requires_grad,
            grad: Mutex::new(None),
            node,
        }))
    }

    /// Creates a constant tensor, checking that `data` fills `shape`.
    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        if shape.contains(&0) {
            return Err(Error::dim("new", format!("zero-sized axis in shape {shape:?}")));
        }
        if numel_of(shape) != data.len() {
            return Err(Error::dim(
                "new",
                format!("shape {shape:?} needs {} values, got {}", numel_of(shape), data.len()),
            ));
        }
        Ok(Self::build(shape.to_vec(), Arc::new(data), false, None))
    }

    /// Creates a trainable leaf whose gradient is populated by `backward`.
    pub fn param(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        let t = Self::new(shape, data)?;
        Ok(Self::build(t.0.shape.clone(), t.0.data.clone(), true, None))
    }

    pub fn scalar(value: f64) -> Self {
        Self::build(Vec::new(), Arc::new(vec![value]), false, None)
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, 1.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        Self::build(shape.to_vec(), Arc::new(vec![value; numel_of(shape)]), false, None)
    }

    /// Output of a differentiable op. The node is dropped when no input is
    /// tracked or recording is disabled.
    pub(crate) fn from_op(
        op: &'static str,
        shape: Vec<usize>,
        data: Vec<f64>,
        inputs: Vec<Tensor>,
        backward: BackwardFn,
    ) -> Self {
        let track = is_grad_enabled() && inputs.iter().any(Tensor::is_tracked);
        let node = track.then(|| Node {
            op,
            inputs,
            backward,
        });
        Self::build(shape, Arc::new(data), false, node)
    }

    /// Same data under a new shape, sharing the buffer.
    pub(crate) fn from_shared(
        op: &'static str,
        shape: Vec<usize>,
        data: Arc<Vec<f64>>,
        inputs: Vec<Tensor>,
        backward: BackwardFn,
    ) -> Self {
        let track = is_grad_enabled() && inputs.iter().any(Tensor::is_tracked);
        let node = track.then(|| Node {
            op,
            inputs,
            backward,
        });
        Self::build(shape, data, false, node)
    }

    pub fn id(&self) -> u64 {
        self.0.id
    }

    pub fn shape(&self) -> &[usize] {
        &self.0.shape
    }

    pub fn rank(&self) -> usize {
        self.0.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.0.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.0.data
    }

    pub(crate) fn shared_data(&self) -> Arc<Vec<f64>> {
        self.0.data.clone()
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.0.data.as_ref().clone()
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> Result<f64> {
        if self.numel() != 1 {
            return Err(Error::Contract(format!(
                "item() on tensor of shape {:?}",
                self.shape()
            )));
        }
        Ok(self.0.data[0])
    }

    /// True for leaves created with [`Tensor::param`].
    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    /// True when gradients can flow through this tensor.
    pub fn is_tracked(&self) -> bool {
        self.0.requires_grad || self.0.node.is_some()
    }

    /// Operands of the op that produced this tensor; empty for leaves.
    pub fn inputs(&self) -> &[Tensor] {
        self.0.node.as_ref().map(|n| n.inputs.as_slice()).unwrap_or(&[])
    }

    pub fn op_name(&self) -> Option<&'static str> {
        self.0.node.as_ref().map(|n| n.op)
    }

    pub fn grad(&self) -> Option<Vec<f64>> {
        self.0.grad.lock().expect("grad lock").clone()
    }

    pub fn zero_grad(&self) {
        *self.0.grad.lock().expect("grad lock") = None;
    }

    fn accumulate_grad(&self, g: &[f64]) {
        let mut slot = self.0.grad.lock().expect("grad lock");
        match slot.as_mut() {
            Some(acc) => acc.iter_mut().zip(g).for_each(|(a, b)| *a += b),
            None => *slot = Some(g.to_vec()),
        }
    }

    /// A constant copy cut off from the graph.
    pub fn detach(&self) -> Tensor {
        Self::build(self.0.shape.clone(), self.0.data.clone(), false, None)
    }

    /// Fresh trainable leaf with the same data.
    pub fn detach_param(&self) -> Tensor {
        Self::build(self.0.shape.clone(), self.0.data.clone(), true, None)
    }

    /// Runs reverse-mode differentiation from this scalar.
    pub fn backward(&self) -> Result<()> {
        backward(self)
    }
}

/// Topologically ordered list of tracked tensors reachable from a root.
pub struct ComputationTape {
    order: Vec<Tensor>,
    index: HashMap<u64, usize>,
}

impl ComputationTape {
    /// Records every tracked ancestor of `root`; inputs precede outputs and
    /// `root` is last.
    pub fn record(root: &Tensor) -> Self {
        let mut order = Vec::new();
        let mut index = HashMap::new();
        if !root.is_tracked() {
            return Self { order, index };
        }
        // iterative post-order DFS
        let mut stack: Vec<(Tensor, usize)> = vec![(root.clone(), 0)];
        let mut visiting: HashMap<u64, ()> = HashMap::new();
        visiting.insert(root.id(), ());
        while let Some((t, child)) = stack.pop() {
            let inputs: &[Tensor] = t.0.node.as_ref().map(|n| n.inputs.as_slice()).unwrap_or(&[]);
            if child < inputs.len() {
                let next = inputs[child].clone();
                stack.push((t, child + 1));
                if next.is_tracked() && !visiting.contains_key(&next.id()) {
                    visiting.insert(next.id(), ());
                    stack.push((next, 0));
                }
            } else {
                index.insert(t.id(), order.len());
                order.push(t);
            }
        }
        Self { order, index }
    }

    pub fn len(&self) -> usize {
        self.order.len()
    }

    pub fn is_empty(&self) -> bool {
        self.order.is_empty()
    }

    /// Op names in recorded order (`None` for leaves).
    pub fn ops(&self) -> impl Iterator<Item = Option<&'static str>> + '_ {
        self.order.iter().map(Tensor::op_name)
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.order
    }

    /// Replays backward rules in reverse order, seeding the root with 1.
    pub fn backward(&self) -> Result<()> {
        let Some(root) = self.order.last() else {
            return Ok(());
        };
        if root.numel() != 1 {
            return Err(Error::Contract(format!(
                "backward() needs a scalar loss, got shape {:?}",
                root.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.order.len()];
        grads[self.order.len() - 1] = Some(vec![1.0]);
        for pos in (0..self.order.len()).rev() {
            let Some(g) = grads[pos].take() else { continue };
            let t = &self.order[pos];
            if t.0.requires_grad {
                t.accumulate_grad(&g);
            }
            let Some(node) = t.0.node.as_ref() else { continue };
            let needs: Vec<bool> = node.inputs.iter().map(Tensor::is_tracked).collect();
            let input_grads = (node.backward)(&g, &needs);
            debug_assert_eq!(input_grads.len(), node.inputs.len(), "op {}", node.op);
            for (input, ig) in node.inputs.iter().zip(input_grads) {
                let Some(ig) = ig else { continue };
                let Some(&ipos) = self.index.get(&input.id()) else { continue };
                debug_assert_eq!(ig.len(), input.numel(), "grad size for op {}", node.op);
                match grads[ipos].as_mut() {
                    Some(acc) => acc.iter_mut().zip(&ig).for_each(|(a, b)| *a += b),
                    None => grads[ipos] = Some(ig),
                }
            }
        }
        Ok(())
    }
}

/// Populates `grad` on every trainable ancestor of the scalar `loss`.
/// Repeated calls accumulate.
pub fn backward(loss: &Tensor) -> Result<()> {
    if loss.numel() != 1 {
        return Err(Error::Contract(format!(
            "backward() needs a scalar loss, got shape {:?}",
            loss.shape()
        )));
    }
    ComputationTape::record(loss).backward()
}
