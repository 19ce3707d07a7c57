//! Minimal dense tensor engine with reverse-mode gradients.
//!
//! Feature maps use channel-major `C×H×W` layout (row-major inside a channel);
//! ops that accept a batch axis take `N×C×H×W`. A [`Tensor`] is an immutable,
//! cheaply clonable handle. Ops record their inputs and a backward closure when
//! any input requires a gradient and recording is enabled (see [`no_grad`]);
//! [`Tensor::backward`] walks that graph and accumulates into the gradient
//! slots of leaf tensors. Accumulation is additive: zero explicitly between
//! steps.

mod conv;
mod element;
pub mod gradcheck;
mod loss;
mod ops;
mod roi_align;
pub mod stats;

use std::cell::Cell;
use std::collections::{HashMap, HashSet};
use std::fmt;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};

pub use conv::{
    adaptive_avg_pool, bilinear_resize, conv2d, depthwise_xcorr, max_pool2d, Conv2dSpec,
};
pub use element::{gemm, Element, MatMut, MatRef};
pub use loss::{bce_with_logits, focal_loss, masked_l1, smooth_l1, FocalParams};
pub use ops::{concat, linear, matmul};
pub use roi_align::{roi_align, RoiBox};

use crate::error::{Error, Result};

static NEXT_ID: AtomicU64 = AtomicU64::new(1);

thread_local! {
    static GRAD_ENABLED: Cell<bool> = const { Cell::new(true) };
}

/// Runs `f` without recording any graph on this thread.
pub fn no_grad<T>(f: impl FnOnce() -> T) -> T {
    let prev = GRAD_ENABLED.with(|g| g.replace(false));
    struct Restore(bool);
    impl Drop for Restore {
        fn drop(&mut self) {
            GRAD_ENABLED.with(|g| g.set(self.0));
        }
    }
    let _restore = Restore(prev);
    f()
}

pub fn grad_enabled() -> bool {
    GRAD_ENABLED.with(Cell::get)
}

/// Contiguous element storage, counted by the allocation tracker.
struct Buffer<E> {
    data: Vec<E>,
}

impl<E> Buffer<E> {
    fn new(data: Vec<E>) -> Self {
        stats::track_alloc(data.len() * std::mem::size_of::<E>());
        Self { data }
    }
}

impl<E> Drop for Buffer<E> {
    fn drop(&mut self) {
        stats::track_free(self.data.len() * std::mem::size_of::<E>());
    }
}

/// Everything a backward closure may read.
pub(crate) struct BackwardCtx<'a, E: Element> {
    /// Gradient of the loss w.r.t. this op's output.
    pub grad: &'a [E],
    pub inputs: &'a [Tensor<E>],
    pub output: &'a [E],
}

impl<E: Element> BackwardCtx<'_, E> {
    /// Whether input `i` needs a gradient at all.
    pub fn needs(&self, i: usize) -> bool {
        self.inputs[i].requires_grad()
    }
}

pub(crate) type BackwardFn<E> =
    Box<dyn Fn(&BackwardCtx<'_, E>) -> Vec<Option<Vec<E>>> + Send + Sync>;

struct GradFn<E: Element> {
    op: &'static str,
    inputs: Vec<Tensor<E>>,
    backward: BackwardFn<E>,
}

struct Node<E: Element> {
    id: u64,
    shape: Vec<usize>,
    buffer: Arc<Buffer<E>>,
    requires_grad: bool,
    grad_fn: Option<GradFn<E>>,
    grad: Mutex<Option<Vec<E>>>,
}

/// Dense n-dimensional array of `E` with an optional gradient slot.
pub struct Tensor<E: Element = f32> {
    node: Arc<Node<E>>,
}

impl<E: Element> Clone for Tensor<E> {
    fn clone(&self) -> Self {
        Self { node: Arc::clone(&self.node) }
    }
}

impl<E: Element> fmt::Debug for Tensor<E> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let preview: Vec<E> = self.data().iter().take(8).copied().collect();
        f.debug_struct("Tensor")
            .field("shape", &self.shape())
            .field("dtype", &E::DTYPE)
            .field("requires_grad", &self.requires_grad())
            .field("data", &preview)
            .finish()
    }
}

pub(crate) fn numel_of(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl<E: Element> Tensor<E> {
    fn from_parts(shape: Vec<usize>, buffer: Arc<Buffer<E>>, requires_grad: bool, grad_fn: Option<GradFn<E>>) -> Self {
        debug_assert_eq!(numel_of(&shape), buffer.data.len());
        Self {
            node: Arc::new(Node {
                id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
                shape,
                buffer,
                requires_grad,
                grad_fn,
                grad: Mutex::new(None),
            }),
        }
    }

    /// A constant tensor. Fails if `data.len() != product(shape)` or any extent is zero.
    pub fn new(data: Vec<E>, shape: &[usize]) -> Result<Self> {
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::shape(format!("zero extent in shape {shape:?}")));
        }
        if numel_of(shape) != data.len() {
            return Err(Error::shape(format!(
                "shape {shape:?} needs {} elements, got {}",
                numel_of(shape),
                data.len()
            )));
        }
        Ok(Self::from_parts(shape.to_vec(), Arc::new(Buffer::new(data)), false, None))
    }

    /// Like [`Tensor::new`] but marks the tensor as a gradient-accumulating leaf.
    pub fn param(data: Vec<E>, shape: &[usize]) -> Result<Self> {
        Ok(Self::new(data, shape)?.with_requires_grad(true))
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, E::zero())
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, E::one())
    }

    pub fn full(shape: &[usize], v: E) -> Self {
        Self::new(vec![v; numel_of(shape)], shape).expect("valid shape")
    }

    pub fn scalar(v: E) -> Self {
        Self::new(vec![v], &[1]).expect("valid shape")
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> E) -> Self {
        let data = (0..numel_of(shape)).map(&mut f).collect();
        Self::new(data, shape).expect("valid shape")
    }

    /// Builds an op result. The graph edge is recorded only when recording is
    /// enabled and some input requires a gradient.
    pub(crate) fn from_op(
        op: &'static str,
        data: Vec<E>,
        shape: Vec<usize>,
        inputs: Vec<Tensor<E>>,
        backward: BackwardFn<E>,
    ) -> Self {
        let track = grad_enabled() && inputs.iter().any(Tensor::requires_grad);
        let buffer = Arc::new(Buffer::new(data));
        if track {
            Self::from_parts(shape, buffer, true, Some(GradFn { op, inputs, backward }))
        } else {
            Self::from_parts(shape, buffer, false, None)
        }
    }

    /// Shares this tensor's buffer under a new shape (recorded as an op).
    pub(crate) fn share_with_shape(&self, shape: Vec<usize>, op: &'static str) -> Self {
        let track = grad_enabled() && self.requires_grad();
        if track {
            let backward: BackwardFn<E> = Box::new(|ctx| vec![Some(ctx.grad.to_vec())]);
            Self::from_parts(
                shape,
                Arc::clone(&self.node.buffer),
                true,
                Some(GradFn { op, inputs: vec![self.clone()], backward }),
            )
        } else {
            Self::from_parts(shape, Arc::clone(&self.node.buffer), false, None)
        }
    }

    /// Same data, no graph history, gradient flag cleared.
    pub fn detach(&self) -> Self {
        Self::from_parts(self.node.shape.clone(), Arc::clone(&self.node.buffer), false, None)
    }

    /// Same data as a fresh leaf with the given gradient flag.
    pub fn with_requires_grad(&self, requires_grad: bool) -> Self {
        Self::from_parts(self.node.shape.clone(), Arc::clone(&self.node.buffer), requires_grad, None)
    }

    pub fn id(&self) -> u64 {
        self.node.id
    }

    pub fn shape(&self) -> &[usize] {
        &self.node.shape
    }

    pub fn dims(&self) -> usize {
        self.node.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.node.buffer.data.len()
    }

    pub fn data(&self) -> &[E] {
        &self.node.buffer.data
    }

    pub fn to_vec(&self) -> Vec<E> {
        self.data().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.node.requires_grad
    }

    pub fn is_leaf(&self) -> bool {
        self.node.grad_fn.is_none()
    }

    /// Name of the op that produced this tensor, if it was recorded.
    pub fn op_name(&self) -> Option<&'static str> {
        self.node.grad_fn.as_ref().map(|g| g.op)
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> E {
        assert_eq!(self.numel(), 1, "item() on a tensor with {} elements", self.numel());
        self.data()[0]
    }

    /// Accumulated gradient of a leaf, if any has been written.
    pub fn grad(&self) -> Option<Vec<E>> {
        self.node.grad.lock().expect("grad lock").clone()
    }

    pub fn zero_grad(&self) {
        *self.node.grad.lock().expect("grad lock") = None;
    }

    fn accumulate_grad(&self, g: &[E]) {
        let mut slot = self.node.grad.lock().expect("grad lock");
        match slot.as_mut() {
            Some(acc) => acc.iter_mut().zip(g).for_each(|(a, &b)| *a += b),
            None => *slot = Some(g.to_vec()),
        }
    }

    /// Mutates the values of a leaf in place (used by optimizers). If the
    /// buffer is shared, it is copied first so other holders are unaffected.
    pub fn update_data(&mut self, f: impl FnOnce(&mut [E])) {
        if let Some(node) = Arc::get_mut(&mut self.node) {
            if node.grad_fn.is_none() {
                if let Some(buf) = Arc::get_mut(&mut node.buffer) {
                    f(&mut buf.data);
                    return;
                }
            }
        }
        let mut data = self.to_vec();
        f(&mut data);
        let grad = self.grad();
        let fresh = Self::from_parts(self.node.shape.clone(), Arc::new(Buffer::new(data)), self.requires_grad(), None);
        if let Some(g) = grad {
            fresh.accumulate_grad(&g);
        }
        *self = fresh;
    }

    /// True when every element is finite.
    pub fn all_finite(&self) -> bool {
        self.data().iter().all(|v| v.is_finite())
    }

    /// Converts to another element type, producing a constant.
    pub fn cast<F: Element>(&self) -> Tensor<F> {
        let data = self.data().iter().map(|v| F::from_f64_lossy(v.to_f64_lossy())).collect();
        Tensor::new(data, self.shape()).expect("same shape")
    }

    /// Reverse-mode sweep from a one-element tensor.
    pub fn backward(&self) -> Result<()> {
        if self.numel() != 1 {
            return Err(Error::shape(format!(
                "backward needs a scalar, got shape {:?}",
                self.shape()
            )));
        }
        self.backward_with(vec![E::one()])
    }

    /// Reverse-mode sweep seeded with an explicit output gradient.
    pub fn backward_with(&self, seed: Vec<E>) -> Result<()> {
        if seed.len() != self.numel() {
            return Err(Error::shape("backward seed length mismatch"));
        }
        if !self.requires_grad() {
            return Ok(());
        }
        let order = self.topo_order();
        let mut grads: HashMap<u64, Vec<E>> = HashMap::new();
        grads.insert(self.id(), seed);
        for t in order.iter().rev() {
            let Some(g) = grads.remove(&t.id()) else { continue };
            match &t.node.grad_fn {
                None => {
                    if t.requires_grad() {
                        t.accumulate_grad(&g);
                    }
                }
                Some(gf) => {
                    let ctx = BackwardCtx { grad: &g, inputs: &gf.inputs, output: t.data() };
                    let input_grads = (gf.backward)(&ctx);
                    debug_assert_eq!(input_grads.len(), gf.inputs.len(), "op {}", gf.op);
                    for (inp, ig) in gf.inputs.iter().zip(input_grads) {
                        let Some(ig) = ig else { continue };
                        if !inp.requires_grad() {
                            continue;
                        }
                        debug_assert_eq!(ig.len(), inp.numel(), "grad length from op {}", gf.op);
                        match grads.get_mut(&inp.id()) {
                            Some(acc) => acc.iter_mut().zip(&ig).for_each(|(a, &b)| *a += b),
                            None => {
                                grads.insert(inp.id(), ig);
                            }
                        }
                    }
                }
            }
        }
        Ok(())
    }

    /// Post-order over the recorded graph (inputs before consumers).
    fn topo_order(&self) -> Vec<Tensor<E>> {
        let mut order = Vec::new();
        let mut visited = HashSet::new();
        let mut stack: Vec<(Tensor<E>, bool)> = vec![(self.clone(), false)];
        while let Some((t, expanded)) = stack.pop() {
            if expanded {
                order.push(t);
                continue;
            }
            if !visited.insert(t.id()) {
                continue;
            }
            stack.push((t.clone(), true));
            if let Some(gf) = &t.node.grad_fn {
                for inp in &gf.inputs {
                    if inp.requires_grad() && !visited.contains(&inp.id()) {
                        stack.push((inp.clone(), false));
                    }
                }
            }
        }
        order
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_bad_shapes() {
        assert!(Tensor::<f32>::new(vec![1.0; 5], &[2, 3]).is_err());
        assert!(Tensor::<f32>::new(vec![], &[0, 3]).is_err());
    }

    #[test]
    fn gradient_accumulates_until_zeroed() {
        let x = Tensor::<f64>::param(vec![1.0, 2.0], &[2]).unwrap();
        x.sum().backward().unwrap();
        x.sum().backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![2.0, 2.0]);
        x.zero_grad();
        assert!(x.grad().is_none());
    }

    #[test]
    fn no_grad_records_nothing() {
        let x = Tensor::<f32>::param(vec![1.0, 2.0], &[2]).unwrap();
        let y = no_grad(|| x.scale(2.0));
        assert!(!y.requires_grad());
        assert!(grad_enabled());
    }

    #[test]
    fn diamond_graph_sums_both_paths() {
        let x = Tensor::<f64>::param(vec![3.0], &[1]).unwrap();
        let a = x.scale(2.0);
        let b = x.mul(&x).unwrap();
        a.add(&b).unwrap().sum().backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![2.0 + 6.0]);
    }

    #[test]
    fn update_data_in_place_and_when_shared() {
        let mut x = Tensor::<f32>::param(vec![1.0, 2.0], &[2]).unwrap();
        x.update_data(|d| d[0] = 5.0);
        assert_eq!(x.data(), &[5.0, 2.0]);
        let alias = x.clone();
        x.update_data(|d| d[1] = 7.0);
        assert_eq!(x.data(), &[5.0, 7.0]);
        assert_eq!(alias.data(), &[5.0, 2.0]);
        assert!(x.requires_grad());
    }

    #[test]
    fn allocation_tracking_sees_live_buffers() {
        stats::reset_peak();
        let before = stats::peak_bytes();
        let t = Tensor::<f32>::zeros(&[1024]);
        assert!(stats::peak_bytes() >= before + 4096 || stats::peak_bytes() >= 4096);
        drop(t);
    }
}
