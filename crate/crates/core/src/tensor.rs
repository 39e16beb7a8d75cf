//! Rank-4 NCHW tensors with reverse-mode automatic differentiation.
//!
//! Every tensor is a flat f32 buffer behind a cheap-to-clone handle.
//! Operations record a backward closure on a dynamic graph whenever gradient
//! tracking is enabled and an input requires gradients; [`backward`] walks
//! the recorded graph in reverse topological order and accumulates gradients
//! into the leaves. Gradients accumulate across backward calls until
//! [`Tensor::zero_grad`] resets them.
//!
//! Graphs are per-thread (handles are not `Send`); a given graph must be
//! recorded and differentiated on a single thread.

use std::cell::{Cell, Ref, RefCell};
use std::collections::HashSet;
use std::fmt;
use std::rc::Rc;

use crate::error::{Error, Result};

/// NCHW dimensions.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct Shape {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Shape {
    pub fn new(n: usize, c: usize, h: usize, w: usize) -> Self {
        Shape { n, c, h, w }
    }

    pub fn numel(&self) -> usize {
        self.n * self.c * self.h * self.w
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({},{},{},{})", self.n, self.c, self.h, self.w)
    }
}

thread_local! {
    static GRAD_ENABLED: Cell<bool> = const { Cell::new(true) };
    static NEXT_ID: Cell<u64> = const { Cell::new(0) };
}

fn next_id() -> u64 {
    NEXT_ID.with(|c| {
        let id = c.get();
        c.set(id + 1);
        id
    })
}

pub fn grad_enabled() -> bool {
    GRAD_ENABLED.with(|g| g.get())
}

struct GradGuard(bool);

impl Drop for GradGuard {
    fn drop(&mut self) {
        GRAD_ENABLED.with(|g| g.set(self.0));
    }
}

/// Runs `f` with gradient recording disabled (inference).
pub fn no_grad<T>(f: impl FnOnce() -> T) -> T {
    let _guard = GradGuard(GRAD_ENABLED.with(|g| g.replace(false)));
    f()
}

/// One recorded graph node: the op tag, the tensors it consumed, and the
/// rule that routes an upstream gradient into those parents.
struct Node {
    #[allow(dead_code)]
    op: &'static str,
    parents: Vec<Tensor>,
    backward: Box<dyn Fn(&[f32])>,
}

struct Inner {
    id: u64,
    shape: Shape,
    data: RefCell<Vec<f32>>,
    grad: RefCell<Option<Vec<f32>>>,
    requires_grad: Cell<bool>,
    node: RefCell<Option<Node>>,
}

/// A rank-4 NCHW f32 tensor. Cloning copies the handle, not the buffer.
pub struct Tensor {
    inner: Rc<Inner>,
}

impl Clone for Tensor {
    fn clone(&self) -> Self {
        Tensor {
            inner: Rc::clone(&self.inner),
        }
    }
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "Tensor(id={}, shape={}, requires_grad={})",
            self.inner.id,
            self.shape(),
            self.requires_grad()
        )
    }
}

impl Tensor {
    /// Leaf tensor from explicit values. `requires_grad` defaults to false.
    pub fn from_vec(shape: Shape, values: Vec<f32>) -> Result<Tensor> {
        if shape.n < 1 || shape.c < 1 || shape.h < 1 || shape.w < 1 {
            return Err(Error::Shape(format!("all dims must be >= 1, got {shape}")));
        }
        if values.len() != shape.numel() {
            return Err(Error::Shape(format!(
                "value count {} does not match shape {} ({} elements)",
                values.len(),
                shape,
                shape.numel()
            )));
        }
        Ok(Self::leaf_unchecked(shape, values))
    }

    pub fn zeros(shape: Shape) -> Tensor {
        Self::leaf_unchecked(shape, vec![0.0; shape.numel()])
    }

    pub fn full(shape: Shape, value: f32) -> Tensor {
        Self::leaf_unchecked(shape, vec![value; shape.numel()])
    }

    /// Scalar-like tensor of shape (1,1,1,1).
    pub fn scalar(value: f32) -> Tensor {
        Self::leaf_unchecked(Shape::new(1, 1, 1, 1), vec![value])
    }

    pub(crate) fn leaf_unchecked(shape: Shape, data: Vec<f32>) -> Tensor {
        debug_assert_eq!(data.len(), shape.numel());
        Tensor {
            inner: Rc::new(Inner {
                id: next_id(),
                shape,
                data: RefCell::new(data),
                grad: RefCell::new(None),
                requires_grad: Cell::new(false),
                node: RefCell::new(None),
            }),
        }
    }

    /// Result of an operation. Records the node (making the output require
    /// gradients) only when tracking is enabled and some parent requires
    /// gradients; otherwise the output is an untracked leaf.
    pub(crate) fn from_op(
        shape: Shape,
        data: Vec<f32>,
        op: &'static str,
        parents: Vec<Tensor>,
        backward: impl Fn(&[f32]) + 'static,
    ) -> Tensor {
        let out = Self::leaf_unchecked(shape, data);
        if grad_enabled() && parents.iter().any(|p| p.requires_grad()) {
            out.inner.requires_grad.set(true);
            *out.inner.node.borrow_mut() = Some(Node {
                op,
                parents,
                backward: Box::new(backward),
            });
        }
        out
    }

    pub fn id(&self) -> u64 {
        self.inner.id
    }

    pub fn shape(&self) -> Shape {
        self.inner.shape
    }

    pub fn numel(&self) -> usize {
        self.inner.shape.numel()
    }

    /// Borrow the underlying buffer.
    pub fn data(&self) -> Ref<'_, [f32]> {
        Ref::map(self.inner.data.borrow(), |v| v.as_slice())
    }

    pub fn to_vec(&self) -> Vec<f32> {
        self.inner.data.borrow().clone()
    }

    /// Scalar value of a single-element tensor.
    pub fn item(&self) -> Result<f32> {
        if self.numel() != 1 {
            return Err(Error::Contract(format!(
                "item() requires a single-element tensor, got shape {}",
                self.shape()
            )));
        }
        Ok(self.inner.data.borrow()[0])
    }

    /// Overwrite the buffer in place (e.g. optimizer updates, running
    /// statistics). The caller is the single writer; any recorded graph that
    /// saved this tensor must not be differentiated after mutation.
    pub fn set_data(&self, values: &[f32]) -> Result<()> {
        if values.len() != self.numel() {
            return Err(Error::Shape(format!(
                "set_data length {} does not match shape {}",
                values.len(),
                self.shape()
            )));
        }
        self.inner.data.borrow_mut().copy_from_slice(values);
        Ok(())
    }

    /// Mutate the buffer in place through a closure.
    pub fn update_data(&self, f: impl FnOnce(&mut [f32])) {
        f(self.inner.data.borrow_mut().as_mut_slice());
    }

    pub fn requires_grad(&self) -> bool {
        self.inner.requires_grad.get()
    }

    pub fn set_requires_grad(&self, on: bool) {
        self.inner.requires_grad.set(on);
    }

    /// Builder-style `set_requires_grad(true)`.
    pub fn tracked(self) -> Tensor {
        self.set_requires_grad(true);
        self
    }

    /// Copy of the accumulated gradient, if backward has produced one.
    pub fn grad(&self) -> Option<Vec<f32>> {
        self.inner.grad.borrow().clone()
    }

    /// Reset the accumulated gradient.
    pub fn zero_grad(&self) {
        *self.inner.grad.borrow_mut() = None;
    }

    /// Add `g` into the gradient buffer (no-op for tensors that do not
    /// require gradients).
    pub(crate) fn accumulate_grad(&self, g: &[f32]) {
        if !self.requires_grad() {
            return;
        }
        debug_assert_eq!(g.len(), self.numel());
        let mut slot = self.inner.grad.borrow_mut();
        match slot.as_mut() {
            Some(buf) => {
                for (b, gi) in buf.iter_mut().zip(g) {
                    *b += gi;
                }
            }
            None => *slot = Some(g.to_vec()),
        }
    }

    fn is_op_output(&self) -> bool {
        self.inner.node.borrow().is_some()
    }
}

/// Post-order (parents before children) over the recorded graph.
fn topo_order(root: &Tensor) -> Vec<Tensor> {
    let mut order = Vec::new();
    let mut visited: HashSet<u64> = HashSet::new();
    let mut stack: Vec<(Tensor, bool)> = vec![(root.clone(), false)];
    while let Some((t, expanded)) = stack.pop() {
        if expanded {
            order.push(t);
            continue;
        }
        if !visited.insert(t.id()) {
            continue;
        }
        stack.push((t.clone(), true));
        if let Some(node) = t.inner.node.borrow().as_ref() {
            for p in &node.parents {
                if !visited.contains(&p.id()) {
                    stack.push((p.clone(), false));
                }
            }
        }
    }
    order
}

/// Reverse-mode differentiation from a scalar loss.
///
/// After the call, every leaf with `requires_grad` that the loss depends on
/// holds dLoss/dLeaf in its gradient buffer. Leaf gradients accumulate
/// additively across calls; intermediate gradients are scratch and reset at
/// the start of each call.
pub fn backward(loss: &Tensor) -> Result<()> {
    if loss.numel() != 1 {
        return Err(Error::Contract(format!(
            "backward requires a scalar loss, got shape {}",
            loss.shape()
        )));
    }
    if !loss.requires_grad() {
        return Err(Error::Contract(
            "backward requires a loss on a recorded graph (no input required gradients)".into(),
        ));
    }
    let order = topo_order(loss);
    for t in &order {
        if t.is_op_output() {
            t.zero_grad();
        }
    }
    loss.accumulate_grad(&[1.0]);
    for t in order.iter().rev() {
        let node_ref = t.inner.node.borrow();
        let Some(node) = node_ref.as_ref() else {
            continue;
        };
        let grad_ref = t.inner.grad.borrow();
        let Some(g) = grad_ref.as_deref() else {
            continue;
        };
        (node.backward)(g);
    }
    Ok(())
}

fn check_same_shape(a: &Tensor, b: &Tensor, op: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Shape(format!(
            "{op}: mismatched shapes {} vs {}",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

/// Elementwise sum of two same-shape tensors.
pub fn elementwise_add(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    check_same_shape(a, b, "elementwise_add")?;
    let data: Vec<f32> = a.data().iter().zip(b.data().iter()).map(|(x, y)| x + y).collect();
    let (pa, pb) = (a.clone(), b.clone());
    Ok(Tensor::from_op(
        a.shape(),
        data,
        "add",
        vec![a.clone(), b.clone()],
        move |g| {
            pa.accumulate_grad(g);
            pb.accumulate_grad(g);
        },
    ))
}

/// Elementwise product of two same-shape tensors.
pub fn elementwise_mul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    check_same_shape(a, b, "elementwise_mul")?;
    let data: Vec<f32> = a.data().iter().zip(b.data().iter()).map(|(x, y)| x * y).collect();
    let (pa, pb) = (a.clone(), b.clone());
    Ok(Tensor::from_op(
        a.shape(),
        data,
        "mul",
        vec![a.clone(), b.clone()],
        move |g| {
            if pa.requires_grad() {
                let bd = pb.data();
                let gb: Vec<f32> = g.iter().zip(bd.iter()).map(|(gi, y)| gi * y).collect();
                pa.accumulate_grad(&gb);
            }
            if pb.requires_grad() {
                let ad = pa.data();
                let ga: Vec<f32> = g.iter().zip(ad.iter()).map(|(gi, x)| gi * x).collect();
                pb.accumulate_grad(&ga);
            }
        },
    ))
}

/// Multiply every element by a constant.
pub fn scalar_mul(x: &Tensor, s: f32) -> Tensor {
    let data: Vec<f32> = x.data().iter().map(|v| v * s).collect();
    let px = x.clone();
    Tensor::from_op(x.shape(), data, "scalar_mul", vec![x.clone()], move |g| {
        let gx: Vec<f32> = g.iter().map(|gi| gi * s).collect();
        px.accumulate_grad(&gx);
    })
}

/// Sum of every element, as a (1,1,1,1) tensor.
pub fn sum_all(x: &Tensor) -> Tensor {
    let total: f32 = x.data().iter().sum();
    let px = x.clone();
    let numel = x.numel();
    Tensor::from_op(
        Shape::new(1, 1, 1, 1),
        vec![total],
        "sum_all",
        vec![x.clone()],
        move |g| {
            px.accumulate_grad(&vec![g[0]; numel]);
        },
    )
}

/// Mean of every element, as a (1,1,1,1) tensor.
pub fn mean_all(x: &Tensor) -> Tensor {
    scalar_mul(&sum_all(x), 1.0 / x.numel() as f32)
}

/// Max over elements of |analytic - central difference| / max(1e-8,
/// |analytic| + |numeric|), where the analytic gradient comes from
/// [`backward`] and the numeric one from central differences with step
/// `eps`. `f` must map a tensor to a scalar tensor.
pub fn grad_check<F>(f: F, x: &Tensor, eps: f32) -> Result<f32>
where
    F: Fn(&Tensor) -> Result<Tensor>,
{
    if eps <= 0.0 {
        return Err(Error::Contract("grad_check requires eps > 0".into()));
    }
    let probe = Tensor::from_vec(x.shape(), x.to_vec())?.tracked();
    let y = f(&probe)?;
    if y.numel() != 1 {
        return Err(Error::Contract(format!(
            "grad_check requires f to return a scalar, got shape {}",
            y.shape()
        )));
    }
    backward(&y)?;
    let analytic = probe
        .grad()
        .ok_or_else(|| Error::Contract("grad_check: f does not depend on x".into()))?;

    let base = x.to_vec();
    let eval = |values: Vec<f32>| -> Result<f32> {
        no_grad(|| f(&Tensor::from_vec(x.shape(), values)?)?.item())
    };
    let mut max_rel = 0.0f32;
    for i in 0..base.len() {
        let mut plus = base.clone();
        plus[i] += eps;
        let mut minus = base.clone();
        minus[i] -= eps;
        let numeric = (eval(plus)? - eval(minus)?) / (2.0 * eps);
        let a = analytic[i];
        let rel = (a - numeric).abs() / (a.abs() + numeric.abs()).max(1e-8);
        if rel > max_rel {
            max_rel = rel;
        }
    }
    Ok(max_rel)
}
