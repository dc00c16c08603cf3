//! N-dimensional arrays with tape-free reverse-mode differentiation.
//!
//! Every operation returns a fresh [`Tensor`]. When at least one input
//! requires a gradient, the result records its parents together with a
//! vector-Jacobian closure; [`Tensor::backward`] walks that graph in
//! reverse topological order. Storage is row-major and contiguous;
//! `reshape` shares the buffer, everything else materializes.

mod autograd;
mod conv;
mod norm;
mod ops;
mod resize;

use std::fmt;
use std::iter::Sum;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};

use num_traits::{Float, FromPrimitive};

use crate::error::{invalid, shape_err, Result};

pub use conv::{conv1d, conv2d, conv3d, conv_nd};
pub use norm::{group_norm, linear};
pub use ops::{concat, matmul, softmax};
pub use resize::{repeat_interleave, resize_linear_axis, resize_trilinear};

/// Element type code used by the checkpoint container.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DType {
    F32,
    F64,
}

impl DType {
    pub fn code(self) -> u8 {
        match self {
            DType::F32 => 0,
            DType::F64 => 1,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(DType::F32),
            1 => Some(DType::F64),
            _ => None,
        }
    }

    pub fn size(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
        }
    }
}

/// Floating-point element of a [`Tensor`].
pub trait Scalar:
    Float + FromPrimitive + Default + fmt::Debug + fmt::Display + Send + Sync + Sum + 'static
{
    const DTYPE: DType;

    /// `c[m×n] (+)= a[m×k] · b[k×n]` with arbitrary strides on `a` and `b`
    /// and a contiguous row-major `c`.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: &[Self],
        a_strides: (usize, usize),
        b: &[Self],
        b_strides: (usize, usize),
        c: &mut [Self],
        accumulate: bool,
    );

    fn from_f64_lossy(v: f64) -> Self {
        Self::from_f64(v).expect("finite f64 converts to every float")
    }

    fn to_f64_lossy(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }
}

#[allow(clippy::too_many_arguments)]
fn check_gemm_bounds<T>(
    m: usize,
    k: usize,
    n: usize,
    a: &[T],
    (ra, ca): (usize, usize),
    b: &[T],
    (rb, cb): (usize, usize),
    c: &[T],
) {
    if m == 0 || n == 0 {
        return;
    }
    if k > 0 {
        assert!((m - 1) * ra + (k - 1) * ca < a.len(), "gemm: lhs out of bounds");
        assert!((k - 1) * rb + (n - 1) * cb < b.len(), "gemm: rhs out of bounds");
    }
    assert!(m * n <= c.len(), "gemm: output out of bounds");
}

impl Scalar for f32 {
    const DTYPE: DType = DType::F32;

    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: &[f32],
        a_strides: (usize, usize),
        b: &[f32],
        b_strides: (usize, usize),
        c: &mut [f32],
        accumulate: bool,
    ) {
        check_gemm_bounds(m, k, n, a, a_strides, b, b_strides, c);
        if m == 0 || n == 0 {
            return;
        }
        let beta = if accumulate { 1.0 } else { 0.0 };
        // SAFETY: bounds of every addressed element were checked above.
        unsafe {
            matrixmultiply::sgemm(
                m,
                k,
                n,
                1.0,
                a.as_ptr(),
                a_strides.0 as isize,
                a_strides.1 as isize,
                b.as_ptr(),
                b_strides.0 as isize,
                b_strides.1 as isize,
                beta,
                c.as_mut_ptr(),
                n as isize,
                1,
            );
        }
    }
}

impl Scalar for f64 {
    const DTYPE: DType = DType::F64;

    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: &[f64],
        a_strides: (usize, usize),
        b: &[f64],
        b_strides: (usize, usize),
        c: &mut [f64],
        accumulate: bool,
    ) {
        check_gemm_bounds(m, k, n, a, a_strides, b, b_strides, c);
        if m == 0 || n == 0 {
            return;
        }
        let beta = if accumulate { 1.0 } else { 0.0 };
        // SAFETY: bounds of every addressed element were checked above.
        unsafe {
            matrixmultiply::dgemm(
                m,
                k,
                n,
                1.0,
                a.as_ptr(),
                a_strides.0 as isize,
                a_strides.1 as isize,
                b.as_ptr(),
                b_strides.0 as isize,
                b_strides.1 as isize,
                beta,
                c.as_mut_ptr(),
                n as isize,
                1,
            );
        }
    }
}

/// Vector-Jacobian product of one recorded operation. Receives the
/// upstream gradient and a mask of which parents need a gradient.
pub(crate) type BackwardFn<T> = Box<dyn Fn(&[T], &[bool]) -> Vec<Option<Vec<T>>> + Send + Sync>;

pub(crate) struct Node<T: Scalar> {
    pub(crate) parents: Vec<Tensor<T>>,
    pub(crate) backward: BackwardFn<T>,
}

struct Inner<T: Scalar> {
    id: usize,
    shape: Vec<usize>,
    data: Arc<Vec<T>>,
    requires_grad: bool,
    grad: Mutex<Option<Vec<T>>>,
    node: Option<Node<T>>,
}

static NEXT_ID: AtomicUsize = AtomicUsize::new(0);

/// Differentiable n-dimensional array.
pub struct Tensor<T: Scalar> {
    inner: Arc<Inner<T>>,
}

impl<T: Scalar> Clone for Tensor<T> {
    fn clone(&self) -> Self {
        Self {
            inner: Arc::clone(&self.inner),
        }
    }
}

impl<T: Scalar> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.inner.shape)
            .field("dtype", &T::DTYPE)
            .field("requires_grad", &self.inner.requires_grad)
            .finish()
    }
}

pub(crate) fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

pub(crate) fn strides_of(shape: &[usize]) -> Vec<usize> {
    let mut strides = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        strides[i] = strides[i + 1] * shape[i + 1];
    }
    strides
}

impl<T: Scalar> Tensor<T> {
    fn build(shape: Vec<usize>, data: Arc<Vec<T>>, requires_grad: bool, node: Option<Node<T>>) -> Self {
        debug_assert_eq!(numel(&shape), data.len());
        Self {
            inner: Arc::new(Inner {
                id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
                shape,
                data,
                requires_grad,
                grad: Mutex::new(None),
                node,
            }),
        }
    }

    /// Creates a constant (non-tracked) tensor.
    pub fn from_vec(shape: &[usize], data: Vec<T>) -> Result<Self> {
        if shape.contains(&0) {
            return Err(invalid(format!("tensor extents must be positive, got {shape:?}")));
        }
        if numel(shape) != data.len() {
            return Err(shape_err(
                "from_vec",
                format!("shape {shape:?} holds {} values, got {}", numel(shape), data.len()),
            ));
        }
        Ok(Self::build(shape.to_vec(), Arc::new(data), false, None))
    }

    pub fn from_f64(shape: &[usize], data: &[f64]) -> Result<Self> {
        Self::from_vec(shape, data.iter().map(|&v| T::from_f64_lossy(v)).collect())
    }

    /// Leaf that shares an existing buffer.
    pub fn from_shared(shape: &[usize], data: Arc<Vec<T>>, requires_grad: bool) -> Result<Self> {
        if numel(shape) != data.len() {
            return Err(shape_err(
                "from_shared",
                format!("shape {shape:?} holds {} values, got {}", numel(shape), data.len()),
            ));
        }
        Ok(Self::build(shape.to_vec(), data, requires_grad, None))
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        Self::build(shape.to_vec(), Arc::new(vec![value; numel(shape)]), false, None)
    }

    pub fn scalar(value: T) -> Self {
        Self::build(vec![], Arc::new(vec![value]), false, None)
    }

    /// Returns a leaf copy of this tensor's values that tracks gradients.
    pub fn requires_grad(self) -> Self {
        Self::build(self.inner.shape.clone(), Arc::clone(&self.inner.data), true, None)
    }

    /// Returns a constant copy detached from any graph.
    pub fn detach(&self) -> Self {
        Self::build(self.inner.shape.clone(), Arc::clone(&self.inner.data), false, None)
    }

    /// Result of an operation. Records the graph only when needed.
    pub(crate) fn from_op(shape: Vec<usize>, data: Vec<T>, parents: Vec<Tensor<T>>, backward: BackwardFn<T>) -> Self {
        let tracked = parents.iter().any(|p| p.tracks_grad());
        let node = tracked.then_some(Node { parents, backward });
        Self::build(shape, Arc::new(data), tracked, node)
    }

    pub(crate) fn view_op(shape: Vec<usize>, data: Arc<Vec<T>>, parents: Vec<Tensor<T>>, backward: BackwardFn<T>) -> Self {
        let tracked = parents.iter().any(|p| p.tracks_grad());
        let node = tracked.then_some(Node { parents, backward });
        Self::build(shape, data, tracked, node)
    }

    pub fn shape(&self) -> &[usize] {
        &self.inner.shape
    }

    pub fn rank(&self) -> usize {
        self.inner.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.inner.data.len()
    }

    pub fn data(&self) -> &[T] {
        &self.inner.data
    }

    pub(crate) fn shared_data(&self) -> Arc<Vec<T>> {
        Arc::clone(&self.inner.data)
    }

    pub fn to_vec(&self) -> Vec<T> {
        self.inner.data.to_vec()
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.inner.data.iter().map(|v| v.to_f64_lossy()).collect()
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> Result<T> {
        if self.numel() != 1 {
            return Err(shape_err("item", format!("expected one element, shape is {:?}", self.shape())));
        }
        Ok(self.inner.data[0])
    }

    pub fn tracks_grad(&self) -> bool {
        self.inner.requires_grad
    }

    pub fn is_leaf(&self) -> bool {
        self.inner.node.is_none()
    }

    /// Accumulated gradient of a tracked leaf.
    pub fn grad(&self) -> Option<Vec<T>> {
        self.inner.grad.lock().expect("grad lock poisoned").clone()
    }

    pub fn zero_grad(&self) {
        *self.inner.grad.lock().expect("grad lock poisoned") = None;
    }

    pub(crate) fn id(&self) -> usize {
        self.inner.id
    }

    pub(crate) fn node(&self) -> Option<&Node<T>> {
        self.inner.node.as_ref()
    }

    pub(crate) fn accumulate_grad(&self, g: &[T]) {
        let mut slot = self.inner.grad.lock().expect("grad lock poisoned");
        match slot.as_mut() {
            Some(acc) => acc.iter_mut().zip(g).for_each(|(a, &b)| *a = *a + b),
            None => *slot = Some(g.to_vec()),
        }
    }

    /// Casts into another element type; the result is a constant.
    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        let data = self.inner.data.iter().map(|v| U::from_f64_lossy(v.to_f64_lossy())).collect();
        Tensor::build(self.inner.shape.clone(), Arc::new(data), false, None)
    }

    pub(crate) fn expect_rank(&self, op: &'static str, rank: usize) -> Result<()> {
        if self.rank() != rank {
            return Err(shape_err(op, format!("expected rank {rank}, got shape {:?}", self.shape())));
        }
        Ok(())
    }
}
