//! Dense tensors with a reverse-mode autodiff tape.
//!
//! The engine is deliberately small: it carries exactly the primitives the
//! networks, the tone-mapping operators, the losses and the differentiable
//! quality metric need. Broadcasting is limited to scalar-tensor and
//! same-shape operands plus the explicit [`Var::broadcast_to`].
//!
//! Values live in plain [`Tensor`]s. To differentiate, values are placed on a
//! [`Tape`] as [`Var`]s; every operation records itself on the tape, and
//! [`Tape::backward`] walks the record in reverse accumulating gradients into
//! the leaves that asked for them.

mod adam;
mod container;
mod conv;
pub mod gradcheck;
mod ops;
mod tape;

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::sync::atomic::{AtomicU64, Ordering};

use num_traits::{Float, FromPrimitive, ToPrimitive};

use crate::error::{Error, Result};

pub use adam::{adam_step, AdamConfig, AdamState};
pub use container::WeightContainer;
pub use conv::Padding;
pub use tape::{Tape, Var};

/// Floating-point element type of a tensor: `f32` for training throughput,
/// `f64` for gradient checks and the quality metric.
pub trait Real:
    Float + FromPrimitive + ToPrimitive + Default + Debug + Display + Sum + Send + Sync + 'static
{
    const DTYPE: &'static str;

    /// `c = op(a) * op(b) + beta * c` for row-major matrices, where `a` is
    /// `m x k` (stored `k x m` when `a_t`) and `b` is `k x n` (stored `n x k`
    /// when `b_t`).
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: &[Self],
        a_t: bool,
        b: &[Self],
        b_t: bool,
        c: &mut [Self],
        beta: Self,
    );

    fn erf(self) -> Self;

    #[inline]
    fn c(x: f64) -> Self {
        Self::from_f64(x).expect("representable constant")
    }

    #[inline]
    fn f64(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }
}

fn strides(m: usize, k: usize, n: usize, a_t: bool, b_t: bool) -> [isize; 4] {
    let (rsa, csa) = if a_t { (1, m) } else { (k, 1) };
    let (rsb, csb) = if b_t { (1, k) } else { (n, 1) };
    [rsa as isize, csa as isize, rsb as isize, csb as isize]
}

impl Real for f32 {
    const DTYPE: &'static str = "f32";

    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: &[f32],
        a_t: bool,
        b: &[f32],
        b_t: bool,
        c: &mut [f32],
        beta: f32,
    ) {
        assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
        let [rsa, csa, rsb, csb] = strides(m, k, n, a_t, b_t);
        // SAFETY: bounds asserted above; strides describe the row-major layouts.
        unsafe {
            matrixmultiply::sgemm(
                m,
                k,
                n,
                1.0,
                a.as_ptr(),
                rsa,
                csa,
                b.as_ptr(),
                rsb,
                csb,
                beta,
                c.as_mut_ptr(),
                n as isize,
                1,
            );
        }
    }

    fn erf(self) -> f32 {
        libm::erff(self)
    }
}

impl Real for f64 {
    const DTYPE: &'static str = "f64";

    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: &[f64],
        a_t: bool,
        b: &[f64],
        b_t: bool,
        c: &mut [f64],
        beta: f64,
    ) {
        assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
        let [rsa, csa, rsb, csb] = strides(m, k, n, a_t, b_t);
        // SAFETY: bounds asserted above; strides describe the row-major layouts.
        unsafe {
            matrixmultiply::dgemm(
                m,
                k,
                n,
                1.0,
                a.as_ptr(),
                rsa,
                csa,
                b.as_ptr(),
                rsb,
                csb,
                beta,
                c.as_mut_ptr(),
                n as isize,
                1,
            );
        }
    }

    fn erf(self) -> f64 {
        libm::erf(self)
    }
}

/// A dense row-major array.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Real> Tensor<T> {
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<T>) -> Result<Self> {
        let shape = shape.into();
        if shape.is_empty() || shape.contains(&0) {
            return Err(Error::contract(format!(
                "tensor shape must be non-empty with positive extents, got {shape:?}"
            )));
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::Shape {
                op: "tensor",
                lhs: shape,
                rhs: vec![data.len()],
            });
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        let shape = shape.into();
        let numel = shape.iter().product();
        Self {
            shape,
            data: vec![T::zero(); numel],
        }
    }

    pub fn full(shape: impl Into<Vec<usize>>, value: T) -> Self {
        let shape = shape.into();
        let numel = shape.iter().product();
        Self {
            shape,
            data: vec![value; numel],
        }
    }

    pub fn scalar(value: T) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn from_fn(shape: impl Into<Vec<usize>>, mut f: impl FnMut(usize) -> T) -> Self {
        let shape = shape.into();
        let numel: usize = shape.iter().product();
        Self {
            shape,
            data: (0..numel).map(&mut f).collect(),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn reshape(self, shape: impl Into<Vec<usize>>) -> Result<Self> {
        Self::new(shape, self.data)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| U::c(v.f64())).collect(),
        }
    }
}

/// Identity of a trainable parameter, stable across clones of the owner.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(u64);

impl ParamId {
    pub fn fresh() -> Self {
        static NEXT: AtomicU64 = AtomicU64::new(1);
        ParamId(NEXT.fetch_add(1, Ordering::Relaxed))
    }
}

/// A named trainable tensor.
#[derive(Clone, Debug)]
pub struct Parameter<T> {
    name: String,
    id: ParamId,
    pub tensor: Tensor<T>,
}

impl<T: Real> Parameter<T> {
    pub fn new(name: impl Into<String>, tensor: Tensor<T>) -> Self {
        Self {
            name: name.into(),
            id: ParamId::fresh(),
            tensor,
        }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn id(&self) -> ParamId {
        self.id
    }

    /// Copy into another precision under a new identity.
    pub fn cast<U: Real>(&self) -> Parameter<U> {
        Parameter::new(self.name.clone(), self.tensor.cast())
    }
}
