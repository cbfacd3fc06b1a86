//! Minimal CPU neural-network engine: NCHW tensors, layers with explicit
//! forward/backward passes, losses and the Adam optimizer.
//!
//! Everything is generic over [`Scalar`] so that the same network code runs in
//! `f32` for training and in `f64` for finite-difference gradient checks.
//! Layers expose three entry points: `infer` (eval mode, `&self`, safe to call
//! from many threads), `forward` (training mode, caches what `backward` needs)
//! and `backward` (accumulates parameter gradients, returns the input gradient).

pub mod adam;
pub mod layers;
pub mod loss;
mod ops;
mod tensor;

pub use adam::Adam;
pub use tensor::Tensor;

use std::fmt::Debug;
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive, ToPrimitive};
use rand::RngCore;
use rand_distr::{Distribution, StandardNormal, Uniform};

/// Floating point element type usable by the engine.
pub trait Scalar:
    Float
    + FromPrimitive
    + ToPrimitive
    + Default
    + Debug
    + Send
    + Sync
    + AddAssign
    + SubAssign
    + MulAssign
    + Sum
    + 'static
{
    /// `C = alpha * op(A) * op(B) + beta * C` on row-major slices, where
    /// `op(A)` is `m x k` and `op(B)` is `k x n`. `trans_a` means `a` is
    /// stored as `k x m`; `trans_b` means `b` is stored as `n x k`.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: &[Self],
        trans_a: bool,
        b: &[Self],
        trans_b: bool,
        beta: Self,
        c: &mut [Self],
    );

    fn lit(v: f64) -> Self {
        Self::from_f64(v).expect("representable literal")
    }
}

fn strides(rows: usize, cols: usize, trans: bool) -> (isize, isize) {
    // Strides of op(X), where op(X) is rows x cols.
    if trans {
        (1, rows as isize)
    } else {
        (cols as isize, 1)
    }
}

macro_rules! impl_scalar {
    ($t:ty, $f:path) => {
        impl Scalar for $t {
            fn gemm(
                m: usize,
                k: usize,
                n: usize,
                alpha: Self,
                a: &[Self],
                trans_a: bool,
                b: &[Self],
                trans_b: bool,
                beta: Self,
                c: &mut [Self],
            ) {
                assert!(a.len() >= m * k, "gemm: lhs too short");
                assert!(b.len() >= k * n, "gemm: rhs too short");
                assert!(c.len() >= m * n, "gemm: output too short");
                if m == 0 || n == 0 {
                    return;
                }
                if k == 0 {
                    for v in c[..m * n].iter_mut() {
                        *v *= beta;
                    }
                    return;
                }
                let (rsa, csa) = strides(m, k, trans_a);
                let (rsb, csb) = strides(k, n, trans_b);
                // SAFETY: the asserts above guarantee every index reachable
                // through these strides lies inside the slices.
                unsafe {
                    $f(
                        m,
                        k,
                        n,
                        alpha,
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
        }
    };
}

impl_scalar!(f32, matrixmultiply::sgemm);
impl_scalar!(f64, matrixmultiply::dgemm);

/// Source of initial weights. `Meta` builds a shape-only model whose
/// parameters carry dims but no storage, for counting huge variants.
pub enum Init<'a> {
    Random(&'a mut dyn RngCore),
    Meta,
}

impl Init<'_> {
    pub fn is_meta(&self) -> bool {
        matches!(self, Init::Meta)
    }

    /// He-normal values, `N(0, 2 / fan_in)`.
    pub fn he_normal<T: Scalar>(&mut self, len: usize, fan_in: usize) -> Vec<T> {
        match self {
            Init::Meta => Vec::new(),
            Init::Random(rng) => {
                let std = (2.0 / fan_in.max(1) as f64).sqrt();
                (0..len)
                    .map(|_| {
                        let z: f64 = StandardNormal.sample(rng);
                        T::lit(z * std)
                    })
                    .collect()
            }
        }
    }

    pub fn uniform<T: Scalar>(&mut self, len: usize, bound: f64) -> Vec<T> {
        match self {
            Init::Meta => Vec::new(),
            Init::Random(rng) => {
                let d = Uniform::new_inclusive(-bound, bound).expect("finite bound");
                (0..len).map(|_| T::lit(d.sample(rng))).collect()
            }
        }
    }

    pub fn fill<T: Scalar>(&mut self, len: usize, v: f64) -> Vec<T> {
        match self {
            Init::Meta => Vec::new(),
            Init::Random(_) => vec![T::lit(v); len],
        }
    }
}

/// A learnable tensor (or a persistent buffer such as batch-norm running
/// statistics) together with its accumulated gradient.
#[derive(Clone, Debug, PartialEq)]
pub struct Param<T> {
    pub dims: Vec<usize>,
    pub value: Vec<T>,
    pub grad: Vec<T>,
    pub trainable: bool,
}

impl<T: Scalar> Param<T> {
    /// An empty `value` makes a shape-only (meta) parameter.
    pub fn new(dims: Vec<usize>, value: Vec<T>) -> Self {
        let expected: usize = dims.iter().product();
        assert!(
            value.is_empty() || value.len() == expected,
            "parameter data does not match dims {dims:?}"
        );
        let grad = vec![T::zero(); value.len()];
        Self {
            dims,
            value,
            grad,
            trainable: true,
        }
    }

    pub fn buffer(dims: Vec<usize>, value: Vec<T>) -> Self {
        let mut p = Self::new(dims, value);
        p.grad = Vec::new();
        p.trainable = false;
        p
    }

    /// Number of scalars described by `dims` (also for meta parameters).
    pub fn len(&self) -> usize {
        self.dims.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn is_meta(&self) -> bool {
        self.value.is_empty() && !self.is_empty()
    }

    pub fn zero_grad(&mut self) {
        self.grad.iter_mut().for_each(|g| *g = T::zero());
    }
}

/// Named traversal over every parameter and buffer of a module.
///
/// Names are dot-separated paths (`e1.0.conv1.weight`); they are the keys of
/// the tensor archive, so they must stay stable.
pub trait Parameters<T: Scalar> {
    fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Param<T>)>);
    fn visit_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Param<T>)>);

    fn named_params(&self) -> Vec<(String, &Param<T>)> {
        let mut out = Vec::new();
        self.visit("", &mut out);
        out
    }

    fn named_params_mut(&mut self) -> Vec<(String, &mut Param<T>)> {
        let mut out = Vec::new();
        self.visit_mut("", &mut out);
        out
    }

    /// Number of trainable scalars.
    fn parameter_count(&self) -> usize {
        self.named_params()
            .iter()
            .filter(|(_, p)| p.trainable)
            .map(|(_, p)| p.len())
            .sum()
    }

    fn zero_grad(&mut self) {
        for (_, p) in self.named_params_mut() {
            p.zero_grad();
        }
    }
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

impl<T: Scalar, M: Parameters<T>> Parameters<T> for Vec<M> {
    fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Param<T>)>) {
        for (i, m) in self.iter().enumerate() {
            m.visit(&join(prefix, &i.to_string()), out);
        }
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Param<T>)>) {
        for (i, m) in self.iter_mut().enumerate() {
            m.visit_mut(&join(prefix, &i.to_string()), out);
        }
    }
}

impl<T: Scalar, M: Parameters<T>> Parameters<T> for Option<M> {
    fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Param<T>)>) {
        if let Some(m) = self {
            m.visit(prefix, out);
        }
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Param<T>)>) {
        if let Some(m) = self {
            m.visit_mut(prefix, out);
        }
    }
}

/// Implements [`Parameters`] for a struct by delegating to the listed fields.
#[macro_export]
macro_rules! composite_parameters {
    ($ty:ident { $($field:ident),* $(,)? }) => {
        impl<T: $crate::nn::Scalar> $crate::nn::Parameters<T> for $ty<T> {
            fn visit<'a>(
                &'a self,
                prefix: &str,
                out: &mut Vec<(String, &'a $crate::nn::Param<T>)>,
            ) {
                $( self.$field.visit(&$crate::nn::join_path(prefix, stringify!($field)), out); )*
            }

            fn visit_mut<'a>(
                &'a mut self,
                prefix: &str,
                out: &mut Vec<(String, &'a mut $crate::nn::Param<T>)>,
            ) {
                $( self.$field.visit_mut(&$crate::nn::join_path(prefix, stringify!($field)), out); )*
            }
        }
    };
}

#[doc(hidden)]
pub fn join_path(prefix: &str, name: &str) -> String {
    join(prefix, name)
}

/// Copies values (not gradients) between two modules with identical layouts.
pub fn copy_params<T: Scalar, A: Parameters<T>, B: Parameters<T>>(from: &A, to: &mut B) {
    let src = from.named_params();
    for (name, dst) in to.named_params_mut() {
        if let Some((_, p)) = src.iter().find(|(n, _)| *n == name) {
            dst.value.copy_from_slice(&p.value);
        }
    }
}

/// Converts a module's weights between precisions through the archive names.
pub fn cast_params<A: Scalar, B: Scalar, M1: Parameters<A>, M2: Parameters<B>>(
    from: &M1,
    to: &mut M2,
) {
    let src = from.named_params();
    for (name, dst) in to.named_params_mut() {
        if let Some((_, p)) = src.iter().find(|(n, _)| *n == name) {
            for (d, s) in dst.value.iter_mut().zip(&p.value) {
                *d = B::from_f64(s.to_f64().unwrap_or(0.0)).unwrap_or_else(B::zero);
            }
        }
    }
}
