//! Dense row-major tensors plus the handful of kernels the tracker needs.
//!
//! Every operation has a forward and an analytic backward; `gradcheck`
//! verifies each one against central finite differences. Compute runs in
//! `f32` by default, gradient checks instantiate the same code at `f64`.

mod conv;
mod gradcheck;
mod resize;

pub use conv::{
    conv2d, conv2d_backward, cross_correlate, cross_correlate_backward, transposed_conv2d,
    transposed_conv2d_backward, ConvGrads, CorrGrads, DeconvGrads,
};
pub use gradcheck::{grad_check, suite as gradcheck_suite, GradCheckOutcome, GradReport};
pub use resize::{resize_bilinear, resize_bilinear_backward};

use crate::error::{Error, Result};
use std::fmt::{Debug, Display};
use std::ops::{Add, AddAssign, Div, Mul, MulAssign, Neg, Sub, SubAssign};

/// Element type the kernels are generic over. Implemented for f32 and f64.
pub trait Scalar:
    Copy
    + PartialOrd
    + Debug
    + Display
    + Send
    + Sync
    + 'static
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + Neg<Output = Self>
    + AddAssign
    + SubAssign
    + MulAssign
{
    const ZERO: Self;
    const ONE: Self;
    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
    fn exp(self) -> Self;
    fn ln(self) -> Self;
    fn sqrt(self) -> Self;
    fn abs(self) -> Self;
    fn maximum(self, o: Self) -> Self;
    fn is_finite_val(self) -> bool;
    /// c[m,n] += a * b with explicit element strides for a and b; c is
    /// row-major contiguous. Strides express transposed views without copies.
    #[allow(clippy::too_many_arguments)]
    fn gemm_strided(
        m: usize,
        k: usize,
        n: usize,
        a: &[Self],
        rsa: isize,
        csa: isize,
        b: &[Self],
        rsb: isize,
        csb: isize,
        beta: Self,
        c: &mut [Self],
    );
}

macro_rules! impl_scalar {
    ($t:ty, $gemm:path) => {
        impl Scalar for $t {
            const ZERO: Self = 0.0;
            const ONE: Self = 1.0;
            #[inline]
            fn from_f64(v: f64) -> Self {
                v as $t
            }
            #[inline]
            fn to_f64(self) -> f64 {
                self as f64
            }
            #[inline]
            fn exp(self) -> Self {
                self.exp()
            }
            #[inline]
            fn ln(self) -> Self {
                self.ln()
            }
            #[inline]
            fn sqrt(self) -> Self {
                self.sqrt()
            }
            #[inline]
            fn abs(self) -> Self {
                self.abs()
            }
            #[inline]
            fn maximum(self, o: Self) -> Self {
                if self > o {
                    self
                } else {
                    o
                }
            }
            #[inline]
            fn is_finite_val(self) -> bool {
                self.is_finite()
            }
            fn gemm_strided(
                m: usize,
                k: usize,
                n: usize,
                a: &[Self],
                rsa: isize,
                csa: isize,
                b: &[Self],
                rsb: isize,
                csb: isize,
                beta: Self,
                c: &mut [Self],
            ) {
                assert!(a.len() >= m * k, "gemm lhs length");
                assert!(b.len() >= k * n, "gemm rhs length");
                assert_eq!(c.len(), m * n, "gemm out length");
                if m == 0 || n == 0 {
                    return;
                }
                if k == 0 {
                    for v in c.iter_mut() {
                        *v *= beta;
                    }
                    return;
                }
                unsafe {
                    $gemm(
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
        }
    };
}

impl_scalar!(f32, matrixmultiply::sgemm);
impl_scalar!(f64, matrixmultiply::dgemm);

/// c[m,n] = a[m,k] b[k,n] + beta c
pub(crate) fn gemm_nn<E: Scalar>(
    m: usize,
    k: usize,
    n: usize,
    a: &[E],
    b: &[E],
    beta: E,
    c: &mut [E],
) {
    E::gemm_strided(m, k, n, a, k as isize, 1, b, n as isize, 1, beta, c);
}

/// c[m,n] = a[m,k] b[n,k]^T + beta c  (b stored row-major as [n,k])
pub(crate) fn gemm_nt<E: Scalar>(
    m: usize,
    k: usize,
    n: usize,
    a: &[E],
    b: &[E],
    beta: E,
    c: &mut [E],
) {
    E::gemm_strided(m, k, n, a, k as isize, 1, b, 1, k as isize, beta, c);
}

/// c[m,n] = a[k,m]^T b[k,n] + beta c  (a stored row-major as [k,m])
pub(crate) fn gemm_tn<E: Scalar>(
    m: usize,
    k: usize,
    n: usize,
    a: &[E],
    b: &[E],
    beta: E,
    c: &mut [E],
) {
    E::gemm_strided(m, k, n, a, 1, m as isize, b, n as isize, 1, beta, c);
}

/// Dense tensor, row-major, rank 1..=4.
#[derive(Clone, PartialEq)]
pub struct Tensor<E: Scalar> {
    dims: Vec<usize>,
    data: Vec<E>,
}

impl<E: Scalar> Debug for Tensor<E> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Tensor{:?}", self.dims)?;
        if self.data.len() <= 16 {
            write!(f, " {:?}", self.data)?;
        }
        Ok(())
    }
}

impl<E: Scalar> Tensor<E> {
    pub fn zeros(dims: &[usize]) -> Self {
        let n = dims.iter().product();
        Tensor {
            dims: dims.to_vec(),
            data: vec![E::ZERO; n],
        }
    }

    pub fn filled(dims: &[usize], v: E) -> Self {
        let n = dims.iter().product();
        Tensor {
            dims: dims.to_vec(),
            data: vec![v; n],
        }
    }

    pub fn from_vec(dims: &[usize], data: Vec<E>) -> Result<Self> {
        let n: usize = dims.iter().product();
        if n != data.len() {
            return Err(Error::shape(
                "from_vec",
                format!("dims {:?} want {} elements, got {}", dims, n, data.len()),
            ));
        }
        Ok(Tensor {
            dims: dims.to_vec(),
            data,
        })
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn rank(&self) -> usize {
        self.dims.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[E] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [E] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<E> {
        self.data
    }

    /// Dim helpers for the common [C,H,W] layout.
    pub fn c(&self) -> usize {
        self.dims[self.dims.len() - 3]
    }
    pub fn h(&self) -> usize {
        self.dims[self.dims.len() - 2]
    }
    pub fn w(&self) -> usize {
        self.dims[self.dims.len() - 1]
    }

    #[inline]
    pub fn at3(&self, c: usize, y: usize, x: usize) -> E {
        let (h, w) = (self.h(), self.w());
        self.data[(c * h + y) * w + x]
    }

    #[inline]
    pub fn set3(&mut self, c: usize, y: usize, x: usize, v: E) {
        let (h, w) = (self.h(), self.w());
        self.data[(c * h + y) * w + x] = v;
    }

    /// Channel plane as a slice, for [C,H,W] tensors.
    pub fn plane(&self, c: usize) -> &[E] {
        let hw = self.h() * self.w();
        &self.data[c * hw..(c + 1) * hw]
    }

    pub fn map(&self, f: impl Fn(E) -> E) -> Tensor<E> {
        Tensor {
            dims: self.dims.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn scale(&self, s: E) -> Tensor<E> {
        self.map(|v| v * s)
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite_val())
    }

    pub fn to_f64(&self) -> Tensor<f64> {
        Tensor {
            dims: self.dims.clone(),
            data: self.data.iter().map(|v| v.to_f64()).collect(),
        }
    }

    pub fn to_f32(&self) -> Tensor<f32> {
        Tensor {
            dims: self.dims.clone(),
            data: self.data.iter().map(|v| v.to_f64() as f32).collect(),
        }
    }
}

/// out = a + b, elementwise. Shapes must match exactly.
pub fn add<E: Scalar>(a: &Tensor<E>, b: &Tensor<E>) -> Result<Tensor<E>> {
    if a.dims != b.dims {
        return Err(Error::shape(
            "add",
            format!("lhs {:?} vs rhs {:?}", a.dims, b.dims),
        ));
    }
    let data = a
        .data
        .iter()
        .zip(&b.data)
        .map(|(&x, &y)| x + y)
        .collect();
    Ok(Tensor {
        dims: a.dims.clone(),
        data,
    })
}

/// In-place a += b.
pub fn add_assign<E: Scalar>(a: &mut Tensor<E>, b: &Tensor<E>) -> Result<()> {
    if a.dims != b.dims {
        return Err(Error::shape(
            "add_assign",
            format!("lhs {:?} vs rhs {:?}", a.dims, b.dims),
        ));
    }
    for (x, &y) in a.data.iter_mut().zip(&b.data) {
        *x += y;
    }
    Ok(())
}

/// ReLU forward. Subgradient at 0 is taken as 0 in the backward pass.
pub fn relu<E: Scalar>(x: &Tensor<E>) -> Tensor<E> {
    x.map(|v| v.maximum(E::ZERO))
}

/// dL/dx given dL/dy and the pre-activation input.
pub fn relu_backward<E: Scalar>(pre: &Tensor<E>, grad_out: &Tensor<E>) -> Result<Tensor<E>> {
    if pre.dims != grad_out.dims {
        return Err(Error::shape(
            "relu_backward",
            format!("pre {:?} vs grad {:?}", pre.dims, grad_out.dims),
        ));
    }
    let data = pre
        .data
        .iter()
        .zip(&grad_out.data)
        .map(|(&p, &g)| if p > E::ZERO { g } else { E::ZERO })
        .collect();
    Ok(Tensor {
        dims: pre.dims.clone(),
        data,
    })
}

/// Paired two-way softmax over channel pairs of a [2k,H,W] map.
/// Channel 2i is treated as the "negative" logit and 2i+1 as the "positive"
/// logit of pair i; each output pair sums to one.
pub fn softmax_pair<E: Scalar>(logits: &Tensor<E>) -> Result<Tensor<E>> {
    if logits.rank() != 3 || logits.c() % 2 != 0 {
        return Err(Error::shape(
            "softmax_pair",
            format!("want [2k,H,W], got {:?}", logits.dims),
        ));
    }
    let (c, h, w) = (logits.c(), logits.h(), logits.w());
    let hw = h * w;
    let mut out = Tensor::zeros(&[c, h, w]);
    for pair in 0..c / 2 {
        let n_off = (2 * pair) * hw;
        let p_off = (2 * pair + 1) * hw;
        for i in 0..hw {
            let n = logits.data[n_off + i];
            let p = logits.data[p_off + i];
            let m = n.maximum(p);
            let en = (n - m).exp();
            let ep = (p - m).exp();
            let s = en + ep;
            out.data[n_off + i] = en / s;
            out.data[p_off + i] = ep / s;
        }
    }
    Ok(out)
}

/// Backward of `softmax_pair`: given probabilities and dL/dprobs, returns
/// dL/dlogits using the 2x2 softmax Jacobian per pair and site.
pub fn softmax_pair_backward<E: Scalar>(
    probs: &Tensor<E>,
    grad_out: &Tensor<E>,
) -> Result<Tensor<E>> {
    if probs.dims != grad_out.dims {
        return Err(Error::shape(
            "softmax_pair_backward",
            format!("probs {:?} vs grad {:?}", probs.dims, grad_out.dims),
        ));
    }
    let (c, h, w) = (probs.c(), probs.h(), probs.w());
    let hw = h * w;
    let mut grad_in = Tensor::zeros(&[c, h, w]);
    for pair in 0..c / 2 {
        let n_off = (2 * pair) * hw;
        let p_off = (2 * pair + 1) * hw;
        for i in 0..hw {
            let pn = probs.data[n_off + i];
            let pp = probs.data[p_off + i];
            let gn = grad_out.data[n_off + i];
            let gp = grad_out.data[p_off + i];
            // dL/dzi = pi * (gi - sum_j pj gj)
            let dot = pn * gn + pp * gp;
            grad_in.data[n_off + i] = pn * (gn - dot);
            grad_in.data[p_off + i] = pp * (gp - dot);
        }
    }
    Ok(grad_in)
}

/// A learnable tensor: value, gradient accumulator, name, freeze flag.
#[derive(Clone, Debug)]
pub struct ParamTensor<E: Scalar> {
    pub name: String,
    pub value: Tensor<E>,
    pub grad: Tensor<E>,
    pub frozen: bool,
}

impl<E: Scalar> ParamTensor<E> {
    pub fn new(name: impl Into<String>, value: Tensor<E>) -> Self {
        let grad = Tensor::zeros(value.dims());
        ParamTensor {
            name: name.into(),
            value,
            grad,
            frozen: false,
        }
    }

    pub fn zero_grad(&mut self) {
        for g in self.grad.data_mut() {
            *g = E::ZERO;
        }
    }

    pub fn accumulate(&mut self, g: &Tensor<E>) -> Result<()> {
        add_assign(&mut self.grad, g)
    }
}
