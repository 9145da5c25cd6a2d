//! Dense row-major tensors over `f32`/`f64`.
//!
//! A [`Tensor`] is an immutable value: a shape plus a flat row-major buffer.
//! Differentiable computation happens on the [`Tape`](crate::autodiff::Tape);
//! the free functions here are the plain (non-recording) kernels that the
//! tape and the oracle code share.

mod gemm;
pub mod ltns;
pub mod rng;

use std::fmt::{Debug, Display};

use thiserror::Error;

pub use gemm::{gemm, MatView};
pub use rng::Rng;

/// Element precision tag, also the on-disk dtype code in LTNS blobs.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum DType {
    Single,
    Double,
}

impl DType {
    pub fn code(self) -> u8 {
        match self {
            DType::Single => 1,
            DType::Double => 2,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            1 => Some(DType::Single),
            2 => Some(DType::Double),
            _ => None,
        }
    }

    pub fn size_of(self) -> usize {
        match self {
            DType::Single => 4,
            DType::Double => 8,
        }
    }
}

/// Floating-point element type usable in tensors.
pub trait Scalar:
    num_traits::Float
    + num_traits::FloatConst
    + Default
    + Debug
    + Display
    + Send
    + Sync
    + std::iter::Sum
    + std::ops::AddAssign
    + std::ops::SubAssign
    + std::ops::MulAssign
    + std::ops::DivAssign
    + 'static
{
    const DTYPE: DType;
    /// Adding and subtracting this rounds to an integer.
    const ROUND_MAGIC: f64;
    /// Cody-Waite split of ln 2; `n·LN2_HI` is exact for the exponents in range.
    const LN2_HI: f64;
    const LN2_LO: f64;
    /// `|x|` bound keeping `e^x` and `2^round(x/ln2)` normal.
    const EXP_LIMIT: f64;
    /// Taylor terms that reach full precision on `|r| ≤ ln2/2`.
    const EXP_TERMS: usize;

    fn of(v: f64) -> Self;
    /// `2^self` for integral `self` inside the normal exponent range.
    fn pow2i(self) -> Self;
    fn f64(self) -> f64;
    fn write_le(self, out: &mut Vec<u8>);
    fn read_le(bytes: &[u8]) -> Self;

    /// Raw strided GEMM: `c = alpha * a * b + beta * c`.
    ///
    /// # Safety
    /// Every index reachable through the given extents and strides must be
    /// in bounds of the corresponding allocation.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    );
}

impl Scalar for f32 {
    const DTYPE: DType = DType::Single;
    const ROUND_MAGIC: f64 = 12582912.0;
    const LN2_HI: f64 = 0.693359375;
    const LN2_LO: f64 = -2.12194440e-4;
    const EXP_LIMIT: f64 = 87.0;
    const EXP_TERMS: usize = 8;

    #[inline(always)]
    fn of(v: f64) -> Self {
        v as f32
    }
    #[inline(always)]
    fn pow2i(self) -> Self {
        // Adding 1.5·2^23 leaves the integer in the low mantissa bits.
        let n = (self + 12582912.0).to_bits().wrapping_sub(0x4B40_0000);
        f32::from_bits(n.wrapping_add(127) << 23)
    }
    #[inline(always)]
    fn f64(self) -> f64 {
        self as f64
    }
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Self {
        f32::from_le_bytes(bytes[..4].try_into().unwrap())
    }
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::sgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

impl Scalar for f64 {
    const DTYPE: DType = DType::Double;
    const ROUND_MAGIC: f64 = 6755399441055744.0;
    const LN2_HI: f64 = 6.93147180369123816490e-01;
    const LN2_LO: f64 = 1.90821492927058770002e-10;
    const EXP_LIMIT: f64 = 708.0;
    const EXP_TERMS: usize = 14;

    #[inline(always)]
    fn of(v: f64) -> Self {
        v
    }
    #[inline(always)]
    fn pow2i(self) -> Self {
        let n = (self + 6755399441055744.0).to_bits().wrapping_sub(0x4338_0000_0000_0000);
        f64::from_bits(n.wrapping_add(1023) << 52)
    }
    #[inline(always)]
    fn f64(self) -> f64 {
        self
    }
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Self {
        f64::from_le_bytes(bytes[..8].try_into().unwrap())
    }
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::dgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("{op}: shape mismatch between {left:?} and {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("{op}: {msg}")]
    Contract { op: &'static str, msg: String },
    #[error("data length {got} does not match shape {shape:?}")]
    DataLength { shape: Vec<usize>, got: usize },
    #[error("backward root must be scalar, got shape {0:?}")]
    NonScalarRoot(Vec<usize>),
    #[error("backward already ran on this tape; reset it first")]
    BackwardTwice,
    #[error("function value is not finite: {0}")]
    NonFinite(f64),
}

impl TensorError {
    pub(crate) fn shapes(op: &'static str, left: &[usize], right: &[usize]) -> Self {
        TensorError::ShapeMismatch {
            op,
            left: left.to_vec(),
            right: right.to_vec(),
        }
    }

    pub(crate) fn contract(op: &'static str, msg: impl Into<String>) -> Self {
        TensorError::Contract {
            op,
            msg: msg.into(),
        }
    }
}

#[derive(Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Debug> Debug for Tensor<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Tensor{:?}", self.shape)?;
        if self.data.len() <= 16 {
            write!(f, " {:?}", self.data)?;
        }
        Ok(())
    }
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: &[usize], data: Vec<T>) -> Result<Self, TensorError> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(TensorError::DataLength {
                shape: shape.to_vec(),
                got: data.len(),
            });
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn from_f64(shape: &[usize], data: &[f64]) -> Result<Self, TensorError> {
        Self::new(shape, data.iter().map(|&v| T::of(v)).collect())
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, T::one())
    }

    pub fn scalar(v: T) -> Self {
        Tensor {
            shape: vec![],
            data: vec![v],
        }
    }

    pub fn eye(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = T::one();
        }
        t
    }

    /// Uniform draws in `[lo, hi)`.
    pub fn uniform(shape: &[usize], lo: f64, hi: f64, rng: &mut Rng) -> Self {
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| T::of(rng.uniform(lo, hi))).collect();
        Tensor {
            shape: shape.to_vec(),
            data,
        }
    }

    pub fn randn(shape: &[usize], rng: &mut Rng) -> Self {
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| T::of(rng.normal())).collect();
        Tensor {
            shape: shape.to_vec(),
            data,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
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

    /// Extent of the last axis (1 for scalars).
    pub fn last_dim(&self) -> usize {
        self.shape.last().copied().unwrap_or(1)
    }

    pub fn item(&self) -> T {
        self.data[0]
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self, TensorError> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(TensorError::shapes("reshape", &self.shape, shape));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| U::of(v.f64())).collect(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs(&self) -> T {
        self.data.iter().fold(T::zero(), |m, v| m.max(v.abs()))
    }

    pub fn max_abs_diff(&self, other: &Self) -> T {
        assert_eq!(self.shape, other.shape, "max_abs_diff shape mismatch");
        self.data
            .iter()
            .zip(&other.data)
            .fold(T::zero(), |m, (a, b)| m.max((*a - *b).abs()))
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn add(&self, other: &Self) -> Result<Self, TensorError> {
        broadcast_zip("add", self, other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Self) -> Result<Self, TensorError> {
        broadcast_zip("sub", self, other, |a, b| a - b)
    }

    pub fn mul(&self, other: &Self) -> Result<Self, TensorError> {
        broadcast_zip("mul", self, other, |a, b| a * b)
    }

    pub fn scale(&self, s: T) -> Self {
        self.map(|v| v * s)
    }

    /// Rows of a rank-3 tensor `[B, L, C]` reordered along axis 1:
    /// `out[b, i] = self[b, perm[i]]`.
    pub fn gather_rows(&self, perm: &[usize]) -> Result<Self, TensorError> {
        let (bsz, len, ch) = dims3("gather_rows", &self.shape)?;
        if perm.len() != len {
            return Err(TensorError::shapes("gather_rows", &self.shape, &[perm.len()]));
        }
        let mut out = vec![T::zero(); self.data.len()];
        for b in 0..bsz {
            let base = b * len * ch;
            for (i, &src) in perm.iter().enumerate() {
                out[base + i * ch..base + (i + 1) * ch]
                    .copy_from_slice(&self.data[base + src * ch..base + (src + 1) * ch]);
            }
        }
        Tensor::new(&self.shape, out)
    }
}

/// `[B, L, C]` extents of a rank-3 shape; rank-2 shapes are read as `B = 1`.
pub(crate) fn dims3(op: &'static str, shape: &[usize]) -> Result<(usize, usize, usize), TensorError> {
    match *shape {
        [l, c] => Ok((1, l, c)),
        [b, l, c] => Ok((b, l, c)),
        _ => Err(TensorError::contract(
            op,
            format!("expected rank 2 or 3, got {shape:?}"),
        )),
    }
}

/// True when `small` equals `big` or is a proper suffix of it.
pub(crate) fn is_trailing(big: &[usize], small: &[usize]) -> bool {
    small.len() <= big.len() && big[big.len() - small.len()..] == *small
}

fn broadcast_zip<T: Scalar>(
    op: &'static str,
    a: &Tensor<T>,
    b: &Tensor<T>,
    f: impl Fn(T, T) -> T,
) -> Result<Tensor<T>, TensorError> {
    if !is_trailing(&a.shape, &b.shape) {
        return Err(TensorError::shapes(op, &a.shape, &b.shape));
    }
    let n = b.data.len().max(1);
    let data = a
        .data
        .iter()
        .enumerate()
        .map(|(i, &x)| f(x, b.data[i % n]))
        .collect();
    Ok(Tensor {
        shape: a.shape.clone(),
        data,
    })
}

/// Plain matrix product. `a` may carry leading batch axes (flattened into
/// rows); `b` must be `[k, n]`.
pub fn matmul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>, TensorError> {
    if a.rank() < 2 || b.rank() != 2 || a.last_dim() != b.shape[0] {
        return Err(TensorError::shapes("matmul", &a.shape, &b.shape));
    }
    let k = a.last_dim();
    let m = a.len() / k.max(1);
    let n = b.shape[1];
    let mut out = vec![T::zero(); m * n];
    gemm(
        m,
        k,
        n,
        T::one(),
        MatView::row_major(&a.data, k),
        MatView::row_major(&b.data, n),
        T::zero(),
        &mut out,
        n as isize,
        1,
    );
    let mut shape = a.shape.clone();
    *shape.last_mut().unwrap() = n;
    Tensor::new(&shape, out)
}

/// Softmax along `axis` with max subtraction.
pub fn softmax<T: Scalar>(x: &Tensor<T>, axis: usize) -> Result<Tensor<T>, TensorError> {
    if axis >= x.rank() {
        return Err(TensorError::contract(
            "softmax",
            format!("axis {axis} out of range for {:?}", x.shape),
        ));
    }
    let mut out = x.data.clone();
    softmax_in_place(&mut out, &x.shape, axis);
    Tensor::new(&x.shape, out)
}

pub(crate) fn axis_layout(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let len = shape[axis];
    let inner = shape[axis + 1..].iter().product();
    (outer, len, inner)
}

pub(crate) fn softmax_in_place<T: Scalar>(data: &mut [T], shape: &[usize], axis: usize) {
    let (outer, len, inner) = axis_layout(shape, axis);
    for o in 0..outer {
        for i in 0..inner {
            let base = o * len * inner + i;
            let mut mx = T::neg_infinity();
            for j in 0..len {
                mx = mx.max(data[base + j * inner]);
            }
            let mut total = T::zero();
            for j in 0..len {
                let e = (data[base + j * inner] - mx).exp();
                data[base + j * inner] = e;
                total += e;
            }
            let inv = T::one() / total;
            for j in 0..len {
                data[base + j * inner] *= inv;
            }
        }
    }
}

/// Layer normalization over the last axis with population variance.
pub fn layernorm<T: Scalar>(
    x: &Tensor<T>,
    gain: &Tensor<T>,
    bias: &Tensor<T>,
    eps: T,
) -> Result<Tensor<T>, TensorError> {
    let d = x.last_dim();
    if gain.shape != [d] || bias.shape != [d] {
        return Err(TensorError::shapes("layernorm", &x.shape, &gain.shape));
    }
    if eps <= T::zero() {
        return Err(TensorError::contract("layernorm", "eps must be positive"));
    }
    let (out, _, _) = layernorm_forward(&x.data, d, &gain.data, &bias.data, eps);
    Tensor::new(&x.shape, out)
}

pub(crate) fn layernorm_forward<T: Scalar>(
    x: &[T],
    d: usize,
    gain: &[T],
    bias: &[T],
    eps: T,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let rows = x.len() / d;
    let inv_d = T::one() / T::of(d as f64);
    let mut out = vec![T::zero(); x.len()];
    let mut means = Vec::with_capacity(rows);
    let mut rstds = Vec::with_capacity(rows);
    for r in 0..rows {
        let row = &x[r * d..(r + 1) * d];
        let mean = row.iter().copied().sum::<T>() * inv_d;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_d;
        let rstd = T::one() / (var + eps).sqrt();
        for j in 0..d {
            out[r * d + j] = (row[j] - mean) * rstd * gain[j] + bias[j];
        }
        means.push(mean);
        rstds.push(rstd);
    }
    (out, means, rstds)
}

/// `1/k!` for `k = 0..=15`.
pub(crate) const INV_FACT: [f64; 16] = [
    1.0,
    1.0,
    0.5,
    1.0 / 6.0,
    1.0 / 24.0,
    1.0 / 120.0,
    1.0 / 720.0,
    1.0 / 5040.0,
    1.0 / 40320.0,
    1.0 / 362880.0,
    1.0 / 3628800.0,
    1.0 / 39916800.0,
    1.0 / 479001600.0,
    1.0 / 6227020800.0,
    1.0 / 87178291200.0,
    1.0 / 1307674368000.0,
];

/// `e^x` by range reduction and a Taylor polynomial, with no calls or
/// branches so loops over it vectorize. Agrees with `exp` to a few ulp;
/// arguments beyond the normal range are clamped and NaN propagates.
#[inline(always)]
pub fn exp_poly<T: Scalar>(x: T) -> T {
    let lim = T::of(T::EXP_LIMIT);
    let x = if x < -lim {
        -lim
    } else if x > lim {
        lim
    } else {
        x
    };
    let magic = T::of(T::ROUND_MAGIC);
    let n = (x * T::of(std::f64::consts::LOG2_E) + magic) - magic;
    let r = (x - n * T::of(T::LN2_HI)) - n * T::of(T::LN2_LO);
    let mut p = T::of(INV_FACT[T::EXP_TERMS - 1]);
    for k in (0..T::EXP_TERMS - 1).rev() {
        p = p * r + T::of(INV_FACT[k]);
    }
    p * n.pow2i()
}

#[inline]
pub fn sigmoid<T: Scalar>(x: T) -> T {
    let e = exp_poly(-x.abs());
    let r = T::one() / (T::one() + e);
    if x >= T::zero() {
        r
    } else {
        e * r
    }
}

#[inline]
pub fn silu_scalar<T: Scalar>(x: T) -> T {
    x * sigmoid(x)
}

/// d/dx of `x * sigmoid(x)`.
#[inline]
pub fn silu_grad<T: Scalar>(x: T) -> T {
    let s = sigmoid(x);
    s * (T::one() + x * (T::one() - s))
}

pub fn silu<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    x.map(silu_scalar)
}

/// `ln(1 + e^x)` as `max(x, 0) + ln(1 + e^-|x|)`: overflow-safe and smooth.
pub fn softplus_scalar<T: Scalar>(x: T) -> T {
    let pos = if x < T::zero() { T::zero() } else { x };
    pos + (-x.abs()).exp().ln_1p()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_identity_and_dot() {
        let i2 = Tensor::<f64>::eye(2);
        let v = Tensor::from_f64(&[2, 1], &[3.0, 4.0]).unwrap();
        assert_eq!(matmul(&i2, &v).unwrap().data(), &[3.0, 4.0]);
        let a = Tensor::<f64>::from_f64(&[1, 2], &[1.0, 2.0]).unwrap();
        assert_eq!(matmul(&a, &v).unwrap().data(), &[11.0]);
    }

    #[test]
    fn matmul_rejects_mismatch_naming_both_shapes() {
        let a = Tensor::<f64>::zeros(&[2, 3]);
        let b = Tensor::<f64>::zeros(&[2, 3]);
        let err = matmul(&a, &b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]"), "{err}");
        assert_eq!(err.matches("[2, 3]").count(), 2);
    }

    #[test]
    fn matmul_associativity() {
        let mut rng = Rng::new(3, 0);
        let a = Tensor::<f64>::randn(&[5, 7], &mut rng);
        let b = Tensor::<f64>::randn(&[7, 4], &mut rng);
        let c = Tensor::<f64>::randn(&[4, 6], &mut rng);
        let left = matmul(&matmul(&a, &b).unwrap(), &c).unwrap();
        let right = matmul(&a, &matmul(&b, &c).unwrap()).unwrap();
        let scale = a.max_abs() * b.max_abs() * c.max_abs();
        assert!(left.max_abs_diff(&right) < 1e-10 * scale);
    }

    #[test]
    fn softmax_examples() {
        let s = softmax(&Tensor::<f64>::from_f64(&[2], &[0.0, 0.0]).unwrap(), 0).unwrap();
        assert_eq!(s.data(), &[0.5, 0.5]);
        let s = softmax(&Tensor::<f64>::from_f64(&[2], &[1000.0, 0.0]).unwrap(), 0).unwrap();
        assert_eq!(s.data()[0], 1.0);
        assert!(s.data()[1] < 1e-300);
        let s = softmax(&Tensor::<f64>::from_f64(&[3], &[1.0, 2.0, 3.0]).unwrap(), 0).unwrap();
        for (got, want) in s.data().iter().zip([0.09003057, 0.24472847, 0.66524096]) {
            assert!((got - want).abs() < 5e-9);
        }
    }

    #[test]
    fn softmax_rows_are_probability_vectors() {
        let mut rng = Rng::new(11, 0);
        let x = Tensor::<f32>::randn(&[4, 5, 6], &mut rng).scale(4.0);
        for axis in 0..3 {
            let s = softmax(&x, axis).unwrap();
            let (outer, len, inner) = axis_layout(s.shape(), axis);
            for o in 0..outer {
                for i in 0..inner {
                    let total: f32 = (0..len).map(|j| s.data()[o * len * inner + j * inner + i]).sum();
                    assert!((total - 1.0).abs() < 1e-6);
                }
            }
            assert!(s.data().iter().all(|&v| v >= 0.0));
        }
    }

    #[test]
    fn softmax_axis_out_of_range() {
        assert!(softmax(&Tensor::<f64>::zeros(&[2, 2]), 2).is_err());
    }

    #[test]
    fn layernorm_examples() {
        let g = Tensor::<f64>::ones(&[2]);
        let b = Tensor::<f64>::zeros(&[2]);
        let c = Tensor::from_f64(&[2], &[5.0, 5.0]).unwrap();
        assert_eq!(layernorm(&c, &g, &b, 1e-5).unwrap().data(), &[0.0, 0.0]);
        let x = Tensor::from_f64(&[2], &[1.0, 3.0]).unwrap();
        let y = layernorm(&x, &g, &b, 1e-14).unwrap();
        assert!((y.data()[0] + 1.0).abs() < 1e-12 && (y.data()[1] - 1.0).abs() < 1e-12);

        let mut rng = Rng::new(5, 1);
        let x = Tensor::<f64>::randn(&[64], &mut rng).scale(3.0);
        let y = layernorm(&x, &Tensor::ones(&[64]), &Tensor::zeros(&[64]), 1e-5).unwrap();
        let mean = y.sum() / 64.0;
        let var = y.data().iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 64.0;
        assert!(mean.abs() < 1e-7);
        assert!((var - 1.0).abs() < 1e-5);
    }

    #[test]
    fn exp_poly_tracks_exp() {
        let mut worst64 = 0.0f64;
        let mut worst32 = 0.0f64;
        for i in 0..=20000 {
            let x = -700.0 + 1400.0 * i as f64 / 20000.0;
            worst64 = worst64.max((exp_poly(x) - x.exp()).abs() / x.exp());
            let xf = (x / 8.5) as f32;
            let want = (xf as f64).exp();
            worst32 = worst32.max((exp_poly(xf) as f64 - want).abs() / want);
        }
        assert!(worst64 < 4.0 * f64::EPSILON, "{worst64:e}");
        assert!(worst32 < 4.0 * f32::EPSILON as f64, "{worst32:e}");
        assert_eq!(exp_poly(0.0f64), 1.0);
        assert!(exp_poly(f64::NAN).is_nan());
        assert!(exp_poly(-1e6f64) < 1e-300);
        assert!(exp_poly(f32::NEG_INFINITY) >= 0.0);
    }

    #[test]
    fn silu_values() {
        assert_eq!(silu_scalar(0.0f64), 0.0);
        assert_eq!(silu_grad(0.0f64), 0.5);
        assert!((silu_scalar(1.0f64) - 0.7310586).abs() < 1e-7);
        assert!((silu_scalar(40.0f64) - 40.0).abs() < 1e-12);
    }

    #[test]
    fn trailing_broadcast_only() {
        let a = Tensor::<f64>::ones(&[2, 3]);
        let b = Tensor::from_f64(&[3], &[1.0, 2.0, 3.0]).unwrap();
        assert_eq!(a.add(&b).unwrap().data(), &[2.0, 3.0, 4.0, 2.0, 3.0, 4.0]);
        assert!(a.add(&Tensor::ones(&[2])).is_err());
    }
}
