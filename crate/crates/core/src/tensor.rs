//! Dense row-major tensors over `f32` or `f64`.

use std::fmt::{Debug, Display};
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive};
use serde::{Deserialize, Serialize};
use twofloat::TwoFloat;

use crate::error::{arg_err, shape_err, Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum DType {
    F32,
    F64,
    /// Unevaluated `hi + lo` pair of f64, used only as a reference precision.
    F64x2,
}

impl DType {
    pub fn code(self) -> u8 {
        match self {
            DType::F32 => 1,
            DType::F64 => 2,
            DType::F64x2 => 3,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            1 => Some(DType::F32),
            2 => Some(DType::F64),
            3 => Some(DType::F64x2),
            _ => None,
        }
    }

    pub fn size(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
            DType::F64x2 => 16,
        }
    }
}

/// Floating-point element type. Implemented for `f32` (training and
/// inference) and `f64` (gradient verification).
pub trait Scalar:
    Float
    + FromPrimitive
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Debug
    + Display
    + Default
    + Send
    + Sync
    + 'static
{
    const DTYPE: DType;

    /// `c = alpha * a @ b + beta * c` with arbitrary row/column strides.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: &[Self],
        rsa: isize,
        csa: isize,
        b: &[Self],
        rsb: isize,
        csb: isize,
        beta: Self,
        c: &mut [Self],
        rsc: isize,
        csc: isize,
    );

    fn lit(v: f64) -> Self;
    fn div_s(self, d: Self) -> Self {
        self / d
    }
    fn nat_exp(self) -> Self {
        self.exp()
    }
    fn nat_log(self) -> Self {
        self.ln()
    }
    fn total(it: impl Iterator<Item = Self>) -> Self {
        it.fold(Self::zero(), |a, b| a + b)
    }

    fn write_le(self, out: &mut Vec<u8>);

    fn read_le(bytes: &[u8]) -> Self;
}

macro_rules! check_gemm_bounds {
    ($m:expr, $k:expr, $n:expr, $a:expr, $rsa:expr, $csa:expr, $b:expr, $rsb:expr, $csb:expr, $c:expr, $rsc:expr, $csc:expr) => {
        debug_assert!(max_offset($m, $k, $rsa, $csa) < $a.len().max(1));
        debug_assert!(max_offset($k, $n, $rsb, $csb) < $b.len().max(1));
        debug_assert!(max_offset($m, $n, $rsc, $csc) < $c.len().max(1));
    };
}

fn max_offset(rows: usize, cols: usize, rs: isize, cs: isize) -> usize {
    if rows == 0 || cols == 0 {
        return 0;
    }
    ((rows as isize - 1) * rs + (cols as isize - 1) * cs) as usize
}

impl Scalar for f32 {
    const DTYPE: DType = DType::F32;

    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: f32,
        a: &[f32],
        rsa: isize,
        csa: isize,
        b: &[f32],
        rsb: isize,
        csb: isize,
        beta: f32,
        c: &mut [f32],
        rsc: isize,
        csc: isize,
    ) {
        check_gemm_bounds!(m, k, n, a, rsa, csa, b, rsb, csb, c, rsc, csc);
        assert!(max_offset(m, n, rsc, csc) < c.len().max(1));
        // SAFETY: all offsets reachable from the strides lie within the slices.
        unsafe {
            matrixmultiply::sgemm(
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
                rsc,
                csc,
            )
        }
    }

    fn lit(v: f64) -> Self {
        v as f32
    }

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn read_le(bytes: &[u8]) -> Self {
        f32::from_le_bytes(bytes[..4].try_into().unwrap())
    }
}

impl Scalar for f64 {
    const DTYPE: DType = DType::F64;

    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: f64,
        a: &[f64],
        rsa: isize,
        csa: isize,
        b: &[f64],
        rsb: isize,
        csb: isize,
        beta: f64,
        c: &mut [f64],
        rsc: isize,
        csc: isize,
    ) {
        check_gemm_bounds!(m, k, n, a, rsa, csa, b, rsb, csb, c, rsc, csc);
        assert!(max_offset(m, n, rsc, csc) < c.len().max(1));
        // SAFETY: see the f32 impl.
        unsafe {
            matrixmultiply::dgemm(
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
                rsc,
                csc,
            )
        }
    }

    fn lit(v: f64) -> Self {
        v
    }

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn read_le(bytes: &[u8]) -> Self {
        f64::from_le_bytes(bytes[..8].try_into().unwrap())
    }
}

impl Scalar for TwoFloat {
    const DTYPE: DType = DType::F64x2;

    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: &[Self],
        rsa: isize,
        csa: isize,
        b: &[Self],
        rsb: isize,
        csb: isize,
        beta: Self,
        c: &mut [Self],
        rsc: isize,
        csc: isize,
    ) {
        check_gemm_bounds!(m, k, n, a, rsa, csa, b, rsb, csb, c, rsc, csc);
        for i in 0..m as isize {
            for j in 0..n as isize {
                let mut acc = TwoFloat::from(0.0);
                for p in 0..k as isize {
                    acc += a[(i * rsa + p * csa) as usize] * b[(p * rsb + j * csb) as usize];
                }
                let slot = &mut c[(i * rsc + j * csc) as usize];
                *slot = if beta == TwoFloat::from(0.0) { alpha * acc } else { alpha * acc + beta * *slot };
            }
        }
    }

    fn lit(v: f64) -> Self {
        TwoFloat::from(v)
    }

    // The crate's own division, exp and ln stop well short of double-double
    // accuracy; one correction step restores it.
    fn div_s(self, d: Self) -> Self {
        let q = self / d;
        q + (self - q * d) / d
    }

    fn nat_exp(self) -> Self {
        if !self.hi().is_finite() || self.hi().abs() > 700.0 {
            return TwoFloat::from(self.hi().exp());
        }
        let ln2 = TwoFloat::new_add(6.931_471_805_599_453e-1, 2.319_046_813_846_299_6e-17);
        let k = (self.hi() / std::f64::consts::LN_2).round();
        let r = (self - ln2 * k) / 1024.0;
        // expm1(r) by Taylor series, then undo the scaling with
        // expm1(2a) = expm1(a) * (2 + expm1(a)).
        let mut term = r;
        let mut s = r;
        for n in 2..=12 {
            term = (term * r).div_s(TwoFloat::from(n as f64));
            s += term;
        }
        for _ in 0..10 {
            s = s * (s + 2.0);
        }
        (s + 1.0) * 2f64.powi(k as i32)
    }

    fn nat_log(self) -> Self {
        if !(self.hi() > 0.0) || !self.hi().is_finite() {
            return TwoFloat::from(self.hi().ln());
        }
        let mut y = TwoFloat::from(self.hi().ln());
        for _ in 0..2 {
            y = y + self * (-y).nat_exp() - 1.0;
        }
        y
    }

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.hi().to_le_bytes());
        out.extend_from_slice(&self.lo().to_le_bytes());
    }

    fn read_le(bytes: &[u8]) -> Self {
        let hi = f64::from_le_bytes(bytes[..8].try_into().unwrap());
        let lo = f64::from_le_bytes(bytes[8..16].try_into().unwrap());
        TwoFloat::try_from((hi, lo)).unwrap_or(TwoFloat::from(hi))
    }
}

/// Row-major n-dimensional array with an optional gradient buffer.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
    pub requires_grad: bool,
    pub grad: Option<Vec<T>>,
}

pub fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<T>) -> Result<Self> {
        let shape = shape.into();
        if numel(&shape) != data.len() {
            return Err(shape_err(
                "tensor",
                format!(
                    "shape {:?} holds {} values but {} were given",
                    shape,
                    numel(&shape),
                    data.len()
                ),
            ));
        }
        Ok(Self {
            shape,
            data,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn full(shape: impl Into<Vec<usize>>, value: T) -> Self {
        let shape = shape.into();
        let n = numel(&shape);
        Self {
            shape,
            data: vec![value; n],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn from_f64(shape: impl Into<Vec<usize>>, data: &[f64]) -> Result<Self> {
        Self::new(shape, data.iter().map(|&v| T::lit(v)).collect())
    }

    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self
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

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn reshape(mut self, shape: impl Into<Vec<usize>>) -> Result<Self> {
        let shape = shape.into();
        if numel(&shape) != self.data.len() {
            return Err(shape_err(
                "reshape",
                format!("{:?} -> {:?}", self.shape, shape),
            ));
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .map(|v| U::lit(v.to_f64().unwrap()))
                .collect(),
            requires_grad: self.requires_grad,
            grad: None,
        }
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.data.iter().map(|v| v.to_f64().unwrap()).collect()
    }

    pub fn ensure_finite(&self, op: &'static str) -> Result<()> {
        if self.data.iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(Error::NonFinite { op })
        }
    }

    pub fn zero_grad(&mut self) {
        self.grad = None;
    }

    /// Adds `g` into the gradient buffer, allocating it on first use.
    pub fn accumulate_grad(&mut self, g: &[T]) -> Result<()> {
        if g.len() != self.data.len() {
            return Err(arg_err(
                "accumulate_grad",
                format!("gradient has {} values, tensor {}", g.len(), self.data.len()),
            ));
        }
        let buf = self.grad.get_or_insert_with(|| vec![T::zero(); g.len()]);
        for (b, &v) in buf.iter_mut().zip(g) {
            *b += v;
        }
        Ok(())
    }

    pub fn sum(&self) -> T {
        T::total(self.data.iter().copied())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn product_of_shape_must_match_data() {
        assert!(Tensor::<f32>::new([2, 3], vec![0.0; 6]).is_ok());
        let err = Tensor::<f32>::new([2, 3], vec![0.0; 5]).unwrap_err();
        assert!(err.to_string().contains("[2, 3]"));
    }

    #[test]
    fn grad_accumulates() {
        let mut t = Tensor::<f64>::zeros([2]);
        t.accumulate_grad(&[1.0, 2.0]).unwrap();
        t.accumulate_grad(&[1.0, 2.0]).unwrap();
        assert_eq!(t.grad.as_deref(), Some(&[2.0, 4.0][..]));
        assert!(t.accumulate_grad(&[1.0]).is_err());
    }

    #[test]
    fn gemm_transposed_strides() {
        // a: 2x3, b^T stored as 2x3 -> a @ b = 2x2
        let a = [1.0f64, 2.0, 3.0, 4.0, 5.0, 6.0];
        let bt = [1.0f64, 0.0, 1.0, 0.0, 1.0, 0.0];
        let mut c = [0.0f64; 4];
        f64::gemm(2, 3, 2, 1.0, &a, 3, 1, &bt, 1, 3, 0.0, &mut c, 2, 1);
        assert_eq!(c, [4.0, 2.0, 10.0, 5.0]);
    }

    #[test]
    fn double_double_exp_and_log() {
        let e = TwoFloat::new_add(2.718_281_828_459_045, 1.445_646_891_729_250_2e-16);
        let ln2 = TwoFloat::new_add(6.931_471_805_599_453e-1, 2.319_046_813_846_299_6e-17);
        let err = |a: TwoFloat, b: TwoFloat| f64::from(a - b).abs();
        assert!(err(TwoFloat::from(1.0).nat_exp(), e) < 1e-30);
        assert!(err(TwoFloat::from(2.0).nat_log(), ln2) < 1e-30);
        assert!(err(TwoFloat::from(-3.5).nat_exp().nat_log(), TwoFloat::from(-3.5)) < 1e-29);
        // Central differences stay smooth at tiny steps.
        let x = TwoFloat::from(0.3);
        let h = TwoFloat::from(1e-10);
        let d = ((x + h).nat_exp() - (x - h).nat_exp()) / (h * 2.0);
        assert!(err(d, x.nat_exp()) < 1e-15);
        let d = ((x + h).nat_log() - (x - h).nat_log()) / (h * 2.0);
        assert!(err(d, TwoFloat::from(1.0) / x) < 1e-15);
    }
}
