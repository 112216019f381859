//! Dense row-major tensors and the handful of primitives the rest of the
//! crate builds on.
//!
//! Tensors are generic over [`Scalar`] so that training can run in `f32`
//! while gradient checking runs the same code in `f64`.

use std::fmt;

use crate::error::{Error, Result};

pub const MAX_RANK: usize = 5;

/// Element type of a [`Tensor`].
pub trait Scalar:
    Copy
    + Default
    + PartialOrd
    + fmt::Debug
    + fmt::Display
    + Send
    + Sync
    + 'static
    + std::ops::Add<Output = Self>
    + std::ops::Sub<Output = Self>
    + std::ops::Mul<Output = Self>
    + std::ops::Div<Output = Self>
    + std::ops::AddAssign
    + std::ops::SubAssign
    + std::ops::MulAssign
    + std::ops::Neg<Output = Self>
{
    const ZERO: Self;
    const ONE: Self;
    /// TNSR dtype code.
    const DTYPE: u8;
    const BYTES: usize;

    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
    fn sqrt(self) -> Self;
    fn is_finite(self) -> bool;
    fn write_le(self, out: &mut Vec<u8>);
    fn read_le(bytes: &[u8]) -> Self;

    /// `c = alpha * op(a) * op(b) + beta * c` with `op(a)` m×k, `op(b)` k×n and
    /// `c` m×n, all row-major. `trans_*` means the stored matrix is the
    /// transpose of the operand.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        trans_a: bool,
        trans_b: bool,
        m: usize,
        n: usize,
        k: usize,
        alpha: Self,
        a: &[Self],
        b: &[Self],
        beta: Self,
        c: &mut [Self],
    );
}

fn gemm_strides(trans: bool, rows: usize, cols: usize) -> (isize, isize) {
    // (row stride, column stride) of the logical rows×cols operand.
    if trans {
        (1, rows as isize)
    } else {
        (cols as isize, 1)
    }
}

macro_rules! impl_scalar {
    ($t:ty, $code:expr, $bytes:expr, $gemm:path) => {
        impl Scalar for $t {
            const ZERO: Self = 0.0;
            const ONE: Self = 1.0;
            const DTYPE: u8 = $code;
            const BYTES: usize = $bytes;

            #[inline]
            fn from_f64(v: f64) -> Self {
                v as $t
            }
            #[inline]
            fn to_f64(self) -> f64 {
                self as f64
            }
            #[inline]
            fn sqrt(self) -> Self {
                <$t>::sqrt(self)
            }
            #[inline]
            fn is_finite(self) -> bool {
                <$t>::is_finite(self)
            }
            fn write_le(self, out: &mut Vec<u8>) {
                out.extend_from_slice(&self.to_le_bytes());
            }
            fn read_le(bytes: &[u8]) -> Self {
                let mut buf = [0u8; $bytes];
                buf.copy_from_slice(&bytes[..$bytes]);
                <$t>::from_le_bytes(buf)
            }

            fn gemm(
                trans_a: bool,
                trans_b: bool,
                m: usize,
                n: usize,
                k: usize,
                alpha: Self,
                a: &[Self],
                b: &[Self],
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
                let (rsa, csa) = gemm_strides(trans_a, m, k);
                let (rsb, csb) = gemm_strides(trans_b, k, n);
                // SAFETY: the operand lengths were checked against the
                // logical extents above, and the strides address exactly
                // those extents.
                unsafe {
                    $gemm(
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

impl_scalar!(f32, 1, 4, matrixmultiply::sgemm);
impl_scalar!(f64, 2, 8, matrixmultiply::dgemm);

/// Ordered list of positive extents, between one and five dimensions.
#[derive(Clone, PartialEq, Eq, Hash)]
pub struct Shape(Vec<usize>);

impl Shape {
    pub fn new(dims: impl Into<Vec<usize>>) -> Result<Self> {
        let dims = dims.into();
        if dims.is_empty() || dims.len() > MAX_RANK {
            return Err(Error::shape(format!(
                "rank {} outside 1..={MAX_RANK}",
                dims.len()
            )));
        }
        if dims.contains(&0) {
            return Err(Error::shape(format!("zero extent in {dims:?}")));
        }
        dims.iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| Error::shape(format!("element count of {dims:?} overflows")))?;
        Ok(Shape(dims))
    }

    pub fn dims(&self) -> &[usize] {
        &self.0
    }

    pub fn rank(&self) -> usize {
        self.0.len()
    }

    pub fn numel(&self) -> usize {
        self.0.iter().product()
    }

    /// Parses the `AxBxC` form produced by `Display`.
    pub fn parse(s: &str) -> Result<Self> {
        let dims = s
            .trim()
            .split('x')
            .map(|p| {
                p.trim()
                    .parse::<usize>()
                    .map_err(|_| Error::format(format!("bad shape `{s}`")))
            })
            .collect::<Result<Vec<_>>>()?;
        Shape::new(dims)
    }
}

impl fmt::Debug for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:?}", self.0)
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.0.iter().map(|d| d.to_string()).collect();
        f.write_str(&parts.join("x"))
    }
}

/// Dense N-dimensional array with a contiguous row-major buffer.
#[derive(Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Shape,
    data: Vec<T>,
}

impl<T: fmt::Debug> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.shape)
            .field("len", &self.data.len())
            .finish()
    }
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: Shape, data: Vec<T>) -> Result<Self> {
        if data.len() != shape.numel() {
            return Err(Error::shape(format!(
                "buffer of {} elements for shape {shape}",
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn from_dims(dims: &[usize], data: Vec<T>) -> Result<Self> {
        Tensor::new(Shape::new(dims.to_vec())?, data)
    }

    pub fn zeros(shape: Shape) -> Self {
        Self::full(shape, T::ZERO)
    }

    pub fn full(shape: Shape, value: T) -> Self {
        let n = shape.numel();
        Tensor {
            shape,
            data: vec![value; n],
        }
    }

    pub fn shape(&self) -> &Shape {
        &self.shape
    }

    pub fn dims(&self) -> &[usize] {
        self.shape.dims()
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

    pub fn sum(&self) -> f64 {
        self.data.iter().map(|v| v.to_f64()).sum()
    }

    pub fn max_value(&self) -> T {
        self.data
            .iter()
            .copied()
            .fold(self.data[0], |m, v| if v > m { v } else { m })
    }

    pub fn min_value(&self) -> T {
        self.data
            .iter()
            .copied()
            .fold(self.data[0], |m, v| if v < m { v } else { m })
    }

    pub fn check_finite(&self, what: &str) -> Result<()> {
        if self.data.iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(Error::NonFinite(what.to_string()))
        }
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| U::from_f64(v.to_f64())).collect(),
        }
    }

    /// Reinterprets the buffer under `shape`.
    pub fn reshape(&self, shape: Shape) -> Result<Self> {
        self.clone().into_reshaped(shape)
    }

    pub fn into_reshaped(self, shape: Shape) -> Result<Self> {
        if shape.numel() != self.data.len() {
            return Err(Error::shape(format!(
                "cannot reshape {} into {shape}",
                self.shape
            )));
        }
        Ok(Tensor {
            shape,
            data: self.data,
        })
    }

    /// Sub-array anchored at the origin with the extents of `target`.
    pub fn crop_to(&self, target: &Shape) -> Result<Self> {
        if target.rank() != self.shape.rank() {
            return Err(Error::shape(format!(
                "crop rank {} != source rank {}",
                target.rank(),
                self.shape.rank()
            )));
        }
        if target
            .dims()
            .iter()
            .zip(self.dims())
            .any(|(&t, &s)| t > s)
        {
            return Err(Error::shape(format!(
                "crop target {target} exceeds source {}",
                self.shape
            )));
        }
        if target == &self.shape {
            return Ok(self.clone());
        }
        let mut out = Vec::with_capacity(target.numel());
        for_each_row(target.dims(), self.dims(), |src_off, len| {
            out.extend_from_slice(&self.data[src_off..src_off + len]);
        });
        Ok(Tensor {
            shape: target.clone(),
            data: out,
        })
    }

    /// Inverse of [`crop_to`](Self::crop_to): embeds `self` at the origin of
    /// a zero tensor of shape `source`.
    pub fn pad_to(&self, source: &Shape) -> Result<Self> {
        if source.rank() != self.shape.rank()
            || self
                .dims()
                .iter()
                .zip(source.dims())
                .any(|(&t, &s)| t > s)
        {
            return Err(Error::shape(format!(
                "cannot pad {} to {source}",
                self.shape
            )));
        }
        let mut out = Tensor::zeros(source.clone());
        let mut src = 0;
        for_each_row(self.dims(), source.dims(), |dst_off, len| {
            out.data[dst_off..dst_off + len].copy_from_slice(&self.data[src..src + len]);
            src += len;
        });
        Ok(out)
    }
}

/// Visits every innermost row of an origin-anchored `inner` box inside an
/// `outer` row-major array, passing the row's flat offset in `outer` and
/// its length.
fn for_each_row(inner: &[usize], outer: &[usize], mut f: impl FnMut(usize, usize)) {
    let rank = inner.len();
    let row_len = inner[rank - 1];
    let mut strides = vec![1usize; rank];
    for d in (0..rank - 1).rev() {
        strides[d] = strides[d + 1] * outer[d + 1];
    }
    let n_rows: usize = inner[..rank - 1].iter().product();
    let mut idx = vec![0usize; rank.saturating_sub(1)];
    for _ in 0..n_rows {
        let off: usize = idx.iter().zip(&strides).map(|(i, s)| i * s).sum();
        f(off, row_len);
        for d in (0..rank - 1).rev() {
            idx[d] += 1;
            if idx[d] < inner[d] {
                break;
            }
            idx[d] = 0;
        }
    }
}

/// Mean squared difference over all elements, accumulated in `f64`.
pub fn mse<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::shape(format!(
            "mse of {} and {}",
            a.shape(),
            b.shape()
        )));
    }
    let sum: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| {
            let d = x.to_f64() - y.to_f64();
            d * d
        })
        .sum();
    Ok(sum / a.len() as f64)
}
