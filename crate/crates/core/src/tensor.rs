//! Dense 4-D tensors in NCHW layout and the scalar trait the kernels are generic over.

use std::fmt;

use num_traits::{Float, FromPrimitive, ToPrimitive};

use crate::error::{Error, Result};

/// Floating point element type. `f32` is the working precision, `f64` is used
/// for gradient checks.
pub trait Real: Float + FromPrimitive + ToPrimitive + Default + Send + Sync + fmt::Debug + fmt::Display + std::iter::Sum + 'static {
    /// Checkpoint dtype code.
    const DTYPE_CODE: u8;
    const BYTES: usize;

    /// `c = alpha * a * b + beta * c` on strided row/column-major views.
    #[allow(clippy::too_many_arguments)]
    fn gemm(m: usize, k: usize, n: usize, a: MatRef<'_, Self>, b: MatRef<'_, Self>, beta: Self, c: &mut [Self], rsc: usize);

    fn write_le(self, out: &mut Vec<u8>);
    fn read_le(bytes: &[u8]) -> Self;

    fn from_f64_lossy(v: f64) -> Self {
        Self::from_f64(v).expect("f64 converts to every Real")
    }
}

/// Borrowed strided matrix view used to express transposes without copying.
#[derive(Clone, Copy)]
pub struct MatRef<'a, T> {
    pub data: &'a [T],
    pub row_stride: usize,
    pub col_stride: usize,
}

impl<'a, T> MatRef<'a, T> {
    /// Row-major `rows x cols` matrix.
    pub fn rows(data: &'a [T], cols: usize) -> Self {
        MatRef {
            data,
            row_stride: cols,
            col_stride: 1,
        }
    }

    /// Transpose of a row-major matrix with `cols` columns.
    pub fn transposed(data: &'a [T], cols: usize) -> Self {
        MatRef {
            data,
            row_stride: 1,
            col_stride: cols,
        }
    }
}

fn check_gemm_bounds<T>(m: usize, k: usize, n: usize, a: &MatRef<'_, T>, b: &MatRef<'_, T>, c_len: usize, rsc: usize) {
    let last = |rows: usize, cols: usize, rs: usize, cs: usize| {
        if rows == 0 || cols == 0 {
            0
        } else {
            (rows - 1) * rs + (cols - 1) * cs + 1
        }
    };
    assert!(last(m, k, a.row_stride, a.col_stride) <= a.data.len(), "gemm: lhs out of bounds");
    assert!(last(k, n, b.row_stride, b.col_stride) <= b.data.len(), "gemm: rhs out of bounds");
    assert!(last(m, n, rsc, 1) <= c_len, "gemm: output out of bounds");
}

impl Real for f32 {
    const DTYPE_CODE: u8 = 0;
    const BYTES: usize = 4;

    fn gemm(m: usize, k: usize, n: usize, a: MatRef<'_, f32>, b: MatRef<'_, f32>, beta: f32, c: &mut [f32], rsc: usize) {
        check_gemm_bounds(m, k, n, &a, &b, c.len(), rsc);
        if m == 0 || n == 0 {
            return;
        }
        // SAFETY: bounds of all three operands were checked above.
        unsafe {
            matrixmultiply::sgemm(
                m,
                k,
                n,
                1.0,
                a.data.as_ptr(),
                a.row_stride as isize,
                a.col_stride as isize,
                b.data.as_ptr(),
                b.row_stride as isize,
                b.col_stride as isize,
                beta,
                c.as_mut_ptr(),
                rsc as isize,
                1,
            );
        }
    }

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn read_le(bytes: &[u8]) -> Self {
        f32::from_le_bytes(bytes.try_into().expect("4 bytes"))
    }
}

impl Real for f64 {
    const DTYPE_CODE: u8 = 1;
    const BYTES: usize = 8;

    fn gemm(m: usize, k: usize, n: usize, a: MatRef<'_, f64>, b: MatRef<'_, f64>, beta: f64, c: &mut [f64], rsc: usize) {
        check_gemm_bounds(m, k, n, &a, &b, c.len(), rsc);
        if m == 0 || n == 0 {
            return;
        }
        // SAFETY: bounds of all three operands were checked above.
        unsafe {
            matrixmultiply::dgemm(
                m,
                k,
                n,
                1.0,
                a.data.as_ptr(),
                a.row_stride as isize,
                a.col_stride as isize,
                b.data.as_ptr(),
                b.row_stride as isize,
                b.col_stride as isize,
                beta,
                c.as_mut_ptr(),
                rsc as isize,
                1,
            );
        }
    }

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn read_le(bytes: &[u8]) -> Self {
        f64::from_le_bytes(bytes.try_into().expect("8 bytes"))
    }
}

/// Dimensions `(n, c, h, w)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Dims {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Dims {
    pub const fn new(n: usize, c: usize, h: usize, w: usize) -> Self {
        Dims { n, c, h, w }
    }

    pub fn len(&self) -> usize {
        self.n * self.c * self.h * self.w
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Elements per spatial plane.
    pub fn plane(&self) -> usize {
        self.h * self.w
    }

    /// Elements per batch item.
    pub fn item(&self) -> usize {
        self.c * self.h * self.w
    }
}

impl fmt::Display for Dims {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {}, {}, {})", self.n, self.c, self.h, self.w)
    }
}

/// Row-major NCHW tensor (w fastest).
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    dims: Dims,
    data: Vec<T>,
}

impl<T: Real> Tensor<T> {
    pub fn zeros(dims: Dims) -> Self {
        Tensor {
            dims,
            data: vec![T::zero(); dims.len()],
        }
    }

    pub fn filled(dims: Dims, value: T) -> Self {
        Tensor {
            dims,
            data: vec![value; dims.len()],
        }
    }

    pub fn from_vec(dims: Dims, data: Vec<T>) -> Result<Self> {
        if data.len() != dims.len() {
            return Err(Error::shape(
                "Tensor::from_vec",
                format!("{} elements for {dims}", dims.len()),
                format!("{} elements", data.len()),
            ));
        }
        Ok(Tensor { dims, data })
    }

    /// Rank-1 tensor stored as `(1, len, 1, 1)`, the layout used for per-channel vectors.
    pub fn vector(data: Vec<T>) -> Self {
        Tensor {
            dims: Dims::new(1, data.len(), 1, 1),
            data,
        }
    }

    pub fn dims(&self) -> Dims {
        self.dims
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

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    #[inline]
    pub fn offset(&self, n: usize, c: usize, h: usize, w: usize) -> usize {
        ((n * self.dims.c + c) * self.dims.h + h) * self.dims.w + w
    }

    #[inline]
    pub fn at(&self, n: usize, c: usize, h: usize, w: usize) -> T {
        self.data[self.offset(n, c, h, w)]
    }

    #[inline]
    pub fn set(&mut self, n: usize, c: usize, h: usize, w: usize, v: T) {
        let o = self.offset(n, c, h, w);
        self.data[o] = v;
    }

    /// Slice of one batch item.
    pub fn item(&self, n: usize) -> &[T] {
        let s = self.dims.item();
        &self.data[n * s..(n + 1) * s]
    }

    pub fn fill(&mut self, v: T) {
        self.data.iter_mut().for_each(|x| *x = v);
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor {
            dims: self.dims,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Converts element type (e.g. for 64-bit gradient checks).
    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor {
            dims: self.dims,
            data: self
                .data
                .iter()
                .map(|v| U::from_f64_lossy(v.to_f64().unwrap_or(f64::NAN)))
                .collect(),
        }
    }

    pub(crate) fn expect_dims(&self, op: &'static str, dims: Dims) -> Result<()> {
        if self.dims != dims {
            return Err(Error::shape(op, dims, self.dims));
        }
        Ok(())
    }
}

/// Per-pixel integer class labels for a batch, `(n, h, w)`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelMap {
    pub n: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<u8>,
}

impl LabelMap {
    pub fn new(n: usize, h: usize, w: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != n * h * w {
            return Err(Error::shape(
                "LabelMap::new",
                format!("{} labels", n * h * w),
                format!("{} labels", data.len()),
            ));
        }
        Ok(LabelMap { n, h, w, data })
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Stacks single-item label maps into one batch.
    pub fn stack(items: &[LabelMap]) -> Result<Self> {
        let first = items
            .first()
            .ok_or_else(|| Error::Usage("cannot stack an empty list of label maps".into()))?;
        let mut data = Vec::with_capacity(first.len() * items.len());
        let mut n = 0;
        for item in items {
            if (item.h, item.w) != (first.h, first.w) {
                return Err(Error::shape(
                    "LabelMap::stack",
                    format!("{}x{}", first.h, first.w),
                    format!("{}x{}", item.h, item.w),
                ));
            }
            n += item.n;
            data.extend_from_slice(&item.data);
        }
        LabelMap::new(n, first.h, first.w, data)
    }
}

/// Concatenates tensors along the batch axis.
pub fn stack_batch<T: Real>(items: &[Tensor<T>]) -> Result<Tensor<T>> {
    let first = items
        .first()
        .ok_or_else(|| Error::Usage("cannot stack an empty list of tensors".into()))?
        .dims();
    let mut data = Vec::with_capacity(first.len() * items.len());
    let mut n = 0;
    for t in items {
        let d = t.dims();
        if (d.c, d.h, d.w) != (first.c, first.h, first.w) {
            return Err(Error::shape("stack_batch", first, d));
        }
        n += d.n;
        data.extend_from_slice(t.data());
    }
    Tensor::from_vec(Dims::new(n, first.c, first.h, first.w), data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn from_vec_rejects_wrong_length() {
        let err = Tensor::<f32>::from_vec(Dims::new(1, 2, 2, 2), vec![0.0; 7]).unwrap_err();
        assert!(matches!(err, Error::Shape { .. }));
    }

    #[test]
    fn gemm_with_transposed_operand() {
        // a (2x3), b^T where b is stored 2x3 -> result 2x2
        let a = [1.0f64, 2.0, 3.0, 4.0, 5.0, 6.0];
        let b = [1.0f64, 0.0, 1.0, 0.0, 1.0, 0.0];
        let mut c = [0.0f64; 4];
        f64::gemm(2, 3, 2, MatRef::rows(&a, 3), MatRef::transposed(&b, 3), 0.0, &mut c, 2);
        assert_eq!(c, [4.0, 2.0, 10.0, 5.0]);
    }

    #[test]
    fn offset_is_row_major() {
        let t = Tensor::<f32>::zeros(Dims::new(2, 3, 4, 5));
        assert_eq!(t.offset(1, 2, 3, 4), t.len() - 1);
        assert_eq!(t.offset(0, 0, 1, 0), 5);
    }
}
