//! 3x3 convolution and 2x2/stride-2 transposed convolution.
//!
//! Both are lowered to GEMM per batch item. Batch items run in parallel; the
//! weight gradient is reduced over items in index order so the result does not
//! depend on the thread count.

use std::ops::Range;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::tensor::{Dims, MatRef, Real, Tensor};

const COL_BLOCK_ELEMS: usize = 1 << 16;

pub const KERNEL: usize = 3;
pub const UP_KERNEL: usize = 2;

/// Forward inputs kept for [`conv2d_backward`].
#[derive(Clone, Debug)]
pub struct ConvCache<T> {
    pub input: Tensor<T>,
    pub stride: usize,
    pub pad: usize,
}

/// Forward inputs kept for [`transposed_conv2d_backward`].
#[derive(Clone, Debug)]
pub struct UpConvCache<T> {
    pub input: Tensor<T>,
}

#[derive(Clone, Debug)]
pub struct ConvGrads<T> {
    pub input: Tensor<T>,
    pub weight: Tensor<T>,
    pub bias: Vec<T>,
}

pub fn conv_output_size(size: usize, stride: usize, pad: usize) -> Option<usize> {
    (size + 2 * pad).checked_sub(KERNEL).map(|v| v / stride + 1)
}

struct ConvGeom {
    ci: usize,
    h: usize,
    w: usize,
    ho: usize,
    wo: usize,
    stride: usize,
    pad: usize,
}

impl ConvGeom {
    fn col_rows(&self) -> usize {
        self.ci * KERNEL * KERNEL
    }

    fn col_cols(&self) -> usize {
        self.ho * self.wo
    }

    /// Output row blocks whose column buffer stays cache-sized.
    fn row_blocks(&self) -> impl Iterator<Item = Range<usize>> + '_ {
        let rows_per_block = (COL_BLOCK_ELEMS / (self.col_rows() * self.wo).max(1)).max(1);
        (0..self.ho)
            .step_by(rows_per_block)
            .map(move |r| r..(r + rows_per_block).min(self.ho))
    }
}

/// Output columns `ox` whose input column `ox * stride + kx - pad` lies in `0..w`.
fn valid_cols(g: &ConvGeom, kx: usize) -> (usize, usize) {
    let first = g.pad.saturating_sub(kx).div_ceil(g.stride);
    let end = if g.w + g.pad > kx {
        (g.w + g.pad - kx - 1) / g.stride + 1
    } else {
        0
    };
    (first.min(g.wo), end.min(g.wo).max(first.min(g.wo)))
}

/// Columns for output rows `oys`; `col` is `col_rows x (oys.len() * wo)`.
fn im2col<T: Real>(x: &[T], g: &ConvGeom, oys: Range<usize>, col: &mut [T]) {
    let cols = oys.len() * g.wo;
    for c in 0..g.ci {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..KERNEL {
            for kx in 0..KERNEL {
                let row = (c * KERNEL + ky) * KERNEL + kx;
                let dst = &mut col[row * cols..(row + 1) * cols];
                let (lo, hi) = valid_cols(g, kx);
                for (r, oy) in oys.clone().enumerate() {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    let out_row = &mut dst[r * g.wo..(r + 1) * g.wo];
                    if iy < 0 || iy >= g.h as isize {
                        out_row.fill(T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    out_row[..lo].fill(T::zero());
                    out_row[hi..].fill(T::zero());
                    let start = lo * g.stride + kx - g.pad;
                    if g.stride == 1 {
                        out_row[lo..hi].copy_from_slice(&src[start..start + hi - lo]);
                    } else {
                        for (o, &v) in out_row[lo..hi].iter_mut().zip(src[start..].iter().step_by(g.stride)) {
                            *o = v;
                        }
                    }
                }
            }
        }
    }
}

/// Adds the columns of output rows `oys` back into the input gradient `x`.
fn col2im<T: Real>(col: &[T], g: &ConvGeom, oys: Range<usize>, x: &mut [T]) {
    let cols = oys.len() * g.wo;
    for c in 0..g.ci {
        let plane = &mut x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..KERNEL {
            for kx in 0..KERNEL {
                let row = (c * KERNEL + ky) * KERNEL + kx;
                let src = &col[row * cols..(row + 1) * cols];
                let (lo, hi) = valid_cols(g, kx);
                if lo >= hi {
                    continue;
                }
                let start = lo * g.stride + kx - g.pad;
                for (r, oy) in oys.clone().enumerate() {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    let s = &src[r * g.wo + lo..r * g.wo + hi];
                    for (d, &v) in dst[start..].iter_mut().step_by(g.stride).zip(s) {
                        *d = *d + v;
                    }
                }
            }
        }
    }
}

fn check_conv_args<T: Real>(input: &Tensor<T>, weight: &Tensor<T>, bias: &[T], stride: usize, pad: usize) -> Result<ConvGeom> {
    let xd = input.dims();
    let wd = weight.dims();
    if wd.h != KERNEL || wd.w != KERNEL || wd.c != xd.c {
        return Err(Error::shape(
            "conv2d weight",
            format!("({}, {}, 3, 3) for input {xd}", wd.n, xd.c),
            wd,
        ));
    }
    if bias.len() != wd.n {
        return Err(Error::shape(
            "conv2d bias",
            format!("{} values", wd.n),
            format!("{} values", bias.len()),
        ));
    }
    if !(1..=2).contains(&stride) {
        return Err(Error::Usage(format!("conv2d stride must be 1 or 2, got {stride}")));
    }
    let (Some(ho), Some(wo)) = (conv_output_size(xd.h, stride, pad), conv_output_size(xd.w, stride, pad)) else {
        return Err(Error::shape(
            "conv2d input",
            format!("spatial size >= {} with pad {pad}", KERNEL - 2 * pad.min(1)),
            xd,
        ));
    };
    Ok(ConvGeom {
        ci: xd.c,
        h: xd.h,
        w: xd.w,
        ho,
        wo,
        stride,
        pad,
    })
}

/// 3x3 cross-correlation. `weight` has dims `(co, ci, 3, 3)`.
pub fn conv2d_forward<T: Real>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: &[T],
    stride: usize,
    pad: usize,
) -> Result<(Tensor<T>, ConvCache<T>)> {
    let g = check_conv_args(input, weight, bias, stride, pad)?;
    let xd = input.dims();
    let co = weight.dims().n;
    let od = Dims::new(xd.n, co, g.ho, g.wo);
    let mut out = Tensor::zeros(od);
    let (rows, cols) = (g.col_rows(), g.col_cols());
    out.data_mut().par_chunks_mut(od.item().max(1)).enumerate().for_each(|(n, dst)| {
        for (c, plane) in dst.chunks_mut(cols).enumerate() {
            plane.fill(bias[c]);
        }
        let mut col = Vec::new();
        for oys in g.row_blocks() {
            let bc = oys.len() * g.wo;
            col.resize(rows * bc, T::zero());
            im2col(input.item(n), &g, oys.clone(), &mut col);
            let out = &mut dst[oys.start * g.wo..];
            T::gemm(
                co,
                rows,
                bc,
                MatRef::rows(weight.data(), rows),
                MatRef::rows(&col, bc),
                T::one(),
                out,
                cols,
            );
        }
    });
    Ok((
        out,
        ConvCache {
            input: input.clone(),
            stride,
            pad,
        },
    ))
}

/// Exact gradients of [`conv2d_forward`] given the upstream gradient.
pub fn conv2d_backward<T: Real>(cache: &ConvCache<T>, weight: &Tensor<T>, grad_out: &Tensor<T>) -> Result<ConvGrads<T>> {
    let co = weight.dims().n;
    let zero_bias = vec![T::zero(); co];
    let g = check_conv_args(&cache.input, weight, &zero_bias, cache.stride, cache.pad)?;
    let xd = cache.input.dims();
    grad_out.expect_dims("conv2d_backward grad_out", Dims::new(xd.n, co, g.ho, g.wo))?;
    let (rows, cols) = (g.col_rows(), g.col_cols());

    let mut grad_input = Tensor::zeros(xd);
    let partial_w: Vec<Vec<T>> = grad_input
        .data_mut()
        .par_chunks_mut(xd.item().max(1))
        .enumerate()
        .map(|(n, gx)| {
            let go = grad_out.item(n);
            let mut gw = vec![T::zero(); co * rows];
            let mut col = Vec::new();
            for oys in g.row_blocks() {
                let bc = oys.len() * g.wo;
                col.resize(rows * bc, T::zero());
                im2col(cache.input.item(n), &g, oys.clone(), &mut col);
                let dy = MatRef {
                    data: &go[oys.start * g.wo..],
                    row_stride: cols,
                    col_stride: 1,
                };
                // dW += dY (co x bc) * col^T (bc x rows)
                T::gemm(co, bc, rows, dy, MatRef::transposed(&col, bc), T::one(), &mut gw, rows);
                // dcol = W^T (rows x co) * dY (co x bc)
                T::gemm(rows, co, bc, MatRef::transposed(weight.data(), rows), dy, T::zero(), &mut col, bc);
                col2im(&col, &g, oys, gx);
            }
            gw
        })
        .collect();

    let mut grad_weight = Tensor::zeros(weight.dims());
    for gw in &partial_w {
        for (acc, v) in grad_weight.data_mut().iter_mut().zip(gw) {
            *acc = *acc + *v;
        }
    }
    Ok(ConvGrads {
        input: grad_input,
        weight: grad_weight,
        bias: channel_sums(grad_out),
    })
}

/// Sum of each channel over batch and space.
pub fn channel_sums<T: Real>(t: &Tensor<T>) -> Vec<T> {
    let d = t.dims();
    let mut sums = vec![T::zero(); d.c];
    for n in 0..d.n {
        for (c, s) in sums.iter_mut().enumerate() {
            let o = t.offset(n, c, 0, 0);
            *s = t.data()[o..o + d.plane()].iter().fold(*s, |a, &v| a + v);
        }
    }
    sums
}

fn check_up_args<T: Real>(input: &Tensor<T>, weight: &Tensor<T>, bias: &[T]) -> Result<usize> {
    let xd = input.dims();
    let wd = weight.dims();
    if wd.n != xd.c || wd.h != UP_KERNEL || wd.w != UP_KERNEL {
        return Err(Error::shape(
            "transposed_conv2d weight",
            format!("({}, co, 2, 2) for input {xd}", xd.c),
            wd,
        ));
    }
    if bias.len() != wd.c {
        return Err(Error::shape(
            "transposed_conv2d bias",
            format!("{} values", wd.c),
            format!("{} values", bias.len()),
        ));
    }
    Ok(wd.c)
}

/// 2x2 transposed convolution with stride 2; doubles both spatial dims.
/// `weight` has dims `(ci, co, 2, 2)`.
pub fn transposed_conv2d_forward<T: Real>(input: &Tensor<T>, weight: &Tensor<T>, bias: &[T]) -> Result<(Tensor<T>, UpConvCache<T>)> {
    let co = check_up_args(input, weight, bias)?;
    let xd = input.dims();
    let (h, w) = (xd.h, xd.w);
    let od = Dims::new(xd.n, co, 2 * h, 2 * w);
    let taps = co * UP_KERNEL * UP_KERNEL;
    let hw = h * w;
    let mut out = Tensor::zeros(od);
    out.data_mut().par_chunks_mut(od.item().max(1)).enumerate().for_each(|(n, dst)| {
        let mut tmp = vec![T::zero(); taps * hw];
        // (co*4 x ci) * (ci x HW)
        T::gemm(
            taps,
            xd.c,
            hw,
            MatRef::transposed(weight.data(), taps),
            MatRef::rows(input.item(n), hw),
            T::zero(),
            &mut tmp,
            hw,
        );
        for c in 0..co {
            for a in 0..UP_KERNEL {
                for b in 0..UP_KERNEL {
                    let src = &tmp[((c * UP_KERNEL + a) * UP_KERNEL + b) * hw..][..hw];
                    for i in 0..h {
                        let row = &mut dst[(c * 2 * h + 2 * i + a) * 2 * w..][..2 * w];
                        for j in 0..w {
                            row[2 * j + b] = src[i * w + j] + bias[c];
                        }
                    }
                }
            }
        }
    });
    Ok((out, UpConvCache { input: input.clone() }))
}

pub fn transposed_conv2d_backward<T: Real>(cache: &UpConvCache<T>, weight: &Tensor<T>, grad_out: &Tensor<T>) -> Result<ConvGrads<T>> {
    let co = weight.dims().c;
    check_up_args(&cache.input, weight, &vec![T::zero(); co])?;
    let xd = cache.input.dims();
    let (h, w) = (xd.h, xd.w);
    grad_out.expect_dims("transposed_conv2d_backward grad_out", Dims::new(xd.n, co, 2 * h, 2 * w))?;
    let taps = co * UP_KERNEL * UP_KERNEL;
    let hw = h * w;

    let mut grad_input = Tensor::zeros(xd);
    let partial_w: Vec<Vec<T>> = grad_input
        .data_mut()
        .par_chunks_mut(xd.item().max(1))
        .enumerate()
        .map(|(n, gx)| {
            let go = grad_out.item(n);
            let mut gathered = vec![T::zero(); taps * hw];
            for c in 0..co {
                for a in 0..UP_KERNEL {
                    for b in 0..UP_KERNEL {
                        let dst = &mut gathered[((c * UP_KERNEL + a) * UP_KERNEL + b) * hw..][..hw];
                        for i in 0..h {
                            let row = &go[(c * 2 * h + 2 * i + a) * 2 * w..][..2 * w];
                            for j in 0..w {
                                dst[i * w + j] = row[2 * j + b];
                            }
                        }
                    }
                }
            }
            // dX = W (ci x co*4) * G (co*4 x HW)
            T::gemm(
                xd.c,
                taps,
                hw,
                MatRef::rows(weight.data(), taps),
                MatRef::rows(&gathered, hw),
                T::zero(),
                gx,
                hw,
            );
            // dW = X (ci x HW) * G^T (HW x co*4)
            let mut gw = vec![T::zero(); xd.c * taps];
            T::gemm(
                xd.c,
                hw,
                taps,
                MatRef::rows(cache.input.item(n), hw),
                MatRef::transposed(&gathered, hw),
                T::zero(),
                &mut gw,
                taps,
            );
            gw
        })
        .collect();

    let mut grad_weight = Tensor::zeros(weight.dims());
    for gw in &partial_w {
        for (acc, v) in grad_weight.data_mut().iter_mut().zip(gw) {
            *acc = *acc + *v;
        }
    }
    Ok(ConvGrads {
        input: grad_input,
        weight: grad_weight,
        bias: channel_sums(grad_out),
    })
}
