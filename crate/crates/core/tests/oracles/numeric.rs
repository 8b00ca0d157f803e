// Independent reference implementations for the tensor kernels.
// Included via `include!` by unit tests and integration tests; the includer
// brings `Tensor`, `Dims`, `Real` and `rand::Rng` into scope.

/// Uniform values in [-1, 1).
pub fn random_tensor<T: Real, R: rand::Rng>(rng: &mut R, dims: Dims) -> Tensor<T> {
    let data = (0..dims.len())
        .map(|_| T::from_f64_lossy(rng.random_range(-1.0..1.0)))
        .collect();
    Tensor::from_vec(dims, data).unwrap()
}

/// Central finite-difference gradient of a scalar function of `x`.
pub fn grad_check(x: &Tensor<f64>, eps: f64, mut f: impl FnMut(&Tensor<f64>) -> f64) -> Tensor<f64> {
    let mut probe = x.clone();
    let mut grad = Tensor::zeros(x.dims());
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + eps;
        let up = f(&probe);
        probe.data_mut()[i] = orig - eps;
        let down = f(&probe);
        probe.data_mut()[i] = orig;
        grad.data_mut()[i] = (up - down) / (2.0 * eps);
    }
    grad
}

/// ||a - b|| / max(||a||, ||b||), zero when both vanish.
pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    let scale = na.max(nb);
    if scale == 0.0 {
        0.0
    } else {
        diff / scale
    }
}

/// Six nested loops, cross-correlation, zero padding.
pub fn direct_conv2d<T: Real>(x: &Tensor<T>, w: &Tensor<T>, b: &[T], stride: usize, pad: usize) -> Tensor<T> {
    let xd = x.dims();
    let wd = w.dims();
    let ho = (xd.h + 2 * pad - wd.h) / stride + 1;
    let wo = (xd.w + 2 * pad - wd.w) / stride + 1;
    let mut out = Tensor::zeros(Dims::new(xd.n, wd.n, ho, wo));
    for n in 0..xd.n {
        for co in 0..wd.n {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut acc = b[co].to_f64().unwrap();
                    for ci in 0..xd.c {
                        for ky in 0..wd.h {
                            for kx in 0..wd.w {
                                let iy = (oy * stride + ky) as isize - pad as isize;
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                if iy >= 0 && ix >= 0 && (iy as usize) < xd.h && (ix as usize) < xd.w {
                                    acc += x.at(n, ci, iy as usize, ix as usize).to_f64().unwrap()
                                        * w.at(co, ci, ky, kx).to_f64().unwrap();
                                }
                            }
                        }
                    }
                    out.set(n, co, oy, ox, T::from_f64_lossy(acc));
                }
            }
        }
    }
    out
}

/// Scatter form of a stride-2, 2x2 transposed convolution; weight is (ci, co, 2, 2).
pub fn direct_transposed_conv2d<T: Real>(x: &Tensor<T>, w: &Tensor<T>, b: &[T]) -> Tensor<T> {
    let xd = x.dims();
    let co = w.dims().c;
    let mut acc = vec![0.0f64; xd.n * co * 4 * xd.h * xd.w];
    let (oh, ow) = (2 * xd.h, 2 * xd.w);
    for n in 0..xd.n {
        for o in 0..co {
            for y in 0..oh {
                for xx in 0..ow {
                    acc[((n * co + o) * oh + y) * ow + xx] = b[o].to_f64().unwrap();
                }
            }
        }
        for ci in 0..xd.c {
            for i in 0..xd.h {
                for j in 0..xd.w {
                    let v = x.at(n, ci, i, j).to_f64().unwrap();
                    for o in 0..co {
                        for a in 0..2 {
                            for bb in 0..2 {
                                acc[((n * co + o) * oh + 2 * i + a) * ow + 2 * j + bb] +=
                                    v * w.at(ci, o, a, bb).to_f64().unwrap();
                            }
                        }
                    }
                }
            }
        }
    }
    Tensor::from_vec(
        Dims::new(xd.n, co, oh, ow),
        acc.into_iter().map(T::from_f64_lossy).collect(),
    )
    .unwrap()
}
