use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

pub const BN_EPSILON: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Exponential moving averages of per-channel mean and (unbiased) variance.
#[derive(Clone, Debug, PartialEq)]
pub struct RunningStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

#[derive(Clone, Debug)]
pub struct BnCache<T> {
    xhat: Tensor<T>,
    inv_std: Vec<T>,
}

#[derive(Clone, Debug)]
pub struct BnGrads<T> {
    pub input: Tensor<T>,
    pub gamma: Vec<T>,
    pub beta: Vec<T>,
}

fn check_affine<T: Real>(input: &Tensor<T>, gamma: &[T], beta: &[T]) -> Result<()> {
    let c = input.dims().c;
    if gamma.len() != c || beta.len() != c {
        return Err(Error::shape(
            "batchnorm",
            format!("gamma/beta of length {c}"),
            format!("{}/{}", gamma.len(), beta.len()),
        ));
    }
    Ok(())
}

/// Per-channel normalization over `(n, h, w)`.
///
/// Train mode normalizes with batch statistics, returns a cache for the
/// backward pass and folds the statistics into `running` (initializing it on
/// first use). Eval mode uses `running` only and fails if it was never set.
pub fn batchnorm_forward<T: Real>(
    input: &Tensor<T>,
    gamma: &[T],
    beta: &[T],
    running: &mut Option<RunningStats<T>>,
    mode: Mode,
    momentum: T,
    epsilon: T,
) -> Result<(Tensor<T>, Option<BnCache<T>>)> {
    match mode {
        Mode::Eval => {
            let stats = running
                .as_ref()
                .ok_or_else(|| Error::Usage("batchnorm eval before any running statistics exist".into()))?;
            Ok((batchnorm_eval(input, gamma, beta, stats, epsilon)?, None))
        }
        Mode::Train => {
            let (out, cache, mean, var) = batchnorm_train(input, gamma, beta, epsilon)?;
            let m = input.dims().n * input.dims().plane();
            let unbias = if m > 1 {
                T::from_usize(m).unwrap() / T::from_usize(m - 1).unwrap()
            } else {
                T::one()
            };
            match running {
                Some(rs) => {
                    let keep = T::one() - momentum;
                    for c in 0..mean.len() {
                        rs.mean[c] = keep * rs.mean[c] + momentum * mean[c];
                        rs.var[c] = keep * rs.var[c] + momentum * var[c] * unbias;
                    }
                }
                None => {
                    *running = Some(RunningStats {
                        var: var.iter().map(|&v| v * unbias).collect(),
                        mean,
                    });
                }
            }
            Ok((out, Some(cache)))
        }
    }
}

fn batchnorm_train<T: Real>(input: &Tensor<T>, gamma: &[T], beta: &[T], epsilon: T) -> Result<(Tensor<T>, BnCache<T>, Vec<T>, Vec<T>)> {
    check_affine(input, gamma, beta)?;
    let d = input.dims();
    let m = d.n * d.plane();
    if m == 0 {
        return Err(Error::shape("batchnorm", "non-empty batch", d));
    }
    let inv_m = T::one() / T::from_usize(m).unwrap();
    let mut mean = vec![T::zero(); d.c];
    let mut var = vec![T::zero(); d.c];
    for c in 0..d.c {
        let mut s = T::zero();
        for n in 0..d.n {
            let o = input.offset(n, c, 0, 0);
            s = input.data()[o..o + d.plane()].iter().fold(s, |a, &v| a + v);
        }
        mean[c] = s * inv_m;
        let mut sq = T::zero();
        for n in 0..d.n {
            let o = input.offset(n, c, 0, 0);
            sq = input.data()[o..o + d.plane()].iter().fold(sq, |a, &v| {
                let dv = v - mean[c];
                a + dv * dv
            });
        }
        var[c] = sq * inv_m;
    }
    let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + epsilon).sqrt()).collect();
    let mut xhat = Tensor::zeros(d);
    let mut out = Tensor::zeros(d);
    for n in 0..d.n {
        for c in 0..d.c {
            let o = input.offset(n, c, 0, 0);
            for i in o..o + d.plane() {
                let xh = (input.data()[i] - mean[c]) * inv_std[c];
                xhat.data_mut()[i] = xh;
                out.data_mut()[i] = gamma[c] * xh + beta[c];
            }
        }
    }
    Ok((out, BnCache { xhat, inv_std }, mean, var))
}

/// Eval-mode batch norm: a fixed per-channel affine map.
pub fn batchnorm_eval<T: Real>(input: &Tensor<T>, gamma: &[T], beta: &[T], stats: &RunningStats<T>, epsilon: T) -> Result<Tensor<T>> {
    check_affine(input, gamma, beta)?;
    let d = input.dims();
    if stats.mean.len() != d.c || stats.var.len() != d.c {
        return Err(Error::shape("batchnorm running stats", d.c, stats.mean.len()));
    }
    let mut out = Tensor::zeros(d);
    for c in 0..d.c {
        let scale = gamma[c] / (stats.var[c] + epsilon).sqrt();
        let shift = beta[c] - stats.mean[c] * scale;
        for n in 0..d.n {
            let o = input.offset(n, c, 0, 0);
            for i in o..o + d.plane() {
                out.data_mut()[i] = input.data()[i] * scale + shift;
            }
        }
    }
    Ok(out)
}

/// Exact gradient of the train-mode forward pass.
pub fn batchnorm_backward<T: Real>(cache: &BnCache<T>, gamma: &[T], grad_out: &Tensor<T>) -> Result<BnGrads<T>> {
    let d = cache.xhat.dims();
    grad_out.expect_dims("batchnorm_backward grad_out", d)?;
    if gamma.len() != d.c {
        return Err(Error::shape("batchnorm_backward gamma", d.c, gamma.len()));
    }
    let m = T::from_usize(d.n * d.plane()).unwrap();
    let mut g_gamma = vec![T::zero(); d.c];
    let mut g_beta = vec![T::zero(); d.c];
    for c in 0..d.c {
        for n in 0..d.n {
            let o = grad_out.offset(n, c, 0, 0);
            for i in o..o + d.plane() {
                let dy = grad_out.data()[i];
                g_beta[c] = g_beta[c] + dy;
                g_gamma[c] = g_gamma[c] + dy * cache.xhat.data()[i];
            }
        }
    }
    let mut gx = Tensor::zeros(d);
    for c in 0..d.c {
        // dxhat = dy * gamma, so the two reductions are gamma-scaled g_beta / g_gamma.
        let sum_dxhat = gamma[c] * g_beta[c];
        let sum_dxhat_xhat = gamma[c] * g_gamma[c];
        let k = cache.inv_std[c] / m;
        for n in 0..d.n {
            let o = grad_out.offset(n, c, 0, 0);
            for i in o..o + d.plane() {
                let dxhat = grad_out.data()[i] * gamma[c];
                gx.data_mut()[i] = k * (m * dxhat - sum_dxhat - cache.xhat.data()[i] * sum_dxhat_xhat);
            }
        }
    }
    Ok(BnGrads {
        input: gx,
        gamma: g_gamma,
        beta: g_beta,
    })
}
