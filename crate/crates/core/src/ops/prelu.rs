use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

pub const PRELU_INIT_SLOPE: f64 = 0.25;

#[derive(Clone, Debug)]
pub struct PreluCache<T> {
    input: Tensor<T>,
}

fn check_slope<T: Real>(input: &Tensor<T>, slope: &[T]) -> Result<()> {
    if slope.len() != input.dims().c {
        return Err(Error::shape("prelu slope", input.dims().c, slope.len()));
    }
    Ok(())
}

/// `x` for `x >= 0`, `slope[c] * x` otherwise.
pub fn prelu_forward<T: Real>(input: &Tensor<T>, slope: &[T]) -> Result<(Tensor<T>, PreluCache<T>)> {
    check_slope(input, slope)?;
    let d = input.dims();
    let mut out = input.clone();
    for (i, plane) in out.data_mut().chunks_mut(d.plane().max(1)).enumerate() {
        let a = slope[i % d.c];
        for v in plane.iter_mut().filter(|v| **v < T::zero()) {
            *v = *v * a;
        }
    }
    Ok((out, PreluCache { input: input.clone() }))
}

/// Returns `(grad_input, grad_slope)`.
pub fn prelu_backward<T: Real>(cache: &PreluCache<T>, slope: &[T], grad_out: &Tensor<T>) -> Result<(Tensor<T>, Vec<T>)> {
    check_slope(&cache.input, slope)?;
    let d = cache.input.dims();
    grad_out.expect_dims("prelu_backward grad_out", d)?;
    let mut gx = grad_out.clone();
    let mut ga = vec![T::zero(); d.c];
    let plane = d.plane().max(1);
    for (i, (g, x)) in gx.data_mut().chunks_mut(plane).zip(cache.input.data().chunks(plane)).enumerate() {
        let c = i % d.c;
        for (gv, &xv) in g.iter_mut().zip(x) {
            if xv < T::zero() {
                ga[c] = ga[c] + *gv * xv;
                *gv = *gv * slope[c];
            }
        }
    }
    Ok((gx, ga))
}
