//! Residual additions and U-Net channel concatenation.

use crate::error::{Error, Result};
use crate::tensor::{Dims, Real, Tensor};

pub fn add_elementwise<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    b.expect_dims("add_elementwise", a.dims())?;
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| x + y).collect();
    Tensor::from_vec(a.dims(), data)
}

/// Both inputs of an addition receive the upstream gradient unchanged.
pub fn add_backward<T: Real>(grad_out: &Tensor<T>) -> (Tensor<T>, Tensor<T>) {
    (grad_out.clone(), grad_out.clone())
}

/// Stacks `a`'s channels followed by `b`'s.
pub fn concat_channels<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (da, db) = (a.dims(), b.dims());
    if (da.n, da.h, da.w) != (db.n, db.h, db.w) {
        return Err(Error::shape("concat_channels", format!("(n, *, h, w) of {da}"), db));
    }
    let dims = Dims::new(da.n, da.c + db.c, da.h, da.w);
    let mut data = Vec::with_capacity(dims.len());
    for n in 0..da.n {
        data.extend_from_slice(a.item(n));
        data.extend_from_slice(b.item(n));
    }
    Tensor::from_vec(dims, data)
}

/// Inverse of [`concat_channels`]: the first `ca` channels and the rest.
pub fn split_channels<T: Real>(t: &Tensor<T>, ca: usize) -> Result<(Tensor<T>, Tensor<T>)> {
    let d = t.dims();
    if ca > d.c {
        return Err(Error::shape("split_channels", format!("at most {} channels", d.c), ca));
    }
    let (da, db) = (Dims::new(d.n, ca, d.h, d.w), Dims::new(d.n, d.c - ca, d.h, d.w));
    let mut a = Vec::with_capacity(da.len());
    let mut b = Vec::with_capacity(db.len());
    for n in 0..d.n {
        let item = t.item(n);
        a.extend_from_slice(&item[..da.item()]);
        b.extend_from_slice(&item[da.item()..]);
    }
    Ok((Tensor::from_vec(da, a)?, Tensor::from_vec(db, b)?))
}
