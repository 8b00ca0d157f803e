//! Resampling to a new voxel spacing. Grids share the corner of voxel 0, so
//! voxel centers map as `src = (dst + 0.5) * dst_spacing / src_spacing - 0.5`.

use rayon::prelude::*;

use super::{check_spacing, Grid3, LabelVolume, Volume};
use crate::error::Result;

/// `round_half_up(n * old / new)`, at least 1.
pub fn resampled_dims(dims: [usize; 3], spacing: [f64; 3], target: [f64; 3]) -> [usize; 3] {
    std::array::from_fn(|a| ((dims[a] as f64 * spacing[a] / target[a] + 0.5).floor() as usize).max(1))
}

fn source_coord(i: usize, dst_sp: f64, src_sp: f64, n: usize) -> f64 {
    ((i as f64 + 0.5) * dst_sp / src_sp - 0.5).clamp(0.0, (n - 1) as f64)
}

/// (lower index, upper index, weight of upper) per destination index.
fn linear_taps(dst_n: usize, dst_sp: f64, src_n: usize, src_sp: f64) -> Vec<(usize, usize, f64)> {
    (0..dst_n)
        .map(|i| {
            let u = source_coord(i, dst_sp, src_sp, src_n);
            let lo = u.floor() as usize;
            let hi = (lo + 1).min(src_n - 1);
            (lo, hi, u - lo as f64)
        })
        .collect()
}

/// Trilinear resampling of an intensity volume, clamping at the borders.
pub fn resample_trilinear(vol: &Volume, target: [f64; 3]) -> Result<Volume> {
    check_spacing(target)?;
    let src = vol.dims();
    let sp = vol.spacing();
    let dst = resampled_dims(src, sp, target);
    let [tx, ty, tz] = [0, 1, 2].map(|a| linear_taps(dst[a], target[a], src[a], sp[a]));
    let plane = dst[0] * dst[1];
    let mut data = vec![0.0f32; plane * dst[2]];
    data.par_chunks_mut(plane).enumerate().for_each(|(z, out)| {
        let (z0, z1, fz) = tz[z];
        for (y, &(y0, y1, fy)) in ty.iter().enumerate() {
            for (x, &(x0, x1, fx)) in tx.iter().enumerate() {
                let v = |xx, yy, zz| vol.get(xx, yy, zz) as f64;
                let c00 = v(x0, y0, z0) * (1.0 - fx) + v(x1, y0, z0) * fx;
                let c10 = v(x0, y1, z0) * (1.0 - fx) + v(x1, y1, z0) * fx;
                let c01 = v(x0, y0, z1) * (1.0 - fx) + v(x1, y0, z1) * fx;
                let c11 = v(x0, y1, z1) * (1.0 - fx) + v(x1, y1, z1) * fx;
                let c0 = c00 * (1.0 - fy) + c10 * fy;
                let c1 = c01 * (1.0 - fy) + c11 * fy;
                out[y * dst[0] + x] = (c0 * (1.0 - fz) + c1 * fz) as f32;
            }
        }
    });
    Grid3::new(dst, target, data)
}

/// Nearest-neighbor resampling of a label volume to a new spacing.
pub fn resample_nearest(labels: &LabelVolume, target: [f64; 3]) -> Result<LabelVolume> {
    check_spacing(target)?;
    let dims = resampled_dims(labels.dims(), labels.spacing(), target);
    resample_nearest_to_grid(labels, dims, target)
}

/// Nearest-neighbor resampling onto an explicit grid (e.g. back to the
/// original grid of a scan after coarse processing).
pub fn resample_nearest_to_grid(labels: &LabelVolume, dims: [usize; 3], spacing: [f64; 3]) -> Result<LabelVolume> {
    check_spacing(spacing)?;
    let src = labels.dims();
    let sp = labels.spacing();
    let [ix, iy, iz] = [0, 1, 2].map(|a| -> Vec<usize> {
        (0..dims[a])
            .map(|i| source_coord(i, spacing[a], sp[a], src[a]).round() as usize)
            .collect()
    });
    let mut data = Vec::with_capacity(dims.iter().product());
    for &z in &iz {
        for &y in &iy {
            data.extend(ix.iter().map(|&x| labels.get(x, y, z)));
        }
    }
    Grid3::new(dims, spacing, data)
}
