//! 3-D volumes, preprocessing, slab extraction, file formats and synthetic phantoms.

mod io;
pub mod nifti;
pub mod phantom;
mod resample;

use crate::error::{Error, Result};
use crate::tensor::{Dims, Tensor};

pub use io::{load_mvol, load_volume, save_mask, save_mvol, AnyVolume, MvolDtype};
pub use nifti::load_nifti;
pub use phantom::{generate_phantom, PhantomConfig};
pub use resample::{resample_nearest, resample_nearest_to_grid, resample_trilinear, resampled_dims};

pub const LABEL_BACKGROUND: u8 = 0;
pub const LABEL_LIVER: u8 = 1;
pub const LABEL_LESION: u8 = 2;

/// Intensity window applied before anything else.
pub const HU_MIN: f32 = -200.0;
pub const HU_MAX: f32 = 200.0;

/// Regular 3-D grid with physical voxel spacing in mm; x varies fastest.
#[derive(Clone, Debug, PartialEq)]
pub struct Grid3<T> {
    dims: [usize; 3],
    spacing: [f64; 3],
    data: Vec<T>,
}

/// CT intensities in HU.
pub type Volume = Grid3<f32>;
/// Label map (0 background, 1 liver, 2 lesion) or a binary mask (0/1).
pub type LabelVolume = Grid3<u8>;

pub(crate) fn check_spacing(spacing: [f64; 3]) -> Result<()> {
    if spacing.iter().any(|&s| !(s > 0.0) || !s.is_finite()) {
        return Err(Error::Config(format!("voxel spacing must be positive, got {spacing:?}")));
    }
    Ok(())
}

impl<T: Copy> Grid3<T> {
    pub fn new(dims: [usize; 3], spacing: [f64; 3], data: Vec<T>) -> Result<Self> {
        check_spacing(spacing)?;
        let len = dims.iter().product::<usize>();
        if data.len() != len {
            return Err(Error::shape(
                "Grid3::new",
                format!("{len} voxels for dims {dims:?}"),
                format!("{} voxels", data.len()),
            ));
        }
        Ok(Grid3 { dims, spacing, data })
    }

    pub fn filled(dims: [usize; 3], spacing: [f64; 3], value: T) -> Result<Self> {
        Self::new(dims, spacing, vec![value; dims.iter().product()])
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn spacing(&self) -> [f64; 3] {
        self.spacing
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        x + self.dims[0] * (y + self.dims[1] * z)
    }

    #[inline]
    pub fn coords(&self, i: usize) -> [usize; 3] {
        let [nx, ny, _] = self.dims;
        [i % nx, (i / nx) % ny, i / (nx * ny)]
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, z: usize) -> T {
        self.data[self.index(x, y, z)]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, z: usize, v: T) {
        let i = self.index(x, y, z);
        self.data[i] = v;
    }

    /// One axial slice, row-major in (y, x).
    pub fn slice(&self, z: usize) -> &[T] {
        let plane = self.dims[0] * self.dims[1];
        &self.data[z * plane..(z + 1) * plane]
    }

    pub fn map<U: Copy>(&self, f: impl Fn(T) -> U) -> Grid3<U> {
        Grid3 {
            dims: self.dims,
            spacing: self.spacing,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn same_grid<U>(&self, other: &Grid3<U>) -> bool {
        self.dims == other.dims
    }
}

impl LabelVolume {
    /// Fails unless every voxel is 0, 1 or 2.
    pub fn check_labels(&self) -> Result<()> {
        if let Some(i) = self.data.iter().position(|&v| v > LABEL_LESION) {
            return Err(Error::Data(format!(
                "label volume holds value {} at voxel {:?}; expected 0, 1 or 2",
                self.data[i],
                self.coords(i)
            )));
        }
        Ok(())
    }

    /// Binary mask of voxels equal to `label`.
    pub fn mask_of(&self, label: u8) -> LabelVolume {
        self.map(|v| u8::from(v == label))
    }

    /// Binary mask of voxels with value >= `label`.
    pub fn mask_at_least(&self, label: u8) -> LabelVolume {
        self.map(|v| u8::from(v >= label))
    }

    pub fn count_nonzero(&self) -> usize {
        self.data.iter().filter(|&&v| v != 0).count()
    }
}

impl Volume {
    /// Rounds intensities to labels, checking they are valid class ids.
    pub fn to_labels(&self) -> Result<LabelVolume> {
        let labels = self.map(|v| v.round().clamp(0.0, 255.0) as u8);
        if let Some(i) = self.data.iter().position(|&v| v.round() != v || !(0.0..=2.0).contains(&v)) {
            return Err(Error::Data(format!(
                "value {} at voxel {:?} is not a label (0, 1 or 2)",
                self.data[i],
                self.coords(i)
            )));
        }
        Ok(labels)
    }
}

/// Clamps intensities to [-200, 200] HU.
pub fn clip_hu(vol: &Volume) -> Volume {
    vol.map(|v| v.clamp(HU_MIN, HU_MAX))
}

/// Lesion labels become liver; the result is background/liver only.
pub fn merge_labels(labels: &LabelVolume) -> LabelVolume {
    labels.map(|v| v.min(LABEL_LIVER))
}

/// Inclusive z-range of slices containing any liver or lesion voxel.
pub fn liver_region_slices(labels: &LabelVolume) -> Result<(usize, usize)> {
    let nz = labels.dims[2];
    let has_liver = |z: usize| labels.slice(z).iter().any(|&v| v >= LABEL_LIVER);
    let lo = (0..nz)
        .find(|&z| has_liver(z))
        .ok_or_else(|| Error::Data("label volume contains no liver voxels".into()))?;
    let hi = (0..nz).rev().find(|&z| has_liver(z)).unwrap_or(lo);
    Ok((lo, hi))
}

/// Stack of adjacent axial slices centered on `center_z`.
#[derive(Clone, Debug)]
pub struct SlabStack {
    /// `(1, k, ny, nx)`; channel j holds slice `clamp(center_z + j - (k-1)/2)`.
    pub slices: Tensor<f32>,
    pub center_z: usize,
}

/// Slice indices of a `k`-slab around `z`, edge-replicated at the volume boundary.
pub fn slab_indices(z: usize, k: usize, nz: usize) -> Vec<usize> {
    let half = (k / 2) as isize;
    (0..k as isize)
        .map(|j| (z as isize + j - half).clamp(0, nz as isize - 1) as usize)
        .collect()
}

pub fn extract_slab(vol: &Volume, z: usize, k: usize) -> Result<SlabStack> {
    let [nx, ny, _] = vol.dims;
    let slices = extract_slab_region(vol, z, k, [0, 0], [ny, nx])?;
    Ok(SlabStack { slices, center_z: z })
}

/// Slab restricted to the in-plane window starting at `origin = [y0, x0]` of
/// size `size = [h, w]`. The window may extend past the volume; such pixels
/// replicate the nearest edge pixel.
pub fn extract_slab_region(vol: &Volume, z: usize, k: usize, origin: [isize; 2], size: [usize; 2]) -> Result<Tensor<f32>> {
    let [nx, ny, nz] = vol.dims;
    if z >= nz {
        return Err(Error::Usage(format!("slice index {z} out of range 0..{nz}")));
    }
    if k.is_multiple_of(2) {
        return Err(Error::Usage(format!("slab depth must be odd, got {k}")));
    }
    let [h, w] = size;
    let mut out = Tensor::zeros(Dims::new(1, k, h, w));
    let xs: Vec<usize> = (0..w)
        .map(|j| (origin[1] + j as isize).clamp(0, nx as isize - 1) as usize)
        .collect();
    for (c, sz) in slab_indices(z, k, nz).into_iter().enumerate() {
        let plane = vol.slice(sz);
        for i in 0..h {
            let y = (origin[0] + i as isize).clamp(0, ny as isize - 1) as usize;
            let row = &plane[y * nx..(y + 1) * nx];
            let base = out.offset(0, c, i, 0);
            for (o, &x) in out.data_mut()[base..base + w].iter_mut().zip(&xs) {
                *o = row[x];
            }
        }
    }
    Ok(out)
}

/// Scales clipped HU into [-1, 1] for the network.
pub fn hu_to_input(slab: &Tensor<f32>) -> Tensor<f32> {
    slab.map(|v| v / HU_MAX)
}
