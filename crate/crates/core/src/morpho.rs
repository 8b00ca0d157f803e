//! 3-D connected components, largest-component selection and bounding boxes.

use crate::error::{Error, Result};
use crate::volume::LabelVolume;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Connectivity {
    /// Face neighbors.
    Six,
    /// Face, edge and corner neighbors.
    #[default]
    TwentySix,
}

impl TryFrom<usize> for Connectivity {
    type Error = Error;

    fn try_from(n: usize) -> Result<Self> {
        match n {
            6 => Ok(Connectivity::Six),
            26 => Ok(Connectivity::TwentySix),
            _ => Err(Error::Config(format!("connectivity must be 6 or 26, got {n}"))),
        }
    }
}

impl Connectivity {
    /// Neighbor offsets that precede a voxel in x-fastest scan order.
    fn backward_offsets(self) -> Vec<[isize; 3]> {
        let mut out = Vec::new();
        for dz in -1..=1isize {
            for dy in -1..=1isize {
                for dx in -1..=1isize {
                    let manhattan = dx.abs() + dy.abs() + dz.abs();
                    let ok = match self {
                        Connectivity::Six => manhattan == 1,
                        Connectivity::TwentySix => manhattan > 0,
                    };
                    if ok && (dz, dy, dx) < (0, 0, 0) {
                        out.push([dx, dy, dz]);
                    }
                }
            }
        }
        out
    }
}

/// Component labels on a grid: 0 is background, components are `1..=K`
/// numbered in order of their first voxel in scan order.
#[derive(Clone, Debug, PartialEq)]
pub struct ComponentMap {
    pub dims: [usize; 3],
    pub spacing: [f64; 3],
    pub labels: Vec<u32>,
    /// `sizes[k - 1]` is the voxel count of component `k`.
    pub sizes: Vec<usize>,
}

impl ComponentMap {
    pub fn count(&self) -> usize {
        self.sizes.len()
    }

    /// Binary mask of component `id`.
    pub fn mask(&self, id: u32) -> LabelVolume {
        let data = self.labels.iter().map(|&l| u8::from(l == id)).collect();
        LabelVolume::new(self.dims, self.spacing, data).expect("component map grid is consistent")
    }
}

fn find(parent: &mut [u32], mut i: u32) -> u32 {
    while parent[i as usize] != i {
        let p = parent[i as usize];
        parent[i as usize] = parent[p as usize];
        i = p;
    }
    i
}

/// Labels the nonzero voxels of `mask` by union-find over scan order.
pub fn connected_components_3d(mask: &LabelVolume, connectivity: Connectivity) -> ComponentMap {
    let [nx, ny, nz] = mask.dims();
    let data = mask.data();
    let n = data.len();
    let offsets = connectivity.backward_offsets();
    let mut parent: Vec<u32> = (0..n as u32).collect();
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                let i = mask.index(x, y, z);
                if data[i] == 0 {
                    continue;
                }
                for &[dx, dy, dz] in &offsets {
                    let (xx, yy, zz) = (x as isize + dx, y as isize + dy, z as isize + dz);
                    if xx < 0 || yy < 0 || zz < 0 || xx >= nx as isize || yy >= ny as isize {
                        continue;
                    }
                    let j = mask.index(xx as usize, yy as usize, zz as usize);
                    if data[j] == 0 {
                        continue;
                    }
                    let (a, b) = (find(&mut parent, i as u32), find(&mut parent, j as u32));
                    if a != b {
                        let (lo, hi) = if a < b { (a, b) } else { (b, a) };
                        parent[hi as usize] = lo;
                    }
                }
            }
        }
    }
    let mut root_label = vec![0u32; n];
    let mut labels = vec![0u32; n];
    let mut sizes = Vec::new();
    for i in 0..n {
        if data[i] == 0 {
            continue;
        }
        let r = find(&mut parent, i as u32) as usize;
        if root_label[r] == 0 {
            sizes.push(0);
            root_label[r] = sizes.len() as u32;
        }
        labels[i] = root_label[r];
        sizes[root_label[r] as usize - 1] += 1;
    }
    ComponentMap {
        dims: mask.dims(),
        spacing: mask.spacing(),
        labels,
        sizes,
    }
}

/// Mask of the largest component; ties go to the smallest label.
pub fn largest_component(cm: &ComponentMap) -> Result<LabelVolume> {
    let mut best: Option<(usize, usize)> = None;
    for (k, &s) in cm.sizes.iter().enumerate() {
        if best.is_none_or(|(_, bs)| s > bs) {
            best = Some((k, s));
        }
    }
    let (k, _) = best.ok_or_else(|| Error::Data("no foreground: cannot select the largest component".into()))?;
    Ok(cm.mask(k as u32 + 1))
}

/// Inclusive voxel box `[lo, hi]` per axis.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BoundingBox {
    pub lo: [usize; 3],
    pub hi: [usize; 3],
}

impl BoundingBox {
    pub fn extent(&self) -> [usize; 3] {
        std::array::from_fn(|a| self.hi[a] - self.lo[a] + 1)
    }

    pub fn contains(&self, p: [usize; 3]) -> bool {
        (0..3).all(|a| self.lo[a] <= p[a] && p[a] <= self.hi[a])
    }
}

/// Tight box around the nonzero voxels, grown by `ceil(margin_mm / spacing)`
/// voxels per side and clamped to the grid.
pub fn bounding_box(mask: &LabelVolume, margin_mm: f64) -> Result<BoundingBox> {
    let dims = mask.dims();
    let mut lo = dims;
    let mut hi = [0usize; 3];
    let mut any = false;
    for (i, &v) in mask.data().iter().enumerate() {
        if v != 0 {
            any = true;
            let p = mask.coords(i);
            for a in 0..3 {
                lo[a] = lo[a].min(p[a]);
                hi[a] = hi[a].max(p[a]);
            }
        }
    }
    if !any {
        return Err(Error::Data("bounding box of an empty mask".into()));
    }
    let sp = mask.spacing();
    for a in 0..3 {
        let grow = (margin_mm.max(0.0) / sp[a]).ceil() as usize;
        lo[a] = lo[a].saturating_sub(grow);
        hi[a] = (hi[a] + grow).min(dims[a] - 1);
    }
    Ok(BoundingBox { lo, hi })
}
