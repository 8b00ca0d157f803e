//! Two-stage inference: coarse liver localization, full-resolution liver and
//! lesion refinement inside the liver bounding box, final connected-component
//! cleanup and low-confidence lesion suppression.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::morpho::{bounding_box, connected_components_3d, largest_component, Connectivity};
use crate::network::Network;
use crate::ops::softmax_channels;
use crate::tensor::{Dims, Tensor};
use crate::volume::{
    check_spacing, clip_hu, extract_slab_region, hu_to_input, resample_nearest_to_grid, resample_trilinear, LabelVolume, Volume,
    LABEL_BACKGROUND, LABEL_LESION, LABEL_LIVER,
};

#[derive(Clone, Debug, PartialEq)]
pub struct CascadeConfig {
    pub coarse_spacing: [f64; 3],
    /// In-plane tile size.
    pub window: usize,
    /// Minimum overlap between neighboring tiles.
    pub window_overlap: usize,
    pub roi_margin_mm: f64,
    pub lesion_prob_threshold: f64,
    pub connectivity: Connectivity,
}

impl Default for CascadeConfig {
    fn default() -> Self {
        CascadeConfig {
            coarse_spacing: [1.0, 1.0, 2.5],
            window: 480,
            window_overlap: 32,
            roi_margin_mm: 10.0,
            lesion_prob_threshold: 0.80,
            connectivity: Connectivity::TwentySix,
        }
    }
}

impl CascadeConfig {
    pub fn validate(&self) -> Result<()> {
        check_spacing(self.coarse_spacing)?;
        let mut problems = Vec::new();
        if self.window == 0 || !self.window.is_multiple_of(16) {
            problems.push(format!("window must be a positive multiple of 16, got {}", self.window));
        }
        if self.window_overlap >= self.window {
            problems.push(format!(
                "window_overlap ({}) must be smaller than window ({})",
                self.window_overlap, self.window
            ));
        }
        if !(self.lesion_prob_threshold > 0.0 && self.lesion_prob_threshold < 1.0) {
            problems.push(format!(
                "lesion_prob_threshold must be in (0, 1), got {}",
                self.lesion_prob_threshold
            ));
        }
        if !(self.roi_margin_mm >= 0.0 && self.roi_margin_mm.is_finite()) {
            problems.push(format!("roi_margin_mm must be >= 0, got {}", self.roi_margin_mm));
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems.join("; ")))
        }
    }
}

/// Per-voxel class probabilities on a volume grid, with the number of
/// inference windows that covered each voxel.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbVolume {
    dims: [usize; 3],
    spacing: [f64; 3],
    classes: usize,
    /// Class-major: `data[c * voxels + voxel]`.
    data: Vec<f32>,
    weights: Vec<f32>,
}

impl ProbVolume {
    /// Every voxel certain background, with zero coverage.
    pub fn background(dims: [usize; 3], spacing: [f64; 3], classes: usize) -> Self {
        let n: usize = dims.iter().product();
        let mut data = vec![0.0; classes * n];
        data[..n].fill(1.0);
        ProbVolume {
            dims,
            spacing,
            classes,
            data,
            weights: vec![0.0; n],
        }
    }

    /// From class-major probabilities `data[c * voxels + voxel]`; every
    /// voxel counts as covered once.
    pub fn from_probs(dims: [usize; 3], spacing: [f64; 3], classes: usize, data: Vec<f32>) -> Result<Self> {
        let n: usize = dims.iter().product();
        if data.len() != classes * n {
            return Err(Error::shape("ProbVolume::from_probs", classes * n, data.len()));
        }
        Ok(ProbVolume {
            dims,
            spacing,
            classes,
            data,
            weights: vec![1.0; n],
        })
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn spacing(&self) -> [f64; 3] {
        self.spacing
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    fn voxels(&self) -> usize {
        self.weights.len()
    }

    pub fn prob(&self, class: usize, x: usize, y: usize, z: usize) -> f32 {
        let i = x + self.dims[0] * (y + self.dims[1] * z);
        self.data[class * self.voxels() + i]
    }

    /// Probabilities of one class as a volume on the same grid.
    pub fn class_volume(&self, class: usize) -> Volume {
        let n = self.voxels();
        Volume::new(self.dims, self.spacing, self.data[class * n..(class + 1) * n].to_vec()).expect("probability grid is consistent")
    }

    pub fn weights(&self) -> &[f32] {
        &self.weights
    }

    /// Writes finalized slice probabilities `(1, C, h, w)` for the in-plane
    /// region at `origin = [y0, x0]` of slice `z`.
    fn put_region(&mut self, z: usize, origin: [usize; 2], probs: &SliceProbs) {
        let n = self.voxels();
        let [nx, ny, _] = self.dims;
        let d = probs.probs.dims();
        for c in 0..self.classes {
            for i in 0..d.h {
                let row = (z * ny + origin[0] + i) * nx + origin[1];
                let src = probs.probs.offset(0, c, i, 0);
                self.data[c * n + row..c * n + row + d.w].copy_from_slice(&probs.probs.data()[src..src + d.w]);
            }
        }
        for i in 0..d.h {
            let row = (z * ny + origin[0] + i) * nx + origin[1];
            self.weights[row..row + d.w].copy_from_slice(&probs.coverage[i * d.w..(i + 1) * d.w]);
        }
    }

    /// Most probable class per voxel; ties go to the lower class.
    pub fn argmax(&self) -> LabelVolume {
        let n = self.voxels();
        let data = (0..n)
            .map(|i| {
                let mut best = 0;
                for c in 1..self.classes {
                    if self.data[c * n + i] > self.data[best * n + i] {
                        best = c;
                    }
                }
                best as u8
            })
            .collect();
        LabelVolume::new(self.dims, self.spacing, data).expect("probability grid is consistent")
    }
}

/// Tile start offsets covering `extent` with tiles of `window`: a single
/// tile if it fits, otherwise evenly spaced tiles at least `overlap` apart
/// from the next one's end, the last flush with the end.
pub fn tile_starts(extent: usize, window: usize, overlap: usize) -> Vec<usize> {
    if extent <= window {
        return vec![0];
    }
    let stride = window - overlap;
    let span = extent - window;
    let n = span.div_ceil(stride) + 1;
    (0..n).map(|i| (i * span + (n - 1) / 2) / (n - 1)).collect()
}

/// Class probabilities for an in-plane region of one slice.
#[derive(Clone, Debug)]
pub struct SliceProbs {
    /// `(1, C, h, w)`, each pixel summing to 1.
    pub probs: Tensor<f32>,
    /// Number of windows that covered each pixel.
    pub coverage: Vec<f32>,
}

/// Tiled inference over the region `origin = [y0, x0]`, `size = [h, w]` of
/// slice `z`. Regions no larger than `window` use one tile, rounded up to the
/// network's size multiple; larger ones use `window`-sized tiles whose
/// softmax outputs are averaged where they overlap. Pixels of a tile that
/// fall outside the volume are edge-replicated.
pub fn sliding_window_region(
    net: &Network<f32>,
    vol: &Volume,
    z: usize,
    origin: [usize; 2],
    size: [usize; 2],
    window: usize,
    overlap: usize,
) -> Result<SliceProbs> {
    let spec = net.spec();
    let m = spec.size_multiple();
    if !window.is_multiple_of(m) {
        return Err(Error::Config(format!(
            "window {window} is not a multiple of the network size multiple {m}"
        )));
    }
    let classes = spec.num_classes;
    let [h, w] = size;
    let tile = |extent: usize| if extent <= window { extent.next_multiple_of(m) } else { window };
    let (th, tw) = (tile(h), tile(w));
    let mut acc = vec![0.0f64; classes * h * w];
    let mut coverage = vec![0.0f32; h * w];
    for &ys in &tile_starts(h, window, overlap) {
        for &xs in &tile_starts(w, window, overlap) {
            let tile_origin = [(origin[0] + ys) as isize, (origin[1] + xs) as isize];
            let slab = extract_slab_region(vol, z, spec.in_slices, tile_origin, [th, tw])?;
            let probs = softmax_channels(&net.forward_eval(&hu_to_input(&slab))?);
            for c in 0..classes {
                for i in 0..th.min(h - ys) {
                    let src = probs.offset(0, c, i, 0);
                    let dst = (c * h + ys + i) * w + xs;
                    let cols = tw.min(w - xs);
                    for (a, &p) in acc[dst..dst + cols].iter_mut().zip(&probs.data()[src..src + cols]) {
                        *a += p as f64;
                    }
                }
            }
            for i in 0..th.min(h - ys) {
                let row = (ys + i) * w + xs;
                for cov in &mut coverage[row..row + tw.min(w - xs)] {
                    *cov += 1.0;
                }
            }
        }
    }
    let mut probs = Tensor::zeros(Dims::new(1, classes, h, w));
    let out = probs.data_mut();
    for p in 0..h * w {
        let total: f64 = (0..classes).map(|c| acc[c * h * w + p]).sum();
        for c in 0..classes {
            out[c * h * w + p] = (acc[c * h * w + p] / total) as f32;
        }
    }
    Ok(SliceProbs { probs, coverage })
}

/// Tiled inference over a whole slice.
pub fn sliding_window_slice_inference(net: &Network<f32>, vol: &Volume, z: usize, window: usize, overlap: usize) -> Result<SliceProbs> {
    let [nx, ny, _] = vol.dims();
    sliding_window_region(net, vol, z, [0, 0], [ny, nx], window, overlap)
}

fn stage(name: &'static str) -> impl Fn(Error) -> Error {
    move |e| match e {
        Error::Pipeline { .. } => e,
        other => Error::pipeline(name, other.to_string()),
    }
}

fn check_classes(net: &Network<f32>, classes: usize, role: &str) -> Result<()> {
    let got = net.spec().num_classes;
    if got != classes {
        return Err(Error::Usage(format!(
            "the {role} model must have {classes} output classes, got {got}"
        )));
    }
    Ok(())
}

/// Coarse liver mask: resample to the coarse grid, per-slice inference,
/// argmax, largest connected component. `vol` must already be HU-clipped.
pub fn segment_liver_coarse(net_a: &Network<f32>, vol: &Volume, cfg: &CascadeConfig) -> Result<LabelVolume> {
    const STAGE: &str = "segment_liver_coarse";
    check_classes(net_a, 2, "liver").map_err(stage(STAGE))?;
    let coarse = resample_trilinear(vol, cfg.coarse_spacing).map_err(stage(STAGE))?;
    let [nx, ny, nz] = coarse.dims();
    let slices: Vec<SliceProbs> = (0..nz)
        .into_par_iter()
        .map(|z| sliding_window_slice_inference(net_a, &coarse, z, cfg.window, cfg.window_overlap))
        .collect::<Result<_>>()
        .map_err(stage(STAGE))?;
    let mut mask = LabelVolume::filled(coarse.dims(), coarse.spacing(), LABEL_BACKGROUND)?;
    let plane = nx * ny;
    for (z, s) in slices.iter().enumerate() {
        let p = s.probs.data();
        for i in 0..plane {
            if p[plane + i] > p[i] {
                mask.data_mut()[z * plane + i] = LABEL_LIVER;
            }
        }
    }
    let cm = connected_components_3d(&mask, cfg.connectivity);
    if cm.count() == 0 {
        return Err(Error::pipeline(STAGE, "liver not found"));
    }
    largest_component(&cm).map_err(stage(STAGE))
}

/// Three-class probabilities on the original grid inside the liver bounding
/// box (plus margin); voxels outside are certain background.
pub fn refine_in_roi(net_b: &Network<f32>, vol: &Volume, initial_liver_coarse: &LabelVolume, cfg: &CascadeConfig) -> Result<ProbVolume> {
    const STAGE: &str = "refine_in_roi";
    check_classes(net_b, 3, "lesion").map_err(stage(STAGE))?;
    let liver = resample_nearest_to_grid(initial_liver_coarse, vol.dims(), vol.spacing()).map_err(stage(STAGE))?;
    if liver.count_nonzero() == 0 {
        return Err(Error::pipeline(STAGE, "initial liver mask is empty on the original grid"));
    }
    let roi = bounding_box(&liver, cfg.roi_margin_mm).map_err(stage(STAGE))?;
    let [w, h, _] = roi.extent();
    let origin = [roi.lo[1], roi.lo[0]];
    let slices: Vec<SliceProbs> = (roi.lo[2]..=roi.hi[2])
        .into_par_iter()
        .map(|z| sliding_window_region(net_b, vol, z, origin, [h, w], cfg.window, cfg.window_overlap))
        .collect::<Result<_>>()
        .map_err(stage(STAGE))?;
    let mut prob = ProbVolume::background(vol.dims(), vol.spacing(), 3);
    for (s, z) in slices.iter().zip(roi.lo[2]..) {
        prob.put_region(z, origin, s);
    }
    Ok(prob)
}

/// Removes every lesion component whose highest lesion probability is below
/// `threshold`.
pub fn suppress_low_confidence_lesions(lesion: &LabelVolume, prob: &ProbVolume, threshold: f64, connectivity: Connectivity) -> LabelVolume {
    let cm = connected_components_3d(lesion, connectivity);
    let lesion_p = &prob.data[LABEL_LESION as usize * prob.voxels()..(LABEL_LESION as usize + 1) * prob.voxels()];
    let mut peak = vec![f32::NEG_INFINITY; cm.count() + 1];
    for (&l, &p) in cm.labels.iter().zip(lesion_p) {
        if l != 0 {
            peak[l as usize] = peak[l as usize].max(p);
        }
    }
    let threshold = threshold as f32;
    let keep: Vec<bool> = peak.iter().map(|&p| p >= threshold).collect();
    let data = cm.labels.iter().map(|&l| u8::from(l != 0 && keep[l as usize])).collect();
    LabelVolume::new(lesion.dims(), lesion.spacing(), data).expect("same grid as the input mask")
}

/// Final liver = largest component of liver-or-lesion voxels; lesions are
/// the lesion voxels inside it, then low-confidence components are removed.
pub fn merge_and_finalize(prob: &ProbVolume, cfg: &CascadeConfig) -> Result<(LabelVolume, LabelVolume)> {
    const STAGE: &str = "merge_and_finalize";
    let labels = prob.argmax();
    let cm = connected_components_3d(&labels, cfg.connectivity);
    if cm.count() == 0 {
        return Err(Error::pipeline(STAGE, "liver not found"));
    }
    let liver = largest_component(&cm).map_err(stage(STAGE))?;
    let lesion = labels.map(|l| u8::from(l == LABEL_LESION));
    let lesion = LabelVolume::new(
        lesion.dims(),
        lesion.spacing(),
        lesion.data().iter().zip(liver.data()).map(|(&a, &b)| a & b).collect(),
    )?;
    let lesion = suppress_low_confidence_lesions(&lesion, prob, cfg.lesion_prob_threshold, cfg.connectivity);
    Ok((liver, lesion))
}

#[derive(Clone, Debug)]
pub struct CascadeOutput {
    /// Final liver, lesions included.
    pub liver: LabelVolume,
    pub lesion: LabelVolume,
    pub probs: ProbVolume,
}

impl CascadeOutput {
    /// 0 background, 1 liver, 2 lesion.
    pub fn label_map(&self) -> LabelVolume {
        let data = self
            .liver
            .data()
            .iter()
            .zip(self.lesion.data())
            .map(|(&l, &s)| match (l, s) {
                (_, 1..) => LABEL_LESION,
                (1.., _) => LABEL_LIVER,
                _ => LABEL_BACKGROUND,
            })
            .collect();
        LabelVolume::new(self.liver.dims(), self.liver.spacing(), data).expect("liver and lesion share a grid")
    }
}

/// The full cascade on a raw intensity volume.
pub fn run_cascade(net_a: &Network<f32>, net_b: &Network<f32>, raw: &Volume, cfg: &CascadeConfig) -> Result<CascadeOutput> {
    cfg.validate()?;
    let vol = clip_hu(raw);
    let coarse = segment_liver_coarse(net_a, &vol, cfg)?;
    let probs = refine_in_roi(net_b, &vol, &coarse, cfg)?;
    let (liver, lesion) = merge_and_finalize(&probs, cfg)?;
    Ok(CascadeOutput { liver, lesion, probs })
}
