//! SGD with momentum, exponential learning-rate decay, random crop and flip
//! augmentation, and the per-stage training-set builders.

use std::fmt;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::network::{Network, Param};
use crate::ops::{softmax_channels, weighted_ce_loss, ClassWeights};
use crate::tensor::{stack_batch, LabelMap, Real, Tensor};
use crate::volume::{
    clip_hu, extract_slab_region, hu_to_input, liver_region_slices, merge_labels, resample_nearest, resample_trilinear, LabelVolume, Volume,
};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub lr0: f64,
    /// Per-epoch learning-rate factor.
    pub lr_gamma: f64,
    pub epochs: usize,
    pub weight_decay: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub crop: usize,
    pub flip_prob: f64,
    pub seed: u64,
    pub class_weights: ClassWeights,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr0: 0.001,
            lr_gamma: 0.9,
            epochs: 50,
            weight_decay: 0.0005,
            momentum: 0.9,
            batch_size: 4,
            crop: 320,
            flip_prob: 0.5,
            seed: 0,
            class_weights: ClassWeights::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if !(self.lr0 > 0.0 && self.lr0.is_finite()) {
            problems.push(format!("lr0 must be > 0, got {}", self.lr0));
        }
        if !(self.lr_gamma > 0.0 && self.lr_gamma.is_finite()) {
            problems.push(format!("lr_gamma must be > 0, got {}", self.lr_gamma));
        }
        if !(0.0..=1.0).contains(&self.flip_prob) {
            problems.push(format!("flip_prob must be in [0, 1], got {}", self.flip_prob));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            problems.push(format!("momentum must be in [0, 1), got {}", self.momentum));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            problems.push(format!("weight_decay must be >= 0, got {}", self.weight_decay));
        }
        if self.batch_size == 0 {
            problems.push("batch_size must be >= 1".into());
        }
        if self.crop == 0 || !self.crop.is_multiple_of(16) {
            problems.push(format!("crop must be a positive multiple of 16, got {}", self.crop));
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems.join("; ")))
        }
    }
}

/// `x * y` as an unevaluated sum `hi + lo`.
fn two_prod(x: f64, y: f64) -> (f64, f64) {
    let p = x * y;
    (p, x.mul_add(y, -p))
}

/// `lr0 * gamma^epoch`, evaluated in double-double arithmetic so the result
/// is within one ulp of the exact product of the stored constants.
pub fn lr_at_epoch(cfg: &TrainConfig, epoch: usize) -> Result<f64> {
    if epoch >= cfg.epochs {
        return Err(Error::Usage(format!("epoch {epoch} out of range 0..{}", cfg.epochs)));
    }
    let (mut hi, mut lo) = (cfg.lr0, 0.0);
    for _ in 0..epoch {
        let (p, e) = two_prod(hi, cfg.lr_gamma);
        let e = e + lo * cfg.lr_gamma;
        hi = p + e;
        lo = e - (hi - p);
    }
    Ok(hi + lo)
}

/// One momentum step over all parameters: `v = m v + lr (g + wd w)`,
/// `w -= v`, then gradients are cleared. Nothing is updated if any gradient
/// is non-finite.
pub fn sgd_step<'a, T: Real + 'a>(
    params: impl IntoIterator<Item = (String, &'a mut Param<T>)>,
    lr: f64,
    momentum: f64,
    weight_decay: f64,
) -> Result<()> {
    let mut params: Vec<_> = params.into_iter().collect();
    if let Some((name, _)) = params.iter().find(|(_, p)| !p.grad.is_finite()) {
        return Err(Error::Training(format!("non-finite gradient in parameter {name}")));
    }
    let (lr, m, wd) = (T::from_f64_lossy(lr), T::from_f64_lossy(momentum), T::from_f64_lossy(weight_decay));
    for (_, p) in params.iter_mut() {
        let Param { value, grad, momentum } = &mut **p;
        for ((w, g), v) in value.data_mut().iter_mut().zip(grad.data_mut()).zip(momentum.data_mut()) {
            *v = m * *v + lr * (*g + wd * *w);
            *w = *w - *v;
            *g = T::zero();
        }
    }
    Ok(())
}

/// A preprocessed training volume and the slice positions eligible for sampling.
#[derive(Clone, Debug)]
pub struct TrainingCase {
    /// HU-clipped intensities.
    pub image: Volume,
    pub labels: LabelVolume,
    pub slices: Vec<usize>,
}

/// Liver stage: clip, resample to the coarse spacing, merge lesion into
/// liver; every slice is eligible.
pub fn liver_stage_case(image: &Volume, labels: &LabelVolume, coarse_spacing: [f64; 3]) -> Result<TrainingCase> {
    check_pair(image, labels)?;
    let image = resample_trilinear(&clip_hu(image), coarse_spacing)?;
    let labels = merge_labels(&resample_nearest(labels, coarse_spacing)?);
    let slices = (0..image.dims()[2]).collect();
    Ok(TrainingCase { image, labels, slices })
}

/// Lesion stage: clip at the original resolution; only slices inside the
/// liver region are eligible.
pub fn lesion_stage_case(image: &Volume, labels: &LabelVolume) -> Result<TrainingCase> {
    check_pair(image, labels)?;
    let (lo, hi) = liver_region_slices(labels)?;
    Ok(TrainingCase {
        image: clip_hu(image),
        labels: labels.clone(),
        slices: (lo..=hi).collect(),
    })
}

fn check_pair(image: &Volume, labels: &LabelVolume) -> Result<()> {
    if !image.same_grid(labels) {
        return Err(Error::Data(format!(
            "image grid {:?}/{:?} does not match label grid {:?}/{:?}",
            image.dims(),
            image.spacing(),
            labels.dims(),
            labels.spacing()
        )));
    }
    Ok(())
}

/// Random `k x crop x crop` network input around a random eligible slice,
/// with its center-slice target.
pub fn sample_training_stack(
    case: &TrainingCase,
    k: usize,
    crop: usize,
    flip_prob: f64,
    rng: &mut impl Rng,
) -> Result<(Tensor<f32>, LabelMap)> {
    if case.slices.is_empty() {
        return Err(Error::Data("training case has no eligible slices".into()));
    }
    let z = case.slices[rng.random_range(0..case.slices.len())];
    sample_training_stack_at(case, z, k, crop, flip_prob, rng)
}

/// As [`sample_training_stack`] with a fixed center slice `z`.
pub fn sample_training_stack_at(
    case: &TrainingCase,
    z: usize,
    k: usize,
    crop: usize,
    flip_prob: f64,
    rng: &mut impl Rng,
) -> Result<(Tensor<f32>, LabelMap)> {
    let [nx, ny, _] = case.image.dims();
    if nx < crop || ny < crop {
        return Err(Error::Data(format!(
            "volume in-plane size {nx}x{ny} is smaller than the {crop}x{crop} crop"
        )));
    }
    let y0 = rng.random_range(0..=ny - crop);
    let x0 = rng.random_range(0..=nx - crop);
    let flip = rng.random_bool(flip_prob);
    let slab = extract_slab_region(&case.image, z, k, [y0 as isize, x0 as isize], [crop, crop])?;
    let mut input = hu_to_input(&slab);
    let plane = case.labels.slice(z);
    let mut target = Vec::with_capacity(crop * crop);
    for y in y0..y0 + crop {
        target.extend_from_slice(&plane[y * nx + x0..y * nx + x0 + crop]);
    }
    let mut target = LabelMap::new(1, crop, crop, target)?;
    if flip {
        flip_width(&mut input, &mut target);
    }
    Ok((input, target))
}

/// Mirrors a single-item input and its target along the width axis.
pub fn flip_width(input: &mut Tensor<f32>, target: &mut LabelMap) {
    let w = input.dims().w;
    for row in input.data_mut().chunks_exact_mut(w) {
        row.reverse();
    }
    for row in target.data.chunks_exact_mut(target.w) {
        row.reverse();
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochReport {
    pub epoch: usize,
    pub mean_loss: f64,
    pub lr: f64,
    pub samples: usize,
}

impl fmt::Display for EpochReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "epoch {} lr {} loss {} samples {}",
            self.epoch,
            crate::metrics::format_sig(self.lr),
            crate::metrics::format_sig(self.mean_loss),
            self.samples
        )
    }
}

/// Runs `cfg.epochs` passes over every eligible `(case, slice)` position in
/// shuffled order. `observer` sees each report as soon as its epoch ends.
pub fn train_model(
    mut net: Network<f32>,
    cases: &[TrainingCase],
    cfg: &TrainConfig,
    mut observer: impl FnMut(&EpochReport),
) -> Result<(Network<f32>, Vec<EpochReport>)> {
    cfg.validate()?;
    let positions: Vec<(usize, usize)> = cases
        .iter()
        .enumerate()
        .flat_map(|(i, c)| c.slices.iter().map(move |&z| (i, z)))
        .collect();
    if positions.is_empty() {
        return Err(Error::Data("training set is empty".into()));
    }
    let spec = net.spec().clone();
    let weights = cfg.class_weights.for_classes(spec.num_classes)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut reports = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let lr = lr_at_epoch(cfg, epoch)?;
        let mut order = positions.clone();
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for (step, batch) in order.chunks(cfg.batch_size).enumerate() {
            let mut inputs = Vec::with_capacity(batch.len());
            let mut targets = Vec::with_capacity(batch.len());
            for &(i, z) in batch {
                let (x, t) = sample_training_stack_at(&cases[i], z, spec.in_slices, cfg.crop, cfg.flip_prob, &mut rng)?;
                inputs.push(x);
                targets.push(t);
            }
            let input = stack_batch(&inputs)?;
            let target = LabelMap::stack(&targets)?;
            let (logits, cache) = net.forward_train(&input)?;
            let (loss, grad) = weighted_ce_loss(&softmax_channels(&logits), &target, &weights)?;
            if !loss.is_finite() {
                return Err(Error::Training(format!("loss diverged ({loss}) at epoch {epoch}, step {step}")));
            }
            net.backward(cache, &grad)?;
            sgd_step(net.params_mut(), lr, cfg.momentum, cfg.weight_decay)
                .map_err(|e| Error::Training(format!("{e} at epoch {epoch}, step {step}")))?;
            loss_sum += loss * batch.len() as f64;
        }
        let report = EpochReport {
            epoch,
            mean_loss: loss_sum / order.len() as f64,
            lr,
            samples: order.len(),
        };
        if !report.mean_loss.is_finite() {
            return Err(Error::Training(format!("mean loss diverged at epoch {epoch}")));
        }
        observer(&report);
        reports.push(report);
    }
    Ok((net, reports))
}
