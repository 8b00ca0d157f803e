//! Synthetic CT-like phantoms: an ellipsoidal liver holding spherical lesions
//! in a uniform background, with Gaussian noise.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{check_spacing, Grid3, LabelVolume, Volume, LABEL_BACKGROUND, LABEL_LESION, LABEL_LIVER};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct PhantomConfig {
    pub dims: [usize; 3],
    pub spacing: [f64; 3],
    /// Per-axis bounds of the liver ellipsoid semi-axes, mm.
    pub liver_semi_axes_min: [f64; 3],
    pub liver_semi_axes_max: [f64; 3],
    /// Maximum offset of the liver center from the volume center, mm.
    pub liver_center_jitter: f64,
    pub lesion_count_min: usize,
    pub lesion_count_max: usize,
    pub lesion_radius_min: f64,
    pub lesion_radius_max: f64,
    pub mean_background: f64,
    pub mean_liver: f64,
    pub mean_lesion: f64,
    pub noise_sigma: f64,
}

impl Default for PhantomConfig {
    fn default() -> Self {
        PhantomConfig {
            dims: [64, 64, 32],
            spacing: [1.5, 1.5, 3.0],
            liver_semi_axes_min: [26.0, 20.0, 24.0],
            liver_semi_axes_max: [36.0, 28.0, 34.0],
            liver_center_jitter: 6.0,
            lesion_count_min: 1,
            lesion_count_max: 3,
            lesion_radius_min: 4.5,
            lesion_radius_max: 9.0,
            mean_background: -100.0,
            mean_liver: 60.0,
            mean_lesion: 0.0,
            noise_sigma: 10.0,
        }
    }
}

impl PhantomConfig {
    pub fn validate(&self) -> Result<()> {
        check_spacing(self.spacing)?;
        if self.dims.contains(&0) {
            return Err(Error::Config(format!("phantom dims must be positive, got {:?}", self.dims)));
        }
        for a in 0..3 {
            let (lo, hi) = (self.liver_semi_axes_min[a], self.liver_semi_axes_max[a]);
            if !(lo > 0.0) || hi < lo {
                return Err(Error::Config(format!("liver semi-axis range {lo}..{hi} is invalid")));
            }
            let extent = self.dims[a] as f64 * self.spacing[a];
            if 2.0 * (hi + self.liver_center_jitter) > extent {
                return Err(Error::Config(format!(
                    "liver (semi-axis up to {hi} mm, jitter {} mm) does not fit the {extent} mm field of view on axis {a}",
                    self.liver_center_jitter
                )));
            }
        }
        if self.lesion_count_max < self.lesion_count_min {
            return Err(Error::Config("lesion_count_max < lesion_count_min".into()));
        }
        if !(self.lesion_radius_min > 0.0) || self.lesion_radius_max < self.lesion_radius_min {
            return Err(Error::Config(format!(
                "lesion radius range {}..{} is invalid",
                self.lesion_radius_min, self.lesion_radius_max
            )));
        }
        let smallest_axis = self.liver_semi_axes_min.iter().copied().fold(f64::INFINITY, f64::min);
        if self.lesion_count_max > 0 && self.lesion_radius_max + max_spacing(self) >= smallest_axis {
            return Err(Error::Config(format!(
                "lesion radius up to {} mm cannot fit inside a liver semi-axis of {smallest_axis} mm",
                self.lesion_radius_max
            )));
        }
        if !(self.noise_sigma >= 0.0) {
            return Err(Error::Config("noise_sigma must be >= 0".into()));
        }
        Ok(())
    }
}

fn max_spacing(cfg: &PhantomConfig) -> f64 {
    cfg.spacing.iter().copied().fold(0.0, f64::max)
}

/// Returns `(intensity, labels)`. Every lesion sphere lies inside the liver
/// ellipsoid; intensities are class mean plus noise, rounded to whole HU.
pub fn generate_phantom(seed: u64, cfg: &PhantomConfig) -> Result<(Volume, LabelVolume)> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let extent: [f64; 3] = std::array::from_fn(|a| cfg.dims[a] as f64 * cfg.spacing[a]);
    let semi: [f64; 3] = std::array::from_fn(|a| rng.random_range(cfg.liver_semi_axes_min[a]..=cfg.liver_semi_axes_max[a]));
    let center: [f64; 3] = std::array::from_fn(|a| extent[a] / 2.0 + rng.random_range(-cfg.liver_center_jitter..=cfg.liver_center_jitter));

    let n_lesions = rng.random_range(cfg.lesion_count_min..=cfg.lesion_count_max);
    let gap = max_spacing(cfg);
    let mut lesions = Vec::with_capacity(n_lesions);
    for _ in 0..n_lesions {
        let r = rng.random_range(cfg.lesion_radius_min..=cfg.lesion_radius_max);
        // Scaling the liver by t = 1 - (r + gap) / min_semi keeps the ball, plus
        // a one-voxel gap, inside the liver (convexity).
        let min_semi = semi.iter().copied().fold(f64::INFINITY, f64::min);
        let t = 1.0 - (r + gap) / min_semi;
        let c = loop {
            let p: [f64; 3] = std::array::from_fn(|_| rng.random_range(-1.0..=1.0));
            if p.iter().map(|x| x * x).sum::<f64>() <= 1.0 {
                break std::array::from_fn::<f64, 3, _>(|a| center[a] + t * semi[a] * p[a]);
            }
        };
        lesions.push((c, r));
    }

    let mut labels = LabelVolume::filled(cfg.dims, cfg.spacing, LABEL_BACKGROUND)?;
    let [nx, ny, nz] = cfg.dims;
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                let p = [
                    (x as f64 + 0.5) * cfg.spacing[0],
                    (y as f64 + 0.5) * cfg.spacing[1],
                    (z as f64 + 0.5) * cfg.spacing[2],
                ];
                let e: f64 = (0..3).map(|a| ((p[a] - center[a]) / semi[a]).powi(2)).sum();
                if e > 1.0 {
                    continue;
                }
                let in_lesion = lesions
                    .iter()
                    .any(|(c, r)| (0..3).map(|a| (p[a] - c[a]).powi(2)).sum::<f64>() <= r * r);
                labels.set(x, y, z, if in_lesion { LABEL_LESION } else { LABEL_LIVER });
            }
        }
    }

    let noise = Normal::new(0.0, cfg.noise_sigma).map_err(|e| Error::Config(e.to_string()))?;
    let data = labels
        .data()
        .iter()
        .map(|&l| {
            let mean = match l {
                LABEL_LIVER => cfg.mean_liver,
                LABEL_LESION => cfg.mean_lesion,
                _ => cfg.mean_background,
            };
            (mean + noise.sample(&mut rng)).round().clamp(i16::MIN as f64, i16::MAX as f64) as f32
        })
        .collect();
    Ok((Grid3::new(cfg.dims, cfg.spacing, data)?, labels))
}
