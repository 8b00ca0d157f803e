//! Flat `key=value` run configuration shared by all CLI commands.
//!
//! Blank lines and `#` comments are ignored. Lists are comma separated.
//! Unknown or repeated keys are configuration errors. See `livseg.conf` at
//! the repository root for every key with its default.

use std::collections::HashSet;
use std::path::Path;
use std::str::FromStr;

use crate::cascade::CascadeConfig;
use crate::error::{Error, Result};
use crate::morpho::Connectivity;
use crate::network::NetSpec;
use crate::ops::loss::ClassWeights;
use crate::trainer::TrainConfig;
use crate::volume::PhantomConfig;

#[derive(Clone, Debug, PartialEq, Default)]
pub struct RunConfig {
    /// `num_classes` is ignored; each training stage sets its own.
    pub net: NetSpec,
    pub net_seed: u64,
    pub train: TrainConfig,
    pub cascade: CascadeConfig,
    pub phantom: PhantomConfig,
    /// Worker threads; `None` uses all cores.
    pub threads: Option<usize>,
    pub emit_probs: bool,
}

fn scalar<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse().map_err(|_| Error::Config(format!("{key}: cannot parse {v:?}")))
}

fn list<T: FromStr>(key: &str, v: &str) -> Result<Vec<T>> {
    v.split(',').map(|s| scalar(key, s.trim())).collect()
}

fn triple<T: FromStr + Copy>(key: &str, v: &str) -> Result<[T; 3]> {
    let items: Vec<T> = list(key, v)?;
    <[T; 3]>::try_from(items).map_err(|_| Error::Config(format!("{key}: expected 3 comma-separated values")))
}

fn boolean(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(Error::Config(format!("{key}: expected true or false, got {v:?}"))),
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        let mut seen = HashSet::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let at = |e: Error| match e {
                Error::Config(m) => Error::Config(format!("line {}: {m}", i + 1)),
                other => other,
            };
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key=value", i + 1)))?;
            let (key, value) = (key.trim(), value.trim());
            if !seen.insert(key.to_string()) {
                return Err(Error::Config(format!("line {}: duplicate key {key}", i + 1)));
            }
            cfg.set(key, value).map_err(at)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::from(e).in_file(path))?;
        Self::parse(&text).map_err(|e| e.in_file(path))
    }

    fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let (net, train, cas, ph) = (&mut self.net, &mut self.train, &mut self.cascade, &mut self.phantom);
        match key {
            "net.in_slices" => net.in_slices = scalar(key, v)?,
            "net.level_channels" => net.level_channels = list(key, v)?,
            "net.encoder_convs" => net.encoder_convs = list(key, v)?,
            "net.decoder_convs" => net.decoder_convs = list(key, v)?,
            "net.crop_train" => net.crop_train = scalar(key, v)?,
            "net.seed" => self.net_seed = scalar(key, v)?,

            "train.lr0" => train.lr0 = scalar(key, v)?,
            "train.lr_gamma" => train.lr_gamma = scalar(key, v)?,
            "train.epochs" => train.epochs = scalar(key, v)?,
            "train.weight_decay" => train.weight_decay = scalar(key, v)?,
            "train.momentum" => train.momentum = scalar(key, v)?,
            "train.batch_size" => train.batch_size = scalar(key, v)?,
            "train.crop" => train.crop = scalar(key, v)?,
            "train.flip_prob" => train.flip_prob = scalar(key, v)?,
            "train.seed" => train.seed = scalar(key, v)?,
            "train.class_weights" => train.class_weights = ClassWeights::new(list(key, v)?)?,

            "cascade.coarse_spacing" => cas.coarse_spacing = triple(key, v)?,
            "cascade.window" => cas.window = scalar(key, v)?,
            "cascade.window_overlap" => cas.window_overlap = scalar(key, v)?,
            "cascade.roi_margin_mm" => cas.roi_margin_mm = scalar(key, v)?,
            "cascade.lesion_prob_threshold" => cas.lesion_prob_threshold = scalar(key, v)?,
            "cascade.connectivity" => cas.connectivity = Connectivity::try_from(scalar::<usize>(key, v)?)?,

            "phantom.dims" => ph.dims = triple(key, v)?,
            "phantom.spacing" => ph.spacing = triple(key, v)?,
            "phantom.liver_semi_axes_min" => ph.liver_semi_axes_min = triple(key, v)?,
            "phantom.liver_semi_axes_max" => ph.liver_semi_axes_max = triple(key, v)?,
            "phantom.liver_center_jitter" => ph.liver_center_jitter = scalar(key, v)?,
            "phantom.lesion_count_min" => ph.lesion_count_min = scalar(key, v)?,
            "phantom.lesion_count_max" => ph.lesion_count_max = scalar(key, v)?,
            "phantom.lesion_radius_min" => ph.lesion_radius_min = scalar(key, v)?,
            "phantom.lesion_radius_max" => ph.lesion_radius_max = scalar(key, v)?,
            "phantom.mean_background" => ph.mean_background = scalar(key, v)?,
            "phantom.mean_liver" => ph.mean_liver = scalar(key, v)?,
            "phantom.mean_lesion" => ph.mean_lesion = scalar(key, v)?,
            "phantom.noise_sigma" => ph.noise_sigma = scalar(key, v)?,

            "threads" => {
                let n: usize = scalar(key, v)?;
                if n == 0 {
                    return Err(Error::Config("threads must be at least 1".into()));
                }
                self.threads = Some(n);
            }
            "emit_probs" => self.emit_probs = boolean(key, v)?,
            _ => return Err(Error::Config(format!("unknown key {key}"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        self.cascade.validate()?;
        self.phantom.validate()?;
        self.net_spec(self.net.num_classes.max(2)).validate()
    }

    /// Network spec for a stage with `num_classes` outputs.
    pub fn net_spec(&self, num_classes: usize) -> NetSpec {
        NetSpec {
            num_classes,
            ..self.net.clone()
        }
    }
}
