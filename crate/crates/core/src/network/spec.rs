use std::fmt::Write as _;

use crate::error::{Error, Result};

/// How the encoder halves resolution between levels.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Downsample {
    /// 3x3 convolution with stride 2 that also changes the channel count.
    StridedConv,
}

/// Declarative description of the residual U-Net.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct NetSpec {
    /// Adjacent axial slices stacked as input channels.
    pub in_slices: usize,
    pub num_classes: usize,
    /// Feature channels per resolution level, top to bottom.
    pub level_channels: Vec<usize>,
    /// 3x3 convolutions per encoder level. Level 0 counts the input conv.
    pub encoder_convs: Vec<usize>,
    /// 3x3 convolutions per decoder level, indexed by level (0 = full resolution).
    pub decoder_convs: Vec<usize>,
    pub downsample: Downsample,
    pub crop_train: usize,
}

impl Default for NetSpec {
    fn default() -> Self {
        NetSpec {
            in_slices: 5,
            num_classes: 3,
            level_channels: vec![64, 128, 256, 512, 512],
            encoder_convs: vec![2, 2, 3, 3, 3],
            decoder_convs: vec![3, 3, 2, 2],
            downsample: Downsample::StridedConv,
            crop_train: 320,
        }
    }
}

impl NetSpec {
    pub fn levels(&self) -> usize {
        self.level_channels.len()
    }

    /// Spatial dims must be multiples of this.
    pub fn size_multiple(&self) -> usize {
        1 << self.levels().saturating_sub(1)
    }

    pub fn validate(&self) -> Result<()> {
        let mut violated = Vec::new();
        if self.level_channels.is_empty() {
            violated.push("at least one level".to_string());
        }
        if self.encoder_convs.len() != self.level_channels.len() {
            violated.push(format!(
                "len(encoder_convs) = {} must equal len(level_channels) = {}",
                self.encoder_convs.len(),
                self.level_channels.len()
            ));
        }
        if self.decoder_convs.len() + 1 != self.level_channels.len() {
            violated.push(format!(
                "len(decoder_convs) = {} must equal len(level_channels) - 1 = {}",
                self.decoder_convs.len(),
                self.level_channels.len().saturating_sub(1)
            ));
        }
        if self.in_slices == 0 || self.in_slices.is_multiple_of(2) {
            violated.push(format!("in_slices = {} must be odd", self.in_slices));
        }
        if !(2..=3).contains(&self.num_classes) {
            violated.push(format!("num_classes = {} must be 2 or 3", self.num_classes));
        }
        if self.level_channels.contains(&0) {
            violated.push("level_channels must be positive".into());
        }
        if self.encoder_convs.first() == Some(&0) {
            violated.push("encoder level 0 needs at least its input conv".into());
        }
        if self.decoder_convs.contains(&0) {
            violated.push("every decoder level needs at least one conv".into());
        }
        if self.levels() > 0 && (self.crop_train == 0 || !self.crop_train.is_multiple_of(self.size_multiple())) {
            violated.push(format!(
                "crop_train = {} must be a positive multiple of {}",
                self.crop_train,
                self.size_multiple()
            ));
        }
        if violated.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid network spec: {}", violated.join("; "))))
        }
    }

    /// Number of parameterized conv-type layers: encoder convs, downsampling
    /// convs, decoder convs, up-convs and the classifier.
    pub fn weighted_layer_count(&self) -> usize {
        let levels = self.levels();
        self.encoder_convs.iter().sum::<usize>()
            + levels.saturating_sub(1)
            + self.decoder_convs.iter().sum::<usize>()
            + levels.saturating_sub(1)
            + 1
    }

    /// Trainable scalars: conv weights and biases, plus batch-norm scale/shift
    /// and PReLU slope for every layer except the classifier.
    pub fn parameter_count(&self) -> usize {
        let conv = |ci: usize, co: usize| ci * co * 9 + co + 3 * co;
        let up = |ci: usize, co: usize| ci * co * 4 + co + 3 * co;
        let ch = &self.level_channels;
        let mut total = 0;
        for (l, &c) in ch.iter().enumerate() {
            let in_c = if l == 0 { self.in_slices } else { ch[l - 1] };
            total += conv(in_c, c);
            let block = if l == 0 { self.encoder_convs[0] - 1 } else { self.encoder_convs[l] };
            total += block * conv(c, c);
        }
        for (l, &convs) in self.decoder_convs.iter().enumerate() {
            let c = ch[l];
            total += up(ch[l + 1], c) + conv(2 * c, c) + (convs - 1) * conv(c, c);
        }
        total + ch[0] * self.num_classes * 9 + self.num_classes
    }

    /// `key=value` lines, the same keys accepted by [`NetSpec::set`].
    pub fn to_text(&self) -> String {
        let list = |v: &[usize]| v.iter().map(usize::to_string).collect::<Vec<_>>().join(",");
        let mut s = String::new();
        let _ = writeln!(s, "in_slices={}", self.in_slices);
        let _ = writeln!(s, "num_classes={}", self.num_classes);
        let _ = writeln!(s, "level_channels={}", list(&self.level_channels));
        let _ = writeln!(s, "encoder_convs={}", list(&self.encoder_convs));
        let _ = writeln!(s, "decoder_convs={}", list(&self.decoder_convs));
        let _ = writeln!(s, "downsample=strided_conv");
        let _ = writeln!(s, "crop_train={}", self.crop_train);
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut spec = NetSpec::default();
        for line in text.lines().map(str::trim).filter(|l| !l.is_empty()) {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("expected key=value, got {line:?}")))?;
            if !spec.set(k.trim(), v.trim())? {
                return Err(Error::Config(format!("unknown network key {k:?}")));
            }
        }
        spec.validate()?;
        Ok(spec)
    }

    /// Applies one setting; returns false for an unknown key.
    pub fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        match key {
            "in_slices" => self.in_slices = parse_usize(key, value)?,
            "num_classes" => self.num_classes = parse_usize(key, value)?,
            "level_channels" => self.level_channels = parse_list(key, value)?,
            "encoder_convs" => self.encoder_convs = parse_list(key, value)?,
            "decoder_convs" => self.decoder_convs = parse_list(key, value)?,
            "crop_train" => self.crop_train = parse_usize(key, value)?,
            "downsample" => {
                if value != "strided_conv" {
                    return Err(Error::Config(format!("downsample must be strided_conv, got {value:?}")));
                }
                self.downsample = Downsample::StridedConv;
            }
            _ => return Ok(false),
        }
        Ok(true)
    }
}

pub(crate) fn parse_usize(key: &str, value: &str) -> Result<usize> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("{key}: expected a non-negative integer, got {value:?}")))
}

pub(crate) fn parse_list(key: &str, value: &str) -> Result<Vec<usize>> {
    value.split(',').map(|v| parse_usize(key, v.trim())).collect()
}
