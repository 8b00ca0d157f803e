//! The 2.5D residual U-Net: construction, forward and backward passes.
//!
//! Every conv-type layer except the classifier is followed by batch norm and
//! PReLU. Encoder levels add the level's entry output (input conv on level 0,
//! strided downsampling conv below) to the output of the remaining convs.
//! Decoder levels up-sample with a 2x2 transposed conv, concatenate the
//! same-level encoder output, and add the up-conv output back after the
//! level's convs.

pub mod checkpoint;
pub mod spec;

use std::sync::atomic::{AtomicU64, Ordering};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::ops::batchnorm::{BN_EPSILON, BN_MOMENTUM};
use crate::ops::prelu::PRELU_INIT_SLOPE;
use crate::ops::{
    add_elementwise, batchnorm_backward, batchnorm_eval, batchnorm_forward, concat_channels, conv2d_backward, conv2d_forward,
    prelu_backward, prelu_forward, split_channels, transposed_conv2d_backward, transposed_conv2d_forward, BnCache, ConvCache, Mode,
    PreluCache, RunningStats, UpConvCache,
};
use crate::tensor::{Dims, Real, Tensor};

pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use spec::{Downsample, NetSpec};

/// A trainable tensor with its gradient and momentum buffer.
#[derive(Clone, Debug)]
pub struct Param<T> {
    pub value: Tensor<T>,
    pub grad: Tensor<T>,
    pub momentum: Tensor<T>,
}

impl<T: Real> Param<T> {
    pub fn new(value: Tensor<T>) -> Self {
        let dims = value.dims();
        Param {
            value,
            grad: Tensor::zeros(dims),
            momentum: Tensor::zeros(dims),
        }
    }

    fn accumulate(&mut self, g: &[T]) {
        for (acc, &v) in self.grad.data_mut().iter_mut().zip(g) {
            *acc = *acc + v;
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum UnitKind {
    Conv { stride: usize },
    Up,
}

#[derive(Clone, Debug)]
struct Norm<T> {
    gamma: Param<T>,
    beta: Param<T>,
    slope: Param<T>,
    running: Option<RunningStats<T>>,
}

/// One conv-type layer with its optional batch norm + PReLU.
#[derive(Clone, Debug)]
struct Unit<T> {
    name: String,
    kind: UnitKind,
    weight: Param<T>,
    bias: Param<T>,
    norm: Option<Norm<T>>,
}

enum LayerCache<T> {
    Conv(ConvCache<T>),
    Up(UpConvCache<T>),
}

struct UnitCache<T> {
    layer: LayerCache<T>,
    norm: Option<(BnCache<T>, PreluCache<T>)>,
}

impl<T: Real> Unit<T> {
    fn new(name: String, kind: UnitKind, ci: usize, co: usize, normed: bool, rng: &mut ChaCha8Rng) -> Self {
        let (dims, fan_in) = match kind {
            UnitKind::Conv { .. } => (Dims::new(co, ci, 3, 3), ci * 9),
            UnitKind::Up => (Dims::new(ci, co, 2, 2), ci),
        };
        // He initialization with the PReLU gain.
        let a = PRELU_INIT_SLOPE;
        let std = (2.0 / ((1.0 + a * a) * fan_in as f64)).sqrt();
        let normal = Normal::new(0.0, std).expect("positive std");
        let data = (0..dims.len()).map(|_| T::from_f64_lossy(normal.sample(rng))).collect();
        let weight = Param::new(Tensor::from_vec(dims, data).expect("sized"));
        let vec = |v: f64| Param::new(Tensor::vector(vec![T::from_f64_lossy(v); co]));
        Unit {
            name,
            kind,
            weight,
            bias: vec(0.0),
            norm: normed.then(|| Norm {
                gamma: vec(1.0),
                beta: vec(0.0),
                slope: vec(a),
                running: None,
            }),
        }
    }

    fn layer_forward(&self, x: &Tensor<T>) -> Result<(Tensor<T>, LayerCache<T>)> {
        let bias = self.bias.value.data();
        Ok(match self.kind {
            UnitKind::Conv { stride } => {
                let (y, c) = conv2d_forward(x, &self.weight.value, bias, stride, 1)?;
                (y, LayerCache::Conv(c))
            }
            UnitKind::Up => {
                let (y, c) = transposed_conv2d_forward(x, &self.weight.value, bias)?;
                (y, LayerCache::Up(c))
            }
        })
    }

    fn forward_train(&mut self, x: &Tensor<T>) -> Result<(Tensor<T>, UnitCache<T>)> {
        let (y, layer) = self.layer_forward(x)?;
        let Some(norm) = self.norm.as_mut() else {
            return Ok((y, UnitCache { layer, norm: None }));
        };
        let (z, bn) = batchnorm_forward(
            &y,
            norm.gamma.value.data(),
            norm.beta.value.data(),
            &mut norm.running,
            Mode::Train,
            T::from_f64_lossy(BN_MOMENTUM),
            T::from_f64_lossy(BN_EPSILON),
        )?;
        let (out, pr) = prelu_forward(&z, norm.slope.value.data())?;
        Ok((
            out,
            UnitCache {
                layer,
                norm: Some((bn.expect("train mode returns a cache"), pr)),
            },
        ))
    }

    fn forward_eval(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let (y, _) = self.layer_forward(x)?;
        let Some(norm) = self.norm.as_ref() else {
            return Ok(y);
        };
        let stats = norm.running.as_ref().ok_or_else(|| {
            Error::Usage(format!(
                "eval-mode forward before layer {} has batch-norm running statistics (train the network first)",
                self.name
            ))
        })?;
        let z = batchnorm_eval(
            &y,
            norm.gamma.value.data(),
            norm.beta.value.data(),
            stats,
            T::from_f64_lossy(BN_EPSILON),
        )?;
        Ok(prelu_forward(&z, norm.slope.value.data())?.0)
    }

    fn backward(&mut self, cache: UnitCache<T>, grad_out: Tensor<T>) -> Result<Tensor<T>> {
        let mut g = grad_out;
        if let (Some(norm), Some((bn, pr))) = (self.norm.as_mut(), cache.norm) {
            let (gz, gslope) = prelu_backward(&pr, norm.slope.value.data(), &g)?;
            norm.slope.accumulate(&gslope);
            let bg = batchnorm_backward(&bn, norm.gamma.value.data(), &gz)?;
            norm.gamma.accumulate(&bg.gamma);
            norm.beta.accumulate(&bg.beta);
            g = bg.input;
        }
        let grads = match cache.layer {
            LayerCache::Conv(c) => conv2d_backward(&c, &self.weight.value, &g)?,
            LayerCache::Up(c) => transposed_conv2d_backward(&c, &self.weight.value, &g)?,
        };
        self.weight.accumulate(grads.weight.data());
        self.bias.accumulate(&grads.bias);
        Ok(grads.input)
    }

    fn params(&self) -> Vec<(String, &Param<T>)> {
        let mut out = vec![
            (format!("{}.weight", self.name), &self.weight),
            (format!("{}.bias", self.name), &self.bias),
        ];
        if let Some(n) = &self.norm {
            out.push((format!("{}.bn.gamma", self.name), &n.gamma));
            out.push((format!("{}.bn.beta", self.name), &n.beta));
            out.push((format!("{}.prelu.slope", self.name), &n.slope));
        }
        out
    }

    fn params_mut(&mut self) -> Vec<(String, &mut Param<T>)> {
        let mut out = vec![
            (format!("{}.weight", self.name), &mut self.weight),
            (format!("{}.bias", self.name), &mut self.bias),
        ];
        if let Some(n) = &mut self.norm {
            out.push((format!("{}.bn.gamma", self.name), &mut n.gamma));
            out.push((format!("{}.bn.beta", self.name), &mut n.beta));
            out.push((format!("{}.prelu.slope", self.name), &mut n.slope));
        }
        out
    }
}

/// Index ranges into `Network::units` for one resolution level.
#[derive(Clone, Debug)]
struct LevelLayout {
    /// Encoder: input conv or downsampling conv. Decoder: up-conv.
    entry: usize,
    block: std::ops::Range<usize>,
}

struct LevelCache<T> {
    entry: UnitCache<T>,
    block: Vec<UnitCache<T>>,
}

/// Forward-pass state needed by [`Network::backward`].
pub struct ActivationCache<T> {
    net_id: u64,
    version: u64,
    encoder: Vec<LevelCache<T>>,
    /// Indexed by level; filled bottom-up during the forward pass.
    decoder: Vec<Option<LevelCache<T>>>,
    head: UnitCache<T>,
    /// Channels of each decoder level's up-conv output (the concat split point).
    up_channels: Vec<usize>,
}

static NEXT_NET_ID: AtomicU64 = AtomicU64::new(1);

/// Instantiated parameters for a [`NetSpec`].
#[derive(Debug)]
pub struct Network<T> {
    spec: NetSpec,
    units: Vec<Unit<T>>,
    encoder: Vec<LevelLayout>,
    decoder: Vec<LevelLayout>,
    head: usize,
    id: u64,
    version: u64,
}

impl<T: Real> Clone for Network<T> {
    fn clone(&self) -> Self {
        Network {
            spec: self.spec.clone(),
            units: self.units.clone(),
            encoder: self.encoder.clone(),
            decoder: self.decoder.clone(),
            head: self.head,
            id: NEXT_NET_ID.fetch_add(1, Ordering::Relaxed),
            version: self.version,
        }
    }
}

/// Builds the network for `spec` with He-initialized weights drawn from `seed`.
pub fn build_network<T: Real>(spec: &NetSpec, seed: u64) -> Result<Network<T>> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ch = &spec.level_channels;
    let mut units = Vec::new();
    let mut encoder = Vec::new();
    for (l, &c) in ch.iter().enumerate() {
        let (entry_name, in_c, stride, block_len) = if l == 0 {
            (format!("enc{l}.input"), spec.in_slices, 1, spec.encoder_convs[0] - 1)
        } else {
            (format!("enc{l}.down"), ch[l - 1], 2, spec.encoder_convs[l])
        };
        let entry = units.len();
        units.push(Unit::new(entry_name, UnitKind::Conv { stride }, in_c, c, true, &mut rng));
        let start = units.len();
        for i in 0..block_len {
            units.push(Unit::new(
                format!("enc{l}.conv{i}"),
                UnitKind::Conv { stride: 1 },
                c,
                c,
                true,
                &mut rng,
            ));
        }
        encoder.push(LevelLayout {
            entry,
            block: start..units.len(),
        });
    }
    let mut decoder = Vec::new();
    for (l, &convs) in spec.decoder_convs.iter().enumerate() {
        let c = ch[l];
        let entry = units.len();
        units.push(Unit::new(format!("dec{l}.up"), UnitKind::Up, ch[l + 1], c, true, &mut rng));
        let start = units.len();
        for i in 0..convs {
            let in_c = if i == 0 { 2 * c } else { c };
            units.push(Unit::new(
                format!("dec{l}.conv{i}"),
                UnitKind::Conv { stride: 1 },
                in_c,
                c,
                true,
                &mut rng,
            ));
        }
        decoder.push(LevelLayout {
            entry,
            block: start..units.len(),
        });
    }
    let head = units.len();
    units.push(Unit::new(
        "head".into(),
        UnitKind::Conv { stride: 1 },
        ch[0],
        spec.num_classes,
        false,
        &mut rng,
    ));
    Ok(Network {
        spec: spec.clone(),
        units,
        encoder,
        decoder,
        head,
        id: NEXT_NET_ID.fetch_add(1, Ordering::Relaxed),
        version: 0,
    })
}

impl<T: Real> Network<T> {
    pub fn spec(&self) -> &NetSpec {
        &self.spec
    }

    pub fn weighted_layer_count(&self) -> usize {
        self.units.len()
    }

    fn check_input(&self, input: &Tensor<T>) -> Result<()> {
        let d = input.dims();
        if d.c != self.spec.in_slices {
            return Err(Error::shape(
                "network input",
                format!("{} channels (stacked slices)", self.spec.in_slices),
                d,
            ));
        }
        let m = self.spec.size_multiple();
        if d.h == 0 || d.w == 0 || !d.h.is_multiple_of(m) || !d.w.is_multiple_of(m) {
            let near = |v: usize| (((v + m / 2) / m).max(1)) * m;
            return Err(Error::shape(
                "network input",
                format!("height and width divisible by {m} (nearest valid size {}x{})", near(d.h), near(d.w)),
                d,
            ));
        }
        Ok(())
    }

    /// Forward pass. Train mode updates batch-norm running statistics and
    /// returns the activation cache for [`Network::backward`].
    pub fn forward(&mut self, input: &Tensor<T>, mode: Mode) -> Result<(Tensor<T>, Option<ActivationCache<T>>)> {
        match mode {
            Mode::Train => self.forward_train(input).map(|(y, c)| (y, Some(c))),
            Mode::Eval => self.forward_eval(input).map(|y| (y, None)),
        }
    }

    /// Eval-mode forward; a pure function of parameters, running statistics and input.
    pub fn forward_eval(&self, input: &Tensor<T>) -> Result<Tensor<T>> {
        self.check_input(input)?;
        let mut skips = Vec::with_capacity(self.encoder.len());
        let mut x = input.clone();
        for lvl in &self.encoder {
            let entry = self.units[lvl.entry].forward_eval(&x)?;
            let mut y = entry.clone();
            for u in lvl.block.clone() {
                y = self.units[u].forward_eval(&y)?;
            }
            x = if lvl.block.is_empty() { y } else { add_elementwise(&y, &entry)? };
            skips.push(x.clone());
        }
        for (l, lvl) in self.decoder.iter().enumerate().rev() {
            let up = self.units[lvl.entry].forward_eval(&x)?;
            let mut y = concat_channels(&up, &skips[l])?;
            for u in lvl.block.clone() {
                y = self.units[u].forward_eval(&y)?;
            }
            x = add_elementwise(&y, &up)?;
        }
        self.units[self.head].forward_eval(&x)
    }

    pub fn forward_train(&mut self, input: &Tensor<T>) -> Result<(Tensor<T>, ActivationCache<T>)> {
        self.check_input(input)?;
        let levels = self.encoder.len();
        let mut skips = Vec::with_capacity(levels);
        let mut enc_caches = Vec::with_capacity(levels);
        let mut x = input.clone();
        for li in 0..levels {
            let lvl = self.encoder[li].clone();
            let (entry, entry_cache) = self.units[lvl.entry].forward_train(&x)?;
            let mut y = entry.clone();
            let mut block = Vec::with_capacity(lvl.block.len());
            for u in lvl.block.clone() {
                let (out, c) = self.units[u].forward_train(&y)?;
                block.push(c);
                y = out;
            }
            x = if lvl.block.is_empty() { y } else { add_elementwise(&y, &entry)? };
            skips.push(x.clone());
            enc_caches.push(LevelCache { entry: entry_cache, block });
        }
        let mut dec_caches: Vec<Option<LevelCache<T>>> = (0..self.decoder.len()).map(|_| None).collect();
        let mut up_channels = vec![0; self.decoder.len()];
        for l in (0..self.decoder.len()).rev() {
            let lvl = self.decoder[l].clone();
            let (up, entry_cache) = self.units[lvl.entry].forward_train(&x)?;
            up_channels[l] = up.dims().c;
            let mut y = concat_channels(&up, &skips[l])?;
            let mut block = Vec::with_capacity(lvl.block.len());
            for u in lvl.block.clone() {
                let (out, c) = self.units[u].forward_train(&y)?;
                block.push(c);
                y = out;
            }
            x = add_elementwise(&y, &up)?;
            dec_caches[l] = Some(LevelCache { entry: entry_cache, block });
        }
        let head = self.head;
        let (logits, head_cache) = self.units[head].forward_train(&x)?;
        Ok((
            logits,
            ActivationCache {
                net_id: self.id,
                version: self.version,
                encoder: enc_caches,
                decoder: dec_caches,
                head: head_cache,
                up_channels,
            },
        ))
    }

    /// Backpropagates `grad_logits`, adding into every parameter's gradient.
    pub fn backward(&mut self, cache: ActivationCache<T>, grad_logits: &Tensor<T>) -> Result<()> {
        if cache.net_id != self.id || cache.version != self.version {
            return Err(Error::Usage(
                "stale activation cache: it was produced by another network or before a parameter update".into(),
            ));
        }
        let ActivationCache {
            encoder: enc_caches,
            decoder: dec_caches,
            head: head_cache,
            up_channels,
            ..
        } = cache;
        let head = self.head;
        let mut g = self.units[head].backward(head_cache, grad_logits.clone())?;

        let levels = self.encoder.len();
        let mut skip_grads: Vec<Option<Tensor<T>>> = (0..levels).map(|_| None).collect();
        for (l, lc) in dec_caches.into_iter().enumerate() {
            let lc = lc.ok_or_else(|| Error::Usage("incomplete activation cache".into()))?;
            let lvl = self.decoder[l].clone();
            // x = block(concat(up, skip)) + up
            let mut gb = g.clone();
            for (u, c) in lvl.block.clone().rev().zip(lc.block.into_iter().rev()) {
                gb = self.units[u].backward(c, gb)?;
            }
            let (g_up_cat, g_skip) = split_channels(&gb, up_channels[l])?;
            skip_grads[l] = Some(g_skip);
            let g_up = add_elementwise(&g, &g_up_cat)?;
            g = self.units[lvl.entry].backward(lc.entry, g_up)?;
        }

        for (l, lc) in enc_caches.into_iter().enumerate().rev() {
            let lvl = self.encoder[l].clone();
            let mut g_out = g;
            if l + 1 < levels {
                let s = skip_grads[l].take().expect("decoder level exists above the bottom");
                g_out = add_elementwise(&g_out, &s)?;
            }
            // x = block(entry) + entry, or just entry when the block is empty
            let mut g_entry = g_out.clone();
            if !lvl.block.is_empty() {
                let mut gb = g_out;
                for (u, c) in lvl.block.clone().rev().zip(lc.block.into_iter().rev()) {
                    gb = self.units[u].backward(c, gb)?;
                }
                g_entry = add_elementwise(&g_entry, &gb)?;
            }
            g = self.units[lvl.entry].backward(lc.entry, g_entry)?;
        }
        Ok(())
    }

    /// Named parameters in construction order.
    pub fn params(&self) -> Vec<(String, &Param<T>)> {
        self.units.iter().flat_map(Unit::params).collect()
    }

    /// Mutable parameter access. Bumps the parameter version, which
    /// invalidates outstanding activation caches.
    pub fn params_mut(&mut self) -> Vec<(String, &mut Param<T>)> {
        self.version += 1;
        self.units.iter_mut().flat_map(Unit::params_mut).collect()
    }

    /// Batch-norm running statistics by layer name, `None` before the first train pass.
    pub fn running_stats(&self) -> Vec<(String, Option<&RunningStats<T>>)> {
        self.units
            .iter()
            .filter_map(|u| u.norm.as_ref().map(|n| (format!("{}.bn", u.name), n.running.as_ref())))
            .collect()
    }

    pub(crate) fn running_stats_mut(&mut self) -> Vec<(String, &mut Option<RunningStats<T>>)> {
        self.units
            .iter_mut()
            .filter_map(|u| {
                let name = format!("{}.bn", u.name);
                u.norm.as_mut().map(|n| (name, &mut n.running))
            })
            .collect()
    }

    pub fn parameter_count(&self) -> usize {
        self.params().iter().map(|(_, p)| p.value.len()).sum()
    }

    pub fn zero_grads(&mut self) {
        for u in &mut self.units {
            for (_, p) in u.params_mut() {
                p.grad.fill(T::zero());
            }
        }
    }

    /// Converts parameters and statistics to another precision.
    pub fn cast<U: Real>(&self) -> Network<U> {
        let cast_param = |p: &Param<T>| Param::new(p.value.cast());
        let cast_vec = |v: &[T]| v.iter().map(|x| U::from_f64_lossy(x.to_f64().unwrap())).collect();
        Network {
            spec: self.spec.clone(),
            units: self
                .units
                .iter()
                .map(|u| Unit {
                    name: u.name.clone(),
                    kind: u.kind,
                    weight: cast_param(&u.weight),
                    bias: cast_param(&u.bias),
                    norm: u.norm.as_ref().map(|n| Norm {
                        gamma: cast_param(&n.gamma),
                        beta: cast_param(&n.beta),
                        slope: cast_param(&n.slope),
                        running: n.running.as_ref().map(|r| RunningStats {
                            mean: cast_vec(&r.mean),
                            var: cast_vec(&r.var),
                        }),
                    }),
                })
                .collect(),
            encoder: self.encoder.clone(),
            decoder: self.decoder.clone(),
            head: self.head,
            id: NEXT_NET_ID.fetch_add(1, Ordering::Relaxed),
            version: 0,
        }
    }

    /// Output dims of the encoder level `level` for an input of `input` dims.
    pub fn encoder_output_dims(&self, input: Dims, level: usize) -> Dims {
        let f = 1 << level;
        Dims::new(input.n, self.spec.level_channels[level], input.h / f, input.w / f)
    }

    /// Encoder outputs of every level in eval mode, for inspection.
    pub fn encoder_features(&self, input: &Tensor<T>) -> Result<Vec<Tensor<T>>> {
        self.check_input(input)?;
        let mut out = Vec::new();
        let mut x = input.clone();
        for lvl in &self.encoder {
            let entry = self.units[lvl.entry].forward_eval(&x)?;
            let mut y = entry.clone();
            for u in lvl.block.clone() {
                y = self.units[u].forward_eval(&y)?;
            }
            x = if lvl.block.is_empty() { y } else { add_elementwise(&y, &entry)? };
            out.push(x.clone());
        }
        Ok(out)
    }
}

#[cfg(test)]
pub(crate) mod tests;
