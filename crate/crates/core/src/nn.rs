//! Declarative Encoder / Decoder / Classifier architectures, their
//! parameter store, and tape-recorded forward passes.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::kernels::norm::RunningStats;
use crate::tensor::{Scalar, Tensor};

/// One layer of a sequential architecture.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Layer {
    Conv {
        out_ch: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        bias: bool,
    },
    BatchNorm,
    Relu,
    Sigmoid,
    MaxPool {
        window: usize,
    },
    Flatten,
    Dense {
        out_dim: usize,
    },
    /// `output_padding` extra rows/cols so the extent matches a mirrored conv input.
    TransposedConv {
        out_ch: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        output_padding: usize,
    },
    Upsample {
        factor: usize,
    },
}

impl Layer {
    pub fn conv(out_ch: usize, kernel: usize, stride: usize, pad: usize) -> Self {
        Layer::Conv { out_ch, kernel, stride, pad, bias: true }
    }
}

impl fmt::Display for Layer {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Layer::Conv { out_ch, kernel, stride, pad, .. } => {
                write!(f, "conv({out_ch},{kernel},{stride},{pad})")
            }
            Layer::BatchNorm => write!(f, "batchnorm"),
            Layer::Relu => write!(f, "relu"),
            Layer::Sigmoid => write!(f, "sigmoid"),
            Layer::MaxPool { window } => write!(f, "maxpool({window})"),
            Layer::Flatten => write!(f, "flatten"),
            Layer::Dense { out_dim } => write!(f, "dense({out_dim})"),
            Layer::TransposedConv { out_ch, kernel, stride, pad, .. } => {
                write!(f, "transposed_conv({out_ch},{kernel},{stride},{pad})")
            }
            Layer::Upsample { factor } => write!(f, "upsample({factor})"),
        }
    }
}

/// A layer together with its inferred per-sample input/output shapes.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LayerSpec {
    pub layer: Layer,
    pub input_shape: Vec<usize>,
    pub output_shape: Vec<usize>,
}

/// Which network a parameter belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Role {
    Encoder,
    Decoder,
    Classifier,
}

impl Role {
    pub fn prefix(self) -> &'static str {
        match self {
            Role::Encoder => "enc",
            Role::Decoder => "dec",
            Role::Classifier => "cls",
        }
    }

    /// Role owning a parameter, from its name prefix.
    pub fn of(name: &str) -> Option<Role> {
        match name.split('.').next()? {
            "enc" => Some(Role::Encoder),
            "dec" => Some(Role::Decoder),
            "cls" => Some(Role::Classifier),
            _ => None,
        }
    }
}

/// Ordered layer list with shapes chained from a per-sample input shape.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ArchitectureSpec {
    pub role: Role,
    pub input_shape: Vec<usize>,
    pub layers: Vec<LayerSpec>,
}

fn out_extent(len: usize, kernel: usize, stride: usize, pad: usize) -> Option<usize> {
    (len + 2 * pad).checked_sub(kernel).map(|v| v / stride + 1)
}

fn infer_shape(layer: &Layer, input: &[usize]) -> Result<Vec<usize>> {
    let spatial = |what: &str| -> Result<(usize, usize, usize)> {
        match *input {
            [c, h, w] => Ok((c, h, w)),
            _ => Err(Error::spec(format!("{what} needs a (C,H,W) input, got {input:?}"))),
        }
    };
    match *layer {
        Layer::Conv { out_ch, kernel, stride, pad, .. } => {
            let (_, h, w) = spatial("conv")?;
            if stride == 0 || out_ch == 0 {
                return Err(Error::spec("conv stride and width must be >= 1"));
            }
            match (out_extent(h, kernel, stride, pad), out_extent(w, kernel, stride, pad)) {
                (Some(oh), Some(ow)) => Ok(vec![out_ch, oh, ow]),
                _ => Err(Error::spec(format!("conv kernel {kernel} exceeds input {input:?}"))),
            }
        }
        Layer::TransposedConv { out_ch, kernel, stride, pad, output_padding } => {
            let (_, h, w) = spatial("transposed_conv")?;
            if stride == 0 || output_padding >= stride {
                return Err(Error::spec("transposed conv needs stride >= 1 and output_padding < stride"));
            }
            let ext = |v: usize| ((v - 1) * stride + kernel + output_padding).checked_sub(2 * pad);
            match (ext(h), ext(w)) {
                (Some(oh), Some(ow)) if oh > 0 && ow > 0 => Ok(vec![out_ch, oh, ow]),
                _ => Err(Error::spec(format!("transposed conv padding too large for {input:?}"))),
            }
        }
        Layer::BatchNorm | Layer::Relu | Layer::Sigmoid => Ok(input.to_vec()),
        Layer::MaxPool { window } => {
            let (c, h, w) = spatial("maxpool")?;
            if window == 0 || h % window != 0 || w % window != 0 {
                return Err(Error::spec(format!("extent {h}x{w} not divisible by pool window {window}")));
            }
            Ok(vec![c, h / window, w / window])
        }
        Layer::Upsample { factor } => {
            let (c, h, w) = spatial("upsample")?;
            Ok(vec![c, h * factor, w * factor])
        }
        Layer::Flatten => Ok(vec![input.iter().product()]),
        Layer::Dense { out_dim } => match *input {
            [_] if out_dim > 0 => Ok(vec![out_dim]),
            _ => Err(Error::spec(format!("dense needs a flat input, got {input:?}"))),
        },
    }
}

impl ArchitectureSpec {
    pub fn new(role: Role, input_shape: &[usize], layers: Vec<Layer>) -> Result<Self> {
        if input_shape.is_empty() || input_shape.iter().any(|&d| d == 0) {
            return Err(Error::spec(format!("invalid input shape {input_shape:?}")));
        }
        let mut shape = input_shape.to_vec();
        let mut specs = Vec::with_capacity(layers.len());
        for layer in layers {
            let out = infer_shape(&layer, &shape)?;
            specs.push(LayerSpec { layer, input_shape: shape, output_shape: out.clone() });
            shape = out;
        }
        Ok(Self { role, input_shape: input_shape.to_vec(), layers: specs })
    }

    pub fn output_shape(&self) -> &[usize] {
        self.layers.last().map_or(&self.input_shape, |l| &l.output_shape)
    }

    /// Trainable parameter slots: (name, shape, fan_in for weights).
    pub fn param_slots(&self) -> Vec<ParamSlot> {
        let p = self.role.prefix();
        let mut slots = Vec::new();
        for (i, spec) in self.layers.iter().enumerate() {
            match spec.layer {
                Layer::Conv { out_ch, kernel, bias, .. } => {
                    let cin = spec.input_shape[0];
                    slots.push(ParamSlot::weight(
                        format!("{p}.{i}.weight"),
                        vec![out_ch, cin, kernel, kernel],
                        cin * kernel * kernel,
                    ));
                    if bias {
                        slots.push(ParamSlot::zeros(format!("{p}.{i}.bias"), vec![out_ch]));
                    }
                }
                Layer::TransposedConv { out_ch, kernel, .. } => {
                    let cin = spec.input_shape[0];
                    slots.push(ParamSlot::weight(
                        format!("{p}.{i}.weight"),
                        vec![cin, out_ch, kernel, kernel],
                        cin * kernel * kernel,
                    ));
                    slots.push(ParamSlot::zeros(format!("{p}.{i}.bias"), vec![out_ch]));
                }
                Layer::Dense { out_dim } => {
                    let fan_in = spec.input_shape[0];
                    slots.push(ParamSlot::weight(format!("{p}.{i}.weight"), vec![out_dim, fan_in], fan_in));
                    slots.push(ParamSlot::zeros(format!("{p}.{i}.bias"), vec![out_dim]));
                }
                Layer::BatchNorm => {
                    let c = spec.input_shape[0];
                    slots.push(ParamSlot { name: format!("{p}.{i}.gamma"), shape: vec![c], init: Init::Ones });
                    slots.push(ParamSlot::zeros(format!("{p}.{i}.beta"), vec![c]));
                }
                _ => {}
            }
        }
        slots
    }

    /// Names of the batch-norm layers, which own running statistics.
    pub fn batchnorm_layers(&self) -> Vec<(String, usize)> {
        let p = self.role.prefix();
        self.layers
            .iter()
            .enumerate()
            .filter(|(_, l)| l.layer == Layer::BatchNorm)
            .map(|(i, l)| (format!("{p}.{i}"), l.input_shape[0]))
            .collect()
    }

    pub fn count(&self, pred: impl Fn(&Layer) -> bool) -> usize {
        self.layers.iter().filter(|l| pred(&l.layer)).count()
    }
}

impl fmt::Display for ArchitectureSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}{:?}", self.role.prefix(), self.input_shape)?;
        for l in &self.layers {
            write!(f, " -> {}", l.layer)?;
        }
        write!(f, " => {:?}", self.output_shape())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    /// Uniform on `[-sqrt(6 / fan_in), sqrt(6 / fan_in)]`.
    HeUniform {
        fan_in: usize,
    },
    Zeros,
    Ones,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamSlot {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
}

impl ParamSlot {
    fn weight(name: String, shape: Vec<usize>, fan_in: usize) -> Self {
        Self { name, shape, init: Init::HeUniform { fan_in } }
    }

    fn zeros(name: String, shape: Vec<usize>) -> Self {
        Self { name, shape, init: Init::Zeros }
    }
}

/// Encoder presets.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Preset {
    /// conv(8,5,1,2) bn relu pool(2) conv(16,5,1,2) bn relu pool(2).
    MnistSmall,
}

pub fn build_encoder(input_shape: &[usize], preset: Preset) -> Result<ArchitectureSpec> {
    let (h, w) = match *input_shape {
        [_, h, w] => (h, w),
        _ => return Err(Error::spec(format!("encoder input must be (C,H,W), got {input_shape:?}"))),
    };
    if h % 4 != 0 || w % 4 != 0 {
        return Err(Error::spec(format!("encoder input {h}x{w} must be divisible by 4")));
    }
    let layers = match preset {
        Preset::MnistSmall => {
            // conv bias is redundant ahead of batch-norm and is left out.
            let conv = |out_ch| Layer::Conv { out_ch, kernel: 5, stride: 1, pad: 2, bias: false };
            vec![
                conv(8),
                Layer::BatchNorm,
                Layer::Relu,
                Layer::MaxPool { window: 2 },
                conv(16),
                Layer::BatchNorm,
                Layer::Relu,
                Layer::MaxPool { window: 2 },
            ]
        }
    };
    ArchitectureSpec::new(Role::Encoder, input_shape, layers)
}

/// Layer-to-layer reversed decoder: conv becomes transposed conv, max-pool
/// becomes nearest upsampling, batch-norm is dropped, hidden activations are
/// relu and the last layer ends in a sigmoid mapping back to the encoder's
/// input channels.
pub fn mirror_decoder(enc: &ArchitectureSpec) -> Result<ArchitectureSpec> {
    let mut layers = Vec::new();
    let last_conv = enc.layers.iter().position(|l| matches!(l.layer, Layer::Conv { .. }));
    for (i, spec) in enc.layers.iter().enumerate().rev() {
        match spec.layer {
            Layer::Conv { kernel, stride, pad, .. } => {
                let target = &spec.input_shape;
                let h_in = spec.output_shape[1];
                let natural = ((h_in - 1) * stride + kernel).saturating_sub(2 * pad);
                let output_padding = target[1].checked_sub(natural).ok_or_else(|| {
                    Error::spec(format!("cannot mirror {}: extent {} unreachable", spec.layer, target[1]))
                })?;
                layers.push(Layer::TransposedConv { out_ch: target[0], kernel, stride, pad, output_padding });
                layers.push(if Some(i) == last_conv { Layer::Sigmoid } else { Layer::Relu });
            }
            Layer::MaxPool { window } => layers.push(Layer::Upsample { factor: window }),
            Layer::BatchNorm | Layer::Relu => {}
            ref other => {
                return Err(Error::spec(format!("cannot mirror layer kind {other}")));
            }
        }
    }
    if last_conv.is_none() {
        layers.push(Layer::Sigmoid);
    }
    let dec = ArchitectureSpec::new(Role::Decoder, enc.output_shape(), layers)?;
    if dec.output_shape() != enc.input_shape.as_slice() {
        return Err(Error::spec(format!(
            "mirrored decoder yields {:?}, encoder input is {:?}",
            dec.output_shape(),
            enc.input_shape
        )));
    }
    Ok(dec)
}

/// flatten -> dense(128) -> relu -> dense(num_classes).
pub fn build_classifier(feature_shape: &[usize], num_classes: usize) -> Result<ArchitectureSpec> {
    if num_classes < 2 {
        return Err(Error::spec(format!("classifier needs >= 2 classes, got {num_classes}")));
    }
    ArchitectureSpec::new(
        Role::Classifier,
        feature_shape,
        vec![Layer::Flatten, Layer::Dense { out_dim: 128 }, Layer::Relu, Layer::Dense { out_dim: num_classes }],
    )
}

/// Named parameter tensors plus per-layer batch-norm running statistics.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore<T: Scalar> {
    params: BTreeMap<String, Tensor<T>>,
    stats: BTreeMap<String, RunningStats<T>>,
}

impl<T: Scalar> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self { params: BTreeMap::new(), stats: BTreeMap::new() }
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor<T>) {
        self.params.insert(name.into(), t);
    }

    pub fn insert_stats(&mut self, layer: impl Into<String>, s: RunningStats<T>) {
        self.stats.insert(layer.into(), s);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.params.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.params.get_mut(name)
    }

    pub fn stats(&self, layer: &str) -> Option<&RunningStats<T>> {
        self.stats.get(layer)
    }

    pub fn stats_mut(&mut self, layer: &str) -> Option<&mut RunningStats<T>> {
        self.stats.get_mut(layer)
    }

    pub fn params(&self) -> impl Iterator<Item = (&String, &Tensor<T>)> {
        self.params.iter()
    }

    pub fn all_stats(&self) -> impl Iterator<Item = (&String, &RunningStats<T>)> {
        self.stats.iter()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty() && self.stats.is_empty()
    }

    pub fn names(&self) -> BTreeSet<String> {
        self.params.keys().cloned().collect()
    }

    pub fn names_in(&self, role: Role) -> BTreeSet<String> {
        self.params.keys().filter(|n| Role::of(n) == Some(role)).cloned().collect()
    }

    /// Copy of the parameters and statistics owned by `role`.
    pub fn subset(&self, role: Role) -> ParamStore<T> {
        ParamStore {
            params: self
                .params
                .iter()
                .filter(|(n, _)| Role::of(n) == Some(role))
                .map(|(n, t)| (n.clone(), t.clone()))
                .collect(),
            stats: self
                .stats
                .iter()
                .filter(|(n, _)| Role::of(n) == Some(role))
                .map(|(n, s)| (n.clone(), s.clone()))
                .collect(),
        }
    }

    /// Replace or add every entry of `other`.
    pub fn merge(&mut self, other: ParamStore<T>) {
        self.params.extend(other.params);
        self.stats.extend(other.stats);
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            params: self.params.iter().map(|(n, t)| (n.clone(), t.cast())).collect(),
            stats: self
                .stats
                .iter()
                .map(|(n, s)| {
                    let c = |v: &[T]| v.iter().map(|x| U::from_f64(x.to_f64().unwrap()).unwrap()).collect();
                    (n.clone(), RunningStats { mean: c(&s.mean), var: c(&s.var), updates: s.updates })
                })
                .collect(),
        }
    }

    /// Fold train-mode batch statistics into the running averages.
    pub fn apply_bn_updates(&mut self, updates: &[BnUpdate<T>]) {
        for u in updates {
            if let Some(s) = self.stats.get_mut(&u.layer) {
                s.absorb(&u.mean, &u.var, u.count);
            }
        }
    }
}

fn slot_stream(name: &str) -> u64 {
    // FNV-1a; stable across platforms and releases.
    name.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ b as u64).wrapping_mul(0x0100_0000_01b3))
}

/// Initialize every slot of `specs`. Each slot draws from its own ChaCha
/// stream keyed by name, so a slot's values depend only on (seed, name).
pub fn init_params<T: Scalar>(specs: &[&ArchitectureSpec], seed: u64) -> ParamStore<T> {
    let mut store = ParamStore::new();
    for spec in specs {
        for slot in spec.param_slots() {
            let t = match slot.init {
                Init::Zeros => Tensor::zeros(&slot.shape),
                Init::Ones => Tensor::ones(&slot.shape),
                Init::HeUniform { fan_in } => {
                    let bound = (6.0 / fan_in as f64).sqrt();
                    let mut rng = ChaCha8Rng::seed_from_u64(seed);
                    rng.set_stream(slot_stream(&slot.name));
                    Tensor::from_fn(&slot.shape, |_| T::lit((rng.random::<f64>() * 2.0 - 1.0) * bound))
                }
            };
            store.insert(slot.name, t);
        }
        for (layer, channels) in spec.batchnorm_layers() {
            store.insert_stats(layer, RunningStats::new(channels));
        }
    }
    store
}

/// Set the bias feeding a final sigmoid to the logit of `channel_means`, so an
/// untrained decoder starts at the average image instead of mid-grey.
/// Leaves the store untouched when `spec` does not end in a biased layer and a sigmoid.
pub fn calibrate_output_bias<T: Scalar>(
    store: &mut ParamStore<T>,
    spec: &ArchitectureSpec,
    channel_means: &[f64],
) -> Result<()> {
    let n = spec.layers.len();
    if n < 2 || spec.layers[n - 1].layer != Layer::Sigmoid {
        return Ok(());
    }
    let name = match spec.layers[n - 2].layer {
        Layer::TransposedConv { .. } | Layer::Dense { .. } | Layer::Conv { bias: true, .. } => {
            format!("{}.{}.bias", spec.role.prefix(), n - 2)
        }
        _ => return Ok(()),
    };
    let bias = store.get_mut(&name).ok_or_else(|| Error::contract(format!("parameter `{name}` is missing")))?;
    if bias.numel() != channel_means.len() {
        return Err(Error::dim(format!(
            "{} channel means for bias `{name}` of length {}",
            channel_means.len(),
            bias.numel()
        )));
    }
    for (b, &m) in bias.data_mut().iter_mut().zip(channel_means) {
        let m = m.clamp(1e-3, 1.0 - 1e-3);
        *b = T::lit((m / (1.0 - m)).ln());
    }
    Ok(())
}

/// Mean of each channel of an `[N, C, ...]` batch.
pub fn channel_means<T: Scalar>(images: &Tensor<T>) -> Vec<f64> {
    let shape = images.shape();
    if shape.len() < 2 || shape[0] == 0 {
        return vec![0.0; shape.get(1).copied().unwrap_or(0)];
    }
    let c = shape[1];
    let plane: usize = shape[2..].iter().product();
    let mut sums = vec![0.0; c];
    for (i, v) in images.data().iter().enumerate() {
        sums[(i / plane) % c] += v.to_f64().unwrap();
    }
    let count = (shape[0] * plane) as f64;
    sums.into_iter().map(|s| s / count).collect()
}

/// Whether batch-norm uses batch statistics or running statistics.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Infer,
}

/// Batch statistics produced by a train-mode batch-norm layer.
#[derive(Clone, Debug)]
pub struct BnUpdate<T> {
    pub layer: String,
    pub mean: Vec<T>,
    pub var: Vec<T>,
    pub count: usize,
}

/// Parameters of one network placed on a tape.
pub struct Bound {
    vars: BTreeMap<String, Var>,
}

impl Bound {
    /// Bind existing tape variables by parameter name.
    pub fn from_pairs(pairs: impl IntoIterator<Item = (String, Var)>) -> Self {
        Self { vars: pairs.into_iter().collect() }
    }

    pub fn var(&self, name: &str) -> Result<Var> {
        self.vars.get(name).copied().ok_or_else(|| Error::contract(format!("parameter `{name}` is not bound")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }
}

/// Place the parameters `spec` needs on `tape`, as tracked leaves when
/// `trainable`, otherwise as constants.
pub fn bind<T: Scalar>(
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    spec: &ArchitectureSpec,
    trainable: bool,
) -> Result<Bound> {
    let mut vars = BTreeMap::new();
    for slot in spec.param_slots() {
        let t = store.get(&slot.name).ok_or_else(|| Error::contract(format!("missing parameter `{}`", slot.name)))?;
        if t.shape() != slot.shape.as_slice() {
            return Err(Error::dim(format!(
                "parameter `{}` has shape {:?}, expected {:?}",
                slot.name,
                t.shape(),
                slot.shape
            )));
        }
        let v = if trainable { tape.leaf(t.clone()) } else { tape.constant(t.clone()) };
        vars.insert(slot.name, v);
    }
    Ok(Bound { vars })
}

/// Output node of a forward pass plus any batch statistics to fold in.
pub struct Forward<T> {
    pub out: Var,
    pub bn_updates: Vec<BnUpdate<T>>,
}

/// Run `spec` on `input` (N, ...) with parameters already bound.
pub fn forward<T: Scalar>(
    spec: &ArchitectureSpec,
    tape: &mut Tape<T>,
    bound: &Bound,
    store: &ParamStore<T>,
    input: Var,
    mode: Mode,
) -> Result<Forward<T>> {
    let shape = tape.value(input).shape();
    if shape.len() != spec.input_shape.len() + 1 || shape[1..] != spec.input_shape[..] {
        return Err(Error::dim(format!(
            "{} expects per-sample shape {:?}, got batch shape {shape:?}",
            spec.role.prefix(),
            spec.input_shape
        )));
    }
    let p = spec.role.prefix();
    let mut x = input;
    let mut bn_updates = Vec::new();
    for (i, l) in spec.layers.iter().enumerate() {
        x = match l.layer {
            Layer::Conv { stride, pad, bias, .. } => {
                let y = tape.conv2d(x, bound.var(&format!("{p}.{i}.weight"))?, stride, pad)?;
                if bias {
                    tape.add_bias(y, bound.var(&format!("{p}.{i}.bias"))?)?
                } else {
                    y
                }
            }
            Layer::TransposedConv { stride, pad, .. } => {
                let (oh, ow) = (l.output_shape[1], l.output_shape[2]);
                let y = tape.conv_transpose2d(x, bound.var(&format!("{p}.{i}.weight"))?, stride, pad, oh, ow)?;
                tape.add_bias(y, bound.var(&format!("{p}.{i}.bias"))?)?
            }
            Layer::Dense { .. } => {
                let y = tape.linear(x, bound.var(&format!("{p}.{i}.weight"))?)?;
                tape.add_bias(y, bound.var(&format!("{p}.{i}.bias"))?)?
            }
            Layer::BatchNorm => {
                let gamma = bound.var(&format!("{p}.{i}.gamma"))?;
                let beta = bound.var(&format!("{p}.{i}.beta"))?;
                let layer = format!("{p}.{i}");
                match mode {
                    Mode::Train => {
                        let o = tape.batchnorm_train(x, gamma, beta)?;
                        bn_updates.push(BnUpdate { layer, mean: o.batch_mean, var: o.batch_var, count: o.count });
                        o.out
                    }
                    Mode::Infer => {
                        let stats = store.stats(&layer).ok_or_else(|| Error::UninitializedStats(layer.clone()))?;
                        tape.batchnorm_infer(x, gamma, beta, stats, &layer)?
                    }
                }
            }
            Layer::Relu => tape.relu(x),
            Layer::Sigmoid => tape.sigmoid(x),
            Layer::MaxPool { window } => tape.maxpool2d(x, window)?,
            Layer::Upsample { factor } => tape.upsample(x, factor)?,
            Layer::Flatten => tape.flatten(x)?,
        };
    }
    Ok(Forward { out: x, bn_updates })
}

/// Encoder, mirrored Decoder and Classifier for one task.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RanArchitecture {
    pub encoder: ArchitectureSpec,
    pub decoder: ArchitectureSpec,
    pub classifier: ArchitectureSpec,
}

impl RanArchitecture {
    pub fn new(input_shape: &[usize], num_classes: usize, preset: Preset) -> Result<Self> {
        let encoder = build_encoder(input_shape, preset)?;
        let decoder = mirror_decoder(&encoder)?;
        let classifier = build_classifier(encoder.output_shape(), num_classes)?;
        Ok(Self { encoder, decoder, classifier })
    }

    pub fn spec(&self, role: Role) -> &ArchitectureSpec {
        match role {
            Role::Encoder => &self.encoder,
            Role::Decoder => &self.decoder,
            Role::Classifier => &self.classifier,
        }
    }

    pub fn init<T: Scalar>(&self, seed: u64) -> ParamStore<T> {
        init_params(&[&self.encoder, &self.decoder, &self.classifier], seed)
    }
}

/// Run one network outside any training step and return its output value.
/// Train mode folds batch statistics into `store`; infer mode leaves it as is.
fn run_untracked<T: Scalar>(
    spec: &ArchitectureSpec,
    store: &ParamStore<T>,
    input: &Tensor<T>,
    mode: Mode,
) -> Result<(Tensor<T>, Vec<BnUpdate<T>>)> {
    let mut tape = Tape::new();
    let bound = bind(&mut tape, store, spec, false)?;
    let x = tape.constant(input.clone());
    let f = forward(spec, &mut tape, &bound, store, x, mode)?;
    Ok((tape.value(f.out).clone(), f.bn_updates))
}

/// Features E(I).
pub fn forward_encoder<T: Scalar>(
    arch: &RanArchitecture,
    store: &mut ParamStore<T>,
    input: &Tensor<T>,
    mode: Mode,
) -> Result<Tensor<T>> {
    let (out, updates) = run_untracked(&arch.encoder, store, input, mode)?;
    store.apply_bn_updates(&updates);
    Ok(out)
}

/// Reconstruction D(features), in [0, 1].
pub fn forward_decoder<T: Scalar>(
    arch: &RanArchitecture,
    store: &ParamStore<T>,
    features: &Tensor<T>,
) -> Result<Tensor<T>> {
    Ok(run_untracked(&arch.decoder, store, features, Mode::Infer)?.0)
}

/// Class logits C(features).
pub fn forward_classifier<T: Scalar>(
    arch: &RanArchitecture,
    store: &ParamStore<T>,
    features: &Tensor<T>,
) -> Result<Tensor<T>> {
    Ok(run_untracked(&arch.classifier, store, features, Mode::Infer)?.0)
}

/// Run `spec` in infer mode over `input` in chunks of `chunk` samples.
pub fn infer_batched<T: Scalar>(
    spec: &ArchitectureSpec,
    store: &ParamStore<T>,
    input: &Tensor<T>,
    chunk: usize,
) -> Result<Tensor<T>> {
    let n = input.shape()[0];
    let mut parts = Vec::new();
    let mut start = 0;
    while start < n {
        let end = (start + chunk.max(1)).min(n);
        parts.push(run_untracked(spec, store, &input.slice_rows(start, end), Mode::Infer)?.0);
        start = end;
    }
    Tensor::concat_rows(&parts)
}
