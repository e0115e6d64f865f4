//! Feature-inversion attacker: an independent decoder trained against a
//! frozen encoder that it can only query, plus privacy and utility scores.

use std::fmt;

use crate::autodiff::Tape;
use crate::data::LabeledDataset;
use crate::error::{Error, Result};
use crate::kernels::loss::Reduction;
use crate::nn::{
    bind, calibrate_output_bias, channel_means, forward, infer_batched, init_params, mirror_decoder, ArchitectureSpec,
    Mode, ParamStore, Role,
};
use crate::objectives::generative_loss;
use crate::optim::{clip_global_norm, AdamState, BatchPlan, NamedGrads};
use crate::tensor::Tensor;
use crate::train::argmax_rows;

/// Rows evaluated per forward call when running over a whole split.
pub const EVAL_CHUNK: usize = 500;
/// Floor applied to the MSE before taking its natural log.
pub const MSE_FLOOR: f64 = 1e-12;

type FeatureFn = dyn Fn(&Tensor<f32>) -> Result<Tensor<f32>> + Send + Sync;

/// An encoder exposed only as an input to output mapping.
pub struct FrozenEncoder {
    input_shape: Vec<usize>,
    feature_shape: Vec<usize>,
    spec: Option<ArchitectureSpec>,
    map: Box<FeatureFn>,
}

impl fmt::Debug for FrozenEncoder {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("FrozenEncoder")
            .field("input_shape", &self.input_shape)
            .field("feature_shape", &self.feature_shape)
            .finish_non_exhaustive()
    }
}

impl FrozenEncoder {
    /// Wrap trained encoder parameters; evaluation always uses infer mode.
    pub fn from_trained(spec: &ArchitectureSpec, store: &ParamStore<f32>) -> Result<Self> {
        let params = store.subset(Role::Encoder);
        for (layer, _) in spec.batchnorm_layers() {
            if !params.stats(&layer).is_some_and(|s| s.is_initialized()) {
                return Err(Error::UninitializedStats(layer));
            }
        }
        let net = spec.clone();
        Ok(Self {
            input_shape: spec.input_shape.clone(),
            feature_shape: spec.output_shape().to_vec(),
            spec: Some(spec.clone()),
            map: Box::new(move |x| infer_batched(&net, &params, x, EVAL_CHUNK)),
        })
    }

    /// Any deterministic function with declared input and feature shapes.
    pub fn from_fn(
        input_shape: &[usize],
        feature_shape: &[usize],
        f: impl Fn(&Tensor<f32>) -> Result<Tensor<f32>> + Send + Sync + 'static,
    ) -> Self {
        Self { input_shape: input_shape.to_vec(), feature_shape: feature_shape.to_vec(), spec: None, map: Box::new(f) }
    }

    pub fn identity(shape: &[usize]) -> Self {
        Self::from_fn(shape, shape, |x| Ok(x.clone()))
    }

    /// Maps every input to all-zero features.
    pub fn constant(input_shape: &[usize], feature_shape: &[usize]) -> Self {
        let fs = feature_shape.to_vec();
        Self::from_fn(input_shape, feature_shape, move |x| {
            let mut shape = vec![x.shape()[0]];
            shape.extend_from_slice(&fs);
            Ok(Tensor::zeros(&shape))
        })
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    pub fn feature_shape(&self) -> &[usize] {
        &self.feature_shape
    }

    /// Architecture of the wrapped encoder, when it was built from one.
    pub fn spec(&self) -> Option<&ArchitectureSpec> {
        self.spec.as_ref()
    }

    pub fn encode(&self, images: &Tensor<f32>) -> Result<Tensor<f32>> {
        if images.rank() == 0 || images.shape()[1..] != self.input_shape[..] {
            return Err(Error::dim(format!(
                "frozen encoder takes per-sample shape {:?}, got batch {:?}",
                self.input_shape,
                images.shape()
            )));
        }
        let out = (self.map)(images)?;
        if out.shape()[0] != images.shape()[0] || out.shape()[1..] != self.feature_shape[..] {
            return Err(Error::dim(format!(
                "declared feature shape {:?} but encoder produced {:?}",
                self.feature_shape,
                out.shape()
            )));
        }
        Ok(out)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AttackConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub clip_norm: Option<f64>,
    /// Decoder to train; defaults to the mirror of the encoder's spec.
    pub decoder: Option<ArchitectureSpec>,
}

impl Default for AttackConfig {
    fn default() -> Self {
        Self { epochs: 10, lr: 1e-3, batch_size: 64, seed: 42, clip_norm: None, decoder: None }
    }
}

/// A trained attacker decoder.
#[derive(Clone, Debug)]
pub struct Attacker {
    pub spec: ArchitectureSpec,
    pub params: ParamStore<f32>,
    /// Mean training MSE per epoch.
    pub epoch_losses: Vec<f64>,
}

impl Attacker {
    pub fn reconstruct(&self, features: &Tensor<f32>) -> Result<Tensor<f32>> {
        infer_batched(&self.spec, &self.params, features, EVAL_CHUNK)
    }
}

/// Train a decoder to invert `frozen` from (E(I), I) pairs of `train`.
pub fn train_attacker(frozen: &FrozenEncoder, train: &LabeledDataset, config: &AttackConfig) -> Result<Attacker> {
    let spec = match (&config.decoder, frozen.spec()) {
        (Some(d), _) => d.clone(),
        (None, Some(enc)) => mirror_decoder(enc)?,
        (None, None) => return Err(Error::config("attacker needs a decoder spec for an encoder without one")),
    };
    if spec.input_shape != frozen.feature_shape() {
        return Err(Error::dim(format!(
            "attacker decoder takes {:?} but features are {:?}",
            spec.input_shape,
            frozen.feature_shape()
        )));
    }
    let features = frozen.encode(&train.images)?;
    train_attacker_on_features(&spec, &features, &train.images, config)
}

/// Train decoder `spec` to map `features` back to `images`.
pub fn train_attacker_on_features(
    spec: &ArchitectureSpec,
    features: &Tensor<f32>,
    images: &Tensor<f32>,
    config: &AttackConfig,
) -> Result<Attacker> {
    if features.shape()[1..] != spec.input_shape[..] {
        return Err(Error::dim(format!(
            "attacker decoder takes {:?} but features are {:?}",
            spec.input_shape,
            features.shape()
        )));
    }
    if images.shape()[1..] != *spec.output_shape() {
        return Err(Error::dim(format!(
            "attacker decoder emits {:?} but images are {:?}",
            spec.output_shape(),
            images.shape()
        )));
    }
    let n = images.shape()[0];
    if features.shape()[0] != n {
        return Err(Error::dim(format!("{} feature rows for {n} images", features.shape()[0])));
    }
    let mut params: ParamStore<f32> = init_params(&[spec], config.seed);
    calibrate_output_bias(&mut params, spec, &channel_means(images))?;
    let mut adam = AdamState::new(config.lr);
    let subset = params.names();
    let mut epoch_losses = Vec::with_capacity(config.epochs);
    for epoch in 1..=config.epochs {
        let plan = BatchPlan::new(n, config.batch_size, config.seed, epoch)?;
        let mut total = 0.0;
        for (step, idx) in plan.batches().enumerate() {
            let mut tape = Tape::new();
            let bound = bind(&mut tape, &params, spec, true)?;
            let f = tape.constant(features.select_rows(idx));
            let x = tape.constant(images.select_rows(idx));
            let recon = forward(spec, &mut tape, &bound, &params, f, Mode::Train)?.out;
            let loss = generative_loss(&mut tape, x, recon, Reduction::Mean)?;
            let value = loss.value(&tape);
            if !value.is_finite() {
                return Err(Error::NonFinite { what: "attacker MSE".into(), epoch, step: step + 1 });
            }
            total += value;
            let grads = tape.backward(loss.var)?;
            let mut named: NamedGrads<f32> = bound.iter().map(|(n, &v)| (n.clone(), grads.get(v))).collect();
            if let Some(n) = named.keys().find(|n| Role::of(n) == Some(Role::Encoder)) {
                return Err(Error::contract(format!("attacker gradient reached encoder slot `{n}`")));
            }
            if let Some(c) = config.clip_norm {
                clip_global_norm(&mut named, c);
            }
            adam.step(&mut params, &named, &subset)?;
        }
        epoch_losses.push(total / plan.num_batches() as f64);
    }
    Ok(Attacker { spec: spec.clone(), params, epoch_losses })
}

/// Reconstruction error of an attacker on held-out data.
#[derive(Clone, Debug, PartialEq)]
pub struct PrivacyReport {
    /// Mean per-element squared error.
    pub mse: f64,
    /// Natural log of `max(mse, 1e-12)`.
    pub ln_mse: f64,
    pub p10: f64,
    pub p50: f64,
    pub p90: f64,
}

/// Linear-interpolated quantile of sorted values.
fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let (lo, hi) = (pos.floor() as usize, pos.ceil() as usize);
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// Summarize per-sample MSEs. Summation runs over the sorted values, so the
/// result does not depend on sample order.
pub fn privacy_from_per_sample(per_sample: &[f64]) -> Result<PrivacyReport> {
    if per_sample.is_empty() {
        return Err(Error::Empty("test set"));
    }
    let mut sorted = per_sample.to_vec();
    sorted.sort_by(f64::total_cmp);
    let mse = sorted.iter().sum::<f64>() / sorted.len() as f64;
    Ok(PrivacyReport {
        mse,
        ln_mse: mse.max(MSE_FLOOR).ln(),
        p10: quantile(&sorted, 0.1),
        p50: quantile(&sorted, 0.5),
        p90: quantile(&sorted, 0.9),
    })
}

/// Mean squared error of each sample (row) between two equally shaped batches.
pub fn per_sample_mse(original: &Tensor<f32>, reconstruction: &Tensor<f32>) -> Result<Vec<f64>> {
    original.expect_same_shape(reconstruction)?;
    let n = original.shape()[0];
    let d = original.numel() / n.max(1);
    Ok(original
        .data()
        .chunks(d)
        .zip(reconstruction.data().chunks(d))
        .map(|(a, b)| a.iter().zip(b).map(|(&x, &y)| (x as f64 - y as f64).powi(2)).sum::<f64>() / d as f64)
        .collect())
}

pub fn privacy_score(attacker: &Attacker, frozen: &FrozenEncoder, test: &LabeledDataset) -> Result<PrivacyReport> {
    if test.is_empty() {
        return Err(Error::Empty("test set"));
    }
    privacy_score_on_features(attacker, &frozen.encode(&test.images)?, &test.images)
}

/// Score an attacker on precomputed features of `images`.
pub fn privacy_score_on_features(
    attacker: &Attacker,
    features: &Tensor<f32>,
    images: &Tensor<f32>,
) -> Result<PrivacyReport> {
    let recon = attacker.reconstruct(features)?;
    privacy_from_per_sample(&per_sample_mse(images, &recon)?)
}

/// Accuracy of a classifier that sees only frozen features. Ties in the
/// logits go to the lowest class index.
pub fn utility_score(
    classifier: &ArchitectureSpec,
    params: &ParamStore<f32>,
    frozen: &FrozenEncoder,
    test: &LabeledDataset,
) -> Result<f64> {
    if test.is_empty() {
        return Err(Error::Empty("test set"));
    }
    let logits = infer_batched(classifier, params, &frozen.encode(&test.images)?, EVAL_CHUNK)?;
    Ok(accuracy(&logits, &test.labels))
}

pub fn accuracy(logits: &Tensor<f32>, labels: &[usize]) -> f64 {
    let hits = argmax_rows(logits).iter().zip(labels).filter(|(p, l)| p == l).count();
    hits as f64 / labels.len() as f64
}
