//! Linear probes for a hidden attribute in frozen features, and the
//! synthetic glyph/texture experiment built on them.

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::attack::{accuracy, EVAL_CHUNK};
use crate::data::{generate_synthetic, LabeledDataset, SyntheticSpec};
use crate::error::{Error, Result};
use crate::nn::{infer_batched, ArchitectureSpec, Layer, Preset, RanArchitecture, Role};
use crate::tensor::Tensor;
use crate::train::{evaluate_accuracy, fit_classifier, train_classifier, train_ran, FitConfig, TrainConfig};

#[derive(Clone, Debug, PartialEq)]
pub struct ProbeConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self { epochs: 20, lr: 1e-2, batch_size: 64, seed: 7 }
    }
}

/// Held-out accuracy of a multinomial logistic regression predicting
/// `labels` from `features`. A seeded half of the rows trains the probe,
/// the other half scores it; features are standardized with the training
/// half's statistics.
pub fn nuisance_probe(features: &Tensor<f32>, labels: &[usize], config: &ProbeConfig) -> Result<f64> {
    let n = labels.len();
    if features.rank() == 0 || features.shape()[0] != n {
        return Err(Error::dim(format!("{n} labels for features of shape {:?}", features.shape())));
    }
    let distinct: BTreeSet<usize> = labels.iter().copied().collect();
    if distinct.len() < 2 {
        return Err(Error::config("probe labels contain a single class"));
    }
    if n < 4 {
        return Err(Error::config("probe needs at least 4 samples"));
    }
    let d = features.numel() / n;
    let flat = features.reshape(&[n, d])?;
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(config.seed));
    let (fit_idx, eval_idx) = order.split_at(n / 2);

    let mut train = flat.select_rows(fit_idx);
    let mut eval = flat.select_rows(eval_idx);
    let m = fit_idx.len() as f64;
    for j in 0..d {
        let col = train.data().iter().skip(j).step_by(d).map(|&v| v as f64);
        let mean = col.clone().sum::<f64>() / m;
        let var = col.map(|v| (v - mean).powi(2)).sum::<f64>() / m;
        let inv = if var > 1e-12 { 1.0 / var.sqrt() } else { 0.0 };
        for t in [&mut train, &mut eval] {
            for v in t.data_mut().iter_mut().skip(j).step_by(d) {
                *v = ((*v as f64 - mean) * inv) as f32;
            }
        }
    }

    let classes = distinct.last().unwrap() + 1;
    let spec = ArchitectureSpec::new(Role::Classifier, &[d], vec![Layer::Dense { out_dim: classes }])?;
    let fit_labels: Vec<usize> = fit_idx.iter().map(|&i| labels[i]).collect();
    let eval_labels: Vec<usize> = eval_idx.iter().map(|&i| labels[i]).collect();
    let fit = FitConfig {
        epochs: config.epochs,
        batch_size: config.batch_size.min(fit_labels.len()),
        lr: config.lr,
        seed: config.seed,
        clip_norm: None,
        zero_init: true,
    };
    let params = fit_classifier(&spec, &train, &fit_labels, &fit)?;
    let logits = infer_batched(&spec, &params, &eval, EVAL_CHUNK)?;
    Ok(accuracy(&logits, &eval_labels))
}

/// Sizes and schedule of the synthetic nuisance experiment.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbeExperiment {
    pub train_samples: usize,
    pub test_samples: usize,
    pub lambda: f64,
    pub train: TrainConfig,
    pub probe: ProbeConfig,
}

impl Default for ProbeExperiment {
    fn default() -> Self {
        Self {
            train_samples: 4000,
            test_samples: 2000,
            lambda: 0.5,
            train: TrainConfig::default(),
            probe: ProbeConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProbeOutcome {
    pub seed: u64,
    pub ran_accuracy: f64,
    pub dnn_accuracy: f64,
    pub ran_probe: f64,
    pub dnn_probe: f64,
    /// Probe on raw test pixels.
    pub raw_probe: f64,
}

fn test_features(
    arch: &RanArchitecture,
    store: &crate::nn::ParamStore<f32>,
    test: &LabeledDataset,
) -> Result<Tensor<f32>> {
    infer_batched(&arch.encoder, store, &test.images, EVAL_CHUNK)
}

/// Train RAN and a plain classifier on the synthetic training split (same
/// seed and schedule), then probe both encoders' test-split features for
/// the nuisance attribute.
pub fn run_probe_experiment(exp: &ProbeExperiment, seed: u64) -> Result<ProbeOutcome> {
    let train = generate_synthetic(&SyntheticSpec::train(exp.train_samples, seed))?;
    let test = generate_synthetic(&SyntheticSpec::test(exp.test_samples, seed))?;
    let nuisance = test.nuisance.clone().expect("synthetic data carries nuisance labels");
    let arch = RanArchitecture::new(train.sample_shape(), train.num_classes, Preset::MnistSmall)?;
    let cfg = TrainConfig { lambda: exp.lambda, seed, ..exp.train.clone() };
    let probe = ProbeConfig { seed: exp.probe.seed ^ seed, ..exp.probe.clone() };

    let (ran, _) = train_ran::<f32>(&train, &arch, &cfg, &mut |_| {})?;
    let (dnn, _) = train_classifier::<f32>(&train, &arch, &cfg, &mut |_| {})?;
    Ok(ProbeOutcome {
        seed,
        ran_accuracy: evaluate_accuracy(&arch, &ran, &test)?,
        dnn_accuracy: evaluate_accuracy(&arch, &dnn, &test)?,
        ran_probe: nuisance_probe(&test_features(&arch, &ran, &test)?, &nuisance, &probe)?,
        dnn_probe: nuisance_probe(&test_features(&arch, &dnn, &test)?, &nuisance, &probe)?,
        raw_probe: nuisance_probe(&test.images, &nuisance, &probe)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn single_class_is_config_error() {
        let f = Tensor::<f32>::zeros(&[10, 3]);
        assert!(matches!(nuisance_probe(&f, &[1; 10], &ProbeConfig::default()), Err(Error::Config(_))));
    }

    #[test]
    fn one_hot_features_are_perfect() {
        let labels: Vec<usize> = (0..200).map(|i| (i * 7 / 3) % 2).collect();
        let f = Tensor::from_fn(&[200, 2], |i| if labels[i / 2] == i % 2 { 1.0f32 } else { 0.0 });
        let acc = nuisance_probe(&f, &labels, &ProbeConfig::default()).unwrap();
        assert!(acc > 0.99, "{acc}");
    }

    #[test]
    fn noise_features_are_chance() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let labels: Vec<usize> = (0..4000).map(|_| rng.random_range(0..2)).collect();
        let f = Tensor::from_fn(&[4000, 8], |_| rng.random::<f32>());
        let acc = nuisance_probe(&f, &labels, &ProbeConfig::default()).unwrap();
        assert!((acc - 0.5).abs() < 0.03, "{acc}");
    }
}
