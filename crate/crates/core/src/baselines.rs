//! Comparison methods: Laplace-noised raw data, plain deep features, and
//! PCA-reduced noisy deep features.

use std::time::Instant;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::attack::{
    privacy_score, privacy_score_on_features, train_attacker, train_attacker_on_features, AttackConfig, FrozenEncoder,
    PrivacyReport,
};
use crate::data::LabeledDataset;
use crate::error::{Error, Result};
use crate::kernels::{gemm, MatRef};
use crate::nn::{build_classifier, infer_batched, mirror_decoder, ParamStore, RanArchitecture};
use crate::tensor::{Scalar, Tensor};
use crate::train::{evaluate_accuracy, fit_classifier, train_classifier, FitConfig, TrainConfig, TrainTrace};

/// Width of the input range that noise factors are scaled by.
pub const DATA_RANGE: f64 = 1.0;

/// Noise factors and their mapping to Laplace scales.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseFactorGrid {
    pub factors: Vec<f64>,
}

impl Default for NoiseFactorGrid {
    fn default() -> Self {
        Self { factors: (1..=9).map(|i| i as f64 / 10.0).collect() }
    }
}

impl NoiseFactorGrid {
    pub fn new(factors: Vec<f64>) -> Result<Self> {
        if factors.is_empty() {
            return Err(Error::config("noise grid is empty"));
        }
        if let Some(f) = factors.iter().find(|f| !(f.is_finite() && **f > 0.0)) {
            return Err(Error::config(format!("noise factors must be positive, got {f}")));
        }
        Ok(Self { factors })
    }

    /// Laplace scale `b` for a factor.
    pub fn scale(factor: f64) -> f64 {
        factor * DATA_RANGE
    }
}

/// Independent seed for one purpose derived from a base seed.
pub fn derive_seed(seed: u64, purpose: u64) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(purpose.wrapping_add(0x6c61_706c));
    rng.next_u64()
}

/// Uniform draw strictly inside (0, 1).
fn open_unit(rng: &mut ChaCha8Rng) -> f64 {
    ((rng.next_u64() >> 11) as f64 + 0.5) / (1u64 << 53) as f64
}

/// One Laplace(0, b) draw by inverting the CDF.
pub fn laplace_draw(rng: &mut ChaCha8Rng, b: f64) -> f64 {
    let u = open_unit(rng);
    if u < 0.5 {
        b * (2.0 * u).ln()
    } else {
        -b * (2.0 * (1.0 - u)).ln()
    }
}

/// `x + L` with L i.i.d. Laplace(0, b). Row `i` draws from its own ChaCha
/// stream, so a sample's noise does not depend on the other samples.
pub fn laplace_noise_raw<T: Scalar>(x: &Tensor<T>, b: f64, seed: u64) -> Result<Tensor<T>> {
    if !(b.is_finite() && b > 0.0) {
        return Err(Error::config(format!("Laplace scale must be positive, got {b}")));
    }
    let n = x.shape().first().copied().unwrap_or(1).max(1);
    let row = x.numel() / n;
    let mut out = x.clone();
    for (i, chunk) in out.data_mut().chunks_mut(row.max(1)).enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(i as u64);
        for v in chunk {
            *v = T::lit(v.to_f64().unwrap() + laplace_draw(&mut rng, b));
        }
    }
    Ok(out)
}

/// [`laplace_noise_raw`] clamped to the image range [0, 1].
pub fn laplace_noise<T: Scalar>(x: &Tensor<T>, b: f64, seed: u64) -> Result<Tensor<T>> {
    Ok(laplace_noise_raw(x, b, seed)?.map(|v| v.max(T::zero()).min(T::one())))
}

/// Mean per-element squared difference.
pub fn information_loss(a: &Tensor<f32>, b: &Tensor<f32>) -> Result<f64> {
    a.expect_same_shape(b)?;
    let s: f64 = a.data().iter().zip(b.data()).map(|(&x, &y)| (x as f64 - y as f64).powi(2)).sum();
    Ok(s / a.numel() as f64)
}

/// Eigenvalues (descending) and matching unit eigenvectors (rows) of a
/// symmetric `n x n` matrix, by cyclic Jacobi rotations.
pub fn symmetric_eigen(matrix: &[f64], n: usize) -> Result<(Vec<f64>, Vec<f64>)> {
    if matrix.len() != n * n {
        return Err(Error::dim(format!("expected {n}x{n} matrix, got {} entries", matrix.len())));
    }
    let mut a = matrix.to_vec();
    // rows of `v` are eigenvectors
    let mut v = vec![0.0; n * n];
    for i in 0..n {
        v[i * n + i] = 1.0;
    }
    let fro: f64 = a.iter().map(|x| x * x).sum();
    for _sweep in 0..100 {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| a[i * n + j].powi(2))
            .sum();
        if off <= 1e-30 * fro || off == 0.0 {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = a[p * n + q];
                if apq == 0.0 {
                    continue;
                }
                let (app, aqq) = (a[p * n + p], a[q * n + q]);
                let theta = (aqq - app) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let (akp, akq) = (a[p * n + k], a[q * n + k]);
                    a[p * n + k] = c * akp - s * akq;
                    a[q * n + k] = s * akp + c * akq;
                }
                for k in 0..n {
                    let (akp, akq) = (a[k * n + p], a[k * n + q]);
                    a[k * n + p] = c * akp - s * akq;
                    a[k * n + q] = s * akp + c * akq;
                }
                a[p * n + q] = 0.0;
                a[q * n + p] = 0.0;
                let (vp, vq) = (p * n, q * n);
                for k in 0..n {
                    let (x, y) = (v[vp + k], v[vq + k]);
                    v[vp + k] = c * x - s * y;
                    v[vq + k] = s * x + c * y;
                }
            }
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| a[j * n + j].total_cmp(&a[i * n + i]).then(i.cmp(&j)));
    let values = order.iter().map(|&i| a[i * n + i]).collect();
    let mut vectors = Vec::with_capacity(n * n);
    for &i in &order {
        let row = &v[i * n..(i + 1) * n];
        // sign convention: largest-magnitude component positive
        let lead = row.iter().copied().fold(0.0f64, |m, x| if x.abs() > m.abs() { x } else { m });
        let sign = if lead < 0.0 { -1.0 } else { 1.0 };
        vectors.extend(row.iter().map(|x| x * sign));
    }
    Ok((values, vectors))
}

/// Centered projection onto the leading principal axes.
#[derive(Clone, Debug, PartialEq)]
pub struct PcaProjection {
    pub mean: Vec<f64>,
    /// `d` orthonormal rows of length `dim`.
    pub axes: Vec<f64>,
    pub explained_variance: Vec<f64>,
    pub explained_ratio: Vec<f64>,
    pub dim: usize,
    pub d: usize,
}

fn as_rows(x: &Tensor<f64>) -> Result<(usize, usize)> {
    if x.rank() < 2 {
        return Err(Error::dim(format!("expected a batch of vectors, got {:?}", x.shape())));
    }
    Ok((x.shape()[0], x.numel() / x.shape()[0]))
}

/// Fit on rows of `x` (trailing axes are flattened).
pub fn pca_fit(x: &Tensor<f64>, d: usize) -> Result<PcaProjection> {
    let (n, dim) = as_rows(x)?;
    if d == 0 || d > dim {
        return Err(Error::config(format!("PCA target dimension {d} outside 1..={dim}")));
    }
    if n < 2 {
        return Err(Error::config("PCA needs at least two samples"));
    }
    let data = x.data();
    let mut mean = vec![0.0; dim];
    for row in data.chunks(dim) {
        for (m, v) in mean.iter_mut().zip(row) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let centered: Vec<f64> = data.chunks(dim).flat_map(|row| row.iter().zip(&mean).map(|(v, m)| v - m)).collect();
    let mut cov = vec![0.0; dim * dim];
    gemm(dim, n, dim, MatRef::t(&centered, dim), MatRef::rows(&centered, dim), 0.0, &mut cov, dim);
    cov.iter_mut().for_each(|c| *c /= (n - 1) as f64);
    // symmetrize away rounding asymmetry
    for i in 0..dim {
        for j in i + 1..dim {
            let s = 0.5 * (cov[i * dim + j] + cov[j * dim + i]);
            cov[i * dim + j] = s;
            cov[j * dim + i] = s;
        }
    }
    let (values, vectors) = symmetric_eigen(&cov, dim)?;
    let total: f64 = values.iter().map(|v| v.max(0.0)).sum();
    let explained_variance: Vec<f64> = values[..d].iter().map(|v| v.max(0.0)).collect();
    let explained_ratio = explained_variance.iter().map(|v| if total > 0.0 { v / total } else { 0.0 }).collect();
    Ok(PcaProjection { mean, axes: vectors[..d * dim].to_vec(), explained_variance, explained_ratio, dim, d })
}

/// Reduced coordinates `(x - mean) . axes^T`, shape `[n, d]`.
pub fn pca_transform(proj: &PcaProjection, x: &Tensor<f64>) -> Result<Tensor<f64>> {
    let (n, dim) = as_rows(x)?;
    if dim != proj.dim {
        return Err(Error::dim(format!("PCA fitted on {} dims, got {dim}", proj.dim)));
    }
    let centered: Vec<f64> =
        x.data().chunks(dim).flat_map(|row| row.iter().zip(&proj.mean).map(|(v, m)| v - m)).collect();
    let mut out = vec![0.0; n * proj.d];
    gemm(n, dim, proj.d, MatRef::rows(&centered, dim), MatRef::t(&proj.axes, dim), 0.0, &mut out, proj.d);
    Tensor::new(&[n, proj.d], out)
}

/// Map reduced coordinates back to the original space, shape `[n, dim]`.
pub fn pca_inverse(proj: &PcaProjection, reduced: &Tensor<f64>) -> Result<Tensor<f64>> {
    let (n, d) = as_rows(reduced)?;
    if d != proj.d {
        return Err(Error::dim(format!("PCA has {} components, got {d}", proj.d)));
    }
    let mut out = vec![0.0; n * proj.dim];
    gemm(n, d, proj.dim, MatRef::rows(reduced.data(), d), MatRef::rows(&proj.axes, proj.dim), 0.0, &mut out, proj.dim);
    for row in out.chunks_mut(proj.dim) {
        for (v, m) in row.iter_mut().zip(&proj.mean) {
            *v += m;
        }
    }
    Tensor::new(&[n, proj.dim], out)
}

/// Default PCA target: a quarter of the feature dimension.
pub fn default_pca_dim(dim: usize) -> usize {
    (dim / 4).max(1)
}

fn with_images(data: &LabeledDataset, images: Tensor<f32>) -> LabeledDataset {
    LabeledDataset { images, ..data.clone() }
}

/// One noise level of the Noisy baseline.
#[derive(Clone, Debug, PartialEq)]
pub struct NoisyPoint {
    pub factor: f64,
    pub scale: f64,
    pub accuracy: f64,
    /// |I - I'|^2 per element on the test split, after clamping.
    pub info_loss: f64,
    /// The same before clamping.
    pub info_loss_raw: f64,
    pub seconds: f64,
}

/// For each factor, train encoder and classifier on noised training images
/// and test them on noised test images.
pub fn run_noisy_baseline(
    train: &LabeledDataset,
    test: &LabeledDataset,
    arch: &RanArchitecture,
    grid: &NoiseFactorGrid,
    config: &TrainConfig,
    observer: &mut dyn FnMut(&NoisyPoint),
) -> Result<Vec<NoisyPoint>> {
    let grid = NoiseFactorGrid::new(grid.factors.clone())?;
    let mut points = Vec::with_capacity(grid.factors.len());
    for &factor in &grid.factors {
        let start = Instant::now();
        let b = NoiseFactorGrid::scale(factor);
        let noisy_train = with_images(train, laplace_noise(&train.images, b, derive_seed(config.seed, 1))?);
        let raw_test = laplace_noise_raw(&test.images, b, derive_seed(config.seed, 2))?;
        let noisy_test = with_images(test, raw_test.map(|v| v.clamp(0.0, 1.0)));
        let (store, _) = train_classifier::<f32>(&noisy_train, arch, config, &mut |_| {})?;
        let point = NoisyPoint {
            factor,
            scale: b,
            accuracy: evaluate_accuracy(arch, &store, &noisy_test)?,
            info_loss: information_loss(&test.images, &noisy_test.images)?,
            info_loss_raw: information_loss(&test.images, &raw_test)?,
            seconds: start.elapsed().as_secs_f64(),
        };
        observer(&point);
        points.push(point);
    }
    Ok(points)
}

/// An encoder/classifier pair scored for utility and privacy.
#[derive(Clone, Debug)]
pub struct EncoderRun {
    pub store: ParamStore<f32>,
    pub trace: TrainTrace,
    pub accuracy: f64,
    pub privacy: PrivacyReport,
    pub train_seconds: f64,
    pub seconds: f64,
}

/// Test accuracy plus a fresh attacker's reconstruction error for a trained
/// encoder.
pub fn assess_encoder(
    arch: &RanArchitecture,
    store: &ParamStore<f32>,
    train: &LabeledDataset,
    test: &LabeledDataset,
    attack: &AttackConfig,
) -> Result<(f64, PrivacyReport)> {
    let accuracy = evaluate_accuracy(arch, store, test)?;
    let frozen = FrozenEncoder::from_trained(&arch.encoder, store)?;
    let attacker = train_attacker(&frozen, train, attack)?;
    Ok((accuracy, privacy_score(&attacker, &frozen, test)?))
}

/// Encoder and classifier trained with cross-entropy only.
pub fn run_dnn_baseline(
    train: &LabeledDataset,
    test: &LabeledDataset,
    arch: &RanArchitecture,
    config: &TrainConfig,
    attack: &AttackConfig,
    observer: &mut dyn FnMut(&crate::train::EpochRecord),
) -> Result<EncoderRun> {
    let start = Instant::now();
    let (store, trace) = train_classifier::<f32>(train, arch, config, observer)?;
    let train_seconds = start.elapsed().as_secs_f64();
    let (accuracy, privacy) = assess_encoder(arch, &store, train, test, attack)?;
    Ok(EncoderRun { store, trace, accuracy, privacy, train_seconds, seconds: start.elapsed().as_secs_f64() })
}

/// One noise level of the DNN(resized) baseline.
#[derive(Clone, Debug, PartialEq)]
pub struct ResizedPoint {
    pub factor: f64,
    pub scale: f64,
    pub accuracy: f64,
    pub privacy: PrivacyReport,
    pub seconds: f64,
}

fn flat_f64(x: &Tensor<f32>) -> Result<Tensor<f64>> {
    let n = x.shape()[0];
    x.cast::<f64>().reshape(&[n, x.numel() / n])
}

/// PCA-reduce the DNN encoder's features to `d` dimensions, add Laplace
/// noise per factor, then train a fresh classifier and a fresh attacker on
/// the perturbed features. The attacker sees the PCA reconstruction of the
/// perturbed features in the encoder's feature shape.
#[allow(clippy::too_many_arguments)]
pub fn run_dnn_resized_baseline(
    train: &LabeledDataset,
    test: &LabeledDataset,
    arch: &RanArchitecture,
    dnn: &ParamStore<f32>,
    grid: &NoiseFactorGrid,
    d: Option<usize>,
    config: &TrainConfig,
    attack: &AttackConfig,
    observer: &mut dyn FnMut(&ResizedPoint),
) -> Result<(PcaProjection, Vec<ResizedPoint>)> {
    let grid = NoiseFactorGrid::new(grid.factors.clone())?;
    let feat_train = infer_batched(&arch.encoder, dnn, &train.images, crate::attack::EVAL_CHUNK)?;
    let feat_test = infer_batched(&arch.encoder, dnn, &test.images, crate::attack::EVAL_CHUNK)?;
    let (flat_train, flat_test) = (flat_f64(&feat_train)?, flat_f64(&feat_test)?);
    let dim = flat_train.shape()[1];
    let d = d.unwrap_or_else(|| default_pca_dim(dim));
    let proj = pca_fit(&flat_train, d)?;
    let red_train = pca_transform(&proj, &flat_train)?;
    let red_test = pca_transform(&proj, &flat_test)?;

    let classifier = build_classifier(&[d], train.num_classes)?;
    let decoder = mirror_decoder(&arch.encoder)?;
    let feature_shape = arch.encoder.output_shape().to_vec();
    let to_features = |reduced: &Tensor<f64>| -> Result<Tensor<f32>> {
        let n = reduced.shape()[0];
        let mut shape = vec![n];
        shape.extend_from_slice(&feature_shape);
        pca_inverse(&proj, reduced)?.cast::<f32>().reshape(&shape)
    };
    let fit = FitConfig {
        epochs: config.epochs,
        batch_size: config.batch_size,
        lr: config.lr_disc,
        seed: config.seed,
        clip_norm: config.clip_norm,
        zero_init: false,
    };

    let mut points = Vec::with_capacity(grid.factors.len());
    for &factor in &grid.factors {
        let start = Instant::now();
        let b = NoiseFactorGrid::scale(factor);
        let noisy_train = laplace_noise_raw(&red_train, b, derive_seed(config.seed, 3))?;
        let noisy_test = laplace_noise_raw(&red_test, b, derive_seed(config.seed, 4))?;
        let params = fit_classifier(&classifier, &noisy_train.cast(), &train.labels, &fit)?;
        let logits = infer_batched(&classifier, &params, &noisy_test.cast(), crate::attack::EVAL_CHUNK)?;
        let accuracy = crate::attack::accuracy(&logits, &test.labels);
        let attacker = train_attacker_on_features(&decoder, &to_features(&noisy_train)?, &train.images, attack)?;
        let privacy = privacy_score_on_features(&attacker, &to_features(&noisy_test)?, &test.images)?;
        let point = ResizedPoint { factor, scale: b, accuracy, privacy, seconds: start.elapsed().as_secs_f64() };
        observer(&point);
        points.push(point);
    }
    Ok((proj, points))
}
