//! Per-channel batch normalization over (N, H, W). Channels live on axis 1;
//! any trailing axes are treated as spatial.

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.9;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BatchNormMode {
    Train,
    Infer,
}

/// Exponential moving averages of per-channel mean and variance.
#[derive(Clone, Debug, PartialEq)]
pub struct RunningStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
    /// Number of train-mode batches absorbed so far.
    pub updates: u64,
}

impl<T: Scalar> RunningStats<T> {
    pub fn new(channels: usize) -> Self {
        Self { mean: vec![T::zero(); channels], var: vec![T::one(); channels], updates: 0 }
    }

    pub fn is_initialized(&self) -> bool {
        self.updates > 0
    }

    /// `running = momentum * running + (1 - momentum) * batch`; the variance
    /// estimate is the unbiased one.
    pub fn absorb(&mut self, batch_mean: &[T], batch_var: &[T], count: usize) {
        let m = T::lit(BN_MOMENTUM);
        let one_m = T::one() - m;
        let unbias = if count > 1 { T::lit(count as f64 / (count - 1) as f64) } else { T::one() };
        for c in 0..self.mean.len() {
            self.mean[c] = m * self.mean[c] + one_m * batch_mean[c];
            self.var[c] = m * self.var[c] + one_m * batch_var[c] * unbias;
        }
        self.updates += 1;
    }
}

/// Saved state of a batch-norm forward pass.
pub struct BatchNormForward<T> {
    pub output: Tensor<T>,
    pub xhat: Vec<T>,
    pub inv_std: Vec<T>,
    /// Biased batch statistics (train mode only).
    pub batch_mean: Vec<T>,
    pub batch_var: Vec<T>,
}

fn layout<T: Scalar>(x: &Tensor<T>, gamma: &Tensor<T>, beta: &Tensor<T>) -> Result<(usize, usize, usize)> {
    if x.rank() < 2 {
        return Err(Error::dim(format!("batch-norm needs rank >= 2, got {:?}", x.shape())));
    }
    let n = x.shape()[0];
    let c = x.shape()[1];
    let spatial: usize = x.shape()[2..].iter().product();
    if gamma.numel() != c || beta.numel() != c {
        return Err(Error::dim(format!(
            "gamma/beta extents {}/{} do not match channel count (axis 1) = {c}",
            gamma.numel(),
            beta.numel()
        )));
    }
    Ok((n, c, spatial))
}

fn normalize<T: Scalar>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    mean: &[T],
    inv_std: &[T],
    (n, c, s): (usize, usize, usize),
) -> (Vec<T>, Vec<T>) {
    let xd = x.data();
    let mut xhat = vec![T::zero(); xd.len()];
    let mut out = vec![T::zero(); xd.len()];
    for b in 0..n {
        for ch in 0..c {
            let base = (b * c + ch) * s;
            let (g, bt) = (gamma.data()[ch], beta.data()[ch]);
            for i in base..base + s {
                let h = (xd[i] - mean[ch]) * inv_std[ch];
                xhat[i] = h;
                out[i] = g * h + bt;
            }
        }
    }
    (xhat, out)
}

/// Train-mode forward using batch statistics. Does not touch running stats.
pub fn batchnorm_train<T: Scalar>(x: &Tensor<T>, gamma: &Tensor<T>, beta: &Tensor<T>) -> Result<BatchNormForward<T>> {
    let (n, c, s) = layout(x, gamma, beta)?;
    let xd = x.data();
    let count = T::lit((n * s) as f64);
    let mut mean = vec![T::zero(); c];
    let mut var = vec![T::zero(); c];
    for ch in 0..c {
        let mut acc = T::zero();
        for b in 0..n {
            let base = (b * c + ch) * s;
            acc = xd[base..base + s].iter().fold(acc, |a, &v| a + v);
        }
        mean[ch] = acc / count;
        let mut sq = T::zero();
        for b in 0..n {
            let base = (b * c + ch) * s;
            sq = xd[base..base + s].iter().fold(sq, |a, &v| {
                let d = v - mean[ch];
                a + d * d
            });
        }
        var[ch] = sq / count;
    }
    let eps = T::lit(BN_EPS);
    let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
    let (xhat, out) = normalize(x, gamma, beta, &mean, &inv_std, (n, c, s));
    Ok(BatchNormForward { output: Tensor::new(x.shape(), out)?, xhat, inv_std, batch_mean: mean, batch_var: var })
}

/// Infer-mode forward using running statistics only.
pub fn batchnorm_infer<T: Scalar>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    stats: &RunningStats<T>,
    layer: &str,
) -> Result<BatchNormForward<T>> {
    let dims = layout(x, gamma, beta)?;
    if !stats.is_initialized() {
        return Err(Error::UninitializedStats(layer.to_string()));
    }
    let eps = T::lit(BN_EPS);
    let inv_std: Vec<T> = stats.var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
    let (xhat, out) = normalize(x, gamma, beta, &stats.mean, &inv_std, dims);
    Ok(BatchNormForward {
        output: Tensor::new(x.shape(), out)?,
        xhat,
        inv_std,
        batch_mean: Vec::new(),
        batch_var: Vec::new(),
    })
}

/// Batch normalization; train mode also folds the batch statistics into
/// `stats` with momentum [`BN_MOMENTUM`].
pub fn batchnorm<T: Scalar>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    stats: &mut RunningStats<T>,
    mode: BatchNormMode,
) -> Result<Tensor<T>> {
    match mode {
        BatchNormMode::Train => {
            let fwd = batchnorm_train(x, gamma, beta)?;
            let count = x.shape()[0] * x.shape()[2..].iter().product::<usize>();
            stats.absorb(&fwd.batch_mean, &fwd.batch_var, count);
            Ok(fwd.output)
        }
        BatchNormMode::Infer => Ok(batchnorm_infer(x, gamma, beta, stats, "batchnorm")?.output),
    }
}

/// Returns (dx, dgamma, dbeta).
pub(crate) fn batchnorm_backward<T: Scalar>(
    grad_out: &Tensor<T>,
    gamma: &Tensor<T>,
    xhat: &[T],
    inv_std: &[T],
    mode: BatchNormMode,
) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
    let shape = grad_out.shape();
    let (n, c) = (shape[0], shape[1]);
    let s: usize = shape[2..].iter().product();
    let dy = grad_out.data();
    let mut dgamma = vec![T::zero(); c];
    let mut dbeta = vec![T::zero(); c];
    for b in 0..n {
        for ch in 0..c {
            let base = (b * c + ch) * s;
            for i in base..base + s {
                dgamma[ch] = dgamma[ch] + dy[i] * xhat[i];
                dbeta[ch] = dbeta[ch] + dy[i];
            }
        }
    }
    let mut dx = vec![T::zero(); dy.len()];
    match mode {
        BatchNormMode::Train => {
            let m = T::lit((n * s) as f64);
            for ch in 0..c {
                let k = gamma.data()[ch] * inv_std[ch] / m;
                for b in 0..n {
                    let base = (b * c + ch) * s;
                    for i in base..base + s {
                        dx[i] = k * (m * dy[i] - dbeta[ch] - xhat[i] * dgamma[ch]);
                    }
                }
            }
        }
        BatchNormMode::Infer => {
            for b in 0..n {
                for ch in 0..c {
                    let k = gamma.data()[ch] * inv_std[ch];
                    let base = (b * c + ch) * s;
                    for i in base..base + s {
                        dx[i] = k * dy[i];
                    }
                }
            }
        }
    }
    (
        Tensor::new(shape, dx).expect("shape"),
        Tensor::new(&[c], dgamma).expect("shape"),
        Tensor::new(&[c], dbeta).expect("shape"),
    )
}
