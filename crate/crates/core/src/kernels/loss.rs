use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// How per-sample losses are combined over a batch.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Reduction {
    /// Cross-entropy: mean over samples. Squared error: mean over every
    /// element, i.e. per-sample squared distance over per-sample size,
    /// averaged over the batch.
    #[default]
    Mean,
    /// Plain sums over samples (and elements).
    Sum,
}

pub struct NllForward<T> {
    pub loss: T,
    /// Row-wise softmax of the logits.
    pub probs: Vec<T>,
}

/// Stable cross-entropy of `logits` (N x K) against integer labels.
pub fn log_softmax_nll_forward<T: Scalar>(
    logits: &Tensor<T>,
    labels: &[usize],
    reduction: Reduction,
) -> Result<NllForward<T>> {
    let (n, k) = match *logits.shape() {
        [n, k] => (n, k),
        _ => return Err(Error::dim(format!("logits must be N x K, got {:?}", logits.shape()))),
    };
    if labels.len() != n {
        return Err(Error::dim(format!("{} labels for {n} logit rows (axis 0)", labels.len())));
    }
    if let Some((index, &label)) = labels.iter().enumerate().find(|(_, &l)| l >= k) {
        return Err(Error::Label { index, label, classes: k });
    }
    let x = logits.data();
    let mut probs = vec![T::zero(); n * k];
    let mut total = T::zero();
    for (i, &label) in labels.iter().enumerate() {
        let row = &x[i * k..(i + 1) * k];
        let max = row.iter().fold(T::neg_infinity(), |a, &v| a.max(v));
        let sum_exp = row.iter().fold(T::zero(), |a, &v| a + (v - max).exp());
        let log_z = max + sum_exp.ln();
        for j in 0..k {
            probs[i * k + j] = (row[j] - max).exp() / sum_exp;
        }
        total = total + (log_z - row[label]);
    }
    let loss = match reduction {
        Reduction::Mean => total / T::lit(n as f64),
        Reduction::Sum => total,
    };
    Ok(NllForward { loss, probs })
}

pub fn log_softmax_nll<T: Scalar>(logits: &Tensor<T>, labels: &[usize]) -> Result<T> {
    Ok(log_softmax_nll_forward(logits, labels, Reduction::Mean)?.loss)
}

pub(crate) fn nll_backward<T: Scalar>(
    upstream: T,
    probs: &[T],
    labels: &[usize],
    shape: &[usize],
    reduction: Reduction,
) -> Tensor<T> {
    let (n, k) = (shape[0], shape[1]);
    let scale = match reduction {
        Reduction::Mean => upstream / T::lit(n as f64),
        Reduction::Sum => upstream,
    };
    let mut g = probs.to_vec();
    for (i, &label) in labels.iter().enumerate() {
        g[i * k + label] = g[i * k + label] - T::one();
    }
    for v in &mut g {
        *v = *v * scale;
    }
    Tensor::new(shape, g).expect("shape")
}

/// Squared error between `original` and `reconstruction`.
pub fn mse<T: Scalar>(original: &Tensor<T>, reconstruction: &Tensor<T>, reduction: Reduction) -> Result<T> {
    original.expect_same_shape(reconstruction)?;
    let sq = original.data().iter().zip(reconstruction.data()).fold(T::zero(), |a, (&x, &y)| {
        let d = x - y;
        a + d * d
    });
    Ok(match reduction {
        Reduction::Mean => sq / T::lit(original.numel() as f64),
        Reduction::Sum => sq,
    })
}

/// Gradient of [`mse`] with respect to `a` (the gradient for `b` is its negation).
pub(crate) fn mse_backward<T: Scalar>(upstream: T, a: &Tensor<T>, b: &Tensor<T>, reduction: Reduction) -> Tensor<T> {
    let scale = match reduction {
        Reduction::Mean => T::lit(2.0) * upstream / T::lit(a.numel() as f64),
        Reduction::Sum => T::lit(2.0) * upstream,
    };
    a.zip_map(b, |x, y| (x - y) * scale).expect("same shape")
}
