//! Adam with bias correction, global-norm clipping, and deterministic
//! mini-batch plans.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::nn::ParamStore;
use crate::tensor::{Scalar, Tensor};

/// Gradients keyed by parameter name.
pub type NamedGrads<T> = BTreeMap<String, Tensor<T>>;

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// Moments and step counter for one optimization problem.
#[derive(Clone, Debug)]
pub struct AdamState<T: Scalar> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub t: u64,
    m: BTreeMap<String, Tensor<T>>,
    v: BTreeMap<String, Tensor<T>>,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(lr: f64) -> Self {
        Self { lr, beta1: BETA1, beta2: BETA2, eps: ADAM_EPS, t: 0, m: BTreeMap::new(), v: BTreeMap::new() }
    }

    pub fn first_moment(&self, name: &str) -> Option<&Tensor<T>> {
        self.m.get(name)
    }

    pub fn second_moment(&self, name: &str) -> Option<&Tensor<T>> {
        self.v.get(name)
    }

    /// One Adam step over exactly the parameters in `subset`. Every name in
    /// `subset` needs a gradient and no gradient may fall outside it.
    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &NamedGrads<T>, subset: &BTreeSet<String>) -> Result<()> {
        if let Some(missing) = subset.iter().find(|n| !grads.contains_key(*n)) {
            return Err(Error::contract(format!("no gradient for parameter `{missing}`")));
        }
        if let Some(extra) = grads.keys().find(|n| !subset.contains(*n)) {
            return Err(Error::contract(format!("gradient for `{extra}` outside the update set")));
        }
        for name in subset {
            let p = store.get(name).ok_or_else(|| Error::contract(format!("unknown parameter `{name}`")))?;
            if p.shape() != grads[name].shape() {
                return Err(Error::dim(format!(
                    "gradient shape {:?} for `{name}` {:?}",
                    grads[name].shape(),
                    p.shape()
                )));
            }
        }

        self.t += 1;
        let b1 = T::lit(self.beta1);
        let b2 = T::lit(self.beta2);
        let one = T::one();
        let c1 = T::lit(1.0 - self.beta1.powi(self.t as i32));
        let c2 = T::lit(1.0 - self.beta2.powi(self.t as i32));
        let lr = T::lit(self.lr);
        let eps = T::lit(self.eps);

        for name in subset {
            let g = &grads[name];
            let m = self.m.entry(name.clone()).or_insert_with(|| Tensor::zeros(g.shape()));
            let v = self.v.entry(name.clone()).or_insert_with(|| Tensor::zeros(g.shape()));
            let p = store.get_mut(name).expect("checked above");
            let (pd, md, vd) = (p.data_mut(), m.data_mut(), v.data_mut());
            for (i, &gi) in g.data().iter().enumerate() {
                md[i] = b1 * md[i] + (one - b1) * gi;
                vd[i] = b2 * vd[i] + (one - b2) * gi * gi;
                let m_hat = md[i] / c1;
                let v_hat = vd[i] / c2;
                pd[i] = pd[i] - lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// Euclidean norm over every gradient entry.
pub fn global_norm<T: Scalar>(grads: &NamedGrads<T>) -> f64 {
    grads
        .values()
        .flat_map(|g| g.data().iter())
        .fold(0.0f64, |acc, v| {
            let x = v.to_f64().unwrap();
            acc + x * x
        })
        .sqrt()
}

/// Rescale `grads` so their global norm is at most `max_norm`; returns the
/// norm before clipping.
pub fn clip_global_norm<T: Scalar>(grads: &mut NamedGrads<T>, max_norm: f64) -> f64 {
    let norm = global_norm(grads);
    if norm > max_norm && norm.is_finite() {
        let s = T::lit(max_norm / norm);
        for g in grads.values_mut() {
            for v in g.data_mut() {
                *v = *v * s;
            }
        }
    }
    norm
}

/// Shuffled sample order for one epoch, split into batches of `batch_size`
/// (the final batch may be short).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BatchPlan {
    pub epoch: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub order: Vec<usize>,
}

impl BatchPlan {
    /// A pure function of `(dataset_size, batch_size, seed, epoch)`.
    pub fn new(dataset_size: usize, batch_size: usize, seed: u64, epoch: usize) -> Result<Self> {
        if batch_size == 0 {
            return Err(Error::config("batch size must be >= 1"));
        }
        if batch_size > dataset_size {
            return Err(Error::config(format!("batch size {batch_size} exceeds dataset size {dataset_size}")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(epoch as u64);
        let mut order: Vec<usize> = (0..dataset_size).collect();
        order.shuffle(&mut rng);
        Ok(Self { epoch, batch_size, seed, order })
    }

    pub fn batches(&self) -> impl Iterator<Item = &[usize]> {
        self.order.chunks(self.batch_size)
    }

    pub fn num_batches(&self) -> usize {
        self.order.len().div_ceil(self.batch_size)
    }
}

pub fn minibatches(dataset_size: usize, batch_size: usize, seed: u64, epoch: usize) -> Result<Vec<Vec<usize>>> {
    Ok(BatchPlan::new(dataset_size, batch_size, seed, epoch)?.batches().map(<[usize]>::to_vec).collect())
}
