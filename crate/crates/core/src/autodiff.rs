//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Tape`] records every primitive executed on it together with whatever
//! the backward pass needs (im2col columns, pooling switches, normalized
//! activations, softmax probabilities). Node ids increase in execution
//! order, so walking the tape backwards is a valid reverse topological
//! order and visits each node once.
//!
//! Leaves are created with [`Tape::leaf`] (tracked) or [`Tape::constant`]
//! (not tracked). Gradients only flow into nodes that depend on a tracked
//! leaf; everything else costs nothing in the backward pass.

use crate::error::{Error, Result};
use crate::kernels::conv::{self, ConvGeometry};
use crate::kernels::loss::{self, Reduction};
use crate::kernels::norm::{self, BatchNormMode};
use crate::kernels::pool::{self, Switches};
use crate::tensor::{Scalar, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    /// Adds a per-channel bias along axis 1.
    AddBias {
        x: Var,
        bias: Var,
    },
    Relu(Var),
    Sigmoid(Var),
    Reshape(Var),
    /// `x (N x in) * w^T`, with `w` stored as (out x in).
    Linear {
        x: Var,
        w: Var,
    },
    Conv2d {
        x: Var,
        w: Var,
        cols: Vec<T>,
        geometry: ConvGeometry,
    },
    ConvTranspose2d {
        x: Var,
        w: Var,
        geometry: ConvGeometry,
    },
    MaxPool {
        x: Var,
        switches: Switches,
    },
    MaxUnpool {
        x: Var,
        switches: Switches,
    },
    Upsample {
        x: Var,
        factor: usize,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
        mode: BatchNormMode,
    },
    Nll {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<T>,
        reduction: Reduction,
    },
    Mse {
        a: Var,
        b: Var,
        reduction: Reduction,
    },
    Sum(Var),
    Mean(Var),
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    tracked: bool,
}

/// Record of executed primitives for one forward/backward pass.
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Output of [`Tape::batchnorm_train`]: the normalized node plus the batch
/// statistics the caller may fold into running averages.
pub struct BatchNormOutput<T> {
    pub out: Var,
    pub batch_mean: Vec<T>,
    pub batch_var: Vec<T>,
    pub count: usize,
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn is_tracked(&self, v: Var) -> bool {
        self.nodes[v.0].tracked
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let tracked = inputs.iter().any(|v| self.nodes[v.0].tracked);
        if cfg!(debug_assertions) && inputs.iter().all(|v| self.nodes[v.0].value.all_finite()) {
            debug_assert!(value.all_finite(), "kernel produced non-finite output from finite inputs");
        }
        self.nodes.push(Node { value, op, tracked });
        Var(self.nodes.len() - 1)
    }

    /// Tracked leaf: gradients are accumulated for it.
    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf, tracked: true });
        Var(self.nodes.len() - 1)
    }

    /// Untracked leaf: no gradient flows into it.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf, tracked: false });
        Var(self.nodes.len() - 1)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).zip_map(self.value(b), |x, y| x + y)?;
        Ok(self.push(v, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).zip_map(self.value(b), |x, y| x - y)?;
        Ok(self.push(v, Op::Sub(a, b), &[a, b]))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).zip_map(self.value(b), |x, y| x * y)?;
        Ok(self.push(v, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, a: Var, c: T) -> Var {
        let v = self.value(a).map(|x| x * c);
        self.push(v, Op::Scale(a, c), &[a])
    }

    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let xv = self.value(x);
        let bv = self.value(bias);
        if xv.rank() < 2 || xv.shape()[1] != bv.numel() {
            return Err(Error::dim(format!(
                "bias of {} elements cannot broadcast over axis 1 of {:?}",
                bv.numel(),
                xv.shape()
            )));
        }
        let c = xv.shape()[1];
        let s: usize = xv.shape()[2..].iter().product();
        let b = bv.data();
        let mut out = xv.clone();
        for (i, o) in out.data_mut().iter_mut().enumerate() {
            *o = *o + b[(i / s) % c];
        }
        Ok(self.push(out, Op::AddBias { x, bias }, &[x, bias]))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let v = self.value(x).map(|a| if a > T::zero() { a } else { T::zero() });
        self.push(v, Op::Relu(x), &[x])
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let v = self.value(x).map(|a| {
            if a >= T::zero() {
                T::one() / (T::one() + (-a).exp())
            } else {
                let e = a.exp();
                e / (T::one() + e)
            }
        });
        self.push(v, Op::Sigmoid(x), &[x])
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(x).reshape(shape)?;
        Ok(self.push(v, Op::Reshape(x), &[x]))
    }

    /// Collapse every axis after the first.
    pub fn flatten(&mut self, x: Var) -> Result<Var> {
        let shape = self.value(x).shape();
        let n = shape[0];
        let rest: usize = shape[1..].iter().product();
        self.reshape(x, &[n, rest])
    }

    pub fn linear(&mut self, x: Var, w: Var) -> Result<Var> {
        let (xv, wv) = (self.value(x), self.value(w));
        let (n, fan_in) = match *xv.shape() {
            [n, f] => (n, f),
            _ => return Err(Error::dim(format!("dense input must be N x F, got {:?}", xv.shape()))),
        };
        let out = match *wv.shape() {
            [o, i] if i == fan_in => o,
            _ => {
                return Err(Error::dim(format!(
                    "dense weight {:?} does not accept {fan_in} inputs (axis 1)",
                    wv.shape()
                )))
            }
        };
        let mut y = vec![T::zero(); n * out];
        crate::kernels::gemm(
            n,
            fan_in,
            out,
            crate::kernels::MatRef::rows(xv.data(), fan_in),
            crate::kernels::MatRef::t(wv.data(), fan_in),
            T::zero(),
            &mut y,
            out,
        );
        let v = Tensor::new(&[n, out], y)?;
        Ok(self.push(v, Op::Linear { x, w }, &[x, w]))
    }

    pub fn conv2d(&mut self, x: Var, w: Var, stride: usize, pad: usize) -> Result<Var> {
        let fwd = conv::conv2d_forward(self.value(x), self.value(w), stride, pad)?;
        let cols = if self.is_tracked(w) { fwd.cols } else { Vec::new() };
        Ok(self.push(fwd.output, Op::Conv2d { x, w, cols, geometry: fwd.geometry }, &[x, w]))
    }

    /// Transposed convolution producing an explicit `out_h x out_w` extent.
    pub fn conv_transpose2d(
        &mut self,
        x: Var,
        w: Var,
        stride: usize,
        pad: usize,
        out_h: usize,
        out_w: usize,
    ) -> Result<Var> {
        let g = conv::transposed_geometry(self.value(x), self.value(w), stride, pad, out_h, out_w)?;
        let v = conv::transposed_forward(self.value(x), self.value(w), &g);
        Ok(self.push(v, Op::ConvTranspose2d { x, w, geometry: g }, &[x, w]))
    }

    pub fn maxpool2d(&mut self, x: Var, window: usize) -> Result<Var> {
        let (v, switches) = pool::maxpool2d(self.value(x), window)?;
        Ok(self.push(v, Op::MaxPool { x, switches }, &[x]))
    }

    /// Switches recorded by a max-pool node.
    pub fn switches(&self, pooled: Var) -> Option<&Switches> {
        match &self.nodes[pooled.0].op {
            Op::MaxPool { switches, .. } => Some(switches),
            _ => None,
        }
    }

    pub fn max_unpool2d(&mut self, x: Var, switches: Switches) -> Result<Var> {
        let v = pool::max_unpool2d(self.value(x), &switches)?;
        Ok(self.push(v, Op::MaxUnpool { x, switches }, &[x]))
    }

    pub fn upsample(&mut self, x: Var, factor: usize) -> Result<Var> {
        let v = pool::upsample_nearest(self.value(x), factor)?;
        Ok(self.push(v, Op::Upsample { x, factor }, &[x]))
    }

    /// Batch norm with batch statistics. Running stats are left to the caller.
    pub fn batchnorm_train(&mut self, x: Var, gamma: Var, beta: Var) -> Result<BatchNormOutput<T>> {
        let fwd = norm::batchnorm_train(self.value(x), self.value(gamma), self.value(beta))?;
        let shape = self.value(x).shape();
        let count = shape[0] * shape[2..].iter().product::<usize>();
        let op = Op::BatchNorm { x, gamma, beta, xhat: fwd.xhat, inv_std: fwd.inv_std, mode: BatchNormMode::Train };
        let out = self.push(fwd.output, op, &[x, gamma, beta]);
        Ok(BatchNormOutput { out, batch_mean: fwd.batch_mean, batch_var: fwd.batch_var, count })
    }

    pub fn batchnorm_infer(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        stats: &norm::RunningStats<T>,
        layer: &str,
    ) -> Result<Var> {
        let fwd = norm::batchnorm_infer(self.value(x), self.value(gamma), self.value(beta), stats, layer)?;
        let op = Op::BatchNorm { x, gamma, beta, xhat: fwd.xhat, inv_std: fwd.inv_std, mode: BatchNormMode::Infer };
        Ok(self.push(fwd.output, op, &[x, gamma, beta]))
    }

    pub fn log_softmax_nll(&mut self, logits: Var, labels: &[usize], reduction: Reduction) -> Result<Var> {
        let fwd = loss::log_softmax_nll_forward(self.value(logits), labels, reduction)?;
        let op = Op::Nll { logits, labels: labels.to_vec(), probs: fwd.probs, reduction };
        Ok(self.push(Tensor::scalar(fwd.loss), op, &[logits]))
    }

    pub fn mse(&mut self, a: Var, b: Var, reduction: Reduction) -> Result<Var> {
        let v = loss::mse(self.value(a), self.value(b), reduction)?;
        Ok(self.push(Tensor::scalar(v), Op::Mse { a, b, reduction }, &[a, b]))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let v = Tensor::scalar(self.value(x).sum());
        self.push(v, Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let v = Tensor::scalar(xv.sum() / T::lit(xv.numel() as f64));
        self.push(v, Op::Mean(x), &[x])
    }

    /// Smallest distance of any relu pre-activation from 0 and of any max-pool
    /// winner from its runner-up. Finite-difference probes with a step well
    /// below this margin never cross a kink.
    pub fn min_kink_margin(&self) -> f64 {
        let mut margin = f64::INFINITY;
        for node in &self.nodes {
            match &node.op {
                Op::Relu(x) => {
                    for v in self.value(*x).data() {
                        margin = margin.min(v.to_f64().unwrap().abs());
                    }
                }
                Op::MaxPool { x, switches } => {
                    let behind_relu = matches!(self.nodes[x.0].op, Op::Relu(_));
                    margin = margin.min(pool::min_window_gap(self.value(*x), switches.window, behind_relu));
                }
                _ => {}
            }
        }
        margin
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let lv = self.value(loss);
        if lv.numel() != 1 {
            return Err(Error::contract(format!("backward needs a scalar loss, got shape {:?}", lv.shape())));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        let shapes: Vec<Vec<usize>> = self.nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        grads[loss.0] = Some(Tensor::ones(lv.shape()));

        for id in (0..=loss.0).rev() {
            let node = &self.nodes[id];
            if !node.tracked {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            self.backprop_node(node, &g, &mut grads);
            grads[id] = Some(g);
        }
        Ok(Gradients { grads, shapes })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
        if !self.nodes[v.0].tracked {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => {
                for (e, x) in existing.data_mut().iter_mut().zip(g.data()) {
                    *e = *e + *x;
                }
            }
            slot => *slot = Some(g),
        }
    }

    fn backprop_node(&self, node: &Node<T>, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.map(|v| -v));
            }
            Op::Mul(a, b) => {
                let da = g.zip_map(self.value(*b), |gv, y| gv * y).expect("shape");
                let db = g.zip_map(self.value(*a), |gv, x| gv * x).expect("shape");
                self.accumulate(grads, *a, da);
                self.accumulate(grads, *b, db);
            }
            Op::Scale(a, c) => {
                let c = *c;
                self.accumulate(grads, *a, g.map(|v| v * c));
            }
            Op::AddBias { x, bias } => {
                self.accumulate(grads, *x, g.clone());
                if self.is_tracked(*bias) {
                    let c = self.value(*bias).numel();
                    let s: usize = g.shape()[2..].iter().product();
                    let mut db = vec![T::zero(); c];
                    for (i, &v) in g.data().iter().enumerate() {
                        let ch = (i / s) % c;
                        db[ch] = db[ch] + v;
                    }
                    let db = Tensor::new(self.value(*bias).shape(), db).expect("shape");
                    self.accumulate(grads, *bias, db);
                }
            }
            Op::Relu(x) => {
                let xv = self.value(*x);
                let d = xv.zip_map(g, |a, gv| if a > T::zero() { gv } else { T::zero() }).expect("shape");
                self.accumulate(grads, *x, d);
            }
            Op::Sigmoid(x) => {
                let d = node.value.zip_map(g, |y, gv| gv * y * (T::one() - y)).expect("shape");
                self.accumulate(grads, *x, d);
            }
            Op::Reshape(x) => {
                let d = g.reshape(self.value(*x).shape()).expect("shape");
                self.accumulate(grads, *x, d);
            }
            Op::Linear { x, w } => {
                let (xv, wv) = (self.value(*x), self.value(*w));
                let (n, fan_in) = (xv.shape()[0], xv.shape()[1]);
                let out = wv.shape()[0];
                if self.is_tracked(*x) {
                    let mut dx = vec![T::zero(); n * fan_in];
                    crate::kernels::gemm(
                        n,
                        out,
                        fan_in,
                        crate::kernels::MatRef::rows(g.data(), out),
                        crate::kernels::MatRef::rows(wv.data(), fan_in),
                        T::zero(),
                        &mut dx,
                        fan_in,
                    );
                    self.accumulate(grads, *x, Tensor::new(xv.shape(), dx).expect("shape"));
                }
                if self.is_tracked(*w) {
                    let mut dw = vec![T::zero(); out * fan_in];
                    crate::kernels::gemm(
                        out,
                        n,
                        fan_in,
                        crate::kernels::MatRef::t(g.data(), out),
                        crate::kernels::MatRef::rows(xv.data(), fan_in),
                        T::zero(),
                        &mut dw,
                        fan_in,
                    );
                    self.accumulate(grads, *w, Tensor::new(wv.shape(), dw).expect("shape"));
                }
            }
            Op::Conv2d { x, w, cols, geometry } => {
                let need_x = self.is_tracked(*x);
                let need_w = self.is_tracked(*w);
                let (dx, dw) = conv::conv2d_backward(g, cols, self.value(*w), geometry, need_x, need_w);
                if let Some(dx) = dx {
                    self.accumulate(grads, *x, dx);
                }
                if let Some(dw) = dw {
                    self.accumulate(grads, *w, dw);
                }
            }
            Op::ConvTranspose2d { x, w, geometry } => {
                let (dx, dw) = conv::transposed_backward(
                    g,
                    self.value(*x),
                    self.value(*w),
                    geometry,
                    self.is_tracked(*x),
                    self.is_tracked(*w),
                );
                if let Some(dx) = dx {
                    self.accumulate(grads, *x, dx);
                }
                if let Some(dw) = dw {
                    self.accumulate(grads, *w, dw);
                }
            }
            Op::MaxPool { x, switches } => {
                let dx = pool::max_unpool2d(g, switches).expect("switch shape");
                self.accumulate(grads, *x, dx);
            }
            Op::MaxUnpool { x, switches } => {
                let gd = g.data();
                let d: Vec<T> = (0..switches.index.len()).map(|i| gd[switches.source(i)]).collect();
                self.accumulate(grads, *x, Tensor::new(self.value(*x).shape(), d).expect("shape"));
            }
            Op::Upsample { x, factor } => {
                self.accumulate(grads, *x, pool::upsample_backward(g, *factor));
            }
            Op::BatchNorm { x, gamma, beta, xhat, inv_std, mode } => {
                let (dx, dgamma, dbeta) = norm::batchnorm_backward(g, self.value(*gamma), xhat, inv_std, *mode);
                self.accumulate(grads, *x, dx);
                self.accumulate(grads, *gamma, dgamma);
                self.accumulate(grads, *beta, dbeta);
            }
            Op::Nll { logits, labels, probs, reduction } => {
                let d = loss::nll_backward(g.item(), probs, labels, self.value(*logits).shape(), *reduction);
                self.accumulate(grads, *logits, d);
            }
            Op::Mse { a, b, reduction } => {
                let da = loss::mse_backward(g.item(), self.value(*a), self.value(*b), *reduction);
                if self.is_tracked(*b) {
                    self.accumulate(grads, *b, da.map(|v| -v));
                }
                self.accumulate(grads, *a, da);
            }
            Op::Sum(x) => {
                let gv = g.item();
                self.accumulate(grads, *x, Tensor::full(self.value(*x).shape(), gv));
            }
            Op::Mean(x) => {
                let xv = self.value(*x);
                let gv = g.item() / T::lit(xv.numel() as f64);
                self.accumulate(grads, *x, Tensor::full(xv.shape(), gv));
            }
        }
    }
}

/// Node id to gradient. Nodes that do not influence the loss read as zeros
/// of the node's shape.
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
    shapes: Vec<Vec<usize>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Tensor<T> {
        match &self.grads[v.0] {
            Some(g) => g.clone(),
            None => Tensor::zeros(&self.shapes[v.0]),
        }
    }

    /// Gradient if any flowed into `v`.
    pub fn try_get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads[v.0].as_ref()
    }

    pub fn take(&mut self, v: Var) -> Tensor<T> {
        self.grads[v.0].take().unwrap_or_else(|| Tensor::zeros(&self.shapes[v.0]))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_gives_ones() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::from_fn(&[2, 3, 4], |i| i as f64 - 5.0));
        let s = tape.sum(x);
        let g = tape.backward(s).unwrap();
        assert!(g.get(x).data().iter().all(|&v| v == 1.0));
        assert_eq!(g.get(x).shape(), &[2, 3, 4]);
    }

    #[test]
    fn disconnected_leaf_gets_zeros() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::ones(&[3]));
        let p = tape.leaf(Tensor::ones(&[2, 2]));
        let s = tape.sum(x);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(p), Tensor::zeros(&[2, 2]));
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::ones(&[3]));
        assert!(matches!(tape.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn shared_node_accumulates() {
        // loss = sum(x + x) -> grad 2
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::ones(&[4]));
        let y = tape.add(x, x).unwrap();
        let s = tape.sum(y);
        let g = tape.backward(s).unwrap();
        assert!(g.get(x).data().iter().all(|&v| v == 2.0));
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut tape = Tape::<f64>::new();
        let c = tape.constant(Tensor::ones(&[2]));
        let x = tape.leaf(Tensor::ones(&[2]));
        let y = tape.sub(x, c).unwrap();
        let s = tape.sum(y);
        let g = tape.backward(s).unwrap();
        assert!(g.try_get(c).is_none());
        assert!(!tape.is_tracked(c));
    }

    #[test]
    fn maxpool_routes_gradient_to_switch() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::new(&[1, 1, 2, 2], vec![1.0, 7.0, 3.0, 4.0]).unwrap());
        let p = tape.maxpool2d(x, 2).unwrap();
        let s = tape.sum(p);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(x).data(), &[0.0, 1.0, 0.0, 0.0]);
    }

    #[test]
    fn relu_subgradient_at_zero_is_zero() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::new(&[3], vec![-1.0, 0.0, 2.0]).unwrap());
        let r = tape.relu(x);
        let s = tape.sum(r);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(x).data(), &[0.0, 0.0, 1.0]);
    }
}
