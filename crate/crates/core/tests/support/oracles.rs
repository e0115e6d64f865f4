//! Brute-force kernel oracles written directly from their definitions, in
//! 64-bit. Each `check_*` draws one random case from `seed` and reports the
//! first mismatch.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use ran_core::autodiff::Tape;
use ran_core::kernels::{
    batchnorm, conv2d, log_softmax_nll, maxpool2d, mse, transposed_conv2d_to, BatchNormMode, Reduction, RunningStats,
    BN_EPS, BN_MOMENTUM,
};
use ran_core::tensor::Tensor;

pub type Check = Result<(), String>;

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        if !$cond {
            return Err(format!($($fmt)+));
        }
    };
}

pub fn random(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| (rng.random::<f64>() * 2.0 - 1.0) * scale)
}

pub fn max_diff(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    assert_eq!(a.shape(), b.shape());
    a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

pub fn conv_oracle(x: &Tensor<f64>, k: &Tensor<f64>, stride: usize, pad: usize) -> Tensor<f64> {
    let [n, c, h, w] = x.shape().try_into().unwrap();
    let [o, _, kh, kw] = k.shape().try_into().unwrap();
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (w + 2 * pad - kw) / stride + 1;
    let mut out = Tensor::zeros(&[n, o, oh, ow]);
    for b in 0..n {
        for oc in 0..o {
            for y in 0..oh {
                for xx in 0..ow {
                    let mut acc = 0.0;
                    for ic in 0..c {
                        for i in 0..kh {
                            for j in 0..kw {
                                let iy = (y * stride + i) as isize - pad as isize;
                                let ix = (xx * stride + j) as isize - pad as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                    continue;
                                }
                                let xv = x.data()[((b * c + ic) * h + iy as usize) * w + ix as usize];
                                acc += xv * k.data()[((oc * c + ic) * kh + i) * kw + j];
                            }
                        }
                    }
                    out.data_mut()[((b * o + oc) * oh + y) * ow + xx] = acc;
                }
            }
        }
    }
    out
}

/// Scatter form of the transposed convolution: every input element adds a
/// scaled copy of the kernel into the output.
pub fn transposed_oracle(
    y: &Tensor<f64>,
    k: &Tensor<f64>,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
) -> Tensor<f64> {
    let [n, o, h, w] = y.shape().try_into().unwrap();
    let [_, c, kh, kw] = k.shape().try_into().unwrap();
    let mut out = Tensor::zeros(&[n, c, oh, ow]);
    for b in 0..n {
        for oc in 0..o {
            for py in 0..h {
                for px in 0..w {
                    let v = y.data()[((b * o + oc) * h + py) * w + px];
                    for ic in 0..c {
                        for i in 0..kh {
                            for j in 0..kw {
                                let ty = (py * stride + i) as isize - pad as isize;
                                let tx = (px * stride + j) as isize - pad as isize;
                                if ty < 0 || tx < 0 || ty >= oh as isize || tx >= ow as isize {
                                    continue;
                                }
                                out.data_mut()[((b * c + ic) * oh + ty as usize) * ow + tx as usize] +=
                                    v * k.data()[((oc * c + ic) * kh + i) * kw + j];
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

/// Random (batch, in_ch, out_ch, height, width, kernel, stride, pad) with the
/// kernel fitting inside the padded input.
fn conv_case(rng: &mut ChaCha8Rng) -> (usize, usize, usize, usize, usize, usize, usize, usize) {
    (
        rng.random_range(1..=2),
        rng.random_range(1..=3),
        rng.random_range(1..=4),
        rng.random_range(3..=9),
        rng.random_range(3..=9),
        rng.random_range(1..=3),
        rng.random_range(1..=2),
        rng.random_range(0..=1),
    )
}

pub fn check_conv2d(seed: u64) -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (n, c, o, h, w, k, s, p) = conv_case(&mut rng);
    let x = random(&mut rng, &[n, c, h, w], 1.0);
    let kern = random(&mut rng, &[o, c, k, k], 1.0);
    let got = conv2d(&x, &kern, s, p).map_err(|e| e.to_string())?;
    let d = max_diff(&got, &conv_oracle(&x, &kern, s, p));
    ensure!(d < 1e-12, "conv2d differs by {d:e}");
    Ok(())
}

pub fn check_transposed_adjoint(seed: u64) -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (n, c, o, h, w, k, s, p) = conv_case(&mut rng);
    let x = random(&mut rng, &[n, c, h, w], 1.0);
    let kern = random(&mut rng, &[o, c, k, k], 1.0);
    let cx = conv2d(&x, &kern, s, p).map_err(|e| e.to_string())?;
    let y = random(&mut rng, cx.shape(), 1.0);
    let ty = transposed_conv2d_to(&y, &kern, s, p, h, w).map_err(|e| e.to_string())?;
    let lhs = cx.dot(&y).unwrap();
    let rhs = x.dot(&ty).unwrap();
    ensure!((lhs - rhs).abs() <= 1e-10 * lhs.abs().max(1.0), "<Cx, y> = {lhs} but <x, C^T y> = {rhs}");
    let d = max_diff(&ty, &transposed_oracle(&y, &kern, s, p, h, w));
    ensure!(d < 1e-12, "transposed conv differs from scatter by {d:e}");
    Ok(())
}

pub fn check_maxpool(seed: u64) -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (n, c) = (rng.random_range(1..=2), rng.random_range(1..=3));
    let (bh, bw) = (rng.random_range(1..=4), rng.random_range(1..=4));
    // quantized values make ties common
    let quantize = rng.random::<bool>();
    let (h, w) = (2 * bh, 2 * bw);
    let x = Tensor::from_fn(&[n, c, h, w], |_| {
        let v: f64 = rng.random::<f64>() * 2.0 - 1.0;
        if quantize {
            (v * 2.0).round()
        } else {
            v
        }
    });
    let (y, sw) = maxpool2d(&x, 2).map_err(|e| e.to_string())?;
    ensure!(y.shape() == [n, c, bh, bw], "pooled shape {:?}", y.shape());
    for plane in 0..n * c {
        for oy in 0..bh {
            for ox in 0..bw {
                let at = |dy: usize, dx: usize| x.data()[plane * h * w + (2 * oy + dy) * w + 2 * ox + dx];
                let window = [at(0, 0), at(0, 1), at(1, 0), at(1, 1)];
                let best = window.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let first = window.iter().position(|&v| v == best).unwrap();
                let out = (plane * bh + oy) * bw + ox;
                ensure!(y.data()[out] == best, "window {out}: {} vs {best}", y.data()[out]);
                ensure!(sw.index[out] as usize == first, "window {out}: switch {} vs {first}", sw.index[out]);
                let src = plane * h * w + (2 * oy + first / 2) * w + 2 * ox + first % 2;
                ensure!(sw.source(out) == src, "window {out}: source {} vs {src}", sw.source(out));
            }
        }
    }

    // the gradient reaches exactly the switch positions
    let r = random(&mut rng, y.shape(), 1.0);
    let mut tape = Tape::new();
    let xv = tape.leaf(x.clone());
    let yv = tape.maxpool2d(xv, 2).unwrap();
    let rv = tape.constant(r.clone());
    let prod = tape.mul(yv, rv).unwrap();
    let loss = tape.sum(prod);
    let g = tape.backward(loss).unwrap().get(xv);
    let mut expected = Tensor::zeros(x.shape());
    for (out, &v) in r.data().iter().enumerate() {
        expected.data_mut()[sw.source(out)] = v;
    }
    ensure!(g.data() == expected.data(), "max-pool gradient leaves the switches");
    Ok(())
}

pub fn check_batchnorm(seed: u64) -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (n, c, hw) = (rng.random_range(2..=6), rng.random_range(1..=4), rng.random_range(1..=5));
    let shape = [n, c, hw, hw];
    let x = Tensor::from_fn(&shape, |_| rng.random::<f64>() * 6.0 - 2.0);
    let gamma = random(&mut rng, &[c], 2.0);
    let beta = random(&mut rng, &[c], 2.0);
    let s = hw * hw;
    let m = (n * s) as f64;
    let mut stats = RunningStats::new(c);
    let y = batchnorm(&x, &gamma, &beta, &mut stats, BatchNormMode::Train).map_err(|e| e.to_string())?;
    for ch in 0..c {
        let vals: Vec<f64> =
            (0..n).flat_map(|b| (0..s).map(move |i| (b * c + ch) * s + i)).map(|i| x.data()[i]).collect();
        let mean = vals.iter().sum::<f64>() / m;
        let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / m;
        for b in 0..n {
            for i in 0..s {
                let idx = (b * c + ch) * s + i;
                let want = (x.data()[idx] - mean) / (var + BN_EPS).sqrt() * gamma.data()[ch] + beta.data()[ch];
                ensure!((y.data()[idx] - want).abs() < 1e-10, "train output {idx}: {} vs {want}", y.data()[idx]);
            }
        }
        let want_mean = (1.0 - BN_MOMENTUM) * mean;
        let want_var = BN_MOMENTUM + (1.0 - BN_MOMENTUM) * var * m / (m - 1.0);
        ensure!((stats.mean[ch] - want_mean).abs() < 1e-12, "running mean {ch}");
        ensure!((stats.var[ch] - want_var).abs() < 1e-12, "running variance {ch}");
    }

    let held = Tensor::from_fn(&shape, |_| rng.random::<f64>() * 4.0 - 2.0);
    let z = batchnorm(&held, &gamma, &beta, &mut stats.clone(), BatchNormMode::Infer).map_err(|e| e.to_string())?;
    for (idx, &v) in held.data().iter().enumerate() {
        let ch = (idx / s) % c;
        let want = (v - stats.mean[ch]) / (stats.var[ch] + BN_EPS).sqrt() * gamma.data()[ch] + beta.data()[ch];
        ensure!((z.data()[idx] - want).abs() < 1e-10, "infer output {idx}: {} vs {want}", z.data()[idx]);
    }
    Ok(())
}

pub fn check_cross_entropy(seed: u64) -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (n, k) = (rng.random_range(1..=6), rng.random_range(2..=10));
    let logits = random(&mut rng, &[n, k], 8.0);
    let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..k)).collect();
    let got = log_softmax_nll(&logits, &labels).map_err(|e| e.to_string())?;
    let mut want = 0.0;
    for (i, &l) in labels.iter().enumerate() {
        let row = &logits.data()[i * k..(i + 1) * k];
        let z: f64 = row.iter().map(|v| v.exp()).sum();
        want -= (row[l].exp() / z).ln();
    }
    want /= n as f64;
    ensure!(got >= 0.0, "negative cross-entropy {got}");
    ensure!((got - want).abs() < 1e-9, "cross-entropy {got} vs {want}");

    let mut tape = Tape::new();
    let v = tape.leaf(logits.clone());
    let loss = tape.log_softmax_nll(v, &labels, Reduction::Sum).unwrap();
    let g = tape.backward(loss).unwrap().get(v);
    for row in g.data().chunks(k) {
        ensure!(row.iter().sum::<f64>().abs() < 1e-12, "gradient row does not sum to zero");
    }
    Ok(())
}

pub fn check_mse(seed: u64) -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (rows, len) = (rng.random_range(1..=4), rng.random_range(1..=64));
    let a = random(&mut rng, &[rows, len], 1.0);
    let b = random(&mut rng, &[rows, len], 1.0);
    let sq: f64 = a.data().iter().zip(b.data()).map(|(x, y)| (x - y) * (x - y)).sum();
    let mean = mse(&a, &b, Reduction::Mean).map_err(|e| e.to_string())?;
    let sum = mse(&a, &b, Reduction::Sum).map_err(|e| e.to_string())?;
    ensure!((sum - sq).abs() < 1e-12, "summed MSE {sum} vs {sq}");
    ensure!((mean - sq / (rows * len) as f64).abs() < 1e-14, "mean MSE {mean}");
    Ok(())
}

/// Every oracle check by name.
pub const CHECKS: [(&str, fn(u64) -> Check); 6] = [
    ("conv2d", check_conv2d),
    ("transposed conv adjointness", check_transposed_adjoint),
    ("maxpool", check_maxpool),
    ("batchnorm", check_batchnorm),
    ("cross-entropy", check_cross_entropy),
    ("mse", check_mse),
];
