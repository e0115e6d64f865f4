use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Argmax position of each pooling window, as a row-major offset inside the
/// window (`0..window*window`).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Switches {
    pub window: usize,
    pub input_shape: [usize; 4],
    pub index: Vec<u8>,
}

impl Switches {
    /// Flat input offset selected by output element `out`.
    pub fn source(&self, out: usize) -> usize {
        let [_, _, h, w] = self.input_shape;
        let (oh, ow) = (h / self.window, w / self.window);
        let plane = out / (oh * ow);
        let rem = out % (oh * ow);
        let (oy, ox) = (rem / ow, rem % ow);
        let s = self.index[out] as usize;
        let (dy, dx) = (s / self.window, s % self.window);
        plane * h * w + (oy * self.window + dy) * w + ox * self.window + dx
    }
}

/// Non-overlapping max pooling. Ties go to the first element in row-major
/// scan order of the window.
pub fn maxpool2d<T: Scalar>(input: &Tensor<T>, window: usize) -> Result<(Tensor<T>, Switches)> {
    let (n, c, h, w) = input.dims4()?;
    if window == 0 || window * window > u8::MAX as usize + 1 {
        return Err(Error::dim(format!("unsupported pooling window {window}")));
    }
    if h % window != 0 || w % window != 0 {
        return Err(Error::dim(format!("extent {h}x{w} (axes 2,3) not divisible by pooling window {window}")));
    }
    let (oh, ow) = (h / window, w / window);
    let x = input.data();
    let mut out = Vec::with_capacity(n * c * oh * ow);
    let mut index = Vec::with_capacity(n * c * oh * ow);
    for plane in 0..n * c {
        let base = plane * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = x[base + oy * window * w + ox * window];
                let mut arg = 0u8;
                for dy in 0..window {
                    let row = base + (oy * window + dy) * w + ox * window;
                    for dx in 0..window {
                        let v = x[row + dx];
                        if v > best {
                            best = v;
                            arg = (dy * window + dx) as u8;
                        }
                    }
                }
                out.push(best);
                index.push(arg);
            }
        }
    }
    Ok((Tensor::new(&[n, c, oh, ow], out)?, Switches { window, input_shape: [n, c, h, w], index }))
}

/// Routes each pooled value (or gradient) back to its switch position;
/// every other position is zero.
pub fn max_unpool2d<T: Scalar>(pooled: &Tensor<T>, switches: &Switches) -> Result<Tensor<T>> {
    if pooled.numel() != switches.index.len() {
        return Err(Error::dim(format!(
            "pooled tensor {:?} does not match {} switches",
            pooled.shape(),
            switches.index.len()
        )));
    }
    let mut out = Tensor::zeros(&switches.input_shape);
    let dst = out.data_mut();
    for (i, &v) in pooled.data().iter().enumerate() {
        dst[switches.source(i)] = v;
    }
    Ok(out)
}

/// Nearest-neighbour upsampling by an integer factor.
pub fn upsample_nearest<T: Scalar>(input: &Tensor<T>, factor: usize) -> Result<Tensor<T>> {
    let (n, c, h, w) = input.dims4()?;
    if factor == 0 {
        return Err(Error::dim("upsample factor must be >= 1"));
    }
    let (oh, ow) = (h * factor, w * factor);
    let x = input.data();
    let mut out = Vec::with_capacity(n * c * oh * ow);
    for plane in 0..n * c {
        for oy in 0..oh {
            let row = &x[plane * h * w + (oy / factor) * w..][..w];
            for ox in 0..ow {
                out.push(row[ox / factor]);
            }
        }
    }
    Tensor::new(&[n, c, oh, ow], out)
}

/// Adjoint of [`upsample_nearest`]: sum each `factor x factor` block.
pub(crate) fn upsample_backward<T: Scalar>(grad: &Tensor<T>, factor: usize) -> Tensor<T> {
    let [n, c, oh, ow] = [grad.shape()[0], grad.shape()[1], grad.shape()[2], grad.shape()[3]];
    let (h, w) = (oh / factor, ow / factor);
    let g = grad.data();
    let mut out = vec![T::zero(); n * c * h * w];
    for plane in 0..n * c {
        for oy in 0..oh {
            for ox in 0..ow {
                let o = &mut out[plane * h * w + (oy / factor) * w + ox / factor];
                *o = *o + g[plane * oh * ow + oy * ow + ox];
            }
        }
    }
    Tensor::new(&[n, c, h, w], out).expect("shape")
}

/// Smallest gap between the winning value and the runner-up over all
/// windows: a small gap means a finite-difference probe may flip the argmax.
/// With `skip_zero_max`, windows whose maximum is exactly zero are ignored
/// (all-zero windows behind a relu stay zero under small probes).
pub(crate) fn min_window_gap<T: Scalar>(input: &Tensor<T>, window: usize, skip_zero_max: bool) -> f64 {
    let Ok((n, c, h, w)) = input.dims4() else { return f64::INFINITY };
    let x = input.data();
    let mut gap = f64::INFINITY;
    for plane in 0..n * c {
        for oy in 0..h / window {
            for ox in 0..w / window {
                let mut vals: Vec<f64> = (0..window * window)
                    .map(|i| {
                        let (dy, dx) = (i / window, i % window);
                        x[plane * h * w + (oy * window + dy) * w + ox * window + dx].to_f64().unwrap()
                    })
                    .collect();
                vals.sort_by(|a, b| b.total_cmp(a));
                if vals.len() > 1 && !(skip_zero_max && vals[0] == 0.0) {
                    gap = gap.min(vals[0] - vals[1]);
                }
            }
        }
    }
    gap
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_window() {
        let x = Tensor::<f64>::new(&[1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let (y, s) = maxpool2d(&x, 2).unwrap();
        assert_eq!(y.data(), &[4.0]);
        assert_eq!(s.index, vec![3]);
    }

    #[test]
    fn constant_input_takes_first_index() {
        let x = Tensor::<f64>::full(&[2, 3, 4, 6], 0.5);
        let (y, s) = maxpool2d(&x, 2).unwrap();
        assert_eq!(y.shape(), &[2, 3, 2, 3]);
        assert!(y.data().iter().all(|&v| v == 0.5));
        assert!(s.index.iter().all(|&i| i == 0));
    }

    #[test]
    fn indivisible_extent_is_rejected() {
        let x = Tensor::<f64>::zeros(&[1, 1, 3, 4]);
        assert!(maxpool2d(&x, 2).is_err());
    }

    #[test]
    fn unpool_places_values_at_switches() {
        let x = Tensor::<f64>::new(&[1, 1, 2, 4], vec![0.0, 5.0, 1.0, 1.0, 2.0, 0.0, 0.0, 3.0]).unwrap();
        let (y, s) = maxpool2d(&x, 2).unwrap();
        assert_eq!(y.data(), &[5.0, 3.0]);
        let u = max_unpool2d(&y, &s).unwrap();
        assert_eq!(u.data(), &[0.0, 5.0, 0.0, 0.0, 0.0, 0.0, 0.0, 3.0]);
    }

    #[test]
    fn upsample_and_adjoint() {
        let x = Tensor::<f64>::new(&[1, 1, 1, 2], vec![1.0, 2.0]).unwrap();
        let y = upsample_nearest(&x, 2).unwrap();
        assert_eq!(y.data(), &[1.0, 1.0, 2.0, 2.0, 1.0, 1.0, 2.0, 2.0]);
        let g = upsample_backward(&y, 2);
        assert_eq!(g.data(), &[4.0, 8.0]);
    }
}
