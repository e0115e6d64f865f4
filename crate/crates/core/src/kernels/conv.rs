//! 2-D convolution via im2col + GEMM, and its adjoint (transposed
//! convolution) via GEMM + col2im.

use super::{gemm, gemm_nt, MatRef};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Geometry of a convolution that reads a `channels x height x width`
/// image with a `kh x kw` window.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeometry {
    pub fn new(
        channels: usize,
        height: usize,
        width: usize,
        kh: usize,
        kw: usize,
        stride: usize,
        pad: usize,
    ) -> Result<Self> {
        if stride == 0 {
            return Err(Error::dim("stride must be >= 1"));
        }
        if height + 2 * pad < kh || width + 2 * pad < kw {
            return Err(Error::dim(format!(
                "kernel {kh}x{kw} (axes 2,3) larger than padded input {}x{} (axes 2,3)",
                height + 2 * pad,
                width + 2 * pad
            )));
        }
        Ok(Self {
            channels,
            height,
            width,
            kh,
            kw,
            stride,
            pad,
            out_h: (height + 2 * pad - kh) / stride + 1,
            out_w: (width + 2 * pad - kw) / stride + 1,
        })
    }

    pub fn col_rows(&self) -> usize {
        self.channels * self.kh * self.kw
    }

    pub fn positions(&self) -> usize {
        self.out_h * self.out_w
    }

    fn image_len(&self) -> usize {
        self.channels * self.height * self.width
    }
}

/// Output columns `lo..hi` whose input column `ox * stride + kj - pad`
/// lies inside the image.
fn valid_span(g: &ConvGeometry, kj: usize) -> (usize, usize) {
    let lo = g.pad.saturating_sub(kj).div_ceil(g.stride);
    let hi = if g.width + g.pad > kj { (g.width + g.pad - kj - 1) / g.stride + 1 } else { 0 };
    (lo.min(g.out_w), hi.min(g.out_w).max(lo.min(g.out_w)))
}

/// Unfold `n` images into a `(C*kh*kw) x (n*out_h*out_w)` row-major matrix.
pub(crate) fn im2col<T: Scalar>(x: &[T], n: usize, g: &ConvGeometry) -> Vec<T> {
    let p = g.positions();
    let cols_n = n * p;
    let mut cols = vec![T::zero(); g.col_rows() * cols_n];
    let pad = g.pad as isize;
    for c in 0..g.channels {
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let r = (c * g.kh + ki) * g.kw + kj;
                let row = &mut cols[r * cols_n..(r + 1) * cols_n];
                for b in 0..n {
                    let img = &x[b * g.image_len() + c * g.height * g.width..];
                    for oy in 0..g.out_h {
                        let iy = (oy * g.stride + ki) as isize - pad;
                        if iy < 0 || iy >= g.height as isize {
                            continue;
                        }
                        let src = &img[iy as usize * g.width..(iy as usize + 1) * g.width];
                        let dst = &mut row[b * p + oy * g.out_w..b * p + (oy + 1) * g.out_w];
                        let (lo, hi) = valid_span(g, kj);
                        if g.stride == 1 {
                            let off = (lo + kj) as isize - pad;
                            dst[lo..hi].copy_from_slice(&src[off as usize..off as usize + hi - lo]);
                        } else {
                            for ox in lo..hi {
                                dst[ox] = src[ox * g.stride + kj - g.pad];
                            }
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatter-add columns back into `n` images.
pub(crate) fn col2im<T: Scalar>(cols: &[T], n: usize, g: &ConvGeometry) -> Vec<T> {
    let p = g.positions();
    let cols_n = n * p;
    let mut x = vec![T::zero(); n * g.image_len()];
    let pad = g.pad as isize;
    for c in 0..g.channels {
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let r = (c * g.kh + ki) * g.kw + kj;
                let row = &cols[r * cols_n..(r + 1) * cols_n];
                for b in 0..n {
                    let base = b * g.image_len() + c * g.height * g.width;
                    for oy in 0..g.out_h {
                        let iy = (oy * g.stride + ki) as isize - pad;
                        if iy < 0 || iy >= g.height as isize {
                            continue;
                        }
                        let dst = &mut x[base + iy as usize * g.width..base + (iy as usize + 1) * g.width];
                        let src = &row[b * p + oy * g.out_w..b * p + (oy + 1) * g.out_w];
                        let (lo, hi) = valid_span(g, kj);
                        if g.stride == 1 && hi > lo {
                            let off = lo + kj - g.pad;
                            for (d, &s) in dst[off..off + hi - lo].iter_mut().zip(&src[lo..hi]) {
                                *d = *d + s;
                            }
                        } else {
                            for ox in lo..hi {
                                let ix = ox * g.stride + kj - g.pad;
                                dst[ix] = dst[ix] + src[ox];
                            }
                        }
                    }
                }
            }
        }
    }
    x
}

/// `[o, n*p]` to `[n, o, p]`.
fn channel_major_to_nchw<T: Scalar>(flat: &[T], n: usize, o: usize, p: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(n * o * p);
    for b in 0..n {
        for c in 0..o {
            out.extend_from_slice(&flat[c * n * p + b * p..c * n * p + (b + 1) * p]);
        }
    }
    out
}

/// `[n, o, p]` to `[o, n*p]`.
fn nchw_to_channel_major<T: Scalar>(x: &[T], n: usize, o: usize, p: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(n * o * p);
    for c in 0..o {
        for b in 0..n {
            out.extend_from_slice(&x[(b * o + c) * p..(b * o + c + 1) * p]);
        }
    }
    out
}

fn kernel_dims<T: Scalar>(kernel: &Tensor<T>) -> Result<(usize, usize, usize, usize)> {
    kernel.dims4().map_err(|_| Error::dim(format!("kernel must be rank 4 (OIHW), got shape {:?}", kernel.shape())))
}

/// Saved state of a convolution forward pass.
pub struct ConvForward<T> {
    pub output: Tensor<T>,
    pub cols: Vec<T>,
    pub geometry: ConvGeometry,
}

/// Cross-correlation of an NCHW input with an OIHW kernel, zero padding.
pub fn conv2d_forward<T: Scalar>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    stride: usize,
    pad: usize,
) -> Result<ConvForward<T>> {
    let (n, c, h, w) = input.dims4()?;
    let (o, ki, kh, kw) = kernel_dims(kernel)?;
    if c != ki {
        return Err(Error::dim(format!("input channels (axis 1) = {c} but kernel in-channels (axis 1) = {ki}")));
    }
    let g = ConvGeometry::new(c, h, w, kh, kw, stride, pad)?;
    let cols = im2col(input.data(), n, &g);
    let p = g.positions();
    let r = g.col_rows();
    let mut flat = vec![T::zero(); o * n * p];
    gemm(o, r, n * p, MatRef::rows(kernel.data(), r), MatRef::rows(&cols, n * p), T::zero(), &mut flat, n * p);
    let out = channel_major_to_nchw(&flat, n, o, p);
    Ok(ConvForward { output: Tensor::new(&[n, o, g.out_h, g.out_w], out)?, cols, geometry: g })
}

pub fn conv2d<T: Scalar>(input: &Tensor<T>, kernel: &Tensor<T>, stride: usize, pad: usize) -> Result<Tensor<T>> {
    Ok(conv2d_forward(input, kernel, stride, pad)?.output)
}

/// Gradients of a convolution with respect to its input and kernel.
pub fn conv2d_backward<T: Scalar>(
    grad_out: &Tensor<T>,
    cols: &[T],
    kernel: &Tensor<T>,
    g: &ConvGeometry,
    need_input: bool,
    need_kernel: bool,
) -> (Option<Tensor<T>>, Option<Tensor<T>>) {
    let n = grad_out.shape()[0];
    let o = kernel.shape()[0];
    let p = g.positions();
    let r = g.col_rows();
    let dy = nchw_to_channel_major(grad_out.data(), n, o, p);

    let dk = need_kernel.then(|| {
        let mut dk = vec![T::zero(); o * r];
        gemm_nt(&dy, o, cols, r, n * p, &mut dk);
        Tensor::new(kernel.shape(), dk).expect("kernel shape")
    });

    let dx = need_input.then(|| {
        let mut dcols = vec![T::zero(); r * n * p];
        gemm(r, o, n * p, MatRef::t(kernel.data(), r), MatRef::rows(&dy, n * p), T::zero(), &mut dcols, n * p);
        let dx = col2im(&dcols, n, g);
        Tensor::new(&[n, g.channels, g.height, g.width], dx).expect("input shape")
    });

    (dx, dk)
}

/// Transposed convolution: the exact adjoint of [`conv2d`] with the same
/// kernel. `input` has the conv's output channels (kernel axis 0) and the
/// result has the conv's input channels (kernel axis 1). Output extent is
/// `(H - 1) * stride - 2 * pad + k`.
pub fn transposed_conv2d<T: Scalar>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    stride: usize,
    pad: usize,
) -> Result<Tensor<T>> {
    let (_, _, h, w) = input.dims4()?;
    let (_, _, kh, kw) = kernel_dims(kernel)?;
    let out_h = ((h - 1) * stride + kh)
        .checked_sub(2 * pad)
        .ok_or_else(|| Error::dim("padding too large for transposed conv"))?;
    let out_w = ((w - 1) * stride + kw)
        .checked_sub(2 * pad)
        .ok_or_else(|| Error::dim("padding too large for transposed conv"))?;
    transposed_conv2d_to(input, kernel, stride, pad, out_h, out_w)
}

/// Transposed convolution with an explicit output extent, which must be one
/// the forward convolution maps back onto `input`'s extent.
pub fn transposed_conv2d_to<T: Scalar>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    stride: usize,
    pad: usize,
    out_h: usize,
    out_w: usize,
) -> Result<Tensor<T>> {
    let g = transposed_geometry(input, kernel, stride, pad, out_h, out_w)?;
    Ok(transposed_forward(input, kernel, &g))
}

pub(crate) fn transposed_geometry<T: Scalar>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    stride: usize,
    pad: usize,
    out_h: usize,
    out_w: usize,
) -> Result<ConvGeometry> {
    let (_, c, h, w) = input.dims4()?;
    let (ko, ki, kh, kw) = kernel_dims(kernel)?;
    if out_h == 0 || out_w == 0 {
        return Err(Error::dim(format!("transposed conv output {out_h}x{out_w} (axes 2,3) is empty")));
    }
    if c != ko {
        return Err(Error::dim(format!(
            "input channels (axis 1) = {c} but transposed kernel channels (axis 0) = {ko}"
        )));
    }
    let g = ConvGeometry::new(ki, out_h, out_w, kh, kw, stride, pad)?;
    if g.out_h != h || g.out_w != w {
        return Err(Error::dim(format!(
            "output {out_h}x{out_w} (axes 2,3) does not convolve back to input {h}x{w} (axes 2,3)"
        )));
    }
    Ok(g)
}

pub(crate) fn transposed_forward<T: Scalar>(input: &Tensor<T>, kernel: &Tensor<T>, g: &ConvGeometry) -> Tensor<T> {
    let n = input.shape()[0];
    let cx = kernel.shape()[0];
    let p = g.positions();
    let r = g.col_rows();
    let x = nchw_to_channel_major(input.data(), n, cx, p);
    let mut cols = vec![T::zero(); r * n * p];
    gemm(r, cx, n * p, MatRef::t(kernel.data(), r), MatRef::rows(&x, n * p), T::zero(), &mut cols, n * p);
    let y = col2im(&cols, n, g);
    Tensor::new(&[n, g.channels, g.height, g.width], y).expect("output shape")
}

/// Gradients of a transposed convolution with respect to input and kernel.
pub(crate) fn transposed_backward<T: Scalar>(
    grad_out: &Tensor<T>,
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    g: &ConvGeometry,
    need_input: bool,
    need_kernel: bool,
) -> (Option<Tensor<T>>, Option<Tensor<T>>) {
    let n = input.shape()[0];
    let cx = kernel.shape()[0];
    let p = g.positions();
    let r = g.col_rows();
    let dcols = im2col(grad_out.data(), n, g);

    let dx = need_input.then(|| {
        let mut flat = vec![T::zero(); cx * n * p];
        gemm(cx, r, n * p, MatRef::rows(kernel.data(), r), MatRef::rows(&dcols, n * p), T::zero(), &mut flat, n * p);
        Tensor::new(input.shape(), channel_major_to_nchw(&flat, n, cx, p)).expect("input shape")
    });

    let dk = need_kernel.then(|| {
        let x = nchw_to_channel_major(input.data(), n, cx, p);
        let mut dk = vec![T::zero(); cx * r];
        gemm_nt(&x, cx, &dcols, r, n * p, &mut dk);
        Tensor::new(kernel.shape(), dk).expect("kernel shape")
    });

    (dx, dk)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::new(shape, v.to_vec()).unwrap()
    }

    #[test]
    fn scalar_kernel_scales() {
        let x = Tensor::<f64>::ones(&[1, 1, 3, 3]);
        let k = t(&[1, 1, 1, 1], &[2.0]);
        let y = conv2d(&x, &k, 1, 0).unwrap();
        assert_eq!(y.shape(), &[1, 1, 3, 3]);
        assert!(y.data().iter().all(|&v| v == 2.0));
    }

    #[test]
    fn identity_kernel_takes_trace() {
        let x = t(&[1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0]);
        let k = t(&[1, 1, 2, 2], &[1.0, 0.0, 0.0, 1.0]);
        let y = conv2d(&x, &k, 1, 0).unwrap();
        assert_eq!(y.shape(), &[1, 1, 1, 1]);
        assert_eq!(y.data(), &[5.0]);
    }

    #[test]
    fn transposed_impulse_response() {
        let x = t(&[1, 1, 1, 1], &[1.0]);
        let k = t(&[1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0]);
        let y = transposed_conv2d(&x, &k, 1, 0).unwrap();
        assert_eq!(y.shape(), &[1, 1, 2, 2]);
        assert_eq!(y.data(), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn transposed_stride_two_doubles_extent() {
        let x = Tensor::<f64>::ones(&[1, 1, 4, 4]);
        let k = Tensor::<f64>::ones(&[1, 1, 2, 2]);
        let y = transposed_conv2d(&x, &k, 2, 0).unwrap();
        assert_eq!(y.shape(), &[1, 1, 8, 8]);
        assert!(y.data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn channel_mismatch_names_axes() {
        let x = Tensor::<f64>::ones(&[1, 3, 4, 4]);
        let k = Tensor::<f64>::ones(&[2, 2, 3, 3]);
        let err = conv2d(&x, &k, 1, 0).unwrap_err().to_string();
        assert!(err.contains("axis 1"), "{err}");
        assert!(conv2d(&x, &Tensor::ones(&[2, 3, 3, 3]), 0, 0).is_err());
    }

    #[test]
    fn transposed_rejects_incompatible_output() {
        let x = Tensor::<f64>::ones(&[1, 1, 4, 4]);
        let k = Tensor::<f64>::ones(&[1, 1, 3, 3]);
        assert!(transposed_conv2d_to(&x, &k, 1, 1, 5, 4).is_err());
        // stride 2 with output_padding: 7 and 8 both convolve back to 4
        let k2 = Tensor::<f64>::ones(&[1, 1, 2, 2]);
        assert!(transposed_conv2d_to(&x, &k2, 2, 0, 9, 8).is_ok());
    }
}
