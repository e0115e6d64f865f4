//! Forward and backward kernels. Every function here is pure and
//! deterministic: reductions always run in a fixed index order.

pub mod conv;
pub mod loss;
pub mod norm;
pub mod pool;

use crate::tensor::Scalar;

pub use conv::{conv2d, transposed_conv2d, transposed_conv2d_to, ConvGeometry};
pub use loss::{log_softmax_nll, mse, Reduction};
pub use norm::{batchnorm, BatchNormMode, RunningStats, BN_EPS, BN_MOMENTUM};
pub use pool::{max_unpool2d, maxpool2d, upsample_nearest, Switches};

/// Row-major matrix view over a slice.
#[derive(Clone, Copy)]
pub(crate) struct MatRef<'a, T> {
    pub data: &'a [T],
    pub rs: isize,
    pub cs: isize,
}

impl<'a, T> MatRef<'a, T> {
    pub fn rows(data: &'a [T], cols: usize) -> Self {
        Self { data, rs: cols as isize, cs: 1 }
    }

    /// Transposed view of a row-major `rows x cols` matrix.
    pub fn t(data: &'a [T], cols: usize) -> Self {
        Self { data, rs: 1, cs: cols as isize }
    }
}

/// `c = a * b^T` for row-major `a` (m x len) and `b` (n x len), written
/// row-major into `c` (m x n). Each entry is summed in a fixed order.
pub(crate) fn gemm_nt<T: Scalar>(a: &[T], m: usize, b: &[T], n: usize, len: usize, c: &mut [T]) {
    const L: usize = 16;
    assert!(a.len() >= m * len && b.len() >= n * len && c.len() >= m * n, "gemm_nt: out of bounds");
    let body = len / L * L;
    let mut i = 0;
    while i < m {
        let rows = (m - i).min(4);
        for j in 0..n {
            let bj = &b[j * len..(j + 1) * len];
            let mut acc = [[T::zero(); L]; 4];
            for t in (0..body).step_by(L) {
                let bv = &bj[t..t + L];
                for (r, acc_r) in acc.iter_mut().enumerate().take(rows) {
                    let av = &a[(i + r) * len + t..(i + r) * len + t + L];
                    for l in 0..L {
                        acc_r[l] = acc_r[l] + av[l] * bv[l];
                    }
                }
            }
            for (r, acc_r) in acc.iter().enumerate().take(rows) {
                let mut s = acc_r.iter().fold(T::zero(), |x, &y| x + y);
                for t in body..len {
                    s = s + a[(i + r) * len + t] * bj[t];
                }
                c[(i + r) * n + j] = s;
            }
        }
        i += rows;
    }
}

/// `c (m x n, row stride rsc) = a (m x k) * b (k x n) + beta * c`.
pub(crate) fn gemm<T: Scalar>(
    m: usize,
    k: usize,
    n: usize,
    a: MatRef<'_, T>,
    b: MatRef<'_, T>,
    beta: T,
    c: &mut [T],
    rsc: usize,
) {
    if m == 0 || n == 0 {
        return;
    }
    let max_index = |rs: isize, cs: isize, r: usize, cc: usize| {
        (r.saturating_sub(1) as isize * rs + cc.saturating_sub(1) as isize * cs) as usize
    };
    assert!(k == 0 || max_index(a.rs, a.cs, m, k) < a.data.len(), "gemm: a out of bounds");
    assert!(k == 0 || max_index(b.rs, b.cs, k, n) < b.data.len(), "gemm: b out of bounds");
    assert!(max_index(rsc as isize, 1, m, n) < c.len(), "gemm: c out of bounds");
    // SAFETY: the asserts above keep every addressed element inside its slice,
    // and `c` is uniquely borrowed.
    unsafe {
        T::gemm(
            m,
            k,
            n,
            T::one(),
            a.data.as_ptr(),
            a.rs,
            a.cs,
            b.data.as_ptr(),
            b.rs,
            b.cs,
            beta,
            c.as_mut_ptr(),
            rsc as isize,
            1,
        );
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gemm_matches_naive() {
        let a: Vec<f64> = (0..6).map(|v| v as f64).collect(); // 2x3
        let b: Vec<f64> = (0..12).map(|v| v as f64 * 0.5).collect(); // 3x4
        let mut c = vec![0.0; 8];
        gemm(2, 3, 4, MatRef::rows(&a, 3), MatRef::rows(&b, 4), 0.0, &mut c, 4);
        for i in 0..2 {
            for j in 0..4 {
                let want: f64 = (0..3).map(|p| a[i * 3 + p] * b[p * 4 + j]).sum();
                assert_eq!(c[i * 4 + j], want);
            }
        }
        // a^T (3x2) * a (2x3)
        let mut g = vec![0.0; 9];
        gemm(3, 2, 3, MatRef::t(&a, 3), MatRef::rows(&a, 3), 0.0, &mut g, 3);
        assert_eq!(g[0], 0.0 * 0.0 + 3.0 * 3.0);
        assert_eq!(g[5], 1.0 * 2.0 + 4.0 * 5.0);
    }
}
