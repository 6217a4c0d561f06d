//! Dense kernels behind the graph ops.
//!
//! General matrix products go through `matrixmultiply`. When the left operand
//! is mostly zeros (two-hot inputs) a row-axpy loop that skips zeros is used
//! instead; both paths compute the same sums in the same per-element order up
//! to floating point association.

use crate::error::{Error, Result};

const SPARSE_DENSITY: f64 = 0.1;

/// `c = alpha * a * b + beta * c` with explicit row/column strides.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (a_rs, a_cs): (usize, usize),
    b: &[f64],
    (b_rs, b_cs): (usize, usize),
    beta: f64,
    c: &mut [f64],
    c_rs: usize,
) {
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        c.iter_mut().for_each(|v| *v *= beta);
        return;
    }
    assert!((m - 1) * a_rs + (k - 1) * a_cs < a.len());
    assert!((k - 1) * b_rs + (n - 1) * b_cs < b.len());
    assert!((m - 1) * c_rs + n - 1 < c.len());
    // SAFETY: the asserts above bound every index the kernel touches.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            a_rs as isize,
            a_cs as isize,
            b.as_ptr(),
            b_rs as isize,
            b_cs as isize,
            beta,
            c.as_mut_ptr(),
            c_rs as isize,
            1,
        );
    }
}

fn density(x: &[f64]) -> f64 {
    if x.is_empty() {
        return 1.0;
    }
    x.iter().filter(|v| **v != 0.0).count() as f64 / x.len() as f64
}

#[inline]
fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// `out[m×n] = x[m×k] · w[k×n] + bias[n]`.
pub fn linear(x: &[f64], w: &[f64], bias: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(m * n);
    for _ in 0..m {
        out.extend_from_slice(bias);
    }
    if density(x) < SPARSE_DENSITY {
        for i in 0..m {
            let row = &mut out[i * n..(i + 1) * n];
            for (p, &xv) in x[i * k..(i + 1) * k].iter().enumerate() {
                if xv != 0.0 {
                    axpy(xv, &w[p * n..(p + 1) * n], row);
                }
            }
        }
    } else {
        gemm(m, k, n, x, (k, 1), w, (n, 1), 1.0, &mut out, n);
    }
    out
}

/// `acc[k×n] += xᵀ · dy` for `x[m×k]`, `dy[m×n]`.
pub fn accumulate_xt_dy(x: &[f64], dy: &[f64], m: usize, k: usize, n: usize, acc: &mut [f64]) {
    if density(x) < SPARSE_DENSITY {
        for i in 0..m {
            let dyr = &dy[i * n..(i + 1) * n];
            for (p, &xv) in x[i * k..(i + 1) * k].iter().enumerate() {
                if xv != 0.0 {
                    axpy(xv, dyr, &mut acc[p * n..(p + 1) * n]);
                }
            }
        }
    } else {
        gemm(k, m, n, x, (1, k), dy, (n, 1), 1.0, acc, n);
    }
}

/// `dy[m×n] · wᵀ` for `w[k×n]`, giving `m×k`.
pub fn dy_wt(dy: &[f64], w: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * k];
    gemm(m, n, k, dy, (n, 1), w, (1, n), 0.0, &mut out, k);
    out
}

/// Column sums of `dy[m×n]` added into `acc[n]`.
pub fn accumulate_col_sums(dy: &[f64], m: usize, n: usize, acc: &mut [f64]) {
    for i in 0..m {
        for (a, v) in acc.iter_mut().zip(&dy[i * n..(i + 1) * n]) {
            *a += v;
        }
    }
}

/// Geometry of a valid (no padding) 2-D convolution over `[batch, c, h, w]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub batch: usize,
    pub in_c: usize,
    pub h: usize,
    pub w: usize,
    pub out_c: usize,
    pub k: usize,
    pub stride: usize,
}

impl ConvGeom {
    pub fn new(input: &[usize], kernels: &[usize], stride: usize) -> Result<Self> {
        let [batch, in_c, h, w] = *input else {
            return Err(Error::dim(format!("conv input must be 4-D, got {input:?}")));
        };
        let [out_c, kc, kh, kw] = *kernels else {
            return Err(Error::dim(format!("conv kernels must be 4-D, got {kernels:?}")));
        };
        if kc != in_c {
            return Err(Error::dim(format!(
                "kernel expects {kc} input channels, input has {in_c}"
            )));
        }
        if kh != kw {
            return Err(Error::dim("only square kernels are supported"));
        }
        if stride == 0 {
            return Err(Error::dim("stride must be positive"));
        }
        if kh > h || kw > w {
            return Err(Error::dim(format!(
                "kernel {kh}x{kw} larger than input {h}x{w}"
            )));
        }
        Ok(ConvGeom { batch, in_c, h, w, out_c, k: kh, stride })
    }

    pub fn out_h(&self) -> usize {
        (self.h - self.k) / self.stride + 1
    }

    pub fn out_w(&self) -> usize {
        (self.w - self.k) / self.stride + 1
    }

    pub fn out_shape(&self) -> Vec<usize> {
        vec![self.batch, self.out_c, self.out_h(), self.out_w()]
    }

    fn in_len(&self) -> usize {
        self.in_c * self.h * self.w
    }

    fn out_len(&self) -> usize {
        self.out_c * self.out_h() * self.out_w()
    }

    fn kernel_len(&self) -> usize {
        self.out_c * self.in_c * self.k * self.k
    }
}

pub fn conv2d(x: &[f64], kernels: &[f64], bias: &[f64], g: &ConvGeom) -> Vec<f64> {
    let (oh, ow) = (g.out_h(), g.out_w());
    let mut out = vec![0.0; g.batch * g.out_len()];
    for b in 0..g.batch {
        let xb = &x[b * g.in_len()..(b + 1) * g.in_len()];
        let yb = &mut out[b * g.out_len()..(b + 1) * g.out_len()];
        for o in 0..g.out_c {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut s = bias[o];
                    for c in 0..g.in_c {
                        for ky in 0..g.k {
                            let xr = (c * g.h + oy * g.stride + ky) * g.w + ox * g.stride;
                            let kr = ((o * g.in_c + c) * g.k + ky) * g.k;
                            for kx in 0..g.k {
                                s += xb[xr + kx] * kernels[kr + kx];
                            }
                        }
                    }
                    yb[(o * oh + oy) * ow + ox] = s;
                }
            }
        }
    }
    out
}

/// Kernel and bias gradients of one batch row, written into `dk`/`db`.
fn conv2d_param_grads_row(xb: &[f64], dyb: &[f64], g: &ConvGeom, dk: &mut [f64], db: &mut [f64]) {
    let (oh, ow) = (g.out_h(), g.out_w());
    for o in 0..g.out_c {
        for oy in 0..oh {
            for ox in 0..ow {
                let d = dyb[(o * oh + oy) * ow + ox];
                if d == 0.0 {
                    continue;
                }
                db[o] += d;
                for c in 0..g.in_c {
                    for ky in 0..g.k {
                        let xr = (c * g.h + oy * g.stride + ky) * g.w + ox * g.stride;
                        let kr = ((o * g.in_c + c) * g.k + ky) * g.k;
                        for kx in 0..g.k {
                            dk[kr + kx] += d * xb[xr + kx];
                        }
                    }
                }
            }
        }
    }
}

/// Accumulates kernel/bias gradients. With `squared`, the per-row gradients
/// are squared before being summed.
pub fn conv2d_param_grads(
    x: &[f64],
    dy: &[f64],
    g: &ConvGeom,
    squared: bool,
    dk: &mut [f64],
    db: &mut [f64],
) {
    if !squared {
        for b in 0..g.batch {
            conv2d_param_grads_row(
                &x[b * g.in_len()..(b + 1) * g.in_len()],
                &dy[b * g.out_len()..(b + 1) * g.out_len()],
                g,
                dk,
                db,
            );
        }
        return;
    }
    let mut rk = vec![0.0; g.kernel_len()];
    let mut rb = vec![0.0; g.out_c];
    for b in 0..g.batch {
        rk.iter_mut().for_each(|v| *v = 0.0);
        rb.iter_mut().for_each(|v| *v = 0.0);
        conv2d_param_grads_row(
            &x[b * g.in_len()..(b + 1) * g.in_len()],
            &dy[b * g.out_len()..(b + 1) * g.out_len()],
            g,
            &mut rk,
            &mut rb,
        );
        for (a, v) in dk.iter_mut().zip(&rk) {
            *a += v * v;
        }
        for (a, v) in db.iter_mut().zip(&rb) {
            *a += v * v;
        }
    }
}

pub fn conv2d_input_grad(dy: &[f64], kernels: &[f64], g: &ConvGeom) -> Vec<f64> {
    let (oh, ow) = (g.out_h(), g.out_w());
    let mut dx = vec![0.0; g.batch * g.in_len()];
    for b in 0..g.batch {
        let dyb = &dy[b * g.out_len()..(b + 1) * g.out_len()];
        let dxb = &mut dx[b * g.in_len()..(b + 1) * g.in_len()];
        for o in 0..g.out_c {
            for oy in 0..oh {
                for ox in 0..ow {
                    let d = dyb[(o * oh + oy) * ow + ox];
                    if d == 0.0 {
                        continue;
                    }
                    for c in 0..g.in_c {
                        for ky in 0..g.k {
                            let xr = (c * g.h + oy * g.stride + ky) * g.w + ox * g.stride;
                            let kr = ((o * g.in_c + c) * g.k + ky) * g.k;
                            for kx in 0..g.k {
                                dxb[xr + kx] += d * kernels[kr + kx];
                            }
                        }
                    }
                }
            }
        }
    }
    dx
}

/// Row-wise softmax of `logits[m×n]`, stabilized by max subtraction.
pub fn softmax_rows(logits: &[f64], m: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let z = &logits[i * n..(i + 1) * n];
        let p = &mut out[i * n..(i + 1) * n];
        let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for (pi, zi) in p.iter_mut().zip(z) {
            *pi = (zi - max).exp();
            sum += *pi;
        }
        p.iter_mut().for_each(|v| *v /= sum);
    }
    out
}

/// `log Σ exp(z)` of one row, stabilized.
pub fn log_sum_exp(z: &[f64]) -> f64 {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + z.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
        let mut c = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                for p in 0..k {
                    c[i * n + j] += a[i * k + p] * b[p * n + j];
                }
            }
        }
        c
    }

    #[test]
    fn dense_and_sparse_paths_agree_with_naive_product() {
        let (m, k, n) = (5, 40, 7);
        let dense: Vec<f64> = (0..m * k).map(|i| ((i * 37) % 11) as f64 - 5.0).collect();
        let mut sparse = vec![0.0; m * k];
        for i in 0..m {
            sparse[i * k + i] = 1.0;
            sparse[i * k + 20 + i] = 2.0;
        }
        let w: Vec<f64> = (0..k * n).map(|i| ((i * 13) % 7) as f64 * 0.25).collect();
        let zero_bias = vec![0.0; n];
        for x in [&dense, &sparse] {
            let got = linear(x, &w, &zero_bias, m, k, n);
            let want = naive(x, &w, m, k, n);
            for (g, w) in got.iter().zip(&want) {
                assert!((g - w).abs() < 1e-12);
            }
            let dy: Vec<f64> = (0..m * n).map(|i| (i % 5) as f64 - 2.0).collect();
            let mut acc = vec![0.0; k * n];
            accumulate_xt_dy(x, &dy, m, k, n, &mut acc);
            let mut xt = vec![0.0; k * m];
            for i in 0..m {
                for p in 0..k {
                    xt[p * m + i] = x[i * k + p];
                }
            }
            let want = naive(&xt, &dy, k, m, n);
            for (g, w) in acc.iter().zip(&want) {
                assert!((g - w).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn conv_geometry_rejects_oversized_kernels() {
        assert!(ConvGeom::new(&[1, 1, 2, 2], &[1, 1, 3, 3], 1).is_err());
        let g = ConvGeom::new(&[1, 1, 16, 16], &[2, 1, 2, 2], 2).unwrap();
        assert_eq!(g.out_shape(), vec![1, 2, 8, 8]);
    }
}
