//! Forward and backward kernels on raw row-major buffers.
//!
//! Work is split per batch sample; every cross-sample reduction runs
//! sequentially in sample order so results do not depend on the number of
//! worker threads.

use rayon::prelude::*;

/// `c = a · b (+ c when accumulate)`, with `a` logically `m × k` and `b`
/// logically `k × n`; `*_t` selects the transposed storage of each operand.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_t: bool,
    b: &[f64],
    b_t: bool,
    c: &mut [f64],
    accumulate: bool,
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: the strides above address exactly the `m*k`, `k*n` and `m*n`
    // elements of the slices, whose lengths are checked by the callers.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub batch: usize,
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeom {
    fn patch_len(&self) -> usize {
        self.cin * self.k * self.k
    }

    fn out_plane(&self) -> usize {
        self.oh * self.ow
    }
}

fn im2col(x: &[f64], g: &ConvGeom, cols: &mut [f64]) {
    let plane = g.out_plane();
    for c in 0..g.cin {
        let xc = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (c * g.k + ky) * g.k + kx;
                let dst = &mut cols[row * plane..(row + 1) * plane];
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    let drow = &mut dst[oy * g.ow..(oy + 1) * g.ow];
                    if iy < 0 || iy >= g.h as isize {
                        drow.fill(0.0);
                        continue;
                    }
                    let src = &xc[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, d) in drow.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        *d = if ix < 0 || ix >= g.w as isize {
                            0.0
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

fn col2im(cols: &[f64], g: &ConvGeom, dx: &mut [f64]) {
    let plane = g.out_plane();
    for c in 0..g.cin {
        let dxc = &mut dx[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (c * g.k + ky) * g.k + kx;
                let src = &cols[row * plane..(row + 1) * plane];
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let drow = &mut dxc[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for ox in 0..g.ow {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            drow[ix as usize] += src[oy * g.ow + ox];
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn conv2d_forward(x: &[f64], weight: &[f64], bias: Option<&[f64]>, g: &ConvGeom) -> Vec<f64> {
    let in_len = g.cin * g.h * g.w;
    let out_len = g.cout * g.out_plane();
    let mut out = vec![0.0; g.batch * out_len];
    out.par_chunks_mut(out_len.max(1))
        .enumerate()
        .for_each(|(b, ob)| {
            let mut cols = vec![0.0; g.patch_len() * g.out_plane()];
            im2col(&x[b * in_len..(b + 1) * in_len], g, &mut cols);
            gemm(g.cout, g.patch_len(), g.out_plane(), weight, false, &cols, false, ob, false);
            if let Some(bias) = bias {
                for (co, row) in ob.chunks_mut(g.out_plane()).enumerate() {
                    row.iter_mut().for_each(|v| *v += bias[co]);
                }
            }
        });
    out
}

pub(crate) struct ConvGrads {
    pub input: Vec<f64>,
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

pub(crate) fn conv2d_backward(x: &[f64], weight: &[f64], grad_out: &[f64], g: &ConvGeom) -> ConvGrads {
    let in_len = g.cin * g.h * g.w;
    let out_len = g.cout * g.out_plane();
    let wlen = g.cout * g.patch_len();
    let mut dx = vec![0.0; g.batch * in_len];
    let per_sample_dw: Vec<Vec<f64>> = dx
        .par_chunks_mut(in_len.max(1))
        .enumerate()
        .map(|(b, dxb)| {
            let gy = &grad_out[b * out_len..(b + 1) * out_len];
            let mut cols = vec![0.0; g.patch_len() * g.out_plane()];
            im2col(&x[b * in_len..(b + 1) * in_len], g, &mut cols);
            let mut dw = vec![0.0; wlen];
            gemm(g.cout, g.out_plane(), g.patch_len(), gy, false, &cols, true, &mut dw, false);
            gemm(g.patch_len(), g.cout, g.out_plane(), weight, true, gy, false, &mut cols, false);
            col2im(&cols, g, dxb);
            dw
        })
        .collect();
    let mut dw = vec![0.0; wlen];
    for part in &per_sample_dw {
        dw.iter_mut().zip(part).for_each(|(a, b)| *a += b);
    }
    let mut db = vec![0.0; g.cout];
    for b in 0..g.batch {
        for (co, dbc) in db.iter_mut().enumerate() {
            let start = b * out_len + co * g.out_plane();
            *dbc += grad_out[start..start + g.out_plane()].iter().sum::<f64>();
        }
    }
    ConvGrads {
        input: dx,
        weight: dw,
        bias: db,
    }
}

/// Max pooling; returns the pooled values and, per output cell, the flat
/// input index that won (first in row-major order on ties).
pub(crate) fn maxpool_forward(
    x: &[f64],
    [b, c, h, w]: [usize; 4],
    k: usize,
    stride: usize,
) -> (Vec<f64>, Vec<usize>, [usize; 4]) {
    let oh = (h - k) / stride + 1;
    let ow = (w - k) / stride + 1;
    let mut out = Vec::with_capacity(b * c * oh * ow);
    let mut arg = Vec::with_capacity(b * c * oh * ow);
    for plane in 0..b * c {
        let base = plane * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = f64::NEG_INFINITY;
                let mut best_idx = base + oy * stride * w + ox * stride;
                for ky in 0..k {
                    for kx in 0..k {
                        let idx = base + (oy * stride + ky) * w + ox * stride + kx;
                        if x[idx] > best {
                            best = x[idx];
                            best_idx = idx;
                        }
                    }
                }
                out.push(x[best_idx]);
                arg.push(best_idx);
            }
        }
    }
    (out, arg, [b, c, oh, ow])
}

pub(crate) struct BatchNormForward {
    pub output: Vec<f64>,
    pub xhat: Vec<f64>,
    pub inv_std: Vec<f64>,
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

pub(crate) fn batchnorm_train_forward(
    x: &[f64],
    [b, c, h, w]: [usize; 4],
    gamma: &[f64],
    beta: &[f64],
    eps: f64,
) -> BatchNormForward {
    let plane = h * w;
    let n = (b * plane) as f64;
    let mut mean = vec![0.0; c];
    let mut var = vec![0.0; c];
    for ch in 0..c {
        let mut s = 0.0;
        for bi in 0..b {
            let start = (bi * c + ch) * plane;
            s += x[start..start + plane].iter().sum::<f64>();
        }
        let m = s / n;
        let mut ss = 0.0;
        for bi in 0..b {
            let start = (bi * c + ch) * plane;
            ss += x[start..start + plane].iter().map(|v| (v - m) * (v - m)).sum::<f64>();
        }
        mean[ch] = m;
        var[ch] = ss / n;
    }
    let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
    let mut xhat = vec![0.0; x.len()];
    let mut output = vec![0.0; x.len()];
    for bi in 0..b {
        for ch in 0..c {
            let start = (bi * c + ch) * plane;
            for i in start..start + plane {
                xhat[i] = (x[i] - mean[ch]) * inv_std[ch];
                output[i] = gamma[ch] * xhat[i] + beta[ch];
            }
        }
    }
    BatchNormForward {
        output,
        xhat,
        inv_std,
        mean,
        var,
    }
}

/// Returns `(d_input, d_gamma, d_beta)` for training-mode batch norm.
pub(crate) fn batchnorm_train_backward(
    grad_out: &[f64],
    xhat: &[f64],
    inv_std: &[f64],
    gamma: &[f64],
    [b, c, h, w]: [usize; 4],
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let plane = h * w;
    let n = (b * plane) as f64;
    let mut dgamma = vec![0.0; c];
    let mut dbeta = vec![0.0; c];
    for bi in 0..b {
        for ch in 0..c {
            let start = (bi * c + ch) * plane;
            for i in start..start + plane {
                dgamma[ch] += grad_out[i] * xhat[i];
                dbeta[ch] += grad_out[i];
            }
        }
    }
    let mut dx = vec![0.0; grad_out.len()];
    for bi in 0..b {
        for ch in 0..c {
            let scale = gamma[ch] * inv_std[ch] / n;
            let start = (bi * c + ch) * plane;
            for i in start..start + plane {
                dx[i] = scale * (n * grad_out[i] - dbeta[ch] - xhat[i] * dgamma[ch]);
            }
        }
    }
    (dx, dgamma, dbeta)
}

/// Source coordinate of one output line under align-corners resampling:
/// `(lower index, upper index, weight of upper)`.
pub(crate) fn align_corners_axis(src: usize, dst: usize) -> Vec<(usize, usize, f64)> {
    (0..dst)
        .map(|i| {
            if dst == 1 || src == 1 {
                return (0, 0, 0.0);
            }
            let pos = (i * (src - 1)) as f64 / (dst - 1) as f64;
            let lo = (pos.floor() as usize).min(src - 1);
            let hi = (lo + 1).min(src - 1);
            (lo, hi, pos - lo as f64)
        })
        .collect()
}

pub(crate) fn upsample_forward(x: &[f64], [b, c, h, w]: [usize; 4], th: usize, tw: usize) -> Vec<f64> {
    let rows = align_corners_axis(h, th);
    let cols = align_corners_axis(w, tw);
    let mut out = vec![0.0; b * c * th * tw];
    for plane in 0..b * c {
        let src = &x[plane * h * w..(plane + 1) * h * w];
        let dst = &mut out[plane * th * tw..(plane + 1) * th * tw];
        for (oy, &(y0, y1, wy)) in rows.iter().enumerate() {
            for (ox, &(x0, x1, wx)) in cols.iter().enumerate() {
                let top = (1.0 - wx) * src[y0 * w + x0] + wx * src[y0 * w + x1];
                let bottom = (1.0 - wx) * src[y1 * w + x0] + wx * src[y1 * w + x1];
                dst[oy * tw + ox] = (1.0 - wy) * top + wy * bottom;
            }
        }
    }
    out
}

pub(crate) fn upsample_backward(grad_out: &[f64], [b, c, h, w]: [usize; 4], th: usize, tw: usize) -> Vec<f64> {
    let rows = align_corners_axis(h, th);
    let cols = align_corners_axis(w, tw);
    let mut dx = vec![0.0; b * c * h * w];
    for plane in 0..b * c {
        let g = &grad_out[plane * th * tw..(plane + 1) * th * tw];
        let d = &mut dx[plane * h * w..(plane + 1) * h * w];
        for (oy, &(y0, y1, wy)) in rows.iter().enumerate() {
            for (ox, &(x0, x1, wx)) in cols.iter().enumerate() {
                let go = g[oy * tw + ox];
                d[y0 * w + x0] += (1.0 - wy) * (1.0 - wx) * go;
                d[y0 * w + x1] += (1.0 - wy) * wx * go;
                d[y1 * w + x0] += wy * (1.0 - wx) * go;
                d[y1 * w + x1] += wy * wx * go;
            }
        }
    }
    dx
}

/// Logistic function, kept strictly inside (0, 1) in f64.
pub fn sigmoid_scalar(x: f64) -> f64 {
    let s = if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    };
    s.clamp(f64::MIN_POSITIVE, 1.0 - f64::EPSILON / 2.0)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_matmul(m: usize, k: usize, n: usize, a: &[f64], b: &[f64]) -> Vec<f64> {
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

    fn transpose(rows: usize, cols: usize, a: &[f64]) -> Vec<f64> {
        let mut t = vec![0.0; a.len()];
        for i in 0..rows {
            for j in 0..cols {
                t[j * rows + i] = a[i * cols + j];
            }
        }
        t
    }

    #[test]
    fn gemm_transposes_match_naive() {
        let (m, k, n) = (3, 4, 5);
        let a: Vec<f64> = (0..m * k).map(|i| i as f64 * 0.5 - 1.0).collect();
        let b: Vec<f64> = (0..k * n).map(|i| (i as f64).sin()).collect();
        let expect = naive_matmul(m, k, n, &a, &b);
        let at = transpose(m, k, &a);
        let bt = transpose(k, n, &b);
        for (aa, a_t) in [(&a, false), (&at, true)] {
            for (bb, b_t) in [(&b, false), (&bt, true)] {
                let mut c = vec![0.0; m * n];
                gemm(m, k, n, aa, a_t, bb, b_t, &mut c, false);
                for (x, y) in c.iter().zip(&expect) {
                    assert!((x - y).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn align_corners_endpoints_are_exact() {
        let axis = align_corners_axis(2, 3);
        assert_eq!(axis[0], (0, 1, 0.0));
        assert_eq!(axis[1], (0, 1, 0.5));
        assert_eq!(axis[2].2 + axis[2].0 as f64, 1.0);
    }

    #[test]
    fn sigmoid_stays_open() {
        assert!(sigmoid_scalar(1e3) < 1.0);
        assert!(sigmoid_scalar(-1e3) > 0.0);
        assert_eq!(sigmoid_scalar(0.0), 0.5);
    }
}
