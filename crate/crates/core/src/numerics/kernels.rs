//! Raw compute kernels behind the tape operations.
//!
//! Kernels are pure slice-level routines. Batch loops parallelize over
//! samples (or output rows) through [`crate::par::map_indexed`]; every
//! cross-sample reduction folds the per-sample partials in index order,
//! which keeps results identical between the parallel and sequential
//! builds.

use crate::numerics::Real;
use crate::par;

/// `a (m×k) @ b (k×n)`, parallel over output rows.
pub fn matmul(a: &[Real], b: &[Real], m: usize, k: usize, n: usize) -> Vec<Real> {
    let rows = par::map_indexed(m, |i| {
        let mut row = vec![0.0; n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (j, bv) in brow.iter().enumerate() {
                row[j] += av * bv;
            }
        }
        row
    });
    flatten_rows(rows, n)
}

/// `a (m×k) @ b^T` where `b` is stored as `(n×k)`.
pub fn matmul_nt(a: &[Real], b: &[Real], m: usize, k: usize, n: usize) -> Vec<Real> {
    let rows = par::map_indexed(m, |i| {
        let arow = &a[i * k..(i + 1) * k];
        (0..n)
            .map(|j| {
                let brow = &b[j * k..(j + 1) * k];
                dot(arow, brow)
            })
            .collect::<Vec<_>>()
    });
    flatten_rows(rows, n)
}

/// `a^T @ b` where `a` is `(p×m)` and `b` is `(p×n)`; output `(m×n)`.
pub fn matmul_tn(a: &[Real], b: &[Real], p: usize, m: usize, n: usize) -> Vec<Real> {
    let rows = par::map_indexed(m, |i| {
        let mut row = vec![0.0; n];
        for r in 0..p {
            let av = a[r * m + i];
            if av == 0.0 {
                continue;
            }
            let brow = &b[r * n..(r + 1) * n];
            for (j, bv) in brow.iter().enumerate() {
                row[j] += av * bv;
            }
        }
        row
    });
    flatten_rows(rows, n)
}

pub fn dot(a: &[Real], b: &[Real]) -> Real {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn flatten_rows(rows: Vec<Vec<Real>>, n: usize) -> Vec<Real> {
    let mut out = Vec::with_capacity(rows.len() * n);
    for r in rows {
        out.extend_from_slice(&r);
    }
    out
}

/// Output length of a 1-D convolution.
pub fn conv_out_len(l: usize, kernel: usize, pad: usize) -> usize {
    (l + 2 * pad).saturating_sub(kernel - 1)
}

/// Single-sample 1-D convolution, stride 1, symmetric zero padding.
///
/// `input` is `(c_in, l)`, `weight` is `(c_out, c_in, kernel)` and the
/// output is `(c_out, l_out)`.
#[allow(clippy::too_many_arguments)]
pub fn conv1d_sample(
    input: &[Real],
    weight: &[Real],
    bias: &[Real],
    c_in: usize,
    l: usize,
    c_out: usize,
    kernel: usize,
    pad: usize,
) -> Vec<Real> {
    let l_out = conv_out_len(l, kernel, pad);
    let mut out = vec![0.0; c_out * l_out];
    for co in 0..c_out {
        let orow = &mut out[co * l_out..(co + 1) * l_out];
        orow.fill(bias[co]);
        for ci in 0..c_in {
            let xrow = &input[ci * l..(ci + 1) * l];
            let wrow = &weight[(co * c_in + ci) * kernel..(co * c_in + ci + 1) * kernel];
            for (j, &w) in wrow.iter().enumerate() {
                if w == 0.0 {
                    continue;
                }
                // output t reads input index t + j - pad
                let t_lo = pad.saturating_sub(j);
                let t_hi = (l + pad - j).min(l_out);
                for (t, o) in orow.iter_mut().enumerate().take(t_hi).skip(t_lo) {
                    *o += w * xrow[t + j - pad];
                }
            }
        }
    }
    out
}

/// Backward of [`conv1d_sample`]: returns `(d_input, d_weight, d_bias)`
/// for one sample.
#[allow(clippy::too_many_arguments)]
pub fn conv1d_sample_backward(
    input: &[Real],
    weight: &[Real],
    grad_out: &[Real],
    c_in: usize,
    l: usize,
    c_out: usize,
    kernel: usize,
    pad: usize,
) -> (Vec<Real>, Vec<Real>, Vec<Real>) {
    let l_out = conv_out_len(l, kernel, pad);
    let mut d_in = vec![0.0; c_in * l];
    let mut d_w = vec![0.0; c_out * c_in * kernel];
    let mut d_b = vec![0.0; c_out];
    for co in 0..c_out {
        let grow = &grad_out[co * l_out..(co + 1) * l_out];
        d_b[co] = grow.iter().sum();
        for ci in 0..c_in {
            let xrow = &input[ci * l..(ci + 1) * l];
            let wrow = &weight[(co * c_in + ci) * kernel..(co * c_in + ci + 1) * kernel];
            let dwrow = &mut d_w[(co * c_in + ci) * kernel..(co * c_in + ci + 1) * kernel];
            let dxrow = &mut d_in[ci * l..(ci + 1) * l];
            for j in 0..kernel {
                let t_lo = pad.saturating_sub(j);
                let t_hi = (l + pad - j).min(l_out);
                let w = wrow[j];
                let mut dw = 0.0;
                for t in t_lo..t_hi {
                    let g = grow[t];
                    dw += g * xrow[t + j - pad];
                    dxrow[t + j - pad] += g * w;
                }
                dwrow[j] += dw;
            }
        }
    }
    (d_in, d_w, d_b)
}

/// Max pooling over the last axis of one `(c, l)` sample. Returns the
/// pooled values and the flat input index of each maximum (first index
/// wins on ties).
pub fn maxpool1d_sample(
    input: &[Real],
    c: usize,
    l: usize,
    kernel: usize,
    stride: usize,
) -> (Vec<Real>, Vec<usize>) {
    let l_out = pool_out_len(l, kernel, stride);
    let mut out = vec![0.0; c * l_out];
    let mut arg = vec![0usize; c * l_out];
    for ch in 0..c {
        for t in 0..l_out {
            let start = t * stride;
            let mut best = input[ch * l + start];
            let mut best_idx = ch * l + start;
            for off in 1..kernel {
                let idx = ch * l + start + off;
                if input[idx] > best {
                    best = input[idx];
                    best_idx = idx;
                }
            }
            out[ch * l_out + t] = best;
            arg[ch * l_out + t] = best_idx;
        }
    }
    (out, arg)
}

pub fn pool_out_len(l: usize, kernel: usize, stride: usize) -> usize {
    if l < kernel {
        0
    } else {
        (l - kernel) / stride + 1
    }
}

/// Row-wise softmax on a `(rows × cols)` matrix, max-shifted.
pub fn softmax_rows(data: &[Real], rows: usize, cols: usize) -> Vec<Real> {
    let mut out = vec![0.0; rows * cols];
    for r in 0..rows {
        let x = &data[r * cols..(r + 1) * cols];
        let o = &mut out[r * cols..(r + 1) * cols];
        softmax_into(x, o);
    }
    out
}

/// Stable softmax of `x` written into `out`.
pub fn softmax_into(x: &[Real], out: &mut [Real]) {
    let max = x.iter().cloned().fold(Real::NEG_INFINITY, Real::max);
    let mut sum = 0.0;
    for (o, &v) in out.iter_mut().zip(x) {
        let e = (v - max).exp();
        *o = e;
        sum += e;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
}

/// Backward through a row-wise softmax given its output `s` and the
/// incoming gradient `g`: `ds_i = s_i * (g_i - sum_j g_j s_j)`.
pub fn softmax_rows_backward(s: &[Real], g: &[Real], rows: usize, cols: usize) -> Vec<Real> {
    let mut out = vec![0.0; rows * cols];
    for r in 0..rows {
        let srow = &s[r * cols..(r + 1) * cols];
        let grow = &g[r * cols..(r + 1) * cols];
        let orow = &mut out[r * cols..(r + 1) * cols];
        let inner = dot(srow, grow);
        for ((o, &sv), &gv) in orow.iter_mut().zip(srow).zip(grow) {
            *o = sv * (gv - inner);
        }
    }
    out
}

/// Transpose a `(rows × cols)` matrix.
pub fn transpose(data: &[Real], rows: usize, cols: usize) -> Vec<Real> {
    let mut out = vec![0.0; rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = data[r * cols + c];
        }
    }
    out
}
