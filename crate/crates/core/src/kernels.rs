//! Dense f64 kernels shared by the autograd graph and the inference path.
//! Every kernel accumulates strictly left-to-right per output element, so
//! graph forward, cached generation, and the parallel variants all produce
//! bit-identical results.

/// Rows below this size gain nothing from fan-out on the matmul path.
pub const MATMUL_PAR_CUTOFF_ROWS: usize = 16;

/// out[i][j] = sum_k a[i][k] * b[k][j], k ascending per element.
pub fn matmul_seq(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for kk in 0..k {
            let aik = a[i * k + kk];
            let brow = &b[kk * n..(kk + 1) * n];
            for j in 0..n {
                row[j] += aik * brow[j];
            }
        }
    }
    out
}

/// Row-partitioned matmul. Each output row is computed by the sequential
/// per-row loop, so the result is bit-identical to `matmul_seq`.
#[cfg(feature = "parallel")]
pub fn matmul_par(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    use rayon::prelude::*;
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    let mut out = vec![0.0; m * n];
    out.par_chunks_mut(n).enumerate().for_each(|(i, row)| {
        for kk in 0..k {
            let aik = a[i * k + kk];
            let brow = &b[kk * n..(kk + 1) * n];
            for j in 0..n {
                row[j] += aik * brow[j];
            }
        }
    });
    out
}

#[cfg(feature = "parallel")]
pub fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    if m < MATMUL_PAR_CUTOFF_ROWS {
        matmul_seq(a, b, m, k, n)
    } else {
        matmul_par(a, b, m, k, n)
    }
}

#[cfg(not(feature = "parallel"))]
pub fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    matmul_seq(a, b, m, k, n)
}

/// dot over ascending index; the row-vs-matrix building block of the
/// KV-cached path. Must match the per-element order of `matmul_seq`.
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut s = 0.0;
    for i in 0..a.len() {
        s += a[i] * b[i];
    }
    s
}

/// out[j] += c * row[j]
pub fn axpy(out: &mut [f64], c: f64, row: &[f64]) {
    debug_assert_eq!(out.len(), row.len());
    for j in 0..out.len() {
        out[j] += c * row[j];
    }
}

/// Numerically stable softmax in place over one row.
pub fn softmax_row(row: &mut [f64]) {
    let mut mx = f64::NEG_INFINITY;
    for &v in row.iter() {
        if v > mx {
            mx = v;
        }
    }
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - mx).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

/// x / sqrt(mean(x^2) + eps) * gain, one row.
pub fn rms_norm_row(x: &[f64], gain: &[f64], eps: f64, out: &mut [f64]) {
    debug_assert_eq!(x.len(), gain.len());
    let mut ms = 0.0;
    for &v in x {
        ms += v * v;
    }
    ms /= x.len() as f64;
    let inv = 1.0 / (ms + eps).sqrt();
    for i in 0..x.len() {
        out[i] = x[i] * inv * gain[i];
    }
}

pub fn silu(x: f64) -> f64 {
    x / (1.0 + (-x).exp())
}

/// Rotate adjacent pairs of `row` by angle pos * theta^(-2i/d); d even.
pub fn rope_row(row: &mut [f64], pos: usize, theta: f64) {
    let d = row.len();
    debug_assert_eq!(d % 2, 0);
    for i in 0..d / 2 {
        let freq = theta.powf(-2.0 * i as f64 / d as f64);
        let ang = pos as f64 * freq;
        let (sin, cos) = ang.sin_cos();
        let a = row[2 * i];
        let b = row[2 * i + 1];
        row[2 * i] = a * cos - b * sin;
        row[2 * i + 1] = a * sin + b * cos;
    }
}
