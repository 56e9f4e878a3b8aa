//! Raw slice kernels shared by the tape and the inference paths.
//!
//! Every kernel runs each output row with a fixed summation order, so
//! results are bit-identical regardless of how many rows are computed at
//! once or how many rayon threads are active. Decoding correctness tests
//! rely on this.

use rayon::prelude::*;

/// Below this many multiply-adds a parallel split is not worth the overhead.
const PAR_FLOPS: usize = 65_536;

/// c[m,n] = a[m,k] * b[k,n]
pub fn matmul(a: &[f64], m: usize, k: usize, b: &[f64], n: usize) -> Vec<f64> {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    let mut c = vec![0.0; m * n];
    let row = |ci: &mut [f64], ai: &[f64]| {
        for (p, &av) in ai.iter().enumerate() {
            let brow = &b[p * n..(p + 1) * n];
            for (cv, &bv) in ci.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    };
    if m >= 2 && m * k * n >= PAR_FLOPS {
        c.par_chunks_mut(n)
            .zip(a.par_chunks(k))
            .for_each(|(ci, ai)| row(ci, ai));
    } else {
        for (ci, ai) in c.chunks_mut(n).zip(a.chunks(k)) {
            row(ci, ai);
        }
    }
    c
}

/// c[m,q] = a[m,p] * b[q,p]^T
pub fn matmul_nt(a: &[f64], m: usize, p: usize, b: &[f64], q: usize) -> Vec<f64> {
    debug_assert_eq!(a.len(), m * p);
    debug_assert_eq!(b.len(), q * p);
    let mut c = vec![0.0; m * q];
    let row = |ci: &mut [f64], ai: &[f64]| {
        for (j, cv) in ci.iter_mut().enumerate() {
            *cv = dot(ai, &b[j * p..(j + 1) * p]);
        }
    };
    if m >= 2 && m * p * q >= PAR_FLOPS {
        c.par_chunks_mut(q)
            .zip(a.par_chunks(p))
            .for_each(|(ci, ai)| row(ci, ai));
    } else {
        for (ci, ai) in c.chunks_mut(q).zip(a.chunks(p)) {
            row(ci, ai);
        }
    }
    c
}

/// c[k,n] = a[m,k]^T * b[m,n]
pub fn matmul_tn(a: &[f64], m: usize, k: usize, b: &[f64], n: usize) -> Vec<f64> {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), m * n);
    let mut c = vec![0.0; k * n];
    let row = |r: usize, cr: &mut [f64]| {
        for i in 0..m {
            let av = a[i * k + r];
            let brow = &b[i * n..(i + 1) * n];
            for (cv, &bv) in cr.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    };
    if k >= 2 && m * k * n >= PAR_FLOPS {
        c.par_chunks_mut(n)
            .enumerate()
            .for_each(|(r, cr)| row(r, cr));
    } else {
        for (r, cr) in c.chunks_mut(n).enumerate() {
            row(r, cr);
        }
    }
    c
}

/// c[b,m,n] = a[b,m,k] * x[b,k,n]
pub fn bmm(a: &[f64], batch: usize, m: usize, k: usize, x: &[f64], n: usize) -> Vec<f64> {
    let mut c = vec![0.0; batch * m * n];
    for bi in 0..batch {
        let cb = matmul(&a[bi * m * k..(bi + 1) * m * k], m, k, &x[bi * k * n..(bi + 1) * k * n], n);
        c[bi * m * n..(bi + 1) * m * n].copy_from_slice(&cb);
    }
    c
}

/// c[b,m,q] = a[b,m,p] * x[b,q,p]^T
pub fn bmm_nt(a: &[f64], batch: usize, m: usize, p: usize, x: &[f64], q: usize) -> Vec<f64> {
    let mut c = vec![0.0; batch * m * q];
    for bi in 0..batch {
        let cb = matmul_nt(&a[bi * m * p..(bi + 1) * m * p], m, p, &x[bi * q * p..(bi + 1) * q * p], q);
        c[bi * m * q..(bi + 1) * m * q].copy_from_slice(&cb);
    }
    c
}

/// c[b,k,n] = a[b,m,k]^T * x[b,m,n]
pub fn bmm_tn(a: &[f64], batch: usize, m: usize, k: usize, x: &[f64], n: usize) -> Vec<f64> {
    let mut c = vec![0.0; batch * k * n];
    for bi in 0..batch {
        let cb = matmul_tn(&a[bi * m * k..(bi + 1) * m * k], m, k, &x[bi * m * n..(bi + 1) * m * n], n);
        c[bi * k * n..(bi + 1) * k * n].copy_from_slice(&cb);
    }
    c
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut s = 0.0;
    for (x, y) in a.iter().zip(b) {
        s += x * y;
    }
    s
}

pub fn add_bias_inplace(x: &mut [f64], bias: &[f64]) {
    let d = bias.len();
    for row in x.chunks_mut(d) {
        for (v, b) in row.iter_mut().zip(bias) {
            *v += b;
        }
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

pub fn gelu_prime(x: f64) -> f64 {
    let inner = GELU_C * (x + 0.044715 * x * x * x);
    let t = inner.tanh();
    let sech2 = 1.0 - t * t;
    let d_inner = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * sech2 * d_inner
}

pub const LN_EPS: f64 = 1e-5;

/// Row-wise layer norm with learned scale and shift.
pub fn layer_norm_rows(x: &[f64], d: usize, gamma: &[f64], beta: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for (xr, or) in x.chunks(d).zip(out.chunks_mut(d)) {
        let mean = xr.iter().sum::<f64>() / d as f64;
        let var = xr.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let rstd = 1.0 / (var + LN_EPS).sqrt();
        for j in 0..d {
            or[j] = (xr[j] - mean) * rstd * gamma[j] + beta[j];
        }
    }
    out
}

/// Numerically stable softmax over contiguous rows of width `cols`.
pub fn softmax_rows_inplace(x: &mut [f64], cols: usize) {
    for row in x.chunks_mut(cols) {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
}

pub fn log_softmax_rows_inplace(x: &mut [f64], cols: usize) {
    for row in x.chunks_mut(cols) {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = row.iter().map(|v| (v - max).exp()).sum();
        let lse = max + sum.ln();
        for v in row.iter_mut() {
            *v -= lse;
        }
    }
}

/// Index of the largest value; ties resolve to the lowest index.
pub fn argmax(x: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in x.iter().enumerate().skip(1) {
        if *v > x[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_matmul(a: &[f64], m: usize, k: usize, b: &[f64], n: usize) -> Vec<f64> {
        let mut c = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                let mut s = 0.0;
                for p in 0..k {
                    s += a[i * k + p] * b[p * n + j];
                }
                c[i * n + j] = s;
            }
        }
        c
    }

    #[test]
    fn matmul_variants_agree_with_naive() {
        let mut seed = 1u64;
        let mut next = move || {
            seed = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            (seed >> 11) as f64 / (1u64 << 53) as f64 - 0.5
        };
        let (m, k, n) = (7, 5, 3);
        let a: Vec<f64> = (0..m * k).map(|_| next()).collect();
        let b: Vec<f64> = (0..k * n).map(|_| next()).collect();
        let c = matmul(&a, m, k, &b, n);
        let c_ref = naive_matmul(&a, m, k, &b, n);
        for (x, y) in c.iter().zip(&c_ref) {
            assert!((x - y).abs() < 1e-12);
        }

        // a * b == (b^T placed row-major) via matmul_nt
        let mut bt = vec![0.0; n * k];
        for p in 0..k {
            for j in 0..n {
                bt[j * k + p] = b[p * n + j];
            }
        }
        let c2 = matmul_nt(&a, m, k, &bt, n);
        for (x, y) in c2.iter().zip(&c_ref) {
            assert!((x - y).abs() < 1e-12);
        }

        // matmul_tn(a[m,k], x[m,n]) computes a^T x; check against explicit transpose.
        let x: Vec<f64> = (0..m * n).map(|_| next()).collect();
        let c3 = matmul_tn(&a, m, k, &x, n);
        let mut at = vec![0.0; k * m];
        for i in 0..m {
            for p in 0..k {
                at[p * m + i] = a[i * k + p];
            }
        }
        let c3_ref = naive_matmul(&at, k, m, &x, n);
        for (u, v) in c3.iter().zip(&c3_ref) {
            assert!((u - v).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_rows_are_normalized() {
        let mut x = vec![0.0, 0.0, 1000.0, 1000.0];
        softmax_rows_inplace(&mut x, 2);
        assert!((x[0] - 0.5).abs() < 1e-12);
        assert!((x[2] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn argmax_breaks_ties_low() {
        assert_eq!(argmax(&[1.0, 3.0, 3.0, 2.0]), 1);
        assert_eq!(argmax(&[5.0]), 0);
    }
}
