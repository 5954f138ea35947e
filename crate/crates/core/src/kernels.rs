//! Dense row-major matrix kernels backing the tape operations.
//!
//! Every kernel computes each output row with the same sequential inner
//! loop, so the parallel and sequential paths are bit-identical. Zero
//! entries of the left operand are skipped, which makes the first layer
//! cheap on sparse bag-of-features input.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Below this many multiply-adds the sequential path wins.
#[cfg(feature = "parallel")]
const PARALLEL_THRESHOLD: usize = 1 << 16;

#[inline]
fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (y, x) in y.iter_mut().zip(x) {
        *y += alpha * x;
    }
}

#[inline]
fn dot(x: &[f64], y: &[f64]) -> f64 {
    x.iter().zip(y).map(|(a, b)| a * b).sum()
}

fn ab_row(a: &[f64], k: usize, b: &[f64], m: usize, i: usize, row: &mut [f64]) {
    for p in 0..k {
        let aip = a[i * k + p];
        if aip != 0.0 {
            axpy(aip, &b[p * m..(p + 1) * m], row);
        }
    }
}

fn abt_row(a: &[f64], k: usize, b: &[f64], i: usize, row: &mut [f64]) {
    let ai = &a[i * k..(i + 1) * k];
    for (j, out) in row.iter_mut().enumerate() {
        *out = dot(ai, &b[j * k..(j + 1) * k]);
    }
}

fn atb_row(a: &[f64], n: usize, k: usize, b: &[f64], m: usize, p: usize, row: &mut [f64]) {
    for i in 0..n {
        let aip = a[i * k + p];
        if aip != 0.0 {
            axpy(aip, &b[i * m..(i + 1) * m], row);
        }
    }
}

/// Sequential kernels, always available.
pub mod seq {
    use super::*;

    /// `a[n×k] · b[k×m]`
    pub fn matmul(a: &[f64], n: usize, k: usize, b: &[f64], m: usize) -> Vec<f64> {
        let mut out = vec![0.0; n * m];
        for (i, row) in out.chunks_mut(m.max(1)).enumerate().take(n) {
            ab_row(a, k, b, m, i, row);
        }
        out
    }

    /// `a[n×k] · b[m×k]ᵀ`
    pub fn matmul_bt(a: &[f64], n: usize, k: usize, b: &[f64], m: usize) -> Vec<f64> {
        let mut out = vec![0.0; n * m];
        for (i, row) in out.chunks_mut(m.max(1)).enumerate().take(n) {
            abt_row(a, k, b, i, row);
        }
        out
    }

    /// `a[n×k]ᵀ · b[n×m]`
    pub fn matmul_at(a: &[f64], n: usize, k: usize, b: &[f64], m: usize) -> Vec<f64> {
        let mut out = vec![0.0; k * m];
        for (p, row) in out.chunks_mut(m.max(1)).enumerate().take(k) {
            atb_row(a, n, k, b, m, p, row);
        }
        out
    }
}

/// Row-parallel kernels on the rayon pool.
#[cfg(feature = "parallel")]
pub mod par {
    use super::*;

    pub fn matmul(a: &[f64], n: usize, k: usize, b: &[f64], m: usize) -> Vec<f64> {
        let mut out = vec![0.0; n * m];
        if m > 0 {
            out.par_chunks_mut(m)
                .enumerate()
                .for_each(|(i, row)| ab_row(a, k, b, m, i, row));
        }
        out
    }

    pub fn matmul_bt(a: &[f64], n: usize, k: usize, b: &[f64], m: usize) -> Vec<f64> {
        let mut out = vec![0.0; n * m];
        if m > 0 {
            out.par_chunks_mut(m)
                .enumerate()
                .for_each(|(i, row)| abt_row(a, k, b, i, row));
        }
        out
    }

    pub fn matmul_at(a: &[f64], n: usize, k: usize, b: &[f64], m: usize) -> Vec<f64> {
        let mut out = vec![0.0; k * m];
        if m > 0 {
            out.par_chunks_mut(m)
                .enumerate()
                .for_each(|(p, row)| atb_row(a, n, k, b, m, p, row));
        }
        out
    }
}

macro_rules! dispatch {
    ($name:ident) => {
        pub fn $name(a: &[f64], n: usize, k: usize, b: &[f64], m: usize) -> Vec<f64> {
            #[cfg(feature = "parallel")]
            if n * k * m >= PARALLEL_THRESHOLD {
                return par::$name(a, n, k, b, m);
            }
            seq::$name(a, n, k, b, m)
        }
    };
}

dispatch!(matmul);
dispatch!(matmul_bt);
dispatch!(matmul_at);
