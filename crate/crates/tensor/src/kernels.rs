//! Pure array kernels shared by forward and backward passes.
//!
//! Everything here iterates in a fixed order so repeated evaluation is
//! bit-identical.

use crate::Real;

/// C[m,n] += A[m,k] * B[k,n]
pub fn matmul_acc<R: Real>(a: &[R], b: &[R], c: &mut [R], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let c_row = &mut c[i * n..(i + 1) * n];
        for (p, &a_ip) in a_row.iter().enumerate() {
            let b_row = &b[p * n..(p + 1) * n];
            for (c_v, &b_v) in c_row.iter_mut().zip(b_row) {
                *c_v = *c_v + a_ip * b_v;
            }
        }
    }
}

/// C[m,n] += A[m,k] * B[n,k]^T
pub fn matmul_nt_acc<R: Real>(a: &[R], b: &[R], c: &mut [R], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let b_row = &b[j * k..(j + 1) * k];
            let mut acc = R::zero();
            for (&av, &bv) in a_row.iter().zip(b_row) {
                acc = acc + av * bv;
            }
            c[i * n + j] = c[i * n + j] + acc;
        }
    }
}

/// C[k,n] += A[m,k]^T * B[m,n]
pub fn matmul_tn_acc<R: Real>(a: &[R], b: &[R], c: &mut [R], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), m * n);
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let b_row = &b[i * n..(i + 1) * n];
        for (p, &a_ip) in a_row.iter().enumerate() {
            let c_row = &mut c[p * n..(p + 1) * n];
            for (c_v, &b_v) in c_row.iter_mut().zip(b_row) {
                *c_v = *c_v + a_ip * b_v;
            }
        }
    }
}

/// Row-wise softmax over the last axis, in place per row of width `n`.
pub fn softmax_rows<R: Real>(x: &mut [R], n: usize) {
    debug_assert_eq!(x.len() % n, 0);
    for row in x.chunks_mut(n) {
        let mut max = row[0];
        for &v in row.iter() {
            if v > max {
                max = v;
            }
        }
        let mut sum = R::zero();
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum = sum + *v;
        }
        for v in row.iter_mut() {
            *v = *v / sum;
        }
    }
}

pub fn sigmoid<R: Real>(x: R) -> R {
    let one = R::one();
    if x >= R::zero() {
        one / (one + (-x).exp())
    } else {
        let e = x.exp();
        e / (one + e)
    }
}

/// Numerically stable log(1 + exp(-|x|)).
pub fn log1p_exp_neg_abs<R: Real>(x: R) -> R {
    (-x.abs()).exp().ln_1p()
}

const GELU_SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
const GELU_COEFF: f64 = 0.044_715;

/// Tanh-approximation GELU.
pub fn gelu<R: Real>(x: R) -> R {
    let half = R::from_f64(0.5);
    let c = R::from_f64(GELU_SQRT_2_OVER_PI);
    let a = R::from_f64(GELU_COEFF);
    let inner = c * (x + a * x * x * x);
    half * x * (R::one() + inner.tanh())
}

pub fn gelu_grad<R: Real>(x: R) -> R {
    let half = R::from_f64(0.5);
    let c = R::from_f64(GELU_SQRT_2_OVER_PI);
    let a = R::from_f64(GELU_COEFF);
    let three = R::from_f64(3.0);
    let inner = c * (x + a * x * x * x);
    let t = inner.tanh();
    let sech2 = R::one() - t * t;
    half * (R::one() + t) + half * x * sech2 * c * (R::one() + three * a * x * x)
}

/// Strides of a row-major shape.
pub fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1usize; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// Permute a dense array's axes; returns data in the permuted layout.
pub fn permute<R: Real>(x: &[R], shape: &[usize], perm: &[usize]) -> Vec<R> {
    let in_strides = strides(shape);
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let out_strides = strides(&out_shape);
    let numel = x.len();
    let mut out = vec![R::zero(); numel];
    for (flat, value) in x.iter().enumerate() {
        let mut rem = flat;
        let mut out_flat = 0usize;
        for (axis, &st) in in_strides.iter().enumerate() {
            let idx = rem / st;
            rem %= st;
            // position of input axis `axis` in the output ordering
            let out_axis = perm.iter().position(|&p| p == axis).unwrap();
            out_flat += idx * out_strides[out_axis];
        }
        out[out_flat] = *value;
    }
    out
}

pub fn inverse_permutation(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0usize; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    inv
}
