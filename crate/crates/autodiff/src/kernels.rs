//! Plain loops over row-major buffers.
//!
//! Every reduction runs in a fixed order that does not depend on the sizes of
//! unrelated axes, so an output element computed from the same inputs is
//! bitwise identical no matter how many other rows the matrix holds.

use crate::scalar::Scalar;

/// `[m,k] x [k,n] -> [m,n]`.
pub fn matmul<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    let mut out = vec![T::zero(); m * n];
    for i in 0..m {
        let out_row = &mut out[i * n..(i + 1) * n];
        let a_row = &a[i * k..(i + 1) * k];
        for (p, &a_ip) in a_row.iter().enumerate() {
            let b_row = &b[p * n..(p + 1) * n];
            for (o, &b_pj) in out_row.iter_mut().zip(b_row) {
                *o += a_ip * b_pj;
            }
        }
    }
    out
}

pub fn transpose<T: Scalar>(a: &[T], rows: usize, cols: usize) -> Vec<T> {
    let mut out = vec![T::zero(); rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = a[r * cols + c];
        }
    }
    out
}

/// `[m,k] x [n,k]^T -> [m,n]`.
pub fn matmul_bt<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    matmul(a, &transpose(b, n, k), m, k, n)
}

/// `[k,m]^T x [k,n] -> [m,n]`.
pub fn matmul_at<T: Scalar>(a: &[T], b: &[T], k: usize, m: usize, n: usize) -> Vec<T> {
    matmul(&transpose(a, k, m), b, m, k, n)
}

pub fn row_max<T: Scalar>(row: &[T]) -> T {
    row.iter().fold(T::neg_infinity(), |m, &x| if x > m { x } else { m })
}

pub fn logsumexp<T: Scalar>(row: &[T]) -> T {
    let m = row_max(row);
    if m == T::neg_infinity() {
        return m;
    }
    let mut s = T::zero();
    for &x in row {
        s += (x - m).exp();
    }
    m + s.ln()
}

pub fn softmax_rows<T: Scalar>(x: &[T], cols: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(x.len());
    for row in x.chunks(cols) {
        let m = row_max(row);
        let start = out.len();
        let mut s = T::zero();
        for &v in row {
            let e = (v - m).exp();
            s += e;
            out.push(e);
        }
        for o in &mut out[start..] {
            *o /= s;
        }
    }
    out
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// Tanh approximation of GELU.
pub fn gelu<T: Scalar>(x: T) -> T {
    let half = T::lit(0.5);
    let inner = T::lit(GELU_C) * (x + T::lit(GELU_A) * x * x * x);
    half * x * (T::one() + inner.tanh())
}

pub fn gelu_grad<T: Scalar>(x: T) -> T {
    let half = T::lit(0.5);
    let inner = T::lit(GELU_C) * (x + T::lit(GELU_A) * x * x * x);
    let th = inner.tanh();
    let d_inner = T::lit(GELU_C) * (T::one() + T::lit(3.0 * GELU_A) * x * x);
    half * (T::one() + th) + half * x * (T::one() - th * th) * d_inner
}

pub fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_small() {
        let a = [1.0, 2.0, 3.0, 4.0f64];
        let b = [5.0, 6.0, 7.0, 8.0];
        assert_eq!(matmul(&a, &b, 2, 2, 2), vec![19.0, 22.0, 43.0, 50.0]);
        assert_eq!(matmul_bt(&a, &b, 2, 2, 2), vec![17.0, 23.0, 39.0, 53.0]);
        assert_eq!(matmul_at(&a, &b, 2, 2, 2), vec![26.0, 30.0, 38.0, 44.0]);
    }

    #[test]
    fn output_row_independent_of_row_count() {
        let a: Vec<f32> = (0..15).map(|i| (i as f32 * 0.37).sin()).collect();
        let b: Vec<f32> = (0..20).map(|i| (i as f32 * 0.11).cos()).collect();
        let full = matmul(&a, &b, 3, 5, 4);
        let first = matmul(&a[..5], &b, 1, 5, 4);
        assert_eq!(&full[..4], &first[..]);
    }

    #[test]
    fn logsumexp_all_neg_inf() {
        assert_eq!(logsumexp(&[f64::NEG_INFINITY; 3]), f64::NEG_INFINITY);
        assert!((logsumexp(&[0.0f64, 0.0]) - 2f64.ln()).abs() < 1e-15);
    }
}
