//! Dense matrix kernels shared by forward recording and backward accumulation.

use super::tensor::Element;

/// out[m,n] += a[m,k] * b[k,n]
pub fn mm_nn<F: Element>(out: &mut [F], a: &[F], b: &[F], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let out_row = &mut out[i * n..(i + 1) * n];
        for (p, &a_ip) in a_row.iter().enumerate() {
            if a_ip == F::zero() {
                continue;
            }
            let b_row = &b[p * n..(p + 1) * n];
            for j in 0..n {
                out_row[j] += a_ip * b_row[j];
            }
        }
    }
}

/// out[m,k] += a[m,n] * b[k,n]^T  (b stored row-major [k,n])
pub fn mm_nt<F: Element>(out: &mut [F], a: &[F], b: &[F], m: usize, n: usize, k: usize) {
    for i in 0..m {
        let a_row = &a[i * n..(i + 1) * n];
        let out_row = &mut out[i * k..(i + 1) * k];
        for p in 0..k {
            let b_row = &b[p * n..(p + 1) * n];
            let mut acc = F::zero();
            for j in 0..n {
                acc += a_row[j] * b_row[j];
            }
            out_row[p] += acc;
        }
    }
}

/// out[k,n] += a[m,k]^T * b[m,n]  (a stored row-major [m,k])
pub fn mm_tn<F: Element>(out: &mut [F], a: &[F], b: &[F], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let b_row = &b[i * n..(i + 1) * n];
        for (p, &a_ip) in a_row.iter().enumerate() {
            if a_ip == F::zero() {
                continue;
            }
            let out_row = &mut out[p * n..(p + 1) * n];
            for j in 0..n {
                out_row[j] += a_ip * b_row[j];
            }
        }
    }
}

pub fn sigmoid<F: Element>(x: F) -> F {
    F::one() / (F::one() + (-x).exp())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                for p in 0..k {
                    out[i * n + j] += a[i * k + p] * b[p * n + j];
                }
            }
        }
        out
    }

    #[test]
    fn kernels_agree_with_naive() {
        let (m, k, n) = (3, 4, 2);
        let a: Vec<f64> = (0..m * k).map(|i| (i as f64) * 0.37 - 1.0).collect();
        let b: Vec<f64> = (0..k * n).map(|i| (i as f64) * -0.21 + 0.5).collect();
        let want = naive(&a, &b, m, k, n);

        let mut nn = vec![0.0; m * n];
        mm_nn(&mut nn, &a, &b, m, k, n);
        assert_eq!(nn, want);

        // a * b == (b^T stored as [n,k]) via mm_nt: out[m,n] += a[m,k] * bt[n,k]^T
        let mut bt = vec![0.0; n * k];
        for p in 0..k {
            for j in 0..n {
                bt[j * k + p] = b[p * n + j];
            }
        }
        let mut nt = vec![0.0; m * n];
        mm_nt(&mut nt, &a, &bt, m, k, n);
        for (x, y) in nt.iter().zip(&want) {
            assert!((x - y).abs() < 1e-12);
        }

        // a * b == (a^T stored as [k,m]) via mm_tn: out[m,n] += at[k,m]^T * b... swap roles
        let mut at = vec![0.0; k * m];
        for i in 0..m {
            for p in 0..k {
                at[p * m + i] = a[i * k + p];
            }
        }
        let mut tn = vec![0.0; m * n];
        mm_tn(&mut tn, &at, &b, k, m, n);
        for (x, y) in tn.iter().zip(&want) {
            assert!((x - y).abs() < 1e-12);
        }
    }
}
