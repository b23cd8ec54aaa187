//! Matmul and transpose kernels. Accumulation is always in `f64`.

use rayon::prelude::*;

use super::Real;

// Below this many multiply-adds a parallel split costs more than it saves.
const PAR_THRESHOLD: usize = 1 << 15;

/// `a` is `n x k`, `b` is `k x m`; returns the `n x m` product.
pub(crate) fn matmul<T: Real>(a: &[T], b: &[T], n: usize, k: usize, m: usize) -> Vec<T> {
    debug_assert_eq!(a.len(), n * k);
    debug_assert_eq!(b.len(), k * m);
    let mut out = vec![T::ZERO; n * m];
    if m == 0 {
        return out;
    }
    let row = |(i, out_row): (usize, &mut [T])| {
        let mut acc = vec![0.0f64; m];
        let a_row = &a[i * k..(i + 1) * k];
        for (p, &a_ip) in a_row.iter().enumerate() {
            let a_ip = a_ip.to_f64();
            let b_row = &b[p * m..(p + 1) * m];
            for (acc_j, &b_pj) in acc.iter_mut().zip(b_row) {
                *acc_j += a_ip * b_pj.to_f64();
            }
        }
        for (o, v) in out_row.iter_mut().zip(&acc) {
            *o = T::from_f64(*v);
        }
    };
    if n * k * m >= PAR_THRESHOLD {
        out.par_chunks_mut(m).enumerate().for_each(row);
    } else {
        out.chunks_mut(m).enumerate().for_each(row);
    }
    out
}

/// Transposes a row-major `rows x cols` matrix.
pub(crate) fn transpose<T: Real>(a: &[T], rows: usize, cols: usize) -> Vec<T> {
    let mut out = vec![T::ZERO; a.len()];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = a[r * cols + c];
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matches_naive_triple_loop() {
        let (n, k, m) = (5, 7, 3);
        let a: Vec<f64> = (0..n * k).map(|i| (i as f64 * 0.37).sin()).collect();
        let b: Vec<f64> = (0..k * m).map(|i| (i as f64 * 0.11).cos()).collect();
        let c = matmul(&a, &b, n, k, m);
        for i in 0..n {
            for j in 0..m {
                let mut s = 0.0;
                for p in 0..k {
                    s += a[i * k + p] * b[p * m + j];
                }
                assert!((c[i * m + j] - s).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn transpose_twice_is_identity() {
        let a: Vec<f32> = (0..12).map(|i| i as f32).collect();
        let t = transpose(&a, 3, 4);
        assert_eq!(t[1], 4.0);
        assert_eq!(transpose(&t, 4, 3), a);
    }
}
