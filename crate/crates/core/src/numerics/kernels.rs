//! Dense kernels backing the tape operations.
//!
//! Every kernel accumulates in f64 and writes each output element in a
//! fixed sequential order, so results are bit-identical whether the
//! `parallel` feature drives rows through rayon or the sequential
//! fallback runs them in a plain loop. Parallel splits are always over
//! disjoint output rows; no cross-thread reductions exist.

use super::tensor::Scalar;

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Below this many output-element * inner-length units the rayon dispatch
/// overhead outweighs the win and the sequential path runs instead.
const PAR_THRESHOLD: usize = 16 * 1024;

/// Run `f(row_index, row_slice)` over disjoint rows of `out`.
pub fn for_each_row<E, F>(out: &mut [E], cols: usize, work_per_row: usize, f: F)
where
    E: Scalar,
    F: Fn(usize, &mut [E]) + Send + Sync,
{
    debug_assert_eq!(out.len() % cols.max(1), 0);
    let rows = if cols == 0 { 0 } else { out.len() / cols };
    #[cfg(feature = "parallel")]
    {
        if rows * work_per_row >= PAR_THRESHOLD && rows > 1 {
            out.par_chunks_mut(cols)
                .enumerate()
                .for_each(|(i, row)| f(i, row));
            return;
        }
    }
    let _ = work_per_row;
    for (i, row) in out.chunks_mut(cols).enumerate() {
        f(i, row);
    }
}

/// Sequential-only variant, kept callable in parallel builds so the bench
/// suite and equivalence tests can compare both paths.
pub fn for_each_row_seq<E, F>(out: &mut [E], cols: usize, f: F)
where
    E: Scalar,
    F: Fn(usize, &mut [E]),
{
    for (i, row) in out.chunks_mut(cols).enumerate() {
        f(i, row);
    }
}

fn matmul_nn_row<E: Scalar>(a: &[E], b: &[E], k: usize, n: usize, i: usize, out_row: &mut [E]) {
    let mut acc = vec![0.0f64; n];
    let a_row = &a[i * k..(i + 1) * k];
    for (l, &a_il) in a_row.iter().enumerate() {
        let a_il = a_il.to_f64();
        let b_row = &b[l * n..(l + 1) * n];
        for (j, &b_lj) in b_row.iter().enumerate() {
            acc[j] += a_il * b_lj.to_f64();
        }
    }
    for (o, &v) in out_row.iter_mut().zip(&acc) {
        *o = E::from_f64(v);
    }
}

/// C[m,n] = A[m,k] * B[k,n].
pub fn matmul_nn<E: Scalar>(a: &[E], b: &[E], m: usize, k: usize, n: usize) -> Vec<E> {
    let mut out = vec![E::from_f64(0.0); m * n];
    for_each_row(&mut out, n, k, |i, row| matmul_nn_row(a, b, k, n, i, row));
    out
}

/// Sequential matmul, for benches and bit-equality checks.
pub fn matmul_nn_seq<E: Scalar>(a: &[E], b: &[E], m: usize, k: usize, n: usize) -> Vec<E> {
    let mut out = vec![E::from_f64(0.0); m * n];
    for_each_row_seq(&mut out, n, |i, row| matmul_nn_row(a, b, k, n, i, row));
    out
}

/// C[m,n] = A[m,k] * B[n,k]^T (dot products of rows).
pub fn matmul_nt<E: Scalar>(a: &[E], b: &[E], m: usize, k: usize, n: usize) -> Vec<E> {
    let mut out = vec![E::from_f64(0.0); m * n];
    for_each_row(&mut out, n, k, |i, row| {
        let a_row = &a[i * k..(i + 1) * k];
        for (j, o) in row.iter_mut().enumerate() {
            let b_row = &b[j * k..(j + 1) * k];
            let mut acc = 0.0f64;
            for (&x, &y) in a_row.iter().zip(b_row) {
                acc += x.to_f64() * y.to_f64();
            }
            *o = E::from_f64(acc);
        }
    });
    out
}

/// C[m,n] = A[k,m]^T * B[k,n].
pub fn matmul_tn<E: Scalar>(a: &[E], b: &[E], k: usize, m: usize, n: usize) -> Vec<E> {
    let mut out = vec![E::from_f64(0.0); m * n];
    for_each_row(&mut out, n, k, |i, row| {
        let mut acc = vec![0.0f64; n];
        for l in 0..k {
            let a_li = a[l * m + i].to_f64();
            let b_row = &b[l * n..(l + 1) * n];
            for (j, &b_lj) in b_row.iter().enumerate() {
                acc[j] += a_li * b_lj.to_f64();
            }
        }
        for (o, &v) in row.iter_mut().zip(&acc) {
            *o = E::from_f64(v);
        }
    });
    out
}

/// Sum over all elements, accumulated in f64 in index order.
pub fn sum_all<E: Scalar>(xs: &[E]) -> f64 {
    xs.iter().map(|v| v.to_f64()).sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::rng::Rng;

    fn random_matrix(rng: &mut Rng, n: usize) -> Vec<f32> {
        (0..n).map(|_| rng.normal_f64() as f32).collect()
    }

    #[test]
    fn matmul_matches_naive_triple_loop() {
        let mut rng = Rng::seeded(2);
        let (m, k, n) = (5, 7, 4);
        let a = random_matrix(&mut rng, m * k);
        let b = random_matrix(&mut rng, k * n);
        let got = matmul_nn(&a, &b, m, k, n);
        for i in 0..m {
            for j in 0..n {
                let mut acc = 0.0f64;
                for l in 0..k {
                    acc += a[i * k + l] as f64 * b[l * n + j] as f64;
                }
                assert!((got[i * n + j] as f64 - acc).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn transposed_variants_agree_with_explicit_transpose() {
        let mut rng = Rng::seeded(3);
        let (m, k, n) = (4, 6, 3);
        let a = random_matrix(&mut rng, m * k);
        let b = random_matrix(&mut rng, n * k);
        let bt: Vec<f32> = (0..k * n).map(|i| b[(i % n) * k + i / n]).collect();
        let via_nt = matmul_nt(&a, &b, m, k, n);
        let via_nn = matmul_nn(&a, &bt, m, k, n);
        for (x, y) in via_nt.iter().zip(&via_nn) {
            assert!((x - y).abs() < 1e-5);
        }

        let c = random_matrix(&mut rng, k * m);
        let ct: Vec<f32> = (0..m * k).map(|i| c[(i % m) + (i / m) * m]).collect();
        // ct is c viewed as [k,m] transposed into [m,k]
        let ct_rows: Vec<f32> = {
            let mut t = vec![0.0; m * k];
            for l in 0..k {
                for i in 0..m {
                    t[i * k + l] = c[l * m + i];
                }
            }
            t
        };
        let _ = ct;
        let d = random_matrix(&mut rng, k * n);
        let via_tn = matmul_tn(&c, &d, k, m, n);
        let via_nn2 = matmul_nn(&ct_rows, &d, m, k, n);
        for (x, y) in via_tn.iter().zip(&via_nn2) {
            assert!((x - y).abs() < 1e-5);
        }
    }

    #[test]
    fn parallel_and_sequential_paths_are_bit_identical() {
        let mut rng = Rng::seeded(4);
        // Large enough to clear the parallel threshold.
        let (m, k, n) = (64, 96, 80);
        let a = random_matrix(&mut rng, m * k);
        let b = random_matrix(&mut rng, k * n);
        let par = matmul_nn(&a, &b, m, k, n);
        let seq = matmul_nn_seq(&a, &b, m, k, n);
        assert!(par
            .iter()
            .zip(&seq)
            .all(|(x, y)| x.to_bits() == y.to_bits()));
    }
}
