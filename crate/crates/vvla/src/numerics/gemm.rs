//! Parallel matrix multiply built on matrixmultiply kernels.
//!
//! Work is split into fixed-size row blocks of the output; each block is
//! computed by one sequential kernel call over disjoint memory, so results are
//! bitwise identical regardless of thread scheduling.

use rayon::prelude::*;

use super::elem::Elem;

/// Rows per parallel block. Fixed (not derived from the thread count) so the
/// float summation pattern is identical on every machine.
const ROW_BLOCK: usize = 256;

/// c[m,n] += alpha * op(a) * op(b), where op transposes the row-major input
/// when the corresponding flag is set. `beta` scales the existing c payload.
#[allow(clippy::too_many_arguments)]
pub fn gemm<E: Elem>(
    m: usize,
    k: usize,
    n: usize,
    alpha: E,
    a: &[E],
    ta: bool,
    b: &[E],
    tb: bool,
    beta: E,
    c: &mut [E],
) {
    assert_eq!(a.len(), m * k, "gemm: a payload");
    assert_eq!(b.len(), k * n, "gemm: b payload");
    assert_eq!(c.len(), m * n, "gemm: c payload");
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        for x in c.iter_mut() {
            *x = beta * *x;
        }
        return;
    }
    // Strides for op(a): stored row-major as [m,k] or, when transposed, [k,m].
    let (rsa, csa) = if ta { (1isize, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if tb { (1isize, k as isize) } else { (n as isize, 1) };

    let blocks = m.div_ceil(ROW_BLOCK);
    if blocks <= 1 {
        unsafe {
            E::gemm(m, k, n, alpha, a.as_ptr(), rsa, csa, b.as_ptr(), rsb, csb, beta, c.as_mut_ptr(), n as isize, 1);
        }
        return;
    }
    c.par_chunks_mut(ROW_BLOCK * n).enumerate().for_each(|(bi, cb)| {
        let r0 = bi * ROW_BLOCK;
        let rows = cb.len() / n;
        // The row offset applies to op(a)'s row stride.
        let a_off = rsa * r0 as isize;
        unsafe {
            let ap = a.as_ptr().offset(a_off);
            E::gemm(rows, k, n, alpha, ap, rsa, csa, b.as_ptr(), rsb, csb, beta, cb.as_mut_ptr(), n as isize, 1);
        }
    });
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(m: usize, k: usize, n: usize, a: &[f64], ta: bool, b: &[f64], tb: bool) -> Vec<f64> {
        let av = |i: usize, j: usize| if ta { a[j * m + i] } else { a[i * k + j] };
        let bv = |i: usize, j: usize| if tb { b[j * k + i] } else { b[i * n + j] };
        let mut c = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                let mut s = 0.0;
                for l in 0..k {
                    s += av(i, l) * bv(l, j);
                }
                c[i * n + j] = s;
            }
        }
        c
    }

    #[test]
    fn matches_naive_all_transpose_combinations() {
        let mut seed = 12345u64;
        let mut next = move || {
            seed = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((seed >> 33) as f64 / (1u64 << 31) as f64) - 1.0
        };
        for &(m, k, n) in &[(3usize, 4usize, 5usize), (17, 9, 13), (300, 7, 11)] {
            let a: Vec<f64> = (0..m * k).map(|_| next()).collect();
            let b: Vec<f64> = (0..k * n).map(|_| next()).collect();
            for &ta in &[false, true] {
                for &tb in &[false, true] {
                    // Transposed operands are stored as [k,m] / [n,k]; reuse the
                    // same payloads reinterpreted, comparing against the naive
                    // stride convention.
                    let mut c = vec![0.0f64; m * n];
                    gemm(m, k, n, 1.0, &a, ta, &b, tb, 0.0, &mut c);
                    let want = naive(m, k, n, &a, ta, &b, tb);
                    for (x, y) in c.iter().zip(want.iter()) {
                        assert!((x - y).abs() < 1e-12, "ta={ta} tb={tb}");
                    }
                }
            }
        }
    }

    #[test]
    fn parallel_blocks_bitwise_match_single_call() {
        // 700 rows forces the block-parallel path; compare with one kernel call.
        let m = 700;
        let (k, n) = (33, 29);
        let a: Vec<f32> = (0..m * k).map(|i| ((i * 37 % 101) as f32 - 50.0) / 17.0).collect();
        let b: Vec<f32> = (0..k * n).map(|i| ((i * 53 % 97) as f32 - 48.0) / 13.0).collect();
        let mut c1 = vec![0.0f32; m * n];
        gemm(m, k, n, 1.0, &a, false, &b, false, 0.0, &mut c1);
        let mut c2 = vec![0.0f32; m * n];
        for (bi, cb) in c2.chunks_mut(super::ROW_BLOCK * n).enumerate() {
            let rows = cb.len() / n;
            unsafe {
                matrixmultiply::sgemm(
                    rows, k, n, 1.0,
                    a.as_ptr().add(bi * super::ROW_BLOCK * k), k as isize, 1,
                    b.as_ptr(), n as isize, 1,
                    0.0, cb.as_mut_ptr(), n as isize, 1,
                );
            }
        }
        assert!(c1.iter().zip(c2.iter()).all(|(x, y)| x.to_bits() == y.to_bits()));
    }
}
