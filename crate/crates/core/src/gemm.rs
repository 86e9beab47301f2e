//! Row-major matrix multiply used by the convolution and linear kernels.
//!
//! `C[m x n] (+)= A[m x k] * B[k x n]`. The kernel is the classic i-k-j
//! loop: every output element accumulates over k in ascending order, which
//! pins the floating-point result regardless of vector width or thread
//! count. Parallelism splits output rows, never the k reduction.
//!
//! On x86-64 an AVX2+FMA variant is selected at runtime; whichever variant
//! is picked stays fixed for the process lifetime, so repeated runs on one
//! machine are bit-identical.

use std::sync::OnceLock;

use rayon::prelude::*;

use crate::tensor::Scalar;

/// MAC count above which row-parallelism is worth the scheduling cost.
const PAR_THRESHOLD: usize = 1 << 21;

#[cfg(target_arch = "x86_64")]
fn use_fma() -> bool {
    static FMA: OnceLock<bool> = OnceLock::new();
    *FMA.get_or_init(|| {
        std::arch::is_x86_feature_detected!("avx2") && std::arch::is_x86_feature_detected!("fma")
    })
}

#[cfg(not(target_arch = "x86_64"))]
fn use_fma() -> bool {
    false
}

/// Per-chunk body. `FMA` selects `mul_add` so the AVX2 wrapper compiles to
/// fused-multiply-add instructions; the portable path keeps separate
/// multiply and add.
#[inline(always)]
fn gemm_block<T: Scalar, const FMA: bool>(
    rows: usize,
    k: usize,
    n: usize,
    a: &[T],
    b: &[T],
    c: &mut [T],
    acc: bool,
) {
    if !acc {
        c.fill(T::zero());
    }
    for i in 0..rows {
        let a_row = &a[i * k..(i + 1) * k];
        let c_row = &mut c[i * n..(i + 1) * n];
        for (kk, &aik) in a_row.iter().enumerate() {
            let b_row = &b[kk * n..(kk + 1) * n];
            if FMA {
                for (cj, &bj) in c_row.iter_mut().zip(b_row) {
                    *cj = aik.mul_add(bj, *cj);
                }
            } else {
                for (cj, &bj) in c_row.iter_mut().zip(b_row) {
                    *cj = *cj + aik * bj;
                }
            }
        }
    }
}

macro_rules! gemm_for {
    ($name:ident, $block_native:ident, $t:ty) => {
        #[cfg(target_arch = "x86_64")]
        #[target_feature(enable = "avx2,fma")]
        unsafe fn $block_native(
            rows: usize,
            k: usize,
            n: usize,
            a: &[$t],
            b: &[$t],
            c: &mut [$t],
            acc: bool,
        ) {
            gemm_block::<$t, true>(rows, k, n, a, b, c, acc);
        }

        pub fn $name(m: usize, k: usize, n: usize, a: &[$t], b: &[$t], c: &mut [$t], acc: bool) {
            assert_eq!(a.len(), m * k, "gemm: A size");
            assert_eq!(b.len(), k * n, "gemm: B size");
            assert_eq!(c.len(), m * n, "gemm: C size");
            if m == 0 || n == 0 {
                return;
            }
            if k == 0 {
                if !acc {
                    c.fill(0.0);
                }
                return;
            }

            let run = |rows: usize, a_chunk: &[$t], c_chunk: &mut [$t]| {
                #[cfg(target_arch = "x86_64")]
                if use_fma() {
                    // Safety: feature presence checked at runtime.
                    unsafe { $block_native(rows, k, n, a_chunk, b, c_chunk, acc) };
                    return;
                }
                let _ = use_fma();
                gemm_block::<$t, false>(rows, k, n, a_chunk, b, c_chunk, acc);
            };

            if m * k * n >= PAR_THRESHOLD && m >= 2 {
                let chunk_rows = m.div_ceil(rayon::current_num_threads().max(1)).max(1);
                c.par_chunks_mut(chunk_rows * n)
                    .zip(a.par_chunks(chunk_rows * k))
                    .for_each(|(c_chunk, a_chunk)| {
                        run(a_chunk.len() / k, a_chunk, c_chunk);
                    });
            } else {
                run(m, a, c);
            }
        }
    };
}

gemm_for!(gemm_f32, gemm_block_f32_avx2, f32);
gemm_for!(gemm_f64, gemm_block_f64_avx2, f64);

/// Out-of-place transpose of a row-major `m x n` matrix.
pub fn transpose<T: Scalar>(m: usize, n: usize, a: &[T]) -> Vec<T> {
    debug_assert_eq!(a.len(), m * n);
    let mut out = vec![T::zero(); m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = a[i * n + j];
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SplitMix64;

    fn naive(m: usize, k: usize, n: usize, a: &[f64], b: &[f64]) -> Vec<f64> {
        let mut c = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                let mut s = 0.0;
                for kk in 0..k {
                    s += a[i * k + kk] * b[kk * n + j];
                }
                c[i * n + j] = s;
            }
        }
        c
    }

    #[test]
    fn matches_naive_f64() {
        let mut rng = SplitMix64::new(3);
        for &(m, k, n) in &[(1, 1, 1), (3, 5, 4), (7, 2, 9), (16, 16, 16)] {
            let a: Vec<f64> = (0..m * k).map(|_| rng.uniform(-1.0, 1.0)).collect();
            let b: Vec<f64> = (0..k * n).map(|_| rng.uniform(-1.0, 1.0)).collect();
            let mut c = vec![0.0; m * n];
            gemm_f64(m, k, n, &a, &b, &mut c, false);
            let want = naive(m, k, n, &a, &b);
            for (x, y) in c.iter().zip(&want) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn accumulate_adds() {
        let a = [1.0f32, 2.0];
        let b = [3.0f32, 4.0];
        let mut c = [10.0f32, 10.0];
        // 1x2 * 2x1 = [11]; acc onto 10 -> 21
        gemm_f32(1, 2, 1, &a, &b, &mut [0.0], false);
        gemm_f32(1, 2, 1, &a, &b, &mut c[..1], true);
        assert_eq!(c[0], 21.0);
    }

    #[test]
    fn parallel_path_bit_identical() {
        let mut rng = SplitMix64::new(17);
        let (m, k, n) = (64, 64, 640); // above PAR_THRESHOLD
        assert!(m * k * n >= PAR_THRESHOLD);
        let a: Vec<f32> = (0..m * k).map(|_| rng.uniform(-1.0, 1.0) as f32).collect();
        let b: Vec<f32> = (0..k * n).map(|_| rng.uniform(-1.0, 1.0) as f32).collect();
        let mut c_par = vec![0.0f32; m * n];
        gemm_f32(m, k, n, &a, &b, &mut c_par, false);

        // Serial reference through the same row kernel.
        let mut c_ser = vec![0.0f32; m * n];
        let pool = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
        pool.install(|| gemm_f32(m, k, n, &a, &b, &mut c_ser, false));
        assert_eq!(c_par, c_ser);
    }

    #[test]
    fn transpose_round_trip() {
        let a: Vec<f64> = (0..12).map(|v| v as f64).collect();
        let t = transpose(3, 4, &a);
        let back = transpose(4, 3, &t);
        assert_eq!(a, back);
    }
}
