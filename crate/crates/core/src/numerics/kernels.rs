//! Low-level matrix-multiply kernels.
//!
//! All variants accumulate `c += a * b` with the summation over `k` running
//! strictly in index order for every output element, so the result matches a
//! naive triple loop up to FMA rounding and is bitwise reproducible across
//! runs on the same machine. SIMD paths are selected once at runtime.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::OnceLock;

/// Worker threads for row-parallel kernels. Default 1; raised via
/// [`set_threads`] (the CLI maps `NGPT_LAB_THREADS` onto this).
static THREADS: AtomicUsize = AtomicUsize::new(1);

pub fn set_threads(n: usize) {
    THREADS.store(n.max(1), Ordering::Relaxed);
}

pub fn threads() -> usize {
    THREADS.load(Ordering::Relaxed)
}

const MR: usize = 4;
const NR: usize = 16;

// ACC=true computes `c += a b`, ACC=false overwrites `c = a b` (so callers
// can hand in recycled, dirty output buffers).
macro_rules! matmul_body {
    ($a:expr, $b:expr, $c:expr, $m:expr, $k:expr, $n:expr, $madd:expr, $acc_flag:expr) => {{
        let (a, b, c, m, k, n) = ($a, $b, $c, $m, $k, $n);
        let madd = $madd;
        let mut i = 0;
        // MR x NR register tile; k stays innermost so each c[i][j] is a
        // plain left-to-right sum over k.
        while i + MR <= m {
            let mut j = 0;
            while j + NR <= n {
                let mut acc = [[0.0f64; NR]; MR];
                for kk in 0..k {
                    let brow = &b[kk * n + j..kk * n + j + NR];
                    for r in 0..MR {
                        let av = a[(i + r) * k + kk];
                        for jj in 0..NR {
                            acc[r][jj] = madd(av, brow[jj], acc[r][jj]);
                        }
                    }
                }
                for r in 0..MR {
                    let crow = &mut c[(i + r) * n + j..(i + r) * n + j + NR];
                    for jj in 0..NR {
                        if $acc_flag {
                            crow[jj] += acc[r][jj];
                        } else {
                            crow[jj] = acc[r][jj];
                        }
                    }
                }
                j += NR;
            }
            while j < n {
                for r in 0..MR {
                    let mut s = 0.0;
                    for kk in 0..k {
                        s = madd(a[(i + r) * k + kk], b[kk * n + j], s);
                    }
                    if $acc_flag {
                        c[(i + r) * n + j] += s;
                    } else {
                        c[(i + r) * n + j] = s;
                    }
                }
                j += 1;
            }
            i += MR;
        }
        while i < m {
            for kk in 0..k {
                let aik = a[i * k + kk];
                let brow = &b[kk * n..(kk + 1) * n];
                let crow = &mut c[i * n..(i + 1) * n];
                if kk == 0 && !$acc_flag {
                    for jj in 0..n {
                        crow[jj] = aik * brow[jj];
                    }
                } else {
                    for jj in 0..n {
                        crow[jj] = madd(aik, brow[jj], crow[jj]);
                    }
                }
            }
            i += 1;
        }
    }};
}

#[inline(always)]
fn madd_fma(a: f64, b: f64, c: f64) -> f64 {
    a.mul_add(b, c)
}

/// Separate multiply+add: on targets without hardware FMA, `mul_add` lowers
/// to a libm call, which is far slower than two rounded ops.
#[inline(always)]
fn madd_plain(a: f64, b: f64, c: f64) -> f64 {
    a * b + c
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx512f,avx512vl,avx512dq,avx512bw,fma")]
unsafe fn matmul_avx512_acc(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    matmul_body!(a, b, c, m, k, n, madd_fma, true)
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx512f,avx512vl,avx512dq,avx512bw,fma")]
unsafe fn matmul_avx512_set(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    matmul_body!(a, b, c, m, k, n, madd_fma, false)
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2,fma")]
unsafe fn matmul_avx2_acc(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    matmul_body!(a, b, c, m, k, n, madd_fma, true)
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2,fma")]
unsafe fn matmul_avx2_set(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    matmul_body!(a, b, c, m, k, n, madd_fma, false)
}

fn matmul_portable_acc(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    matmul_body!(a, b, c, m, k, n, madd_plain, true)
}

fn matmul_portable_set(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    matmul_body!(a, b, c, m, k, n, madd_plain, false)
}

type Kernel = fn(&[f64], &[f64], &mut [f64], usize, usize, usize);

fn pick_kernels() -> (Kernel, Kernel) {
    #[cfg(target_arch = "x86_64")]
    {
        if is_x86_feature_detected!("avx512f")
            && is_x86_feature_detected!("avx512vl")
            && is_x86_feature_detected!("avx512dq")
            && is_x86_feature_detected!("avx512bw")
            && is_x86_feature_detected!("fma")
        {
            return (
                |a, b, c, m, k, n| unsafe { matmul_avx512_acc(a, b, c, m, k, n) },
                |a, b, c, m, k, n| unsafe { matmul_avx512_set(a, b, c, m, k, n) },
            );
        }
        if is_x86_feature_detected!("avx2") && is_x86_feature_detected!("fma") {
            return (
                |a, b, c, m, k, n| unsafe { matmul_avx2_acc(a, b, c, m, k, n) },
                |a, b, c, m, k, n| unsafe { matmul_avx2_set(a, b, c, m, k, n) },
            );
        }
    }
    (matmul_portable_acc, matmul_portable_set)
}

fn kernels() -> (Kernel, Kernel) {
    static KERNELS: OnceLock<(Kernel, Kernel)> = OnceLock::new();
    *KERNELS.get_or_init(pick_kernels)
}

fn run(f: Kernel, a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    let nthreads = threads().min(m.max(1));
    if nthreads <= 1 || m * k * n < 64 * 64 * 64 {
        f(a, b, c, m, k, n);
        return;
    }
    let rows_per = m.div_ceil(nthreads);
    std::thread::scope(|scope| {
        let mut rest = c;
        let mut row0 = 0;
        while row0 < m {
            let rows = rows_per.min(m - row0);
            let (chunk, tail) = rest.split_at_mut(rows * n);
            let a_chunk = &a[row0 * k..(row0 + rows) * k];
            scope.spawn(move || f(a_chunk, b, chunk, rows, k, n));
            rest = tail;
            row0 += rows;
        }
    });
}

/// `c += a (m x k) * b (k x n)`, row-major. Caller guarantees slice lengths.
///
/// Rows of `c` are split into contiguous chunks across threads; every output
/// element is still a sequential sum over `k`, so the result is independent
/// of the thread count.
pub fn matmul_into(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    run(kernels().0, a, b, c, m, k, n);
}

/// `c = a b`, overwriting `c` (contents may be arbitrary). Same summation
/// order and threading contract as [`matmul_into`].
pub fn matmul_write(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    if k == 0 {
        c.iter_mut().for_each(|v| *v = 0.0);
        return;
    }
    run(kernels().1, a, b, c, m, k, n);
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
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

    fn fill(len: usize, phase: f64) -> Vec<f64> {
        (0..len).map(|i| (i as f64 * 0.37 + phase).sin()).collect()
    }

    #[test]
    fn matches_naive_triple_loop() {
        for &(m, k, n) in &[(1, 1, 1), (3, 5, 2), (7, 13, 9), (16, 16, 16), (33, 17, 49)] {
            let a = fill(m * k, 0.1);
            let b = fill(k * n, 0.7);
            let mut c = vec![0.0; m * n];
            matmul_into(&a, &b, &mut c, m, k, n);
            let r = naive(&a, &b, m, k, n);
            for (x, y) in c.iter().zip(&r) {
                assert!((x - y).abs() <= 1e-12 * y.abs().max(1.0), "{x} vs {y}");
            }
        }
    }

    #[test]
    fn write_mode_overwrites_dirty_buffers_bit_identically() {
        let (m, k, n) = (13, 9, 21);
        let a = fill(m * k, 0.2);
        let b = fill(k * n, 0.8);
        let mut clean = vec![0.0; m * n];
        matmul_into(&a, &b, &mut clean, m, k, n);
        let mut dirty = vec![7.5; m * n];
        matmul_write(&a, &b, &mut dirty, m, k, n);
        for (x, y) in clean.iter().zip(&dirty) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
    }

    #[test]
    fn thread_count_does_not_change_bits() {
        let (m, k, n) = (70, 64, 80);
        let a = fill(m * k, 0.3);
        let b = fill(k * n, 0.9);
        let mut c1 = vec![0.0; m * n];
        matmul_into(&a, &b, &mut c1, m, k, n);
        let saved = threads();
        set_threads(3);
        let mut c3 = vec![0.0; m * n];
        matmul_into(&a, &b, &mut c3, m, k, n);
        set_threads(saved);
        for (x, y) in c1.iter().zip(&c3) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
    }
}
