//! Dense matrix kernels.
//!
//! Every output element is accumulated from zero with the inner index
//! ascending, whichever code path computes it, so results are bitwise
//! reproducible across the tiled body and the tails. Machines with FMA use
//! fused multiply-adds throughout, which rounds differently from the split
//! path; a given machine always picks the same path.

const MR: usize = 4;
const NR: usize = 8;

/// One accumulation step `acc + a·b`.
trait Madd {
    fn madd(acc: f64, a: f64, b: f64) -> f64;
}

struct Split;
struct Fused;

impl Madd for Split {
    #[inline(always)]
    fn madd(acc: f64, a: f64, b: f64) -> f64 {
        acc + a * b
    }
}

impl Madd for Fused {
    #[inline(always)]
    fn madd(acc: f64, a: f64, b: f64) -> f64 {
        a.mul_add(b, acc)
    }
}

/// Whether [`gemm`] uses fused multiply-adds on this machine.
pub fn uses_fma() -> bool {
    #[cfg(target_arch = "x86_64")]
    {
        std::is_x86_feature_detected!("avx2") && std::is_x86_feature_detected!("fma")
    }
    #[cfg(not(target_arch = "x86_64"))]
    {
        false
    }
}

/// `c = a · b` for row-major `a: m×k`, `b: k×n`, `c: m×n`.
pub fn gemm(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    #[cfg(target_arch = "x86_64")]
    {
        if uses_fma() {
            // SAFETY: both features were detected at runtime.
            unsafe { gemm_fma(a, b, c, m, k, n) };
            return;
        }
        if std::is_x86_feature_detected!("avx2") {
            // SAFETY: the feature was detected at runtime.
            unsafe { gemm_avx2(a, b, c, m, k, n) };
            return;
        }
    }
    gemm_tiled::<Split>(a, b, c, m, k, n);
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2,fma")]
unsafe fn gemm_fma(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    gemm_tiled::<Fused>(a, b, c, m, k, n);
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2")]
unsafe fn gemm_avx2(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    gemm_tiled::<Split>(a, b, c, m, k, n);
}

#[inline(always)]
fn gemm_tiled<M: Madd>(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    let n_main = n - n % NR;
    let mut i = 0;
    while i + MR <= m {
        let mut j = 0;
        while j < n_main {
            let mut acc = [[0.0f64; NR]; MR];
            for t in 0..k {
                let row: &[f64; NR] = b[t * n + j..t * n + j + NR].try_into().unwrap();
                for (r, acc_r) in acc.iter_mut().enumerate() {
                    let av = a[(i + r) * k + t];
                    for q in 0..NR {
                        acc_r[q] = M::madd(acc_r[q], av, row[q]);
                    }
                }
            }
            for (r, acc_r) in acc.iter().enumerate() {
                c[(i + r) * n + j..(i + r) * n + j + NR].copy_from_slice(acc_r);
            }
            j += NR;
        }
        for r in 0..MR {
            tail_row::<M>(a, b, c, i + r, k, n, n_main);
        }
        i += MR;
    }
    while i < m {
        let mut j = 0;
        while j < n_main {
            let mut acc = [0.0f64; NR];
            for t in 0..k {
                let av = a[i * k + t];
                let row = &b[t * n + j..t * n + j + NR];
                for q in 0..NR {
                    acc[q] = M::madd(acc[q], av, row[q]);
                }
            }
            c[i * n + j..i * n + j + NR].copy_from_slice(&acc);
            j += NR;
        }
        tail_row::<M>(a, b, c, i, k, n, n_main);
        i += 1;
    }
}

#[inline(always)]
fn tail_row<M: Madd>(a: &[f64], b: &[f64], c: &mut [f64], i: usize, k: usize, n: usize, from: usize) {
    for j in from..n {
        let mut acc = 0.0;
        for t in 0..k {
            acc = M::madd(acc, a[i * k + t], b[t * n + j]);
        }
        c[i * n + j] = acc;
    }
}

/// Transpose of a row-major `rows×cols` matrix.
pub fn transpose(x: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; rows * cols];
    for r in 0..rows {
        for (q, v) in x[r * cols..(r + 1) * cols].iter().enumerate() {
            out[q * rows + r] = *v;
        }
    }
    out
}

/// `c = a · bᵀ` for `a: m×k`, `b: n×k`.
pub fn gemm_nt(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let bt = transpose(b, n, k);
    let mut c = vec![0.0; m * n];
    gemm(a, &bt, &mut c, m, k, n);
    c
}

/// `c = aᵀ · b` for `a: m×k`, `b: m×n`, giving `k×n`.
pub fn gemm_tn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let at = transpose(a, m, k);
    let mut c = vec![0.0; k * n];
    gemm(&at, b, &mut c, k, m, n);
    c
}

/// Plain `c = a · b`, allocating the output.
pub fn gemm_nn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    gemm(a, b, &mut c, m, k, n);
    c
}
