//! Small dense matrix kernels used by convolution and dense layers.
//!
//! Every product is `c += op(a) · op(b)` with `c` row-major. Operands are
//! packed into contiguous panels and multiplied by a 4×8 register-blocked
//! kernel. Each output element is accumulated in plain sequential order over
//! the inner dimension, starting from its current value, so results do not
//! depend on blocking, panel padding, or which instruction set runs the kernel
//! (no fused multiply-add is ever emitted).

const MR: usize = 4;
const NR: usize = 8;
/// Inner-dimension block; keeps a packed panel of `b` cache-resident.
const KC: usize = 256;

/// Strided read-only matrix view: element `(i, j)` is `data[i·rs + j·cs]`.
#[derive(Clone, Copy)]
struct View<'a> {
    data: &'a [f64],
    rs: usize,
    cs: usize,
}

impl View<'_> {
    #[inline(always)]
    fn at(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.rs + j * self.cs]
    }
}

/// `c[m×n] += a[m×k] · b[k×n]`
pub(crate) fn matmul_acc(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], c: &mut [f64]) {
    assert_eq!(a.len(), m * k);
    assert_eq!(b.len(), k * n);
    gemm(m, k, n, View { data: a, rs: k, cs: 1 }, View { data: b, rs: n, cs: 1 }, c);
}

/// `c[m×n] += a[m×k] · b[n×k]ᵀ`
pub(crate) fn matmul_bt_acc(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], c: &mut [f64]) {
    assert_eq!(a.len(), m * k);
    assert_eq!(b.len(), n * k);
    gemm(m, k, n, View { data: a, rs: k, cs: 1 }, View { data: b, rs: 1, cs: k }, c);
}

/// `c[m×n] += a[k×m]ᵀ · b[k×n]`
pub(crate) fn matmul_at_acc(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], c: &mut [f64]) {
    assert_eq!(a.len(), k * m);
    assert_eq!(b.len(), k * n);
    gemm(m, k, n, View { data: a, rs: 1, cs: m }, View { data: b, rs: n, cs: 1 }, c);
}

fn gemm(m: usize, k: usize, n: usize, a: View<'_>, b: View<'_>, c: &mut [f64]) {
    assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 || k == 0 {
        return;
    }
    let panels = n.div_ceil(NR);
    // Row-major b is read in place; only the ragged last panel is copied.
    let direct = b.cs == 1;
    let mut bpack = vec![0.0; KC.min(k) * if direct { NR } else { panels * NR }];
    let mut apack = vec![0.0; KC.min(k) * MR];
    let wide = wide_kernel_available();
    for pc in (0..k).step_by(KC) {
        let kc = KC.min(k - pc);
        for jp in 0..panels {
            let j0 = jp * NR;
            let nr = NR.min(n - j0);
            if direct && nr == NR {
                continue;
            }
            let slot = if direct { 0 } else { jp };
            let panel = &mut bpack[slot * kc * NR..(slot + 1) * kc * NR];
            for p in 0..kc {
                let row = &mut panel[p * NR..(p + 1) * NR];
                for (jj, dst) in row.iter_mut().enumerate() {
                    *dst = if jj < nr { b.at(pc + p, j0 + jj) } else { 0.0 };
                }
            }
        }
        for i0 in (0..m).step_by(MR) {
            let mr = MR.min(m - i0);
            let ap = &mut apack[..kc * MR];
            for p in 0..kc {
                for r in 0..MR {
                    ap[p * MR + r] = if r < mr { a.at(i0 + r, pc + p) } else { 0.0 };
                }
            }
            for jp in 0..panels {
                let j0 = jp * NR;
                let nr = NR.min(n - j0);
                let mut acc = [[0.0; NR]; MR];
                for r in 0..mr {
                    acc[r][..nr].copy_from_slice(&c[(i0 + r) * n + j0..(i0 + r) * n + j0 + nr]);
                }
                if direct && nr == NR {
                    let start = pc * b.rs + j0;
                    let bp = &b.data[start..start + (kc - 1) * b.rs + NR];
                    run_kernel(wide, ap, bp, b.rs, &mut acc);
                } else {
                    let slot = if direct { 0 } else { jp };
                    let bp = &bpack[slot * kc * NR..(slot + 1) * kc * NR];
                    run_kernel(wide, ap, bp, NR, &mut acc);
                }
                for r in 0..mr {
                    c[(i0 + r) * n + j0..(i0 + r) * n + j0 + nr].copy_from_slice(&acc[r][..nr]);
                }
            }
        }
    }
}

/// `b` rows of `NR` values start every `ldb` elements.
#[inline(always)]
fn kernel_body(a: &[f64], b: &[f64], ldb: usize, acc: &mut [[f64; NR]; MR]) {
    for (p, ap) in a.chunks_exact(MR).enumerate() {
        let bp: &[f64; NR] = b[p * ldb..p * ldb + NR].try_into().expect("NR values");
        for r in 0..MR {
            let av = ap[r];
            for j in 0..NR {
                acc[r][j] += av * bp[j];
            }
        }
    }
}

fn kernel_portable(a: &[f64], b: &[f64], ldb: usize, acc: &mut [[f64; NR]; MR]) {
    kernel_body(a, b, ldb, acc);
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2")]
unsafe fn kernel_avx2(a: &[f64], b: &[f64], ldb: usize, acc: &mut [[f64; NR]; MR]) {
    kernel_body(a, b, ldb, acc);
}

#[cfg(target_arch = "x86_64")]
fn wide_kernel_available() -> bool {
    std::arch::is_x86_feature_detected!("avx2")
}

#[cfg(not(target_arch = "x86_64"))]
fn wide_kernel_available() -> bool {
    false
}

#[inline(always)]
fn run_kernel(wide: bool, a: &[f64], b: &[f64], ldb: usize, acc: &mut [[f64; NR]; MR]) {
    #[cfg(target_arch = "x86_64")]
    if wide {
        // SAFETY: only reached after runtime detection confirmed AVX2.
        unsafe { kernel_avx2(a, b, ldb, acc) };
        return;
    }
    let _ = wide;
    kernel_portable(a, b, ldb, acc);
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], c0: &[f64]) -> Vec<f64> {
        let mut c = c0.to_vec();
        for i in 0..m {
            for j in 0..n {
                for p in 0..k {
                    c[i * n + j] += a[i * k + p] * b[p * n + j];
                }
            }
        }
        c
    }

    fn transpose(rows: usize, cols: usize, x: &[f64]) -> Vec<f64> {
        let mut t = vec![0.0; x.len()];
        for r in 0..rows {
            for c in 0..cols {
                t[c * rows + r] = x[r * cols + c];
            }
        }
        t
    }

    fn fill(len: usize, mul: usize, modulo: usize, scale: f64) -> Vec<f64> {
        (0..len).map(|i| ((i * mul % modulo) as f64 - (modulo / 2) as f64) * scale + 0.1).collect()
    }

    #[test]
    fn variants_match_sequential_sum_bit_for_bit() {
        for (m, k, n) in [(5, 7, 9), (1, 1, 1), (4, 300, 8), (13, 600, 21), (64, 27, 100), (3, 513, 2)] {
            let a = fill(m * k, 37, 11, 0.37);
            let b = fill(k * n, 13, 7, 0.29);
            let c0 = fill(m * n, 5, 3, 1.1);
            let expected = naive(m, k, n, &a, &b, &c0);

            let mut c = c0.clone();
            matmul_acc(m, k, n, &a, &b, &mut c);
            assert_eq!(c, expected);

            let mut c = c0.clone();
            matmul_bt_acc(m, k, n, &a, &transpose(k, n, &b), &mut c);
            assert_eq!(c, expected);

            let mut c = c0.clone();
            matmul_at_acc(m, k, n, &transpose(m, k, &a), &b, &mut c);
            assert_eq!(c, expected);
        }
    }

    #[test]
    fn portable_and_wide_kernels_agree() {
        let a = fill(MR * 100, 7, 13, 0.123);
        let b = fill(NR * 100, 11, 17, 0.0731);
        let mut x = [[0.5; NR]; MR];
        let mut y = x;
        kernel_portable(&a, &b, NR, &mut x);
        run_kernel(wide_kernel_available(), &a, &b, NR, &mut y);
        assert_eq!(x, y);
    }
}
