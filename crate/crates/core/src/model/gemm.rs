//! Matrix product used by the network.
//!
//! On x86-64 CPUs with AVX-512F a packed 8×16 register-blocked kernel is
//! used; everywhere else, and for small products, `ndarray`'s own `dot`.
//! The choice depends only on the CPU, so results stay deterministic on a
//! given machine.

use ndarray::{Array2, ArrayView2};

/// Below this many multiply-adds the packing overhead is not worth it.
const MIN_WORK: usize = 16 * 16 * 16;

pub(crate) fn matmul(a: &ArrayView2<f64>, b: &ArrayView2<f64>) -> Array2<f64> {
    let (m, k) = a.dim();
    let (k2, n) = b.dim();
    assert_eq!(k, k2, "inner dimensions differ");
    #[cfg(target_arch = "x86_64")]
    {
        if m * n * k >= MIN_WORK && k > 0 && std::arch::is_x86_feature_detected!("avx512f") {
            let mut c = Array2::zeros((m, n));
            // SAFETY: the feature was detected at runtime.
            unsafe { avx512::gemm(a, b, c.as_slice_mut().expect("fresh array is contiguous"), n) };
            return c;
        }
    }
    a.dot(b)
}

#[cfg(target_arch = "x86_64")]
mod avx512 {
    use std::arch::x86_64::*;

    use ndarray::ArrayView2;

    const MR: usize = 8;
    const NR: usize = 16;
    const KC: usize = 256;
    const MC: usize = 64;

    /// Copies the `kc` columns of `a` starting at `k0` into 8-row panels,
    /// k-major within a panel, zero-filling the last panel.
    fn pack_a(a: &ArrayView2<f64>, k0: usize, kc: usize, out: &mut Vec<f64>) {
        let m = a.nrows();
        let (rs, cs) = (a.strides()[0], a.strides()[1]);
        let panels = m.div_ceil(MR);
        out.clear();
        out.resize(panels * kc * MR, 0.0);
        let src = a.as_ptr();
        for p in 0..panels {
            let panel = &mut out[p * kc * MR..(p + 1) * kc * MR];
            for r in 0..MR.min(m - p * MR) {
                // SAFETY: (p * MR + r, k0 + kk) is in bounds of `a` for every kk < kc.
                let row = unsafe { src.offset((p * MR + r) as isize * rs + k0 as isize * cs) };
                for kk in 0..kc {
                    panel[kk * MR + r] = unsafe { *row.offset(kk as isize * cs) };
                }
            }
        }
    }

    /// Copies rows `k0..k0 + kc` of `b` into 16-column panels.
    fn pack_b(b: &ArrayView2<f64>, k0: usize, kc: usize, out: &mut Vec<f64>) {
        let n = b.ncols();
        let (rs, cs) = (b.strides()[0], b.strides()[1]);
        let panels = n.div_ceil(NR);
        out.clear();
        out.resize(panels * kc * NR, 0.0);
        let src = b.as_ptr();
        for p in 0..panels {
            let cols = NR.min(n - p * NR);
            let panel = &mut out[p * kc * NR..(p + 1) * kc * NR];
            for kk in 0..kc {
                // SAFETY: (k0 + kk, p * NR + c) is in bounds of `b` for every c < cols.
                let row = unsafe { src.offset((k0 + kk) as isize * rs + (p * NR) as isize * cs) };
                for (c, dst) in panel[kk * NR..kk * NR + cols].iter_mut().enumerate() {
                    *dst = unsafe { *row.offset(c as isize * cs) };
                }
            }
        }
    }

    /// Adds `A_panel · B_panel` (over `kc` steps) to the 8×16 block at `c`,
    /// whose rows are `ldc` apart.
    #[target_feature(enable = "avx512f")]
    unsafe fn kernel(kc: usize, ap: *const f64, bp: *const f64, c: *mut f64, ldc: usize) {
        let mut acc = [_mm512_setzero_pd(); 2 * MR];
        for kk in 0..kc {
            let b0 = _mm512_loadu_pd(bp.add(kk * NR));
            let b1 = _mm512_loadu_pd(bp.add(kk * NR + 8));
            let a = ap.add(kk * MR);
            for r in 0..MR {
                let av = _mm512_set1_pd(*a.add(r));
                acc[2 * r] = _mm512_fmadd_pd(av, b0, acc[2 * r]);
                acc[2 * r + 1] = _mm512_fmadd_pd(av, b1, acc[2 * r + 1]);
            }
        }
        for r in 0..MR {
            let t = c.add(r * ldc);
            _mm512_storeu_pd(t, _mm512_add_pd(_mm512_loadu_pd(t), acc[2 * r]));
            _mm512_storeu_pd(t.add(8), _mm512_add_pd(_mm512_loadu_pd(t.add(8)), acc[2 * r + 1]));
        }
    }

    /// `c += a · b` with `c` row-major `m × n`.
    #[target_feature(enable = "avx512f")]
    pub(super) unsafe fn gemm(a: &ArrayView2<f64>, b: &ArrayView2<f64>, c: &mut [f64], n: usize) {
        let (m, k) = a.dim();
        let (mut pa, mut pb) = (Vec::new(), Vec::new());
        let mut tile = [0.0; MR * NR];
        for k0 in (0..k).step_by(KC) {
            let kc = KC.min(k - k0);
            pack_a(a, k0, kc, &mut pa);
            pack_b(b, k0, kc, &mut pb);
            for ib in (0..m.div_ceil(MR)).step_by(MC / MR) {
            for jp in 0..n.div_ceil(NR) {
                let cols = NR.min(n - jp * NR);
                let bp = pb.as_ptr().add(jp * kc * NR);
                for ip in ib..m.div_ceil(MR).min(ib + MC / MR) {
                    let rows = MR.min(m - ip * MR);
                    let ap = pa.as_ptr().add(ip * kc * MR);
                    if rows == MR && cols == NR {
                        kernel(kc, ap, bp, c.as_mut_ptr().add(ip * MR * n + jp * NR), n);
                        continue;
                    }
                    tile.fill(0.0);
                    kernel(kc, ap, bp, tile.as_mut_ptr(), NR);
                    for r in 0..rows {
                        let dst = &mut c[(ip * MR + r) * n + jp * NR..][..cols];
                        for (d, t) in dst.iter_mut().zip(&tile[r * NR..r * NR + cols]) {
                            *d += t;
                        }
                    }
                }
            }
            }
        }
    }
}
