//! Packed, register-blocked matrix multiply.
//!
//! `C += A · B` with `B` packed into column panels of width `NR` per
//! `KC × NC` block. Every output element is accumulated over `k` in ascending
//! order with one multiply-add chain, independent of how many rows `A` has, so
//! a one-row product is bitwise equal to the matching row of a batched one.

use std::sync::OnceLock;

const KC: usize = 256;
const NC: usize = 512;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Isa {
    #[cfg(target_arch = "x86_64")]
    Avx512,
    #[cfg(target_arch = "x86_64")]
    Avx2,
    Portable,
}

fn isa() -> Isa {
    static ISA: OnceLock<Isa> = OnceLock::new();
    *ISA.get_or_init(|| {
        #[cfg(target_arch = "x86_64")]
        {
            if std::env::var_os("CIRCUITSCOPE_PORTABLE_GEMM").is_none() {
                if is_x86_feature_detected!("avx512f") {
                    return Isa::Avx512;
                }
                if is_x86_feature_detected!("avx2") && is_x86_feature_detected!("fma") {
                    return Isa::Avx2;
                }
            }
        }
        Isa::Portable
    })
}

/// Micro-kernel signature: accumulate an `mr × NR` tile of `C` from `kc`
/// columns of `A` (row stride `lda`) and one packed `kc × NR` panel.
type Kernel = unsafe fn(mr: usize, kc: usize, a: *const f32, lda: usize, panel: *const f32, c: *mut f32, ldc: usize);

/// `c[m×n] += a[m×k] · b[k×n]`, all row-major.
pub fn gemm_accumulate(m: usize, k: usize, n: usize, a: &[f32], b: &[f32], c: &mut [f32]) {
    assert!(a.len() >= m * k, "lhs too short");
    assert!(b.len() >= k * n, "rhs too short");
    assert!(c.len() >= m * n, "output too short");
    if m == 0 || n == 0 || k == 0 {
        return;
    }
    match isa() {
        #[cfg(target_arch = "x86_64")]
        Isa::Avx512 => drive::<32, 8>(m, k, n, a, b, c, x86::kernel_avx512),
        #[cfg(target_arch = "x86_64")]
        Isa::Avx2 => drive::<16, 6>(m, k, n, a, b, c, x86::kernel_avx2),
        Isa::Portable => drive::<8, 4>(m, k, n, a, b, c, portable_kernel),
    }
}

/// `c[m×n] = a[m×k] · b[n×k]ᵀ`, i.e. row-by-row dot products.
pub fn gemm_nt(m: usize, k: usize, n: usize, a: &[f32], b: &[f32], c: &mut [f32]) {
    assert!(a.len() >= m * k && b.len() >= n * k && c.len() >= m * n);
    for i in 0..m {
        let ai = &a[i * k..(i + 1) * k];
        for j in 0..n {
            c[i * n + j] = super::dot(ai, &b[j * k..(j + 1) * k]);
        }
    }
}

fn drive<const NR: usize, const MR: usize>(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    b: &[f32],
    c: &mut [f32],
    kernel: Kernel,
) {
    let mut packed = vec![0.0f32; KC * NC.div_ceil(NR) * NR];
    let mut edge = [0.0f32; 8 * 32];
    debug_assert!(MR * NR <= edge.len());

    for jc in (0..n).step_by(NC) {
        let nc = NC.min(n - jc);
        let panels = nc.div_ceil(NR);
        for pc in (0..k).step_by(KC) {
            let kc = KC.min(k - pc);
            pack_b::<NR>(b, n, pc, kc, jc, nc, &mut packed);
            for ir in (0..m).step_by(MR) {
                let mr = MR.min(m - ir);
                let a_ptr = a[ir * k + pc..].as_ptr();
                for p in 0..panels {
                    let col = jc + p * NR;
                    let nr = NR.min(n - col);
                    let panel = packed[p * kc * NR..].as_ptr();
                    if nr == NR {
                        let c_ptr = c[ir * n + col..].as_mut_ptr();
                        // SAFETY: the tile rows [ir, ir+mr) × cols [col, col+NR)
                        // lie inside `c`; `a` rows are k long starting at pc.
                        unsafe { kernel(mr, kc, a_ptr, k, panel, c_ptr, n) };
                    } else {
                        for r in 0..mr {
                            let src = &c[(ir + r) * n + col..(ir + r) * n + col + nr];
                            edge[r * NR..r * NR + nr].copy_from_slice(src);
                        }
                        // SAFETY: `edge` holds an mr × NR tile with stride NR.
                        unsafe { kernel(mr, kc, a_ptr, k, panel, edge.as_mut_ptr(), NR) };
                        for r in 0..mr {
                            c[(ir + r) * n + col..(ir + r) * n + col + nr]
                                .copy_from_slice(&edge[r * NR..r * NR + nr]);
                        }
                    }
                }
            }
        }
    }
}

/// Packs `b[pc..pc+kc, jc..jc+nc]` into consecutive `kc × NR` panels,
/// zero-padding the last panel.
fn pack_b<const NR: usize>(b: &[f32], ldb: usize, pc: usize, kc: usize, jc: usize, nc: usize, out: &mut [f32]) {
    for (p, j0) in (0..nc).step_by(NR).enumerate() {
        let w = NR.min(nc - j0);
        let panel = &mut out[p * kc * NR..(p + 1) * kc * NR];
        for kk in 0..kc {
            let src = &b[(pc + kk) * ldb + jc + j0..(pc + kk) * ldb + jc + j0 + w];
            let dst = &mut panel[kk * NR..(kk + 1) * NR];
            dst[..w].copy_from_slice(src);
            dst[w..].fill(0.0);
        }
    }
}

unsafe fn portable_kernel(mr: usize, kc: usize, a: *const f32, lda: usize, panel: *const f32, c: *mut f32, ldc: usize) {
    const NR: usize = 8;
    let mut acc = [[0.0f32; NR]; 4];
    for r in 0..mr {
        for j in 0..NR {
            acc[r][j] = *c.add(r * ldc + j);
        }
    }
    for p in 0..kc {
        let bp = panel.add(p * NR);
        for r in 0..mr {
            let av = *a.add(r * lda + p);
            for j in 0..NR {
                acc[r][j] += av * *bp.add(j);
            }
        }
    }
    for r in 0..mr {
        for j in 0..NR {
            *c.add(r * ldc + j) = acc[r][j];
        }
    }
}

#[cfg(target_arch = "x86_64")]
mod x86 {
    use std::arch::x86_64::*;

    pub(super) unsafe fn kernel_avx512(mr: usize, kc: usize, a: *const f32, lda: usize, panel: *const f32, c: *mut f32, ldc: usize) {
        match mr {
            8 => tile_avx512::<8>(kc, a, lda, panel, c, ldc),
            7 => tile_avx512::<7>(kc, a, lda, panel, c, ldc),
            6 => tile_avx512::<6>(kc, a, lda, panel, c, ldc),
            5 => tile_avx512::<5>(kc, a, lda, panel, c, ldc),
            4 => tile_avx512::<4>(kc, a, lda, panel, c, ldc),
            3 => tile_avx512::<3>(kc, a, lda, panel, c, ldc),
            2 => tile_avx512::<2>(kc, a, lda, panel, c, ldc),
            1 => tile_avx512::<1>(kc, a, lda, panel, c, ldc),
            _ => unreachable!("row tile {mr}"),
        }
    }

    #[target_feature(enable = "avx512f")]
    unsafe fn tile_avx512<const MR: usize>(kc: usize, a: *const f32, lda: usize, panel: *const f32, c: *mut f32, ldc: usize) {
        let mut lo = [_mm512_setzero_ps(); MR];
        let mut hi = [_mm512_setzero_ps(); MR];
        for r in 0..MR {
            lo[r] = _mm512_loadu_ps(c.add(r * ldc));
            hi[r] = _mm512_loadu_ps(c.add(r * ldc + 16));
        }
        for p in 0..kc {
            let b0 = _mm512_loadu_ps(panel.add(p * 32));
            let b1 = _mm512_loadu_ps(panel.add(p * 32 + 16));
            for r in 0..MR {
                let av = _mm512_set1_ps(*a.add(r * lda + p));
                lo[r] = _mm512_fmadd_ps(av, b0, lo[r]);
                hi[r] = _mm512_fmadd_ps(av, b1, hi[r]);
            }
        }
        for r in 0..MR {
            _mm512_storeu_ps(c.add(r * ldc), lo[r]);
            _mm512_storeu_ps(c.add(r * ldc + 16), hi[r]);
        }
    }

    pub(super) unsafe fn kernel_avx2(mr: usize, kc: usize, a: *const f32, lda: usize, panel: *const f32, c: *mut f32, ldc: usize) {
        match mr {
            6 => tile_avx2::<6>(kc, a, lda, panel, c, ldc),
            5 => tile_avx2::<5>(kc, a, lda, panel, c, ldc),
            4 => tile_avx2::<4>(kc, a, lda, panel, c, ldc),
            3 => tile_avx2::<3>(kc, a, lda, panel, c, ldc),
            2 => tile_avx2::<2>(kc, a, lda, panel, c, ldc),
            1 => tile_avx2::<1>(kc, a, lda, panel, c, ldc),
            _ => unreachable!("row tile {mr}"),
        }
    }

    #[target_feature(enable = "avx2,fma")]
    unsafe fn tile_avx2<const MR: usize>(kc: usize, a: *const f32, lda: usize, panel: *const f32, c: *mut f32, ldc: usize) {
        let mut lo = [_mm256_setzero_ps(); MR];
        let mut hi = [_mm256_setzero_ps(); MR];
        for r in 0..MR {
            lo[r] = _mm256_loadu_ps(c.add(r * ldc));
            hi[r] = _mm256_loadu_ps(c.add(r * ldc + 8));
        }
        for p in 0..kc {
            let b0 = _mm256_loadu_ps(panel.add(p * 16));
            let b1 = _mm256_loadu_ps(panel.add(p * 16 + 8));
            for r in 0..MR {
                let av = _mm256_set1_ps(*a.add(r * lda + p));
                lo[r] = _mm256_fmadd_ps(av, b0, lo[r]);
                hi[r] = _mm256_fmadd_ps(av, b1, hi[r]);
            }
        }
        for r in 0..MR {
            _mm256_storeu_ps(c.add(r * ldc), lo[r]);
            _mm256_storeu_ps(c.add(r * ldc + 8), hi[r]);
        }
    }
}
