//! Blocked Gram-matrix kernel.
//!
//! Every subspace fit in this crate reduces to inner products between
//! gradient columns, so this is the only O(N²d) routine. Rows are split into
//! fixed-size chunks whose partial sums are added in chunk order, which keeps
//! results bit-identical for any rayon pool size.

use nalgebra::DMatrix;
use rayon::prelude::*;

/// Rows packed per block. A packed block of ~130 columns stays in L2.
const BLOCK_ROWS: usize = 256;
/// Rows handled by one parallel task.
const CHUNK_ROWS: usize = 16 * 1024;
/// Chunks summed per parallel batch; bounds the number of live partials.
const BATCH: usize = 8;
/// Column padding multiple, shared by all tile shapes below.
const COL_PAD: usize = 12;

/// Computes `K[i][j] = <x_i - s, x_j - s>` for the given columns and an
/// optional shift `s`. All columns must share one length.
pub fn gram(cols: &[&[f64]], shift: Option<&[f64]>) -> DMatrix<f64> {
    let n = cols.len();
    let mut out = DMatrix::zeros(n, n);
    if n == 0 {
        return out;
    }
    let d = cols[0].len();
    debug_assert!(cols.iter().all(|c| c.len() == d));
    debug_assert!(shift.is_none_or(|s| s.len() == d));

    let kernel = Kernel::detect();
    let chunks: Vec<(usize, usize)> = (0..d)
        .step_by(CHUNK_ROWS)
        .map(|r0| (r0, (r0 + CHUNK_ROWS).min(d)))
        .collect();
    let mut acc = vec![0.0; n * n];
    for batch in chunks.chunks(BATCH) {
        let partials: Vec<Vec<f64>> = batch
            .par_iter()
            .map(|&(r0, r1)| chunk_gram(kernel, cols, shift, r0, r1))
            .collect();
        for p in partials {
            for (a, b) in acc.iter_mut().zip(&p) {
                *a += b;
            }
        }
    }
    for j in 0..n {
        for i in 0..=j {
            let v = acc[i * n + j];
            out[(i, j)] = v;
            out[(j, i)] = v;
        }
    }
    out
}

/// Squared Euclidean distances between all column pairs, computed from a
/// Gram matrix centred on the column mean to limit cancellation.
pub fn pairwise_sq_distances(cols: &[&[f64]]) -> DMatrix<f64> {
    let n = cols.len();
    if n == 0 {
        return DMatrix::zeros(0, 0);
    }
    let d = cols[0].len();
    let mut mean = vec![0.0; d];
    for c in cols {
        for (m, x) in mean.iter_mut().zip(c.iter()) {
            *m += x;
        }
    }
    for m in &mut mean {
        *m /= n as f64;
    }
    let k = gram(cols, Some(&mean));
    DMatrix::from_fn(n, n, |i, j| {
        if i == j {
            0.0
        } else {
            (k[(i, i)] + k[(j, j)] - 2.0 * k[(i, j)]).max(0.0)
        }
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Kernel {
    #[cfg(target_arch = "x86_64")]
    Avx512,
    #[cfg(target_arch = "x86_64")]
    Avx2,
    Portable,
}

impl Kernel {
    fn detect() -> Self {
        #[cfg(target_arch = "x86_64")]
        {
            if std::is_x86_feature_detected!("avx512f") {
                return Kernel::Avx512;
            }
            if std::is_x86_feature_detected!("avx2") && std::is_x86_feature_detected!("fma") {
                return Kernel::Avx2;
            }
        }
        Kernel::Portable
    }

    fn tile(self) -> (usize, usize, usize) {
        match self {
            #[cfg(target_arch = "x86_64")]
            Kernel::Avx512 => (4, 6, 8),
            #[cfg(target_arch = "x86_64")]
            Kernel::Avx2 => (3, 4, 4),
            Kernel::Portable => (4, 4, 4),
        }
    }
}

/// Upper-triangular partial Gram over rows `r0..r1`, row-major `n × n`.
fn chunk_gram(
    kernel: Kernel,
    cols: &[&[f64]],
    shift: Option<&[f64]>,
    r0: usize,
    r1: usize,
) -> Vec<f64> {
    let n = cols.len();
    let np = n.div_ceil(COL_PAD) * COL_PAD;
    let (ti, tj, lanes) = kernel.tile();
    let tiles_i = np / ti;
    let tiles_j = np / tj;
    let tile_len = ti * tj * lanes;
    let mut acc = vec![0.0; tiles_i * tiles_j * tile_len];
    let mut pack = vec![0.0; np * BLOCK_ROWS];

    let mut b0 = r0;
    while b0 < r1 {
        let b1 = (b0 + BLOCK_ROWS).min(r1);
        let rows = b1 - b0;
        let stride = rows.div_ceil(lanes) * lanes;
        pack_block(cols, shift, b0, b1, stride, &mut pack[..np * stride]);
        for a in 0..tiles_i {
            for b in 0..tiles_j {
                if (b + 1) * tj <= a * ti {
                    continue;
                }
                let slot = &mut acc[(a * tiles_j + b) * tile_len..][..tile_len];
                run_tile(kernel, &pack, stride, a * ti, b * tj, slot);
            }
        }
        b0 = b1;
    }

    let mut out = vec![0.0; n * n];
    for a in 0..tiles_i {
        for b in 0..tiles_j {
            if (b + 1) * tj <= a * ti {
                continue;
            }
            let slot = &acc[(a * tiles_j + b) * tile_len..][..tile_len];
            for i in 0..ti {
                for j in 0..tj {
                    let (gi, gj) = (a * ti + i, b * tj + j);
                    if gi < n && gj < n && gi <= gj {
                        let lane = &slot[(i * tj + j) * lanes..][..lanes];
                        out[gi * n + gj] = lane.iter().fold(0.0, |s, v| s + v);
                    }
                }
            }
        }
    }
    out
}

/// Copies rows `b0..b1` of every column into `pack`, subtracting the shift
/// and zero-padding both the row tail and the extra columns.
fn pack_block(
    cols: &[&[f64]],
    shift: Option<&[f64]>,
    b0: usize,
    b1: usize,
    stride: usize,
    pack: &mut [f64],
) {
    pack.fill(0.0);
    let rows = b1 - b0;
    for (j, col) in cols.iter().enumerate() {
        let dst = &mut pack[j * stride..j * stride + rows];
        let src = &col[b0..b1];
        match shift {
            Some(s) => {
                for ((o, x), m) in dst.iter_mut().zip(src).zip(&s[b0..b1]) {
                    *o = x - m;
                }
            }
            None => dst.copy_from_slice(src),
        }
    }
}

fn run_tile(kernel: Kernel, pack: &[f64], stride: usize, i0: usize, j0: usize, slot: &mut [f64]) {
    match kernel {
        #[cfg(target_arch = "x86_64")]
        // SAFETY: the variant is only chosen after runtime feature detection,
        // and `pack` holds `np * stride` values with `stride` a lane multiple.
        Kernel::Avx512 => unsafe { x86::tile_avx512(pack, stride, i0, j0, slot) },
        #[cfg(target_arch = "x86_64")]
        // SAFETY: as above.
        Kernel::Avx2 => unsafe { x86::tile_avx2(pack, stride, i0, j0, slot) },
        Kernel::Portable => tile_portable(pack, stride, i0, j0, slot),
    }
}

fn tile_portable(pack: &[f64], stride: usize, i0: usize, j0: usize, slot: &mut [f64]) {
    const TI: usize = 4;
    const TJ: usize = 4;
    const L: usize = 4;
    let mut acc = [[[0.0f64; L]; TJ]; TI];
    for (i, row) in acc.iter_mut().enumerate() {
        for (j, cell) in row.iter_mut().enumerate() {
            cell.copy_from_slice(&slot[(i * TJ + j) * L..][..L]);
        }
    }
    for r in (0..stride).step_by(L) {
        for (i, row) in acc.iter_mut().enumerate() {
            let a = &pack[(i0 + i) * stride + r..][..L];
            for (j, cell) in row.iter_mut().enumerate() {
                let b = &pack[(j0 + j) * stride + r..][..L];
                for l in 0..L {
                    cell[l] = a[l].mul_add(b[l], cell[l]);
                }
            }
        }
    }
    for (i, row) in acc.iter().enumerate() {
        for (j, cell) in row.iter().enumerate() {
            slot[(i * TJ + j) * L..][..L].copy_from_slice(cell);
        }
    }
}

#[cfg(target_arch = "x86_64")]
mod x86 {
    use std::arch::x86_64::*;

    #[target_feature(enable = "avx512f")]
    pub(super) unsafe fn tile_avx512(
        pack: &[f64],
        stride: usize,
        i0: usize,
        j0: usize,
        slot: &mut [f64],
    ) {
        const TI: usize = 4;
        const TJ: usize = 6;
        debug_assert!(slot.len() == TI * TJ * 8);
        debug_assert!((j0 + TJ) * stride <= pack.len() && (i0 + TI) * stride <= pack.len());
        let base = pack.as_ptr();
        let sp = slot.as_mut_ptr();
        let mut acc = [[_mm512_setzero_pd(); TJ]; TI];
        for (i, row) in acc.iter_mut().enumerate() {
            for (j, cell) in row.iter_mut().enumerate() {
                *cell = _mm512_loadu_pd(sp.add((i * TJ + j) * 8));
            }
        }
        let pa: [*const f64; TI] = std::array::from_fn(|i| base.add((i0 + i) * stride));
        let pb: [*const f64; TJ] = std::array::from_fn(|j| base.add((j0 + j) * stride));
        let mut r = 0;
        while r < stride {
            let a0 = _mm512_loadu_pd(pa[0].add(r));
            let a1 = _mm512_loadu_pd(pa[1].add(r));
            let a2 = _mm512_loadu_pd(pa[2].add(r));
            let a3 = _mm512_loadu_pd(pa[3].add(r));
            for j in 0..TJ {
                let b = _mm512_loadu_pd(pb[j].add(r));
                acc[0][j] = _mm512_fmadd_pd(a0, b, acc[0][j]);
                acc[1][j] = _mm512_fmadd_pd(a1, b, acc[1][j]);
                acc[2][j] = _mm512_fmadd_pd(a2, b, acc[2][j]);
                acc[3][j] = _mm512_fmadd_pd(a3, b, acc[3][j]);
            }
            r += 8;
        }
        for (i, row) in acc.iter().enumerate() {
            for (j, cell) in row.iter().enumerate() {
                _mm512_storeu_pd(sp.add((i * TJ + j) * 8), *cell);
            }
        }
    }

    #[target_feature(enable = "avx2,fma")]
    pub(super) unsafe fn tile_avx2(
        pack: &[f64],
        stride: usize,
        i0: usize,
        j0: usize,
        slot: &mut [f64],
    ) {
        const TI: usize = 3;
        const TJ: usize = 4;
        debug_assert!(slot.len() == TI * TJ * 4);
        debug_assert!((j0 + TJ) * stride <= pack.len() && (i0 + TI) * stride <= pack.len());
        let base = pack.as_ptr();
        let sp = slot.as_mut_ptr();
        let mut acc = [[_mm256_setzero_pd(); TJ]; TI];
        for (i, row) in acc.iter_mut().enumerate() {
            for (j, cell) in row.iter_mut().enumerate() {
                *cell = _mm256_loadu_pd(sp.add((i * TJ + j) * 4));
            }
        }
        let pa: [*const f64; TI] = std::array::from_fn(|i| base.add((i0 + i) * stride));
        let pb: [*const f64; TJ] = std::array::from_fn(|j| base.add((j0 + j) * stride));
        let mut r = 0;
        while r < stride {
            let a0 = _mm256_loadu_pd(pa[0].add(r));
            let a1 = _mm256_loadu_pd(pa[1].add(r));
            let a2 = _mm256_loadu_pd(pa[2].add(r));
            for j in 0..TJ {
                let b = _mm256_loadu_pd(pb[j].add(r));
                acc[0][j] = _mm256_fmadd_pd(a0, b, acc[0][j]);
                acc[1][j] = _mm256_fmadd_pd(a1, b, acc[1][j]);
                acc[2][j] = _mm256_fmadd_pd(a2, b, acc[2][j]);
            }
            r += 4;
        }
        for (i, row) in acc.iter().enumerate() {
            for (j, cell) in row.iter().enumerate() {
                _mm256_storeu_pd(sp.add((i * TJ + j) * 4), *cell);
            }
        }
    }
}
