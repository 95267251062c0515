//! Matrix kernels shared by the engine and the scoring code.
//!
//! `gemm` accumulates every output entry as `0.0 + a[i,0]*b[0,j] + a[i,1]*b[1,j] + ...`
//! in ascending `k`, exactly the order of a naive triple loop. Rows are
//! independent, so the row-parallel path is bit-identical to the serial one.

mod svd;

pub use svd::{frobenius_norm, nuclear_norm, singular_values, svd, Svd};

use rayon::prelude::*;

const ROW_BLOCK: usize = 8;
const COL_BLOCK: usize = 512;
/// Below this many multiply-adds the thread pool is not worth waking.
const PAR_THRESHOLD: usize = 1 << 22;

/// `c = a * b` for row-major `a: m x k`, `b: k x n`, `c: m x n`.
pub fn gemm(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], c: &mut [f64]) {
    assert_eq!(a.len(), m * k);
    assert_eq!(b.len(), k * n);
    assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    c.fill(0.0);
    if k == 0 {
        return;
    }
    let chunk = ROW_BLOCK * n;
    if m * k * n >= PAR_THRESHOLD && rayon::current_num_threads() > 1 {
        c.par_chunks_mut(chunk).enumerate().for_each(|(blk, cb)| {
            let i0 = blk * ROW_BLOCK;
            let rows = cb.len() / n;
            row_block(&a[i0 * k..(i0 + rows) * k], b, cb, rows, k, n);
        });
    } else {
        for (blk, cb) in c.chunks_mut(chunk).enumerate() {
            let i0 = blk * ROW_BLOCK;
            let rows = cb.len() / n;
            row_block(&a[i0 * k..(i0 + rows) * k], b, cb, rows, k, n);
        }
    }
}

fn row_block(a: &[f64], b: &[f64], c: &mut [f64], rows: usize, k: usize, n: usize) {
    if rows == ROW_BLOCK {
        let mut j0 = 0;
        while j0 < n {
            let j1 = (j0 + COL_BLOCK).min(n);
            let mut tiles: [&mut [f64]; ROW_BLOCK] = Default::default();
            for (t, row) in tiles.iter_mut().zip(c.chunks_mut(n)) {
                *t = &mut row[j0..j1];
            }
            for p in 0..k {
                let x: [f64; ROW_BLOCK] = std::array::from_fn(|r| a[r * k + p]);
                let brow = &b[p * n + j0..p * n + j1];
                for (jj, &bv) in brow.iter().enumerate() {
                    for r in 0..ROW_BLOCK {
                        tiles[r][jj] += x[r] * bv;
                    }
                }
            }
            j0 = j1;
        }
    } else {
        for r in 0..rows {
            let crow = &mut c[r * n..(r + 1) * n];
            for p in 0..k {
                let x = a[r * k + p];
                let brow = &b[p * n..(p + 1) * n];
                for (y, &bv) in crow.iter_mut().zip(brow) {
                    *y += x * bv;
                }
            }
        }
    }
}

/// Writes the transpose of row-major `a: m x n` into `out: n x m`.
pub fn transpose_into(m: usize, n: usize, a: &[f64], out: &mut [f64]) {
    const B: usize = 32;
    for i0 in (0..m).step_by(B) {
        for j0 in (0..n).step_by(B) {
            for i in i0..(i0 + B).min(m) {
                for j in j0..(j0 + B).min(n) {
                    out[j * m + i] = a[i * n + j];
                }
            }
        }
    }
}

pub fn transposed(m: usize, n: usize, a: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    transpose_into(m, n, a, &mut out);
    out
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[cfg(test)]
pub(crate) mod oracle;
