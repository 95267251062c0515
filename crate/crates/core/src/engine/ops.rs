//! Per-layer forward and backward kernels on raw row-major buffers.

use crate::linalg::{gemm, transposed};

pub(crate) const BN_EPS: f64 = 1e-5;

/// `y = x w^T + b` with `x: n x i`, `w: o x i`.
pub(crate) fn dense_forward(x: &[f64], n: usize, i: usize, w: &[f64], o: usize, b: Option<&[f64]>) -> Vec<f64> {
    let wt = transposed(o, i, w);
    let mut y = vec![0.0; n * o];
    gemm(n, i, o, x, &wt, &mut y);
    if let Some(b) = b {
        for row in y.chunks_mut(o) {
            for (v, bb) in row.iter_mut().zip(b) {
                *v += bb;
            }
        }
    }
    y
}

/// Returns `(dx, dw, db)`.
pub(crate) fn dense_backward(
    x: &[f64],
    dy: &[f64],
    n: usize,
    i: usize,
    w: &[f64],
    o: usize,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let mut dx = vec![0.0; n * i];
    gemm(n, o, i, dy, w, &mut dx);
    let dyt = transposed(n, o, dy);
    let mut dw = vec![0.0; o * i];
    gemm(o, n, i, &dyt, x, &mut dw);
    let mut db = vec![0.0; o];
    for row in dy.chunks(o) {
        for (acc, v) in db.iter_mut().zip(row) {
            *acc += v;
        }
    }
    (dx, dw, db)
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct ConvGeom {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub o: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeom {
    fn rows(&self) -> usize {
        self.c * self.k * self.k
    }

    fn cols(&self) -> usize {
        self.ho * self.wo
    }
}

fn im2col(x: &[f64], g: &ConvGeom, col: &mut [f64]) {
    let cols = g.cols();
    for c in 0..g.c {
        for ki in 0..g.k {
            for kj in 0..g.k {
                let row = (c * g.k + ki) * g.k + kj;
                let dst = &mut col[row * cols..(row + 1) * cols];
                for oh in 0..g.ho {
                    let ih = (oh * g.stride + ki) as isize - g.pad as isize;
                    for ow in 0..g.wo {
                        let iw = (ow * g.stride + kj) as isize - g.pad as isize;
                        dst[oh * g.wo + ow] = if ih >= 0 && iw >= 0 && (ih as usize) < g.h && (iw as usize) < g.w {
                            x[(c * g.h + ih as usize) * g.w + iw as usize]
                        } else {
                            0.0
                        };
                    }
                }
            }
        }
    }
}

fn col2im_add(col: &[f64], g: &ConvGeom, dx: &mut [f64]) {
    let cols = g.cols();
    for c in 0..g.c {
        for ki in 0..g.k {
            for kj in 0..g.k {
                let row = (c * g.k + ki) * g.k + kj;
                let src = &col[row * cols..(row + 1) * cols];
                for oh in 0..g.ho {
                    let ih = (oh * g.stride + ki) as isize - g.pad as isize;
                    if ih < 0 || ih as usize >= g.h {
                        continue;
                    }
                    for ow in 0..g.wo {
                        let iw = (ow * g.stride + kj) as isize - g.pad as isize;
                        if iw < 0 || iw as usize >= g.w {
                            continue;
                        }
                        dx[(c * g.h + ih as usize) * g.w + iw as usize] += src[oh * g.wo + ow];
                    }
                }
            }
        }
    }
}

pub(crate) fn conv_forward(x: &[f64], n: usize, g: &ConvGeom, w: &[f64], b: Option<&[f64]>) -> Vec<f64> {
    let in_len = g.c * g.h * g.w;
    let out_len = g.o * g.cols();
    let mut y = vec![0.0; n * out_len];
    let mut col = vec![0.0; g.rows() * g.cols()];
    for s in 0..n {
        im2col(&x[s * in_len..(s + 1) * in_len], g, &mut col);
        let ys = &mut y[s * out_len..(s + 1) * out_len];
        gemm(g.o, g.rows(), g.cols(), w, &col, ys);
        if let Some(b) = b {
            for (oc, plane) in ys.chunks_mut(g.cols()).enumerate() {
                for v in plane {
                    *v += b[oc];
                }
            }
        }
    }
    y
}

/// Returns `(dx, dw, db)`.
pub(crate) fn conv_backward(
    x: &[f64],
    dy: &[f64],
    n: usize,
    g: &ConvGeom,
    w: &[f64],
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let in_len = g.c * g.h * g.w;
    let out_len = g.o * g.cols();
    let (rows, cols) = (g.rows(), g.cols());
    let wt = transposed(g.o, rows, w);
    let mut dx = vec![0.0; n * in_len];
    let mut dw = vec![0.0; g.o * rows];
    let mut db = vec![0.0; g.o];
    let mut col = vec![0.0; rows * cols];
    let mut dcol = vec![0.0; rows * cols];
    let mut dw_s = vec![0.0; g.o * rows];
    for s in 0..n {
        let dys = &dy[s * out_len..(s + 1) * out_len];
        im2col(&x[s * in_len..(s + 1) * in_len], g, &mut col);
        let colt = transposed(rows, cols, &col);
        gemm(g.o, cols, rows, dys, &colt, &mut dw_s);
        for (acc, v) in dw.iter_mut().zip(&dw_s) {
            *acc += v;
        }
        gemm(rows, g.o, cols, &wt, dys, &mut dcol);
        col2im_add(&dcol, g, &mut dx[s * in_len..(s + 1) * in_len]);
        for (oc, plane) in dys.chunks(cols).enumerate() {
            db[oc] += plane.iter().sum::<f64>();
        }
    }
    (dx, dw, db)
}

/// Iterates `(channel, contiguous block)` over an `(N, C, spatial)` buffer.
pub(crate) fn channel_blocks(data: &[f64], c: usize, spatial: usize) -> impl Iterator<Item = (usize, &[f64])> {
    data.chunks(spatial).enumerate().map(move |(i, blk)| (i % c, blk))
}

pub(crate) fn channel_blocks_mut(
    data: &mut [f64],
    c: usize,
    spatial: usize,
) -> impl Iterator<Item = (usize, &mut [f64])> {
    data.chunks_mut(spatial).enumerate().map(move |(i, blk)| (i % c, blk))
}

pub(crate) struct BnOut {
    pub y: Vec<f64>,
    pub xhat: Vec<f64>,
    pub inv_std: Vec<f64>,
    /// Batch mean and unbiased variance (train mode only).
    pub batch_stats: Option<(Vec<f64>, Vec<f64>)>,
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn bn_forward(
    x: &[f64],
    c: usize,
    spatial: usize,
    gamma: &[f64],
    beta: &[f64],
    running_mean: &[f64],
    running_var: &[f64],
    train: bool,
) -> BnOut {
    let count = (x.len() / c) as f64;
    let (mean, var, batch_stats) = if train {
        let mut mean = vec![0.0; c];
        for (ch, blk) in channel_blocks(x, c, spatial) {
            mean[ch] += blk.iter().sum::<f64>();
        }
        for m in mean.iter_mut() {
            *m /= count;
        }
        let mut var = vec![0.0; c];
        for (ch, blk) in channel_blocks(x, c, spatial) {
            var[ch] += blk.iter().map(|v| (v - mean[ch]).powi(2)).sum::<f64>();
        }
        for v in var.iter_mut() {
            *v /= count;
        }
        let unbiased = var
            .iter()
            .map(|v| if count > 1.0 { v * count / (count - 1.0) } else { *v })
            .collect();
        (mean.clone(), var, Some((mean, unbiased)))
    } else {
        (running_mean.to_vec(), running_var.to_vec(), None)
    };
    let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
    let mut xhat = x.to_vec();
    for (ch, blk) in channel_blocks_mut(&mut xhat, c, spatial) {
        for v in blk {
            *v = (*v - mean[ch]) * inv_std[ch];
        }
    }
    let mut y = xhat.clone();
    for (ch, blk) in channel_blocks_mut(&mut y, c, spatial) {
        for v in blk {
            *v = gamma[ch] * *v + beta[ch];
        }
    }
    BnOut {
        y,
        xhat,
        inv_std,
        batch_stats,
    }
}

/// Returns `(dx, dgamma, dbeta)`.
pub(crate) fn bn_backward(
    dy: &[f64],
    xhat: &[f64],
    inv_std: &[f64],
    gamma: &[f64],
    c: usize,
    spatial: usize,
    train: bool,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let count = (dy.len() / c) as f64;
    let mut dgamma = vec![0.0; c];
    let mut dbeta = vec![0.0; c];
    for ((ch, d), (_, xh)) in channel_blocks(dy, c, spatial).zip(channel_blocks(xhat, c, spatial)) {
        dbeta[ch] += d.iter().sum::<f64>();
        dgamma[ch] += d.iter().zip(xh).map(|(a, b)| a * b).sum::<f64>();
    }
    let mut dx = dy.to_vec();
    if train {
        for ((ch, d), (_, xh)) in channel_blocks_mut(&mut dx, c, spatial).zip(channel_blocks(xhat, c, spatial)) {
            let k = gamma[ch] * inv_std[ch];
            for (v, x) in d.iter_mut().zip(xh) {
                *v = k * (*v - dbeta[ch] / count - x * dgamma[ch] / count);
            }
        }
    } else {
        for (ch, d) in channel_blocks_mut(&mut dx, c, spatial) {
            let k = gamma[ch] * inv_std[ch];
            for v in d {
                *v *= k;
            }
        }
    }
    (dx, dgamma, dbeta)
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct PoolGeom {
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub ho: usize,
    pub wo: usize,
}

/// Returns outputs and, per output, the flat input index of the maximum.
pub(crate) fn max_pool_forward(x: &[f64], planes: usize, g: &PoolGeom) -> (Vec<f64>, Vec<usize>) {
    let (in_plane, out_plane) = (g.h * g.w, g.ho * g.wo);
    let mut y = vec![0.0; planes * out_plane];
    let mut arg = vec![0usize; planes * out_plane];
    for p in 0..planes {
        let xs = &x[p * in_plane..(p + 1) * in_plane];
        for oh in 0..g.ho {
            for ow in 0..g.wo {
                let mut best = f64::NEG_INFINITY;
                let mut best_i = 0;
                for ki in 0..g.k {
                    let ih = (oh * g.stride + ki) as isize - g.pad as isize;
                    if ih < 0 || ih as usize >= g.h {
                        continue;
                    }
                    for kj in 0..g.k {
                        let iw = (ow * g.stride + kj) as isize - g.pad as isize;
                        if iw < 0 || iw as usize >= g.w {
                            continue;
                        }
                        let i = ih as usize * g.w + iw as usize;
                        if xs[i] > best {
                            best = xs[i];
                            best_i = i;
                        }
                    }
                }
                let o = p * out_plane + oh * g.wo + ow;
                y[o] = best;
                arg[o] = p * in_plane + best_i;
            }
        }
    }
    (y, arg)
}

/// Zero padding counts toward the divisor (`k*k` always).
pub(crate) fn avg_pool_forward(x: &[f64], planes: usize, g: &PoolGeom) -> Vec<f64> {
    let (in_plane, out_plane) = (g.h * g.w, g.ho * g.wo);
    let inv = 1.0 / (g.k * g.k) as f64;
    let mut y = vec![0.0; planes * out_plane];
    for p in 0..planes {
        let xs = &x[p * in_plane..(p + 1) * in_plane];
        for oh in 0..g.ho {
            for ow in 0..g.wo {
                let mut acc = 0.0;
                for ki in 0..g.k {
                    let ih = (oh * g.stride + ki) as isize - g.pad as isize;
                    if ih < 0 || ih as usize >= g.h {
                        continue;
                    }
                    for kj in 0..g.k {
                        let iw = (ow * g.stride + kj) as isize - g.pad as isize;
                        if iw < 0 || iw as usize >= g.w {
                            continue;
                        }
                        acc += xs[ih as usize * g.w + iw as usize];
                    }
                }
                y[p * out_plane + oh * g.wo + ow] = acc * inv;
            }
        }
    }
    y
}

pub(crate) fn avg_pool_backward(dy: &[f64], planes: usize, g: &PoolGeom) -> Vec<f64> {
    let (in_plane, out_plane) = (g.h * g.w, g.ho * g.wo);
    let inv = 1.0 / (g.k * g.k) as f64;
    let mut dx = vec![0.0; planes * in_plane];
    for p in 0..planes {
        let dxs = &mut dx[p * in_plane..(p + 1) * in_plane];
        for oh in 0..g.ho {
            for ow in 0..g.wo {
                let d = dy[p * out_plane + oh * g.wo + ow] * inv;
                for ki in 0..g.k {
                    let ih = (oh * g.stride + ki) as isize - g.pad as isize;
                    if ih < 0 || ih as usize >= g.h {
                        continue;
                    }
                    for kj in 0..g.k {
                        let iw = (ow * g.stride + kj) as isize - g.pad as isize;
                        if iw < 0 || iw as usize >= g.w {
                            continue;
                        }
                        dxs[ih as usize * g.w + iw as usize] += d;
                    }
                }
            }
        }
    }
    dx
}

pub(crate) fn softmax_rows(x: &[f64], k: usize) -> Vec<f64> {
    let mut y = x.to_vec();
    for row in y.chunks_mut(k) {
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for v in row.iter_mut() {
            *v = (*v - m).exp();
            z += *v;
        }
        for v in row.iter_mut() {
            *v /= z;
        }
    }
    y
}

/// Mean cross-entropy of `logits: n x k`; returns `(loss, dloss/dlogits)`.
pub(crate) fn cross_entropy(logits: &[f64], labels: &[usize], k: usize) -> (f64, Vec<f64>) {
    let n = labels.len();
    let mut grad = softmax_rows(logits, k);
    let mut loss = 0.0;
    for (s, (row, &y)) in grad.chunks_mut(k).zip(labels).enumerate() {
        let z = &logits[s * k..(s + 1) * k];
        let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + z.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        loss += lse - z[y];
        row[y] -= 1.0;
        for v in row.iter_mut() {
            *v /= n as f64;
        }
    }
    (loss / n as f64, grad)
}

/// Per-sample cross-entropy.
pub(crate) fn per_sample_loss(logits: &[f64], labels: &[usize], k: usize) -> Vec<f64> {
    labels
        .iter()
        .enumerate()
        .map(|(s, &y)| {
            let z = &logits[s * k..(s + 1) * k];
            let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            m + z.iter().map(|v| (v - m).exp()).sum::<f64>().ln() - z[y]
        })
        .collect()
}
