//! Batched layer kernels on flat `[n, c, h, w]` buffers.

use crate::scalar::Scalar;

/// Geometry of a square-kernel 2-D convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub c_in: usize,
    pub c_out: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub h_in: usize,
    pub w_in: usize,
    pub h_out: usize,
    pub w_out: usize,
}

impl ConvGeom {
    pub fn new(c_in: usize, c_out: usize, k: usize, stride: usize, pad: usize, h_in: usize, w_in: usize) -> Self {
        Self {
            c_in,
            c_out,
            k,
            stride,
            pad,
            h_in,
            w_in,
            h_out: (h_in + 2 * pad - k) / stride + 1,
            w_out: (w_in + 2 * pad - k) / stride + 1,
        }
    }

    pub fn col_rows(&self) -> usize {
        self.c_in * self.k * self.k
    }

    pub fn in_len(&self) -> usize {
        self.c_in * self.h_in * self.w_in
    }

    pub fn out_hw(&self) -> usize {
        self.h_out * self.w_out
    }

    pub fn out_len(&self) -> usize {
        self.c_out * self.out_hw()
    }

    pub fn weight_len(&self) -> usize {
        self.c_out * self.col_rows()
    }

    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.pad == 0
    }
}

/// Output columns `ox` whose input column `ox * stride + kj - pad` lies
/// inside `0..w_in`, as a half-open range.
fn valid_cols(g: &ConvGeom, kj: usize) -> (usize, usize) {
    let lo = g.pad.saturating_sub(kj).div_ceil(g.stride);
    let hi = if g.w_in + g.pad > kj {
        ((g.w_in + g.pad - kj - 1) / g.stride + 1).min(g.w_out)
    } else {
        0
    };
    (lo.min(hi), hi)
}

/// Target number of scratch elements per column block, sized to stay in L2.
const COL_BLOCK: usize = 96 * 1024;

/// Output rows per column block.
fn block_rows(g: &ConvGeom) -> usize {
    (COL_BLOCK / (g.col_rows() * g.w_out).max(1)).clamp(1, g.h_out)
}

/// Columns for output rows `oy0..oy1`, laid out `[col_rows, (oy1 - oy0) * w_out]`.
fn im2col<T: Scalar>(g: &ConvGeom, x: &[T], oy0: usize, oy1: usize, col: &mut [T]) {
    let width = (oy1 - oy0) * g.w_out;
    for c in 0..g.c_in {
        let plane = &x[c * g.h_in * g.w_in..(c + 1) * g.h_in * g.w_in];
        for ki in 0..g.k {
            for kj in 0..g.k {
                let (lo, hi) = valid_cols(g, kj);
                let row = &mut col[((c * g.k + ki) * g.k + kj) * width..][..width];
                for oy in oy0..oy1 {
                    let out = &mut row[(oy - oy0) * g.w_out..(oy - oy0 + 1) * g.w_out];
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h_in as isize || lo == hi {
                        out.fill(T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * g.w_in..(iy as usize + 1) * g.w_in];
                    out[..lo].fill(T::zero());
                    out[hi..].fill(T::zero());
                    let first = lo * g.stride + kj - g.pad;
                    if g.stride == 1 {
                        out[lo..hi].copy_from_slice(&src[first..first + hi - lo]);
                    } else {
                        for (i, o) in out[lo..hi].iter_mut().enumerate() {
                            *o = src[first + i * g.stride];
                        }
                    }
                }
            }
        }
    }
}

/// Scatter-adds a column block (output rows `oy0..oy1`) onto an input-shaped buffer.
fn col2im<T: Scalar>(g: &ConvGeom, col: &[T], oy0: usize, oy1: usize, dx: &mut [T]) {
    let width = (oy1 - oy0) * g.w_out;
    for c in 0..g.c_in {
        let plane = &mut dx[c * g.h_in * g.w_in..(c + 1) * g.h_in * g.w_in];
        for ki in 0..g.k {
            for kj in 0..g.k {
                let (lo, hi) = valid_cols(g, kj);
                if lo == hi {
                    continue;
                }
                let row = &col[((c * g.k + ki) * g.k + kj) * width..][..width];
                let first = lo * g.stride + kj - g.pad;
                for oy in oy0..oy1 {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h_in as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.w_in..(iy as usize + 1) * g.w_in];
                    let base = (oy - oy0) * g.w_out;
                    let src = &row[base + lo..base + hi];
                    if g.stride == 1 {
                        for (d, &v) in dst[first..first + hi - lo].iter_mut().zip(src) {
                            *d += v;
                        }
                    } else {
                        for (i, &v) in src.iter().enumerate() {
                            dst[first + i * g.stride] += v;
                        }
                    }
                }
            }
        }
    }
}

/// `y = conv(x, weight)` for `n` samples; `col` is scratch space.
pub(crate) fn conv_forward<T: Scalar>(g: &ConvGeom, weight: &[T], x: &[T], y: &mut [T], n: usize, col: &mut Vec<T>) {
    let (rows, hw) = (g.col_rows(), g.out_hw());
    let step = block_rows(g);
    if !g.is_pointwise() {
        col.resize(rows * step * g.w_out, T::zero());
    }
    for s in 0..n {
        let xs = &x[s * g.in_len()..(s + 1) * g.in_len()];
        let ys = &mut y[s * g.out_len()..(s + 1) * g.out_len()];
        if g.is_pointwise() {
            T::gemm(g.c_out, rows, hw, T::one(), weight, (rows as isize, 1), xs, (hw as isize, 1), T::zero(), ys, (hw as isize, 1));
            continue;
        }
        for oy0 in (0..g.h_out).step_by(step) {
            let oy1 = (oy0 + step).min(g.h_out);
            let width = (oy1 - oy0) * g.w_out;
            im2col(g, xs, oy0, oy1, col);
            T::gemm(
                g.c_out,
                rows,
                width,
                T::one(),
                weight,
                (rows as isize, 1),
                &col[..rows * width],
                (width as isize, 1),
                T::zero(),
                &mut ys[oy0 * g.w_out..],
                (hw as isize, 1),
            );
        }
    }
}

/// Accumulates the weight gradient into `dw` and, when requested, writes the
/// input gradient into `dx`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn conv_backward<T: Scalar>(
    g: &ConvGeom,
    weight: &[T],
    x: &[T],
    dy: &[T],
    dw: &mut [T],
    mut dx: Option<&mut [T]>,
    n: usize,
    col: &mut Vec<T>,
    dcol: &mut Vec<T>,
) {
    let (rows, hw) = (g.col_rows(), g.out_hw());
    let step = if g.is_pointwise() { g.h_out } else { block_rows(g) };
    col.resize(rows * step * g.w_out, T::zero());
    dcol.resize(rows * step * g.w_out, T::zero());
    for s in 0..n {
        let xs = &x[s * g.in_len()..(s + 1) * g.in_len()];
        let dys = &dy[s * g.out_len()..(s + 1) * g.out_len()];
        let mut dxs = dx.as_deref_mut().map(|d| &mut d[s * g.in_len()..(s + 1) * g.in_len()]);
        if let Some(d) = dxs.as_deref_mut() {
            d.fill(T::zero());
        }
        for oy0 in (0..g.h_out).step_by(step) {
            let oy1 = (oy0 + step).min(g.h_out);
            let width = (oy1 - oy0) * g.w_out;
            let b: &[T] = if g.is_pointwise() {
                xs
            } else {
                im2col(g, xs, oy0, oy1, col);
                &col[..rows * width]
            };
            let dyb = &dys[oy0 * g.w_out..];
            // dW += dY * col^T
            T::gemm(g.c_out, width, rows, T::one(), dyb, (hw as isize, 1), b, (1, width as isize), T::one(), dw, (rows as isize, 1));
            if let Some(d) = dxs.as_deref_mut() {
                let target: &mut [T] = if g.is_pointwise() { d } else { &mut dcol[..rows * width] };
                T::gemm(rows, g.c_out, width, T::one(), weight, (1, rows as isize), dyb, (hw as isize, 1), T::zero(), target, (width as isize, 1));
                if !g.is_pointwise() {
                    col2im(g, &dcol[..rows * width], oy0, oy1, d);
                }
            }
        }
    }
}

/// Cached normalization state of one batch-norm application.
#[derive(Debug, Clone, Default)]
pub(crate) struct BnCache<T> {
    pub xhat: Vec<T>,
    pub inv_std: Vec<T>,
    /// Whether batch statistics (rather than running ones) normalized the input.
    pub batch_stats: bool,
}

pub(crate) struct BnParams<'a, T> {
    pub gamma: &'a [T],
    pub beta: &'a [T],
    pub eps: f64,
}

#[allow(clippy::too_many_arguments)]
fn bn_apply<T: Scalar>(p: &BnParams<'_, T>, mean: &[f64], inv_std: &[f64], x: &[T], y: &mut [T], n: usize, hw: usize, xhat: Option<&mut Vec<T>>) {
    let c = p.gamma.len();
    match xhat {
        Some(xh) => {
            xh.resize(x.len(), T::zero());
            for s in 0..n {
                for ch in 0..c {
                    let r = (s * c + ch) * hw..(s * c + ch + 1) * hw;
                    let (m, is) = (T::lit(mean[ch]), T::lit(inv_std[ch]));
                    let (g, b) = (p.gamma[ch], p.beta[ch]);
                    for ((h, o), &v) in xh[r.clone()].iter_mut().zip(&mut y[r.clone()]).zip(&x[r]) {
                        *h = (v - m) * is;
                        *o = g * *h + b;
                    }
                }
            }
        }
        None => {
            for s in 0..n {
                for ch in 0..c {
                    let r = (s * c + ch) * hw..(s * c + ch + 1) * hw;
                    let scale = T::lit(inv_std[ch]) * p.gamma[ch];
                    let shift = p.beta[ch] - T::lit(mean[ch]) * scale;
                    for (o, &v) in y[r.clone()].iter_mut().zip(&x[r]) {
                        *o = v * scale + shift;
                    }
                }
            }
        }
    }
}

/// Sum of `f(x)` using eight independent accumulators so the loop vectorizes.
#[inline]
fn lane_sum<T: Scalar>(xs: &[T], f: impl Fn(T) -> T) -> f64 {
    let mut acc = [T::zero(); 8];
    let chunks = xs.chunks_exact(8);
    let rest = chunks.remainder();
    for c in chunks {
        for (a, &v) in acc.iter_mut().zip(c) {
            *a += f(v);
        }
    }
    acc.iter().chain(rest.iter().map(|&v| f(v)).collect::<Vec<_>>().iter()).map(|v| v.to_f64_lossy()).sum()
}

/// Eight-lane dot product.
#[inline]
fn lane_dot<T: Scalar>(a: &[T], b: &[T]) -> f64 {
    let mut acc = [T::zero(); 8];
    let (ca, cb) = (a.chunks_exact(8), b.chunks_exact(8));
    let mut tail = 0.0;
    for (&x, &y) in ca.remainder().iter().zip(cb.remainder()) {
        tail += (x * y).to_f64_lossy();
    }
    for (x, y) in ca.zip(cb) {
        for i in 0..8 {
            acc[i] += x[i] * y[i];
        }
    }
    acc.iter().map(|v| v.to_f64_lossy()).sum::<f64>() + tail
}

fn channel_moments<T: Scalar>(x: &[T], n: usize, c: usize, hw: usize) -> (Vec<f64>, Vec<f64>) {
    let count = (n * hw) as f64;
    let mut mean = vec![0.0; c];
    let mut var = vec![0.0; c];
    for ch in 0..c {
        let rows = || (0..n).map(|s| &x[(s * c + ch) * hw..(s * c + ch + 1) * hw]);
        let m = rows().map(|r| lane_sum(r, |v| v)).sum::<f64>() / count;
        let mt = T::lit(m);
        let sq: f64 = rows().map(|r| lane_sum(r, |v| (v - mt) * (v - mt))).sum();
        mean[ch] = m;
        var[ch] = sq / count;
    }
    (mean, var)
}

/// Batch-statistics normalization; updates the running statistics with the
/// unbiased batch variance.
#[allow(clippy::too_many_arguments)]
pub(crate) fn bn_forward_batch<T: Scalar>(
    p: &BnParams<'_, T>,
    running_mean: &mut [T],
    running_var: &mut [T],
    momentum: f64,
    x: &[T],
    y: &mut [T],
    n: usize,
    hw: usize,
    cache: &mut BnCache<T>,
) {
    let c = p.gamma.len();
    let (mean, var) = channel_moments(x, n, c, hw);
    let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + p.eps).sqrt()).collect();
    bn_apply(p, &mean, &inv_std, x, y, n, hw, Some(&mut cache.xhat));
    let count = (n * hw) as f64;
    let unbias = if count > 1.0 { count / (count - 1.0) } else { 1.0 };
    for ch in 0..c {
        running_mean[ch] = T::lit((1.0 - momentum) * running_mean[ch].to_f64_lossy() + momentum * mean[ch]);
        running_var[ch] = T::lit((1.0 - momentum) * running_var[ch].to_f64_lossy() + momentum * var[ch] * unbias);
    }
    cache.inv_std = inv_std.into_iter().map(T::lit).collect();
    cache.batch_stats = true;
}

/// Normalization with fixed statistics; caches `xhat` when `cache` is given.
#[allow(clippy::too_many_arguments)]
pub(crate) fn bn_forward_fixed<T: Scalar>(
    p: &BnParams<'_, T>,
    mean: &[T],
    var: &[T],
    x: &[T],
    y: &mut [T],
    n: usize,
    hw: usize,
    cache: Option<&mut BnCache<T>>,
) {
    let mean: Vec<f64> = mean.iter().map(|v| v.to_f64_lossy()).collect();
    let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v.to_f64_lossy() + p.eps).sqrt()).collect();
    match cache {
        Some(cache) => {
            bn_apply(p, &mean, &inv_std, x, y, n, hw, Some(&mut cache.xhat));
            cache.inv_std = inv_std.into_iter().map(T::lit).collect();
            cache.batch_stats = false;
        }
        None => bn_apply(p, &mean, &inv_std, x, y, n, hw, None),
    }
}

/// Writes `dgamma`, `dbeta` and the input gradient (in place over `dy`).
pub(crate) fn bn_backward<T: Scalar>(gamma: &[T], cache: &BnCache<T>, dy: &mut [T], dgamma: &mut [T], dbeta: &mut [T], n: usize, hw: usize) {
    let c = gamma.len();
    let count = (n * hw) as f64;
    for ch in 0..c {
        let rows = || (0..n).map(|s| (s * c + ch) * hw..(s * c + ch + 1) * hw);
        let (mut sg, mut sb) = (0.0f64, 0.0f64);
        for r in rows() {
            sg += lane_dot(&dy[r.clone()], &cache.xhat[r.clone()]);
            sb += lane_sum(&dy[r], |v| v);
        }
        dgamma[ch] = T::lit(sg);
        dbeta[ch] = T::lit(sb);
        let scale = gamma[ch] * cache.inv_std[ch];
        if cache.batch_stats {
            let k1 = scale;
            let k0 = scale * T::lit(sb / count);
            let kh = scale * T::lit(sg / count);
            for r in rows() {
                for (d, &h) in dy[r.clone()].iter_mut().zip(&cache.xhat[r]) {
                    *d = k1 * *d - k0 - kh * h;
                }
            }
        } else {
            for r in rows() {
                dy[r].iter_mut().for_each(|d| *d *= scale);
            }
        }
    }
}

pub(crate) fn relu_inplace<T: Scalar>(x: &mut [T]) {
    for v in x {
        if *v < T::zero() {
            *v = T::zero();
        }
    }
}

/// Zeroes gradient entries where the (post-activation) output is not positive.
pub(crate) fn relu_backward<T: Scalar>(out: &[T], dy: &mut [T]) {
    for (d, &o) in dy.iter_mut().zip(out) {
        if o <= T::zero() {
            *d = T::zero();
        }
    }
}

pub(crate) fn avg_pool<T: Scalar>(x: &[T], n: usize, c: usize, hw: usize) -> Vec<T> {
    let denom = T::from_usize_lossy(hw);
    (0..n * c).map(|i| T::lit(lane_sum(&x[i * hw..(i + 1) * hw], |v| v)) / denom).collect()
}

pub(crate) fn avg_pool_backward<T: Scalar>(dp: &[T], hw: usize, dx: &mut Vec<T>) {
    let denom = T::from_usize_lossy(hw);
    dx.clear();
    for &d in dp {
        dx.extend(std::iter::repeat_n(d / denom, hw));
    }
}

/// `logits = x W^T + b` with `W` stored `[out, in]`.
pub(crate) fn linear<T: Scalar>(x: &[T], w: &[T], b: &[T], n: usize, d_in: usize, d_out: usize) -> Vec<T> {
    let mut y: Vec<T> = (0..n).flat_map(|_| b.iter().cloned()).collect();
    T::gemm(n, d_in, d_out, T::one(), x, (d_in as isize, 1), w, (1, d_in as isize), T::one(), &mut y, (d_out as isize, 1));
    y
}

/// Returns the input gradient; writes `dw` and `db`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn linear_backward<T: Scalar>(x: &[T], w: &[T], dy: &[T], dw: &mut [T], db: &mut [T], n: usize, d_in: usize, d_out: usize) -> Vec<T> {
    T::gemm(d_out, n, d_in, T::one(), dy, (1, d_out as isize), x, (d_in as isize, 1), T::zero(), dw, (d_in as isize, 1));
    for (j, b) in db.iter_mut().enumerate() {
        *b = (0..n).map(|s| dy[s * d_out + j]).sum();
    }
    let mut dx = vec![T::zero(); n * d_in];
    T::gemm(n, d_out, d_in, T::one(), dy, (d_out as isize, 1), w, (d_in as isize, 1), T::zero(), &mut dx, (d_in as isize, 1));
    dx
}
