//! Raw loops behind the tape ops. Slices in, slices out; no shape validation here.

use super::Scalar;

/// Kernel, stride and zero-padding per spatial axis (depth, height, width).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Window3 {
    pub kernel: [usize; 3],
    pub stride: [usize; 3],
    pub padding: [usize; 3],
}

impl Window3 {
    pub fn cube(kernel: usize, stride: usize, padding: usize) -> Self {
        Window3 {
            kernel: [kernel; 3],
            stride: [stride; 3],
            padding: [padding; 3],
        }
    }

    pub fn out_dims(&self, input: [usize; 3]) -> Option<[usize; 3]> {
        let mut out = [0; 3];
        for a in 0..3 {
            out[a] = conv_out_extent(input[a], self.kernel[a], self.stride[a], self.padding[a])?;
        }
        Some(out)
    }

    fn volume(&self) -> usize {
        self.kernel.iter().product()
    }
}

/// `floor((input + 2 * padding - kernel) / stride) + 1`, or `None` when the kernel
/// does not fit inside the padded input.
pub fn conv_out_extent(input: usize, kernel: usize, stride: usize, padding: usize) -> Option<usize> {
    let padded = input + 2 * padding;
    if kernel == 0 || stride == 0 || kernel > padded {
        return None;
    }
    Some((padded - kernel) / stride + 1)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PoolKind {
    Max,
    Mean,
}

/// Source index of an output tap, `None` when it lands in the zero padding.
#[inline]
fn tap(o: usize, k: usize, stride: usize, pad: usize, extent: usize) -> Option<usize> {
    let i = (o * stride + k).checked_sub(pad)?;
    (i < extent).then_some(i)
}

/// Copies `[c, d, h, w]` into a zero-padded `[c, d + 2pd, h + 2ph, w + 2pw]` buffer,
/// appending to `out`.
fn pad_into<T: Scalar>(x: &[T], channels: usize, dims: [usize; 3], pad: [usize; 3], out: &mut Vec<T>) {
    let [d, h, w] = dims;
    if pad == [0; 3] {
        out.extend_from_slice(&x[..channels * d * h * w]);
        return;
    }
    let zeros = |out: &mut Vec<T>, n: usize| out.extend(std::iter::repeat_n(T::zero(), n));
    let (pw, ph) = (w + 2 * pad[2], h + 2 * pad[1]);
    for c in 0..channels {
        zeros(out, pad[0] * ph * pw);
        for z in 0..d {
            zeros(out, pad[1] * pw);
            for y in 0..h {
                let src = ((c * d + z) * h + y) * w;
                zeros(out, pad[2]);
                out.extend_from_slice(&x[src..src + w]);
                zeros(out, pad[2]);
            }
            zeros(out, pad[1] * pw);
        }
        zeros(out, pad[0] * ph * pw);
    }
}

fn padded_dims(dims: [usize; 3], pad: [usize; 3]) -> [usize; 3] {
    [dims[0] + 2 * pad[0], dims[1] + 2 * pad[1], dims[2] + 2 * pad[2]]
}

/// Padded-input offset of every column entry, row-major over `[c * taps, positions]`.
fn gather_index(channels: usize, pdims: [usize; 3], win: &Window3, out: [usize; 3]) -> Vec<usize> {
    let [kd, kh, kw] = win.kernel;
    let [sd, sh, sw] = win.stride;
    let [pdd, ph, pw] = pdims;
    let mut idx = Vec::with_capacity(channels * win.volume() * out.iter().product::<usize>());
    for c in 0..channels {
        for a in 0..kd {
            for b in 0..kh {
                for e in 0..kw {
                    for oz in 0..out[0] {
                        for oy in 0..out[1] {
                            let base = ((c * pdd + oz * sd + a) * ph + oy * sh + b) * pw + e;
                            idx.extend((0..out[2]).map(|ox| base + ox * sw));
                        }
                    }
                }
            }
        }
    }
    idx
}

pub(crate) struct ConvDims {
    pub batch: usize,
    pub c_in: usize,
    pub c_out: usize,
    pub dims: [usize; 3],
    pub out: [usize; 3],
}

impl ConvDims {
    fn k(&self, win: &Window3) -> usize {
        self.c_in * win.volume()
    }
    fn positions(&self) -> usize {
        self.out.iter().product()
    }
    fn in_len(&self) -> usize {
        self.c_in * self.dims.iter().product::<usize>()
    }
}

/// Column matrix `[k, batch * positions]` of the whole batch; sample `n` owns
/// columns `n * positions ..`.
pub(crate) fn im2col<T: Scalar>(x: &[T], cd: &ConvDims, win: &Window3) -> Vec<T> {
    let pdims = padded_dims(cd.dims, win.padding);
    let plen = cd.c_in * pdims.iter().product::<usize>();
    let mut padded = Vec::with_capacity(cd.batch * plen);
    for n in 0..cd.batch {
        pad_into(&x[n * cd.in_len()..], cd.c_in, cd.dims, win.padding, &mut padded);
    }
    let idx = gather_index(cd.c_in, pdims, win, cd.out);
    let p = cd.positions();
    let mut cols = Vec::with_capacity(idx.len() * cd.batch);
    for row in idx.chunks(p) {
        for sample in padded.chunks(plen) {
            cols.extend(row.iter().map(|&i| sample[i]));
        }
    }
    cols
}

/// Adjoint of [`im2col`]: folds `[k, batch * positions]` columns back to input layout.
pub(crate) fn col2im<T: Scalar>(cols: &[T], cd: &ConvDims, win: &Window3) -> Vec<T> {
    let pdims = padded_dims(cd.dims, win.padding);
    let plen = cd.c_in * pdims.iter().product::<usize>();
    let mut padded = vec![T::zero(); cd.batch * plen];
    let idx = gather_index(cd.c_in, pdims, win, cd.out);
    let p = cd.positions();
    for (row, line) in idx.chunks(p).zip(cols.chunks(cd.batch * p)) {
        for (sample, g) in padded.chunks_mut(plen).zip(line.chunks(p)) {
            for (&i, &v) in row.iter().zip(g) {
                sample[i] = sample[i] + v;
            }
        }
    }
    let [d, h, w] = cd.dims;
    let pad = win.padding;
    let mut dx = Vec::with_capacity(cd.batch * cd.in_len());
    for sample in padded.chunks(plen) {
        for c in 0..cd.c_in {
            for z in 0..d {
                for y in 0..h {
                    let from = ((c * pdims[0] + z + pad[0]) * pdims[1] + y + pad[1]) * pdims[2] + pad[2];
                    dx.extend_from_slice(&sample[from..from + w]);
                }
            }
        }
    }
    dx
}

/// `[batch, c, p]` <-> `[c, batch * p]`.
fn swap_batch_channel<T: Scalar>(src: &[T], outer: usize, inner: usize, p: usize) -> Vec<T> {
    let mut dst = vec![T::zero(); src.len()];
    for a in 0..outer {
        for b in 0..inner {
            let from = (a * inner + b) * p;
            let to = (b * outer + a) * p;
            dst[to..to + p].copy_from_slice(&src[from..from + p]);
        }
    }
    dst
}

/// Cross-correlation over a batch of `[c_in, d, h, w]` samples, as one GEMM.
/// Also returns the column matrix, which the kernel gradient reuses.
pub(crate) fn conv3d_forward<T: Scalar>(x: &[T], kernel: &[T], cd: &ConvDims, win: &Window3) -> (Vec<T>, Vec<T>) {
    let k = cd.k(win);
    let cols_n = cd.batch * cd.positions();
    let cols = im2col(x, cd, win);
    let mut y = vec![T::zero(); cd.c_out * cols_n];
    T::gemm(
        cd.c_out,
        k,
        cols_n,
        T::one(),
        kernel,
        (k as isize, 1),
        &cols,
        (cols_n as isize, 1),
        T::zero(),
        &mut y,
        (cols_n as isize, 1),
    );
    (swap_batch_channel(&y, cd.c_out, cd.batch, cd.positions()), cols)
}

/// Returns `(d_input, d_kernel)`; either is skipped when not needed. `cols` is the
/// forward column matrix, rebuilt from `x` when absent.
#[allow(clippy::too_many_arguments)]
pub(crate) fn conv3d_backward<T: Scalar>(
    x: &[T],
    cols: Option<&[T]>,
    kernel: &[T],
    grad_out: &[T],
    cd: &ConvDims,
    win: &Window3,
    need_input: bool,
    need_kernel: bool,
) -> (Option<Vec<T>>, Option<Vec<T>>) {
    let k = cd.k(win);
    let p = cd.positions();
    let cols_n = cd.batch * p;
    // G as [c_out, batch * p]
    let g = swap_batch_channel(grad_out, cd.batch, cd.c_out, p);
    let dk = need_kernel.then(|| {
        let rebuilt;
        let cols = match cols {
            Some(c) => c,
            None => {
                rebuilt = im2col(x, cd, win);
                &rebuilt[..]
            }
        };
        let mut dk = vec![T::zero(); cd.c_out * k];
        // dK[c_out, k] = G[c_out, n*p] * cols^T[n*p, k]
        T::gemm(
            cd.c_out,
            cols_n,
            k,
            T::one(),
            &g,
            (cols_n as isize, 1),
            cols,
            (1, cols_n as isize),
            T::zero(),
            &mut dk,
            (k as isize, 1),
        );
        dk
    });
    let dx = need_input.then(|| {
        // dcols[k, n*p] = K^T[k, c_out] * G[c_out, n*p]
        let mut dcols = vec![T::zero(); k * cols_n];
        T::gemm(
            k,
            cd.c_out,
            cols_n,
            T::one(),
            kernel,
            (1, k as isize),
            &g,
            (cols_n as isize, 1),
            T::zero(),
            &mut dcols,
            (cols_n as isize, 1),
        );
        col2im(&dcols, cd, win)
    });
    (dx, dk)
}

/// Pools each `[d, h, w]` plane independently; `planes` counts batch * channels.
/// For max pooling also returns the flat source index of each output (first maximum
/// in scan order wins).
pub(crate) fn pool3d_forward<T: Scalar>(
    x: &[T],
    planes: usize,
    dims: [usize; 3],
    win: &Window3,
    out: [usize; 3],
    kind: PoolKind,
) -> (Vec<T>, Vec<usize>) {
    let [d, h, w] = dims;
    let plane_len = d * h * w;
    let out_len = out[0] * out[1] * out[2];
    let mut y = Vec::with_capacity(planes * out_len);
    let mut argmax = Vec::with_capacity(if kind == PoolKind::Max { planes * out_len } else { 0 });
    let inv = T::one() / T::of(win.volume() as f64);
    for pl in 0..planes {
        let base = pl * plane_len;
        for oz in 0..out[0] {
            for oy in 0..out[1] {
                for ox in 0..out[2] {
                    let mut best = T::neg_infinity();
                    let mut best_idx = usize::MAX;
                    let mut sum = T::zero();
                    for a in 0..win.kernel[0] {
                        let Some(iz) = tap(oz, a, win.stride[0], win.padding[0], d) else {
                            continue;
                        };
                        for b in 0..win.kernel[1] {
                            let Some(iy) = tap(oy, b, win.stride[1], win.padding[1], h) else {
                                continue;
                            };
                            for e in 0..win.kernel[2] {
                                let Some(ix) = tap(ox, e, win.stride[2], win.padding[2], w) else {
                                    continue;
                                };
                                let idx = base + (iz * h + iy) * w + ix;
                                let v = x[idx];
                                sum = sum + v;
                                if v > best {
                                    best = v;
                                    best_idx = idx;
                                }
                            }
                        }
                    }
                    match kind {
                        PoolKind::Max => {
                            y.push(best);
                            argmax.push(best_idx);
                        }
                        PoolKind::Mean => y.push(sum * inv),
                    }
                }
            }
        }
    }
    (y, argmax)
}

pub(crate) fn pool3d_backward<T: Scalar>(
    grad_out: &[T],
    in_len: usize,
    planes: usize,
    dims: [usize; 3],
    win: &Window3,
    out: [usize; 3],
    kind: PoolKind,
    argmax: &[usize],
) -> Vec<T> {
    let mut dx = vec![T::zero(); in_len];
    match kind {
        PoolKind::Max => {
            for (g, &idx) in grad_out.iter().zip(argmax) {
                dx[idx] = dx[idx] + *g;
            }
        }
        PoolKind::Mean => {
            let [d, h, w] = dims;
            let inv = T::one() / T::of(win.volume() as f64);
            let mut o = 0;
            for pl in 0..planes {
                let base = pl * d * h * w;
                for oz in 0..out[0] {
                    for oy in 0..out[1] {
                        for ox in 0..out[2] {
                            let g = grad_out[o] * inv;
                            o += 1;
                            for a in 0..win.kernel[0] {
                                let Some(iz) = tap(oz, a, win.stride[0], win.padding[0], d) else {
                                    continue;
                                };
                                for b in 0..win.kernel[1] {
                                    let Some(iy) = tap(oy, b, win.stride[1], win.padding[1], h)
                                    else {
                                        continue;
                                    };
                                    for e in 0..win.kernel[2] {
                                        if let Some(ix) =
                                            tap(ox, e, win.stride[2], win.padding[2], w)
                                        {
                                            let idx = base + (iz * h + iy) * w + ix;
                                            dx[idx] = dx[idx] + g;
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    dx
}

/// Batch-norm layout: `batch` samples, each `channels` contiguous runs of `inner` values.
#[derive(Clone, Copy, Debug)]
pub(crate) struct NormDims {
    pub batch: usize,
    pub channels: usize,
    pub inner: usize,
}

impl NormDims {
    #[inline]
    fn for_channel<T: Copy>(&self, data: &[T], c: usize, mut f: impl FnMut(usize, T)) {
        for n in 0..self.batch {
            let start = (n * self.channels + c) * self.inner;
            for (i, &v) in data[start..start + self.inner].iter().enumerate() {
                f(start + i, v);
            }
        }
    }

    pub fn count(&self) -> usize {
        self.batch * self.inner
    }
}

/// Per-channel batch statistics: biased mean and variance over batch and spatial axes.
pub(crate) fn channel_moments<T: Scalar>(x: &[T], nd: NormDims) -> (Vec<T>, Vec<T>) {
    let m = T::of(nd.count() as f64);
    let mut means = Vec::with_capacity(nd.channels);
    let mut vars = Vec::with_capacity(nd.channels);
    for c in 0..nd.channels {
        let mut sum = T::zero();
        nd.for_channel(x, c, |_, v| sum = sum + v);
        let mean = sum / m;
        let mut sq = T::zero();
        nd.for_channel(x, c, |_, v| sq = sq + (v - mean) * (v - mean));
        means.push(mean);
        vars.push(sq / m);
    }
    (means, vars)
}

/// `y = gamma * (x - mean) * inv_std + beta`; also returns the normalized input.
pub(crate) fn normalize_affine<T: Scalar>(
    x: &[T],
    nd: NormDims,
    mean: &[T],
    inv_std: &[T],
    gamma: &[T],
    beta: &[T],
) -> (Vec<T>, Vec<T>) {
    let mut y = vec![T::zero(); x.len()];
    let mut x_hat = vec![T::zero(); x.len()];
    for c in 0..nd.channels {
        nd.for_channel(x, c, |i, v| {
            let n = (v - mean[c]) * inv_std[c];
            x_hat[i] = n;
            y[i] = gamma[c] * n + beta[c];
        });
    }
    (y, x_hat)
}

/// Gradients of training-mode batch norm: `(dx, dgamma, dbeta)`.
pub(crate) fn batchnorm_train_backward<T: Scalar>(
    grad_out: &[T],
    x_hat: &[T],
    nd: NormDims,
    inv_std: &[T],
    gamma: &[T],
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let m = T::of(nd.count() as f64);
    let mut dx = vec![T::zero(); grad_out.len()];
    let mut dgamma = vec![T::zero(); nd.channels];
    let mut dbeta = vec![T::zero(); nd.channels];
    for c in 0..nd.channels {
        let mut sum_g = T::zero();
        let mut sum_gx = T::zero();
        nd.for_channel(grad_out, c, |i, g| {
            sum_g = sum_g + g;
            sum_gx = sum_gx + g * x_hat[i];
        });
        dgamma[c] = sum_gx;
        dbeta[c] = sum_g;
        let scale = gamma[c] * inv_std[c] / m;
        nd.for_channel(grad_out, c, |i, g| {
            dx[i] = scale * (m * g - sum_g - x_hat[i] * sum_gx);
        });
    }
    (dx, dgamma, dbeta)
}

/// Reduces a per-element quantity to per-channel sums over batch and spatial axes.
pub(crate) fn channel_sum<T: Scalar>(x: &[T], nd: NormDims, weight: Option<&[T]>) -> Vec<T> {
    (0..nd.channels)
        .map(|c| {
            let mut s = T::zero();
            nd.for_channel(x, c, |i, v| {
                s = s + weight.map_or(v, |w| v * w[i]);
            });
            s
        })
        .collect()
}

/// Softmax along an axis of a row-major buffer viewed as `[outer, axis_len, inner]`.
pub(crate) fn softmax_forward<T: Scalar>(x: &[T], outer: usize, len: usize, inner: usize) -> Vec<T> {
    let mut y = vec![T::zero(); x.len()];
    for o in 0..outer {
        for i in 0..inner {
            let at = |j: usize| (o * len + j) * inner + i;
            let max = (0..len).map(|j| x[at(j)]).fold(T::neg_infinity(), T::max);
            let mut total = T::zero();
            for j in 0..len {
                let e = (x[at(j)] - max).exp();
                y[at(j)] = e;
                total = total + e;
            }
            for j in 0..len {
                y[at(j)] = y[at(j)] / total;
            }
        }
    }
    y
}

pub(crate) fn softmax_backward<T: Scalar>(
    y: &[T],
    grad_out: &[T],
    outer: usize,
    len: usize,
    inner: usize,
) -> Vec<T> {
    let mut dx = vec![T::zero(); y.len()];
    for o in 0..outer {
        for i in 0..inner {
            let at = |j: usize| (o * len + j) * inner + i;
            let dot: T = (0..len).map(|j| y[at(j)] * grad_out[at(j)]).sum();
            for j in 0..len {
                dx[at(j)] = y[at(j)] * (grad_out[at(j)] - dot);
            }
        }
    }
    dx
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn out_extent_formula() {
        assert_eq!(conv_out_extent(44, 7, 2, 3), Some(22));
        assert_eq!(conv_out_extent(54, 7, 2, 3), Some(27));
        assert_eq!(conv_out_extent(22, 3, 2, 1), Some(11));
        assert_eq!(conv_out_extent(27, 3, 2, 1), Some(14));
        assert_eq!(conv_out_extent(2, 5, 1, 1), None);
    }

    #[test]
    fn im2col_col2im_are_adjoint() {
        // <im2col(x), c> == <x, col2im(c)> for arbitrary x and c.
        let win = Window3 {
            kernel: [2, 3, 2],
            stride: [1, 2, 1],
            padding: [1, 0, 1],
        };
        let dims = [3, 5, 4];
        let out = win.out_dims(dims).unwrap();
        let cd = ConvDims {
            batch: 2,
            c_in: 2,
            c_out: 1,
            dims,
            out,
        };
        let x: Vec<f64> = (0..2 * 2 * 60).map(|i| ((i * 37 % 11) as f64) - 5.0).collect();
        let rows = 2 * 12;
        let p: usize = out.iter().product();
        let c: Vec<f64> = (0..rows * 2 * p).map(|i| ((i * 13 % 7) as f64) - 3.0).collect();
        let cols = im2col(&x, &cd, &win);
        assert_eq!(cols.len(), c.len());
        let back = col2im(&c, &cd, &win);
        assert_eq!(back.len(), x.len());
        let lhs: f64 = cols.iter().zip(&c).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.iter().zip(&back).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-9);
    }
}
