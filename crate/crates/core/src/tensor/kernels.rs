//! Slice-level forward and backward kernels.
//!
//! Everything here works on flat row-major buffers plus explicit dimensions so
//! the graph layer can stay focused on bookkeeping. Output buffers are always
//! accumulated into (`+=`), which is what the reverse pass needs; forward
//! callers pass zeroed buffers.

use crate::scalar::Scalar;

/// `out[m,n] += a[m,k] · b[k,n]`
pub fn matmul_acc<T: Scalar>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    for i in 0..m {
        let out_row = &mut out[i * n..(i + 1) * n];
        let a_row = &a[i * k..(i + 1) * k];
        for (p, &av) in a_row.iter().enumerate() {
            if av == T::zero() {
                continue;
            }
            let b_row = &b[p * n..(p + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    }
}

/// `out[m,n] += a[k,m]ᵀ · b[k,n]`
pub fn matmul_tn_acc<T: Scalar>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), k * m);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    for p in 0..k {
        let a_row = &a[p * m..(p + 1) * m];
        let b_row = &b[p * n..(p + 1) * n];
        for (i, &av) in a_row.iter().enumerate() {
            if av == T::zero() {
                continue;
            }
            let out_row = &mut out[i * n..(i + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    }
}

/// `out[m,n] += a[m,k] · b[n,k]ᵀ`
pub fn matmul_nt_acc<T: Scalar>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(out.len(), m * n);
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let b_row = &b[j * k..(j + 1) * k];
            out[i * n + j] += dot(a_row, b_row);
        }
    }
}

fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    // Four independent accumulators let the compiler vectorize.
    let mut acc = [T::zero(); 4];
    let chunks = a.len() / 4;
    for c in 0..chunks {
        for l in 0..4 {
            acc[l] += a[c * 4 + l] * b[c * 4 + l];
        }
    }
    let mut tail = T::zero();
    for i in chunks * 4..a.len() {
        tail += a[i] * b[i];
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

/// Geometry of a 2D convolution over a single `[C,H,W]` image.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub in_channels: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub out_channels: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeometry {
    pub fn out_h(&self) -> usize {
        (self.in_h + 2 * self.pad - self.kh) / self.stride + 1
    }

    pub fn out_w(&self) -> usize {
        (self.in_w + 2 * self.pad - self.kw) / self.stride + 1
    }

    fn col_rows(&self) -> usize {
        self.in_channels * self.kh * self.kw
    }

    fn col_cols(&self) -> usize {
        self.out_h() * self.out_w()
    }
}

/// Unfolds `input` into a `[C·kh·kw, H'·W']` patch matrix.
fn im2col<T: Scalar>(input: &[T], g: &ConvGeometry) -> Vec<T> {
    let (oh, ow) = (g.out_h(), g.out_w());
    let mut cols = vec![T::zero(); g.col_rows() * g.col_cols()];
    for c in 0..g.in_channels {
        let plane = &input[c * g.in_h * g.in_w..(c + 1) * g.in_h * g.in_w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (c * g.kh + ky) * g.kw + kx;
                let dst = &mut cols[row * oh * ow..(row + 1) * oh * ow];
                for oy in 0..oh {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.in_h as isize {
                        continue;
                    }
                    let src_row = &plane[iy as usize * g.in_w..(iy as usize + 1) * g.in_w];
                    for ox in 0..ow {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.in_w as isize {
                            dst[oy * ow + ox] = src_row[ix as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Folds a patch-matrix gradient back onto the input image (adjoint of `im2col`).
fn col2im_acc<T: Scalar>(cols: &[T], g: &ConvGeometry, input_grad: &mut [T]) {
    let (oh, ow) = (g.out_h(), g.out_w());
    for c in 0..g.in_channels {
        let plane = &mut input_grad[c * g.in_h * g.in_w..(c + 1) * g.in_h * g.in_w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (c * g.kh + ky) * g.kw + kx;
                let src = &cols[row * oh * ow..(row + 1) * oh * ow];
                for oy in 0..oh {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.in_h as isize {
                        continue;
                    }
                    for ox in 0..ow {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.in_w as isize {
                            plane[iy as usize * g.in_w + ix as usize] += src[oy * ow + ox];
                        }
                    }
                }
            }
        }
    }
}

pub fn conv2d_forward<T: Scalar>(
    input: &[T],
    weight: &[T],
    bias: Option<&[T]>,
    g: &ConvGeometry,
) -> Vec<T> {
    let spatial = g.col_cols();
    let mut out = vec![T::zero(); g.out_channels * spatial];
    if g.kh == 1 && g.kw == 1 && g.stride == 1 && g.pad == 0 {
        matmul_acc(weight, input, &mut out, g.out_channels, g.in_channels, spatial);
    } else {
        let cols = im2col(input, g);
        matmul_acc(weight, &cols, &mut out, g.out_channels, g.col_rows(), spatial);
    }
    if let Some(bias) = bias {
        for (plane, &b) in out.chunks_mut(spatial).zip(bias) {
            plane.iter_mut().for_each(|v| *v += b);
        }
    }
    out
}

/// Accumulates gradients for the input, weight and bias of a convolution.
pub fn conv2d_backward<T: Scalar>(
    input: &[T],
    weight: &[T],
    out_grad: &[T],
    g: &ConvGeometry,
    input_grad: Option<&mut [T]>,
    weight_grad: Option<&mut [T]>,
    bias_grad: Option<&mut [T]>,
) {
    let spatial = g.col_cols();
    let rows = g.col_rows();
    let pointwise = g.kh == 1 && g.kw == 1 && g.stride == 1 && g.pad == 0;

    if let Some(bg) = bias_grad {
        for (b, plane) in bg.iter_mut().zip(out_grad.chunks(spatial)) {
            *b += plane.iter().copied().sum::<T>();
        }
    }
    if let Some(wg) = weight_grad {
        if pointwise {
            matmul_nt_acc(out_grad, input, wg, g.out_channels, spatial, rows);
        } else {
            let cols = im2col(input, g);
            matmul_nt_acc(out_grad, &cols, wg, g.out_channels, spatial, rows);
        }
    }
    if let Some(ig) = input_grad {
        if pointwise {
            matmul_tn_acc(weight, out_grad, ig, rows, g.out_channels, spatial);
        } else {
            let mut cols_grad = vec![T::zero(); rows * spatial];
            matmul_tn_acc(weight, out_grad, &mut cols_grad, rows, g.out_channels, spatial);
            col2im_acc(&cols_grad, g, ig);
        }
    }
}

/// 2×2, stride-2 max pooling. Returns the pooled values and, per output, the
/// flat input index that won. Ties go to the first index in row-major order.
pub fn max_pool2_forward<T: Scalar>(
    input: &[T],
    channels: usize,
    h: usize,
    w: usize,
) -> (Vec<T>, Vec<usize>) {
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Vec::with_capacity(channels * oh * ow);
    let mut argmax = Vec::with_capacity(channels * oh * ow);
    for c in 0..channels {
        let base = c * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = base + (2 * oy) * w + 2 * ox;
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let idx = base + (2 * oy + dy) * w + 2 * ox + dx;
                    if input[idx] > input[best] {
                        best = idx;
                    }
                }
                out.push(input[best]);
                argmax.push(best);
            }
        }
    }
    (out, argmax)
}

/// Per-axis source taps for bilinear resampling with half-pixel centres
/// (`align_corners = false`): output `o` samples source coordinate
/// `(o + 0.5)·in/out − 0.5`, clamped at the low edge.
pub fn bilinear_taps(in_len: usize, out_len: usize) -> Vec<(usize, usize, f64)> {
    let scale = in_len as f64 / out_len as f64;
    (0..out_len)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(in_len - 1);
            let i1 = (i0 + 1).min(in_len - 1);
            let frac = if i0 == i1 { 0.0 } else { src - i0 as f64 };
            (i0, i1, frac)
        })
        .collect()
}

pub fn bilinear_forward<T: Scalar>(
    input: &[T],
    channels: usize,
    (h, w): (usize, usize),
    (oh, ow): (usize, usize),
) -> Vec<T> {
    let ty = bilinear_taps(h, oh);
    let tx = bilinear_taps(w, ow);
    let mut out = vec![T::zero(); channels * oh * ow];
    for c in 0..channels {
        let plane = &input[c * h * w..(c + 1) * h * w];
        let dst = &mut out[c * oh * ow..(c + 1) * oh * ow];
        for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
            let fy = T::of(fy);
            for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                let fx = T::of(fx);
                let top = plane[y0 * w + x0] * (T::one() - fx) + plane[y0 * w + x1] * fx;
                let bottom = plane[y1 * w + x0] * (T::one() - fx) + plane[y1 * w + x1] * fx;
                dst[oy * ow + ox] = top * (T::one() - fy) + bottom * fy;
            }
        }
    }
    out
}

pub fn bilinear_backward_acc<T: Scalar>(
    out_grad: &[T],
    channels: usize,
    (h, w): (usize, usize),
    (oh, ow): (usize, usize),
    input_grad: &mut [T],
) {
    let ty = bilinear_taps(h, oh);
    let tx = bilinear_taps(w, ow);
    for c in 0..channels {
        let src = &out_grad[c * oh * ow..(c + 1) * oh * ow];
        let plane = &mut input_grad[c * h * w..(c + 1) * h * w];
        for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
            let fy = T::of(fy);
            for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                let fx = T::of(fx);
                let g = src[oy * ow + ox];
                let gt = g * (T::one() - fy);
                let gb = g * fy;
                plane[y0 * w + x0] += gt * (T::one() - fx);
                plane[y0 * w + x1] += gt * fx;
                plane[y1 * w + x0] += gb * (T::one() - fx);
                plane[y1 * w + x1] += gb * fx;
            }
        }
    }
}

/// Bin `[start, end)` of adaptive average pooling along one axis.
pub fn adaptive_bins(in_len: usize, out_len: usize) -> Vec<(usize, usize)> {
    (0..out_len)
        .map(|i| {
            let start = i * in_len / out_len;
            let end = ((i + 1) * in_len).div_ceil(out_len);
            (start, end)
        })
        .collect()
}

pub fn adaptive_avg_pool_forward<T: Scalar>(
    input: &[T],
    channels: usize,
    (h, w): (usize, usize),
    (oh, ow): (usize, usize),
) -> Vec<T> {
    let by = adaptive_bins(h, oh);
    let bx = adaptive_bins(w, ow);
    let mut out = vec![T::zero(); channels * oh * ow];
    for c in 0..channels {
        let plane = &input[c * h * w..(c + 1) * h * w];
        for (oy, &(y0, y1)) in by.iter().enumerate() {
            for (ox, &(x0, x1)) in bx.iter().enumerate() {
                let mut acc = T::zero();
                for y in y0..y1 {
                    for x in x0..x1 {
                        acc += plane[y * w + x];
                    }
                }
                let count = T::of(((y1 - y0) * (x1 - x0)) as f64);
                out[(c * oh + oy) * ow + ox] = acc / count;
            }
        }
    }
    out
}

pub fn adaptive_avg_pool_backward_acc<T: Scalar>(
    out_grad: &[T],
    channels: usize,
    (h, w): (usize, usize),
    (oh, ow): (usize, usize),
    input_grad: &mut [T],
) {
    let by = adaptive_bins(h, oh);
    let bx = adaptive_bins(w, ow);
    for c in 0..channels {
        let plane = &mut input_grad[c * h * w..(c + 1) * h * w];
        for (oy, &(y0, y1)) in by.iter().enumerate() {
            for (ox, &(x0, x1)) in bx.iter().enumerate() {
                let count = T::of(((y1 - y0) * (x1 - x0)) as f64);
                let g = out_grad[(c * oh + oy) * ow + ox] / count;
                for y in y0..y1 {
                    for x in x0..x1 {
                        plane[y * w + x] += g;
                    }
                }
            }
        }
    }
}

/// Row-wise softmax with max subtraction.
pub fn softmax_rows<T: Scalar>(input: &[T], cols: usize) -> Vec<T> {
    let mut out = input.to_vec();
    for row in out.chunks_mut(cols) {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut total = T::zero();
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            total += *v;
        }
        row.iter_mut().for_each(|v| *v /= total);
    }
    out
}

pub fn softmax_rows_backward_acc<T: Scalar>(
    output: &[T],
    out_grad: &[T],
    cols: usize,
    input_grad: &mut [T],
) {
    for ((y, g), dx) in output
        .chunks(cols)
        .zip(out_grad.chunks(cols))
        .zip(input_grad.chunks_mut(cols))
    {
        let inner: T = y.iter().zip(g).map(|(&a, &b)| a * b).sum();
        for ((d, &yv), &gv) in dx.iter_mut().zip(y).zip(g) {
            *d += yv * (gv - inner);
        }
    }
}

/// Saved statistics of a layer-norm forward pass.
#[derive(Clone, Debug)]
pub struct LayerNormCache<T> {
    pub normed: Vec<T>,
    pub inv_std: Vec<T>,
}

pub fn layer_norm_forward<T: Scalar>(
    input: &[T],
    gain: &[T],
    shift: &[T],
    cols: usize,
    eps: T,
) -> (Vec<T>, LayerNormCache<T>) {
    let rows = input.len() / cols;
    let n = T::of(cols as f64);
    let mut out = vec![T::zero(); input.len()];
    let mut normed = vec![T::zero(); input.len()];
    let mut inv_std = Vec::with_capacity(rows);
    for r in 0..rows {
        let x = &input[r * cols..(r + 1) * cols];
        let mean = x.iter().copied().sum::<T>() / n;
        let var = x.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
        let istd = T::one() / (var + eps).sqrt();
        inv_std.push(istd);
        for c in 0..cols {
            let xn = (x[c] - mean) * istd;
            normed[r * cols + c] = xn;
            out[r * cols + c] = xn * gain[c] + shift[c];
        }
    }
    (out, LayerNormCache { normed, inv_std })
}

pub fn layer_norm_backward_acc<T: Scalar>(
    cache: &LayerNormCache<T>,
    gain: &[T],
    out_grad: &[T],
    cols: usize,
    input_grad: Option<&mut [T]>,
    gain_grad: Option<&mut [T]>,
    shift_grad: Option<&mut [T]>,
) {
    let rows = out_grad.len() / cols;
    if let Some(gg) = gain_grad {
        for r in 0..rows {
            for c in 0..cols {
                gg[c] += out_grad[r * cols + c] * cache.normed[r * cols + c];
            }
        }
    }
    if let Some(sg) = shift_grad {
        for r in 0..rows {
            for c in 0..cols {
                sg[c] += out_grad[r * cols + c];
            }
        }
    }
    if let Some(ig) = input_grad {
        let n = T::of(cols as f64);
        for r in 0..rows {
            let xn = &cache.normed[r * cols..(r + 1) * cols];
            let dy = &out_grad[r * cols..(r + 1) * cols];
            let mut mean_d = T::zero();
            let mut mean_dx = T::zero();
            for c in 0..cols {
                let d = dy[c] * gain[c];
                mean_d += d;
                mean_dx += d * xn[c];
            }
            mean_d /= n;
            mean_dx /= n;
            let istd = cache.inv_std[r];
            for c in 0..cols {
                let d = dy[c] * gain[c];
                ig[r * cols + c] += istd * (d - mean_d - xn[c] * mean_dx);
            }
        }
    }
}
