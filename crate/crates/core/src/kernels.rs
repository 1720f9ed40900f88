//! Forward/backward kernels on raw row-major buffers.
//!
//! Convolutions use zero "same" padding with output extent `ceil(n / stride)`.
//! Pooling windows start at `i * stride` and are clipped at the far edge, which
//! is equivalent to padding the tail with `-inf` (max) or excluding it (avg).

use crate::tensor::{matmul_into, Scalar};

/// Output extent and leading pad for zero "same" padding.
pub fn same_padding(n: usize, k: usize, stride: usize) -> (usize, usize) {
    let out = n.div_ceil(stride);
    let total = ((out - 1) * stride + k).saturating_sub(n);
    (out, total / 2)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub ho: usize,
    pub wo: usize,
    pub pad_top: usize,
    pub pad_left: usize,
}

impl ConvGeom {
    pub fn new(cin: usize, h: usize, w: usize, cout: usize, kh: usize, kw: usize, stride: usize) -> Self {
        let (ho, pad_top) = same_padding(h, kh, stride);
        let (wo, pad_left) = same_padding(w, kw, stride);
        Self {
            cin,
            h,
            w,
            cout,
            kh,
            kw,
            stride,
            ho,
            wo,
            pad_top,
            pad_left,
        }
    }

    /// Rows of the unfolded patch matrix.
    pub fn patch_len(&self) -> usize {
        self.cin * self.kh * self.kw
    }

    pub fn out_len(&self) -> usize {
        self.ho * self.wo
    }

    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1
    }
}

/// Unfolds `x[cin×h×w]` into `cols[(cin·kh·kw) × (ho·wo)]`.
pub fn im2col<T: Scalar>(g: &ConvGeom, x: &[T], cols: &mut [T]) {
    let n = g.out_len();
    for ci in 0..g.cin {
        let plane = &x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for i in 0..g.kh {
            for j in 0..g.kw {
                let row = (ci * g.kh + i) * g.kw + j;
                let dst = &mut cols[row * n..(row + 1) * n];
                for oy in 0..g.ho {
                    let y = (oy * g.stride + i) as isize - g.pad_top as isize;
                    let out_row = &mut dst[oy * g.wo..(oy + 1) * g.wo];
                    if y < 0 || y >= g.h as isize {
                        out_row.iter_mut().for_each(|v| *v = T::zero());
                        continue;
                    }
                    let src = &plane[y as usize * g.w..(y as usize + 1) * g.w];
                    for (ox, v) in out_row.iter_mut().enumerate() {
                        let xx = (ox * g.stride + j) as isize - g.pad_left as isize;
                        *v = if xx < 0 || xx >= g.w as isize {
                            T::zero()
                        } else {
                            src[xx as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters-and-adds `cols` back into `dx`.
pub fn col2im_add<T: Scalar>(g: &ConvGeom, cols: &[T], dx: &mut [T]) {
    let n = g.out_len();
    for ci in 0..g.cin {
        let plane = &mut dx[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for i in 0..g.kh {
            for j in 0..g.kw {
                let row = (ci * g.kh + i) * g.kw + j;
                let src = &cols[row * n..(row + 1) * n];
                for oy in 0..g.ho {
                    let y = (oy * g.stride + i) as isize - g.pad_top as isize;
                    if y < 0 || y >= g.h as isize {
                        continue;
                    }
                    let dst = &mut plane[y as usize * g.w..(y as usize + 1) * g.w];
                    for ox in 0..g.wo {
                        let xx = (ox * g.stride + j) as isize - g.pad_left as isize;
                        if xx >= 0 && (xx as usize) < g.w {
                            dst[xx as usize] += src[oy * g.wo + ox];
                        }
                    }
                }
            }
        }
    }
}

pub fn conv2d_forward<T: Scalar>(g: &ConvGeom, x: &[T], kernels: &[T], bias: &[T]) -> Vec<T> {
    let n = g.out_len();
    let mut out = vec![T::zero(); g.cout * n];
    for (co, row) in out.chunks_exact_mut(n).enumerate() {
        row.iter_mut().for_each(|v| *v = bias[co]);
    }
    if g.is_pointwise() {
        matmul_into(g.cout, g.cin, n, kernels, false, x, false, &mut out, true);
    } else {
        let mut cols = vec![T::zero(); g.patch_len() * n];
        im2col(g, x, &mut cols);
        matmul_into(g.cout, g.patch_len(), n, kernels, false, &cols, false, &mut out, true);
    }
    out
}

/// Accumulates gradients of a conv2d into the optional `dx`, `dk`, `db` buffers.
pub fn conv2d_backward<T: Scalar>(
    g: &ConvGeom,
    x: &[T],
    kernels: &[T],
    dy: &[T],
    dx: Option<&mut [T]>,
    dk: Option<&mut [T]>,
    db: Option<&mut [T]>,
) {
    let n = g.out_len();
    let q = g.patch_len();
    if let Some(db) = db {
        for (co, row) in dy.chunks_exact(n).enumerate() {
            let mut s = T::zero();
            for &v in row {
                s += v;
            }
            db[co] += s;
        }
    }
    if g.is_pointwise() {
        if let Some(dk) = dk {
            matmul_into(g.cout, n, q, dy, false, x, true, dk, true);
        }
        if let Some(dx) = dx {
            matmul_into(q, g.cout, n, kernels, true, dy, false, dx, true);
        }
        return;
    }
    if let Some(dk) = dk {
        let mut cols = vec![T::zero(); q * n];
        im2col(g, x, &mut cols);
        matmul_into(g.cout, n, q, dy, false, &cols, true, dk, true);
    }
    if let Some(dx) = dx {
        let mut dcols = vec![T::zero(); q * n];
        matmul_into(q, g.cout, n, kernels, true, dy, false, &mut dcols, false);
        col2im_add(g, &dcols, dx);
    }
}

/// Windowed max along the last axis of a `rows × len` buffer.
/// Returns the pooled values and the flat argmax (first index on ties).
pub fn maxpool1d_forward<T: Scalar>(
    x: &[T],
    rows: usize,
    len: usize,
    width: usize,
    stride: usize,
) -> (Vec<T>, Vec<usize>) {
    let out_len = len.div_ceil(stride);
    let mut out = Vec::with_capacity(rows * out_len);
    let mut arg = Vec::with_capacity(rows * out_len);
    for r in 0..rows {
        let base = r * len;
        for o in 0..out_len {
            let start = o * stride;
            let end = (start + width).min(len);
            let mut best = start;
            for i in start + 1..end {
                if x[base + i] > x[base + best] {
                    best = i;
                }
            }
            out.push(x[base + best]);
            arg.push(base + best);
        }
    }
    (out, arg)
}

/// 2-D windowed max over the last two axes of a `planes × h × w` buffer.
pub fn maxpool2d_forward<T: Scalar>(
    x: &[T],
    planes: usize,
    h: usize,
    w: usize,
    window: usize,
    stride: usize,
) -> (Vec<T>, Vec<usize>) {
    let (ho, wo) = (h.div_ceil(stride), w.div_ceil(stride));
    let mut out = Vec::with_capacity(planes * ho * wo);
    let mut arg = Vec::with_capacity(planes * ho * wo);
    for p in 0..planes {
        let base = p * h * w;
        for oy in 0..ho {
            let (y0, y1) = (oy * stride, (oy * stride + window).min(h));
            for ox in 0..wo {
                let (x0, x1) = (ox * stride, (ox * stride + window).min(w));
                let mut best = base + y0 * w + x0;
                for y in y0..y1 {
                    for xx in x0..x1 {
                        let idx = base + y * w + xx;
                        if x[idx] > x[best] {
                            best = idx;
                        }
                    }
                }
                out.push(x[best]);
                arg.push(best);
            }
        }
    }
    (out, arg)
}

/// Windowed mean over the last two axes (in-range cells only).
pub fn avgpool2d_forward<T: Scalar>(
    x: &[T],
    planes: usize,
    h: usize,
    w: usize,
    win: (usize, usize),
    stride: (usize, usize),
) -> Vec<T> {
    let (ho, wo) = (h.div_ceil(stride.0), w.div_ceil(stride.1));
    let mut out = Vec::with_capacity(planes * ho * wo);
    for p in 0..planes {
        let base = p * h * w;
        for oy in 0..ho {
            let (y0, y1) = (oy * stride.0, (oy * stride.0 + win.0).min(h));
            for ox in 0..wo {
                let (x0, x1) = (ox * stride.1, (ox * stride.1 + win.1).min(w));
                let mut s = T::zero();
                for y in y0..y1 {
                    for xx in x0..x1 {
                        s += x[base + y * w + xx];
                    }
                }
                out.push(s / T::from_f64(((y1 - y0) * (x1 - x0)) as f64));
            }
        }
    }
    out
}

#[allow(clippy::too_many_arguments)]
pub fn avgpool2d_backward<T: Scalar>(
    dy: &[T],
    planes: usize,
    h: usize,
    w: usize,
    win: (usize, usize),
    stride: (usize, usize),
    dx: &mut [T],
) {
    let (ho, wo) = (h.div_ceil(stride.0), w.div_ceil(stride.1));
    for p in 0..planes {
        let base = p * h * w;
        for oy in 0..ho {
            let (y0, y1) = (oy * stride.0, (oy * stride.0 + win.0).min(h));
            for ox in 0..wo {
                let (x0, x1) = (ox * stride.1, (ox * stride.1 + win.1).min(w));
                let g = dy[(p * ho + oy) * wo + ox] / T::from_f64(((y1 - y0) * (x1 - x0)) as f64);
                for y in y0..y1 {
                    for xx in x0..x1 {
                        dx[base + y * w + xx] += g;
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_padding_extents() {
        assert_eq!(same_padding(224, 3, 1), (224, 1));
        assert_eq!(same_padding(7, 3, 2), (4, 1));
        assert_eq!(same_padding(8, 1, 1), (8, 0));
        assert_eq!(same_padding(12, 17, 1), (12, 8));
    }

    #[test]
    fn maxpool_window_example() {
        let x = [1.0f64, 2.0, 3.0, 4.0, 5.0, 6.0];
        let (out, arg) = maxpool1d_forward(&x, 1, 6, 3, 2);
        assert_eq!(out, vec![3.0, 5.0, 6.0]);
        assert_eq!(arg, vec![2, 4, 5]);
    }

    #[test]
    fn maxpool_ties_pick_first() {
        let x = [2.0f64, 2.0, 2.0];
        let (_, arg) = maxpool1d_forward(&x, 1, 3, 3, 1);
        assert_eq!(arg, vec![0, 1, 2]);
    }
}
