//! Raw numeric kernels behind the graph ops. Everything here works on flat
//! row-major slices; shape checking happens in the graph layer.

use super::Scalar;

/// `c = a * b` (or `c += a * b` when `accumulate`), with `a` logically
/// `m x k` and `b` logically `k x n`. A transposed operand is stored in the
/// opposite orientation (`k x m` for `a`, `n x k` for `b`).
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm<T: Scalar>(
    m: usize,
    k: usize,
    n: usize,
    a: &[T],
    a_transposed: bool,
    b: &[T],
    b_transposed: bool,
    c: &mut [T],
    accumulate: bool,
) {
    assert_eq!(a.len(), m * k);
    assert_eq!(b.len(), k * n);
    assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if !accumulate {
            c.fill(T::zero());
        }
        return;
    }
    let (rsa, csa) = if a_transposed { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_transposed { (1, k as isize) } else { (n as isize, 1) };
    let beta = if accumulate { T::one() } else { T::zero() };
    // SAFETY: lengths asserted above; a, b and c are distinct borrows.
    unsafe {
        T::gemm_raw(
            m,
            k,
            n,
            T::one(),
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Geometry of a 2-D cross-correlation with "same"-style zero padding of
/// `dilation * (k - 1) / 2` per side.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub dilation: usize,
    pub pad_h: usize,
    pub pad_w: usize,
    pub h_out: usize,
    pub w_out: usize,
}

impl ConvGeom {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        c_in: usize,
        h: usize,
        w: usize,
        c_out: usize,
        kh: usize,
        kw: usize,
        stride: usize,
        dilation: usize,
    ) -> Self {
        let pad_h = dilation * (kh - 1) / 2;
        let pad_w = dilation * (kw - 1) / 2;
        let h_out = (h + 2 * pad_h - dilation * (kh - 1) - 1) / stride + 1;
        let w_out = (w + 2 * pad_w - dilation * (kw - 1) - 1) / stride + 1;
        Self {
            c_in,
            h,
            w,
            c_out,
            kh,
            kw,
            stride,
            dilation,
            pad_h,
            pad_w,
            h_out,
            w_out,
        }
    }

    pub fn patch_len(&self) -> usize {
        self.c_in * self.kh * self.kw
    }

    pub fn out_plane(&self) -> usize {
        self.h_out * self.w_out
    }

    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1
    }

    /// Input row/column sampled by output position `o` and tap `t`, if it
    /// falls inside the unpadded input.
    #[inline]
    fn src(o: usize, t: usize, stride: usize, dilation: usize, pad: usize, len: usize) -> Option<usize> {
        let pos = (o * stride + t * dilation) as isize - pad as isize;
        (pos >= 0 && (pos as usize) < len).then_some(pos as usize)
    }
}

/// Unfolds one sample `[c_in, h, w]` into `[c_in*kh*kw, h_out*w_out]`.
pub(crate) fn im2col<T: Scalar>(x: &[T], g: &ConvGeom, cols: &mut [T]) {
    let plane = g.out_plane();
    for c in 0..g.c_in {
        for i in 0..g.kh {
            for j in 0..g.kw {
                let row = (c * g.kh + i) * g.kw + j;
                let dst = &mut cols[row * plane..(row + 1) * plane];
                for oy in 0..g.h_out {
                    let sy = ConvGeom::src(oy, i, g.stride, g.dilation, g.pad_h, g.h);
                    for ox in 0..g.w_out {
                        let v = match (sy, ConvGeom::src(ox, j, g.stride, g.dilation, g.pad_w, g.w)) {
                            (Some(y), Some(xx)) => x[(c * g.h + y) * g.w + xx],
                            _ => T::zero(),
                        };
                        dst[oy * g.w_out + ox] = v;
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters columns back onto the input, accumulating.
pub(crate) fn col2im<T: Scalar>(cols: &[T], g: &ConvGeom, dx: &mut [T]) {
    let plane = g.out_plane();
    for c in 0..g.c_in {
        for i in 0..g.kh {
            for j in 0..g.kw {
                let row = (c * g.kh + i) * g.kw + j;
                let src = &cols[row * plane..(row + 1) * plane];
                for oy in 0..g.h_out {
                    let Some(y) = ConvGeom::src(oy, i, g.stride, g.dilation, g.pad_h, g.h) else {
                        continue;
                    };
                    for ox in 0..g.w_out {
                        if let Some(xx) = ConvGeom::src(ox, j, g.stride, g.dilation, g.pad_w, g.w) {
                            dx[(c * g.h + y) * g.w + xx] = dx[(c * g.h + y) * g.w + xx] + src[oy * g.w_out + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Batched convolution forward: `x [b, c_in, h, w]`, `w [c_out, c_in, kh, kw]`.
pub(crate) fn conv_forward<T: Scalar>(x: &[T], weight: &[T], bias: &[T], batch: usize, g: &ConvGeom) -> Vec<T> {
    let in_len = g.c_in * g.h * g.w;
    let plane = g.out_plane();
    let out_len = g.c_out * plane;
    let mut out = vec![T::zero(); batch * out_len];
    let mut cols = if g.is_pointwise() {
        Vec::new()
    } else {
        vec![T::zero(); g.patch_len() * plane]
    };
    for b in 0..batch {
        let xs = &x[b * in_len..(b + 1) * in_len];
        let ys = &mut out[b * out_len..(b + 1) * out_len];
        for (co, row) in ys.chunks_mut(plane).enumerate() {
            row.fill(bias[co]);
        }
        let src: &[T] = if g.is_pointwise() {
            xs
        } else {
            im2col(xs, g, &mut cols);
            &cols
        };
        gemm(g.c_out, g.patch_len(), plane, weight, false, src, false, ys, true);
    }
    out
}

/// Accumulates convolution gradients. `dx` is skipped when `None`.
pub(crate) fn conv_backward<T: Scalar>(
    x: &[T],
    weight: &[T],
    dy: &[T],
    batch: usize,
    g: &ConvGeom,
    dx: Option<&mut [T]>,
    dw: &mut [T],
    db: &mut [T],
) {
    let in_len = g.c_in * g.h * g.w;
    let plane = g.out_plane();
    let out_len = g.c_out * plane;
    let k = g.patch_len();
    let mut cols = if g.is_pointwise() { Vec::new() } else { vec![T::zero(); k * plane] };
    let mut dcols = vec![T::zero(); k * plane];
    let mut dx = dx;
    for b in 0..batch {
        let xs = &x[b * in_len..(b + 1) * in_len];
        let dys = &dy[b * out_len..(b + 1) * out_len];
        for (co, row) in dys.chunks(plane).enumerate() {
            db[co] = db[co] + row.iter().copied().sum();
        }
        let src: &[T] = if g.is_pointwise() {
            xs
        } else {
            im2col(xs, g, &mut cols);
            &cols
        };
        // dW[c_out, k] += dY[c_out, plane] * cols^T[plane, k]
        gemm(g.c_out, plane, k, dys, false, src, true, dw, true);
        if let Some(dx) = dx.as_deref_mut() {
            let dxs = &mut dx[b * in_len..(b + 1) * in_len];
            if g.is_pointwise() {
                gemm(k, g.c_out, plane, weight, true, dys, false, dxs, true);
            } else {
                gemm(k, g.c_out, plane, weight, true, dys, false, &mut dcols, false);
                col2im(&dcols, g, dxs);
            }
        }
    }
}

/// Numerically stable logistic function.
#[inline]
pub(crate) fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// Row-wise softmax over the last axis of a `[rows, width]` buffer.
pub(crate) fn softmax_rows<T: Scalar>(x: &[T], width: usize) -> Vec<T> {
    let mut out = vec![T::zero(); x.len()];
    for (src, dst) in x.chunks(width).zip(out.chunks_mut(width)) {
        let max = src.iter().copied().fold(T::neg_infinity(), T::max);
        let mut total = T::zero();
        for (d, &s) in dst.iter_mut().zip(src) {
            *d = (s - max).exp();
            total = total + *d;
        }
        dst.iter_mut().for_each(|d| *d = *d / total);
    }
    out
}
