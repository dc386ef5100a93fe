//! Raw numeric kernels on row-major slices. Shapes are validated by the
//! graph layer before anything here runs.

use std::cell::Cell;

use crate::tensor::Float;

thread_local! {
    static CONV_MACS: Cell<u64> = const { Cell::new(0) };
}

/// Multiply-accumulates executed by forward convolutions on this thread.
pub mod mac_counter {
    use super::CONV_MACS;

    pub fn reset() {
        CONV_MACS.with(|c| c.set(0));
    }

    pub fn read() -> u64 {
        CONV_MACS.with(|c| c.get())
    }

    pub(crate) fn add(n: u64) {
        CONV_MACS.with(|c| c.set(c.get() + n));
    }
}

/// `c[m×n] += a[m×k] · b[k×n]`
pub fn gemm<T: Float>(m: usize, k: usize, n: usize, a: &[T], b: &[T], c: &mut [T]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    for i in 0..m {
        let row = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let s = a[i * k + p];
            let brow = &b[p * n..(p + 1) * n];
            for (cv, &bv) in row.iter_mut().zip(brow) {
                *cv += s * bv;
            }
        }
    }
}

/// `c[m×n] += aᵀ · b` where `a` is stored `k×m`.
pub fn gemm_tn<T: Float>(m: usize, k: usize, n: usize, a: &[T], b: &[T], c: &mut [T]) {
    debug_assert_eq!(a.len(), k * m);
    debug_assert_eq!(b.len(), k * n);
    for p in 0..k {
        let brow = &b[p * n..(p + 1) * n];
        for i in 0..m {
            let s = a[p * m + i];
            if s == T::zero() {
                continue;
            }
            let row = &mut c[i * n..(i + 1) * n];
            for (cv, &bv) in row.iter_mut().zip(brow) {
                *cv += s * bv;
            }
        }
    }
}

/// `c[m×n] += a · bᵀ` where `b` is stored `n×k`.
pub fn gemm_nt<T: Float>(m: usize, k: usize, n: usize, a: &[T], b: &[T], c: &mut [T]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            let mut acc = T::zero();
            for (&x, &y) in arow.iter().zip(brow) {
                acc += x * y;
            }
            c[i * n + j] += acc;
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub batch: usize,
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub k: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvGeom {
    pub fn out_hw(&self) -> (usize, usize) {
        (
            (self.h + 2 * self.padding - self.k) / self.stride + 1,
            (self.w + 2 * self.padding - self.k) / self.stride + 1,
        )
    }

    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.padding == 0
    }
}

/// Unfolds one image `[c, h, w]` into `[c·k·k, oh·ow]` with zero padding.
fn im2col<T: Float>(g: &ConvGeom, img: &[T], cols: &mut [T]) {
    let (oh, ow) = g.out_hw();
    let (k, s, p) = (g.k, g.stride, g.padding as isize);
    for c in 0..g.c_in {
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let out = &mut cols[row * oh * ow..(row + 1) * oh * ow];
                for oy in 0..oh {
                    let iy = (oy * s + ky) as isize - p;
                    let dst = &mut out[oy * ow..(oy + 1) * ow];
                    if iy < 0 || iy >= g.h as isize {
                        dst.iter_mut().for_each(|v| *v = T::zero());
                        continue;
                    }
                    let src = &img[(c * g.h + iy as usize) * g.w..(c * g.h + iy as usize + 1) * g.w];
                    for (ox, d) in dst.iter_mut().enumerate() {
                        let ix = (ox * s + kx) as isize - p;
                        *d = if ix < 0 || ix >= g.w as isize {
                            T::zero()
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Inverse scatter of [`im2col`], accumulating into `img`.
fn col2im_add<T: Float>(g: &ConvGeom, cols: &[T], img: &mut [T]) {
    let (oh, ow) = g.out_hw();
    let (k, s, p) = (g.k, g.stride, g.padding as isize);
    for c in 0..g.c_in {
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let src = &cols[row * oh * ow..(row + 1) * oh * ow];
                for oy in 0..oh {
                    let iy = (oy * s + ky) as isize - p;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let base = (c * g.h + iy as usize) * g.w;
                    for ox in 0..ow {
                        let ix = (ox * s + kx) as isize - p;
                        if ix >= 0 && ix < g.w as isize {
                            img[base + ix as usize] += src[oy * ow + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Forward convolution without bias. Every output element costs
/// `c_in·k·k` multiply-accumulates, padded taps included.
pub fn conv2d_forward<T: Float>(g: &ConvGeom, input: &[T], weight: &[T]) -> Vec<T> {
    let (oh, ow) = g.out_hw();
    let ckk = g.c_in * g.k * g.k;
    let in_sz = g.c_in * g.h * g.w;
    let out_sz = g.c_out * oh * ow;
    let mut out = vec![T::zero(); g.batch * out_sz];
    let mut cols = if g.is_pointwise() {
        Vec::new()
    } else {
        vec![T::zero(); ckk * oh * ow]
    };
    for b in 0..g.batch {
        let img = &input[b * in_sz..(b + 1) * in_sz];
        let dst = &mut out[b * out_sz..(b + 1) * out_sz];
        if g.is_pointwise() {
            gemm(g.c_out, ckk, oh * ow, weight, img, dst);
        } else {
            im2col(g, img, &mut cols);
            gemm(g.c_out, ckk, oh * ow, weight, &cols, dst);
        }
    }
    mac_counter::add((g.batch * g.c_out * ckk * oh * ow) as u64);
    out
}

/// Returns `(grad_input, grad_weight)`; either may be skipped.
pub fn conv2d_backward<T: Float>(
    g: &ConvGeom,
    input: &[T],
    weight: &[T],
    grad_out: &[T],
    need_input: bool,
    need_weight: bool,
) -> (Option<Vec<T>>, Option<Vec<T>>) {
    let (oh, ow) = g.out_hw();
    let ckk = g.c_in * g.k * g.k;
    let in_sz = g.c_in * g.h * g.w;
    let out_sz = g.c_out * oh * ow;
    let mut gin = need_input.then(|| vec![T::zero(); g.batch * in_sz]);
    let mut gw = need_weight.then(|| vec![T::zero(); g.c_out * ckk]);
    let mut cols = vec![T::zero(); ckk * oh * ow];
    for b in 0..g.batch {
        let gout = &grad_out[b * out_sz..(b + 1) * out_sz];
        let img = &input[b * in_sz..(b + 1) * in_sz];
        if let Some(gw) = gw.as_mut() {
            if g.is_pointwise() {
                gemm_nt(g.c_out, oh * ow, ckk, gout, img, gw);
            } else {
                im2col(g, img, &mut cols);
                gemm_nt(g.c_out, oh * ow, ckk, gout, &cols, gw);
            }
        }
        if let Some(gin) = gin.as_mut() {
            let dst = &mut gin[b * in_sz..(b + 1) * in_sz];
            if g.is_pointwise() {
                gemm_tn(ckk, g.c_out, oh * ow, weight, gout, dst);
            } else {
                cols.iter_mut().for_each(|v| *v = T::zero());
                gemm_tn(ckk, g.c_out, oh * ow, weight, gout, &mut cols);
                col2im_add(g, &cols, dst);
            }
        }
    }
    (gin, gw)
}

/// Max pooling over `[b·c]` planes; returns values and the flat input index
/// of each selected element. Out-of-bounds taps never win.
pub fn maxpool_forward<T: Float>(
    planes: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    padding: usize,
    input: &[T],
) -> (Vec<T>, Vec<usize>, usize, usize) {
    let oh = (h + 2 * padding - k) / stride + 1;
    let ow = (w + 2 * padding - k) / stride + 1;
    let mut out = Vec::with_capacity(planes * oh * ow);
    let mut arg = Vec::with_capacity(planes * oh * ow);
    let p = padding as isize;
    for pl in 0..planes {
        let base = pl * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = T::neg_infinity();
                let mut best_i = usize::MAX;
                for ky in 0..k {
                    let iy = (oy * stride + ky) as isize - p;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for kx in 0..k {
                        let ix = (ox * stride + kx) as isize - p;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        let idx = base + iy as usize * w + ix as usize;
                        if best_i == usize::MAX || input[idx] > best {
                            best = input[idx];
                            best_i = idx;
                        }
                    }
                }
                out.push(best);
                arg.push(best_i);
            }
        }
    }
    (out, arg, oh, ow)
}
