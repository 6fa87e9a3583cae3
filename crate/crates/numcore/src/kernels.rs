//! Dense loops shared by forward and backward passes.

use crate::real::Real;

/// Geometry of a 2-D sliding-window op over one sample.
#[derive(Clone, Copy, Debug)]
pub(crate) struct Window {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub oh: usize,
    pub ow: usize,
}

impl Window {
    pub fn new(c: usize, h: usize, w: usize, kh: usize, kw: usize, stride: usize, pad: usize) -> Option<Self> {
        let (hp, wp) = (h + 2 * pad, w + 2 * pad);
        if kh > hp || kw > wp || stride == 0 {
            return None;
        }
        Some(Self {
            c,
            h,
            w,
            kh,
            kw,
            stride,
            pad,
            oh: (hp - kh) / stride + 1,
            ow: (wp - kw) / stride + 1,
        })
    }

    pub fn rows(&self) -> usize {
        self.c * self.kh * self.kw
    }

    pub fn cols(&self) -> usize {
        self.oh * self.ow
    }
}

/// Unfolds one `c×h×w` sample into a `(c·kh·kw) × (oh·ow)` matrix.
pub(crate) fn im2col<T: Real>(x: &[T], g: &Window, cols: &mut [T]) {
    let p = g.cols();
    for c in 0..g.c {
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let dst = &mut cols[row * p..(row + 1) * p];
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    let line = &mut dst[oy * g.ow..(oy + 1) * g.ow];
                    if iy < 0 || iy >= g.h as isize {
                        line.iter_mut().for_each(|v| *v = T::zero());
                        continue;
                    }
                    let src = &x[(c * g.h + iy as usize) * g.w..(c * g.h + iy as usize + 1) * g.w];
                    for (ox, v) in line.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        *v = if ix < 0 || ix >= g.w as isize {
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

/// Adjoint of [`im2col`]: accumulates columns back into the sample.
pub(crate) fn col2im<T: Real>(cols: &[T], g: &Window, dx: &mut [T]) {
    let p = g.cols();
    for c in 0..g.c {
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let src = &cols[row * p..(row + 1) * p];
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let base = (c * g.h + iy as usize) * g.w;
                    for ox in 0..g.ow {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        if ix >= 0 && (ix as usize) < g.w {
                            dx[base + ix as usize] += src[oy * g.ow + ox];
                        }
                    }
                }
            }
        }
    }
}

/// `out[u,v] = Σ_{c,i,j} z[c,i,j] · x[c,u+i,v+j]` for one sample.
pub(crate) fn xcorr<T: Real>(z: &[T], x: &[T], g: &Window, out: &mut [T]) {
    out.iter_mut().for_each(|v| *v = T::zero());
    for c in 0..g.c {
        for i in 0..g.kh {
            for j in 0..g.kw {
                let zv = z[(c * g.kh + i) * g.kw + j];
                for u in 0..g.oh {
                    let xrow = &x[(c * g.h + u + i) * g.w + j..];
                    let orow = &mut out[u * g.ow..(u + 1) * g.ow];
                    for (o, &xv) in orow.iter_mut().zip(xrow) {
                        *o += zv * xv;
                    }
                }
            }
        }
    }
}

/// Gradients of [`xcorr`] with respect to both operands.
pub(crate) fn xcorr_backward<T: Real>(
    z: &[T],
    x: &[T],
    g: &Window,
    dout: &[T],
    mut dz: Option<&mut [T]>,
    mut dx: Option<&mut [T]>,
) {
    for c in 0..g.c {
        for i in 0..g.kh {
            for j in 0..g.kw {
                let zi = (c * g.kh + i) * g.kw + j;
                let zv = z[zi];
                let mut acc = T::zero();
                for u in 0..g.oh {
                    let off = (c * g.h + u + i) * g.w + j;
                    let drow = &dout[u * g.ow..(u + 1) * g.ow];
                    if dz.is_some() {
                        for (d, &xv) in drow.iter().zip(&x[off..off + g.ow]) {
                            acc += *d * xv;
                        }
                    }
                    if let Some(dx) = dx.as_deref_mut() {
                        for (t, d) in dx[off..off + g.ow].iter_mut().zip(drow) {
                            *t += zv * *d;
                        }
                    }
                }
                if let Some(dz) = dz.as_deref_mut() {
                    dz[zi] += acc;
                }
            }
        }
    }
}

/// Align-corners source coordinate taps for one axis: `(i0, i1, frac)` per
/// output index.
pub(crate) fn bilinear_taps(src: usize, dst: usize) -> Vec<(usize, usize, f64)> {
    (0..dst)
        .map(|o| {
            let s = if dst > 1 {
                o as f64 * (src - 1) as f64 / (dst - 1) as f64
            } else {
                0.0
            };
            let i0 = (s.floor() as usize).min(src - 1);
            let i1 = (i0 + 1).min(src - 1);
            (i0, i1, s - i0 as f64)
        })
        .collect()
}

pub(crate) fn resize_plane<T: Real>(
    src: &[T],
    h: usize,
    w: usize,
    ty: &[(usize, usize, f64)],
    tx: &[(usize, usize, f64)],
    dst: &mut [T],
) {
    let ow = tx.len();
    for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
        let fy = T::of(fy);
        for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
            let fx = T::of(fx);
            let top = src[y0 * w + x0] * (T::one() - fx) + src[y0 * w + x1] * fx;
            let bot = src[y1 * w + x0] * (T::one() - fx) + src[y1 * w + x1] * fx;
            dst[oy * ow + ox] = top * (T::one() - fy) + bot * fy;
        }
    }
    debug_assert_eq!(src.len(), h * w);
}

pub(crate) fn resize_plane_backward<T: Real>(
    dout: &[T],
    w: usize,
    ty: &[(usize, usize, f64)],
    tx: &[(usize, usize, f64)],
    dsrc: &mut [T],
) {
    let ow = tx.len();
    for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
        let fy = T::of(fy);
        for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
            let fx = T::of(fx);
            let d = dout[oy * ow + ox];
            let dt = d * (T::one() - fy);
            let db = d * fy;
            dsrc[y0 * w + x0] += dt * (T::one() - fx);
            dsrc[y0 * w + x1] += dt * fx;
            dsrc[y1 * w + x0] += db * (T::one() - fx);
            dsrc[y1 * w + x1] += db * fx;
        }
    }
}

pub(crate) fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// Permutes axes: output axis `k` is input axis `perm[k]`. With
/// `accumulate`, `src` is in output layout and is added back into `dst` in
/// input layout (the adjoint).
pub(crate) fn permute<T: Real>(src: &[T], in_shape: &[usize], perm: &[usize], dst: &mut [T], accumulate: bool) {
    let in_strides = strides(in_shape);
    let out_shape: Vec<usize> = perm.iter().map(|&p| in_shape[p]).collect();
    let moved: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let n = src.len();
    let mut idx = vec![0usize; out_shape.len()];
    let mut off = 0usize;
    for o in 0..n {
        if accumulate {
            dst[off] += src[o];
        } else {
            dst[o] = src[off];
        }
        for k in (0..idx.len()).rev() {
            idx[k] += 1;
            off += moved[k];
            if idx[k] < out_shape[k] {
                break;
            }
            off -= moved[k] * idx[k];
            idx[k] = 0;
        }
    }
}
