//! Slice-level loops behind the tape primitives. Layouts are row-major:
//! matrices `[rows, cols]`, feature maps `[channels, height, width]`,
//! kernels `[out, in, kh, kw]`.

use crate::Real;

#[inline]
fn axpy<T: Real>(alpha: T, x: &[T], y: &mut [T]) {
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

#[inline]
fn dot<T: Real>(x: &[T], y: &[T]) -> T {
    let mut acc = T::zero();
    for (&a, &b) in x.iter().zip(y) {
        acc += a * b;
    }
    acc
}

/// `out[m, n] = a[m, k] · b[k, n]`.
pub(crate) fn matmul<T: Real>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip != T::zero() {
                axpy(aip, &b[p * n..(p + 1) * n], row);
            }
        }
    }
    out
}

/// `ga[m, k] += g[m, n] · bᵀ`.
pub(crate) fn matmul_grad_lhs<T: Real>(g: &[T], b: &[T], ga: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let gi = &g[i * n..(i + 1) * n];
        for p in 0..k {
            ga[i * k + p] += dot(gi, &b[p * n..(p + 1) * n]);
        }
    }
}

/// `gb[k, n] += aᵀ · g[m, n]`.
pub(crate) fn matmul_grad_rhs<T: Real>(a: &[T], g: &[T], gb: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let gi = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip != T::zero() {
                axpy(aip, gi, &mut gb[p * n..(p + 1) * n]);
            }
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvDims {
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub kh: usize,
    pub kw: usize,
}

impl ConvDims {
    pub fn oh(&self) -> usize {
        self.h - self.kh + 1
    }

    pub fn ow(&self) -> usize {
        self.w - self.kw + 1
    }
}

/// Valid (unpadded) stride-1 cross-correlation plus per-channel bias.
pub(crate) fn conv2d_forward<T: Real>(x: &[T], k: &[T], bias: &[T], d: ConvDims) -> Vec<T> {
    let (oh, ow) = (d.oh(), d.ow());
    let mut out = vec![T::zero(); d.cout * oh * ow];
    for co in 0..d.cout {
        let plane = &mut out[co * oh * ow..(co + 1) * oh * ow];
        plane.iter_mut().for_each(|v| *v = bias[co]);
        for ci in 0..d.cin {
            let xin = &x[ci * d.h * d.w..(ci + 1) * d.h * d.w];
            for ky in 0..d.kh {
                for kx in 0..d.kw {
                    let kv = k[((co * d.cin + ci) * d.kh + ky) * d.kw + kx];
                    for oy in 0..oh {
                        let src = &xin[(oy + ky) * d.w + kx..(oy + ky) * d.w + kx + ow];
                        axpy(kv, src, &mut plane[oy * ow..(oy + 1) * ow]);
                    }
                }
            }
        }
    }
    out
}

pub(crate) fn conv2d_grad_kernel<T: Real>(x: &[T], g: &[T], gk: &mut [T], d: ConvDims) {
    let (oh, ow) = (d.oh(), d.ow());
    for co in 0..d.cout {
        let gplane = &g[co * oh * ow..(co + 1) * oh * ow];
        for ci in 0..d.cin {
            let xin = &x[ci * d.h * d.w..(ci + 1) * d.h * d.w];
            for ky in 0..d.kh {
                for kx in 0..d.kw {
                    let mut acc = T::zero();
                    for oy in 0..oh {
                        let src = &xin[(oy + ky) * d.w + kx..(oy + ky) * d.w + kx + ow];
                        acc += dot(src, &gplane[oy * ow..(oy + 1) * ow]);
                    }
                    gk[((co * d.cin + ci) * d.kh + ky) * d.kw + kx] += acc;
                }
            }
        }
    }
}

pub(crate) fn conv2d_grad_input<T: Real>(k: &[T], g: &[T], gx: &mut [T], d: ConvDims) {
    let (oh, ow) = (d.oh(), d.ow());
    for co in 0..d.cout {
        let gplane = &g[co * oh * ow..(co + 1) * oh * ow];
        for ci in 0..d.cin {
            let gin = &mut gx[ci * d.h * d.w..(ci + 1) * d.h * d.w];
            for ky in 0..d.kh {
                for kx in 0..d.kw {
                    let kv = k[((co * d.cin + ci) * d.kh + ky) * d.kw + kx];
                    for oy in 0..oh {
                        let dst = &mut gin[(oy + ky) * d.w + kx..(oy + ky) * d.w + kx + ow];
                        axpy(kv, &gplane[oy * ow..(oy + 1) * ow], dst);
                    }
                }
            }
        }
    }
}

pub(crate) fn conv2d_grad_bias<T: Real>(g: &[T], gb: &mut [T], cout: usize, plane: usize) {
    for co in 0..cout {
        gb[co] += g[co * plane..(co + 1) * plane].iter().copied().sum::<T>();
    }
}

/// Non-overlapping max pooling with window `(pr, pc)`; partial windows at
/// the bottom/right edges are dropped. Returns the pooled map and, for each
/// output cell, the flat input index of its maximum (first in row-major
/// order on ties).
pub(crate) fn max_pool_forward<T: Real>(
    x: &[T],
    c: usize,
    h: usize,
    w: usize,
    pr: usize,
    pc: usize,
) -> (Vec<T>, Vec<u32>) {
    let (oh, ow) = (h / pr, w / pc);
    let mut out = Vec::with_capacity(c * oh * ow);
    let mut arg = Vec::with_capacity(c * oh * ow);
    for ch in 0..c {
        let base = ch * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best_idx = base + oy * pr * w + ox * pc;
                let mut best = x[best_idx];
                for dy in 0..pr {
                    for dx in 0..pc {
                        let idx = base + (oy * pr + dy) * w + ox * pc + dx;
                        if x[idx] > best {
                            best = x[idx];
                            best_idx = idx;
                        }
                    }
                }
                out.push(best);
                arg.push(best_idx as u32);
            }
        }
    }
    (out, arg)
}
