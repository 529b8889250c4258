//! Dense inner loops shared by the autodiff ops.

use crate::scalar::Scalar;

#[inline]
pub fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [T::zero(); 8];
    let ca = a.chunks_exact(8);
    let cb = b.chunks_exact(8);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for k in 0..8 {
            acc[k] = acc[k] + x[k] * y[k];
        }
    }
    let mut tail = T::zero();
    for (&x, &y) in ra.iter().zip(rb) {
        tail = tail + x * y;
    }
    ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7])) + tail
}

#[inline]
pub fn axpy<T: Scalar>(y: &mut [T], alpha: T, x: &[T]) {
    debug_assert_eq!(x.len(), y.len());
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi = *yi + alpha * xi;
    }
}

#[inline]
pub fn sum<T: Scalar>(a: &[T]) -> T {
    let mut acc = [T::zero(); 8];
    let chunks = a.chunks_exact(8);
    let rest = chunks.remainder();
    for c in chunks {
        for k in 0..8 {
            acc[k] = acc[k] + c[k];
        }
    }
    let mut tail = T::zero();
    for &x in rest {
        tail = tail + x;
    }
    ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7])) + tail
}

/// Unfolds one `[c, h, w]` image into `[c * k * k, h * w]` patches for a
/// stride-1 convolution with "same" zero padding.
pub fn im2col<T: Scalar>(x: &[T], c: usize, h: usize, w: usize, k: usize, col: &mut [T]) {
    let pad = k / 2;
    let hw = h * w;
    for ci in 0..c {
        let plane = &x[ci * hw..(ci + 1) * hw];
        for ky in 0..k {
            for kx in 0..k {
                let row = &mut col[((ci * k + ky) * k + kx) * hw..][..hw];
                let dx = kx as isize - pad as isize;
                let dy = ky as isize - pad as isize;
                let x0 = (-dx).max(0) as usize;
                let x1 = (w as isize - dx).min(w as isize).max(0) as usize;
                for y in 0..h {
                    let sy = y as isize + dy;
                    let out = &mut row[y * w..(y + 1) * w];
                    if sy < 0 || sy >= h as isize || x0 >= x1 {
                        out.fill(T::zero());
                        continue;
                    }
                    let src = &plane[sy as usize * w..(sy as usize + 1) * w];
                    out[..x0].fill(T::zero());
                    out[x1..].fill(T::zero());
                    let s0 = (x0 as isize + dx) as usize;
                    out[x0..x1].copy_from_slice(&src[s0..s0 + (x1 - x0)]);
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters patch gradients back and accumulates into `gx`.
pub fn col2im<T: Scalar>(col: &[T], c: usize, h: usize, w: usize, k: usize, gx: &mut [T]) {
    let pad = k / 2;
    let hw = h * w;
    for ci in 0..c {
        let plane = &mut gx[ci * hw..(ci + 1) * hw];
        for ky in 0..k {
            for kx in 0..k {
                let row = &col[((ci * k + ky) * k + kx) * hw..][..hw];
                let dx = kx as isize - pad as isize;
                let dy = ky as isize - pad as isize;
                let x0 = (-dx).max(0) as usize;
                let x1 = (w as isize - dx).min(w as isize).max(0) as usize;
                if x0 >= x1 {
                    continue;
                }
                for y in 0..h {
                    let sy = y as isize + dy;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let dst = &mut plane[sy as usize * w..(sy as usize + 1) * w];
                    let s0 = (x0 as isize + dx) as usize;
                    for (d, &g) in dst[s0..s0 + (x1 - x0)]
                        .iter_mut()
                        .zip(&row[y * w + x0..y * w + x1])
                    {
                        *d = *d + g;
                    }
                }
            }
        }
    }
}

/// Shapes of a same-padded, stride-1 2-D convolution.
#[derive(Clone, Copy, Debug)]
pub struct ConvDims {
    pub batch: usize,
    pub c_in: usize,
    pub c_out: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
}

impl ConvDims {
    fn patch(&self) -> usize {
        self.c_in * self.k * self.k
    }
}

pub fn conv2d_forward<T: Scalar>(
    d: ConvDims,
    x: &[T],
    weight: &[T],
    bias: Option<&[T]>,
    out: &mut [T],
) {
    let hw = d.h * d.w;
    let kk = d.patch();
    let mut col = alloc::vec![T::zero(); if d.k == 1 { 0 } else { kk * hw }];
    for n in 0..d.batch {
        let xn = &x[n * d.c_in * hw..(n + 1) * d.c_in * hw];
        let cols: &[T] = if d.k == 1 {
            xn
        } else {
            im2col(xn, d.c_in, d.h, d.w, d.k, &mut col);
            &col
        };
        let on = &mut out[n * d.c_out * hw..(n + 1) * d.c_out * hw];
        for co in 0..d.c_out {
            let orow = &mut on[co * hw..(co + 1) * hw];
            orow.fill(bias.map_or(T::zero(), |b| b[co]));
            let wrow = &weight[co * kk..(co + 1) * kk];
            for (p, &wv) in wrow.iter().enumerate() {
                axpy(orow, wv, &cols[p * hw..(p + 1) * hw]);
            }
        }
    }
}

/// Accumulates gradients of a convolution into whichever of `gx`, `gw`, `gb` are given.
pub fn conv2d_backward<T: Scalar>(
    d: ConvDims,
    x: &[T],
    weight: &[T],
    gout: &[T],
    mut gx: Option<&mut [T]>,
    mut gw: Option<&mut [T]>,
    mut gb: Option<&mut [T]>,
) {
    let hw = d.h * d.w;
    let kk = d.patch();
    let need_col = d.k != 1;
    let mut col = alloc::vec![T::zero(); if need_col && gw.is_some() { kk * hw } else { 0 }];
    let mut gcol = alloc::vec![T::zero(); if gx.is_some() { kk * hw } else { 0 }];
    for n in 0..d.batch {
        let xn = &x[n * d.c_in * hw..(n + 1) * d.c_in * hw];
        let gn = &gout[n * d.c_out * hw..(n + 1) * d.c_out * hw];
        if let Some(gb) = gb.as_deref_mut() {
            for co in 0..d.c_out {
                gb[co] = gb[co] + sum(&gn[co * hw..(co + 1) * hw]);
            }
        }
        if let Some(gw) = gw.as_deref_mut() {
            let cols: &[T] = if need_col {
                im2col(xn, d.c_in, d.h, d.w, d.k, &mut col);
                &col
            } else {
                xn
            };
            for co in 0..d.c_out {
                let grow = &gn[co * hw..(co + 1) * hw];
                let gwrow = &mut gw[co * kk..(co + 1) * kk];
                for (p, g) in gwrow.iter_mut().enumerate() {
                    *g = *g + dot(grow, &cols[p * hw..(p + 1) * hw]);
                }
            }
        }
        if let Some(gx) = gx.as_deref_mut() {
            gcol.fill(T::zero());
            for co in 0..d.c_out {
                let grow = &gn[co * hw..(co + 1) * hw];
                let wrow = &weight[co * kk..(co + 1) * kk];
                for (p, &wv) in wrow.iter().enumerate() {
                    axpy(&mut gcol[p * hw..(p + 1) * hw], wv, grow);
                }
            }
            let gxn = &mut gx[n * d.c_in * hw..(n + 1) * d.c_in * hw];
            if need_col {
                col2im(&gcol, d.c_in, d.h, d.w, d.k, gxn);
            } else {
                for (a, &b) in gxn.iter_mut().zip(&gcol) {
                    *a = *a + b;
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;
    use alloc::vec::Vec;

    fn naive_conv(d: ConvDims, x: &[f64], w: &[f64]) -> Vec<f64> {
        let pad = (d.k / 2) as isize;
        let mut out = vec![0.0; d.batch * d.c_out * d.h * d.w];
        for n in 0..d.batch {
            for co in 0..d.c_out {
                for y in 0..d.h {
                    for xx in 0..d.w {
                        let mut acc = 0.0;
                        for ci in 0..d.c_in {
                            for ky in 0..d.k {
                                for kx in 0..d.k {
                                    let sy = y as isize + ky as isize - pad;
                                    let sx = xx as isize + kx as isize - pad;
                                    if sy < 0 || sx < 0 || sy >= d.h as isize || sx >= d.w as isize {
                                        continue;
                                    }
                                    acc += w[((co * d.c_in + ci) * d.k + ky) * d.k + kx]
                                        * x[((n * d.c_in + ci) * d.h + sy as usize) * d.w + sx as usize];
                                }
                            }
                        }
                        out[((n * d.c_out + co) * d.h + y) * d.w + xx] = acc;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn conv_matches_direct_sum() {
        for k in [1, 3] {
            let d = ConvDims { batch: 2, c_in: 3, c_out: 4, h: 5, w: 6, k };
            let x: Vec<f64> = (0..2 * 3 * 30).map(|i| ((i * 37) % 11) as f64 - 5.0).collect();
            let w: Vec<f64> = (0..4 * 3 * k * k).map(|i| ((i * 13) % 7) as f64 * 0.1 - 0.3).collect();
            let mut out = vec![0.0; 2 * 4 * 30];
            conv2d_forward(d, &x, &w, None, &mut out);
            let expect = naive_conv(d, &x, &w);
            for (a, b) in out.iter().zip(&expect) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        let (c, h, w, k) = (2, 4, 3, 3);
        let x: Vec<f64> = (0..c * h * w).map(|i| (i as f64).sin()).collect();
        let g: Vec<f64> = (0..c * k * k * h * w).map(|i| (i as f64 * 0.7).cos()).collect();
        let mut col = vec![0.0; g.len()];
        im2col(&x, c, h, w, k, &mut col);
        let lhs: f64 = col.iter().zip(&g).map(|(a, b)| a * b).sum();
        let mut gx = vec![0.0; x.len()];
        col2im(&g, c, h, w, k, &mut gx);
        let rhs: f64 = gx.iter().zip(&x).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-10);
    }
}
