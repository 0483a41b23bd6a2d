//! Convolution kernels on raw NCHW buffers.
//!
//! Every kernel parallelises over the batch axis only, and per-sample weight
//! gradients are reduced in sample order, so results do not depend on the
//! number of worker threads.

use rayon::prelude::*;

/// Geometry of a square-kernel, same-padded convolution.
#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub batch: usize,
    pub in_ch: usize,
    pub out_ch: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
    pub stride: usize,
}

impl ConvGeom {
    pub fn pad(&self) -> usize {
        self.kernel / 2
    }
    pub fn out_h(&self) -> usize {
        self.height / self.stride
    }
    pub fn out_w(&self) -> usize {
        self.width / self.stride
    }
    fn col_rows(&self) -> usize {
        self.in_ch * self.kernel * self.kernel
    }
    fn out_pixels(&self) -> usize {
        self.out_h() * self.out_w()
    }
}

/// `c[m×n] = beta·c + a[m×k]·b[k×n]`, with optional transposes of the
/// row-major operands.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_t: bool,
    b: &[f64],
    b_t: bool,
    beta: f64,
    c: &mut [f64],
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the slices hold exactly the m×k, k×n and m×n elements addressed
    // by these strides, as asserted above.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
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

fn im2col(g: &ConvGeom, x: &[f64], cols: &mut [f64]) {
    let (k, s, p) = (g.kernel, g.stride, g.pad() as isize);
    let (oh, ow) = (g.out_h(), g.out_w());
    let npix = oh * ow;
    for c in 0..g.in_ch {
        let plane = &x[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let dst = &mut cols[row * npix..(row + 1) * npix];
                for oy in 0..oh {
                    let iy = (oy * s + ky) as isize - p;
                    let line = &mut dst[oy * ow..(oy + 1) * ow];
                    if iy < 0 || iy >= g.height as isize {
                        line.fill(0.0);
                        continue;
                    }
                    let src = &plane[iy as usize * g.width..(iy as usize + 1) * g.width];
                    for (ox, v) in line.iter_mut().enumerate() {
                        let ix = (ox * s + kx) as isize - p;
                        *v = if ix < 0 || ix >= g.width as isize {
                            0.0
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

fn col2im(g: &ConvGeom, cols: &[f64], dx: &mut [f64]) {
    let (k, s, p) = (g.kernel, g.stride, g.pad() as isize);
    let (oh, ow) = (g.out_h(), g.out_w());
    let npix = oh * ow;
    for c in 0..g.in_ch {
        let plane = &mut dx[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let src = &cols[row * npix..(row + 1) * npix];
                for oy in 0..oh {
                    let iy = (oy * s + ky) as isize - p;
                    if iy < 0 || iy >= g.height as isize {
                        continue;
                    }
                    let base = iy as usize * g.width;
                    for ox in 0..ow {
                        let ix = (ox * s + kx) as isize - p;
                        if ix >= 0 && ix < g.width as isize {
                            plane[base + ix as usize] += src[oy * ow + ox];
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn conv2d_forward(g: &ConvGeom, x: &[f64], w: &[f64], b: &[f64]) -> Vec<f64> {
    let in_sz = g.in_ch * g.height * g.width;
    let npix = g.out_pixels();
    let out_sz = g.out_ch * npix;
    let mut out = vec![0.0; g.batch * out_sz];
    out.par_chunks_mut(out_sz)
        .zip(x.par_chunks(in_sz))
        .for_each(|(y, xs)| {
            let mut cols = vec![0.0; g.col_rows() * npix];
            im2col(g, xs, &mut cols);
            for (f, row) in y.chunks_mut(npix).enumerate() {
                row.fill(b[f]);
            }
            gemm(g.out_ch, g.col_rows(), npix, w, false, &cols, false, 1.0, y);
        });
    out
}

/// Returns `(dx, dw, db)` for upstream gradient `gy`.
pub(crate) fn conv2d_backward(
    g: &ConvGeom,
    x: &[f64],
    w: &[f64],
    gy: &[f64],
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let in_sz = g.in_ch * g.height * g.width;
    let npix = g.out_pixels();
    let out_sz = g.out_ch * npix;
    let kk = g.col_rows();
    let mut dx = vec![0.0; x.len()];
    let per_sample: Vec<(Vec<f64>, Vec<f64>)> = dx
        .par_chunks_mut(in_sz)
        .zip(x.par_chunks(in_sz))
        .zip(gy.par_chunks(out_sz))
        .map(|((dxs, xs), gys)| {
            let mut cols = vec![0.0; kk * npix];
            im2col(g, xs, &mut cols);
            let mut dw = vec![0.0; g.out_ch * kk];
            gemm(g.out_ch, npix, kk, gys, false, &cols, true, 0.0, &mut dw);
            let db: Vec<f64> = gys.chunks(npix).map(|r| r.iter().sum()).collect();
            gemm(kk, g.out_ch, npix, w, true, gys, false, 0.0, &mut cols);
            col2im(g, &cols, dxs);
            (dw, db)
        })
        .collect();
    let mut dw = vec![0.0; g.out_ch * kk];
    let mut db = vec![0.0; g.out_ch];
    for (sw, sb) in &per_sample {
        dw.iter_mut().zip(sw).for_each(|(a, b)| *a += b);
        db.iter_mut().zip(sb).for_each(|(a, b)| *a += b);
    }
    (dx, dw, db)
}

/// Geometry of a 2×2, stride-2, unpadded transposed convolution.
#[derive(Clone, Copy, Debug)]
pub(crate) struct UpGeom {
    pub batch: usize,
    pub in_ch: usize,
    pub out_ch: usize,
    pub height: usize,
    pub width: usize,
}

pub(crate) fn conv_transpose_forward(g: &UpGeom, x: &[f64], w: &[f64], b: &[f64]) -> Vec<f64> {
    let hw = g.height * g.width;
    let (oh, ow) = (2 * g.height, 2 * g.width);
    let out_sz = g.out_ch * oh * ow;
    let f4 = g.out_ch * 4;
    let mut out = vec![0.0; g.batch * out_sz];
    out.par_chunks_mut(out_sz)
        .zip(x.par_chunks(g.in_ch * hw))
        .for_each(|(y, xs)| {
            // taps[(f·4 + a·2 + b), i·W + j] = Σ_c w[c, f, a, b]·x[c, i, j]
            let mut taps = vec![0.0; f4 * hw];
            gemm(f4, g.in_ch, hw, w, true, xs, false, 0.0, &mut taps);
            for f in 0..g.out_ch {
                for tap in 0..4 {
                    let (a, bb) = (tap / 2, tap % 2);
                    let src = &taps[(f * 4 + tap) * hw..(f * 4 + tap + 1) * hw];
                    for i in 0..g.height {
                        for j in 0..g.width {
                            y[(f * oh + 2 * i + a) * ow + 2 * j + bb] =
                                src[i * g.width + j] + b[f];
                        }
                    }
                }
            }
        });
    out
}

pub(crate) fn conv_transpose_backward(
    g: &UpGeom,
    x: &[f64],
    w: &[f64],
    gy: &[f64],
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let hw = g.height * g.width;
    let (oh, ow) = (2 * g.height, 2 * g.width);
    let out_sz = g.out_ch * oh * ow;
    let f4 = g.out_ch * 4;
    let mut dx = vec![0.0; x.len()];
    let per_sample: Vec<(Vec<f64>, Vec<f64>)> = dx
        .par_chunks_mut(g.in_ch * hw)
        .zip(x.par_chunks(g.in_ch * hw))
        .zip(gy.par_chunks(out_sz))
        .map(|((dxs, xs), gys)| {
            let mut taps = vec![0.0; f4 * hw];
            let mut db = vec![0.0; g.out_ch];
            for f in 0..g.out_ch {
                for tap in 0..4 {
                    let (a, bb) = (tap / 2, tap % 2);
                    let dst = &mut taps[(f * 4 + tap) * hw..(f * 4 + tap + 1) * hw];
                    for i in 0..g.height {
                        for j in 0..g.width {
                            dst[i * g.width + j] = gys[(f * oh + 2 * i + a) * ow + 2 * j + bb];
                        }
                    }
                }
                db[f] = gys[f * oh * ow..(f + 1) * oh * ow].iter().sum();
            }
            gemm(g.in_ch, f4, hw, w, false, &taps, false, 0.0, dxs);
            let mut dw = vec![0.0; g.in_ch * f4];
            gemm(g.in_ch, hw, f4, xs, false, &taps, true, 0.0, &mut dw);
            (dw, db)
        })
        .collect();
    let mut dw = vec![0.0; g.in_ch * f4];
    let mut db = vec![0.0; g.out_ch];
    for (sw, sb) in &per_sample {
        dw.iter_mut().zip(sw).for_each(|(a, b)| *a += b);
        db.iter_mut().zip(sb).for_each(|(a, b)| *a += b);
    }
    (dx, dw, db)
}
