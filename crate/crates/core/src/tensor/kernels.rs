//! Forward and backward kernels for the spatial operators.
//!
//! Every kernel parallelizes over independent output planes or fixed-size
//! row blocks only; no reduction is ever split across threads.

use rayon::prelude::*;

use super::{Shape, Tensor};
use crate::error::{invalid, Error, Result};
use crate::linalg::{gemm, MatRef};
use crate::scalar::Scalar;

/// Stride, zero padding and dilation of a 2-D convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub stride: usize,
    pub pad: usize,
    pub dilation: usize,
}

impl ConvGeometry {
    /// Stride 1, dilation 1 and the padding that preserves H×W for an odd kernel.
    pub const fn same(kernel: usize) -> Self {
        Self {
            stride: 1,
            pad: kernel / 2,
            dilation: 1,
        }
    }

    pub const fn strided(kernel: usize, stride: usize) -> Self {
        Self {
            stride,
            pad: kernel / 2,
            dilation: 1,
        }
    }

    fn out_extent(&self, input: usize, kernel: usize) -> Option<usize> {
        let span = self.dilation * (kernel - 1) + 1;
        let padded = input + 2 * self.pad;
        if self.stride == 0 || self.dilation == 0 || padded < span {
            return None;
        }
        Some((padded - span) / self.stride + 1)
    }
}

/// Validated dimensions of one convolution call.
#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvDims {
    pub input: Shape,
    pub out: Shape,
    pub kh: usize,
    pub kw: usize,
    pub geom: ConvGeometry,
}

impl ConvDims {
    pub fn new<T: Scalar>(
        op: &'static str,
        x: &Tensor<T>,
        weight: &Tensor<T>,
        bias: Option<&Tensor<T>>,
        geom: ConvGeometry,
    ) -> Result<Self> {
        let xs = x.shape();
        let ws = weight.shape();
        if ws.c != xs.c {
            return Err(Error::shape(
                op,
                format!("weight expects {} input channels, input {} has {}", ws.c, xs, xs.c),
            ));
        }
        if let Some(b) = bias {
            if b.shape() != Shape::new(1, ws.n, 1, 1) {
                return Err(Error::shape(
                    op,
                    format!("bias shape {} for {} output channels", b.shape(), ws.n),
                ));
            }
        }
        let (oh, ow) = match (geom.out_extent(xs.h, ws.h), geom.out_extent(xs.w, ws.w)) {
            (Some(h), Some(w)) => (h, w),
            _ => {
                return Err(Error::shape(
                    op,
                    format!("kernel {}x{} with {:?} does not fit input {}", ws.h, ws.w, geom, xs),
                ))
            }
        };
        Ok(Self {
            input: xs,
            out: Shape::new(xs.n, ws.n, oh, ow),
            kh: ws.h,
            kw: ws.w,
            geom,
        })
    }

    fn taps(&self) -> usize {
        self.kh * self.kw
    }

    fn col_rows(&self) -> usize {
        self.input.c * self.taps()
    }

    fn col_cols(&self) -> usize {
        self.out.plane()
    }

    /// Integer sampling origin of tap `(ky, kx)` for output `(oy, ox)`.
    #[inline]
    fn origin(&self, oy: usize, ox: usize, ky: usize, kx: usize) -> (isize, isize) {
        let g = self.geom;
        (
            (oy * g.stride + ky * g.dilation) as isize - g.pad as isize,
            (ox * g.stride + kx * g.dilation) as isize - g.pad as isize,
        )
    }
}

impl ConvDims {
    /// Output columns `lo..hi` whose tap `kx` lands inside the input row.
    fn valid_cols(&self, kx: usize) -> (usize, usize) {
        let g = self.geom;
        let shift = (kx * g.dilation) as isize - g.pad as isize;
        let s = g.stride as isize;
        // ox * s + shift in [0, w)
        let lo = if shift >= 0 { 0 } else { (-shift + s - 1) / s };
        let hi = (self.input.w as isize - shift + s - 1) / s;
        let hi = hi.clamp(0, self.out.w as isize) as usize;
        (lo as usize, hi.max(lo as usize))
    }

    /// Input row read by tap `ky` at output row `oy`, if inside the image.
    fn src_row(&self, oy: usize, ky: usize) -> Option<usize> {
        let iy = self.origin(oy, 0, ky, 0).0;
        (iy >= 0 && iy < self.input.h as isize).then_some(iy as usize)
    }
}

fn im2col<T: Scalar>(d: &ConvDims, x: &[T], col: &mut [T]) {
    let (w, ow) = (d.input.w, d.out.w);
    let plane = d.input.plane();
    let cols = d.col_cols();
    let taps = d.taps();
    let (stride, shift) = (d.geom.stride, d.geom.dilation);
    col.par_chunks_mut(cols).enumerate().for_each(|(row, dst)| {
        let c = row / taps;
        let (ky, kx) = ((row % taps) / d.kw, row % d.kw);
        let src = &x[c * plane..(c + 1) * plane];
        let (lo, hi) = d.valid_cols(kx);
        for (oy, out) in dst.chunks_mut(ow).enumerate() {
            let Some(iy) = d.src_row(oy, ky) else {
                out.fill(T::zero());
                continue;
            };
            out[..lo].fill(T::zero());
            out[hi..].fill(T::zero());
            let base = iy * w + kx * shift;
            for ox in lo..hi {
                out[ox] = src[base + ox * stride - d.geom.pad];
            }
        }
    });
}

fn col2im<T: Scalar>(d: &ConvDims, col: &[T], dx: &mut [T]) {
    let (w, ow) = (d.input.w, d.out.w);
    let cols = d.col_cols();
    let taps = d.taps();
    let (stride, shift) = (d.geom.stride, d.geom.dilation);
    dx.par_chunks_mut(d.input.plane()).enumerate().for_each(|(c, dst)| {
        for k in 0..taps {
            let (ky, kx) = (k / d.kw, k % d.kw);
            let src = &col[(c * taps + k) * cols..(c * taps + k + 1) * cols];
            let (lo, hi) = d.valid_cols(kx);
            for (oy, row) in src.chunks(ow).enumerate() {
                let Some(iy) = d.src_row(oy, ky) else { continue };
                let base = iy * w + kx * shift;
                for ox in lo..hi {
                    dst[base + ox * stride - d.geom.pad] += row[ox];
                }
            }
        }
    });
}

fn add_bias<T: Scalar>(out: &mut [T], bias: Option<&Tensor<T>>, plane: usize) {
    if let Some(b) = bias {
        for (chunk, &bv) in out.chunks_mut(plane).zip(b.data()) {
            chunk.iter_mut().for_each(|v| *v += bv);
        }
    }
}

fn bias_grad<T: Scalar>(gout: &Tensor<T>) -> Tensor<T> {
    let s = gout.shape();
    let mut db = vec![T::zero(); s.c];
    for n in 0..s.n {
        for (c, acc) in db.iter_mut().enumerate() {
            *acc += gout.plane(n, c).iter().copied().sum::<T>();
        }
    }
    Tensor::from_vec(Shape::new(1, s.c, 1, 1), db).expect("bias grad shape")
}

/// Gradients requested from a backward kernel; `None` where not needed.
pub(crate) struct ConvGrads<T> {
    pub input: Option<Tensor<T>>,
    pub weight: Option<Tensor<T>>,
    pub bias: Option<Tensor<T>>,
}

pub(crate) fn conv2d_forward<T: Scalar>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    geom: ConvGeometry,
) -> Result<Tensor<T>> {
    let d = ConvDims::new("conv2d", x, weight, bias, geom)?;
    let per_out = d.out.c * d.out.plane();
    let mut out = vec![T::zero(); d.out.numel()];
    let mut col = vec![T::zero(); d.col_rows() * d.col_cols()];
    let wmat = MatRef::new(weight.data(), d.out.c, d.col_rows());
    for (n, dst) in out.chunks_mut(per_out).enumerate() {
        im2col(&d, x.sample(n), &mut col);
        gemm(wmat, MatRef::new(&col, d.col_rows(), d.col_cols()), dst, false);
        add_bias(dst, bias, d.out.plane());
    }
    Tensor::from_vec(d.out, out)
}

pub(crate) fn conv2d_backward<T: Scalar>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    geom: ConvGeometry,
    gout: &Tensor<T>,
    need: [bool; 3],
) -> Result<ConvGrads<T>> {
    let d = ConvDims::new("conv2d", x, weight, None, geom)?;
    gout.expect_shape(d.out, "conv2d backward")?;
    let (rows, cols) = (d.col_rows(), d.col_cols());
    let mut col = vec![T::zero(); rows * cols];
    let mut dw = need[1].then(|| vec![T::zero(); weight.len()]);
    let mut dx = need[0].then(|| vec![T::zero(); x.len()]);
    let wmat = MatRef::new(weight.data(), d.out.c, rows);
    for n in 0..d.input.n {
        let g = MatRef::new(gout.sample(n), d.out.c, cols);
        if let Some(dw) = dw.as_mut() {
            im2col(&d, x.sample(n), &mut col);
            gemm(g, MatRef::new(&col, rows, cols).t(), dw, true);
        }
        if let Some(dx) = dx.as_mut() {
            gemm(wmat.t(), g, &mut col, false);
            let per_in = d.input.c * d.input.plane();
            col2im(&d, &col, &mut dx[n * per_in..(n + 1) * per_in]);
        }
    }
    Ok(ConvGrads {
        input: dx.map(|v| Tensor::from_vec(d.input, v)).transpose()?,
        weight: dw.map(|v| Tensor::from_vec(weight.shape(), v)).transpose()?,
        bias: need[2].then(|| bias_grad(gout)),
    })
}

/// Floor of a finite position as an integer, without a libm call. Positions
/// far outside any image are clamped first so the cast cannot saturate.
#[inline]
fn floor_index(v: f64) -> isize {
    let v = v.clamp(-1e9, 1e9);
    let t = v as isize;
    if (t as f64) > v {
        t - 1
    } else {
        t
    }
}

/// Bilinear stencil of one sampling position: four corner indices with their
/// weights and the weight derivatives along y and x. Out-of-bounds corners
/// keep index 0 and all-zero weights, so they contribute nothing.
#[derive(Clone, Copy, Debug, Default)]
struct Stencil {
    idx: [usize; 4],
    wt: [f64; 4],
    wy: [f64; 4],
    wx: [f64; 4],
}

impl Stencil {
    #[inline]
    fn at(y: f64, x: f64, h: usize, w: usize) -> Self {
        let (y0, x0) = (floor_index(y), floor_index(x));
        let (ly, lx) = (y - y0 as f64, x - x0 as f64);
        let corners = [
            (0, 0, (1.0 - ly) * (1.0 - lx), -(1.0 - lx), -(1.0 - ly)),
            (0, 1, (1.0 - ly) * lx, -lx, 1.0 - ly),
            (1, 0, ly * (1.0 - lx), 1.0 - lx, -ly),
            (1, 1, ly * lx, lx, ly),
        ];
        let (hi, wi) = (h as isize, w as isize);
        let mut s = Self::default();
        for (j, (dy, dx, wt, gy, gx)) in corners.into_iter().enumerate() {
            let (yy, xx) = (y0 + dy, x0 + dx);
            if yy >= 0 && yy < hi && xx >= 0 && xx < wi {
                s.idx[j] = (yy * wi + xx) as usize;
                s.wt[j] = wt;
                s.wy[j] = gy;
                s.wx[j] = gx;
            }
        }
        s
    }

    #[inline]
    fn sample<T: Scalar>(&self, plane: &[T]) -> T {
        let mut acc = T::zero();
        for j in 0..4 {
            acc += T::of(self.wt[j]) * plane[self.idx[j]];
        }
        acc
    }
}

/// Validated dimensions of a deformable convolution call.
fn deform_dims<T: Scalar>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    offsets: &Tensor<T>,
    mask: &Tensor<T>,
    geom: ConvGeometry,
) -> Result<ConvDims> {
    let d = ConvDims::new("deform_conv2d", x, weight, bias, geom)?;
    let k = d.taps();
    let want_off = Shape::new(d.input.n, 2 * k, d.out.h, d.out.w);
    let want_mask = Shape::new(d.input.n, k, d.out.h, d.out.w);
    if offsets.shape() != want_off {
        return Err(Error::shape(
            "deform_conv2d",
            format!("offsets {} but {} taps need {}", offsets.shape(), k, want_off),
        ));
    }
    if mask.shape() != want_mask {
        return Err(Error::shape(
            "deform_conv2d",
            format!("mask {} but expected {}", mask.shape(), want_mask),
        ));
    }
    if !offsets.all_finite() || !mask.all_finite() {
        return Err(Error::NonFinite { op: "deform_conv2d" });
    }
    Ok(d)
}

/// Stencils of tap `k` at every output site of one sample.
fn tap_stencils<T: Scalar>(d: &ConvDims, off: &[T], k: usize) -> Vec<Stencil> {
    let cols = d.col_cols();
    let (oy_off, ox_off) = (&off[2 * k * cols..(2 * k + 1) * cols], &off[(2 * k + 1) * cols..(2 * k + 2) * cols]);
    let mut out = vec![Stencil::default(); cols];
    out.par_chunks_mut(d.out.w).enumerate().for_each(|(oy, row)| {
        for (ox, st) in row.iter_mut().enumerate() {
            let p = oy * d.out.w + ox;
            let (iy, ix) = d.origin(oy, ox, k / d.kw, k % d.kw);
            *st = Stencil::at(
                iy as f64 + oy_off[p].as_f64(),
                ix as f64 + ox_off[p].as_f64(),
                d.input.h,
                d.input.w,
            );
        }
    });
    out
}

fn deform_im2col<T: Scalar>(d: &ConvDims, x: &[T], off: &[T], mask: &[T], col: &mut [T]) {
    let plane_in = d.input.plane();
    let cols = d.col_cols();
    let taps = d.taps();
    for k in 0..taps {
        let st = tap_stencils(d, off, k);
        let m = &mask[k * cols..(k + 1) * cols];
        col.par_chunks_mut(cols)
            .enumerate()
            .filter(|(row, _)| row % taps == k)
            .for_each(|(row, dst)| {
                let src = &x[(row / taps) * plane_in..(row / taps + 1) * plane_in];
                for p in 0..cols {
                    dst[p] = m[p] * st[p].sample(src);
                }
            });
    }
}

pub(crate) fn deform_conv2d_forward<T: Scalar>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    offsets: &Tensor<T>,
    mask: &Tensor<T>,
    geom: ConvGeometry,
) -> Result<Tensor<T>> {
    let d = deform_dims(x, weight, bias, offsets, mask, geom)?;
    let per_out = d.out.c * d.out.plane();
    let mut out = vec![T::zero(); d.out.numel()];
    let mut col = vec![T::zero(); d.col_rows() * d.col_cols()];
    let wmat = MatRef::new(weight.data(), d.out.c, d.col_rows());
    for (n, dst) in out.chunks_mut(per_out).enumerate() {
        deform_im2col(&d, x.sample(n), offsets.sample(n), mask.sample(n), &mut col);
        gemm(wmat, MatRef::new(&col, d.col_rows(), d.col_cols()), dst, false);
        add_bias(dst, bias, d.out.plane());
    }
    Tensor::from_vec(d.out, out)
}

pub(crate) struct DeformGrads<T> {
    pub conv: ConvGrads<T>,
    pub offsets: Option<Tensor<T>>,
    pub mask: Option<Tensor<T>>,
}

/// `need` = [input, weight, bias, offsets, mask].
pub(crate) fn deform_conv2d_backward<T: Scalar>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    offsets: &Tensor<T>,
    mask: &Tensor<T>,
    geom: ConvGeometry,
    gout: &Tensor<T>,
    need: [bool; 5],
) -> Result<DeformGrads<T>> {
    let d = deform_dims(x, weight, None, offsets, mask, geom)?;
    gout.expect_shape(d.out, "deform_conv2d backward")?;
    let (rows, cols) = (d.col_rows(), d.col_cols());
    let taps = d.taps();
    let plane_in = d.input.plane();
    let mut col = vec![T::zero(); rows * cols];
    let mut dcol = vec![T::zero(); rows * cols];
    let mut dw = need[1].then(|| vec![T::zero(); weight.len()]);
    let mut dx = need[0].then(|| vec![T::zero(); x.len()]);
    let mut doff = need[3].then(|| vec![T::zero(); offsets.len()]);
    let mut dmask = need[4].then(|| vec![T::zero(); mask.len()]);
    let wmat = MatRef::new(weight.data(), d.out.c, rows);

    for n in 0..d.input.n {
        let (xs, off, msk) = (x.sample(n), offsets.sample(n), mask.sample(n));
        let g = MatRef::new(gout.sample(n), d.out.c, cols);
        if let Some(dw) = dw.as_mut() {
            deform_im2col(&d, xs, off, msk, &mut col);
            gemm(g, MatRef::new(&col, rows, cols).t(), dw, true);
        }
        if dx.is_none() && doff.is_none() && dmask.is_none() {
            continue;
        }
        gemm(wmat.t(), g, &mut dcol, false);

        let per_in = d.input.c * plane_in;
        for k in 0..taps {
            let st = tap_stencils(&d, off, k);
            let m = &msk[k * cols..(k + 1) * cols];
            if let Some(dx) = dx.as_mut() {
                dx[n * per_in..(n + 1) * per_in]
                    .par_chunks_mut(plane_in)
                    .enumerate()
                    .for_each(|(c, dst)| {
                        let src = &dcol[(c * taps + k) * cols..(c * taps + k + 1) * cols];
                        for p in 0..cols {
                            let gv = (src[p] * m[p]).as_f64();
                            let s = &st[p];
                            for j in 0..4 {
                                dst[s.idx[j]] += T::of(gv * s.wt[j]);
                            }
                        }
                    });
            }
            if doff.is_none() && dmask.is_none() {
                continue;
            }
            // Offset/mask gradients reduce over input channels in order.
            let mut gy = vec![T::zero(); cols];
            let mut gx = vec![T::zero(); cols];
            let mut gm = vec![T::zero(); cols];
            let ow = d.out.w;
            gy.par_chunks_mut(ow)
                .zip(gx.par_chunks_mut(ow))
                .zip(gm.par_chunks_mut(ow))
                .enumerate()
                .for_each(|(oy, ((gy, gx), gm))| {
                    for c in 0..d.input.c {
                        let src = &xs[c * plane_in..(c + 1) * plane_in];
                        let gc = &dcol[(c * taps + k) * cols..(c * taps + k + 1) * cols];
                        for ox in 0..ow {
                            let p = oy * ow + ox;
                            let s = &st[p];
                            let (mut val, mut vy, mut vx) = (0.0, 0.0, 0.0);
                            for j in 0..4 {
                                let v = src[s.idx[j]].as_f64();
                                val += s.wt[j] * v;
                                vy += s.wy[j] * v;
                                vx += s.wx[j] * v;
                            }
                            let gp = gc[p].as_f64();
                            gm[ox] += T::of(gp * val);
                            gy[ox] += T::of(gp * m[p].as_f64() * vy);
                            gx[ox] += T::of(gp * m[p].as_f64() * vx);
                        }
                    }
                });
            if let Some(doff) = doff.as_mut() {
                let base = n * 2 * taps * cols;
                doff[base + 2 * k * cols..base + (2 * k + 1) * cols].copy_from_slice(&gy);
                doff[base + (2 * k + 1) * cols..base + (2 * k + 2) * cols].copy_from_slice(&gx);
            }
            if let Some(dmask) = dmask.as_mut() {
                let base = n * taps * cols;
                dmask[base + k * cols..base + (k + 1) * cols].copy_from_slice(&gm);
            }
        }
    }
    Ok(DeformGrads {
        conv: ConvGrads {
            input: dx.map(|v| Tensor::from_vec(d.input, v)).transpose()?,
            weight: dw.map(|v| Tensor::from_vec(weight.shape(), v)).transpose()?,
            bias: need[2].then(|| bias_grad(gout)),
        },
        offsets: doff.map(|v| Tensor::from_vec(offsets.shape(), v)).transpose()?,
        mask: dmask.map(|v| Tensor::from_vec(mask.shape(), v)).transpose()?,
    })
}

/// Orthonormal Haar analysis: each 2×2 block `[[a, b], [c, d]]` becomes
/// LL = (a+b+c+d)/2, LH = (c+d-a-b)/2, HL = (b+d-a-c)/2, HH = (a+d-b-c)/2.
pub(crate) fn dwt2<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let s = x.shape();
    if s.h % 2 != 0 || s.w % 2 != 0 {
        return Err(Error::shape("dwt2", format!("odd spatial extent in {s}")));
    }
    let out_shape = Shape::new(s.n, 4 * s.c, s.h / 2, s.w / 2);
    let (oh, ow) = (s.h / 2, s.w / 2);
    let half = T::of(0.5);
    let mut out = vec![T::zero(); out_shape.numel()];
    out.par_chunks_mut(4 * oh * ow).enumerate().for_each(|(nc, dst)| {
        let src = x.plane(nc / s.c, nc % s.c);
        let (ll, rest) = dst.split_at_mut(oh * ow);
        let (lh, rest) = rest.split_at_mut(oh * ow);
        let (hl, hh) = rest.split_at_mut(oh * ow);
        for i in 0..oh {
            for j in 0..ow {
                let a = src[2 * i * s.w + 2 * j];
                let b = src[2 * i * s.w + 2 * j + 1];
                let c = src[(2 * i + 1) * s.w + 2 * j];
                let d = src[(2 * i + 1) * s.w + 2 * j + 1];
                let p = i * ow + j;
                ll[p] = (a + b + c + d) * half;
                lh[p] = (c + d - a - b) * half;
                hl[p] = (b + d - a - c) * half;
                hh[p] = (a + d - b - c) * half;
            }
        }
    });
    Tensor::from_vec(out_shape, out)
}

/// Exact inverse (and adjoint) of [`dwt2`].
pub(crate) fn idwt2<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let s = x.shape();
    if s.c % 4 != 0 {
        return Err(Error::shape("idwt2", format!("channels of {s} not divisible by 4")));
    }
    let out_shape = Shape::new(s.n, s.c / 4, 2 * s.h, 2 * s.w);
    let half = T::of(0.5);
    let ow = out_shape.w;
    let mut out = vec![T::zero(); out_shape.numel()];
    out.par_chunks_mut(out_shape.plane()).enumerate().for_each(|(nc, dst)| {
        let (n, c) = (nc / out_shape.c, nc % out_shape.c);
        let ll = x.plane(n, 4 * c);
        let lh = x.plane(n, 4 * c + 1);
        let hl = x.plane(n, 4 * c + 2);
        let hh = x.plane(n, 4 * c + 3);
        for i in 0..s.h {
            for j in 0..s.w {
                let p = i * s.w + j;
                let (l0, l1, l2, l3) = (ll[p], lh[p], hl[p], hh[p]);
                dst[2 * i * ow + 2 * j] = (l0 - l1 - l2 + l3) * half;
                dst[2 * i * ow + 2 * j + 1] = (l0 - l1 + l2 - l3) * half;
                dst[(2 * i + 1) * ow + 2 * j] = (l0 + l1 - l2 - l3) * half;
                dst[(2 * i + 1) * ow + 2 * j + 1] = (l0 + l1 + l2 + l3) * half;
            }
        }
    });
    Tensor::from_vec(out_shape, out)
}

/// Mean over non-overlapping `factor`×`factor` boxes.
pub fn avg_pool<T: Scalar>(x: &Tensor<T>, factor: usize) -> Result<Tensor<T>> {
    let s = x.shape();
    if factor == 0 || s.h % factor != 0 || s.w % factor != 0 {
        return Err(Error::shape(
            "avg_pool",
            format!("extents of {s} not divisible by factor {factor}"),
        ));
    }
    let out_shape = s.with_hw(s.h / factor, s.w / factor);
    let inv = T::of(1.0 / (factor * factor) as f64);
    let mut out = vec![T::zero(); out_shape.numel()];
    out.par_chunks_mut(out_shape.plane()).enumerate().for_each(|(nc, dst)| {
        let src = x.plane(nc / s.c, nc % s.c);
        for i in 0..out_shape.h {
            for j in 0..out_shape.w {
                let mut acc = T::zero();
                for dy in 0..factor {
                    let row = (i * factor + dy) * s.w + j * factor;
                    for v in &src[row..row + factor] {
                        acc += *v;
                    }
                }
                dst[i * out_shape.w + j] = acc * inv;
            }
        }
    });
    Tensor::from_vec(out_shape, out)
}

pub(crate) fn avg_pool_backward<T: Scalar>(gout: &Tensor<T>, input: Shape, factor: usize) -> Tensor<T> {
    let inv = T::of(1.0 / (factor * factor) as f64);
    let os = gout.shape();
    Tensor::from_fn(input, |n, c, y, x| {
        gout.data()[((n * os.c + c) * os.h + y / factor) * os.w + x / factor] * inv
    })
}

/// Source coordinate and interpolation stencil for align-corners-false resizing.
fn resize_taps(out: usize, input: usize) -> Vec<(usize, usize, f64)> {
    let scale = input as f64 / out as f64;
    (0..out)
        .map(|i| {
            let src = ((i as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(input - 1);
            let i1 = (i0 + 1).min(input - 1);
            (i0, i1, src - i0 as f64)
        })
        .collect()
}

pub(crate) fn bilinear_resize_forward<T: Scalar>(x: &Tensor<T>, h: usize, w: usize) -> Result<Tensor<T>> {
    if h == 0 || w == 0 {
        return Err(invalid("bilinear_resize target extent must be positive"));
    }
    let s = x.shape();
    let ys = resize_taps(h, s.h);
    let xs = resize_taps(w, s.w);
    let out_shape = s.with_hw(h, w);
    let mut out = vec![T::zero(); out_shape.numel()];
    out.par_chunks_mut(h * w).enumerate().for_each(|(nc, dst)| {
        let src = x.plane(nc / s.c, nc % s.c);
        for (i, &(y0, y1, ly)) in ys.iter().enumerate() {
            for (j, &(x0, x1, lx)) in xs.iter().enumerate() {
                let v = (1.0 - ly) * ((1.0 - lx) * src[y0 * s.w + x0].as_f64() + lx * src[y0 * s.w + x1].as_f64())
                    + ly * ((1.0 - lx) * src[y1 * s.w + x0].as_f64() + lx * src[y1 * s.w + x1].as_f64());
                dst[i * w + j] = T::of(v);
            }
        }
    });
    Tensor::from_vec(out_shape, out)
}

pub(crate) fn bilinear_resize_backward<T: Scalar>(gout: &Tensor<T>, input: Shape) -> Tensor<T> {
    let os = gout.shape();
    let ys = resize_taps(os.h, input.h);
    let xs = resize_taps(os.w, input.w);
    let mut dx = vec![T::zero(); input.numel()];
    dx.par_chunks_mut(input.plane()).enumerate().for_each(|(nc, dst)| {
        let g = gout.plane(nc / input.c, nc % input.c);
        for (i, &(y0, y1, ly)) in ys.iter().enumerate() {
            for (j, &(x0, x1, lx)) in xs.iter().enumerate() {
                let gv = g[i * os.w + j].as_f64();
                dst[y0 * input.w + x0] += T::of(gv * (1.0 - ly) * (1.0 - lx));
                dst[y0 * input.w + x1] += T::of(gv * (1.0 - ly) * lx);
                dst[y1 * input.w + x0] += T::of(gv * ly * (1.0 - lx));
                dst[y1 * input.w + x1] += T::of(gv * ly * lx);
            }
        }
    });
    Tensor::from_vec(input, dx).expect("resize grad shape")
}

/// Box-filter weights mapping `input` samples onto `out` equal-width bins.
fn area_weights(out: usize, input: usize) -> Vec<Vec<(usize, f64)>> {
    let scale = input as f64 / out as f64;
    (0..out)
        .map(|i| {
            let (lo, hi) = (i as f64 * scale, (i + 1) as f64 * scale);
            let first = lo.floor() as usize;
            let last = (hi.ceil() as usize).min(input);
            (first..last)
                .filter_map(|k| {
                    let overlap = (hi.min((k + 1) as f64) - lo.max(k as f64)) / scale;
                    (overlap > 0.0).then_some((k, overlap))
                })
                .collect()
        })
        .collect()
}

/// Area (box-filter) downsampling to `h`×`w`, valid for any non-integer
/// reduction factor; equals [`avg_pool`] for integer factors up to rounding.
pub fn area_resize<T: Scalar>(x: &Tensor<T>, h: usize, w: usize) -> Result<Tensor<T>> {
    let s = x.shape();
    if h == 0 || w == 0 || h > s.h || w > s.w {
        return Err(invalid(format!(
            "area_resize from {}x{} to {h}x{w}: only downsampling is supported",
            s.h, s.w
        )));
    }
    if (h, w) == (s.h, s.w) {
        return Ok(x.clone());
    }
    let wy = area_weights(h, s.h);
    let wx = area_weights(w, s.w);
    let out_shape = s.with_hw(h, w);
    let mut out = vec![T::zero(); out_shape.numel()];
    out.par_chunks_mut(h * w).enumerate().for_each(|(nc, dst)| {
        let src = x.plane(nc / s.c, nc % s.c);
        let mut rows = vec![0.0f64; h * s.w];
        for (i, taps) in wy.iter().enumerate() {
            for &(k, wt) in taps {
                for c in 0..s.w {
                    rows[i * s.w + c] += wt * src[k * s.w + c].as_f64();
                }
            }
        }
        for i in 0..h {
            for (j, taps) in wx.iter().enumerate() {
                let v: f64 = taps.iter().map(|&(k, wt)| wt * rows[i * s.w + k]).sum();
                dst[i * w + j] = T::of(v);
            }
        }
    });
    Tensor::from_vec(out_shape, out)
}

