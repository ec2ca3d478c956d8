//! Raw compute kernels behind the layer ops.
//!
//! Everything here works on flat row-major slices plus an explicit geometry
//! struct; shape validation happens one level up in `layers`. Inner loops are
//! arranged so the hot path (stride 1) reduces to contiguous
//! slice-times-scalar accumulations, which the compiler vectorizes.

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Geometry of a direct convolution: x is (c_in, h_in, w_in), w is
/// (c_out, c_in, k, k), output is (c_out, h_out, w_out).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub c_in: usize,
    pub h_in: usize,
    pub w_in: usize,
    pub c_out: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub h_out: usize,
    pub w_out: usize,
}

impl ConvGeom {
    pub fn new(
        c_in: usize,
        h_in: usize,
        w_in: usize,
        c_out: usize,
        k: usize,
        stride: usize,
        pad: usize,
    ) -> Result<Self> {
        if stride == 0 {
            return Err(Error::invalid("conv2d: stride must be >= 1"));
        }
        let span_h = h_in as i64 + 2 * pad as i64 - k as i64;
        let span_w = w_in as i64 + 2 * pad as i64 - k as i64;
        if span_h < 0 || span_w < 0 {
            return Err(Error::shape(
                "conv2d",
                format!("input at least {k}x{k} after padding {pad}"),
                format!("{h_in}x{w_in}"),
            ));
        }
        if span_h % stride as i64 != 0 || span_w % stride as i64 != 0 {
            return Err(Error::shape(
                "conv2d",
                format!("(dim + 2*{pad} - {k}) divisible by stride {stride}"),
                format!("{h_in}x{w_in}"),
            ));
        }
        Ok(ConvGeom {
            c_in,
            h_in,
            w_in,
            c_out,
            k,
            stride,
            pad,
            h_out: (span_h / stride as i64) as usize + 1,
            w_out: (span_w / stride as i64) as usize + 1,
        })
    }

    pub fn x_len(&self) -> usize {
        self.c_in * self.h_in * self.w_in
    }
    pub fn w_len(&self) -> usize {
        self.c_out * self.c_in * self.k * self.k
    }
    pub fn out_len(&self) -> usize {
        self.c_out * self.h_out * self.w_out
    }
}

/// Valid output-row interval for a stride-1 kernel tap at offset `kd`:
/// all `o` with 0 <= o + kd - pad < in_dim, clipped to [0, out_dim).
#[inline]
fn tap_range(out_dim: usize, in_dim: usize, kd: usize, pad: usize) -> (usize, usize) {
    let lo = pad.saturating_sub(kd);
    let hi = (in_dim + pad).saturating_sub(kd).min(out_dim);
    (lo.min(hi), hi)
}

pub fn conv2d_fwd<S: Scalar>(x: &[S], w: &[S], b: &[S], g: &ConvGeom, out: &mut [S]) {
    debug_assert_eq!(out.len(), g.out_len());
    let (k, pad, stride) = (g.k, g.pad, g.stride);
    for co in 0..g.c_out {
        let out_plane = &mut out[co * g.h_out * g.w_out..][..g.h_out * g.w_out];
        out_plane.fill(b[co]);
        for ci in 0..g.c_in {
            let x_plane = &x[ci * g.h_in * g.w_in..][..g.h_in * g.w_in];
            for ky in 0..k {
                for kx in 0..k {
                    let wv = w[((co * g.c_in + ci) * k + ky) * k + kx];
                    if stride == 1 {
                        let (oy_lo, oy_hi) = tap_range(g.h_out, g.h_in, ky, pad);
                        let (ox_lo, ox_hi) = tap_range(g.w_out, g.w_in, kx, pad);
                        if ox_lo >= ox_hi {
                            continue;
                        }
                        for oy in oy_lo..oy_hi {
                            let iy = oy + ky - pad;
                            let src = &x_plane[iy * g.w_in + ox_lo + kx - pad..][..ox_hi - ox_lo];
                            let dst = &mut out_plane[oy * g.w_out + ox_lo..][..ox_hi - ox_lo];
                            for (d, s) in dst.iter_mut().zip(src) {
                                *d += wv * *s;
                            }
                        }
                    } else {
                        for oy in 0..g.h_out {
                            let iy = (oy * stride + ky) as i64 - pad as i64;
                            if iy < 0 || iy >= g.h_in as i64 {
                                continue;
                            }
                            for ox in 0..g.w_out {
                                let ix = (ox * stride + kx) as i64 - pad as i64;
                                if ix < 0 || ix >= g.w_in as i64 {
                                    continue;
                                }
                                out_plane[oy * g.w_out + ox] +=
                                    wv * x_plane[iy as usize * g.w_in + ix as usize];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// dL/dx accumulated into `dx` (caller provides a zeroed buffer).
pub fn conv2d_bwd_x<S: Scalar>(dy: &[S], w: &[S], g: &ConvGeom, dx: &mut [S]) {
    let (k, pad, stride) = (g.k, g.pad, g.stride);
    for co in 0..g.c_out {
        let dy_plane = &dy[co * g.h_out * g.w_out..][..g.h_out * g.w_out];
        for ci in 0..g.c_in {
            let dx_plane = &mut dx[ci * g.h_in * g.w_in..][..g.h_in * g.w_in];
            for ky in 0..k {
                for kx in 0..k {
                    let wv = w[((co * g.c_in + ci) * k + ky) * k + kx];
                    if stride == 1 {
                        let (oy_lo, oy_hi) = tap_range(g.h_out, g.h_in, ky, pad);
                        let (ox_lo, ox_hi) = tap_range(g.w_out, g.w_in, kx, pad);
                        if ox_lo >= ox_hi {
                            continue;
                        }
                        for oy in oy_lo..oy_hi {
                            let iy = oy + ky - pad;
                            let src = &dy_plane[oy * g.w_out + ox_lo..][..ox_hi - ox_lo];
                            let dst =
                                &mut dx_plane[iy * g.w_in + ox_lo + kx - pad..][..ox_hi - ox_lo];
                            for (d, s) in dst.iter_mut().zip(src) {
                                *d += wv * *s;
                            }
                        }
                    } else {
                        for oy in 0..g.h_out {
                            let iy = (oy * stride + ky) as i64 - pad as i64;
                            if iy < 0 || iy >= g.h_in as i64 {
                                continue;
                            }
                            for ox in 0..g.w_out {
                                let ix = (ox * stride + kx) as i64 - pad as i64;
                                if ix < 0 || ix >= g.w_in as i64 {
                                    continue;
                                }
                                dx_plane[iy as usize * g.w_in + ix as usize] +=
                                    wv * dy_plane[oy * g.w_out + ox];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// dL/dw accumulated into `dw` (zeroed by caller).
pub fn conv2d_bwd_w<S: Scalar>(dy: &[S], x: &[S], g: &ConvGeom, dw: &mut [S]) {
    let (k, pad, stride) = (g.k, g.pad, g.stride);
    for co in 0..g.c_out {
        let dy_plane = &dy[co * g.h_out * g.w_out..][..g.h_out * g.w_out];
        for ci in 0..g.c_in {
            let x_plane = &x[ci * g.h_in * g.w_in..][..g.h_in * g.w_in];
            for ky in 0..k {
                for kx in 0..k {
                    let mut acc = S::ZERO;
                    if stride == 1 {
                        let (oy_lo, oy_hi) = tap_range(g.h_out, g.h_in, ky, pad);
                        let (ox_lo, ox_hi) = tap_range(g.w_out, g.w_in, kx, pad);
                        if ox_lo < ox_hi {
                            for oy in oy_lo..oy_hi {
                                let iy = oy + ky - pad;
                                let a = &dy_plane[oy * g.w_out + ox_lo..][..ox_hi - ox_lo];
                                let b = &x_plane[iy * g.w_in + ox_lo + kx - pad..][..ox_hi - ox_lo];
                                for (u, v) in a.iter().zip(b) {
                                    acc += *u * *v;
                                }
                            }
                        }
                    } else {
                        for oy in 0..g.h_out {
                            let iy = (oy * stride + ky) as i64 - pad as i64;
                            if iy < 0 || iy >= g.h_in as i64 {
                                continue;
                            }
                            for ox in 0..g.w_out {
                                let ix = (ox * stride + kx) as i64 - pad as i64;
                                if ix < 0 || ix >= g.w_in as i64 {
                                    continue;
                                }
                                acc += dy_plane[oy * g.w_out + ox]
                                    * x_plane[iy as usize * g.w_in + ix as usize];
                            }
                        }
                    }
                    dw[((co * g.c_in + ci) * k + ky) * k + kx] += acc;
                }
            }
        }
    }
}

pub fn conv2d_bwd_b<S: Scalar>(dy: &[S], g: &ConvGeom, db: &mut [S]) {
    for co in 0..g.c_out {
        let plane = &dy[co * g.h_out * g.w_out..][..g.h_out * g.w_out];
        let mut acc = S::ZERO;
        for v in plane {
            acc += *v;
        }
        db[co] += acc;
    }
}

/// Geometry of a transposed convolution: x is (c_in, h_in, w_in), w is
/// (c_in, c_out, k, k), output is (c_out, (h_in-1)*s - 2p + k, ...).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TconvGeom {
    pub c_in: usize,
    pub h_in: usize,
    pub w_in: usize,
    pub c_out: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub h_out: usize,
    pub w_out: usize,
}

impl TconvGeom {
    pub fn new(
        c_in: usize,
        h_in: usize,
        w_in: usize,
        c_out: usize,
        k: usize,
        stride: usize,
        pad: usize,
    ) -> Result<Self> {
        if stride == 0 {
            return Err(Error::invalid("transposed_conv2d: stride must be >= 1"));
        }
        let h_out = (h_in as i64 - 1) * stride as i64 - 2 * pad as i64 + k as i64;
        let w_out = (w_in as i64 - 1) * stride as i64 - 2 * pad as i64 + k as i64;
        if h_in == 0 || w_in == 0 || h_out <= 0 || w_out <= 0 {
            return Err(Error::shape(
                "transposed_conv2d",
                "input large enough for a positive output size",
                format!("{h_in}x{w_in}"),
            ));
        }
        Ok(TconvGeom {
            c_in,
            h_in,
            w_in,
            c_out,
            k,
            stride,
            pad,
            h_out: h_out as usize,
            w_out: w_out as usize,
        })
    }

    pub fn x_len(&self) -> usize {
        self.c_in * self.h_in * self.w_in
    }
    pub fn w_len(&self) -> usize {
        self.c_in * self.c_out * self.k * self.k
    }
    pub fn out_len(&self) -> usize {
        self.c_out * self.h_out * self.w_out
    }
}

/// Input-index interval such that `i*stride + kd - pad` lands in [0, out_dim).
#[inline]
fn scatter_range(in_dim: usize, out_dim: usize, kd: usize, pad: usize, stride: usize) -> (usize, usize) {
    let lo_num = pad as i64 - kd as i64;
    let lo = lo_num.max(0).div_euclid(stride as i64) as usize
        + usize::from(lo_num > 0 && lo_num.rem_euclid(stride as i64) != 0);
    let hi_num = out_dim as i64 + pad as i64 - kd as i64; // exclusive bound on i*stride
    let hi = if hi_num <= 0 { 0 } else { ((hi_num - 1).div_euclid(stride as i64) + 1) as usize };
    (lo.min(in_dim), hi.min(in_dim))
}

pub fn tconv2d_fwd<S: Scalar>(x: &[S], w: &[S], b: &[S], g: &TconvGeom, out: &mut [S]) {
    debug_assert_eq!(out.len(), g.out_len());
    for co in 0..g.c_out {
        out[co * g.h_out * g.w_out..][..g.h_out * g.w_out].fill(b[co]);
    }
    for ci in 0..g.c_in {
        let x_plane = &x[ci * g.h_in * g.w_in..][..g.h_in * g.w_in];
        for co in 0..g.c_out {
            let out_plane_base = co * g.h_out * g.w_out;
            for ky in 0..g.k {
                for kx in 0..g.k {
                    let wv = w[((ci * g.c_out + co) * g.k + ky) * g.k + kx];
                    let (iy_lo, iy_hi) = scatter_range(g.h_in, g.h_out, ky, g.pad, g.stride);
                    let (ix_lo, ix_hi) = scatter_range(g.w_in, g.w_out, kx, g.pad, g.stride);
                    for iy in iy_lo..iy_hi {
                        let oy = iy * g.stride + ky - g.pad;
                        let row = out_plane_base + oy * g.w_out;
                        let xi_row = iy * g.w_in;
                        for ix in ix_lo..ix_hi {
                            let ox = ix * g.stride + kx - g.pad;
                            out[row + ox] += wv * x_plane[xi_row + ix];
                        }
                    }
                }
            }
        }
    }
}

pub fn tconv2d_bwd_x<S: Scalar>(dy: &[S], w: &[S], g: &TconvGeom, dx: &mut [S]) {
    for ci in 0..g.c_in {
        let dx_plane_base = ci * g.h_in * g.w_in;
        for co in 0..g.c_out {
            let dy_plane = &dy[co * g.h_out * g.w_out..][..g.h_out * g.w_out];
            for ky in 0..g.k {
                for kx in 0..g.k {
                    let wv = w[((ci * g.c_out + co) * g.k + ky) * g.k + kx];
                    let (iy_lo, iy_hi) = scatter_range(g.h_in, g.h_out, ky, g.pad, g.stride);
                    let (ix_lo, ix_hi) = scatter_range(g.w_in, g.w_out, kx, g.pad, g.stride);
                    for iy in iy_lo..iy_hi {
                        let oy = iy * g.stride + ky - g.pad;
                        let dy_row = oy * g.w_out;
                        let dx_row = dx_plane_base + iy * g.w_in;
                        for ix in ix_lo..ix_hi {
                            let ox = ix * g.stride + kx - g.pad;
                            dx[dx_row + ix] += wv * dy_plane[dy_row + ox];
                        }
                    }
                }
            }
        }
    }
}

pub fn tconv2d_bwd_w<S: Scalar>(dy: &[S], x: &[S], g: &TconvGeom, dw: &mut [S]) {
    for ci in 0..g.c_in {
        let x_plane = &x[ci * g.h_in * g.w_in..][..g.h_in * g.w_in];
        for co in 0..g.c_out {
            let dy_plane = &dy[co * g.h_out * g.w_out..][..g.h_out * g.w_out];
            for ky in 0..g.k {
                for kx in 0..g.k {
                    let (iy_lo, iy_hi) = scatter_range(g.h_in, g.h_out, ky, g.pad, g.stride);
                    let (ix_lo, ix_hi) = scatter_range(g.w_in, g.w_out, kx, g.pad, g.stride);
                    let mut acc = S::ZERO;
                    for iy in iy_lo..iy_hi {
                        let oy = iy * g.stride + ky - g.pad;
                        let dy_row = oy * g.w_out;
                        let x_row = iy * g.w_in;
                        for ix in ix_lo..ix_hi {
                            let ox = ix * g.stride + kx - g.pad;
                            acc += x_plane[x_row + ix] * dy_plane[dy_row + ox];
                        }
                    }
                    dw[((ci * g.c_out + co) * g.k + ky) * g.k + kx] += acc;
                }
            }
        }
    }
}

pub fn tconv2d_bwd_b<S: Scalar>(dy: &[S], g: &TconvGeom, db: &mut [S]) {
    for co in 0..g.c_out {
        let plane = &dy[co * g.h_out * g.w_out..][..g.h_out * g.w_out];
        let mut acc = S::ZERO;
        for v in plane {
            acc += *v;
        }
        db[co] += acc;
    }
}

/// 2x2 max pooling with stride 2. Odd trailing rows/columns are handled by
/// replicating the edge (indices clamp to the last row/column), and ties keep
/// the first candidate in row-major window order. Returns the argmax (flat
/// input index) per output cell for the backward pass.
pub fn maxpool2_fwd<S: Scalar>(
    x: &[S],
    c: usize,
    h: usize,
    w: usize,
    out: &mut [S],
    argmax: &mut [u32],
) {
    let h_out = (h + 1) / 2;
    let w_out = (w + 1) / 2;
    for ci in 0..c {
        let base = ci * h * w;
        for oy in 0..h_out {
            for ox in 0..w_out {
                let mut best_i = 0u32;
                let mut best_v = None::<S>;
                for dy in 0..2 {
                    for dx in 0..2 {
                        let iy = (2 * oy + dy).min(h - 1);
                        let ix = (2 * ox + dx).min(w - 1);
                        let idx = (base + iy * w + ix) as u32;
                        let v = x[idx as usize];
                        // strict > keeps the first (row-major) candidate on ties
                        if best_v.map_or(true, |bv| v > bv) {
                            best_v = Some(v);
                            best_i = idx;
                        }
                    }
                }
                let o = (ci * h_out + oy) * w_out + ox;
                out[o] = best_v.unwrap();
                argmax[o] = best_i;
            }
        }
    }
}

/// y = W x + b with W of shape (m, n).
pub fn fc_fwd<S: Scalar>(x: &[S], w: &[S], b: &[S], m: usize, n: usize, out: &mut [S]) {
    for i in 0..m {
        let row = &w[i * n..][..n];
        let mut acc = b[i];
        for (wv, xv) in row.iter().zip(x) {
            acc += *wv * *xv;
        }
        out[i] = acc;
    }
}

pub fn fc_bwd<S: Scalar>(
    dy: &[S],
    x: &[S],
    w: &[S],
    m: usize,
    n: usize,
    dx: Option<&mut [S]>,
    dw: Option<&mut [S]>,
    db: Option<&mut [S]>,
) {
    if let Some(dx) = dx {
        for i in 0..m {
            let g = dy[i];
            let row = &w[i * n..][..n];
            for (d, wv) in dx.iter_mut().zip(row) {
                *d += g * *wv;
            }
        }
    }
    if let Some(dw) = dw {
        for i in 0..m {
            let g = dy[i];
            let row = &mut dw[i * n..][..n];
            for (d, xv) in row.iter_mut().zip(x) {
                *d += g * *xv;
            }
        }
    }
    if let Some(db) = db {
        for i in 0..m {
            db[i] += dy[i];
        }
    }
}

/// Numerically stable logistic function.
#[inline]
pub fn sigmoid_one<S: Scalar>(x: S) -> S {
    if x >= S::ZERO {
        S::ONE / (S::ONE + (-x).exp())
    } else {
        let e = x.exp();
        e / (S::ONE + e)
    }
}
