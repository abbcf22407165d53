//! 2-D convolution on Gaussian activations (NCHW input, OIHW weights).
//!
//! Each output element is a dense reduction over its receptive field, so the
//! dense moment equations apply per window. Padded positions are
//! deterministic zeros and contribute nothing.

use crate::error::{PfpError, Result};
use crate::ops::dense::{finish, require_kind};
use crate::ops::weights::GaussianWeights;
use crate::tensor::{GaussianTensor, MomentKind, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub stride: usize,
    pub padding: usize,
}

impl Default for ConvGeometry {
    fn default() -> Self {
        ConvGeometry {
            stride: 1,
            padding: 0,
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct ConvDims {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub o: usize,
    pub kh: usize,
    pub kw: usize,
    pub oh: usize,
    pub ow: usize,
    pub stride: usize,
    pub pad: usize,
}

pub(crate) fn conv_dims(x_shape: &[usize], w: &GaussianWeights, g: ConvGeometry) -> Result<ConvDims> {
    if x_shape.len() != 4 {
        return Err(PfpError::shape(format!("conv input must be NCHW, got {x_shape:?}")));
    }
    if w.shape.len() != 4 || w.shape[1] != x_shape[1] {
        return Err(PfpError::shape(format!(
            "conv weights {:?} do not fit input {:?}",
            w.shape, x_shape
        )));
    }
    output_dims(x_shape, &w.shape, g)
}

/// Output geometry for an NCHW input and OIHW kernel.
pub(crate) fn output_dims(x_shape: &[usize], w_shape: &[usize], g: ConvGeometry) -> Result<ConvDims> {
    let (n, c, h, wd) = (x_shape[0], x_shape[1], x_shape[2], x_shape[3]);
    let (o, kh, kw) = (w_shape[0], w_shape[2], w_shape[3]);
    if g.stride == 0 {
        return Err(PfpError::UnsupportedGeometry("stride must be positive".into()));
    }
    if g.padding >= kh || g.padding >= kw {
        return Err(PfpError::UnsupportedGeometry(format!(
            "padding {} must be smaller than kernel {kh}x{kw}",
            g.padding
        )));
    }
    if h + 2 * g.padding < kh || wd + 2 * g.padding < kw {
        return Err(PfpError::UnsupportedGeometry(format!(
            "kernel {kh}x{kw} larger than padded input {h}x{wd}"
        )));
    }
    Ok(ConvDims {
        n,
        c,
        h,
        w: wd,
        o,
        kh,
        kw,
        oh: (h + 2 * g.padding - kh) / g.stride + 1,
        ow: (wd + 2 * g.padding - kw) / g.stride + 1,
        stride: g.stride,
        pad: g.padding,
    })
}

/// Visits every in-bounds (input index, weight index) pair of the window that
/// produces output `(n, o, y, x)`, in (c, ky, kx) order.
#[inline]
pub(crate) fn for_each_tap(d: &ConvDims, n: usize, o: usize, y: usize, x: usize, mut f: impl FnMut(usize, usize)) {
    for c in 0..d.c {
        for ky in 0..d.kh {
            let iy = (y * d.stride + ky) as isize - d.pad as isize;
            if iy < 0 || iy >= d.h as isize {
                continue;
            }
            for kx in 0..d.kw {
                let ix = (x * d.stride + kx) as isize - d.pad as isize;
                if ix < 0 || ix >= d.w as isize {
                    continue;
                }
                let xi = ((n * d.c + c) * d.h + iy as usize) * d.w + ix as usize;
                let wi = ((o * d.c + c) * d.kh + ky) * d.kw + kx;
                f(xi, wi);
            }
        }
    }
}

fn conv_generic(
    d: &ConvDims,
    w: &GaussianWeights,
    out_kind: MomentKind,
    mut term: impl FnMut(usize, usize) -> (f32, f32),
) -> GaussianTensor {
    let total = d.n * d.o * d.oh * d.ow;
    let mut mean = vec![0.0f32; total];
    let mut var = vec![0.0f32; total];
    let mut idx = 0;
    for n in 0..d.n {
        for o in 0..d.o {
            for y in 0..d.oh {
                for x in 0..d.ow {
                    let mut acc_m = 0.0f32;
                    let mut acc_v = 0.0f32;
                    for_each_tap(d, n, o, y, x, |xi, wi| {
                        let (m, v) = term(xi, wi);
                        acc_m += m;
                        acc_v += v;
                    });
                    mean[idx] = acc_m;
                    var[idx] = acc_v;
                    idx += 1;
                }
            }
        }
    }
    finish(
        vec![d.n, d.o, d.oh, d.ow],
        mean,
        var,
        &w.bias,
        d.o,
        d.oh * d.ow,
        out_kind,
    )
}

/// Joint convolution on second raw moments.
pub fn conv2d(
    x: &GaussianTensor,
    w: &GaussianWeights,
    geometry: ConvGeometry,
    out_kind: MomentKind,
) -> Result<GaussianTensor> {
    require_kind(x.kind(), MomentKind::MeanSecondRawMoment, "input")?;
    require_kind(w.kind, MomentKind::MeanSecondRawMoment, "weights")?;
    let d = conv_dims(x.shape(), w, geometry)?;
    let (xm, xe) = (x.mean(), x.spread());
    Ok(conv_generic(&d, w, out_kind, |xi, wi| {
        let p = w.mean[wi] * xm[xi];
        (p, w.spread[wi] * xe[xi] - p * p)
    }))
}

/// First-layer convolution: deterministic input, weight variances.
pub fn conv2d_first(
    x: &Tensor,
    w: &GaussianWeights,
    geometry: ConvGeometry,
    out_kind: MomentKind,
) -> Result<GaussianTensor> {
    require_kind(w.kind, MomentKind::MeanVariance, "first-layer weights")?;
    let d = conv_dims(x.shape(), w, geometry)?;
    let xs = x.data();
    Ok(conv_generic(&d, w, out_kind, |xi, wi| {
        let v = xs[xi];
        (w.mean[wi] * v, w.spread[wi] * v * v)
    }))
}
