//! Direct 2D convolution kernels over `[channels, height, width]` tensors.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub in_channels: usize,
    pub out_channels: usize,
    pub in_size: (usize, usize),
    pub out_size: (usize, usize),
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeometry {
    /// Shape rules of a strided convolution. The padded extent minus the
    /// kernel must be a multiple of the stride.
    pub fn conv(input: &[usize], weight: &[usize], stride: usize, pad: usize) -> Result<Self> {
        let [cin, h, w] = *input else {
            return Err(Error::shape("conv2d input", &[0, 0, 0], input));
        };
        let [cout, wcin, k, k2] = *weight else {
            return Err(Error::shape("conv2d weight", &[0, cin, 0, 0], weight));
        };
        if wcin != cin || k != k2 || k == 0 || stride == 0 || cin == 0 || cout == 0 || h == 0 || w == 0 {
            return Err(Error::shape("conv2d weight", &[cout, cin, k, k], weight));
        }
        let span = |n: usize| -> Option<usize> {
            let padded = n + 2 * pad;
            (padded >= k && (padded - k).is_multiple_of(stride)).then(|| (padded - k) / stride + 1)
        };
        match (span(h), span(w)) {
            (Some(oh), Some(ow)) => Ok(Self {
                in_channels: cin,
                out_channels: cout,
                in_size: (h, w),
                out_size: (oh, ow),
                kernel: k,
                stride,
                pad,
            }),
            _ => Err(Error::shape("conv2d spatial", &[cin, h - h % 2, w - w % 2], input)),
        }
    }

    /// Shape rules of a transposed convolution; weight is
    /// `[in_channels, out_channels, k, k]`.
    pub fn transposed(input: &[usize], weight: &[usize], stride: usize, pad: usize) -> Result<Self> {
        let [cin, h, w] = *input else {
            return Err(Error::shape("conv_transpose2d input", &[0, 0, 0], input));
        };
        let [wcin, cout, k, k2] = *weight else {
            return Err(Error::shape("conv_transpose2d weight", &[cin, 0, 0, 0], weight));
        };
        if wcin != cin || k != k2 || stride == 0 || h == 0 || w == 0 {
            return Err(Error::shape("conv_transpose2d weight", &[cin, cout, k, k], weight));
        }
        let span = |n: usize| ((n - 1) * stride + k).checked_sub(2 * pad);
        match (span(h), span(w)) {
            (Some(oh), Some(ow)) if oh > 0 && ow > 0 => Ok(Self {
                in_channels: cin,
                out_channels: cout,
                in_size: (h, w),
                out_size: (oh, ow),
                kernel: k,
                stride,
                pad,
            }),
            _ => Err(Error::shape("conv_transpose2d spatial", &[cin, h, w], input)),
        }
    }

    pub fn weight_len(&self) -> usize {
        self.in_channels * self.out_channels * self.kernel * self.kernel
    }

    pub fn out_len(&self) -> usize {
        self.out_channels * self.out_size.0 * self.out_size.1
    }

    pub fn in_len(&self) -> usize {
        self.in_channels * self.in_size.0 * self.in_size.1
    }

    /// Output positions `o` with `o * stride + tap - pad` inside `[0, n)`.
    #[inline]
    fn valid_outputs(&self, tap: usize, n_in: usize, n_out: usize) -> (usize, usize) {
        // o*s + tap - pad >= 0  and  < n_in
        let s = self.stride;
        let lo = if tap >= self.pad { 0 } else { (self.pad - tap).div_ceil(s) };
        let hi_excl = if n_in + self.pad > tap { ((n_in + self.pad - tap - 1) / s + 1).min(n_out) } else { 0 };
        (lo, hi_excl.max(lo))
    }
}

/// `out[co] = bias[co] + sum_ci,ky,kx w[co,ci,ky,kx] * in[ci, o*s+ky-p, ...]`.
pub fn conv2d_forward(g: &ConvGeometry, input: &[f64], weight: &[f64], bias: Option<&[f64]>) -> Vec<f64> {
    let (h, w) = g.in_size;
    let (oh, ow) = g.out_size;
    let k = g.kernel;
    let mut out = vec![0.0; g.out_len()];
    for co in 0..g.out_channels {
        let o_plane = &mut out[co * oh * ow..(co + 1) * oh * ow];
        if let Some(b) = bias {
            o_plane.iter_mut().for_each(|v| *v = b[co]);
        }
        for ci in 0..g.in_channels {
            let i_plane = &input[ci * h * w..(ci + 1) * h * w];
            for ky in 0..k {
                let (oy0, oy1) = g.valid_outputs(ky, h, oh);
                for kx in 0..k {
                    let wv = weight[((co * g.in_channels + ci) * k + ky) * k + kx];
                    if wv == 0.0 {
                        continue;
                    }
                    let (ox0, ox1) = g.valid_outputs(kx, w, ow);
                    for oy in oy0..oy1 {
                        let iy = oy * g.stride + ky - g.pad;
                        let row = &i_plane[iy * w..(iy + 1) * w];
                        let orow = &mut o_plane[oy * ow..(oy + 1) * ow];
                        for ox in ox0..ox1 {
                            orow[ox] += wv * row[ox * g.stride + kx - g.pad];
                        }
                    }
                }
            }
        }
    }
    out
}

/// Returns `(d input, d weight, d bias)`.
pub fn conv2d_backward(
    g: &ConvGeometry,
    input: &[f64],
    weight: &[f64],
    grad_out: &[f64],
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let (h, w) = g.in_size;
    let (oh, ow) = g.out_size;
    let k = g.kernel;
    let mut gi = vec![0.0; g.in_len()];
    let mut gw = vec![0.0; g.weight_len()];
    let mut gb = vec![0.0; g.out_channels];
    for co in 0..g.out_channels {
        let go = &grad_out[co * oh * ow..(co + 1) * oh * ow];
        gb[co] = go.iter().sum();
        for ci in 0..g.in_channels {
            let i_plane = &input[ci * h * w..(ci + 1) * h * w];
            let gi_plane = &mut gi[ci * h * w..(ci + 1) * h * w];
            for ky in 0..k {
                let (oy0, oy1) = g.valid_outputs(ky, h, oh);
                for kx in 0..k {
                    let widx = ((co * g.in_channels + ci) * k + ky) * k + kx;
                    let wv = weight[widx];
                    let (ox0, ox1) = g.valid_outputs(kx, w, ow);
                    let mut acc = 0.0;
                    for oy in oy0..oy1 {
                        let iy = oy * g.stride + ky - g.pad;
                        for ox in ox0..ox1 {
                            let ix = ox * g.stride + kx - g.pad;
                            let gov = go[oy * ow + ox];
                            acc += gov * i_plane[iy * w + ix];
                            gi_plane[iy * w + ix] += gov * wv;
                        }
                    }
                    gw[widx] += acc;
                }
            }
        }
    }
    (gi, gw, gb)
}

/// Scatter form of the transposed convolution (no bias).
pub fn conv_transpose2d_forward(g: &ConvGeometry, input: &[f64], weight: &[f64]) -> Vec<f64> {
    let (h, w) = g.in_size;
    let (oh, ow) = g.out_size;
    let k = g.kernel;
    let mut out = vec![0.0; g.out_len()];
    for ci in 0..g.in_channels {
        let i_plane = &input[ci * h * w..(ci + 1) * h * w];
        for co in 0..g.out_channels {
            let o_plane = &mut out[co * oh * ow..(co + 1) * oh * ow];
            for ky in 0..k {
                // output row oy = iy*s + ky - pad must lie in [0, oh)
                let (iy0, iy1) = g.valid_outputs(ky, oh, h);
                for kx in 0..k {
                    let wv = weight[((ci * g.out_channels + co) * k + ky) * k + kx];
                    if wv == 0.0 {
                        continue;
                    }
                    let (ix0, ix1) = g.valid_outputs(kx, ow, w);
                    for iy in iy0..iy1 {
                        let oy = iy * g.stride + ky - g.pad;
                        let irow = &i_plane[iy * w..(iy + 1) * w];
                        let orow = &mut o_plane[oy * ow..(oy + 1) * ow];
                        for ix in ix0..ix1 {
                            orow[ix * g.stride + kx - g.pad] += wv * irow[ix];
                        }
                    }
                }
            }
        }
    }
    out
}

/// Returns `(d input, d weight)`.
pub fn conv_transpose2d_backward(
    g: &ConvGeometry,
    input: &[f64],
    weight: &[f64],
    grad_out: &[f64],
) -> (Vec<f64>, Vec<f64>) {
    let (h, w) = g.in_size;
    let (oh, ow) = g.out_size;
    let k = g.kernel;
    let mut gi = vec![0.0; g.in_len()];
    let mut gw = vec![0.0; g.weight_len()];
    for ci in 0..g.in_channels {
        let i_plane = &input[ci * h * w..(ci + 1) * h * w];
        let gi_plane = &mut gi[ci * h * w..(ci + 1) * h * w];
        for co in 0..g.out_channels {
            let go = &grad_out[co * oh * ow..(co + 1) * oh * ow];
            for ky in 0..k {
                let (iy0, iy1) = g.valid_outputs(ky, oh, h);
                for kx in 0..k {
                    let widx = ((ci * g.out_channels + co) * k + ky) * k + kx;
                    let wv = weight[widx];
                    let (ix0, ix1) = g.valid_outputs(kx, ow, w);
                    let mut acc = 0.0;
                    for iy in iy0..iy1 {
                        let oy = iy * g.stride + ky - g.pad;
                        for ix in ix0..ix1 {
                            let gov = go[oy * ow + ix * g.stride + kx - g.pad];
                            acc += gov * i_plane[iy * w + ix];
                            gi_plane[iy * w + ix] += gov * wv;
                        }
                    }
                    gw[widx] += acc;
                }
            }
        }
    }
    (gi, gw)
}
