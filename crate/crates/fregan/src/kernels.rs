//! Direct convolution kernels shared by the forward pass and the tape
//! backward pass. Convolution is cross-correlation: kernels are not flipped.
//!
//! All functions work on flat row-major buffers. Weight layout is
//! (out_channels, in_channels, k_h, k_w) for both directions; the transposed
//! direction maps in_channels to out_channels by scattering each input pixel
//! through the kernel.

// Geometry constructors take the full dimension tuple, and the inner loops
// index several parallel rows at shared offsets; both are clearer as written.
#![allow(clippy::too_many_arguments, clippy::needless_range_loop)]

use crate::error::{Error, Result};
use crate::tensor::Element;
use crate::threads::for_each_plane;

/// Resolved geometry of one convolution application.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub batch: usize,
    pub in_c: usize,
    pub out_c: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub k_h: usize,
    pub k_w: usize,
    pub stride: usize,
    pub pad: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeom {
    /// Geometry of a strided convolution: out = floor((in + 2p - k) / s) + 1.
    pub fn conv(
        batch: usize,
        in_c: usize,
        out_c: usize,
        in_h: usize,
        in_w: usize,
        k_h: usize,
        k_w: usize,
        stride: usize,
        pad: usize,
    ) -> Result<ConvGeom> {
        if stride == 0 {
            return Err(Error::Config("convolution stride must be at least 1".into()));
        }
        if k_h == 0 || k_w == 0 {
            return Err(Error::Config("kernel extents must be positive".into()));
        }
        let out_h = conv_extent(in_h, k_h, stride, pad, "height")?;
        let out_w = conv_extent(in_w, k_w, stride, pad, "width")?;
        Ok(ConvGeom { batch, in_c, out_c, in_h, in_w, k_h, k_w, stride, pad, out_h, out_w })
    }

    /// Geometry of a transposed convolution: out = (in - 1) * s - 2p + k.
    pub fn transpose(
        batch: usize,
        in_c: usize,
        out_c: usize,
        in_h: usize,
        in_w: usize,
        k_h: usize,
        k_w: usize,
        stride: usize,
        pad: usize,
    ) -> Result<ConvGeom> {
        if stride == 0 {
            return Err(Error::Config("convolution stride must be at least 1".into()));
        }
        if k_h == 0 || k_w == 0 {
            return Err(Error::Config("kernel extents must be positive".into()));
        }
        let out_h = transpose_extent(in_h, k_h, stride, pad, "height")?;
        let out_w = transpose_extent(in_w, k_w, stride, pad, "width")?;
        Ok(ConvGeom { batch, in_c, out_c, in_h, in_w, k_h, k_w, stride, pad, out_h, out_w })
    }
}

fn conv_extent(input: usize, k: usize, stride: usize, pad: usize, axis: &'static str) -> Result<usize> {
    let padded = input + 2 * pad;
    if padded < k {
        return Err(Error::Dimension {
            axis,
            detail: format!("kernel {k} exceeds padded input extent {padded}"),
        });
    }
    Ok((padded - k) / stride + 1)
}

fn transpose_extent(
    input: usize,
    k: usize,
    stride: usize,
    pad: usize,
    axis: &'static str,
) -> Result<usize> {
    let grown = (input - 1) * stride + k;
    if grown <= 2 * pad {
        return Err(Error::Dimension {
            axis,
            detail: format!("padding {pad} consumes the whole output extent {grown}"),
        });
    }
    Ok(grown - 2 * pad)
}

/// First index i in [0, ..) with i * stride + k >= pad.
#[inline]
fn span_lo(k: usize, pad: usize, stride: usize) -> usize {
    if k >= pad {
        0
    } else {
        (pad - k).div_ceil(stride)
    }
}

/// First index i with i * stride + k - pad >= extent, capped at limit.
#[inline]
fn span_hi(k: usize, pad: usize, stride: usize, extent: usize, limit: usize) -> usize {
    let bound = extent + pad;
    if k >= bound {
        0
    } else {
        (bound - k).div_ceil(stride).min(limit)
    }
}

/// y[n, co, oh, ow] = b[co] + sum over ci, kh, kw of
/// x[n, ci, oh*s + kh - p, ow*s + kw - p] * w[co, ci, kh, kw].
pub fn conv2d_forward<T: Element>(g: &ConvGeom, x: &[T], w: &[T], b: &[T], y: &mut [T]) {
    let (in_plane, out_plane) = (g.in_h * g.in_w, g.out_h * g.out_w);
    let kernel = g.k_h * g.k_w;
    for_each_plane(y, out_plane, |plane, y_plane| {
        let (n, co) = (plane / g.out_c, plane % g.out_c);
        y_plane.fill(b[co]);
        let x_image = &x[n * g.in_c * in_plane..][..g.in_c * in_plane];
        let w_filter = &w[co * g.in_c * kernel..][..g.in_c * kernel];
        for ci in 0..g.in_c {
            let x_chan = &x_image[ci * in_plane..][..in_plane];
            for kh in 0..g.k_h {
                let oh_lo = span_lo(kh, g.pad, g.stride);
                let oh_hi = span_hi(kh, g.pad, g.stride, g.in_h, g.out_h);
                for kw in 0..g.k_w {
                    let w_val = w_filter[ci * kernel + kh * g.k_w + kw];
                    if w_val == T::zero() {
                        continue;
                    }
                    let ow_lo = span_lo(kw, g.pad, g.stride);
                    let ow_hi = span_hi(kw, g.pad, g.stride, g.in_w, g.out_w);
                    for oh in oh_lo..oh_hi {
                        let ih = oh * g.stride + kh - g.pad;
                        let x_row = &x_chan[ih * g.in_w..][..g.in_w];
                        let y_row = &mut y_plane[oh * g.out_w..][..g.out_w];
                        let mut iw = ow_lo * g.stride + kw - g.pad;
                        for ow in ow_lo..ow_hi {
                            y_row[ow] = y_row[ow] + w_val * x_row[iw];
                            iw += g.stride;
                        }
                    }
                }
            }
        }
    });
}

/// Gradient of conv2d_forward with respect to its input.
pub fn conv2d_backward_input<T: Element>(g: &ConvGeom, w: &[T], gy: &[T], gx: &mut [T]) {
    let (in_plane, out_plane) = (g.in_h * g.in_w, g.out_h * g.out_w);
    let kernel = g.k_h * g.k_w;
    for_each_plane(gx, in_plane, |plane, gx_plane| {
        let (n, ci) = (plane / g.in_c, plane % g.in_c);
        gx_plane.fill(T::zero());
        let gy_image = &gy[n * g.out_c * out_plane..][..g.out_c * out_plane];
        for co in 0..g.out_c {
            let gy_chan = &gy_image[co * out_plane..][..out_plane];
            let w_chan = &w[(co * g.in_c + ci) * kernel..][..kernel];
            for kh in 0..g.k_h {
                let oh_lo = span_lo(kh, g.pad, g.stride);
                let oh_hi = span_hi(kh, g.pad, g.stride, g.in_h, g.out_h);
                for kw in 0..g.k_w {
                    let w_val = w_chan[kh * g.k_w + kw];
                    if w_val == T::zero() {
                        continue;
                    }
                    let ow_lo = span_lo(kw, g.pad, g.stride);
                    let ow_hi = span_hi(kw, g.pad, g.stride, g.in_w, g.out_w);
                    for oh in oh_lo..oh_hi {
                        let ih = oh * g.stride + kh - g.pad;
                        let gy_row = &gy_chan[oh * g.out_w..][..g.out_w];
                        let gx_row = &mut gx_plane[ih * g.in_w..][..g.in_w];
                        let mut iw = ow_lo * g.stride + kw - g.pad;
                        for ow in ow_lo..ow_hi {
                            gx_row[iw] = gx_row[iw] + w_val * gy_row[ow];
                            iw += g.stride;
                        }
                    }
                }
            }
        }
    });
}

/// Gradients of conv2d_forward with respect to weights and bias.
pub fn conv2d_backward_params<T: Element>(
    g: &ConvGeom,
    x: &[T],
    gy: &[T],
    gw: &mut [T],
    gb: &mut [T],
) {
    let (in_plane, out_plane) = (g.in_h * g.in_w, g.out_h * g.out_w);
    let kernel = g.k_h * g.k_w;
    let filter = g.in_c * kernel;
    for_each_plane(gw, filter, |co, gw_filter| {
        gw_filter.fill(T::zero());
        for n in 0..g.batch {
            let x_image = &x[n * g.in_c * in_plane..][..g.in_c * in_plane];
            let gy_chan = &gy[(n * g.out_c + co) * out_plane..][..out_plane];
            for ci in 0..g.in_c {
                let x_chan = &x_image[ci * in_plane..][..in_plane];
                for kh in 0..g.k_h {
                    let oh_lo = span_lo(kh, g.pad, g.stride);
                    let oh_hi = span_hi(kh, g.pad, g.stride, g.in_h, g.out_h);
                    for kw in 0..g.k_w {
                        let ow_lo = span_lo(kw, g.pad, g.stride);
                        let ow_hi = span_hi(kw, g.pad, g.stride, g.in_w, g.out_w);
                        let mut acc = T::zero();
                        for oh in oh_lo..oh_hi {
                            let ih = oh * g.stride + kh - g.pad;
                            let x_row = &x_chan[ih * g.in_w..][..g.in_w];
                            let gy_row = &gy_chan[oh * g.out_w..][..g.out_w];
                            let mut iw = ow_lo * g.stride + kw - g.pad;
                            for ow in ow_lo..ow_hi {
                                acc = acc + gy_row[ow] * x_row[iw];
                                iw += g.stride;
                            }
                        }
                        let slot = ci * kernel + kh * g.k_w + kw;
                        gw_filter[slot] = gw_filter[slot] + acc;
                    }
                }
            }
        }
    });
    for (co, gb_slot) in gb.iter_mut().enumerate() {
        let mut acc = T::zero();
        for n in 0..g.batch {
            let gy_chan = &gy[(n * g.out_c + co) * out_plane..][..out_plane];
            for &v in gy_chan {
                acc = acc + v;
            }
        }
        *gb_slot = acc;
    }
}

/// y[n, co, h*s + kh - p, w*s + kw - p] += x[n, ci, h, w] * wt[co, ci, kh, kw],
/// plus bias. Adjoint of conv2d_forward over the spatial map.
pub fn conv_transpose2d_forward<T: Element>(g: &ConvGeom, x: &[T], w: &[T], b: &[T], y: &mut [T]) {
    let (in_plane, out_plane) = (g.in_h * g.in_w, g.out_h * g.out_w);
    let kernel = g.k_h * g.k_w;
    for_each_plane(y, out_plane, |plane, y_plane| {
        let (n, co) = (plane / g.out_c, plane % g.out_c);
        y_plane.fill(b[co]);
        let x_image = &x[n * g.in_c * in_plane..][..g.in_c * in_plane];
        let w_filter = &w[co * g.in_c * kernel..][..g.in_c * kernel];
        for ci in 0..g.in_c {
            let x_chan = &x_image[ci * in_plane..][..in_plane];
            for kh in 0..g.k_h {
                let h_lo = span_lo(kh, g.pad, g.stride);
                let h_hi = span_hi(kh, g.pad, g.stride, g.out_h, g.in_h);
                for kw in 0..g.k_w {
                    let w_val = w_filter[ci * kernel + kh * g.k_w + kw];
                    if w_val == T::zero() {
                        continue;
                    }
                    let w_lo = span_lo(kw, g.pad, g.stride);
                    let w_hi = span_hi(kw, g.pad, g.stride, g.out_w, g.in_w);
                    for h in h_lo..h_hi {
                        let oh = h * g.stride + kh - g.pad;
                        let x_row = &x_chan[h * g.in_w..][..g.in_w];
                        let y_row = &mut y_plane[oh * g.out_w..][..g.out_w];
                        let mut ow = w_lo * g.stride + kw - g.pad;
                        for wi in w_lo..w_hi {
                            y_row[ow] = y_row[ow] + w_val * x_row[wi];
                            ow += g.stride;
                        }
                    }
                }
            }
        }
    });
}

/// Gradient of conv_transpose2d_forward with respect to its input.
pub fn conv_transpose2d_backward_input<T: Element>(g: &ConvGeom, w: &[T], gy: &[T], gx: &mut [T]) {
    let (in_plane, out_plane) = (g.in_h * g.in_w, g.out_h * g.out_w);
    let kernel = g.k_h * g.k_w;
    for_each_plane(gx, in_plane, |plane, gx_plane| {
        let (n, ci) = (plane / g.in_c, plane % g.in_c);
        gx_plane.fill(T::zero());
        let gy_image = &gy[n * g.out_c * out_plane..][..g.out_c * out_plane];
        for co in 0..g.out_c {
            let gy_chan = &gy_image[co * out_plane..][..out_plane];
            let w_chan = &w[(co * g.in_c + ci) * kernel..][..kernel];
            for kh in 0..g.k_h {
                let h_lo = span_lo(kh, g.pad, g.stride);
                let h_hi = span_hi(kh, g.pad, g.stride, g.out_h, g.in_h);
                for kw in 0..g.k_w {
                    let w_val = w_chan[kh * g.k_w + kw];
                    if w_val == T::zero() {
                        continue;
                    }
                    let w_lo = span_lo(kw, g.pad, g.stride);
                    let w_hi = span_hi(kw, g.pad, g.stride, g.out_w, g.in_w);
                    for h in h_lo..h_hi {
                        let oh = h * g.stride + kh - g.pad;
                        let gy_row = &gy_chan[oh * g.out_w..][..g.out_w];
                        let gx_row = &mut gx_plane[h * g.in_w..][..g.in_w];
                        let mut ow = w_lo * g.stride + kw - g.pad;
                        for wi in w_lo..w_hi {
                            gx_row[wi] = gx_row[wi] + w_val * gy_row[ow];
                            ow += g.stride;
                        }
                    }
                }
            }
        }
    });
}

/// Gradients of conv_transpose2d_forward with respect to weights and bias.
pub fn conv_transpose2d_backward_params<T: Element>(
    g: &ConvGeom,
    x: &[T],
    gy: &[T],
    gw: &mut [T],
    gb: &mut [T],
) {
    let (in_plane, out_plane) = (g.in_h * g.in_w, g.out_h * g.out_w);
    let kernel = g.k_h * g.k_w;
    let filter = g.in_c * kernel;
    for_each_plane(gw, filter, |co, gw_filter| {
        gw_filter.fill(T::zero());
        for n in 0..g.batch {
            let x_image = &x[n * g.in_c * in_plane..][..g.in_c * in_plane];
            let gy_chan = &gy[(n * g.out_c + co) * out_plane..][..out_plane];
            for ci in 0..g.in_c {
                let x_chan = &x_image[ci * in_plane..][..in_plane];
                for kh in 0..g.k_h {
                    let h_lo = span_lo(kh, g.pad, g.stride);
                    let h_hi = span_hi(kh, g.pad, g.stride, g.out_h, g.in_h);
                    for kw in 0..g.k_w {
                        let w_lo = span_lo(kw, g.pad, g.stride);
                        let w_hi = span_hi(kw, g.pad, g.stride, g.out_w, g.in_w);
                        let mut acc = T::zero();
                        for h in h_lo..h_hi {
                            let oh = h * g.stride + kh - g.pad;
                            let x_row = &x_chan[h * g.in_w..][..g.in_w];
                            let gy_row = &gy_chan[oh * g.out_w..][..g.out_w];
                            let mut ow = w_lo * g.stride + kw - g.pad;
                            for wi in w_lo..w_hi {
                                acc = acc + x_row[wi] * gy_row[ow];
                                ow += g.stride;
                            }
                        }
                        let slot = ci * kernel + kh * g.k_w + kw;
                        gw_filter[slot] = gw_filter[slot] + acc;
                    }
                }
            }
        }
    });
    for (co, gb_slot) in gb.iter_mut().enumerate() {
        let mut acc = T::zero();
        for n in 0..g.batch {
            let gy_chan = &gy[(n * g.out_c + co) * out_plane..][..out_plane];
            for &v in gy_chan {
                acc = acc + v;
            }
        }
        *gb_slot = acc;
    }
}
