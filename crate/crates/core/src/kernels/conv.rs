//! 2-D convolution (cross-correlation) with zero padding, forward and backward.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Shape contract for a convolution: channel counts, kernel size, stride,
/// and zero padding.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: (usize, usize),
    pub stride: (usize, usize),
    pub padding: (usize, usize),
}

impl ConvSpec {
    pub fn new(
        in_channels: usize,
        out_channels: usize,
        kernel: (usize, usize),
        stride: (usize, usize),
        padding: (usize, usize),
    ) -> Self {
        ConvSpec {
            in_channels,
            out_channels,
            kernel,
            stride,
            padding,
        }
    }

    /// Stride-1 convolution that preserves spatial shape (padding = kernel/2).
    /// Kernel sides must be odd for the shape to be exactly preserved.
    pub fn same(channels_in: usize, channels_out: usize, kernel: (usize, usize)) -> Self {
        ConvSpec {
            in_channels: channels_in,
            out_channels: channels_out,
            kernel,
            stride: (1, 1),
            padding: (kernel.0 / 2, kernel.1 / 2),
        }
    }

    /// Output spatial size: floor((S + 2p - k)/s) + 1 per side; must be >= 1.
    pub fn out_shape(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let oh = Self::out_side("height", h, self.padding.0, self.kernel.0, self.stride.0)?;
        let ow = Self::out_side("width", w, self.padding.1, self.kernel.1, self.stride.1)?;
        Ok((oh, ow))
    }

    fn out_side(name: &str, s: usize, p: usize, k: usize, stride: usize) -> Result<usize> {
        if stride == 0 || k == 0 {
            return Err(Error::InvalidArgument {
                op: "conv2d",
                detail: format!("{name}: kernel and stride must be positive"),
            });
        }
        let padded = s + 2 * p;
        if padded < k {
            return Err(Error::ShapeMismatch {
                op: "conv2d",
                detail: format!("{name}: input {s} + 2*{p} padding smaller than kernel {k}"),
            });
        }
        Ok((padded - k) / stride + 1)
    }
}

/// Everything the backward pass needs from the matching forward call.
#[derive(Debug, Clone)]
pub struct Conv2dCache {
    input: Tensor,
    weights: Tensor,
    spec: ConvSpec,
    has_bias: bool,
    out_shape: [usize; 4],
}

/// Gradients of the conv2d map with respect to each of its inputs.
#[derive(Debug, Clone)]
pub struct ConvGrads {
    pub d_input: Tensor,
    pub d_weights: Tensor,
    pub d_bias: Vec<f64>,
}

fn validate(input: &Tensor, weights: &Tensor, bias: Option<&[f64]>, spec: &ConvSpec) -> Result<()> {
    if input.c() != spec.in_channels {
        return Err(Error::ShapeMismatch {
            op: "conv2d",
            detail: format!(
                "input channels {} vs spec.in_channels {}",
                input.c(),
                spec.in_channels
            ),
        });
    }
    let expect = [
        spec.out_channels,
        spec.in_channels,
        spec.kernel.0,
        spec.kernel.1,
    ];
    if weights.shape() != expect {
        return Err(Error::ShapeMismatch {
            op: "conv2d",
            detail: format!("weights {:?} vs expected {:?}", weights.shape(), expect),
        });
    }
    if let Some(b) = bias {
        if b.len() != spec.out_channels {
            return Err(Error::ShapeMismatch {
                op: "conv2d",
                detail: format!("bias length {} vs out_channels {}", b.len(), spec.out_channels),
            });
        }
    }
    Ok(())
}

/// Valid output-column range [lo, hi) for a fixed kernel column offset, such
/// that the sampled input column iw = ow*sw - pw + kw stays inside [0, w).
#[inline]
fn ow_range(w: usize, pw: usize, kw: usize, sw: usize, ow_count: usize) -> (usize, usize) {
    let shift = kw as isize - pw as isize; // iw = ow*sw + shift
    let lo = if shift >= 0 {
        0
    } else {
        // smallest ow with ow*sw + shift >= 0
        ((-shift) as usize).div_ceil(sw)
    };
    // largest ow with ow*sw + shift <= w-1
    let max_iw = w as isize - 1 - shift;
    if max_iw < 0 {
        return (0, 0);
    }
    let hi = ((max_iw as usize) / sw + 1).min(ow_count);
    (lo.min(hi), hi)
}

/// Cross-correlation with zero padding. Output shape follows
/// [`ConvSpec::out_shape`]; shape violations name the offending dimension.
pub fn conv2d(
    input: &Tensor,
    weights: &Tensor,
    bias: Option<&[f64]>,
    spec: &ConvSpec,
) -> Result<Tensor> {
    validate(input, weights, bias, spec)?;
    let (n, in_c, h, w) = (input.n(), input.c(), input.h(), input.w());
    let (oh, ow) = spec.out_shape(h, w)?;
    let out_c = spec.out_channels;
    let (kh, kw) = spec.kernel;
    let (sh, sw) = spec.stride;
    let (ph, pw) = spec.padding;

    let mut out = Tensor::zeros([n, out_c, oh, ow]);
    let in_data = input.data();
    let w_data = weights.data();

    // One task per (sample, output channel) plane: disjoint outputs, so the
    // result is bitwise independent of the rayon schedule.
    {
        let planes: Vec<(usize, &mut [f64])> = {
            let mut v = Vec::with_capacity(n * out_c);
            let mut rest = out.data_mut();
            for i in 0..n * out_c {
                let (head, tail) = rest.split_at_mut(oh * ow);
                v.push((i, head));
                rest = tail;
            }
            v
        };
        planes.into_par_iter().for_each(|(plane_idx, out_plane)| {
            let ni = plane_idx / out_c;
            let oc = plane_idx % out_c;
            if let Some(b) = bias {
                out_plane.fill(b[oc]);
            }
            for ic in 0..in_c {
                let in_plane = &in_data[(ni * in_c + ic) * h * w..(ni * in_c + ic + 1) * h * w];
                let w_base = ((oc * in_c + ic) * kh) * kw;
                for khi in 0..kh {
                    for kwi in 0..kw {
                        let wgt = w_data[w_base + khi * kw + kwi];
                        if wgt == 0.0 {
                            continue;
                        }
                        let (lo, hi) = ow_range(w, pw, kwi, sw, ow);
                        if lo >= hi {
                            continue;
                        }
                        for ohi in 0..oh {
                            let ih = ohi as isize * sh as isize - ph as isize + khi as isize;
                            if ih < 0 || ih >= h as isize {
                                continue;
                            }
                            let in_row = &in_plane[ih as usize * w..(ih as usize + 1) * w];
                            let out_row = &mut out_plane[ohi * ow..(ohi + 1) * ow];
                            let iw0 = (lo * sw) as isize - pw as isize + kwi as isize;
                            let iw0 = iw0 as usize;
                            if sw == 1 {
                                let src = &in_row[iw0..iw0 + (hi - lo)];
                                let dst = &mut out_row[lo..hi];
                                for (d, s) in dst.iter_mut().zip(src) {
                                    *d += wgt * s;
                                }
                            } else {
                                for (j, o) in out_row[lo..hi].iter_mut().enumerate() {
                                    *o += wgt * in_row[iw0 + j * sw];
                                }
                            }
                        }
                    }
                }
            }
        });
    }
    Ok(out)
}

/// Forward pass retaining the cache needed for [`conv2d_backward`].
pub fn conv2d_cached(
    input: &Tensor,
    weights: &Tensor,
    bias: Option<&[f64]>,
    spec: &ConvSpec,
) -> Result<(Tensor, Conv2dCache)> {
    let out = conv2d(input, weights, bias, spec)?;
    let cache = Conv2dCache {
        input: input.clone(),
        weights: weights.clone(),
        spec: *spec,
        has_bias: bias.is_some(),
        out_shape: out.shape(),
    };
    Ok((out, cache))
}

/// Exact reverse-mode gradients of the conv2d map.
pub fn conv2d_backward(cache: &Conv2dCache, d_output: &Tensor) -> Result<ConvGrads> {
    if d_output.shape() != cache.out_shape {
        return Err(Error::ShapeMismatch {
            op: "conv2d_backward",
            detail: format!(
                "d_output {:?} vs forward output {:?}",
                d_output.shape(),
                cache.out_shape
            ),
        });
    }
    let spec = &cache.spec;
    let input = &cache.input;
    let (n, in_c, h, w) = (input.n(), input.c(), input.h(), input.w());
    let [_, out_c, oh, ow] = cache.out_shape;
    let (kh, kw) = spec.kernel;
    let (sh, sw) = spec.stride;
    let (ph, pw) = spec.padding;
    let in_data = input.data();
    let w_data = cache.weights.data();
    let d_out = d_output.data();

    // d_input: one task per sample (each sample's input gradient is disjoint).
    let mut d_input = Tensor::zeros(input.shape());
    {
        let samples: Vec<(usize, &mut [f64])> = {
            let mut v = Vec::with_capacity(n);
            let mut rest = d_input.data_mut();
            for i in 0..n {
                let (head, tail) = rest.split_at_mut(in_c * h * w);
                v.push((i, head));
                rest = tail;
            }
            v
        };
        samples.into_par_iter().for_each(|(ni, d_in_sample)| {
            for oc in 0..out_c {
                let d_out_plane = &d_out[(ni * out_c + oc) * oh * ow..(ni * out_c + oc + 1) * oh * ow];
                for ic in 0..in_c {
                    let d_in_plane = &mut d_in_sample[ic * h * w..(ic + 1) * h * w];
                    let w_base = ((oc * in_c + ic) * kh) * kw;
                    for khi in 0..kh {
                        for kwi in 0..kw {
                            let wgt = w_data[w_base + khi * kw + kwi];
                            if wgt == 0.0 {
                                continue;
                            }
                            let (lo, hi) = ow_range(w, pw, kwi, sw, ow);
                            if lo >= hi {
                                continue;
                            }
                            for ohi in 0..oh {
                                let ih = ohi as isize * sh as isize - ph as isize + khi as isize;
                                if ih < 0 || ih >= h as isize {
                                    continue;
                                }
                                let d_row = &d_out_plane[ohi * ow..(ohi + 1) * ow];
                                let in_row =
                                    &mut d_in_plane[ih as usize * w..(ih as usize + 1) * w];
                                let iw0 = (lo * sw + kwi) as isize - pw as isize;
                                let iw0 = iw0 as usize;
                                if sw == 1 {
                                    for (j, g) in d_row[lo..hi].iter().enumerate() {
                                        in_row[iw0 + j] += wgt * g;
                                    }
                                } else {
                                    for (j, g) in d_row[lo..hi].iter().enumerate() {
                                        in_row[iw0 + j * sw] += wgt * g;
                                    }
                                }
                            }
                        }
                    }
                }
            }
        });
    }

    // d_weights and d_bias: one task per output channel (disjoint rows of the
    // weight gradient); the inner accumulation over samples keeps a fixed order.
    // TODO: the tap-major dot products below don't auto-vectorize (FP reduction);
    // an im2col buffer would let this run as a plain matmul.
    let mut d_weights = Tensor::zeros(cache.weights.shape());
    let mut d_bias = vec![0.0; out_c];
    {
        let w_row = in_c * kh * kw;
        let rows: Vec<(usize, &mut [f64], &mut f64)> = {
            let mut v = Vec::with_capacity(out_c);
            let mut w_rest = d_weights.data_mut();
            let mut b_rest = d_bias.as_mut_slice();
            for i in 0..out_c {
                let (w_head, w_tail) = w_rest.split_at_mut(w_row);
                let (b_head, b_tail) = b_rest.split_at_mut(1);
                v.push((i, w_head, &mut b_head[0]));
                w_rest = w_tail;
                b_rest = b_tail;
            }
            v
        };
        rows.into_par_iter().for_each(|(oc, dw_row, db)| {
            for ni in 0..n {
                let d_out_plane = &d_out[(ni * out_c + oc) * oh * ow..(ni * out_c + oc + 1) * oh * ow];
                if cache.has_bias {
                    for g in d_out_plane {
                        *db += g;
                    }
                }
                for ic in 0..in_c {
                    let in_plane = &in_data[(ni * in_c + ic) * h * w..(ni * in_c + ic + 1) * h * w];
                    for khi in 0..kh {
                        for kwi in 0..kw {
                            let (lo, hi) = ow_range(w, pw, kwi, sw, ow);
                            if lo >= hi {
                                continue;
                            }
                            let mut acc = 0.0;
                            for ohi in 0..oh {
                                let ih =
                                    ohi as isize * sh as isize - ph as isize + khi as isize;
                                if ih < 0 || ih >= h as isize {
                                    continue;
                                }
                                let d_row = &d_out_plane[ohi * ow..(ohi + 1) * ow];
                                let in_row = &in_plane[ih as usize * w..(ih as usize + 1) * w];
                                let iw0 = (lo * sw + kwi) as isize - pw as isize;
                                let iw0 = iw0 as usize;
                                if sw == 1 {
                                    let src = &in_row[iw0..iw0 + (hi - lo)];
                                    for (g, s) in d_row[lo..hi].iter().zip(src) {
                                        acc += g * s;
                                    }
                                } else {
                                    for (j, g) in d_row[lo..hi].iter().enumerate() {
                                        acc += g * in_row[iw0 + j * sw];
                                    }
                                }
                            }
                            dw_row[(ic * kh + khi) * kw + kwi] += acc;
                        }
                    }
                }
            }
        });
    }

    if !cache.has_bias {
        d_bias.clear();
    }
    Ok(ConvGrads {
        d_input,
        d_weights,
        d_bias,
    })
}
