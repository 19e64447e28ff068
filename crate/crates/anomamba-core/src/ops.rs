//! Plain (non-recorded) NCHW kernels shared by the autodiff graph and the
//! frozen encoder path.

use alloc::format;
use alloc::vec;

use crate::error::{shape_err, Result};
use crate::tensor::{idx4, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvSpec {
    pub stride: usize,
    pub pad: usize,
    pub groups: usize,
}

impl ConvSpec {
    pub fn unit() -> Self {
        ConvSpec { stride: 1, pad: 0, groups: 1 }
    }
}

pub(crate) struct ConvDims {
    pub batch: usize,
    pub c_in: usize,
    pub c_out: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub k_h: usize,
    pub k_w: usize,
    pub out_h: usize,
    pub out_w: usize,
}

pub(crate) fn conv2d_dims(x: &Tensor, w: &Tensor, spec: ConvSpec) -> Result<ConvDims> {
    let (batch, c_in, in_h, in_w) = x.dims4("conv2d input")?;
    let (c_out, wc, k_h, k_w) = w.dims4("conv2d weight")?;
    let g = spec.groups;
    if g == 0 || c_in % g != 0 || c_out % g != 0 {
        return Err(shape_err(
            "conv2d",
            format!("groups {} must divide in channels {} and out channels {}", g, c_in, c_out),
        ));
    }
    if wc != c_in / g {
        return Err(shape_err(
            "conv2d",
            format!(
                "weight channel axis is {} but input has {} channels over {} groups (want {})",
                wc,
                c_in,
                g,
                c_in / g
            ),
        ));
    }
    if spec.stride == 0 {
        return Err(shape_err("conv2d", "stride must be positive".into()));
    }
    let span_h = in_h + 2 * spec.pad;
    let span_w = in_w + 2 * spec.pad;
    if k_h == 0 || k_w == 0 || k_h > span_h || k_w > span_w {
        return Err(shape_err(
            "conv2d",
            format!(
                "kernel {}x{} does not fit padded input {}x{}",
                k_h, k_w, span_h, span_w
            ),
        ));
    }
    Ok(ConvDims {
        batch,
        c_in,
        c_out,
        in_h,
        in_w,
        k_h,
        k_w,
        out_h: (span_h - k_h) / spec.stride + 1,
        out_w: (span_w - k_w) / spec.stride + 1,
    })
}

/// Cross-correlation over NCHW input with an (out, in/groups, kh, kw) weight.
pub fn conv2d(x: &Tensor, w: &Tensor, bias: Option<&Tensor>, spec: ConvSpec) -> Result<Tensor> {
    let d = conv2d_dims(x, w, spec)?;
    if let Some(b) = bias {
        if b.shape() != [d.c_out] {
            return Err(shape_err(
                "conv2d",
                format!("bias shape {:?} does not match {} out channels", b.shape(), d.c_out),
            ));
        }
    }
    let group_in = d.c_in / spec.groups;
    let group_out = d.c_out / spec.groups;
    let xs = x.data();
    let ws = w.data();
    let mut out = vec![0.0f32; d.batch * d.c_out * d.out_h * d.out_w];
    for b in 0..d.batch {
        for oc in 0..d.c_out {
            let ic0 = (oc / group_out) * group_in;
            let base_bias = bias.map_or(0.0, |t| t.data()[oc]);
            for oy in 0..d.out_h {
                for ox in 0..d.out_w {
                    let mut acc = base_bias;
                    for icg in 0..group_in {
                        let ic = ic0 + icg;
                        for ky in 0..d.k_h {
                            let iy = oy * spec.stride + ky;
                            if iy < spec.pad || iy >= spec.pad + d.in_h {
                                continue;
                            }
                            let iy = iy - spec.pad;
                            for kx in 0..d.k_w {
                                let ix = ox * spec.stride + kx;
                                if ix < spec.pad || ix >= spec.pad + d.in_w {
                                    continue;
                                }
                                let ix = ix - spec.pad;
                                acc += xs[idx4(d.c_in, d.in_h, d.in_w, b, ic, iy, ix)]
                                    * ws[idx4(group_in, d.k_h, d.k_w, oc, icg, ky, kx)];
                            }
                        }
                    }
                    out[idx4(d.c_out, d.out_h, d.out_w, b, oc, oy, ox)] = acc;
                }
            }
        }
    }
    Tensor::new(&[d.batch, d.c_out, d.out_h, d.out_w], out)
}

/// Source coordinate and lerp weight for one output position,
/// half-pixel-centered (align_corners = false), clamped to the input range.
#[inline]
pub(crate) fn bilinear_axis(out_i: usize, in_len: usize, out_len: usize) -> (usize, usize, f32) {
    if in_len == out_len {
        return (out_i, out_i, 0.0);
    }
    let scale = in_len as f32 / out_len as f32;
    let src = ((out_i as f32 + 0.5) * scale - 0.5).clamp(0.0, (in_len - 1) as f32);
    let lo = src as usize;
    let hi = (lo + 1).min(in_len - 1);
    (lo, hi, src - lo as f32)
}

pub fn bilinear_resize(x: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    let (batch, ch, in_h, in_w) = x.dims4("bilinear_resize")?;
    if out_h == 0 || out_w == 0 {
        return Err(shape_err("bilinear_resize", "output size must be positive".into()));
    }
    let xs = x.data();
    let mut out = vec![0.0f32; batch * ch * out_h * out_w];
    for b in 0..batch {
        for c in 0..ch {
            for oy in 0..out_h {
                let (y0, y1, fy) = bilinear_axis(oy, in_h, out_h);
                for ox in 0..out_w {
                    let (x0, x1, fx) = bilinear_axis(ox, in_w, out_w);
                    let v00 = xs[idx4(ch, in_h, in_w, b, c, y0, x0)];
                    let v01 = xs[idx4(ch, in_h, in_w, b, c, y0, x1)];
                    let v10 = xs[idx4(ch, in_h, in_w, b, c, y1, x0)];
                    let v11 = xs[idx4(ch, in_h, in_w, b, c, y1, x1)];
                    let top = v00 + (v01 - v00) * fx;
                    let bot = v10 + (v11 - v10) * fx;
                    out[idx4(ch, out_h, out_w, b, c, oy, ox)] = top + (bot - top) * fy;
                }
            }
        }
    }
    Tensor::new(&[batch, ch, out_h, out_w], out)
}

pub fn relu(x: &Tensor) -> Tensor {
    x.map(|v| if v > 0.0 { v } else { 0.0 })
}

pub fn maxpool2d(x: &Tensor, k: usize, stride: usize, pad: usize) -> Result<Tensor> {
    let (batch, ch, in_h, in_w) = x.dims4("maxpool2d")?;
    let span_h = in_h + 2 * pad;
    let span_w = in_w + 2 * pad;
    if k == 0 || stride == 0 || k > span_h || k > span_w {
        return Err(shape_err(
            "maxpool2d",
            format!("window {} stride {} does not fit padded {}x{}", k, stride, span_h, span_w),
        ));
    }
    let out_h = (span_h - k) / stride + 1;
    let out_w = (span_w - k) / stride + 1;
    let xs = x.data();
    let mut out = vec![0.0f32; batch * ch * out_h * out_w];
    for b in 0..batch {
        for c in 0..ch {
            for oy in 0..out_h {
                for ox in 0..out_w {
                    let mut best = f32::NEG_INFINITY;
                    for ky in 0..k {
                        let iy = oy * stride + ky;
                        if iy < pad || iy >= pad + in_h {
                            continue;
                        }
                        for kx in 0..k {
                            let ix = ox * stride + kx;
                            if ix < pad || ix >= pad + in_w {
                                continue;
                            }
                            let v = xs[idx4(ch, in_h, in_w, b, c, iy - pad, ix - pad)];
                            if v > best {
                                best = v;
                            }
                        }
                    }
                    out[idx4(ch, out_h, out_w, b, c, oy, ox)] = best;
                }
            }
        }
    }
    Tensor::new(&[batch, ch, out_h, out_w], out)
}

/// Inference-mode batch norm with frozen statistics.
pub fn batchnorm2d(
    x: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
    mean: &Tensor,
    var: &Tensor,
    eps: f32,
) -> Result<Tensor> {
    let (batch, ch, h, w) = x.dims4("batchnorm2d")?;
    for (name, t) in [("gamma", gamma), ("beta", beta), ("mean", mean), ("var", var)] {
        if t.shape() != [ch] {
            return Err(shape_err(
                "batchnorm2d",
                format!("{} shape {:?} does not match {} channels", name, t.shape(), ch),
            ));
        }
    }
    let mut out = x.clone();
    let plane = h * w;
    for c in 0..ch {
        let scale = gamma.data()[c] / crate::mathf::sqrtf(var.data()[c] + eps);
        let shift = beta.data()[c] - mean.data()[c] * scale;
        for b in 0..batch {
            let base = (b * ch + c) * plane;
            for i in &mut out.data_mut()[base..base + plane] {
                *i = *i * scale + shift;
            }
        }
    }
    Ok(out)
}

/// Gathers (outer, len, inner) block extents used by concat/narrow walks.
pub(crate) fn copy_axis_block(
    src: &[f32],
    dst: &mut [f32],
    outer: usize,
    src_len: usize,
    dst_len: usize,
    inner: usize,
    src_start: usize,
    dst_start: usize,
    count: usize,
) {
    for o in 0..outer {
        let s = (o * src_len + src_start) * inner;
        let d = (o * dst_len + dst_start) * inner;
        dst[d..d + count * inner].copy_from_slice(&src[s..s + count * inner]);
    }
}

#[allow(clippy::too_many_arguments)]

pub(crate) fn accumulate(dst: &mut [f32], src: &[f32]) {
    debug_assert_eq!(dst.len(), src.len());
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    // 3x3 all-ones kernel over a 5x5 all-ones input with pad 1: each output
    // counts the valid taps, so the center sees 9 and corners see 4.
    #[test]
    fn conv_ones_counts_taps() {
        let x = Tensor::full(&[1, 1, 5, 5], 1.0);
        let w = Tensor::full(&[1, 1, 3, 3], 1.0);
        let y = conv2d(&x, &w, None, ConvSpec { stride: 1, pad: 1, groups: 1 }).unwrap();
        assert_eq!(y.shape(), &[1, 1, 5, 5]);
        assert_eq!(y.data()[idx4(1, 5, 5, 0, 0, 2, 2)], 9.0);
        assert_eq!(y.data()[idx4(1, 5, 5, 0, 0, 0, 0)], 4.0);
        assert_eq!(y.data()[idx4(1, 5, 5, 0, 0, 0, 4)], 4.0);
        assert_eq!(y.data()[idx4(1, 5, 5, 0, 0, 0, 2)], 6.0);
    }

    #[test]
    fn conv_stride_two_halves_extent() {
        let x = Tensor::new(&[1, 1, 4, 4], (0..16).map(|v| v as f32).collect()).unwrap();
        let w = Tensor::full(&[1, 1, 3, 3], 1.0);
        let y = conv2d(&x, &w, None, ConvSpec { stride: 2, pad: 1, groups: 1 }).unwrap();
        assert_eq!(y.shape(), &[1, 1, 2, 2]);
        // top-left window covers rows 0..2, cols 0..2 of the unpadded input
        assert_eq!(y.data()[0], 0.0 + 1.0 + 4.0 + 5.0);
    }

    #[test]
    fn conv_groups_keep_channels_separate() {
        // two channels, depthwise: each output channel sees only its own input
        let x = Tensor::new(&[1, 2, 1, 1], vec![2.0, 5.0]).unwrap();
        let w = Tensor::new(&[2, 1, 1, 1], vec![10.0, 100.0]).unwrap();
        let y = conv2d(&x, &w, None, ConvSpec { stride: 1, pad: 0, groups: 2 }).unwrap();
        assert_eq!(y.data(), &[20.0, 500.0]);
    }

    #[test]
    fn conv_rejects_bad_channel_pairing() {
        let x = Tensor::zeros(&[1, 3, 4, 4]);
        let w = Tensor::zeros(&[2, 2, 3, 3]);
        let err = conv2d(&x, &w, None, ConvSpec::unit()).unwrap_err();
        let msg = alloc::format!("{err}");
        assert!(msg.contains("channel"), "unhelpful error: {msg}");
    }

    // 2x2 ramp upsampled to 3x3: half-pixel centers sample at 0, 0.5, 1 on
    // each axis, giving the frozen grid below (center 1.5).
    #[test]
    fn bilinear_two_to_three() {
        let x = Tensor::new(&[1, 1, 2, 2], vec![0.0, 1.0, 2.0, 3.0]).unwrap();
        let y = bilinear_resize(&x, 3, 3).unwrap();
        let want = [0.0, 0.5, 1.0, 1.0, 1.5, 2.0, 2.0, 2.5, 3.0];
        for (got, want) in y.data().iter().zip(want) {
            assert!((got - want).abs() < 1e-6, "got {:?}", y.data());
        }
    }

    #[test]
    fn bilinear_identity_when_same_size() {
        let x = Tensor::new(&[1, 2, 3, 3], (0..18).map(|v| v as f32 * 0.37).collect()).unwrap();
        let y = bilinear_resize(&x, 3, 3).unwrap();
        assert_eq!(x.data(), y.data());
    }

    #[test]
    fn maxpool_basic() {
        let x = Tensor::new(&[1, 1, 2, 2], vec![1.0, 7.0, 3.0, 2.0]).unwrap();
        let y = maxpool2d(&x, 2, 2, 0).unwrap();
        assert_eq!(y.data(), &[7.0]);
    }

    #[test]
    fn batchnorm_frozen_stats() {
        let x = Tensor::new(&[1, 1, 1, 2], vec![1.0, 3.0]).unwrap();
        let y = batchnorm2d(
            &x,
            &Tensor::full(&[1], 2.0),
            &Tensor::full(&[1], 0.5),
            &Tensor::full(&[1], 1.0),
            &Tensor::full(&[1], 4.0),
            0.0,
        )
        .unwrap();
        // (x - 1) / 2 * 2 + 0.5
        assert_eq!(y.data(), &[0.5, 2.5]);
    }
}
