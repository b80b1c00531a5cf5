use rayon::prelude::*;

use crate::ops::conv::conv_out_extent;
use crate::tensor::{ConvParams, OffsetField, Tensor};
use crate::{Result, TensorError};

#[derive(Clone, Copy)]
struct Taps {
    base: (isize, isize),
    frac: (f64, f64),
}

/// Corner decomposition of a fractional sample position, or `None` when the
/// position is far enough outside the map that all four corners vanish.
#[inline]
fn taps(h: usize, w: usize, r: f64, c: f64) -> Option<Taps> {
    if !(r > -1.0 && r < h as f64 && c > -1.0 && c < w as f64) {
        return None;
    }
    let r0 = r.floor();
    let c0 = c.floor();
    Some(Taps {
        base: (r0 as isize, c0 as isize),
        frac: (r - r0, c - c0),
    })
}

#[inline]
fn pix(plane: &[f64], h: usize, w: usize, r: isize, c: isize) -> f64 {
    if r >= 0 && r < h as isize && c >= 0 && c < w as isize {
        plane[r as usize * w + c as usize]
    } else {
        0.0
    }
}

#[inline]
fn sample_plane(plane: &[f64], h: usize, w: usize, r: f64, c: f64) -> f64 {
    match taps(h, w, r, c) {
        None => 0.0,
        Some(t) => {
            let (r0, c0) = t.base;
            let (fr, fc) = t.frac;
            let p00 = pix(plane, h, w, r0, c0);
            let p01 = pix(plane, h, w, r0, c0 + 1);
            let p10 = pix(plane, h, w, r0 + 1, c0);
            let p11 = pix(plane, h, w, r0 + 1, c0 + 1);
            (1.0 - fr) * ((1.0 - fc) * p00 + fc * p01) + fr * ((1.0 - fc) * p10 + fc * p11)
        }
    }
}

/// Partial derivatives of the sampled value with respect to the sample
/// position (row, col).
#[inline]
fn sample_pos_grad(plane: &[f64], h: usize, w: usize, r: f64, c: f64) -> (f64, f64) {
    match taps(h, w, r, c) {
        None => (0.0, 0.0),
        Some(t) => {
            let (r0, c0) = t.base;
            let (fr, fc) = t.frac;
            let p00 = pix(plane, h, w, r0, c0);
            let p01 = pix(plane, h, w, r0, c0 + 1);
            let p10 = pix(plane, h, w, r0 + 1, c0);
            let p11 = pix(plane, h, w, r0 + 1, c0 + 1);
            let dr = (1.0 - fc) * (p10 - p00) + fc * (p11 - p01);
            let dc = (1.0 - fr) * (p01 - p00) + fr * (p11 - p10);
            (dr, dc)
        }
    }
}

/// Bilinear interpolation of a 2-D map at a fractional (row, col) position.
/// Positions outside `[0, h-1] x [0, w-1]` read zeros (zero padding), so the
/// result fades to 0 within one pixel of the border and is 0 beyond that.
pub fn bilinear_sample(map: &Tensor, row: f64, col: f64) -> Result<f64> {
    let (h, w) = map.dims2().map_err(|_| {
        TensorError::Dimension(format!(
            "bilinear_sample expects a 2-D map, got shape {:?}",
            map.shape()
        ))
    })?;
    Ok(sample_plane(map.data(), h, w, row, col))
}

struct DeformShape {
    n: usize,
    in_c: usize,
    h: usize,
    w: usize,
    out_c: usize,
    kw: usize,
    k: usize,
    out_h: usize,
    out_w: usize,
}

fn check_shapes(input: &Tensor, params: &ConvParams, offsets: &OffsetField) -> Result<DeformShape> {
    let (n, in_c, h, w) = input.dims4()?;
    if params.in_channels() != in_c {
        return Err(TensorError::Dimension(format!(
            "input has {} channels, weight expects {}",
            in_c,
            params.in_channels()
        )));
    }
    let (kh, kw) = params.kernel();
    if offsets.kernel() != (kh, kw) {
        return Err(TensorError::Dimension(format!(
            "offset field built for kernel {:?}, convolution uses {:?}",
            offsets.kernel(),
            (kh, kw)
        )));
    }
    let out_h = conv_out_extent(h, kh, params.stride, params.padding)?;
    let out_w = conv_out_extent(w, kw, params.stride, params.padding)?;
    let (on, oc, oh, ow) = offsets.tensor().dims4()?;
    if on != n || oh != out_h || ow != out_w {
        return Err(TensorError::Dimension(format!(
            "offset field shape [{}, {}, {}, {}] does not match output [{}, _, {}, {}]",
            on, oc, oh, ow, n, out_h, out_w
        )));
    }
    Ok(DeformShape {
        n,
        in_c,
        h,
        w,
        out_c: params.out_channels(),
        kw,
        k: kh * kw,
        out_h,
        out_w,
    })
}

/// Sample every kernel tap of every output position: `[n, in_c, k, out_h*out_w]`
/// flattened. Shared by the forward pass and the weight gradient.
fn sample_all(input: &Tensor, params: &ConvParams, offsets: &OffsetField, s: &DeformShape) -> Vec<f64> {
    let x = input.data();
    let off = offsets.tensor().data();
    let plane = s.out_h * s.out_w;
    let (stride, pad) = (params.stride, params.padding);
    let mut sampled = vec![0.0; s.n * s.in_c * s.k * plane];
    sampled
        .par_chunks_mut(s.k * plane)
        .enumerate()
        .for_each(|(chunk, dst)| {
            let (bi, ic) = (chunk / s.in_c, chunk % s.in_c);
            let x_plane = &x[(bi * s.in_c + ic) * s.h * s.w..][..s.h * s.w];
            let off_base = bi * 2 * s.k * plane;
            for t in 0..s.k {
                let (ku, kv) = (t / s.kw, t % s.kw);
                let off_r = &off[off_base + 2 * t * plane..][..plane];
                let off_c = &off[off_base + (2 * t + 1) * plane..][..plane];
                let dst_t = &mut dst[t * plane..][..plane];
                for oh in 0..s.out_h {
                    for ow in 0..s.out_w {
                        let p = oh * s.out_w + ow;
                        let r = (oh * stride + ku) as f64 - pad as f64 + off_r[p];
                        let c = (ow * stride + kv) as f64 - pad as f64 + off_c[p];
                        dst_t[p] = sample_plane(x_plane, s.h, s.w, r, c);
                    }
                }
            }
        });
    sampled
}

/// Deformable 2-D convolution: each kernel tap samples the input at its
/// regular grid position displaced by a learned per-location 2-D offset,
/// via bilinear interpolation with zero padding.
pub fn deform_conv2d(input: &Tensor, params: &ConvParams, offsets: &OffsetField) -> Result<Tensor> {
    let s = check_shapes(input, params, offsets)?;
    let sampled = sample_all(input, params, offsets, &s);
    let wt = params.weight.data();
    let bias = params.bias.data();
    let plane = s.out_h * s.out_w;

    let mut out = vec![0.0; s.n * s.out_c * plane];
    out.par_chunks_mut(plane).enumerate().for_each(|(chunk, acc)| {
        let (bi, oc) = (chunk / s.out_c, chunk % s.out_c);
        for ic in 0..s.in_c {
            let s_base = (bi * s.in_c + ic) * s.k * plane;
            for t in 0..s.k {
                let wv = wt[(oc * s.in_c + ic) * s.k + t];
                if wv == 0.0 {
                    continue;
                }
                let src = &sampled[s_base + t * plane..][..plane];
                for (a, v) in acc.iter_mut().zip(src) {
                    *a += wv * v;
                }
            }
        }
        let b = bias[oc];
        if b != 0.0 {
            for a in acc.iter_mut() {
                *a += b;
            }
        }
    });

    Tensor::from_vec([s.n, s.out_c, s.out_h, s.out_w], out)
}

pub struct DeformGrads {
    pub input: Tensor,
    pub weight: Tensor,
    pub bias: Tensor,
    pub offsets: Tensor,
}

pub fn deform_conv2d_backward(
    input: &Tensor,
    params: &ConvParams,
    offsets: &OffsetField,
    grad_out: &Tensor,
) -> Result<DeformGrads> {
    let s = check_shapes(input, params, offsets)?;
    let plane = s.out_h * s.out_w;
    if grad_out.shape() != [s.n, s.out_c, s.out_h, s.out_w] {
        return Err(TensorError::ShapeMismatch(format!(
            "grad_out shape {:?} inconsistent with deform_conv2d output",
            grad_out.shape()
        )));
    }
    let x = input.data();
    let wt = params.weight.data();
    let off = offsets.tensor().data();
    let gy = grad_out.data();
    let (stride, pad) = (params.stride, params.padding);

    let sampled = sample_all(input, params, offsets, &s);

    let mut gw = vec![0.0; wt.len()];
    gw.par_chunks_mut(s.in_c * s.k).enumerate().for_each(|(oc, g)| {
        for bi in 0..s.n {
            let gy_plane = &gy[(bi * s.out_c + oc) * plane..][..plane];
            for ic in 0..s.in_c {
                let s_base = (bi * s.in_c + ic) * s.k * plane;
                for t in 0..s.k {
                    let src = &sampled[s_base + t * plane..][..plane];
                    let mut acc = 0.0;
                    for (gv, sv) in gy_plane.iter().zip(src) {
                        acc += gv * sv;
                    }
                    g[ic * s.k + t] += acc;
                }
            }
        }
    });

    let mut gb = vec![0.0; s.out_c];
    for (oc, g) in gb.iter_mut().enumerate() {
        let mut acc = 0.0;
        for bi in 0..s.n {
            for v in &gy[(bi * s.out_c + oc) * plane..][..plane] {
                acc += v;
            }
        }
        *g = acc;
    }

    // q[bi, ic, t, p]: gradient of the loss with respect to each sampled value.
    let mut q = vec![0.0; s.n * s.in_c * s.k * plane];
    q.par_chunks_mut(s.k * plane).enumerate().for_each(|(chunk, dst)| {
        let (bi, ic) = (chunk / s.in_c, chunk % s.in_c);
        for oc in 0..s.out_c {
            let gy_plane = &gy[(bi * s.out_c + oc) * plane..][..plane];
            for t in 0..s.k {
                let wv = wt[(oc * s.in_c + ic) * s.k + t];
                if wv == 0.0 {
                    continue;
                }
                let dst_t = &mut dst[t * plane..][..plane];
                for (d, gv) in dst_t.iter_mut().zip(gy_plane) {
                    *d += wv * gv;
                }
            }
        }
    });

    // d/dinput: scatter each sampled-value gradient onto its four corners.
    let mut gx = vec![0.0; x.len()];
    gx.par_chunks_mut(s.h * s.w).enumerate().for_each(|(chunk, g)| {
        let (bi, ic) = (chunk / s.in_c, chunk % s.in_c);
        let q_base = (bi * s.in_c + ic) * s.k * plane;
        let off_base = bi * 2 * s.k * plane;
        for t in 0..s.k {
            let (ku, kv) = (t / s.kw, t % s.kw);
            let off_r = &off[off_base + 2 * t * plane..][..plane];
            let off_c = &off[off_base + (2 * t + 1) * plane..][..plane];
            let q_t = &q[q_base + t * plane..][..plane];
            for oh in 0..s.out_h {
                for ow in 0..s.out_w {
                    let p = oh * s.out_w + ow;
                    let qv = q_t[p];
                    if qv == 0.0 {
                        continue;
                    }
                    let r = (oh * stride + ku) as f64 - pad as f64 + off_r[p];
                    let c = (ow * stride + kv) as f64 - pad as f64 + off_c[p];
                    if let Some(tp) = taps(s.h, s.w, r, c) {
                        let (r0, c0) = tp.base;
                        let (fr, fc) = tp.frac;
                        for (di, dj, wgt) in [
                            (0, 0, (1.0 - fr) * (1.0 - fc)),
                            (0, 1, (1.0 - fr) * fc),
                            (1, 0, fr * (1.0 - fc)),
                            (1, 1, fr * fc),
                        ] {
                            let (ri, ci) = (r0 + di, c0 + dj);
                            if ri >= 0 && ri < s.h as isize && ci >= 0 && ci < s.w as isize {
                                g[ri as usize * s.w + ci as usize] += qv * wgt;
                            }
                        }
                    }
                }
            }
        }
    });

    // d/doffsets: chain the sampled-value gradients through the position
    // derivatives of the bilinear kernel.
    let mut goff = vec![0.0; off.len()];
    goff.par_chunks_mut(2 * s.k * plane)
        .enumerate()
        .for_each(|(bi, g)| {
            let off_base = bi * 2 * s.k * plane;
            for t in 0..s.k {
                let (ku, kv) = (t / s.kw, t % s.kw);
                let off_r = &off[off_base + 2 * t * plane..][..plane];
                let off_c = &off[off_base + (2 * t + 1) * plane..][..plane];
                for oh in 0..s.out_h {
                    for ow in 0..s.out_w {
                        let p = oh * s.out_w + ow;
                        let r = (oh * stride + ku) as f64 - pad as f64 + off_r[p];
                        let c = (ow * stride + kv) as f64 - pad as f64 + off_c[p];
                        let mut acc_r = 0.0;
                        let mut acc_c = 0.0;
                        for ic in 0..s.in_c {
                            let qv = q[((bi * s.in_c + ic) * s.k + t) * plane + p];
                            if qv == 0.0 {
                                continue;
                            }
                            let x_plane = &x[(bi * s.in_c + ic) * s.h * s.w..][..s.h * s.w];
                            let (dr, dc) = sample_pos_grad(x_plane, s.h, s.w, r, c);
                            acc_r += qv * dr;
                            acc_c += qv * dc;
                        }
                        g[2 * t * plane + p] = acc_r;
                        g[(2 * t + 1) * plane + p] = acc_c;
                    }
                }
            }
        });

    Ok(DeformGrads {
        input: Tensor::from_vec([s.n, s.in_c, s.h, s.w], gx)?,
        weight: Tensor::from_vec(params.weight.shape().to_vec(), gw)?,
        bias: Tensor::from_vec([s.out_c], gb)?,
        offsets: Tensor::from_vec(offsets.tensor().shape().to_vec(), goff)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ops::conv::conv2d;

    #[test]
    fn sample_integer_coordinates_exact() {
        let m = Tensor::from_vec([2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        assert_eq!(bilinear_sample(&m, 0.0, 0.0).unwrap(), 1.0);
        assert_eq!(bilinear_sample(&m, 1.0, 2.0).unwrap(), 6.0);
    }

    #[test]
    fn sample_center_of_two_by_two() {
        let m = Tensor::from_vec([2, 2], vec![0.0, 1.0, 2.0, 3.0]).unwrap();
        assert_eq!(bilinear_sample(&m, 0.5, 0.5).unwrap(), 1.5);
    }

    #[test]
    fn sample_outside_is_zero() {
        let m = Tensor::from_vec([2, 2], vec![5.0; 4]).unwrap();
        assert_eq!(bilinear_sample(&m, -5.0, -5.0).unwrap(), 0.0);
        assert_eq!(bilinear_sample(&m, 0.5, 10.0).unwrap(), 0.0);
    }

    #[test]
    fn sample_within_neighbor_bounds() {
        let m = Tensor::from_vec([3, 3], vec![0.0, 9.0, 1.0, 4.0, 2.0, 7.0, 3.0, 8.0, 5.0]).unwrap();
        for i in 0..10 {
            for j in 0..10 {
                let (r, c) = (i as f64 * 0.2, j as f64 * 0.2);
                let v = bilinear_sample(&m, r, c).unwrap();
                assert!((0.0..=9.0).contains(&v));
            }
        }
    }

    #[test]
    fn zero_offsets_reduce_to_conv2d() {
        let x = Tensor::from_vec([1, 2, 4, 4], (0..32).map(|v| (v as f64).sin()).collect()).unwrap();
        let w = Tensor::from_vec([3, 2, 3, 3], (0..54).map(|v| (v as f64 * 0.7).cos()).collect())
            .unwrap();
        let b = Tensor::from_vec([3], vec![0.1, -0.2, 0.3]).unwrap();
        let p = ConvParams::new(w, b, 1, 1).unwrap();
        let off = OffsetField::zeros(1, 3, 3, 4, 4);
        let plain = conv2d(&x, &p).unwrap();
        let deform = deform_conv2d(&x, &p, &off).unwrap();
        assert!(plain.max_abs_diff(&deform) < 1e-9);
    }

    #[test]
    fn half_pixel_shift_on_ramp() {
        // x(i, j) = j; sampling at column j + 0.5 must read j + 0.5 in the
        // interior and fall off at the right border where zeros bleed in.
        let (h, w) = (3, 5);
        let data: Vec<f64> = (0..h * w).map(|i| (i % w) as f64).collect();
        let x = Tensor::from_vec([1, 1, h, w], data).unwrap();
        let p = ConvParams::new(
            Tensor::from_vec([1, 1, 1, 1], vec![1.0]).unwrap(),
            Tensor::zeros([1]),
            1,
            0,
        )
        .unwrap();
        let mut off = vec![0.0; 2 * h * w];
        for p_idx in 0..h * w {
            off[h * w + p_idx] = 0.5; // column offset channel
        }
        let off = OffsetField::new(Tensor::from_vec([1, 2, h, w], off).unwrap(), 1, 1).unwrap();
        let y = deform_conv2d(&x, &p, &off).unwrap();
        for i in 0..h {
            for j in 0..w - 1 {
                assert!((y.data()[i * w + j] - (j as f64 + 0.5)).abs() < 1e-12);
            }
            let border = y.data()[i * w + w - 1];
            assert!((border - (w - 1) as f64 / 2.0).abs() < 1e-12);
        }
    }

    #[test]
    fn far_offsets_leave_only_bias() {
        let x = Tensor::from_vec([1, 1, 4, 4], vec![7.0; 16]).unwrap();
        let p = ConvParams::new(
            Tensor::full([1, 1, 3, 3], 1.0),
            Tensor::from_vec([1], vec![-2.5]).unwrap(),
            1,
            1,
        )
        .unwrap();
        let off = OffsetField::new(Tensor::full([1, 18, 4, 4], 500.0), 3, 3).unwrap();
        let y = deform_conv2d(&x, &p, &off).unwrap();
        for v in y.data() {
            assert_eq!(*v, -2.5);
        }
    }

    #[test]
    fn offset_shape_mismatch_is_error() {
        let x = Tensor::zeros([1, 1, 4, 4]);
        let p = ConvParams::new(Tensor::zeros([1, 1, 3, 3]), Tensor::zeros([1]), 1, 1).unwrap();
        let off = OffsetField::zeros(1, 3, 3, 5, 5);
        assert!(deform_conv2d(&x, &p, &off).is_err());
    }
}
