use rayon::prelude::*;

use crate::tensor::Tensor;
use crate::{Result, TensorError};

/// 2x2 max pooling with stride 2. Both spatial extents must be even.
/// Also returns the flat input index of each window maximum (first maximal
/// element in row-major order on ties) for the backward pass.
pub fn maxpool2d_with_indices(input: &Tensor) -> Result<(Tensor, Vec<usize>)> {
    let (n, c, h, w) = input.dims4()?;
    if h % 2 != 0 || w % 2 != 0 {
        return Err(TensorError::Dimension(format!(
            "maxpool2d requires even extents, got {}x{}",
            h, w
        )));
    }
    let (oh, ow) = (h / 2, w / 2);
    let x = input.data();
    let mut out = vec![0.0; n * c * oh * ow];
    let mut arg = vec![0usize; n * c * oh * ow];

    for plane in 0..n * c {
        let src = &x[plane * h * w..][..h * w];
        let dst = &mut out[plane * oh * ow..][..oh * ow];
        let amax = &mut arg[plane * oh * ow..][..oh * ow];
        for i in 0..oh {
            for j in 0..ow {
                let mut best = f64::NEG_INFINITY;
                let mut best_idx = 0;
                for di in 0..2 {
                    for dj in 0..2 {
                        let idx = (2 * i + di) * w + (2 * j + dj);
                        if src[idx] > best {
                            best = src[idx];
                            best_idx = idx;
                        }
                    }
                }
                dst[i * ow + j] = best;
                amax[i * ow + j] = plane * h * w + best_idx;
            }
        }
    }
    Ok((Tensor::from_vec([n, c, oh, ow], out)?, arg))
}

pub fn maxpool2d(input: &Tensor) -> Result<Tensor> {
    maxpool2d_with_indices(input).map(|(t, _)| t)
}

pub fn maxpool2d_backward(indices: &[usize], input_len: usize, grad_out: &Tensor) -> Result<Tensor> {
    if indices.len() != grad_out.len() {
        return Err(TensorError::ShapeMismatch(
            "argmax index count does not match grad_out".into(),
        ));
    }
    let mut gx = vec![0.0; input_len];
    for (gi, &src) in grad_out.data().iter().zip(indices) {
        gx[src] += gi;
    }
    Tensor::from_vec(vec![input_len], gx)
}

/// Source position and interpolation fraction for align-corners resampling.
#[inline]
fn align_corners_src(out_idx: usize, scale: f64, in_extent: usize) -> (usize, usize, f64) {
    let pos = out_idx as f64 * scale;
    let i0 = pos.floor() as usize;
    let i0 = i0.min(in_extent - 1);
    let i1 = (i0 + 1).min(in_extent - 1);
    (i0, i1, pos - i0 as f64)
}

fn upsample_scale(in_extent: usize, out_extent: usize) -> f64 {
    if out_extent > 1 {
        (in_extent - 1) as f64 / (out_extent - 1) as f64
    } else {
        0.0
    }
}

/// Bilinear upsampling by an integer factor with align-corners semantics:
/// the four corner pixels of the input map exactly onto the output corners.
pub fn upsample_bilinear(input: &Tensor, factor: usize) -> Result<Tensor> {
    let (n, c, h, w) = input.dims4()?;
    if factor == 0 {
        return Err(TensorError::Validation("upsample factor must be >= 1".into()));
    }
    if factor == 1 {
        return Ok(input.clone());
    }
    let (oh, ow) = (h * factor, w * factor);
    let (sy, sx) = (upsample_scale(h, oh), upsample_scale(w, ow));
    let x = input.data();
    let mut out = vec![0.0; n * c * oh * ow];
    out.par_chunks_mut(oh * ow).enumerate().for_each(|(plane, dst)| {
        let src = &x[plane * h * w..][..h * w];
        for oi in 0..oh {
            let (r0, r1, fr) = align_corners_src(oi, sy, h);
            for oj in 0..ow {
                let (c0, c1, fc) = align_corners_src(oj, sx, w);
                let v = (1.0 - fr) * ((1.0 - fc) * src[r0 * w + c0] + fc * src[r0 * w + c1])
                    + fr * ((1.0 - fc) * src[r1 * w + c0] + fc * src[r1 * w + c1]);
                dst[oi * ow + oj] = v;
            }
        }
    });
    Tensor::from_vec([n, c, oh, ow], out)
}

pub fn upsample_bilinear_backward(
    input_shape: &[usize],
    factor: usize,
    grad_out: &Tensor,
) -> Result<Tensor> {
    let [n, c, h, w] = input_shape else {
        return Err(TensorError::Dimension("expected NCHW input shape".into()));
    };
    let (n, c, h, w) = (*n, *c, *h, *w);
    if factor == 1 {
        return Ok(grad_out.clone());
    }
    let (oh, ow) = (h * factor, w * factor);
    if grad_out.shape() != [n, c, oh, ow] {
        return Err(TensorError::ShapeMismatch(
            "grad_out shape inconsistent with upsample output".into(),
        ));
    }
    let (sy, sx) = (upsample_scale(h, oh), upsample_scale(w, ow));
    let gy = grad_out.data();
    let mut gx = vec![0.0; n * c * h * w];
    gx.par_chunks_mut(h * w).enumerate().for_each(|(plane, dst)| {
        let src = &gy[plane * oh * ow..][..oh * ow];
        for oi in 0..oh {
            let (r0, r1, fr) = align_corners_src(oi, sy, h);
            for oj in 0..ow {
                let (c0, c1, fc) = align_corners_src(oj, sx, w);
                let g = src[oi * ow + oj];
                dst[r0 * w + c0] += (1.0 - fr) * (1.0 - fc) * g;
                dst[r0 * w + c1] += (1.0 - fr) * fc * g;
                dst[r1 * w + c0] += fr * (1.0 - fc) * g;
                dst[r1 * w + c1] += fr * fc * g;
            }
        }
    });
    Tensor::from_vec([n, c, h, w], gx)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn maxpool_two_by_two() {
        let x = Tensor::from_vec([1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let y = maxpool2d(&x).unwrap();
        assert_eq!(y.shape(), &[1, 1, 1, 1]);
        assert_eq!(y.data(), &[4.0]);
    }

    #[test]
    fn maxpool_constant_image() {
        let x = Tensor::full([1, 2, 4, 4], 2.5);
        let y = maxpool2d(&x).unwrap();
        assert_eq!(y.shape(), &[1, 2, 2, 2]);
        assert!(y.data().iter().all(|&v| v == 2.5));
    }

    #[test]
    fn maxpool_four_by_four_rowmajor() {
        let x = Tensor::from_vec([1, 1, 4, 4], (0..16).map(|v| v as f64).collect()).unwrap();
        let y = maxpool2d(&x).unwrap();
        assert_eq!(y.data(), &[5.0, 7.0, 13.0, 15.0]);
    }

    #[test]
    fn maxpool_odd_extent_rejected() {
        let x = Tensor::zeros([1, 1, 3, 4]);
        assert!(maxpool2d(&x).is_err());
    }

    #[test]
    fn maxpool_tie_routes_to_first() {
        let x = Tensor::from_vec([1, 1, 2, 2], vec![3.0, 3.0, 1.0, 3.0]).unwrap();
        let (_, idx) = maxpool2d_with_indices(&x).unwrap();
        assert_eq!(idx, vec![0]);
    }

    #[test]
    fn upsample_constant() {
        let x = Tensor::full([1, 1, 2, 2], 0.7);
        let y = upsample_bilinear(&x, 3).unwrap();
        assert_eq!(y.shape(), &[1, 1, 6, 6]);
        assert!(y.data().iter().all(|&v| (v - 0.7).abs() < 1e-15));
    }

    #[test]
    fn upsample_row_interpolates_linearly() {
        let x = Tensor::from_vec([1, 1, 1, 2], vec![0.0, 3.0]).unwrap();
        let y = upsample_bilinear(&x, 2).unwrap();
        assert_eq!(y.shape(), &[1, 1, 2, 4]);
        for row in 0..2 {
            let r = &y.data()[row * 4..][..4];
            for (j, want) in [0.0, 1.0, 2.0, 3.0].iter().enumerate() {
                assert!((r[j] - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn upsample_factor_one_is_identity() {
        let x = Tensor::from_vec([1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let y = upsample_bilinear(&x, 1).unwrap();
        assert_eq!(y, x);
    }
}
