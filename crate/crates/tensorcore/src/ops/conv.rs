use rayon::prelude::*;

use crate::tensor::{ConvParams, Tensor};
use crate::{Result, TensorError};

/// Output extent of a convolution along one axis: `(in + 2*pad - k) / stride + 1`.
pub fn conv_out_extent(input: usize, kernel: usize, stride: usize, pad: usize) -> Result<usize> {
    if input + 2 * pad < kernel {
        return Err(TensorError::Dimension(format!(
            "kernel {} larger than padded input {}",
            kernel,
            input + 2 * pad
        )));
    }
    Ok((input + 2 * pad - kernel) / stride + 1)
}

/// Range of output indices whose sampled input index `o*stride + k - pad`
/// falls inside `[0, in_extent)`.
fn valid_out_range(
    k: usize,
    stride: usize,
    pad: usize,
    in_extent: usize,
    out_extent: usize,
) -> (usize, usize) {
    let start = if k >= pad {
        0
    } else {
        (pad - k).div_ceil(stride)
    };
    if in_extent + pad <= k {
        return (0, 0);
    }
    let end = ((in_extent - 1 + pad - k) / stride + 1).min(out_extent);
    (start.min(end), end)
}

/// Direct 2-D convolution with zero padding, NCHW layout.
///
/// This is the reference semantics: a plain nested-loop sum, no im2col or
/// FFT tricks, so it doubles as the oracle for the deformable variant.
pub fn conv2d(input: &Tensor, params: &ConvParams) -> Result<Tensor> {
    let (n, in_c, h, w) = input.dims4()?;
    let out_c = params.out_channels();
    if params.in_channels() != in_c {
        return Err(TensorError::Dimension(format!(
            "input has {} channels, weight expects {}",
            in_c,
            params.in_channels()
        )));
    }
    let (kh, kw) = params.kernel();
    let (stride, pad) = (params.stride, params.padding);
    let out_h = conv_out_extent(h, kh, stride, pad)?;
    let out_w = conv_out_extent(w, kw, stride, pad)?;

    let x = input.data();
    let wt = params.weight.data();
    let bias = params.bias.data();
    let mut out = vec![0.0; n * out_c * out_h * out_w];

    out.par_chunks_mut(out_h * out_w)
        .enumerate()
        .for_each(|(chunk, acc)| {
            let (bi, oc) = (chunk / out_c, chunk % out_c);
            for ic in 0..in_c {
                let x_plane = &x[(bi * in_c + ic) * h * w..][..h * w];
                for ku in 0..kh {
                    let (oh0, oh1) = valid_out_range(ku, stride, pad, h, out_h);
                    for kv in 0..kw {
                        let wv = wt[((oc * in_c + ic) * kh + ku) * kw + kv];
                        if wv == 0.0 {
                            continue;
                        }
                        let (ow0, ow1) = valid_out_range(kv, stride, pad, w, out_w);
                        for oh in oh0..oh1 {
                            let ih = oh * stride + ku - pad;
                            let x_row = &x_plane[ih * w..][..w];
                            let acc_row = &mut acc[oh * out_w..][..out_w];
                            for ow in ow0..ow1 {
                                acc_row[ow] += wv * x_row[ow * stride + kv - pad];
                            }
                        }
                    }
                }
            }
            let b = bias[oc];
            if b != 0.0 {
                for v in acc.iter_mut() {
                    *v += b;
                }
            }
        });

    Tensor::from_vec([n, out_c, out_h, out_w], out)
}

pub struct ConvGrads {
    pub input: Tensor,
    pub weight: Tensor,
    pub bias: Tensor,
}

pub fn conv2d_backward(
    input: &Tensor,
    params: &ConvParams,
    grad_out: &Tensor,
) -> Result<ConvGrads> {
    let (n, in_c, h, w) = input.dims4()?;
    let out_c = params.out_channels();
    let (kh, kw) = params.kernel();
    let (stride, pad) = (params.stride, params.padding);
    let (gn, goc, out_h, out_w) = grad_out.dims4()?;
    if gn != n
        || goc != out_c
        || out_h != conv_out_extent(h, kh, stride, pad)?
        || out_w != conv_out_extent(w, kw, stride, pad)?
    {
        return Err(TensorError::ShapeMismatch(format!(
            "grad_out shape {:?} inconsistent with conv output",
            grad_out.shape()
        )));
    }

    let x = input.data();
    let wt = params.weight.data();
    let gy = grad_out.data();

    // d/dinput: for every (batch, in-channel) plane, walk the same output
    // enumeration as the forward pass and push contributions back.
    let mut gx = vec![0.0; x.len()];
    gx.par_chunks_mut(h * w).enumerate().for_each(|(chunk, g)| {
        let (bi, ic) = (chunk / in_c, chunk % in_c);
        for oc in 0..out_c {
            let gy_plane = &gy[(bi * out_c + oc) * out_h * out_w..][..out_h * out_w];
            for ku in 0..kh {
                let (oh0, oh1) = valid_out_range(ku, stride, pad, h, out_h);
                for kv in 0..kw {
                    let wv = wt[((oc * in_c + ic) * kh + ku) * kw + kv];
                    if wv == 0.0 {
                        continue;
                    }
                    let (ow0, ow1) = valid_out_range(kv, stride, pad, w, out_w);
                    for oh in oh0..oh1 {
                        let ih = oh * stride + ku - pad;
                        let g_row = &mut g[ih * w..][..w];
                        let gy_row = &gy_plane[oh * out_w..][..out_w];
                        for ow in ow0..ow1 {
                            g_row[ow * stride + kv - pad] += wv * gy_row[ow];
                        }
                    }
                }
            }
        }
    });

    let mut gw = vec![0.0; wt.len()];
    gw.par_chunks_mut(in_c * kh * kw)
        .enumerate()
        .for_each(|(oc, g)| {
            for ic in 0..in_c {
                for ku in 0..kh {
                    let (oh0, oh1) = valid_out_range(ku, stride, pad, h, out_h);
                    for kv in 0..kw {
                        let (ow0, ow1) = valid_out_range(kv, stride, pad, w, out_w);
                        let mut acc = 0.0;
                        for bi in 0..n {
                            let x_plane = &x[(bi * in_c + ic) * h * w..][..h * w];
                            let gy_plane =
                                &gy[(bi * out_c + oc) * out_h * out_w..][..out_h * out_w];
                            for oh in oh0..oh1 {
                                let ih = oh * stride + ku - pad;
                                let x_row = &x_plane[ih * w..][..w];
                                let gy_row = &gy_plane[oh * out_w..][..out_w];
                                for ow in ow0..ow1 {
                                    acc += gy_row[ow] * x_row[ow * stride + kv - pad];
                                }
                            }
                        }
                        g[(ic * kh + ku) * kw + kv] = acc;
                    }
                }
            }
        });

    let mut gb = vec![0.0; out_c];
    for (oc, g) in gb.iter_mut().enumerate() {
        let mut acc = 0.0;
        for bi in 0..n {
            let plane = &gy[(bi * out_c + oc) * out_h * out_w..][..out_h * out_w];
            for v in plane {
                acc += v;
            }
        }
        *g = acc;
    }

    Ok(ConvGrads {
        input: Tensor::from_vec([n, in_c, h, w], gx)?,
        weight: Tensor::from_vec(params.weight.shape().to_vec(), gw)?,
        bias: Tensor::from_vec([out_c], gb)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t4(n: usize, c: usize, h: usize, w: usize, data: Vec<f64>) -> Tensor {
        Tensor::from_vec([n, c, h, w], data).unwrap()
    }

    #[test]
    fn scalar_multiply() {
        let x = t4(1, 1, 1, 1, vec![2.0]);
        let p = ConvParams::new(t4(1, 1, 1, 1, vec![3.0]), Tensor::zeros([1]), 1, 0).unwrap();
        let y = conv2d(&x, &p).unwrap();
        assert_eq!(y.data(), &[6.0]);
    }

    #[test]
    fn identity_kernel_preserves_input() {
        let x = t4(1, 1, 4, 5, (0..20).map(|v| v as f64).collect());
        let mut k = vec![0.0; 9];
        k[4] = 1.0;
        let p = ConvParams::new(t4(1, 1, 3, 3, k), Tensor::zeros([1]), 1, 1).unwrap();
        let y = conv2d(&x, &p).unwrap();
        assert_eq!(y.shape(), x.shape());
        assert_eq!(y.data(), x.data());
    }

    #[test]
    fn all_ones_sum() {
        let x = t4(1, 1, 3, 3, vec![1.0; 9]);
        let p = ConvParams::new(t4(1, 1, 3, 3, vec![1.0; 9]), Tensor::zeros([1]), 1, 0).unwrap();
        let y = conv2d(&x, &p).unwrap();
        assert_eq!(y.shape(), &[1, 1, 1, 1]);
        assert_eq!(y.data(), &[9.0]);
    }

    #[test]
    fn channel_mismatch_is_error() {
        let x = t4(1, 2, 3, 3, vec![0.0; 18]);
        let p = ConvParams::new(Tensor::zeros([1, 3, 3, 3]), Tensor::zeros([1]), 1, 1).unwrap();
        assert!(conv2d(&x, &p).is_err());
    }

    #[test]
    fn stride_two_extent() {
        let x = t4(1, 1, 5, 5, vec![1.0; 25]);
        let p = ConvParams::new(Tensor::full([1, 1, 3, 3], 1.0), Tensor::zeros([1]), 2, 1).unwrap();
        let y = conv2d(&x, &p).unwrap();
        assert_eq!(y.shape(), &[1, 1, 3, 3]);
        // Center window sees all nine ones.
        assert_eq!(y.data()[4], 9.0);
        // Corner window is padded on two sides.
        assert_eq!(y.data()[0], 4.0);
    }

    #[test]
    fn linearity_in_input() {
        let x = t4(1, 1, 4, 4, (0..16).map(|v| v as f64 * 0.25).collect());
        let z = t4(1, 1, 4, 4, (0..16).map(|v| ((v * 7) % 5) as f64).collect());
        let p = ConvParams::new(
            t4(1, 1, 3, 3, (0..9).map(|v| v as f64 - 4.0).collect()),
            Tensor::zeros([1]),
            1,
            1,
        )
        .unwrap();
        let (a, b) = (1.5, -0.75);
        let mixed: Vec<f64> = x
            .data()
            .iter()
            .zip(z.data())
            .map(|(xv, zv)| a * xv + b * zv)
            .collect();
        let lhs = conv2d(&t4(1, 1, 4, 4, mixed), &p).unwrap();
        let ya = conv2d(&x, &p).unwrap();
        let yb = conv2d(&z, &p).unwrap();
        for i in 0..lhs.len() {
            let rhs = a * ya.data()[i] + b * yb.data()[i];
            assert!((lhs.data()[i] - rhs).abs() < 1e-9);
        }
    }
}
