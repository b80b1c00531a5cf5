use crate::tensor::Tensor;
use crate::{Result, TensorError};

pub const BN_EPS: f64 = 1e-5;

pub struct BatchNormOut {
    pub output: Tensor,
    /// Per-channel batch mean, needed for the running-statistics update.
    pub mean: Tensor,
    /// Per-channel biased batch variance.
    pub var: Tensor,
}

fn check_affine(c: usize, gamma: &Tensor, beta: &Tensor) -> Result<()> {
    if gamma.shape() != [c] || beta.shape() != [c] {
        return Err(TensorError::ShapeMismatch(format!(
            "batchnorm affine parameters must have shape [{}]",
            c
        )));
    }
    Ok(())
}

/// Batch normalization over the (n, h, w) axes of an NCHW tensor using the
/// batch statistics, as used during training.
pub fn batchnorm_train(x: &Tensor, gamma: &Tensor, beta: &Tensor) -> Result<BatchNormOut> {
    let (n, c, h, w) = x.dims4()?;
    check_affine(c, gamma, beta)?;
    let m = (n * h * w) as f64;
    let data = x.data();
    let plane = h * w;

    let mut mean = vec![0.0; c];
    let mut var = vec![0.0; c];
    for ch in 0..c {
        let mut acc = 0.0;
        for bi in 0..n {
            for v in &data[(bi * c + ch) * plane..][..plane] {
                acc += v;
            }
        }
        let mu = acc / m;
        let mut acc2 = 0.0;
        for bi in 0..n {
            for v in &data[(bi * c + ch) * plane..][..plane] {
                let d = v - mu;
                acc2 += d * d;
            }
        }
        mean[ch] = mu;
        var[ch] = acc2 / m;
    }

    let g = gamma.data();
    let b = beta.data();
    let mut out = vec![0.0; data.len()];
    for bi in 0..n {
        for ch in 0..c {
            let istd = 1.0 / (var[ch] + BN_EPS).sqrt();
            let (mu, gv, bv) = (mean[ch], g[ch], b[ch]);
            let src = &data[(bi * c + ch) * plane..][..plane];
            let dst = &mut out[(bi * c + ch) * plane..][..plane];
            for (o, v) in dst.iter_mut().zip(src) {
                *o = gv * (v - mu) * istd + bv;
            }
        }
    }
    Ok(BatchNormOut {
        output: Tensor::from_vec([n, c, h, w], out)?,
        mean: Tensor::from_vec([c], mean)?,
        var: Tensor::from_vec([c], var)?,
    })
}

pub struct BatchNormGrads {
    pub input: Tensor,
    pub gamma: Tensor,
    pub beta: Tensor,
}

pub fn batchnorm_train_backward(
    x: &Tensor,
    gamma: &Tensor,
    saved_mean: &Tensor,
    saved_var: &Tensor,
    grad_out: &Tensor,
) -> Result<BatchNormGrads> {
    let (n, c, h, w) = x.dims4()?;
    if grad_out.shape() != x.shape() {
        return Err(TensorError::ShapeMismatch("batchnorm grad_out mismatch".into()));
    }
    let m = (n * h * w) as f64;
    let plane = h * w;
    let data = x.data();
    let gy = grad_out.data();
    let g = gamma.data();
    let mean = saved_mean.data();
    let var = saved_var.data();

    let mut gx = vec![0.0; data.len()];
    let mut ggamma = vec![0.0; c];
    let mut gbeta = vec![0.0; c];

    for ch in 0..c {
        let mu = mean[ch];
        let istd = 1.0 / (var[ch] + BN_EPS).sqrt();
        let mut sum_gy = 0.0;
        let mut sum_gy_xhat = 0.0;
        for bi in 0..n {
            let xs = &data[(bi * c + ch) * plane..][..plane];
            let gs = &gy[(bi * c + ch) * plane..][..plane];
            for (xv, gv) in xs.iter().zip(gs) {
                let xhat = (xv - mu) * istd;
                sum_gy += gv;
                sum_gy_xhat += gv * xhat;
            }
        }
        ggamma[ch] = sum_gy_xhat;
        gbeta[ch] = sum_gy;
        let scale = g[ch] * istd / m;
        for bi in 0..n {
            let xs = &data[(bi * c + ch) * plane..][..plane];
            let gs = &gy[(bi * c + ch) * plane..][..plane];
            let dst = &mut gx[(bi * c + ch) * plane..][..plane];
            for ((dv, xv), gv) in dst.iter_mut().zip(xs).zip(gs) {
                let xhat = (xv - mu) * istd;
                *dv = scale * (m * gv - sum_gy - xhat * sum_gy_xhat);
            }
        }
    }
    Ok(BatchNormGrads {
        input: Tensor::from_vec([n, c, h, w], gx)?,
        gamma: Tensor::from_vec([c], ggamma)?,
        beta: Tensor::from_vec([c], gbeta)?,
    })
}

/// Inference-mode batch normalization with frozen running statistics.
pub fn batchnorm_infer(
    x: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
    running_mean: &Tensor,
    running_var: &Tensor,
) -> Result<Tensor> {
    let (n, c, h, w) = x.dims4()?;
    check_affine(c, gamma, beta)?;
    if running_mean.shape() != [c] || running_var.shape() != [c] {
        return Err(TensorError::ShapeMismatch(
            "running statistics must be per-channel".into(),
        ));
    }
    let plane = h * w;
    let data = x.data();
    let g = gamma.data();
    let b = beta.data();
    let mu = running_mean.data();
    let var = running_var.data();
    let mut out = vec![0.0; data.len()];
    for bi in 0..n {
        for ch in 0..c {
            let istd = 1.0 / (var[ch] + BN_EPS).sqrt();
            let src = &data[(bi * c + ch) * plane..][..plane];
            let dst = &mut out[(bi * c + ch) * plane..][..plane];
            for (o, v) in dst.iter_mut().zip(src) {
                *o = g[ch] * (v - mu[ch]) * istd + b[ch];
            }
        }
    }
    Tensor::from_vec([n, c, h, w], out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn normalizes_to_zero_mean_unit_var() {
        let x = Tensor::from_vec([2, 1, 1, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let out = batchnorm_train(&x, &Tensor::full([1], 1.0), &Tensor::zeros([1])).unwrap();
        assert!((out.mean.data()[0] - 2.5).abs() < 1e-12);
        let y = out.output;
        let mean: f64 = y.data().iter().sum::<f64>() / 4.0;
        assert!(mean.abs() < 1e-12);
    }

    #[test]
    fn infer_uses_running_stats() {
        let x = Tensor::from_vec([1, 1, 1, 2], vec![3.0, 5.0]).unwrap();
        let y = batchnorm_infer(
            &x,
            &Tensor::full([1], 2.0),
            &Tensor::full([1], 1.0),
            &Tensor::full([1], 3.0),
            &Tensor::full([1], 4.0),
        )
        .unwrap();
        // (3-3)/2 * 2 + 1 = 1, (5-3)/2 * 2 + 1 = 3 (up to eps in the sqrt)
        assert!((y.data()[0] - 1.0).abs() < 1e-5);
        assert!((y.data()[1] - 3.0).abs() < 1e-5);
    }
}
