use crate::tensor::Tensor;
use crate::{Result, TensorError};

/// Row-wise affine map: `[n, d_in] x [d_out, d_in] + [d_out] -> [n, d_out]`.
pub fn linear(input: &Tensor, weight: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let (n, d_in) = input.dims2()?;
    let (d_out, wd) = weight.dims2()?;
    if wd != d_in || bias.shape() != [d_out] {
        return Err(TensorError::Dimension(format!(
            "linear: input {:?}, weight {:?}, bias {:?}",
            input.shape(),
            weight.shape(),
            bias.shape()
        )));
    }
    let x = input.data();
    let w = weight.data();
    let b = bias.data();
    let mut out = vec![0.0; n * d_out];
    for i in 0..n {
        let row = &x[i * d_in..][..d_in];
        for o in 0..d_out {
            let wr = &w[o * d_in..][..d_in];
            let mut acc = b[o];
            for (xv, wv) in row.iter().zip(wr) {
                acc += xv * wv;
            }
            out[i * d_out + o] = acc;
        }
    }
    Tensor::from_vec([n, d_out], out)
}

pub struct LinearGrads {
    pub input: Tensor,
    pub weight: Tensor,
    pub bias: Tensor,
}

pub fn linear_backward(input: &Tensor, weight: &Tensor, grad_out: &Tensor) -> Result<LinearGrads> {
    let (n, d_in) = input.dims2()?;
    let (d_out, _) = weight.dims2()?;
    if grad_out.shape() != [n, d_out] {
        return Err(TensorError::ShapeMismatch(
            "linear grad_out shape mismatch".into(),
        ));
    }
    let x = input.data();
    let w = weight.data();
    let gy = grad_out.data();

    let mut gx = vec![0.0; n * d_in];
    for i in 0..n {
        for o in 0..d_out {
            let g = gy[i * d_out + o];
            if g == 0.0 {
                continue;
            }
            let wr = &w[o * d_in..][..d_in];
            let gr = &mut gx[i * d_in..][..d_in];
            for (gv, wv) in gr.iter_mut().zip(wr) {
                *gv += g * wv;
            }
        }
    }
    let mut gw = vec![0.0; d_out * d_in];
    for o in 0..d_out {
        let gr = &mut gw[o * d_in..][..d_in];
        for i in 0..n {
            let g = gy[i * d_out + o];
            if g == 0.0 {
                continue;
            }
            let row = &x[i * d_in..][..d_in];
            for (gv, xv) in gr.iter_mut().zip(row) {
                *gv += g * xv;
            }
        }
    }
    let mut gb = vec![0.0; d_out];
    for i in 0..n {
        for o in 0..d_out {
            gb[o] += gy[i * d_out + o];
        }
    }
    Ok(LinearGrads {
        input: Tensor::from_vec([n, d_in], gx)?,
        weight: Tensor::from_vec([d_out, d_in], gw)?,
        bias: Tensor::from_vec([d_out], gb)?,
    })
}

pub fn relu(input: &Tensor) -> Tensor {
    input.map(|v| v.max(0.0))
}

pub fn relu_backward(input: &Tensor, grad_out: &Tensor) -> Tensor {
    let data: Vec<f64> = input
        .data()
        .iter()
        .zip(grad_out.data())
        .map(|(&x, &g)| if x > 0.0 { g } else { 0.0 })
        .collect();
    Tensor::from_vec(input.shape().to_vec(), data).expect("same shape")
}

pub fn sigmoid(input: &Tensor) -> Tensor {
    input.map(|v| 1.0 / (1.0 + (-v).exp()))
}

/// Backward through sigmoid given the forward *output*.
pub fn sigmoid_backward(output: &Tensor, grad_out: &Tensor) -> Tensor {
    let data: Vec<f64> = output
        .data()
        .iter()
        .zip(grad_out.data())
        .map(|(&y, &g)| g * y * (1.0 - y))
        .collect();
    Tensor::from_vec(output.shape().to_vec(), data).expect("same shape")
}

/// Global average pool: `[n, c, h, w] -> [n, c]`.
pub fn global_avg_pool(input: &Tensor) -> Result<Tensor> {
    let (n, c, h, w) = input.dims4()?;
    let x = input.data();
    let m = (h * w) as f64;
    let mut out = vec![0.0; n * c];
    for plane in 0..n * c {
        let mut acc = 0.0;
        for v in &x[plane * h * w..][..h * w] {
            acc += v;
        }
        out[plane] = acc / m;
    }
    Tensor::from_vec([n, c], out)
}

pub fn global_avg_pool_backward(input_shape: &[usize], grad_out: &Tensor) -> Result<Tensor> {
    let [n, c, h, w] = input_shape else {
        return Err(TensorError::Dimension("expected NCHW input shape".into()));
    };
    let (n, c, h, w) = (*n, *c, *h, *w);
    if grad_out.shape() != [n, c] {
        return Err(TensorError::ShapeMismatch("gap grad_out mismatch".into()));
    }
    let m = (h * w) as f64;
    let mut gx = vec![0.0; n * c * h * w];
    for plane in 0..n * c {
        let g = grad_out.data()[plane] / m;
        for v in &mut gx[plane * h * w..][..h * w] {
            *v = g;
        }
    }
    Tensor::from_vec([n, c, h, w], gx)
}

/// Column-wise maximum over the rows of an `[m, d]` matrix, yielding `[1, d]`.
/// Ties go to the first maximal row. Also returns per-column argmax rows.
pub fn rowmax_with_indices(input: &Tensor) -> Result<(Tensor, Vec<usize>)> {
    let (m, d) = input.dims2()?;
    if m == 0 {
        return Err(TensorError::Validation("rowmax of empty matrix".into()));
    }
    let x = input.data();
    let mut out = vec![f64::NEG_INFINITY; d];
    let mut arg = vec![0usize; d];
    for i in 0..m {
        for j in 0..d {
            let v = x[i * d + j];
            if v > out[j] {
                out[j] = v;
                arg[j] = i;
            }
        }
    }
    Ok((Tensor::from_vec([1, d], out)?, arg))
}

pub fn rowmax_backward(indices: &[usize], input_shape: &[usize], grad_out: &Tensor) -> Result<Tensor> {
    let [m, d] = input_shape else {
        return Err(TensorError::Dimension("expected [m, d] input shape".into()));
    };
    let (m, d) = (*m, *d);
    if grad_out.shape() != [1, d] {
        return Err(TensorError::ShapeMismatch("rowmax grad_out mismatch".into()));
    }
    let mut gx = vec![0.0; m * d];
    for j in 0..d {
        gx[indices[j] * d + j] = grad_out.data()[j];
    }
    Tensor::from_vec([m, d], gx)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_identity_weight() {
        let x = Tensor::from_vec([2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let w = Tensor::from_vec([2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let y = linear(&x, &w, &Tensor::zeros([2])).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn linear_zero_weight_yields_bias() {
        let x = Tensor::from_vec([3, 2], vec![0.5; 6]).unwrap();
        let w = Tensor::zeros([2, 2]);
        let b = Tensor::from_vec([2], vec![-1.0, 4.0]).unwrap();
        let y = linear(&x, &w, &b).unwrap();
        for row in 0..3 {
            assert_eq!(&y.data()[row * 2..][..2], &[-1.0, 4.0]);
        }
    }

    #[test]
    fn linear_hand_product() {
        let x = Tensor::from_vec([1, 2], vec![1.0, 2.0]).unwrap();
        let w = Tensor::from_vec([2, 2], vec![1.0, 1.0, 1.0, -1.0]).unwrap();
        let y = linear(&x, &w, &Tensor::zeros([2])).unwrap();
        assert_eq!(y.data(), &[3.0, -1.0]);
    }

    #[test]
    fn activations_closed_form() {
        let x = Tensor::from_vec([3], vec![-1.0, 0.0, 2.0]).unwrap();
        let r = relu(&x);
        assert_eq!(r.data(), &[0.0, 0.0, 2.0]);
        let s = sigmoid(&Tensor::scalar(0.0));
        assert_eq!(s.data()[0], 0.5);
        let s = sigmoid(&Tensor::scalar(3.0f64.ln()));
        assert!((s.data()[0] - 0.75).abs() < 1e-12);
    }

    #[test]
    fn gap_means_planes() {
        let x = Tensor::from_vec([1, 2, 2, 2], vec![1.0, 2.0, 3.0, 4.0, 10.0, 10.0, 10.0, 10.0])
            .unwrap();
        let y = global_avg_pool(&x).unwrap();
        assert_eq!(y.shape(), &[1, 2]);
        assert_eq!(y.data(), &[2.5, 10.0]);
    }

    #[test]
    fn rowmax_first_occurrence() {
        let x = Tensor::from_vec([3, 2], vec![1.0, 5.0, 4.0, 5.0, 4.0, 2.0]).unwrap();
        let (y, idx) = rowmax_with_indices(&x).unwrap();
        assert_eq!(y.data(), &[4.0, 5.0]);
        assert_eq!(idx, vec![1, 0]);
    }
}
