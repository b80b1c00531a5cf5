use std::sync::Arc;

use crate::{Result, TensorError};

/// Dense N-dimensional array of 64-bit floats in row-major order.
///
/// Values are immutable once constructed; clones share the underlying buffer.
/// An optional gradient buffer of identical shape can be attached after a
/// backward pass (it is ignored by all forward operations).
#[derive(Clone, Debug)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Arc<Vec<f64>>,
    grad: Option<Arc<Vec<f64>>>,
}

impl Tensor {
    pub fn from_vec(shape: impl Into<Vec<usize>>, data: Vec<f64>) -> Result<Tensor> {
        let shape = shape.into();
        let expect: usize = shape.iter().product();
        if expect != data.len() {
            return Err(TensorError::ShapeMismatch(format!(
                "shape {:?} implies {} elements, got {}",
                shape,
                expect,
                data.len()
            )));
        }
        Ok(Tensor {
            shape,
            data: Arc::new(data),
            grad: None,
        })
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Tensor {
        let shape = shape.into();
        let n: usize = shape.iter().product();
        Tensor {
            shape,
            data: Arc::new(vec![0.0; n]),
            grad: None,
        }
    }

    pub fn full(shape: impl Into<Vec<usize>>, value: f64) -> Tensor {
        let shape = shape.into();
        let n: usize = shape.iter().product();
        Tensor {
            shape,
            data: Arc::new(vec![value; n]),
            grad: None,
        }
    }

    pub fn scalar(value: f64) -> Tensor {
        Tensor {
            shape: vec![1],
            data: Arc::new(vec![value]),
            grad: None,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// Scalar value of a single-element tensor.
    pub fn item(&self) -> Result<f64> {
        if self.len() != 1 {
            return Err(TensorError::Dimension(format!(
                "expected scalar, got shape {:?}",
                self.shape
            )));
        }
        Ok(self.data[0])
    }

    pub fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape[..] {
            [a, b] => Ok((a, b)),
            _ => Err(TensorError::Dimension(format!(
                "expected rank-2 tensor, got shape {:?}",
                self.shape
            ))),
        }
    }

    pub fn dims4(&self) -> Result<(usize, usize, usize, usize)> {
        match self.shape[..] {
            [n, c, h, w] => Ok((n, c, h, w)),
            _ => Err(TensorError::Dimension(format!(
                "expected rank-4 tensor, got shape {:?}",
                self.shape
            ))),
        }
    }

    pub fn same_shape(&self, other: &Tensor) -> bool {
        self.shape == other.shape
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        let data: Vec<f64> = self.data.iter().map(|&v| f(v)).collect();
        Tensor {
            shape: self.shape.clone(),
            data: Arc::new(data),
            grad: None,
        }
    }

    /// Attach a gradient buffer; shape must match.
    pub fn set_grad(&mut self, grad: Tensor) -> Result<()> {
        if grad.shape != self.shape {
            return Err(TensorError::ShapeMismatch(format!(
                "gradient shape {:?} does not match parameter shape {:?}",
                grad.shape, self.shape
            )));
        }
        self.grad = Some(grad.data);
        Ok(())
    }

    pub fn clear_grad(&mut self) {
        self.grad = None;
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref().map(|v| v.as_slice())
    }

    /// Error if any element is NaN or infinite. `what` names the tensor in
    /// the error message.
    pub fn ensure_finite(&self, what: &str) -> Result<()> {
        for (i, v) in self.data.iter().enumerate() {
            if !v.is_finite() {
                return Err(TensorError::Numeric {
                    name: what.to_string(),
                    detail: format!("non-finite value {} at flat index {}", v, i),
                });
            }
        }
        Ok(())
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        assert_eq!(self.shape, other.shape, "max_abs_diff shape mismatch");
        self.data
            .iter()
            .zip(other.data.iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

impl PartialEq for Tensor {
    fn eq(&self, other: &Self) -> bool {
        self.shape == other.shape && *self.data == *other.data
    }
}

/// Weights and bias of a 2-D convolution plus its stride/padding.
///
/// Weight layout is `[out_channels, in_channels, kernel_h, kernel_w]`,
/// padding is zero-fill on all four sides.
#[derive(Clone, Debug)]
pub struct ConvParams {
    pub weight: Tensor,
    pub bias: Tensor,
    pub stride: usize,
    pub padding: usize,
}

impl ConvParams {
    pub fn new(weight: Tensor, bias: Tensor, stride: usize, padding: usize) -> Result<ConvParams> {
        let (out_c, _, kh, kw) = weight.dims4()?;
        if kh == 0 || kw == 0 {
            return Err(TensorError::Validation(
                "kernel extents must be >= 1".into(),
            ));
        }
        if stride == 0 {
            return Err(TensorError::Validation("stride must be >= 1".into()));
        }
        if bias.shape() != [out_c] {
            return Err(TensorError::ShapeMismatch(format!(
                "bias shape {:?} does not match {} output channels",
                bias.shape(),
                out_c
            )));
        }
        Ok(ConvParams {
            weight,
            bias,
            stride,
            padding,
        })
    }

    pub fn out_channels(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn in_channels(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn kernel(&self) -> (usize, usize) {
        (self.weight.shape()[2], self.weight.shape()[3])
    }
}

/// Per-location 2-D sampling offsets for a deformable convolution.
///
/// Shape is `[n, 2*kh*kw, out_h, out_w]`; for kernel tap `t` (row-major over
/// the kernel grid) channel `2t` holds the row offset and `2t+1` the column
/// offset, both in pixels of the input map.
#[derive(Clone, Debug)]
pub struct OffsetField {
    tensor: Tensor,
    kernel: (usize, usize),
}

impl OffsetField {
    pub fn new(tensor: Tensor, kh: usize, kw: usize) -> Result<OffsetField> {
        let (_, c, _, _) = tensor.dims4()?;
        if c != 2 * kh * kw {
            return Err(TensorError::ShapeMismatch(format!(
                "offset field has {} channels, expected {} for a {}x{} kernel",
                c,
                2 * kh * kw,
                kh,
                kw
            )));
        }
        Ok(OffsetField {
            tensor,
            kernel: (kh, kw),
        })
    }

    pub fn zeros(n: usize, kh: usize, kw: usize, out_h: usize, out_w: usize) -> OffsetField {
        OffsetField {
            tensor: Tensor::zeros([n, 2 * kh * kw, out_h, out_w]),
            kernel: (kh, kw),
        }
    }

    pub fn tensor(&self) -> &Tensor {
        &self.tensor
    }

    pub fn kernel(&self) -> (usize, usize) {
        self.kernel
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn from_vec_checks_element_count() {
        assert!(Tensor::from_vec([2, 2], vec![1.0, 2.0, 3.0]).is_err());
        assert!(Tensor::from_vec([2, 2], vec![1.0, 2.0, 3.0, 4.0]).is_ok());
    }

    #[test]
    fn grad_shape_enforced() {
        let mut t = Tensor::zeros([2, 3]);
        assert!(t.set_grad(Tensor::zeros([3, 2])).is_err());
        assert!(t.set_grad(Tensor::zeros([2, 3])).is_ok());
        assert!(t.grad().is_some());
        t.clear_grad();
        assert!(t.grad().is_none());
    }

    #[test]
    fn ensure_finite_reports_name() {
        let t = Tensor::from_vec([2], vec![1.0, f64::NAN]).unwrap();
        let err = t.ensure_finite("conv1.weight").unwrap_err();
        assert!(err.to_string().contains("conv1.weight"));
    }

    #[test]
    fn conv_params_validation() {
        let w = Tensor::zeros([4, 3, 3, 3]);
        let b = Tensor::zeros([4]);
        assert!(ConvParams::new(w.clone(), b.clone(), 1, 1).is_ok());
        assert!(ConvParams::new(w.clone(), Tensor::zeros([5]), 1, 1).is_err());
        assert!(ConvParams::new(w, b, 0, 1).is_err());
    }

    #[test]
    fn offset_field_channel_check() {
        assert!(OffsetField::new(Tensor::zeros([1, 18, 4, 4]), 3, 3).is_ok());
        assert!(OffsetField::new(Tensor::zeros([1, 17, 4, 4]), 3, 3).is_err());
    }
}
