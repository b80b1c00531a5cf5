use crate::ops;
use crate::tensor::{ConvParams, OffsetField, Tensor};
use crate::{Result, TensorError};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct VarId(usize);

type GradSink<'a> = dyn FnMut(VarId, Tensor) + 'a;
type GradFn = Box<dyn Fn(&Tensor, &mut GradSink)>;

struct Node {
    value: Tensor,
    grad_fn: Option<GradFn>,
}

/// Reverse-mode autodiff tape.
///
/// Forward calls record the values and a backward closure per node;
/// [`Tape::backward`] replays them in reverse insertion order, which makes
/// gradient accumulation order — and therefore every result — deterministic.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Tape {
        Tape::default()
    }

    fn push(&mut self, value: Tensor, grad_fn: Option<GradFn>) -> VarId {
        self.nodes.push(Node { value, grad_fn });
        VarId(self.nodes.len() - 1)
    }

    /// Record an input or parameter.
    pub fn leaf(&mut self, value: Tensor) -> VarId {
        self.push(value, None)
    }

    pub fn value(&self, id: VarId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn conv2d(
        &mut self,
        x: VarId,
        weight: VarId,
        bias: VarId,
        stride: usize,
        padding: usize,
    ) -> Result<VarId> {
        let params = ConvParams::new(
            self.value(weight).clone(),
            self.value(bias).clone(),
            stride,
            padding,
        )?;
        let x_val = self.value(x).clone();
        let y = ops::conv2d(&x_val, &params)?;
        let grad_fn: GradFn = Box::new(move |gy, sink| {
            let g = ops::conv2d_backward(&x_val, &params, gy).expect("conv2d backward");
            sink(x, g.input);
            sink(weight, g.weight);
            sink(bias, g.bias);
        });
        Ok(self.push(y, Some(grad_fn)))
    }

    pub fn deform_conv2d(
        &mut self,
        x: VarId,
        weight: VarId,
        bias: VarId,
        offsets: VarId,
        stride: usize,
        padding: usize,
    ) -> Result<VarId> {
        let params = ConvParams::new(
            self.value(weight).clone(),
            self.value(bias).clone(),
            stride,
            padding,
        )?;
        let (kh, kw) = params.kernel();
        let field = OffsetField::new(self.value(offsets).clone(), kh, kw)?;
        let x_val = self.value(x).clone();
        let y = ops::deform_conv2d(&x_val, &params, &field)?;
        let grad_fn: GradFn = Box::new(move |gy, sink| {
            let g = ops::deform_conv2d_backward(&x_val, &params, &field, gy)
                .expect("deform_conv2d backward");
            sink(x, g.input);
            sink(weight, g.weight);
            sink(bias, g.bias);
            sink(offsets, g.offsets);
        });
        Ok(self.push(y, Some(grad_fn)))
    }

    pub fn maxpool2d(&mut self, x: VarId) -> Result<VarId> {
        let x_val = self.value(x).clone();
        let (y, indices) = ops::maxpool2d_with_indices(&x_val)?;
        let in_shape = x_val.shape().to_vec();
        let in_len = x_val.len();
        let grad_fn: GradFn = Box::new(move |gy, sink| {
            let flat = ops::maxpool2d_backward(&indices, in_len, gy).expect("maxpool backward");
            let g = Tensor::from_vec(in_shape.clone(), flat.data().to_vec()).expect("reshape");
            sink(x, g);
        });
        Ok(self.push(y, Some(grad_fn)))
    }

    pub fn upsample_bilinear(&mut self, x: VarId, factor: usize) -> Result<VarId> {
        let x_val = self.value(x).clone();
        let y = ops::upsample_bilinear(&x_val, factor)?;
        let in_shape = x_val.shape().to_vec();
        let grad_fn: GradFn = Box::new(move |gy, sink| {
            let g = ops::upsample_bilinear_backward(&in_shape, factor, gy)
                .expect("upsample backward");
            sink(x, g);
        });
        Ok(self.push(y, Some(grad_fn)))
    }

    pub fn linear(&mut self, x: VarId, weight: VarId, bias: VarId) -> Result<VarId> {
        let x_val = self.value(x).clone();
        let w_val = self.value(weight).clone();
        let y = ops::linear(&x_val, &w_val, self.value(bias))?;
        let grad_fn: GradFn = Box::new(move |gy, sink| {
            let g = ops::linear_backward(&x_val, &w_val, gy).expect("linear backward");
            sink(x, g.input);
            sink(weight, g.weight);
            sink(bias, g.bias);
        });
        Ok(self.push(y, Some(grad_fn)))
    }

    pub fn relu(&mut self, x: VarId) -> VarId {
        let x_val = self.value(x).clone();
        let y = ops::relu(&x_val);
        let grad_fn: GradFn = Box::new(move |gy, sink| {
            sink(x, ops::relu_backward(&x_val, gy));
        });
        self.push(y, Some(grad_fn))
    }

    pub fn sigmoid(&mut self, x: VarId) -> VarId {
        let y = ops::sigmoid(self.value(x));
        let y_val = y.clone();
        let grad_fn: GradFn = Box::new(move |gy, sink| {
            sink(x, ops::sigmoid_backward(&y_val, gy));
        });
        self.push(y, Some(grad_fn))
    }

    /// Training-mode batch normalization. Returns the output together with
    /// the batch mean/variance so the caller can fold them into running
    /// statistics.
    pub fn batchnorm_train(
        &mut self,
        x: VarId,
        gamma: VarId,
        beta: VarId,
    ) -> Result<(VarId, Tensor, Tensor)> {
        let x_val = self.value(x).clone();
        let gamma_val = self.value(gamma).clone();
        let out = ops::batchnorm_train(&x_val, &gamma_val, self.value(beta))?;
        let (mean, var) = (out.mean.clone(), out.var.clone());
        let (saved_mean, saved_var) = (out.mean, out.var);
        let grad_fn: GradFn = Box::new(move |gy, sink| {
            let g = ops::batchnorm_train_backward(&x_val, &gamma_val, &saved_mean, &saved_var, gy)
                .expect("batchnorm backward");
            sink(x, g.input);
            sink(gamma, g.gamma);
            sink(beta, g.beta);
        });
        let id = self.push(out.output, Some(grad_fn));
        Ok((id, mean, var))
    }

    /// Inference-mode batch normalization with frozen statistics.
    pub fn batchnorm_infer(
        &mut self,
        x: VarId,
        gamma: VarId,
        beta: VarId,
        running_mean: &Tensor,
        running_var: &Tensor,
    ) -> Result<VarId> {
        let x_val = self.value(x).clone();
        let gamma_val = self.value(gamma).clone();
        let y = ops::batchnorm_infer(
            &x_val,
            &gamma_val,
            self.value(beta),
            running_mean,
            running_var,
        )?;
        let mean = running_mean.clone();
        let var = running_var.clone();
        let grad_fn: GradFn = Box::new(move |gy, sink| {
            // Frozen stats: y = gamma * (x - mean) * istd + beta, an affine map.
            let (_, c, _, _) = x_val.dims4().expect("checked");
            let plane: usize = x_val.shape()[2] * x_val.shape()[3];
            let n = x_val.shape()[0];
            let mut gx = vec![0.0; x_val.len()];
            let mut ggamma = vec![0.0; c];
            let mut gbeta = vec![0.0; c];
            for bi in 0..n {
                for ch in 0..c {
                    let istd = 1.0 / (var.data()[ch] + ops::BN_EPS).sqrt();
                    let base = (bi * c + ch) * plane;
                    for p in 0..plane {
                        let g = gy.data()[base + p];
                        gx[base + p] = g * gamma_val.data()[ch] * istd;
                        ggamma[ch] += g * (x_val.data()[base + p] - mean.data()[ch]) * istd;
                        gbeta[ch] += g;
                    }
                }
            }
            sink(x, Tensor::from_vec(x_val.shape().to_vec(), gx).expect("shape"));
            sink(gamma, Tensor::from_vec(vec![c], ggamma).expect("shape"));
            sink(beta, Tensor::from_vec(vec![c], gbeta).expect("shape"));
        });
        Ok(self.push(y, Some(grad_fn)))
    }

    pub fn global_avg_pool(&mut self, x: VarId) -> Result<VarId> {
        let x_val = self.value(x).clone();
        let y = ops::global_avg_pool(&x_val)?;
        let in_shape = x_val.shape().to_vec();
        let grad_fn: GradFn = Box::new(move |gy, sink| {
            let g = ops::global_avg_pool_backward(&in_shape, gy).expect("gap backward");
            sink(x, g);
        });
        Ok(self.push(y, Some(grad_fn)))
    }

    /// Column-wise max over rows: `[m, d] -> [1, d]`.
    pub fn rowmax(&mut self, x: VarId) -> Result<VarId> {
        let x_val = self.value(x).clone();
        let (y, indices) = ops::rowmax_with_indices(&x_val)?;
        let in_shape = x_val.shape().to_vec();
        let grad_fn: GradFn = Box::new(move |gy, sink| {
            let g = ops::rowmax_backward(&indices, &in_shape, gy).expect("rowmax backward");
            sink(x, g);
        });
        Ok(self.push(y, Some(grad_fn)))
    }

    /// Mean binary cross entropy against a constant target; returns a scalar.
    pub fn bce_loss(&mut self, pred: VarId, target: &Tensor) -> Result<VarId> {
        let pred_val = self.value(pred).clone();
        let loss = ops::bce_loss(&pred_val, target)?;
        let target = target.clone();
        let grad_fn: GradFn = Box::new(move |gy, sink| {
            let scale = gy.data()[0];
            let g = ops::bce_loss_backward(&pred_val, &target).expect("bce backward");
            sink(pred, g.map(|v| v * scale));
        });
        Ok(self.push(Tensor::scalar(loss), Some(grad_fn)))
    }

    /// Scalar projection against a constant: `sum(coeffs * x)`.
    pub fn dot_const(&mut self, x: VarId, coeffs: &Tensor) -> Result<VarId> {
        let v = self.value(x);
        if v.shape() != coeffs.shape() {
            return Err(TensorError::ShapeMismatch(format!(
                "dot_const: value shape {:?} vs coeff shape {:?}",
                v.shape(),
                coeffs.shape()
            )));
        }
        let mut acc = 0.0;
        for (a, b) in v.data().iter().zip(coeffs.data()) {
            acc += a * b;
        }
        let coeffs = coeffs.clone();
        let grad_fn: GradFn = Box::new(move |gy, sink| {
            let scale = gy.data()[0];
            sink(x, coeffs.map(|c| c * scale));
        });
        Ok(self.push(Tensor::scalar(acc), Some(grad_fn)))
    }

    /// Linear combination of same-shape values: `sum(coeff_i * v_i)`.
    pub fn weighted_sum(&mut self, terms: &[(f64, VarId)]) -> Result<VarId> {
        let Some(&(_, first)) = terms.first() else {
            return Err(TensorError::Validation("weighted_sum of no terms".into()));
        };
        let shape = self.value(first).shape().to_vec();
        let mut acc = vec![0.0; self.value(first).len()];
        for &(coeff, id) in terms {
            let v = self.value(id);
            if v.shape() != shape {
                return Err(TensorError::ShapeMismatch(
                    "weighted_sum over mixed shapes".into(),
                ));
            }
            for (a, x) in acc.iter_mut().zip(v.data()) {
                *a += coeff * x;
            }
        }
        let terms = terms.to_vec();
        let grad_fn: GradFn = Box::new(move |gy, sink| {
            for &(coeff, id) in &terms {
                sink(id, gy.map(|v| coeff * v));
            }
        });
        Ok(self.push(Tensor::from_vec(shape, acc)?, Some(grad_fn)))
    }

    /// Backpropagate from a scalar root, returning one gradient per reachable
    /// tape node.
    pub fn backward(&self, root: VarId) -> Result<Gradients> {
        if self.value(root).len() != 1 {
            return Err(TensorError::Dimension(format!(
                "backward root must be scalar, got shape {:?}",
                self.value(root).shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(Tensor::scalar(1.0));
        for id in (0..=root.0).rev() {
            let Some(gy) = grads[id].clone() else { continue };
            let Some(grad_fn) = &self.nodes[id].grad_fn else {
                continue;
            };
            let mut sink = |pid: VarId, contrib: Tensor| {
                match &mut grads[pid.0] {
                    slot @ None => *slot = Some(contrib),
                    Some(existing) => {
                        let sum: Vec<f64> = existing
                            .data()
                            .iter()
                            .zip(contrib.data())
                            .map(|(a, b)| a + b)
                            .collect();
                        *existing = Tensor::from_vec(existing.shape().to_vec(), sum)
                            .expect("accumulation shape");
                    }
                }
            };
            grad_fn(&gy, &mut sink);
        }
        Ok(Gradients { grads })
    }
}

/// Result of a backward pass, indexed by the tape's [`VarId`]s.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, id: VarId) -> Option<&Tensor> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, id: VarId) -> Option<Tensor> {
        self.grads.get_mut(id.0).and_then(|g| g.take())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_chain_gradient() {
        // loss = sigmoid(w*x) against target 1; check against the closed form.
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::from_vec([1, 1], vec![2.0]).unwrap());
        let w = tape.leaf(Tensor::from_vec([1, 1], vec![0.5]).unwrap());
        let b = tape.leaf(Tensor::zeros([1]));
        let y = tape.linear(x, w, b).unwrap();
        let p = tape.sigmoid(y);
        let loss = tape.bce_loss(p, &Tensor::from_vec([1, 1], vec![1.0]).unwrap()).unwrap();
        let grads = tape.backward(loss).unwrap();
        // dL/dz for bce(sigmoid(z), 1) = sigmoid(z) - 1; dL/dw = x * that.
        let s = 1.0 / (1.0 + (-1.0f64).exp());
        let gw = grads.get(w).unwrap().data()[0];
        assert!((gw - 2.0 * (s - 1.0)).abs() < 1e-12);
    }

    #[test]
    fn gradients_accumulate_across_uses() {
        // loss = 1*v + 2*v => dv = 3.
        let mut tape = Tape::new();
        let v = tape.leaf(Tensor::scalar(4.0));
        let s = tape.weighted_sum(&[(1.0, v), (2.0, v)]).unwrap();
        let grads = tape.backward(s).unwrap();
        assert_eq!(grads.get(v).unwrap().data(), &[3.0]);
    }

    #[test]
    fn backward_requires_scalar_root() {
        let mut tape = Tape::new();
        let v = tape.leaf(Tensor::zeros([2, 2]));
        assert!(tape.backward(v).is_err());
    }
}
