use crate::tensor::Tensor;
use crate::{Result, TensorError};

/// Clamp applied to predictions before the logs so that saturated sigmoids
/// cannot produce infinities.
pub const BCE_EPS: f64 = 1e-7;

fn check_bce_inputs(pred: &Tensor, target: &Tensor) -> Result<()> {
    if pred.shape() != target.shape() {
        return Err(TensorError::ShapeMismatch(format!(
            "bce: pred shape {:?} vs target shape {:?}",
            pred.shape(),
            target.shape()
        )));
    }
    if pred.is_empty() {
        return Err(TensorError::Validation("bce of empty tensors".into()));
    }
    for &p in pred.data() {
        if !(0.0..=1.0).contains(&p) {
            return Err(TensorError::Validation(format!(
                "bce: prediction {} outside [0, 1]",
                p
            )));
        }
    }
    for &t in target.data() {
        if t != 0.0 && t != 1.0 {
            return Err(TensorError::Validation(format!(
                "bce: target {} not in {{0, 1}}",
                t
            )));
        }
    }
    Ok(())
}

/// Mean binary cross entropy, predictions clamped to `[eps, 1-eps]`.
pub fn bce_loss(pred: &Tensor, target: &Tensor) -> Result<f64> {
    check_bce_inputs(pred, target)?;
    let n = pred.len() as f64;
    let mut acc = 0.0;
    for (&p, &t) in pred.data().iter().zip(target.data()) {
        let p = p.clamp(BCE_EPS, 1.0 - BCE_EPS);
        acc -= t * p.ln() + (1.0 - t) * (1.0 - p).ln();
    }
    Ok(acc / n)
}

/// Gradient of `bce_loss` with respect to the predictions. Elements pinned
/// by the clamp get zero gradient.
pub fn bce_loss_backward(pred: &Tensor, target: &Tensor) -> Result<Tensor> {
    check_bce_inputs(pred, target)?;
    let n = pred.len() as f64;
    let data: Vec<f64> = pred
        .data()
        .iter()
        .zip(target.data())
        .map(|(&p, &t)| {
            if p < BCE_EPS || p > 1.0 - BCE_EPS {
                0.0
            } else {
                (-t / p + (1.0 - t) / (1.0 - p)) / n
            }
        })
        .collect();
    Tensor::from_vec(pred.shape().to_vec(), data)
}

/// Multi-task objective: `lambda * l_cls + l_seg`.
pub fn combined_loss(l_cls: f64, l_seg: f64, lambda: f64) -> Result<f64> {
    if lambda < 0.0 {
        return Err(TensorError::Validation(format!(
            "negative loss weight lambda = {}",
            lambda
        )));
    }
    Ok(lambda * l_cls + l_seg)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn perfect_prediction_is_clamped_small() {
        let pred = Tensor::from_vec([4], vec![1.0, 0.0, 1.0, 0.0]).unwrap();
        let target = Tensor::from_vec([4], vec![1.0, 0.0, 1.0, 0.0]).unwrap();
        let loss = bce_loss(&pred, &target).unwrap();
        assert!(loss <= -(1.0 - BCE_EPS).ln() + 1e-15);
        assert!(loss > 0.0);
    }

    #[test]
    fn coin_flip_is_ln_two() {
        let pred = Tensor::full([8], 0.5);
        let target = Tensor::from_vec([8], vec![0.0, 1.0, 1.0, 0.0, 1.0, 0.0, 0.0, 1.0]).unwrap();
        let loss = bce_loss(&pred, &target).unwrap();
        assert!((loss - 2.0f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn two_identical_terms() {
        let pred = Tensor::from_vec([2], vec![0.5, 0.5]).unwrap();
        let target = Tensor::from_vec([2], vec![0.0, 1.0]).unwrap();
        let loss = bce_loss(&pred, &target).unwrap();
        assert!((loss - 2.0f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn non_binary_target_rejected() {
        let pred = Tensor::full([1], 0.5);
        let target = Tensor::full([1], 0.5);
        assert!(bce_loss(&pred, &target).is_err());
    }

    #[test]
    fn combined_loss_examples() {
        assert!((combined_loss(1.0, 1.0, 0.01).unwrap() - 1.01).abs() < 1e-15);
        assert_eq!(combined_loss(5.0, 0.25, 0.0).unwrap(), 0.25);
        assert!((combined_loss(2.0, 0.5, 0.01).unwrap() - 0.52).abs() < 1e-15);
        assert!(combined_loss(1.0, 1.0, -0.5).is_err());
    }
}
