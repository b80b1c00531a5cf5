use std::collections::BTreeMap;

use crate::params::Params;
use crate::tensor::Tensor;
use crate::{Result, TensorError};

pub const ADAM_DEFAULT_LR: f64 = 1e-3;
pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// Learning-rate schedule that halves the rate when the validation loss has
/// not improved for `patience` consecutive epochs.
#[derive(Clone, Debug)]
pub struct PlateauTracker {
    pub best_loss: f64,
    pub stagnant_epochs: u32,
    pub patience: u32,
    pub factor: f64,
}

impl Default for PlateauTracker {
    fn default() -> Self {
        PlateauTracker {
            best_loss: f64::INFINITY,
            stagnant_epochs: 0,
            patience: 3,
            factor: 0.5,
        }
    }
}

impl PlateauTracker {
    /// Feed one epoch's validation loss; returns true when the learning rate
    /// should be reduced this epoch.
    fn observe(&mut self, loss: f64) -> bool {
        if loss < self.best_loss {
            self.best_loss = loss;
            self.stagnant_epochs = 0;
            return false;
        }
        self.stagnant_epochs += 1;
        if self.stagnant_epochs >= self.patience {
            self.stagnant_epochs = 0;
            return true;
        }
        false
    }
}

/// Adam optimizer state: per-parameter first/second moments plus the step
/// counter and plateau tracker.
#[derive(Clone, Debug)]
pub struct AdamState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    pub m: BTreeMap<String, Tensor>,
    pub v: BTreeMap<String, Tensor>,
    pub plateau: PlateauTracker,
}

impl AdamState {
    pub fn new(lr: f64, trainable: &[String]) -> Result<AdamState> {
        if lr <= 0.0 {
            return Err(TensorError::Validation(format!(
                "learning rate must be positive, got {}",
                lr
            )));
        }
        let mut state = AdamState {
            lr,
            beta1: ADAM_BETA1,
            beta2: ADAM_BETA2,
            eps: ADAM_EPS,
            step: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
            plateau: PlateauTracker::default(),
        };
        for name in trainable {
            state.m.insert(name.clone(), Tensor::zeros([0]));
            state.v.insert(name.clone(), Tensor::zeros([0]));
        }
        Ok(state)
    }

    pub fn trainable_names(&self) -> Vec<String> {
        self.m.keys().cloned().collect()
    }

    /// One Adam update with bias correction. Every trainable parameter must
    /// carry a gradient buffer (attached from the last backward pass).
    pub fn step(&mut self, params: &mut Params) -> Result<()> {
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        let names = self.trainable_names();
        for name in &names {
            let param = params.get(name)?;
            let grad = param.grad().ok_or_else(|| TensorError::Validation(format!(
                "parameter '{}' has no gradient attached",
                name
            )))?;
            for (i, g) in grad.iter().enumerate() {
                if !g.is_finite() {
                    return Err(TensorError::Numeric {
                        name: name.clone(),
                        detail: format!("gradient is {} at flat index {}", g, i),
                    });
                }
            }
            let shape = param.shape().to_vec();
            let m_slot = self.m.get_mut(name).expect("trainable name");
            if m_slot.len() != grad.len() {
                *m_slot = Tensor::zeros(shape.clone());
            }
            let v_slot = self.v.get_mut(name).expect("trainable name");
            if v_slot.len() != grad.len() {
                *v_slot = Tensor::zeros(shape.clone());
            }

            let mut m_new = Vec::with_capacity(grad.len());
            let mut v_new = Vec::with_capacity(grad.len());
            let mut p_new = Vec::with_capacity(grad.len());
            {
                let m_old = self.m[name].data();
                let v_old = self.v[name].data();
                let p_old = param.data();
                for i in 0..grad.len() {
                    let g = grad[i];
                    let m = self.beta1 * m_old[i] + (1.0 - self.beta1) * g;
                    let v = self.beta2 * v_old[i] + (1.0 - self.beta2) * g * g;
                    let m_hat = m / bc1;
                    let v_hat = v / bc2;
                    m_new.push(m);
                    v_new.push(v);
                    p_new.push(p_old[i] - self.lr * m_hat / (v_hat.sqrt() + self.eps));
                }
            }
            self.m.insert(name.clone(), Tensor::from_vec(shape.clone(), m_new)?);
            self.v.insert(name.clone(), Tensor::from_vec(shape.clone(), v_new)?);
            params.update(name, Tensor::from_vec(shape, p_new)?)?;
        }
        Ok(())
    }

    /// Epoch-end hook: apply the plateau schedule to this state's learning
    /// rate. Returns the new rate when a reduction fired.
    pub fn end_epoch(&mut self, validation_loss: f64) -> Option<f64> {
        if self.plateau.observe(validation_loss) {
            self.lr *= self.plateau.factor;
            Some(self.lr)
        } else {
            None
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn setup(g: f64) -> (Params, AdamState) {
        let mut params = Params::new();
        let mut w = Tensor::from_vec([1], vec![1.0]).unwrap();
        w.set_grad(Tensor::from_vec([1], vec![g]).unwrap()).unwrap();
        params.insert("w", w);
        let state = AdamState::new(ADAM_DEFAULT_LR, &["w".to_string()]).unwrap();
        (params, state)
    }

    #[test]
    fn zero_gradient_leaves_parameters() {
        let (mut params, mut state) = setup(0.0);
        state.step(&mut params).unwrap();
        assert_eq!(params.get("w").unwrap().data(), &[1.0]);
    }

    #[test]
    fn first_step_moves_by_lr_sign() {
        let (mut params, mut state) = setup(0.5);
        state.step(&mut params).unwrap();
        let w = params.get("w").unwrap().data()[0];
        assert!((w - (1.0 - ADAM_DEFAULT_LR)).abs() < 1e-6);

        let (mut params, mut state) = setup(-0.5);
        state.step(&mut params).unwrap();
        let w = params.get("w").unwrap().data()[0];
        assert!((w - (1.0 + ADAM_DEFAULT_LR)).abs() < 1e-6);
    }

    #[test]
    fn nan_gradient_names_parameter() {
        let (mut params, mut state) = setup(f64::NAN);
        let err = state.step(&mut params).unwrap_err();
        assert!(err.to_string().contains('w'));
    }

    #[test]
    fn plateau_halves_after_three_stagnant_epochs() {
        let mut state = AdamState::new(1e-3, &[]).unwrap();
        assert!(state.end_epoch(1.0).is_none()); // becomes best
        assert!(state.end_epoch(1.0).is_none()); // stagnant 1
        assert!(state.end_epoch(1.1).is_none()); // stagnant 2
        let reduced = state.end_epoch(1.0); // stagnant 3 -> reduce
        assert_eq!(reduced, Some(5e-4));
        assert!((state.lr - 5e-4).abs() < 1e-18);
    }

    #[test]
    fn improvement_resets_plateau() {
        let mut state = AdamState::new(1e-3, &[]).unwrap();
        state.end_epoch(1.0);
        state.end_epoch(1.2);
        state.end_epoch(1.2);
        state.end_epoch(0.5); // improvement resets the stagnation count
        assert!(state.end_epoch(0.6).is_none());
        assert!(state.end_epoch(0.6).is_none());
        assert_eq!(state.end_epoch(0.6), Some(5e-4));
    }
}
