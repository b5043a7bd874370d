//! Adam optimizer over named parameter tensors.

use std::collections::BTreeMap;

use crate::tape::Gradients;
use crate::tensor::{Element, TensorError, TensorOf};

/// Adam hyperparameters. The learning rate is passed per step so schedules
/// stay outside the optimizer.
#[derive(Clone, Copy, Debug)]
pub struct AdamParams {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamParams {
    fn default() -> Self {
        AdamParams { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// First/second moment estimates and the step counter.
pub struct AdamState<T> {
    params: AdamParams,
    step: u64,
    m: BTreeMap<String, Vec<T>>,
    v: BTreeMap<String, Vec<T>>,
}

impl<T: Element> AdamState<T> {
    pub fn new(params: AdamParams) -> Self {
        AdamState { params, step: 0, m: BTreeMap::new(), v: BTreeMap::new() }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One Adam update with bias correction, applied in place.
    ///
    /// Every parameter must have a gradient; moments are created lazily on
    /// first use.
    pub fn step(
        &mut self,
        weights: &mut BTreeMap<String, TensorOf<T>>,
        grads: &Gradients<T>,
        lr: f64,
    ) -> Result<(), TensorError> {
        self.step += 1;
        let t = self.step as i32;
        let AdamParams { beta1, beta2, eps } = self.params;
        let bc1 = 1.0 - beta1.powi(t);
        let bc2 = 1.0 - beta2.powi(t);

        for (name, value) in weights.iter_mut() {
            let grad = grads
                .get(name)
                .ok_or_else(|| TensorError::MissingGradient { name: name.clone() })?;
            let len = value.data().len();
            let m = self.m.entry(name.clone()).or_insert_with(|| vec![T::zero(); len]);
            let v = self.v.entry(name.clone()).or_insert_with(|| vec![T::zero(); len]);
            for i in 0..len {
                let g = grad.data()[i].to_f64();
                let mi = beta1 * m[i].to_f64() + (1.0 - beta1) * g;
                let vi = beta2 * v[i].to_f64() + (1.0 - beta2) * g * g;
                m[i] = T::from_f64(mi);
                v[i] = T::from_f64(vi);
                let m_hat = mi / bc1;
                let v_hat = vi / bc2;
                let p = value.data()[i].to_f64();
                value.data_mut()[i] = T::from_f64(p - lr * m_hat / (v_hat.sqrt() + eps));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tape::Tape;
    use crate::tensor::{Shape, Tensor};

    fn zero_grads_for(weights: &BTreeMap<String, Tensor>) -> Gradients<f32> {
        let mut tape: Tape<f32> = Tape::new();
        for (name, value) in weights {
            tape.param(name.clone(), value.clone());
        }
        let loss = tape.constant(Tensor::scalar(0.0));
        tape.backward(loss).unwrap()
    }

    #[test]
    fn zero_gradients_leave_parameters_unchanged() {
        let mut weights = BTreeMap::new();
        weights.insert("w".to_string(), Tensor::full(Shape::new(2, 3, 1, 1), 0.75));
        let before = weights["w"].clone();
        let grads = zero_grads_for(&weights);
        let mut adam = AdamState::new(AdamParams::default());
        adam.step(&mut weights, &grads, 1e-4).unwrap();
        assert_eq!(weights["w"].data(), before.data());
        assert_eq!(adam.step_count(), 1);
    }

    #[test]
    fn first_step_matches_hand_evaluation() {
        // scalar param 0, gradient 1, lr 1e-4, default betas:
        // m_hat = v_hat = 1, update = lr / (1 + eps)
        let mut weights = BTreeMap::new();
        weights.insert("w".to_string(), Tensor::scalar(0.0));

        let mut tape: Tape<f32> = Tape::new();
        let w = tape.param("w", Tensor::scalar(0.0));
        let target = tape.constant(Tensor::scalar(-1.0));
        let loss = tape.l1_loss(w, target).unwrap(); // d/dw |w + 1| = 1
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get("w").unwrap().data()[0], 1.0);

        let mut adam = AdamState::new(AdamParams::default());
        adam.step(&mut weights, &grads, 1e-4).unwrap();
        let expect = -1e-4 * (1.0 / (1.0 + 1e-8));
        assert!((weights["w"].data()[0] as f64 - expect).abs() <= 1e-10);
    }

    #[test]
    fn missing_gradient_is_an_error() {
        let mut weights = BTreeMap::new();
        weights.insert("w".to_string(), Tensor::scalar(0.0));
        weights.insert("extra".to_string(), Tensor::scalar(0.0));

        let mut tape: Tape<f32> = Tape::new();
        tape.param("w", Tensor::scalar(0.0));
        let loss = tape.constant(Tensor::scalar(0.0));
        let grads = tape.backward(loss).unwrap();

        let mut adam = AdamState::new(AdamParams::default());
        let err = adam.step(&mut weights, &grads, 1e-4).unwrap_err();
        assert!(matches!(err, TensorError::MissingGradient { name } if name == "extra"));
    }

    #[test]
    fn identical_seeds_give_bitwise_identical_trajectories() {
        let run = || {
            let mut weights = BTreeMap::new();
            weights.insert("w".to_string(), Tensor::full(Shape::new(1, 4, 1, 1), 0.5));
            let mut adam = AdamState::new(AdamParams::default());
            for step in 0..10 {
                let mut tape: Tape<f32> = Tape::new();
                let w = tape.param("w", weights["w"].clone());
                let target = tape.constant(Tensor::full(
                    Shape::new(1, 4, 1, 1),
                    0.1 * (step as f32 + 1.0),
                ));
                let loss = tape.l1_loss(w, target).unwrap();
                let grads = tape.backward(loss).unwrap();
                adam.step(&mut weights, &grads, 1e-2).unwrap();
            }
            weights["w"].data().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        };
        assert_eq!(run(), run());
    }
}
