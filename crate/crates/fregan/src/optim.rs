//! Adam with bias correction. With beta1 = 0 the first moment equals the raw
//! gradient at every step, so the update degenerates to RMS-normalized
//! gradient descent; that identity is load-bearing for reproducing training
//! behavior and is asserted in the tests.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::model::ParameterSet;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OptimizerConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for OptimizerConfig {
    fn default() -> OptimizerConfig {
        OptimizerConfig { learning_rate: 1e-4, beta1: 0.00, beta2: 0.95, epsilon: 1e-8 }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!(
                "learning rate {} must be positive",
                self.learning_rate
            )));
        }
        for (name, beta) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&beta) {
                return Err(Error::Config(format!("{name} {beta} outside [0, 1)")));
            }
        }
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return Err(Error::Config(format!("epsilon {} must be positive", self.epsilon)));
        }
        Ok(())
    }
}

/// First and second moment estimates per trainable parameter, plus the step
/// counter the bias correction depends on.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: BTreeMap<String, Tensor<f32>>,
    pub v: BTreeMap<String, Tensor<f32>>,
    pub t: u64,
}

impl AdamState {
    pub fn for_params(params: &ParameterSet) -> AdamState {
        let mut m = BTreeMap::new();
        let mut v = BTreeMap::new();
        for (name, tensor) in params.trainable_iter() {
            m.insert(name.clone(), Tensor::zeros(tensor.shape()));
            v.insert(name.clone(), Tensor::zeros(tensor.shape()));
        }
        AdamState { m, v, t: 0 }
    }
}

/// One Adam update over every trainable parameter. Gradient keys must agree
/// exactly with the trainable parameter names; the moments update even when
/// the learning rate contribution is zero.
pub fn adam_step(
    params: &mut ParameterSet,
    grads: &BTreeMap<String, Tensor<f32>>,
    state: &mut AdamState,
    config: &OptimizerConfig,
) -> Result<()> {
    let names: Vec<String> = params.trainable_iter().map(|(n, _)| n.clone()).collect();
    for name in &names {
        if !grads.contains_key(name) {
            return Err(Error::Contract(format!("gradient missing for parameter {name}")));
        }
    }
    for key in grads.keys() {
        if !names.iter().any(|n| n == key) {
            return Err(Error::Contract(format!("gradient for unknown parameter {key}")));
        }
    }
    state.t += 1;
    let t = state.t;
    let correction1 = (1.0 - config.beta1.powi(t as i32)) as f32;
    let correction2 = (1.0 - config.beta2.powi(t as i32)) as f32;
    let (b1, b2) = (config.beta1 as f32, config.beta2 as f32);
    let (lr, eps) = (config.learning_rate as f32, config.epsilon as f32);
    for name in &names {
        let grad = &grads[name];
        let m = state
            .m
            .get_mut(name)
            .ok_or_else(|| Error::Contract(format!("optimizer state missing for {name}")))?;
        let v = state
            .v
            .get_mut(name)
            .ok_or_else(|| Error::Contract(format!("optimizer state missing for {name}")))?;
        let theta = params.get_mut(name)?;
        if grad.shape() != theta.shape() {
            return Err(Error::Dimension {
                axis: "numel",
                detail: format!(
                    "gradient for {name} is {}, parameter is {}",
                    grad.shape(),
                    theta.shape()
                ),
            });
        }
        for ((slot, &g), (m_i, v_i)) in theta
            .data_mut()
            .iter_mut()
            .zip(grad.data())
            .zip(m.data_mut().iter_mut().zip(v.data_mut().iter_mut()))
        {
            *m_i = b1 * *m_i + (1.0 - b1) * g;
            *v_i = b2 * *v_i + (1.0 - b2) * g * g;
            let m_hat = *m_i / correction1;
            let v_hat = *v_i / correction2;
            *slot -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Shape;

    fn one_param(value: f32) -> ParameterSet {
        let mut p = ParameterSet::new();
        p.insert_trainable("w", Tensor::filled(Shape::new(1, 1, 2, 2), value)).unwrap();
        p
    }

    fn grad_of(value: f32) -> BTreeMap<String, Tensor<f32>> {
        let mut g = BTreeMap::new();
        g.insert("w".to_string(), Tensor::filled(Shape::new(1, 1, 2, 2), value));
        g
    }

    #[test]
    fn defaults_match_the_training_recipe() {
        let c = OptimizerConfig::default();
        assert_eq!(c.learning_rate, 1e-4);
        assert_eq!(c.beta1, 0.00);
        assert_eq!(c.beta2, 0.95);
        assert_eq!(c.epsilon, 1e-8);
        assert!(c.validate().is_ok());
    }

    #[test]
    fn validation_rejects_out_of_range_values() {
        let mut c = OptimizerConfig { learning_rate: 0.0, ..Default::default() };
        assert!(c.validate().is_err());
        c = OptimizerConfig { beta1: 1.0, ..Default::default() };
        assert!(c.validate().is_err());
        c = OptimizerConfig { beta2: -0.1, ..Default::default() };
        assert!(c.validate().is_err());
        c = OptimizerConfig { epsilon: 0.0, ..Default::default() };
        assert!(c.validate().is_err());
    }

    #[test]
    fn first_step_with_unit_gradient_moves_by_one_learning_rate() {
        // beta1 = 0 makes m_hat = 1; v = 0.05 corrects to v_hat = 1, so the
        // delta is -lr / (1 + eps).
        let mut params = one_param(0.5);
        let mut state = AdamState::for_params(&params);
        let config = OptimizerConfig::default();
        adam_step(&mut params, &grad_of(1.0), &mut state, &config).unwrap();
        let expected = 0.5 - 1e-4 / (1.0 + 1e-8);
        for &w in params.get("w").unwrap().data() {
            assert!((w - expected).abs() < 1e-9, "w = {w}, expected {expected}");
        }
        assert_eq!(state.t, 1);
    }

    #[test]
    fn zero_gradient_leaves_parameters_bit_identical() {
        let mut params = one_param(0.37);
        let before = params.clone();
        let mut state = AdamState::for_params(&params);
        adam_step(&mut params, &grad_of(0.0), &mut state, &OptimizerConfig::default()).unwrap();
        assert_eq!(params, before);
        assert_eq!(state.t, 1);
    }

    #[test]
    fn zero_learning_rate_is_a_bitwise_no_op_on_parameters() {
        // The config validator rejects lr = 0 for real runs; the update rule
        // itself must still be an exact no-op so frozen passes can reuse it.
        let mut params = one_param(-0.12345);
        let before = params.clone();
        let mut state = AdamState::for_params(&params);
        let config = OptimizerConfig { learning_rate: 0.0, ..Default::default() };
        adam_step(&mut params, &grad_of(3.7), &mut state, &config).unwrap();
        assert_eq!(params, before);
        // Moments still advanced.
        assert!(state.v["w"].data()[0] > 0.0);
    }

    #[test]
    fn equal_gradients_produce_equal_updates() {
        let mut params = ParameterSet::new();
        params.insert_trainable("a", Tensor::filled(Shape::new(1, 1, 1, 1), 1.0)).unwrap();
        params.insert_trainable("b", Tensor::filled(Shape::new(1, 1, 1, 1), 1.0)).unwrap();
        let mut grads = BTreeMap::new();
        grads.insert("a".to_string(), Tensor::filled(Shape::new(1, 1, 1, 1), 0.2));
        grads.insert("b".to_string(), Tensor::filled(Shape::new(1, 1, 1, 1), 0.2));
        let mut state = AdamState::for_params(&params);
        adam_step(&mut params, &grads, &mut state, &OptimizerConfig::default()).unwrap();
        assert_eq!(params.get("a").unwrap().data(), params.get("b").unwrap().data());
    }

    #[test]
    fn beta1_zero_keeps_first_moment_equal_to_the_raw_gradient() {
        let mut params = one_param(0.0);
        let mut state = AdamState::for_params(&params);
        let config = OptimizerConfig::default();
        for step in 0..5 {
            let g = 0.1 * (step as f32 + 1.0);
            adam_step(&mut params, &grad_of(g), &mut state, &config).unwrap();
            assert_eq!(state.m["w"].data(), Tensor::filled(Shape::new(1, 1, 2, 2), g).data());
        }
    }

    #[test]
    fn second_moment_stays_non_negative() {
        let mut params = one_param(0.0);
        let mut state = AdamState::for_params(&params);
        for g in [-2.0f32, 0.5, -0.1] {
            adam_step(&mut params, &grad_of(g), &mut state, &OptimizerConfig::default()).unwrap();
            assert!(state.v["w"].data().iter().all(|&v| v >= 0.0));
        }
    }

    #[test]
    fn key_disagreement_is_a_contract_error() {
        let mut params = one_param(0.0);
        let mut state = AdamState::for_params(&params);
        let config = OptimizerConfig::default();
        let empty = BTreeMap::new();
        assert!(matches!(
            adam_step(&mut params, &empty, &mut state, &config),
            Err(Error::Contract(_))
        ));
        let mut extra = grad_of(1.0);
        extra.insert("ghost".to_string(), Tensor::zeros(Shape::new(1, 1, 1, 1)));
        assert!(matches!(
            adam_step(&mut params, &extra, &mut state, &config),
            Err(Error::Contract(_))
        ));
    }
}
