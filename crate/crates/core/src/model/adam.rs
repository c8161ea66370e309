use serde::{Deserialize, Serialize};

use super::PredictorParams;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// Learning rate multiplier applied every `decay_every_epochs`.
    pub decay_factor: f64,
    pub decay_every_epochs: usize,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.004,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            decay_factor: 0.5,
            decay_every_epochs: 10,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.learning_rate > 0.0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.epsilon > 0.0
            && self.decay_factor > 0.0
            && self.decay_every_epochs >= 1;
        if !ok {
            return Err(Error::InvalidConfig("invalid optimizer settings".into()));
        }
        Ok(())
    }

    /// Step-decayed learning rate for a zero-based epoch.
    pub fn learning_rate_at(&self, epoch: usize) -> f64 {
        self.learning_rate * self.decay_factor.powi((epoch / self.decay_every_epochs) as i32)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub step: u64,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    /// Rate used by the next step.
    pub learning_rate: f64,
    pub config: AdamConfig,
}

impl OptimizerState {
    pub fn new(params: &PredictorParams, config: AdamConfig) -> Self {
        Self {
            step: 0,
            m: vec![0.0; params.len()],
            v: vec![0.0; params.len()],
            learning_rate: config.learning_rate,
            config,
        }
    }

    pub fn set_epoch(&mut self, epoch: usize) {
        self.learning_rate = self.config.learning_rate_at(epoch);
    }
}

/// One bias-corrected Adam update, in place.
pub fn adam_step(params: &mut PredictorParams, grads: &PredictorParams, state: &mut OptimizerState) -> Result<()> {
    if grads.len() != params.len() || state.m.len() != params.len() {
        return Err(Error::Shape("optimizer state does not match parameters".into()));
    }
    let c = &state.config;
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - c.beta1.powi(t);
    let bc2 = 1.0 - c.beta2.powi(t);
    let lr = state.learning_rate;
    for (((p, g), m), v) in params
        .data
        .iter_mut()
        .zip(&grads.data)
        .zip(&mut state.m)
        .zip(&mut state.v)
    {
        *m = c.beta1 * *m + (1.0 - c.beta1) * g;
        *v = c.beta2 * *v + (1.0 - c.beta2) * g * g;
        let m_hat = *m / bc1;
        let v_hat = *v / bc2;
        *p -= lr * m_hat / (v_hat.sqrt() + c.epsilon);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_params() {
        let mut p = PredictorParams::init(5, 4, 0);
        let before = p.clone();
        let mut s = OptimizerState::new(&p, AdamConfig::default());
        let zero = p.zeros_like();
        adam_step(&mut p, &zero, &mut s).unwrap();
        assert_eq!(p, before);
        assert_eq!(s.step, 1);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut p = PredictorParams::zeros(1, 1);
        let mut g = p.zeros_like();
        g.data.iter_mut().enumerate().for_each(|(k, v)| *v = if k % 2 == 0 { 3.0 } else { -0.01 });
        let mut s = OptimizerState::new(&p, AdamConfig::default());
        adam_step(&mut p, &g, &mut s).unwrap();
        for (k, v) in p.data.iter().enumerate() {
            let want = if k % 2 == 0 { -0.004 } else { 0.004 };
            assert!((v - want).abs() < 1e-8, "{k}: {v}");
        }
    }

    #[test]
    fn step_decay_schedule() {
        let c = AdamConfig::default();
        assert_eq!(c.learning_rate_at(0), 0.004);
        assert_eq!(c.learning_rate_at(9), 0.004);
        assert_eq!(c.learning_rate_at(10), 0.002);
        assert_eq!(c.learning_rate_at(25), 0.001);
        let p = PredictorParams::zeros(1, 1);
        let mut s = OptimizerState::new(&p, c);
        s.set_epoch(10);
        assert_eq!(s.learning_rate, 0.002);
    }

    #[test]
    fn shape_mismatch() {
        let mut p = PredictorParams::zeros(1, 1);
        let g = PredictorParams::zeros(2, 1);
        let mut s = OptimizerState::new(&p, AdamConfig::default());
        assert!(adam_step(&mut p, &g, &mut s).is_err());
    }
}
