use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numcore::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl AdamConfig {
    pub fn with_learning_rate(learning_rate: f64) -> Self {
        AdamConfig {
            learning_rate,
            ..Self::default()
        }
    }
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// First and second moment estimates for a list of parameters.
#[derive(Clone, Debug)]
pub struct AdamState {
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub t: u64,
    pub config: AdamConfig,
}

impl AdamState {
    pub fn new(params: &[Tensor], config: AdamConfig) -> Self {
        AdamState {
            m: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
            v: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
            t: 0,
            config,
        }
    }

    pub fn learning_rate(&self) -> f64 {
        self.config.learning_rate
    }

    pub fn set_learning_rate(&mut self, lr: f64) {
        self.config.learning_rate = lr;
    }
}

/// One bias-corrected Adam update, in place.
pub fn adam_step<'a, I>(params: I, grads: &[Tensor], state: &mut AdamState) -> Result<()>
where
    I: IntoIterator<Item = &'a mut Tensor>,
{
    let mut params: Vec<&mut Tensor> = params.into_iter().collect();
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::Dimension {
            op: "adam_step",
            left: vec![params.len()],
            right: vec![grads.len(), state.m.len()],
        });
    }
    for ((p, g), m) in params.iter().zip(grads).zip(&state.m) {
        if p.shape() != g.shape() || p.shape() != m.shape() {
            return Err(Error::Dimension {
                op: "adam_step",
                left: p.shape().to_vec(),
                right: g.shape().to_vec(),
            });
        }
    }
    state.t += 1;
    let AdamConfig {
        learning_rate,
        beta1,
        beta2,
        epsilon,
    } = state.config;
    let bc1 = 1.0 - beta1.powi(state.t as i32);
    let bc2 = 1.0 - beta2.powi(state.t as i32);
    for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
        let m = state.m[i].data_mut();
        let v = state.v[i].data_mut();
        for (((pj, &gj), mj), vj) in p.data_mut().iter_mut().zip(g.data()).zip(m).zip(v) {
            *mj = beta1 * *mj + (1.0 - beta1) * gj;
            *vj = beta2 * *vj + (1.0 - beta2) * gj * gj;
            let m_hat = *mj / bc1;
            let v_hat = *vj / bc2;
            *pj -= learning_rate * m_hat / (v_hat.sqrt() + epsilon);
        }
    }
    Ok(())
}

/// Multiplies the learning rate by `factor` whenever the monitored loss
/// fails to improve for `patience` consecutive observations.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlateauDecay {
    pub factor: f64,
    pub patience: usize,
    best: Option<f64>,
    stale: usize,
}

impl Default for PlateauDecay {
    fn default() -> Self {
        Self::new(0.5, 1)
    }
}

impl PlateauDecay {
    pub fn new(factor: f64, patience: usize) -> Self {
        PlateauDecay {
            factor,
            patience,
            best: None,
            stale: 0,
        }
    }

    /// Records a validation loss and returns the (possibly decayed) rate.
    pub fn observe(&mut self, loss: f64, lr: f64) -> f64 {
        match self.best {
            Some(best) if loss >= best => {
                self.stale += 1;
                if self.stale >= self.patience {
                    self.stale = 0;
                    return lr * self.factor;
                }
            }
            _ => {
                self.best = Some(loss);
                self.stale = 0;
            }
        }
        lr
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_param(v: f64) -> Vec<Tensor> {
        vec![Tensor::vector(vec![v]).unwrap()]
    }

    #[test]
    fn zero_gradient_is_a_no_op() {
        let mut params = vec![
            Tensor::vector(vec![0.3, -1.2]).unwrap(),
            Tensor::zeros(&[2, 2]),
        ];
        let before = params.clone();
        let grads: Vec<Tensor> = params.iter().map(|p| Tensor::zeros(p.shape())).collect();
        let mut state = AdamState::new(&params, AdamConfig::with_learning_rate(0.1));
        adam_step(&mut params, &grads, &mut state).unwrap();
        assert_eq!(params, before);
        assert_eq!(state.t, 1);
    }

    #[test]
    fn first_step_is_bias_corrected() {
        let mut params = scalar_param(0.0);
        let mut state = AdamState::new(&params, AdamConfig::with_learning_rate(0.1));
        adam_step(&mut params, &scalar_param(1.0), &mut state).unwrap();
        let expected = -0.1 * (1.0 / (1.0 + 1e-8));
        assert!((params[0].data()[0] - expected).abs() < 1e-15);
        assert!((params[0].data()[0] + 0.099_999_999).abs() < 1e-9);
    }

    #[test]
    fn repeated_steps_move_against_gradient_sign() {
        for g in [2.5, -0.7] {
            let mut params = scalar_param(1.0);
            let mut state = AdamState::new(&params, AdamConfig::with_learning_rate(0.05));
            let mut prev = 1.0;
            for _ in 0..2 {
                adam_step(&mut params, &scalar_param(g), &mut state).unwrap();
                let now = params[0].data()[0];
                assert!((now - prev) * g < 0.0);
                prev = now;
            }
            assert_eq!(state.t, 2);
        }
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let mut params = scalar_param(0.0);
        let mut state = AdamState::new(&params, AdamConfig::default());
        let grads = vec![Tensor::zeros(&[2])];
        assert!(adam_step(&mut params, &grads, &mut state).is_err());
        assert_eq!(state.t, 0);
    }

    #[test]
    fn plateau_halves_after_one_stale_epoch() {
        let mut d = PlateauDecay::default();
        let lr = d.observe(5.0, 1.0);
        assert_eq!(lr, 1.0);
        let lr = d.observe(4.0, lr);
        assert_eq!(lr, 1.0);
        let lr = d.observe(4.5, lr);
        assert_eq!(lr, 0.5);
        let lr = d.observe(3.0, lr);
        assert_eq!(lr, 0.5);
    }
}
