use serde::{Deserialize, Serialize};

use super::{Result, TrainError};
use crate::nn::ParamStore;
use crate::tensor::{Float, Tensor};

const M_PREFIX: &str = "adam.m.";
const V_PREFIX: &str = "adam.v.";

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { learning_rate: 1e-4, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// One bias-corrected Adam update of a single tensor; `step` counts from 1.
///
/// ```text
/// m <- b1 m + (1 - b1) g        v <- b2 v + (1 - b2) g^2
/// theta <- theta - lr (m / (1 - b1^t)) / (sqrt(v / (1 - b2^t)) + eps)
/// ```
pub fn adam_update<T: Float>(theta: &mut [T], grad: &[T], m: &mut [T], v: &mut [T], step: u64, config: &AdamConfig) {
    debug_assert!(step >= 1);
    let c = |x: f64| T::from_f64(x).expect("hyperparameter is representable");
    let (b1, b2) = (c(config.beta1), c(config.beta2));
    let t = i32::try_from(step).unwrap_or(i32::MAX);
    let bc1 = T::one() - b1.powi(t);
    let bc2 = T::one() - b2.powi(t);
    let (lr, eps) = (c(config.learning_rate), c(config.eps));
    for i in 0..theta.len() {
        let g = grad[i];
        m[i] = b1 * m[i] + (T::one() - b1) * g;
        v[i] = b2 * v[i] + (T::one() - b2) * g * g;
        let m_hat = m[i] / bc1;
        let v_hat = v[i] / bc2;
        theta[i] = theta[i] - lr * m_hat / (v_hat.sqrt() + eps);
    }
}

/// Adam over a network parameter table, moments keyed `adam.m.<key>` and
/// `adam.v.<key>`.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    config: AdamConfig,
    step: u64,
    m: Vec<Tensor<f32>>,
    v: Vec<Tensor<f32>>,
}

impl Adam {
    pub fn new(config: AdamConfig, params: &ParamStore) -> Self {
        let zeros = || params.iter().map(|(_, t)| Tensor::zeros(t.shape())).collect();
        Adam { config, step: 0, m: zeros(), v: zeros() }
    }

    pub fn config(&self) -> &AdamConfig {
        &self.config
    }

    /// Number of updates applied so far.
    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Applies one update. `grads[i]` belongs to parameter `i`; parameters
    /// without a gradient keep their value and moments. Any non-finite
    /// gradient aborts before anything is modified.
    pub fn step(&mut self, params: &mut ParamStore, grads: &[Option<Tensor<f32>>]) -> Result<()> {
        if grads.len() != params.len() || self.m.len() != params.len() {
            return Err(TrainError::Config(format!(
                "{} gradients and {} moments for {} parameters",
                grads.len(),
                self.m.len(),
                params.len()
            )));
        }
        for (i, g) in grads.iter().enumerate() {
            if let Some(g) = g {
                if g.shape() != params.tensor(i).shape() {
                    return Err(TrainError::Config(format!("gradient of {} has shape {:?}", params.key(i), g.shape())));
                }
                if !g.all_finite() {
                    return Err(TrainError::NanGradient { path: params.key(i).to_string(), step: self.step + 1 });
                }
            }
        }
        self.step += 1;
        for (i, g) in grads.iter().enumerate() {
            if let Some(g) = g {
                let theta = params.tensor_mut(i).data_mut();
                adam_update(theta, g.data(), self.m[i].data_mut(), self.v[i].data_mut(), self.step, &self.config);
            }
        }
        Ok(())
    }

    /// Moments as a table for checkpoints.
    pub fn state(&self, params: &ParamStore) -> ParamStore {
        let mut out = ParamStore::new();
        for (prefix, moments) in [(M_PREFIX, &self.m), (V_PREFIX, &self.v)] {
            for (i, t) in moments.iter().enumerate() {
                out.insert(format!("{prefix}{}", params.key(i)), t.clone()).expect("parameter keys are unique");
            }
        }
        out
    }

    /// Inverse of [`Self::state`].
    pub fn restore(config: AdamConfig, step: u64, params: &ParamStore, state: &ParamStore) -> Result<Self> {
        let mut adam = Adam::new(config, params);
        adam.step = step;
        if state.is_empty() {
            return Ok(adam);
        }
        for (prefix, moments) in [(M_PREFIX, &mut adam.m), (V_PREFIX, &mut adam.v)] {
            for (i, slot) in moments.iter_mut().enumerate() {
                let key = format!("{prefix}{}", params.key(i));
                let t = state.get(&key).ok_or_else(|| TrainError::Config(format!("optimizer state lacks {key}")))?;
                if t.shape() != slot.shape() {
                    return Err(TrainError::Config(format!("{key} has shape {:?}", t.shape())));
                }
                *slot = t.clone();
            }
        }
        if state.len() != 2 * params.len() {
            return Err(TrainError::Config(format!("{} optimizer tensors for {} parameters", state.len(), params.len())));
        }
        Ok(adam)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_reference(grads: &[f64], lr: f64) -> f64 {
        let (b1, b2, eps) = (0.9f64, 0.999f64, 1e-8f64);
        let (mut theta, mut m, mut v) = (0.0, 0.0, 0.0);
        for (t, &g) in grads.iter().enumerate() {
            let t = (t + 1) as i32;
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            theta -= lr * (m / (1.0 - b1.powi(t))) / ((v / (1.0 - b2.powi(t))).sqrt() + eps);
        }
        theta
    }

    fn run(grads: &[f64], lr: f64) -> f64 {
        let cfg = AdamConfig { learning_rate: lr, ..AdamConfig::default() };
        let (mut theta, mut m, mut v) = ([0.0f64], [0.0f64], [0.0f64]);
        for (t, &g) in grads.iter().enumerate() {
            adam_update(&mut theta, &[g], &mut m, &mut v, t as u64 + 1, &cfg);
        }
        theta[0]
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let theta = run(&[1.0], 1e-4);
        assert!((theta - (-1e-4 / (1.0 + 1e-8))).abs() < 1e-15, "{theta}");
        assert!((theta + 9.9999e-5).abs() < 1e-9);
    }

    #[test]
    fn two_steps_match_scalar_oracle() {
        for grads in [[1.0, 1.0], [0.3, -2.0], [1e-3, 5.0]] {
            let a = run(&grads, 1e-3);
            let b = scalar_reference(&grads, 1e-3);
            assert!((a - b).abs() <= 1e-12, "{grads:?}: {a} vs {b}");
        }
    }

    #[test]
    fn zero_gradients_leave_parameters_unchanged() {
        let mut params = ParamStore::new();
        params.insert("w", Tensor::from_fn(&[2, 3], |i| i as f32 - 2.5)).unwrap();
        let before = params.clone();
        let mut adam = Adam::new(AdamConfig::default(), &params);
        for _ in 0..5 {
            adam.step(&mut params, &[Some(Tensor::zeros(&[2, 3]))]).unwrap();
        }
        assert_eq!(params, before);
        assert_eq!(adam.step_count(), 5);
    }

    #[test]
    fn nan_gradient_names_the_layer() {
        let mut params = ParamStore::new();
        params.insert("enc0.conv1.weight", Tensor::zeros(&[2])).unwrap();
        params.insert("enc0.conv1.bias", Tensor::zeros(&[2])).unwrap();
        let mut adam = Adam::new(AdamConfig::default(), &params);
        let grads = [Some(Tensor::zeros(&[2])), Some(Tensor::new(vec![2], vec![0.0, f32::NAN]).unwrap())];
        let err = adam.step(&mut params, &grads).unwrap_err();
        assert!(err.to_string().contains("enc0.conv1.bias"), "{err}");
        assert_eq!(adam.step_count(), 0);
    }

    #[test]
    fn state_round_trips() {
        let mut params = ParamStore::new();
        params.insert("a", Tensor::zeros(&[3])).unwrap();
        params.insert("b", Tensor::zeros(&[1, 2])).unwrap();
        let mut adam = Adam::new(AdamConfig::default(), &params);
        let g = [Some(Tensor::full(&[3], 0.5)), Some(Tensor::full(&[1, 2], -1.0))];
        adam.step(&mut params, &g).unwrap();
        let state = adam.state(&params);
        assert_eq!(state.keys(), ["adam.m.a", "adam.m.b", "adam.v.a", "adam.v.b"]);
        let back = Adam::restore(*adam.config(), adam.step_count(), &params, &state).unwrap();
        assert_eq!(back, adam);
    }
}
