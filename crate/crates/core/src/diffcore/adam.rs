use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use super::{DiffError, ParamStore, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.001,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// First/second moment estimates for every parameter plus the step count.
#[derive(Clone, Debug)]
pub struct AdamState {
    pub config: AdamConfig,
    step: u64,
    first: IndexMap<String, Tensor>,
    second: IndexMap<String, Tensor>,
}

impl AdamState {
    pub fn new(config: AdamConfig, params: &ParamStore) -> Self {
        let zeros = |t: &Tensor| Tensor::zeros(t.rows(), t.cols());
        let first: IndexMap<String, Tensor> = params.iter().map(|(n, t)| (n.to_string(), zeros(t))).collect();
        Self {
            config,
            step: 0,
            second: first.clone(),
            first,
        }
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn first_moment(&self, name: &str) -> Option<&Tensor> {
        self.first.get(name)
    }

    pub fn second_moment(&self, name: &str) -> Option<&Tensor> {
        self.second.get(name)
    }
}

/// One bias-corrected Adam update over every registered parameter.
///
/// All gradients are validated before any parameter is touched, so an error
/// leaves both `params` and `state` unchanged.
pub fn adam_step(
    params: &mut ParamStore,
    grads: &IndexMap<String, Tensor>,
    state: &mut AdamState,
) -> Result<(), DiffError> {
    for (name, value) in params.iter() {
        let g = grads
            .get(name)
            .ok_or_else(|| DiffError::MissingGradient(name.to_string()))?;
        if g.shape() != value.shape() {
            return Err(DiffError::ShapeMismatch {
                op: "adam_step",
                left: value.shape().to_vec(),
                right: g.shape().to_vec(),
            });
        }
        if !g.is_finite() {
            return Err(DiffError::NonFiniteGradient(name.to_string()));
        }
        if !state.first.contains_key(name) {
            return Err(DiffError::UnknownParam(name.to_string()));
        }
    }

    state.step += 1;
    let AdamConfig {
        learning_rate,
        beta1,
        beta2,
        epsilon,
    } = state.config;
    let t = state.step as i32;
    let correct1 = 1.0 - beta1.powi(t);
    let correct2 = 1.0 - beta2.powi(t);

    let names: Vec<String> = params.names().map(str::to_string).collect();
    for name in names {
        let g = &grads[&name];
        let m = state.first.get_mut(&name).expect("validated").data_mut();
        let v = state.second.get_mut(&name).expect("validated").data_mut();
        let theta = params.values_mut(&name)?;
        for i in 0..theta.len() {
            let gi = g.data()[i];
            m[i] = beta1 * m[i] + (1.0 - beta1) * gi;
            v[i] = beta2 * v[i] + (1.0 - beta2) * gi * gi;
            let m_hat = m[i] / correct1;
            let v_hat = v[i] / correct2;
            theta[i] -= learning_rate * m_hat / (v_hat.sqrt() + epsilon);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single(theta: f64) -> ParamStore {
        let mut p = ParamStore::new();
        p.register("theta", Tensor::scalar(theta)).unwrap();
        p
    }

    #[test]
    fn zero_gradient_leaves_params_and_counts_step() {
        let mut p = single(1.5);
        let mut s = AdamState::new(AdamConfig::default(), &p);
        let grads = IndexMap::from([("theta".to_string(), Tensor::scalar(0.0))]);
        adam_step(&mut p, &grads, &mut s).unwrap();
        assert_eq!(p.get("theta").unwrap().item(), 1.5);
        assert_eq!(s.step(), 1);
    }

    #[test]
    fn default_learning_rate() {
        assert_eq!(AdamConfig::default().learning_rate, 0.001);
    }

    #[test]
    fn one_step_hand_executed() {
        // m = 0.1, v = 0.001; m_hat = v_hat = 1, so theta = 1 - 0.1 * 1/(1 + 1e-8).
        let mut p = single(1.0);
        let cfg = AdamConfig {
            learning_rate: 0.1,
            ..AdamConfig::default()
        };
        let mut s = AdamState::new(cfg, &p);
        let grads = IndexMap::from([("theta".to_string(), Tensor::scalar(1.0))]);
        adam_step(&mut p, &grads, &mut s).unwrap();
        let expected = 1.0 - 0.1 / (1.0 + 1e-8);
        assert!((p.get("theta").unwrap().item() - expected).abs() < 1e-12);
        assert!((p.get("theta").unwrap().item() - 0.9).abs() < 1e-7);
    }

    #[test]
    fn missing_gradient_is_an_error() {
        let mut p = single(1.0);
        p.register("other", Tensor::zeros(1, 2)).unwrap();
        let mut s = AdamState::new(AdamConfig::default(), &p);
        let grads = IndexMap::from([("theta".to_string(), Tensor::scalar(1.0))]);
        let err = adam_step(&mut p, &grads, &mut s).unwrap_err();
        assert_eq!(err, DiffError::MissingGradient("other".into()));
        assert_eq!(s.step(), 0);
        assert_eq!(p.get("theta").unwrap().item(), 1.0);
    }
}
