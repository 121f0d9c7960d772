use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Gradients, ParamStore, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moment estimates, one pair per parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    pub step: u64,
    pub m: Vec<Tensor<f64>>,
    pub v: Vec<Tensor<f64>>,
}

impl AdamState {
    pub fn new(store: &ParamStore<f64>) -> Self {
        Self::with_config(store, AdamConfig::default())
    }

    pub fn with_config(store: &ParamStore<f64>, config: AdamConfig) -> Self {
        let zeros: Vec<Tensor<f64>> = store
            .iter()
            .map(|(_, _, t)| Tensor::zeros(t.shape().to_vec()))
            .collect();
        Self {
            config,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }
}

/// One bias-corrected Adam update; `l2_weight * theta` is added to each gradient.
pub fn adam_step(
    params: &mut ParamStore<f64>,
    grads: &Gradients<f64>,
    state: &mut AdamState,
    lr: f64,
    l2_weight: f64,
) -> Result<()> {
    if grads.params().len() != params.len() || state.m.len() != params.len() {
        return Err(Error::InvalidArgument(
            "gradients or optimizer state do not match the parameter set".into(),
        ));
    }
    if grads.params().iter().any(|g| !g.all_finite()) {
        return Err(Error::NonFinite("gradient".into()));
    }
    let AdamConfig { beta1, beta2, eps } = state.config;
    state.step += 1;
    let bc1 = 1.0 - beta1.powi(state.step as i32);
    let bc2 = 1.0 - beta2.powi(state.step as i32);
    for (i, id) in params.ids().collect::<Vec<_>>().into_iter().enumerate() {
        let g = grads.params()[i].data();
        let theta = params.get_mut(id).data_mut();
        let m = state.m[i].data_mut();
        let v = state.v[i].data_mut();
        for j in 0..theta.len() {
            let gj = g[j] + l2_weight * theta[j];
            m[j] = beta1 * m[j] + (1.0 - beta1) * gj;
            v[j] = beta2 * v[j] + (1.0 - beta2) * gj * gj;
            let mhat = m[j] / bc1;
            let vhat = v[j] / bc2;
            theta[j] -= lr * mhat / (vhat.sqrt() + eps);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Record;

    fn grads_for(store: &ParamStore<f64>, scale: f64) -> Gradients<f64> {
        let mut rec = Record::with_params(store);
        let id = store.ids().next().unwrap();
        let p = rec.param(id);
        let y = rec.scale(p, scale).unwrap();
        let l = rec.sum_all(y).unwrap();
        rec.backward(l).unwrap()
    }

    fn store(x: f64) -> ParamStore<f64> {
        let mut s = ParamStore::new();
        s.add("x", Tensor::from_vec(vec![x]));
        s
    }

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut s = store(1.5);
        let g = grads_for(&s, 0.0);
        let mut st = AdamState::new(&s);
        adam_step(&mut s, &g, &mut st, 0.1, 0.0).unwrap();
        assert_eq!(s.iter().next().unwrap().2.item(), 1.5);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        // m̂ = g, v̂ = g², so the step is lr * g / (|g| + eps)
        let mut s = store(0.0);
        let g = grads_for(&s, 3.0);
        let mut st = AdamState::new(&s);
        adam_step(&mut s, &g, &mut st, 0.01, 0.0).unwrap();
        let x = s.iter().next().unwrap().2.item();
        assert!((x + 0.01 * 3.0 / (3.0 + 1e-8)).abs() < 1e-15, "{x}");
    }

    #[test]
    fn constant_gradient_keeps_descending() {
        let mut s = store(0.0);
        let mut st = AdamState::new(&s);
        let mut last = 0.0;
        for _ in 0..3 {
            let g = grads_for(&s, -2.0);
            adam_step(&mut s, &g, &mut st, 0.01, 0.0).unwrap();
            let x = s.iter().next().unwrap().2.item();
            assert!(x > last);
            last = x;
        }
    }

    #[test]
    fn non_finite_gradient_is_rejected() {
        let mut s = store(0.0);
        let g = grads_for(&s, f64::NAN);
        let mut st = AdamState::new(&s);
        assert!(adam_step(&mut s, &g, &mut st, 0.01, 0.0).is_err());
    }
}
