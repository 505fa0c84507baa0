use serde::{Deserialize, Serialize};

use super::{Gradients, Tensor};
use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// First and second moment accumulators, one pair per parameter in store
/// order.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    first: Vec<Tensor>,
    second: Vec<Tensor>,
    step: u64,
}

impl AdamState {
    pub fn new(store: &ParamStore, config: AdamConfig) -> Self {
        Self {
            config,
            first: store.iter().map(|(_, _, t)| Tensor::zeros(t.shape())).collect(),
            second: store.iter().map(|(_, _, t)| Tensor::zeros(t.shape())).collect(),
            step: 0,
        }
    }

    pub fn from_parts(config: AdamConfig, first: Vec<Tensor>, second: Vec<Tensor>, step: u64) -> Result<Self> {
        if first.len() != second.len() {
            return Err(Error::contract("adam moment count mismatch"));
        }
        Ok(Self { config, first, second, step })
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn first_moment(&self, id: ParamId) -> &Tensor {
        &self.first[id.index()]
    }

    pub fn second_moment(&self, id: ParamId) -> &Tensor {
        &self.second[id.index()]
    }

    /// One bias-corrected Adam update of every parameter, using the learning
    /// rate returned by `lr_for`. Every parameter must have a gradient.
    pub fn step(&mut self, store: &mut ParamStore, grads: &Gradients, lr_for: impl Fn(ParamId) -> f64) -> Result<()> {
        if self.first.len() != store.len() {
            return Err(Error::contract(format!(
                "optimizer tracks {} parameters, store has {}",
                self.first.len(),
                store.len()
            )));
        }
        for id in store.ids() {
            let g = grads
                .param(id)
                .ok_or_else(|| Error::contract(format!("missing gradient for {}", store.name(id))))?;
            if g.shape() != store.get(id).shape() || self.first[id.index()].shape() != g.shape() {
                return Err(Error::shape("adam_step", store.get(id).shape(), g.shape()));
            }
        }
        self.step += 1;
        let AdamConfig { beta1, beta2, epsilon } = self.config;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        for id in store.ids() {
            let lr = lr_for(id);
            let g = grads.param(id).expect("checked above").data();
            let m = self.first[id.index()].data_mut();
            let v = self.second[id.index()].data_mut();
            let p = store.get_mut(id).data_mut();
            for i in 0..p.len() {
                m[i] = beta1 * m[i] + (1.0 - beta1) * g[i];
                v[i] = beta2 * v[i] + (1.0 - beta2) * g[i] * g[i];
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                p[i] -= lr * m_hat / (v_hat.sqrt() + epsilon);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store() -> (ParamStore, ParamId, ParamId) {
        let mut s = ParamStore::new();
        let a = s.insert("a", Tensor::row_vector(vec![1.0, -2.0, 3.0])).unwrap();
        let b = s.insert("b", Tensor::row_vector(vec![1.0, -2.0, 3.0])).unwrap();
        (s, a, b)
    }

    #[test]
    fn zero_gradient_is_fixed_point() {
        let (mut s, a, b) = store();
        let before = s.clone();
        let mut st = AdamState::new(&s, AdamConfig::default());
        let mut g = Gradients::default();
        g.insert_param(a, Tensor::zeros(&[1, 3]));
        g.insert_param(b, Tensor::zeros(&[1, 3]));
        for _ in 0..5 {
            st.step(&mut s, &g, |_| 1e-2).unwrap();
        }
        assert_eq!(s, before);
        assert_eq!(st.step_count(), 5);
    }

    #[test]
    fn first_step_moves_by_lr_times_sign() {
        let (mut s, a, b) = store();
        let before = s.clone();
        let mut st = AdamState::new(&s, AdamConfig::default());
        let mut g = Gradients::default();
        g.insert_param(a, Tensor::row_vector(vec![0.3, -4.0, 1e-3]));
        g.insert_param(b, Tensor::row_vector(vec![0.3, -4.0, 1e-3]));
        let lr = 1e-3;
        st.step(&mut s, &g, |_| lr).unwrap();
        for id in [a, b] {
            for (i, sign) in [-1.0, 1.0, -1.0].iter().enumerate() {
                let delta = s.get(id).data()[i] - before.get(id).data()[i];
                assert!((delta - sign * lr).abs() < 1e-7 * lr.max(1.0), "{delta}");
            }
        }
        // equal grads, equal updates
        let da: Vec<f64> = s.get(a).data().iter().zip(before.get(a).data()).map(|(x, y)| x - y).collect();
        let db: Vec<f64> = s.get(b).data().iter().zip(before.get(b).data()).map(|(x, y)| x - y).collect();
        assert_eq!(da, db);
    }

    #[test]
    fn missing_gradient_is_an_error() {
        let (mut s, a, _) = store();
        let mut st = AdamState::new(&s, AdamConfig::default());
        let mut g = Gradients::default();
        g.insert_param(a, Tensor::zeros(&[1, 3]));
        assert!(matches!(st.step(&mut s, &g, |_| 1.0), Err(Error::Contract(_))));
        assert_eq!(st.step_count(), 0);
    }
}
