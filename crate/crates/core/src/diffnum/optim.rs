//! AdamW with decoupled weight decay.

use serde::{Deserialize, Serialize};

use super::{Gradients, ParamStore, Real};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            learning_rate: 3e-4,
            weight_decay: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

#[derive(Clone, Debug)]
pub struct AdamW<T> {
    pub config: AdamWConfig,
    step: u64,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
}

impl<T: Real> AdamW<T> {
    pub fn new(config: AdamWConfig) -> Self {
        Self {
            config,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// One update of every trainable parameter that has a gradient. A
    /// non-finite gradient rejects the whole update and leaves both the
    /// parameters and the moments untouched.
    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &Gradients<T>) -> Result<()> {
        for (id, g) in grads.iter() {
            if let Some(i) = g.iter().position(|v| !v.is_finite()) {
                return Err(Error::Numeric(format!(
                    "non-finite gradient for `{}` at element {i} ({}); update rejected",
                    store.name(id),
                    g[i]
                )));
            }
        }
        if self.m.len() < store.len() {
            self.m.resize(store.len(), Vec::new());
            self.v.resize(store.len(), Vec::new());
        }
        self.step += 1;
        let c = self.config;
        let (b1, b2) = (T::of(c.beta1), T::of(c.beta2));
        let bc1 = T::of(1.0 - c.beta1.powi(self.step as i32));
        let bc2 = T::of(1.0 - c.beta2.powi(self.step as i32));
        let lr = T::of(c.learning_rate);
        let decay = T::of(1.0 - c.learning_rate * c.weight_decay);
        let eps = T::of(c.epsilon);
        for (id, g) in grads.iter() {
            if !store.is_trainable(id) {
                continue;
            }
            let p = store.get_mut(id).data_mut();
            let i = id.index();
            if self.m[i].len() != p.len() {
                self.m[i] = vec![T::zero(); p.len()];
                self.v[i] = vec![T::zero(); p.len()];
            }
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for j in 0..p.len() {
                m[j] = b1 * m[j] + (T::one() - b1) * g[j];
                v[j] = b2 * v[j] + (T::one() - b2) * g[j] * g[j];
                let mh = m[j] / bc1;
                let vh = v[j] / bc2;
                p[j] = p[j] * decay - lr * mh / (vh.sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// Rescales gradients so their global L2 norm is at most `max_norm`;
/// returns the norm before clipping.
pub fn clip_global_norm<T: Real>(grads: &mut Gradients<T>, max_norm: f64) -> f64 {
    let n = grads.global_norm();
    if n > max_norm && n.is_finite() {
        grads.scale(T::of(max_norm / n));
    }
    n
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffnum::{ParamId, Tensor};

    fn one_param(v: &[f64]) -> (ParamStore<f64>, ParamId) {
        let mut s = ParamStore::new();
        let id = s.add("w", Tensor::new(&[v.len()], v.to_vec()).unwrap());
        (s, id)
    }

    #[test]
    fn zero_gradient_without_decay_is_noop() {
        let (mut s, id) = one_param(&[1.0, -2.0]);
        let mut opt = AdamW::new(AdamWConfig {
            weight_decay: 0.0,
            ..Default::default()
        });
        let mut g = Gradients::empty(1);
        g.set(id, vec![0.0, 0.0]);
        opt.step(&mut s, &g).unwrap();
        assert_eq!(s.get(id).data(), &[1.0, -2.0]);
    }

    #[test]
    fn zero_gradient_decays_parameters() {
        let (mut s, id) = one_param(&[1.0, -2.0]);
        let cfg = AdamWConfig {
            learning_rate: 0.01,
            weight_decay: 0.1,
            ..Default::default()
        };
        let mut opt = AdamW::new(cfg);
        let mut g = Gradients::empty(1);
        g.set(id, vec![0.0, 0.0]);
        opt.step(&mut s, &g).unwrap();
        let k = 1.0 - 0.01 * 0.1;
        assert_eq!(s.get(id).data(), &[k, -2.0 * k]);
    }

    #[test]
    fn scalar_quadratic_converges() {
        let (mut s, id) = one_param(&[0.0]);
        let mut opt = AdamW::new(AdamWConfig {
            learning_rate: 0.1,
            weight_decay: 0.0,
            ..Default::default()
        });
        for _ in 0..500 {
            let w = s.get(id).data()[0];
            let mut g = Gradients::empty(1);
            g.set(id, vec![2.0 * (w - 3.0)]);
            opt.step(&mut s, &g).unwrap();
        }
        assert!((s.get(id).data()[0] - 3.0).abs() < 0.05);
    }

    #[test]
    fn non_finite_gradient_is_rejected() {
        let (mut s, id) = one_param(&[1.0]);
        let mut opt = AdamW::new(AdamWConfig::default());
        let mut g = Gradients::empty(1);
        g.set(id, vec![f64::NAN]);
        let err = opt.step(&mut s, &g).unwrap_err();
        assert!(err.to_string().contains("`w`"));
        assert_eq!(s.get(id).data(), &[1.0]);
        assert_eq!(opt.steps(), 0);
    }
}
