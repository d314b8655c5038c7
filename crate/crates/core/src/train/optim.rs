use crate::error::{Error, Result};
use crate::tensor::{ParamStore, Tensor};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 5e-5,
        }
    }
}

/// Adam moments for every parameter of one store, in id order.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub config: AdamConfig,
    pub step: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl OptimizerState {
    pub fn new(store: &ParamStore, config: AdamConfig) -> Self {
        let zeros: Vec<Tensor> = store
            .iter()
            .map(|p| Tensor::zeros(p.value.shape().to_vec()))
            .collect();
        Self {
            config,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    fn check(&self, store: &ParamStore) -> Result<()> {
        if self.m.len() != store.len() || self.v.len() != store.len() {
            return Err(Error::Invalid(format!(
                "optimizer tracks {} parameters, store has {}",
                self.m.len(),
                store.len()
            )));
        }
        for ((p, m), v) in store.iter().zip(&self.m).zip(&self.v) {
            if p.value.shape() != m.shape() || p.value.shape() != v.shape() {
                return Err(Error::shape("adam moments", p.value.shape(), m.shape()));
            }
        }
        Ok(())
    }

    /// One bias-corrected Adam update using the gradients stored in `store`,
    /// with decoupled weight decay `θ ← θ − lr·wd·θ` applied first to
    /// parameters marked for decay. Gradients are zeroed afterwards.
    pub fn step(&mut self, store: &mut ParamStore, lr: f64) -> Result<()> {
        self.check(store)?;
        self.step += 1;
        let AdamConfig {
            beta1,
            beta2,
            eps,
            weight_decay,
        } = self.config;
        let t = self.step as i32;
        let c1 = 1.0 - beta1.powi(t);
        let c2 = 1.0 - beta2.powi(t);
        for ((p, m), v) in store.iter_mut().zip(&mut self.m).zip(&mut self.v) {
            let decay = if p.decay { lr * weight_decay } else { 0.0 };
            let g = p.grad.data();
            let theta = p.value.data_mut();
            for (((th, &gi), mi), vi) in theta.iter_mut().zip(g).zip(m.data_mut()).zip(v.data_mut())
            {
                *th -= decay * *th;
                *mi = beta1 * *mi + (1.0 - beta1) * gi;
                *vi = beta2 * *vi + (1.0 - beta2) * gi * gi;
                let mhat = *mi / c1;
                let vhat = *vi / c2;
                *th -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
        store.zero_grad();
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_store(v: f64, decay: bool) -> ParamStore {
        let mut s = ParamStore::new();
        s.add("theta", Tensor::vector(vec![v]), decay);
        s
    }

    #[test]
    fn zero_gradient_is_a_fixed_point() {
        let mut store = scalar_store(0.7, true);
        let cfg = AdamConfig {
            weight_decay: 0.0,
            ..Default::default()
        };
        let mut opt = OptimizerState::new(&store, cfg);
        for _ in 0..5 {
            opt.step(&mut store, 1e-2).unwrap();
        }
        assert_eq!(store.iter().next().unwrap().value.data(), &[0.7]);
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut store = scalar_store(0.0, false);
        store.iter_mut().next().unwrap().grad.data_mut()[0] = 1.0;
        let mut opt = OptimizerState::new(&store, AdamConfig::default());
        opt.step(&mut store, 0.01).unwrap();
        let th = store.iter().next().unwrap().value.data()[0];
        assert!((th + 0.01).abs() < 1e-9);
        assert_eq!(store.iter().next().unwrap().grad.data(), &[0.0]);
    }
}
