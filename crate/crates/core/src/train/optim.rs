use crate::error::{Error, Result};
use crate::substrate::{Matrix, ParamGrads, ParamStore, Real};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamWConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

/// Adam with decoupled weight decay.
///
/// Parameters that received no gradient in a step (and frozen ones) are
/// left untouched, including their decay and moment estimates.
#[derive(Clone, Debug)]
pub struct AdamW<T> {
    config: AdamWConfig,
    first: Vec<Matrix<T>>,
    second: Vec<Matrix<T>>,
    steps: Vec<u32>,
}

impl<T: Real> AdamW<T> {
    pub fn new(config: AdamWConfig, store: &ParamStore<T>) -> Self {
        let zeros = || store.iter().map(|p| Matrix::zeros(p.value.rows(), p.value.cols())).collect();
        Self {
            config,
            first: zeros(),
            second: zeros(),
            steps: vec![0; store.len()],
        }
    }

    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &ParamGrads<T>) -> Result<()> {
        if store.len() != self.first.len() {
            return Err(Error::Dimension(format!(
                "optimizer tracks {} parameters, store has {}",
                self.first.len(),
                store.len()
            )));
        }
        let c = self.config;
        let (b1, b2) = (T::from_f64_lossy(c.beta1), T::from_f64_lossy(c.beta2));
        let one = T::one();
        let eps = T::from_f64_lossy(c.eps);
        for id in store.ids().collect::<Vec<_>>() {
            let Some(grad) = grads.get(id) else { continue };
            let param = store.get_mut(id);
            if !param.trainable {
                continue;
            }
            let i = id.index();
            self.steps[i] += 1;
            let t = self.steps[i] as i32;
            let correction1 = one - b1.powi(t);
            let correction2 = one - b2.powi(t);
            let lr = T::from_f64_lossy(c.learning_rate);
            let decay = one - lr * T::from_f64_lossy(c.weight_decay);
            let m = self.first[i].as_mut_slice();
            let v = self.second[i].as_mut_slice();
            for (((p, &g), m), v) in param.value.as_mut_slice().iter_mut().zip(grad.as_slice()).zip(m).zip(v) {
                *m = b1 * *m + (one - b1) * g;
                *v = b2 * *v + (one - b2) * g * g;
                let m_hat = *m / correction1;
                let v_hat = *v / correction2;
                *p = *p * decay - lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}
