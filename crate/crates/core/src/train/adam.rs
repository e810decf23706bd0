use cq_tensor::{ParamId, ParamStore, Scalar, Tensor};

use crate::error::{CqError, Result};

/// Bias-corrected Adam over one parameter group, with L2 decay folded into
/// the gradient before the moment updates.
#[derive(Clone, Debug)]
pub struct Adam<T: Scalar> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: u64,
    ids: Vec<ParamId>,
    m: Vec<Tensor<T>>,
    v: Vec<Tensor<T>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(store: &ParamStore<T>, ids: Vec<ParamId>, lr: f64, weight_decay: f64) -> Self {
        let m: Vec<_> = ids.iter().map(|&id| store.get(id).zeros_like()).collect();
        Self { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay, step: 0, ids, v: m.clone(), m }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn ids(&self) -> &[ParamId] {
        &self.ids
    }

    /// Applies one update; `grads` is indexed like the store (see
    /// `Gradients::for_params`). Nothing is modified if any gradient is non-finite.
    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &[Tensor<T>]) -> Result<()> {
        for &id in &self.ids {
            if !grads[id.index()].all_finite() {
                return Err(CqError::NonFiniteGradient { name: store.entry(id).name.clone() });
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = T::of_f64(1.0 / (1.0 - self.beta1.powi(t)));
        let c2 = T::of_f64(1.0 / (1.0 - self.beta2.powi(t)));
        let (b1, b2) = (T::of_f64(self.beta1), T::of_f64(self.beta2));
        let (one, lr, eps, wd) = (T::one(), T::of_f64(self.lr), T::of_f64(self.eps), T::of_f64(self.weight_decay));
        for (k, &id) in self.ids.iter().enumerate() {
            let g = grads[id.index()].data();
            let (m, v) = (self.m[k].data_mut(), self.v[k].data_mut());
            let p = store.get_mut(id).data_mut();
            for i in 0..p.len() {
                let gi = g[i] + wd * p[i];
                m[i] = b1 * m[i] + (one - b1) * gi;
                v[i] = b2 * v[i] + (one - b2) * gi * gi;
                let mhat = m[i] * c1;
                let vhat = v[i] * c2;
                p[i] = p[i] - lr * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }
}
