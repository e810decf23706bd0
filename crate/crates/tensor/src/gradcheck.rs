//! Central finite-difference verification of reverse-mode gradients.

use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

pub const DEFAULT_EPS: f64 = 1e-5;

/// Denominator floor for [`relative_error`] so that vanishing components
/// are compared absolutely.
pub const RELATIVE_FLOOR: f64 = 1e-5;

/// `|a - n| / max(|a|, |n|, RELATIVE_FLOOR)`
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(RELATIVE_FLOOR)
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_relative_error: f64,
    pub coordinates: usize,
}

impl GradCheckReport {
    fn merge(&mut self, analytic: f64, numeric: f64) {
        self.max_relative_error = self.max_relative_error.max(relative_error(analytic, numeric));
        self.coordinates += 1;
    }
}

#[derive(Clone, Debug)]
pub struct GradCheck {
    pub eps: f64,
    /// Evenly spaced coordinates probed per tensor; larger tensors are subsampled.
    pub max_coords: usize,
}

impl Default for GradCheck {
    fn default() -> Self {
        Self { eps: DEFAULT_EPS, max_coords: 64 }
    }
}

fn probe_coords(len: usize, cap: usize) -> Vec<usize> {
    if len <= cap {
        (0..len).collect()
    } else {
        (0..cap).map(|i| i * len / cap).collect()
    }
}

impl GradCheck {
    /// Checks gradients with respect to free input tensors.
    pub fn inputs<F>(&self, inputs: &[Tensor<f64>], build: F) -> Result<GradCheckReport>
    where
        F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
    {
        let eval = |xs: &[Tensor<f64>]| -> Result<f64> {
            let mut g = Graph::new();
            let vars: Vec<Var> = xs.iter().map(|x| g.input(x.clone())).collect();
            let loss = build(&mut g, &vars)?;
            g.value(loss).item()
        };
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|x| g.input_with_grad(x.clone())).collect();
        let loss = build(&mut g, &vars)?;
        let grads = g.backward(loss)?;
        let mut report = GradCheckReport { max_relative_error: 0.0, coordinates: 0 };
        let mut probe = inputs.to_vec();
        for (k, v) in vars.iter().enumerate() {
            let analytic = grads.wrt(*v).cloned().unwrap_or_else(|| inputs[k].zeros_like());
            for i in probe_coords(inputs[k].len(), self.max_coords) {
                let x0 = inputs[k].data()[i];
                probe[k].data_mut()[i] = x0 + self.eps;
                let up = eval(&probe)?;
                probe[k].data_mut()[i] = x0 - self.eps;
                let down = eval(&probe)?;
                probe[k].data_mut()[i] = x0;
                report.merge(analytic.data()[i], (up - down) / (2.0 * self.eps));
            }
        }
        Ok(report)
    }

    /// Checks gradients with respect to stored parameters.
    pub fn params<F>(&self, store: &ParamStore<f64>, ids: &[ParamId], build: F) -> Result<GradCheckReport>
    where
        F: Fn(&mut Graph<f64>, &ParamStore<f64>) -> Result<Var>,
    {
        let mut g = Graph::new();
        let loss = build(&mut g, store)?;
        let grads = g.backward(loss)?.for_params(store);
        let mut report = GradCheckReport { max_relative_error: 0.0, coordinates: 0 };
        let mut probe = store.clone();
        let eval = |s: &ParamStore<f64>| -> Result<f64> {
            let mut g = Graph::new();
            let loss = build(&mut g, s)?;
            g.value(loss).item()
        };
        for &id in ids {
            for i in probe_coords(store.get(id).len(), self.max_coords) {
                let x0 = store.get(id).data()[i];
                probe.get_mut(id).data_mut()[i] = x0 + self.eps;
                let up = eval(&probe)?;
                probe.get_mut(id).data_mut()[i] = x0 - self.eps;
                let down = eval(&probe)?;
                probe.get_mut(id).data_mut()[i] = x0;
                report.merge(grads[id.index()].data()[i], (up - down) / (2.0 * self.eps));
            }
        }
        Ok(report)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relative_error_uses_floor_for_tiny_values() {
        assert_eq!(relative_error(1.0, 1.0), 0.0);
        assert!((relative_error(2.0, 1.0) - 0.5).abs() < 1e-15);
        assert!((relative_error(0.0, 1e-9) - 1e-4).abs() < 1e-12);
    }
}
