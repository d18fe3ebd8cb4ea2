use super::params::{GradBuffer, ParamStore};
use super::tensor::Tensor;
use crate::error::{FanError, Result};

/// ADADELTA accumulators and hyperparameters.
///
/// Per element:
/// `E[g²] ← ρ·E[g²] + (1−ρ)·g²`,
/// `Δ = −sqrt(E[Δ²] + ε) / sqrt(E[g²] + ε) · g`,
/// `E[Δ²] ← ρ·E[Δ²] + (1−ρ)·Δ²`, `θ ← θ + lr·Δ`.
#[derive(Clone, Debug, PartialEq)]
pub struct AdadeltaState {
    pub rho: f64,
    pub eps: f64,
    /// Multiplier on the update; 1.0 is the unscaled method.
    pub lr: f64,
    pub sq_grad: Vec<Vec<f64>>,
    pub sq_delta: Vec<Vec<f64>>,
}

impl AdadeltaState {
    pub const DEFAULT_RHO: f64 = 0.9;
    pub const DEFAULT_EPS: f64 = 1e-6;

    pub fn new(store: &ParamStore, rho: f64, eps: f64) -> Result<Self> {
        if !(rho > 0.0 && rho < 1.0) {
            return Err(FanError::invalid(format!("adadelta rho must lie in (0,1), got {rho}")));
        }
        if !(eps > 0.0) {
            return Err(FanError::invalid(format!("adadelta epsilon must be positive, got {eps}")));
        }
        let zeros: Vec<Vec<f64>> = store.iter().map(|(_, _, t)| vec![0.0; t.len()]).collect();
        Ok(AdadeltaState {
            rho,
            eps,
            lr: 1.0,
            sq_grad: zeros.clone(),
            sq_delta: zeros,
        })
    }

    pub fn with_defaults(store: &ParamStore) -> Self {
        Self::new(store, Self::DEFAULT_RHO, Self::DEFAULT_EPS).expect("defaults are valid")
    }

    /// Apply one update to every parameter in `store`.
    pub fn step(&mut self, store: &mut ParamStore, grads: &GradBuffer) -> Result<()> {
        if grads.len() != store.len() || self.sq_grad.len() != store.len() {
            return Err(FanError::shape(
                "adadelta_step",
                format!(
                    "{} parameters, {} gradients, {} accumulators",
                    store.len(),
                    grads.len(),
                    self.sq_grad.len()
                ),
            ));
        }
        let (rho, eps, lr) = (self.rho, self.eps, self.lr);
        for id in store.ids().collect::<Vec<_>>() {
            let g = grads.get(id);
            let eg = &mut self.sq_grad[id.0];
            let ed = &mut self.sq_delta[id.0];
            let p = store.get_mut(id);
            if g.len() != p.len() || eg.len() != p.len() {
                return Err(FanError::shape(
                    "adadelta_step",
                    format!("parameter {} has {} values, gradient {}", id.0, p.len(), g.len()),
                ));
            }
            let pd = p.data_mut();
            for i in 0..pd.len() {
                let gi = g[i];
                eg[i] = rho * eg[i] + (1.0 - rho) * gi * gi;
                let delta = -((ed[i] + eps).sqrt() / (eg[i] + eps).sqrt()) * gi;
                ed[i] = rho * ed[i] + (1.0 - rho) * delta * delta;
                pd[i] += lr * delta;
            }
        }
        Ok(())
    }

    /// Accumulators as named tensors, in store order, for checkpointing.
    pub fn export(&self, store: &ParamStore) -> Vec<(String, Tensor)> {
        let mut out = Vec::with_capacity(2 * store.len());
        for (id, name, t) in store.iter() {
            let shape = t.shape().to_vec();
            out.push((
                format!("adadelta.sq_grad.{name}"),
                Tensor::from_parts(shape.clone(), self.sq_grad[id.0].clone()),
            ));
            out.push((
                format!("adadelta.sq_delta.{name}"),
                Tensor::from_parts(shape, self.sq_delta[id.0].clone()),
            ));
        }
        out
    }
}
