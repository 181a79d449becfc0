use crate::loss::LOSS_WEIGHT_FLOOR;
use crate::net::{MlpParams, ParamGrads};
use crate::{Error, Result};

/// Adam moments for every network weight followed by λ1 and λ2.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new(params: &MlpParams) -> Self {
        let n = params.values.len() + 2;
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
            step: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.m.iter().chain(&self.v).all(|x| x.is_finite())
    }

    /// One bias-corrected update of `x` (a contiguous slice of the state
    /// starting at `offset`).
    fn apply(&mut self, x: &mut [f64], g: &[f64], offset: usize, lr: f64) {
        let t = self.step as f64;
        let c1 = 1.0 - self.beta1.powf(t);
        let c2 = 1.0 - self.beta2.powf(t);
        let (b1, b2, eps) = (self.beta1, self.beta2, self.eps);
        let m = &mut self.m[offset..offset + x.len()];
        let v = &mut self.v[offset..offset + x.len()];
        for i in 0..x.len() {
            m[i] = b1 * m[i] + (1.0 - b1) * g[i];
            v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
            x[i] -= lr * (m[i] / c1) / ((v[i] / c2).sqrt() + eps);
        }
    }
}

/// Adam step on all weights and the loss weights; λ1, λ2 are clamped to
/// [`LOSS_WEIGHT_FLOOR`] afterwards.
pub fn adam_step(params: &mut MlpParams, grads: &ParamGrads, state: &mut AdamState, lr: f64) -> Result<()> {
    let n = params.values.len();
    if grads.values.len() != n || state.m.len() != n + 2 || state.v.len() != n + 2 {
        return Err(Error::ShapeMismatch(format!(
            "adam: {n} weights, {} gradients, {} moments",
            grads.values.len(),
            state.m.len()
        )));
    }
    state.step += 1;
    state.apply(&mut params.values, &grads.values, 0, lr);
    state.apply(&mut params.loss_weights, &grads.loss_weights, n, lr);
    for w in &mut params.loss_weights {
        *w = w.max(LOSS_WEIGHT_FLOOR);
    }
    Ok(())
}
