//! SGD with momentum and coupled weight decay, plus the poly schedule.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// `base_lr · (1 − iter / max_iter)^power`.
pub fn poly_lr(iter: usize, max_iter: usize, base_lr: f64, power: f64) -> Result<f64> {
    if max_iter == 0 {
        return Err(Error::Contract("poly_lr needs max_iter > 0".into()));
    }
    if iter > max_iter {
        return Err(Error::Contract(format!(
            "poly_lr iteration {iter} beyond max_iter {max_iter}"
        )));
    }
    Ok(base_lr * (1.0 - iter as f64 / max_iter as f64).powf(power))
}

/// Per step, for every parameter `p` with gradient `g`:
///
/// ```text
/// d   = g + weight_decay · p
/// buf = momentum · buf + d
/// p   = p − lr · buf
/// ```
#[derive(Clone, Debug, PartialEq)]
pub struct Sgd {
    momentum: f64,
    weight_decay: f64,
    buffers: Vec<Vec<f64>>,
}

impl Sgd {
    pub fn new(momentum: f64, weight_decay: f64) -> Self {
        Self {
            momentum,
            weight_decay,
            buffers: Vec::new(),
        }
    }

    pub fn with_buffers(momentum: f64, weight_decay: f64, buffers: Vec<Vec<f64>>) -> Self {
        Self {
            momentum,
            weight_decay,
            buffers,
        }
    }

    pub fn buffers(&self) -> &[Vec<f64>] {
        &self.buffers
    }

    /// Applies one update using each parameter's stored gradient; a
    /// parameter without a gradient is treated as having a zero gradient.
    pub fn step(&mut self, params: &mut [Tensor], lr: f64) -> Result<()> {
        if self.buffers.is_empty() {
            self.buffers = params.iter().map(|p| vec![0.0; p.numel()]).collect();
        }
        if self.buffers.len() != params.len() {
            return Err(Error::Contract(format!(
                "optimizer holds {} buffers for {} parameters",
                self.buffers.len(),
                params.len()
            )));
        }
        for (p, buf) in params.iter_mut().zip(&mut self.buffers) {
            if buf.len() != p.numel() {
                return Err(Error::shape("sgd buffer", p.shape(), &[buf.len()]));
            }
            let grad = p.grad().map(<[f64]>::to_vec);
            let values = p.values_mut();
            for (i, (v, b)) in values.iter_mut().zip(buf.iter_mut()).enumerate() {
                let g = grad.as_ref().map_or(0.0, |g| g[i]);
                let d = g + self.weight_decay * *v;
                *b = self.momentum * *b + d;
                *v -= lr * *b;
            }
        }
        Ok(())
    }
}
