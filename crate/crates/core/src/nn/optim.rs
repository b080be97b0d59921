use std::collections::BTreeMap;
use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::tensor::{GradientMap, Param, ParamId, Tensor};

/// Bias-corrected Adam.
#[derive(Clone, Debug)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    first: BTreeMap<ParamId, Tensor>,
    second: BTreeMap<ParamId, Tensor>,
}

impl Default for Adam {
    fn default() -> Self {
        Self::new(0.9, 0.999, 1e-8)
    }
}

impl Adam {
    pub fn new(beta1: f64, beta2: f64, eps: f64) -> Self {
        Self {
            beta1,
            beta2,
            eps,
            step: 0,
            first: BTreeMap::new(),
            second: BTreeMap::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Applies one update to every parameter in `params`. Every parameter
    /// must have a finite gradient in `grads`; nothing is modified on error.
    pub fn step(&mut self, params: &mut [&mut Param], grads: &GradientMap, lr: f64) -> Result<()> {
        for p in params.iter() {
            let g = grads
                .get(p.id)
                .ok_or_else(|| Error::MissingGradient(p.name.clone()))?;
            if g.shape() != p.value.shape() {
                return Err(Error::ShapeMismatch {
                    op: "adam",
                    left: p.value.shape().to_vec(),
                    right: g.shape().to_vec(),
                });
            }
            if !g.is_finite() {
                return Err(Error::NonFiniteParamGradient { name: p.name.clone() });
            }
        }

        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for p in params.iter_mut() {
            let g = &grads.0[&p.id];
            let shape = p.value.shape().to_vec();
            let m = self
                .first
                .entry(p.id)
                .or_insert_with(|| Tensor::zeros(shape.clone()));
            let v = self.second.entry(p.id).or_insert_with(|| Tensor::zeros(shape));
            let (b1, b2, eps) = (self.beta1, self.beta2, self.eps);
            for (((w, m), v), &g) in p
                .value
                .data_mut()
                .iter_mut()
                .zip(m.data_mut())
                .zip(v.data_mut())
                .zip(g.data())
            {
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                let m_hat = *m / c1;
                let v_hat = *v / c2;
                *w -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// `base · ½(1 + cos(π · step / total))`.
pub fn cosine_lr(step: usize, total: usize, base: f64) -> Result<f64> {
    if total == 0 {
        return Err(Error::InvalidArgument("cosine schedule needs total > 0".into()));
    }
    if step > total {
        return Err(Error::InvalidArgument(format!("step {step} beyond total {total}")));
    }
    if step == total {
        return Ok(0.0);
    }
    Ok(base * 0.5 * (1.0 + (PI * step as f64 / total as f64).cos()))
}
