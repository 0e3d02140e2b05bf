//! Loss, AdamW and the cosine learning-rate schedule.

use std::f64::consts::PI;

use crate::autodiff::cross_entropy_value;
use crate::error::{Error, Result};
use crate::tensor::Array;

const ADAM_EPS: f64 = 1e-8;

/// Mean cross-entropy of `logits: [B × C]` against integer labels.
pub fn cross_entropy(logits: &Array, labels: &[usize]) -> Result<f64> {
    let c = logits.cols();
    if logits.shape().len() != 2 || logits.rows() != labels.len() {
        return Err(Error::shape(
            "cross_entropy",
            format!("{:?} logits for {} labels", logits.shape(), labels.len()),
        ));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
        return Err(Error::Domain(format!("label {bad} outside [0, {c})")));
    }
    Ok(cross_entropy_value(logits.data(), labels, c).0)
}

/// `base · ½(1 + cos(π · epoch / total))`.
pub fn cosine_lr(base_lr: f64, epoch: usize, total_epochs: usize) -> f64 {
    if total_epochs == 0 {
        return base_lr;
    }
    let progress = (epoch as f64 / total_epochs as f64).min(1.0);
    (base_lr * 0.5 * (1.0 + (PI * progress).cos())).max(0.0)
}

/// Adam with decoupled weight decay.
#[derive(Clone, Debug)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamW {
    pub fn new(beta1: f64, beta2: f64, weight_decay: f64) -> Self {
        AdamW {
            beta1,
            beta2,
            weight_decay,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// One update at learning rate `lr`. Moments are allocated lazily on
    /// the first call and must see the same parameter list afterwards.
    pub fn step(&mut self, params: Vec<&mut Array>, grads: &[Array], lr: f64) -> Result<()> {
        if params.len() != grads.len() {
            return Err(Error::shape(
                "adamw_step",
                format!("{} params, {} grads", params.len(), grads.len()),
            ));
        }
        let t = self.step + 1;
        for (i, g) in grads.iter().enumerate() {
            if g.data().iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!(
                    "gradient of parameter {i} at optimizer step {t}"
                )));
            }
        }
        if self.m.is_empty() {
            self.m = params.iter().map(|p| vec![0.0; p.len()]).collect();
            self.v = self.m.clone();
        }
        self.step = t;

        let bc1 = 1.0 - self.beta1.powi(t as i32);
        let bc2 = 1.0 - self.beta2.powi(t as i32);
        for (((p, g), m), v) in params.into_iter().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            if p.len() != g.len() || m.len() != p.len() {
                return Err(Error::shape("adamw_step", "parameter and gradient sizes differ"));
            }
            for (((w, &gi), mi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * gi;
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * gi * gi;
                let m_hat = *mi / bc1;
                let v_hat = *vi / bc2;
                *w -= lr * (m_hat / (v_hat.sqrt() + ADAM_EPS)) + lr * self.weight_decay * *w;
            }
        }
        Ok(())
    }
}
