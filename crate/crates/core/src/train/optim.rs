//! Adaptive-moment optimizer with decoupled weight decay, and the learning
//! rate schedule.

use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{read_tensors, write_tensor, Tensor};

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// Linear warmup to `peak` over `warmup` steps, then cosine decay to zero
/// at `total`. `step` counts from 1.
pub fn learning_rate(step: u64, peak: f64, warmup: u64, total: u64) -> f64 {
    if warmup > 0 && step <= warmup {
        return peak * step as f64 / warmup as f64;
    }
    if total <= warmup {
        return peak;
    }
    let progress = ((step - warmup) as f64 / (total - warmup) as f64).min(1.0);
    0.5 * peak * (1.0 + (PI * progress).cos())
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamW<S: Scalar> {
    pub weight_decay: f64,
    /// Updates applied so far.
    t: u64,
    m: Vec<Tensor<S>>,
    v: Vec<Tensor<S>>,
}

impl<S: Scalar> AdamW<S> {
    /// Zero moments shaped like `params`.
    pub fn new(params: &[Tensor<S>], weight_decay: f64) -> Self {
        let zeros = || params.iter().map(|p| Tensor::zeros(p.shape().to_vec())).collect();
        Self { weight_decay, t: 0, m: zeros(), v: zeros() }
    }

    pub fn updates(&self) -> u64 {
        self.t
    }

    /// One update. Decay applies to matrices and tables only, not to
    /// biases, gains or other vectors.
    pub fn step(&mut self, params: &mut [Tensor<S>], grads: &[Option<&[S]>], lr: f64) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != params.len() {
            return Err(Error::contract(format!(
                "{} params, {} gradients, {} moment slots",
                params.len(),
                grads.len(),
                self.m.len()
            )));
        }
        self.t += 1;
        let c1 = 1.0 - BETA1.powi(self.t as i32);
        let c2 = 1.0 - BETA2.powi(self.t as i32);
        let (b1, b2, eps) = (S::lit(BETA1), S::lit(BETA2), S::lit(ADAM_EPS));
        let step = S::lit(lr / c1);
        let inv_c2 = S::lit(1.0 / c2);
        for (i, p) in params.iter_mut().enumerate() {
            let decay = if p.rank() >= 2 { S::lit(1.0 - lr * self.weight_decay) } else { S::one() };
            let Some(g) = grads[i] else { continue };
            let (m, v) = (self.m[i].data_mut(), self.v[i].data_mut());
            for (k, w) in p.data_mut().iter_mut().enumerate() {
                m[k] = b1 * m[k] + (S::one() - b1) * g[k];
                v[k] = b2 * v[k] + (S::one() - b2) * g[k] * g[k];
                *w = *w * decay - step * m[k] / ((v[k] * inv_c2).sqrt() + eps);
            }
        }
        Ok(())
    }

    /// Update count followed by every first moment, then every second.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = self.t.to_le_bytes().to_vec();
        for t in self.m.iter().chain(&self.v) {
            write_tensor(t, &mut out);
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], params: &[Tensor<S>], weight_decay: f64) -> Result<Self> {
        let head: [u8; 8] =
            bytes.get(..8).and_then(|b| b.try_into().ok()).ok_or_else(|| Error::format("optimizer state", "truncated"))?;
        let all: Vec<Tensor<S>> = read_tensors(&bytes[8..])?;
        if all.len() != 2 * params.len() {
            return Err(Error::format("optimizer state", format!("{} moment tensors for {} params", all.len(), params.len())));
        }
        let (m, v) = all.split_at(params.len());
        for (p, (a, b)) in params.iter().zip(m.iter().zip(v)) {
            if a.shape() != p.shape() || b.shape() != p.shape() {
                return Err(Error::shape("optimizer state", a.shape(), p.shape()));
            }
        }
        Ok(Self { weight_decay, t: u64::from_le_bytes(head), m: m.to_vec(), v: v.to_vec() })
    }
}
