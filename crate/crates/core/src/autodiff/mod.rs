//! Reverse-mode automatic differentiation over flat parameter vectors.
//!
//! The tape supports gradients of gradients, which is what lets the meta
//! optimizer differentiate through unrolled inner updates.

mod nn;
mod tape;

pub use nn::{mlp_forward, rnn_forward, LayerSpec, Lstm, Mlp, RecurrentSpec};
pub use tape::{Tape, Var, LOG_FLOOR};

use rand::Rng;
use thiserror::Error;

/// A length-1 node.
pub type Scalar = Var;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum AdError {
    #[error("loss and parameters live on different tapes")]
    TapeMismatch,
    #[error("non-finite value encountered")]
    NonFinite,
    #[error("higher-order gradients require a higher-order tape")]
    HigherOrderUnavailable,
    #[error("shape mismatch: expected {expected}, found {found}")]
    ShapeMismatch { expected: usize, found: usize },
    #[error("empty input sequence")]
    EmptySequence,
}

/// Flat, finite, fixed-length parameter container.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamVector {
    values: Vec<f64>,
}

impl ParamVector {
    pub fn new(values: Vec<f64>) -> Result<Self, AdError> {
        if values.iter().any(|x| !x.is_finite()) {
            return Err(AdError::NonFinite);
        }
        Ok(Self { values })
    }

    pub(crate) fn from_vec_unchecked(values: Vec<f64>) -> Self {
        Self { values }
    }

    pub fn zeros(n: usize) -> Self {
        Self { values: vec![0.0; n] }
    }

    /// Uniform initialization in `±1/sqrt(fan_in)` per block.
    ///
    /// `blocks` lists `(len, fan_in)` in layout order.
    pub fn init_uniform<R: Rng + ?Sized>(blocks: &[(usize, usize)], rng: &mut R) -> Self {
        let mut values = Vec::with_capacity(blocks.iter().map(|b| b.0).sum());
        for &(len, fan_in) in blocks {
            let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
            values.extend((0..len).map(|_| rng.gen_range(-bound..=bound)));
        }
        Self { values }
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.values
    }

    /// `self - lr * grad`; rejects non-finite gradients or results.
    pub fn step(&self, grad: &ParamVector, lr: f64) -> Result<ParamVector, AdError> {
        if grad.len() != self.len() {
            return Err(AdError::ShapeMismatch {
                expected: self.len(),
                found: grad.len(),
            });
        }
        if grad.values.iter().any(|g| !g.is_finite()) {
            return Err(AdError::NonFinite);
        }
        let values: Vec<f64> = self.values.iter().zip(&grad.values).map(|(p, g)| p - lr * g).collect();
        ParamVector::new(values)
    }

    pub fn dot(&self, other: &ParamVector) -> f64 {
        self.values.iter().zip(&other.values).map(|(a, b)| a * b).sum()
    }

    pub fn norm(&self) -> f64 {
        self.dot(self).sqrt()
    }

    pub fn max_abs_diff(&self, other: &ParamVector) -> f64 {
        self.values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

/// Adam with the usual bias correction, for offline training loops.
#[derive(Debug, Clone)]
pub struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    pub fn new(len: usize, lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: vec![0.0; len],
            v: vec![0.0; len],
            t: 0,
        }
    }

    pub fn step(&mut self, params: &ParamVector, grad: &ParamVector) -> Result<ParamVector, AdError> {
        if grad.len() != self.m.len() || params.len() != self.m.len() {
            return Err(AdError::ShapeMismatch {
                expected: self.m.len(),
                found: grad.len(),
            });
        }
        if grad.values.iter().any(|g| !g.is_finite()) {
            return Err(AdError::NonFinite);
        }
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        let mut out = params.values.clone();
        for i in 0..out.len() {
            let g = grad.values[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            out[i] -= self.lr * (self.m[i] / c1) / ((self.v[i] / c2).sqrt() + self.eps);
        }
        ParamVector::new(out)
    }
}

/// Softmax of plain numbers with max subtraction.
pub fn softmax(z: &[f64]) -> Vec<f64> {
    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|x| (x - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|x| x / s).collect()
}

#[cfg(test)]
mod tests;
