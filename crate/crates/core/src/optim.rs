//! Adam with decoupled weight decay.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.99,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

/// First/second moments for an ordered list of parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    names: Vec<String>,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    steps: u64,
    pub config: AdamConfig,
}

impl AdamState {
    pub fn new<'a>(params: impl IntoIterator<Item = (&'a str, usize)>, config: AdamConfig) -> Self {
        let (names, sizes): (Vec<String>, Vec<usize>) = params.into_iter().map(|(n, s)| (n.to_owned(), s)).unzip();
        AdamState {
            m: sizes.iter().map(|&s| vec![0.0; s]).collect(),
            v: sizes.iter().map(|&s| vec![0.0; s]).collect(),
            names,
            steps: 0,
            config,
        }
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    pub fn first_moment(&self, i: usize) -> &[f64] {
        &self.m[i]
    }

    pub fn second_moment(&self, i: usize) -> &[f64] {
        &self.v[i]
    }

    /// One update. `grads[i] == None` marks a frozen parameter: it and its
    /// moments are left untouched. `lrs[i]` is the step size for parameter i.
    ///
    /// All gradients are checked before anything is modified, so a
    /// non-finite gradient leaves parameters and state as they were.
    pub fn step(&mut self, params: &mut [&mut Tensor], grads: &[Option<&[f64]>], lrs: &[f64]) -> Result<()> {
        let n = self.names.len();
        if params.len() != n || grads.len() != n || lrs.len() != n {
            return Err(Error::invalid(format!(
                "adam: expected {n} parameters, got {} params / {} grads / {} lrs",
                params.len(),
                grads.len(),
                lrs.len()
            )));
        }
        for (i, g) in grads.iter().enumerate() {
            let Some(g) = g else { continue };
            if g.len() != params[i].len() || g.len() != self.m[i].len() {
                return Err(Error::Shape {
                    op: "adam",
                    lhs: params[i].shape().to_vec(),
                    rhs: vec![g.len()],
                });
            }
            if !(lrs[i] > 0.0) {
                return Err(Error::invalid(format!("adam: learning rate for {} must be > 0", self.names[i])));
            }
            if g.iter().any(|x| !x.is_finite()) {
                return Err(Error::NonFinite(format!("gradient of {}", self.names[i])));
            }
        }

        self.steps += 1;
        let AdamConfig {
            beta1,
            beta2,
            eps,
            weight_decay,
        } = self.config;
        let t = self.steps as i32;
        let bc1 = 1.0 - beta1.powi(t);
        let bc2 = 1.0 - beta2.powi(t);
        for (i, g) in grads.iter().enumerate() {
            let Some(g) = g else { continue };
            let lr = lrs[i];
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (((theta, gi), mi), vi) in params[i].data_mut().iter_mut().zip(g.iter()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mi = beta1 * *mi + (1.0 - beta1) * gi;
                *vi = beta2 * *vi + (1.0 - beta2) * gi * gi;
                let m_hat = *mi / bc1;
                let v_hat = *vi / bc2;
                *theta -= lr * m_hat / (v_hat.sqrt() + eps);
                *theta -= lr * weight_decay * *theta;
            }
        }
        Ok(())
    }
}
