use serde::{Deserialize, Serialize};

use super::DenseMatrix;
use crate::error::{CondaError, Result};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum OptimizerKind {
    Sgd,
    /// Bias-corrected first/second moment method (Adam).
    AdaptiveMoment,
}

impl OptimizerKind {
    pub fn as_str(self) -> &'static str {
        match self {
            OptimizerKind::Sgd => "sgd",
            OptimizerKind::AdaptiveMoment => "adam",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s.to_ascii_lowercase().as_str() {
            "sgd" => Some(OptimizerKind::Sgd),
            "adam" | "adaptive_moment" => Some(OptimizerKind::AdaptiveMoment),
            _ => None,
        }
    }
}

/// Optimizer state for a single parameter tensor. Moment buffers are
/// allocated lazily on the first step and persist across calls.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    kind: OptimizerKind,
    learning_rate: f64,
    first: Vec<f64>,
    second: Vec<f64>,
    step: u64,
}

impl OptimizerState {
    pub fn new(kind: OptimizerKind, learning_rate: f64) -> Self {
        Self {
            kind,
            learning_rate,
            first: Vec::new(),
            second: Vec::new(),
            step: 0,
        }
    }

    pub fn kind(&self) -> OptimizerKind {
        self.kind
    }

    pub fn learning_rate(&self) -> f64 {
        self.learning_rate
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn step(&mut self, params: &mut DenseMatrix, grads: &DenseMatrix) -> Result<()> {
        if params.shape() != grads.shape() {
            return Err(CondaError::shape(
                "optimizer_step",
                format!("params {:?} vs grads {:?}", params.shape(), grads.shape()),
            ));
        }
        self.step_slice(params.as_mut_slice(), grads.as_slice())
    }

    pub fn step_slice(&mut self, params: &mut [f64], grads: &[f64]) -> Result<()> {
        if params.len() != grads.len() {
            return Err(CondaError::shape(
                "optimizer_step",
                format!("{} params vs {} grads", params.len(), grads.len()),
            ));
        }
        if self.kind == OptimizerKind::AdaptiveMoment && self.first.len() != params.len() {
            if self.step != 0 {
                return Err(CondaError::shape(
                    "optimizer_step",
                    format!("moment buffers sized {} but params {}", self.first.len(), params.len()),
                ));
            }
            self.first = vec![0.0; params.len()];
            self.second = vec![0.0; params.len()];
        }
        self.step += 1;
        let lr = self.learning_rate;
        match self.kind {
            OptimizerKind::Sgd => {
                for (p, g) in params.iter_mut().zip(grads) {
                    *p -= lr * g;
                }
            }
            OptimizerKind::AdaptiveMoment => {
                let t = self.step as i32;
                let bc1 = 1.0 - ADAM_BETA1.powi(t);
                let bc2 = 1.0 - ADAM_BETA2.powi(t);
                for (((p, &g), m), v) in params
                    .iter_mut()
                    .zip(grads)
                    .zip(self.first.iter_mut())
                    .zip(self.second.iter_mut())
                {
                    *m = ADAM_BETA1 * *m + (1.0 - ADAM_BETA1) * g;
                    *v = ADAM_BETA2 * *v + (1.0 - ADAM_BETA2) * g * g;
                    let m_hat = *m / bc1;
                    let v_hat = *v / bc2;
                    *p -= lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
                }
            }
        }
        Ok(())
    }
}
