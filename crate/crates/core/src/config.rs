use serde::{Deserialize, Serialize};

use crate::error::{CondaError, Result};
use crate::model::SourceFitConfig;
use crate::numerics::OptimizerKind;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum KCoh {
    /// `max(1, floor(batch_size / (2·L)))`
    Auto,
    Fixed(usize),
}

impl KCoh {
    pub fn resolve(self, batch_size: usize, classes: usize) -> usize {
        match self {
            KCoh::Auto => (batch_size / (2 * classes.max(1))).max(1),
            KCoh::Fixed(k) => k,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StageConfig {
    pub enabled: bool,
    pub optimizer: OptimizerKind,
    pub lr: f64,
}

impl Default for StageConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            optimizer: OptimizerKind::AdaptiveMoment,
            lr: 0.01,
        }
    }
}

/// Every knob of the three-stage adaptation. Defaults: batch 128, Adam at
/// 0.01 for all stages, 20 steps per stage, λ = (frob 0.1, sparse 1.0,
/// sim 0.1, coh 2.0), α = 0.99.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdaptConfig {
    pub lambda_frob: f64,
    pub lambda_sparse: f64,
    pub lambda_sim: f64,
    pub lambda_coh: f64,
    pub alpha: f64,
    pub n_grad: usize,
    pub batch_size: usize,
    pub residual_concepts: usize,
    pub k_coh: KCoh,
    pub csa: StageConfig,
    pub lpa: StageConfig,
    pub rcb: StageConfig,
    pub zs_temperature: f64,
    pub seed: u64,
    pub source_epochs: usize,
    /// `None` uses the default threshold derived from source class means.
    pub shift_threshold: Option<f64>,
}

impl Default for AdaptConfig {
    fn default() -> Self {
        Self {
            lambda_frob: 0.1,
            lambda_sparse: 1.0,
            lambda_sim: 0.1,
            lambda_coh: 2.0,
            alpha: 0.99,
            n_grad: 20,
            batch_size: 128,
            residual_concepts: 5,
            k_coh: KCoh::Auto,
            csa: StageConfig::default(),
            lpa: StageConfig::default(),
            rcb: StageConfig::default(),
            zs_temperature: 1.0,
            seed: 0,
            source_epochs: 500,
            shift_threshold: None,
        }
    }
}

fn bad(key: &str, constraint: &str) -> CondaError {
    CondaError::Config {
        key: key.to_string(),
        constraint: constraint.to_string(),
    }
}

impl AdaptConfig {
    pub fn validate(&self) -> Result<()> {
        for (key, v) in [
            ("lambda_frob", self.lambda_frob),
            ("lambda_sparse", self.lambda_sparse),
            ("lambda_sim", self.lambda_sim),
            ("lambda_coh", self.lambda_coh),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(bad(key, "must be a finite value >= 0"));
            }
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(bad("alpha", "must lie in [0, 1]"));
        }
        if self.batch_size == 0 {
            return Err(bad("batch_size", "must be >= 1"));
        }
        if let KCoh::Fixed(0) = self.k_coh {
            return Err(bad("k_coh", "must be >= 1 or auto"));
        }
        for (key, s) in [("csa.lr", &self.csa), ("lpa.lr", &self.lpa), ("rcb.lr", &self.rcb)] {
            if !(s.lr.is_finite() && s.lr >= 0.0) {
                return Err(bad(key, "must be a finite value >= 0"));
            }
        }
        if !(self.zs_temperature.is_finite() && self.zs_temperature > 0.0) {
            return Err(bad("zs_temperature", "must be a finite value > 0"));
        }
        if let Some(t) = self.shift_threshold {
            if t.is_nan() || t < 0.0 {
                return Err(bad("shift_threshold", "must be >= 0 or auto"));
            }
        }
        Ok(())
    }

    pub fn source_fit(&self) -> SourceFitConfig {
        SourceFitConfig {
            epochs: self.source_epochs,
            lambda_sparse: self.lambda_sparse,
            alpha: self.alpha,
        }
    }
}
