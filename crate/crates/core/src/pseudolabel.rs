//! Pseudo-labels from an ensemble of two frozen predictors: per sample, the
//! argmax of whichever predictor is more confident wins.

use crate::error::{CondaError, Result};
use crate::numerics::{argmax, softmax_in_place, DenseMatrix};

#[derive(Debug, Clone, PartialEq)]
pub struct PredictorLogits {
    pub zero_shot: DenseMatrix,
    pub linear_probe: DenseMatrix,
}

impl PredictorLogits {
    pub fn new(zero_shot: DenseMatrix, linear_probe: DenseMatrix) -> Result<Self> {
        if zero_shot.shape() != linear_probe.shape() {
            return Err(CondaError::shape(
                "predictor_logits",
                format!(
                    "zero-shot {:?} vs linear-probe {:?}",
                    zero_shot.shape(),
                    linear_probe.shape()
                ),
            ));
        }
        if !zero_shot.is_finite() || !linear_probe.is_finite() {
            return Err(CondaError::InvalidInput(
                "predictor logits contain non-finite values".into(),
            ));
        }
        Ok(Self {
            zero_shot,
            linear_probe,
        })
    }

    pub fn len(&self) -> usize {
        self.zero_shot.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn class_count(&self) -> usize {
        self.zero_shot.cols()
    }

    pub fn select_rows(&self, idx: &[usize]) -> Self {
        Self {
            zero_shot: self.zero_shot.select_rows(idx),
            linear_probe: self.linear_probe.select_rows(idx),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Source {
    ZeroShot,
    LinearProbe,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PseudoLabels {
    pub labels: Vec<usize>,
    pub confidences: Vec<f64>,
    pub sources: Vec<Source>,
}

/// A batch of features with their pseudo-labels.
#[derive(Debug, Clone, PartialEq)]
pub struct PseudoLabeledBatch {
    pub features: DenseMatrix,
    pub labels: Vec<usize>,
    pub confidences: Vec<f64>,
}

impl PseudoLabeledBatch {
    pub fn new(features: DenseMatrix, labels: Vec<usize>, confidences: Vec<f64>) -> Result<Self> {
        if features.rows() != labels.len() || labels.len() != confidences.len() {
            return Err(CondaError::shape(
                "pseudo_labeled_batch",
                "features, labels and confidences differ in length",
            ));
        }
        Ok(Self {
            features,
            labels,
            confidences,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Softmax over each predictor (zero-shot logits divided by `zs_temperature`
/// first); the predictor with the strictly larger max-probability supplies
/// the label. Exact ties go to the linear probe.
pub fn ensemble_pseudolabel(logits: &PredictorLogits, zs_temperature: f64) -> Result<PseudoLabels> {
    if logits.is_empty() {
        return Err(CondaError::Empty("pseudo-label batch"));
    }
    if zs_temperature.is_nan() || zs_temperature <= 0.0 {
        return Err(CondaError::Config {
            key: "zs_temperature".into(),
            constraint: "must be > 0".into(),
        });
    }
    let n = logits.len();
    let mut out = PseudoLabels {
        labels: Vec::with_capacity(n),
        confidences: Vec::with_capacity(n),
        sources: Vec::with_capacity(n),
    };
    let mut zs = vec![0.0; logits.class_count()];
    let mut lp = vec![0.0; logits.class_count()];
    for i in 0..n {
        for (p, z) in zs.iter_mut().zip(logits.zero_shot.row(i)) {
            *p = z / zs_temperature;
        }
        lp.copy_from_slice(logits.linear_probe.row(i));
        softmax_in_place(&mut zs);
        softmax_in_place(&mut lp);
        let (zs_y, lp_y) = (argmax(&zs), argmax(&lp));
        let (zs_c, lp_c) = (zs[zs_y], lp[lp_y]);
        if zs_c > lp_c {
            out.labels.push(zs_y);
            out.confidences.push(zs_c);
            out.sources.push(Source::ZeroShot);
        } else {
            out.labels.push(lp_y);
            out.confidences.push(lp_c);
            out.sources.push(Source::LinearProbe);
        }
    }
    Ok(out)
}
