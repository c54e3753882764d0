//! Concept bottleneck model: a concept bank projecting frozen features onto
//! concept scores, a linear head on those scores, and an optional residual
//! branch with its own concept vectors and head whose logits are added to the
//! main branch.
//!
//! Concept rows are normalized when scores are computed, never in storage.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{CondaError, Result};
use crate::losses::sparse_penalty;
use crate::numerics::{argmax, norm, softmax_in_place, DenseMatrix};

#[derive(Debug, Clone, PartialEq)]
pub struct ConceptBank {
    pub vectors: DenseMatrix,
    pub captions: Option<Vec<String>>,
    source_snapshot: DenseMatrix,
}

impl ConceptBank {
    /// Builds a bank whose source snapshot is a frozen copy of `vectors`.
    pub fn new(vectors: DenseMatrix, captions: Option<Vec<String>>) -> Result<Self> {
        if let Some(c) = &captions {
            if c.len() != vectors.rows() {
                return Err(CondaError::shape(
                    "concept_bank",
                    format!("{} captions for {} concepts", c.len(), vectors.rows()),
                ));
            }
        }
        for (i, row) in vectors.row_iter().enumerate() {
            if norm(row) == 0.0 {
                return Err(CondaError::InvalidInput(format!("concept {i} has zero norm")));
            }
        }
        Ok(Self {
            source_snapshot: vectors.clone(),
            vectors,
            captions,
        })
    }

    /// Restores a bank with an explicit snapshot (deserialization path).
    pub fn with_snapshot(
        vectors: DenseMatrix,
        source_snapshot: DenseMatrix,
        captions: Option<Vec<String>>,
    ) -> Result<Self> {
        if vectors.shape() != source_snapshot.shape() {
            return Err(CondaError::shape(
                "concept_bank",
                format!("bank {:?} vs snapshot {:?}", vectors.shape(), source_snapshot.shape()),
            ));
        }
        let mut bank = Self::new(vectors, captions)?;
        bank.source_snapshot = source_snapshot;
        Ok(bank)
    }

    pub fn source_snapshot(&self) -> &DenseMatrix {
        &self.source_snapshot
    }

    pub fn concept_count(&self) -> usize {
        self.vectors.rows()
    }

    pub fn dim(&self) -> usize {
        self.vectors.cols()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LinearHead {
    /// L×m
    pub weights: DenseMatrix,
    pub bias: Vec<f64>,
}

impl LinearHead {
    pub fn zeros(classes: usize, inputs: usize) -> Self {
        Self {
            weights: DenseMatrix::zeros(classes, inputs),
            bias: vec![0.0; classes],
        }
    }

    pub fn class_count(&self) -> usize {
        self.weights.rows()
    }

    /// `scores · Wᵀ + b`, N×L.
    pub fn apply(&self, scores: &DenseMatrix) -> Result<DenseMatrix> {
        let mut out = scores.matmul_transb(&self.weights)?;
        for r in 0..out.rows() {
            for (z, b) in out.row_mut(r).iter_mut().zip(&self.bias) {
                *z += b;
            }
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ResidualBranch {
    /// r×d, unnormalized storage.
    pub vectors: DenseMatrix,
    /// L×r
    pub weights: DenseMatrix,
    pub bias: Vec<f64>,
}

impl ResidualBranch {
    pub fn disabled(classes: usize, dim: usize) -> Self {
        Self {
            vectors: DenseMatrix::zeros(0, dim),
            weights: DenseMatrix::zeros(classes, 0),
            bias: vec![0.0; classes],
        }
    }

    /// Concept rows i.i.d. standard normal then normalized; head and bias zero,
    /// so the branch contributes nothing until it is adapted.
    pub fn init<R: Rng + ?Sized>(r: usize, classes: usize, dim: usize, rng: &mut R) -> Self {
        let mut vectors = DenseMatrix::zeros(r, dim);
        for v in vectors.as_mut_slice() {
            *v = rng.sample(StandardNormal);
        }
        Self {
            vectors: vectors.normalized_rows(),
            weights: DenseMatrix::zeros(classes, r),
            bias: vec![0.0; classes],
        }
    }

    pub fn size(&self) -> usize {
        self.vectors.rows()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CbmModel {
    pub bank: ConceptBank,
    pub head: LinearHead,
    pub residual: ResidualBranch,
    class_count: usize,
}

impl CbmModel {
    pub fn new(bank: ConceptBank, head: LinearHead, residual: ResidualBranch) -> Result<Self> {
        let l = head.weights.rows();
        if head.weights.cols() != bank.concept_count() {
            return Err(CondaError::shape(
                "cbm_model",
                format!(
                    "head has {} inputs, bank has {} concepts",
                    head.weights.cols(),
                    bank.concept_count()
                ),
            ));
        }
        if head.bias.len() != l || residual.bias.len() != l || residual.weights.rows() != l {
            return Err(CondaError::shape(
                "cbm_model",
                "class count disagrees between head, bias and residual",
            ));
        }
        if residual.weights.cols() != residual.vectors.rows() {
            return Err(CondaError::shape(
                "cbm_model",
                format!(
                    "residual head has {} inputs, {} residual concepts",
                    residual.weights.cols(),
                    residual.vectors.rows()
                ),
            ));
        }
        if residual.size() > 0 && residual.vectors.cols() != bank.dim() {
            return Err(CondaError::shape(
                "cbm_model",
                "residual concept dimension differs from bank",
            ));
        }
        if l == 0 {
            return Err(CondaError::InvalidInput("model needs at least one class".into()));
        }
        Ok(Self {
            bank,
            head,
            residual,
            class_count: l,
        })
    }

    pub fn class_count(&self) -> usize {
        self.class_count
    }

    pub fn dim(&self) -> usize {
        self.bank.dim()
    }

    /// Main-branch logits only (no residual).
    pub fn main_logits(&self, features: &DenseMatrix) -> Result<DenseMatrix> {
        let scores = concept_scores(&self.bank.vectors, features)?;
        self.head.apply(&scores)
    }

    /// Residual-branch logits `W̃ Ĉ̃ φ + b̃`; all-bias when the branch is empty.
    pub fn residual_logits(&self, features: &DenseMatrix) -> Result<DenseMatrix> {
        if self.residual.size() == 0 {
            check_dim(features, self.dim())?;
            let mut out = DenseMatrix::zeros(features.rows(), self.class_count);
            for r in 0..out.rows() {
                out.row_mut(r).copy_from_slice(&self.residual.bias);
            }
            return Ok(out);
        }
        let scores = concept_scores(&self.residual.vectors, features)?;
        let head = LinearHead {
            weights: self.residual.weights.clone(),
            bias: self.residual.bias.clone(),
        };
        head.apply(&scores)
    }

    /// Target-domain logits: main branch plus residual branch.
    pub fn forward(&self, features: &DenseMatrix) -> Result<DenseMatrix> {
        self.main_logits(features)?.add(&self.residual_logits(features)?)
    }

    pub fn predict(&self, features: &DenseMatrix) -> Result<Vec<usize>> {
        Ok(self.forward(features)?.row_iter().map(argmax).collect())
    }

    /// `([W W̃], [C; C̃], b + b̃)` with concept rows as stored.
    pub fn combined_params(&self) -> (DenseMatrix, DenseMatrix, Vec<f64>) {
        if self.residual.size() == 0 {
            let bias = self
                .head
                .bias
                .iter()
                .zip(&self.residual.bias)
                .map(|(a, b)| a + b)
                .collect();
            return (self.head.weights.clone(), self.bank.vectors.clone(), bias);
        }
        let w = self
            .head
            .weights
            .hstack(&self.residual.weights)
            .expect("row counts checked at construction");
        let c = self
            .bank
            .vectors
            .vstack(&self.residual.vectors)
            .expect("dims checked at construction");
        let b = self
            .head
            .bias
            .iter()
            .zip(&self.residual.bias)
            .map(|(a, b)| a + b)
            .collect();
        (w, c, b)
    }
}

fn check_dim(features: &DenseMatrix, dim: usize) -> Result<()> {
    if features.cols() != dim {
        return Err(CondaError::shape(
            "features",
            format!("feature dim {} vs model dim {dim}", features.cols()),
        ));
    }
    Ok(())
}

/// N×k concept scores `φ · Ĉᵀ` with rows of `concepts` normalized first.
pub fn concept_scores(concepts: &DenseMatrix, features: &DenseMatrix) -> Result<DenseMatrix> {
    if concepts.cols() != features.cols() {
        return Err(CondaError::shape(
            "concept_scores",
            format!("features are {}-d, concepts are {}-d", features.cols(), concepts.cols()),
        ));
    }
    features.matmul_transb(&concepts.normalized_rows())
}

/// Logits from combined parameters, normalizing the stacked concept rows.
pub fn forward_combined(
    weights: &DenseMatrix,
    concepts: &DenseMatrix,
    bias: &[f64],
    features: &DenseMatrix,
) -> Result<DenseMatrix> {
    let head = LinearHead {
        weights: weights.clone(),
        bias: bias.to_vec(),
    };
    head.apply(&concept_scores(concepts, features)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SourceFitConfig {
    pub epochs: usize,
    pub lambda_sparse: f64,
    pub alpha: f64,
}

impl Default for SourceFitConfig {
    fn default() -> Self {
        Self {
            epochs: 500,
            lambda_sparse: 1.0,
            alpha: 0.99,
        }
    }
}

/// Fits `(W, b)` on labeled scores by minimizing mean cross-entropy plus
/// `lambda_sparse · L_sparse(W)`.
///
/// Full-batch accelerated proximal gradient: the cross-entropy and ℓ2 parts
/// take a gradient step of size `1/Lip`, the ℓ1 part is soft-thresholded.
/// `Lip` bounds the Hessian of the smooth part, so the method is monotone
/// up to momentum restarts and fully deterministic.
pub fn fit_source_head(
    scores: &DenseMatrix,
    labels: &[usize],
    classes: usize,
    config: &SourceFitConfig,
) -> Result<LinearHead> {
    let (n, m) = scores.shape();
    if labels.len() != n {
        return Err(CondaError::shape(
            "fit_source_head",
            format!("{n} rows vs {} labels", labels.len()),
        ));
    }
    if n == 0 {
        return Err(CondaError::Empty("source scores"));
    }
    let mut present = vec![false; classes];
    for &y in labels {
        if y >= classes {
            return Err(CondaError::ClassOutOfRange {
                class: y,
                count: classes,
            });
        }
        present[y] = true;
    }
    let absent: Vec<usize> = (0..classes).filter(|&c| !present[c]).collect();
    if !absent.is_empty() {
        return Err(CondaError::MissingClasses(absent));
    }

    let mean_sq: f64 = scores
        .row_iter()
        .map(|r| r.iter().map(|v| v * v).sum::<f64>() + 1.0)
        .sum::<f64>()
        / n as f64;
    let scale = 1.0 / (m * classes) as f64;
    let l2 = 2.0 * config.lambda_sparse * (1.0 - config.alpha) * scale;
    let lip = 0.5 * mean_sq + l2;
    let step = 1.0 / lip;
    let thresh = step * config.lambda_sparse * config.alpha * scale;

    let objective = |head: &LinearHead| -> Result<f64> {
        let logits = head.apply(scores)?;
        let ce: f64 = logits
            .row_iter()
            .zip(labels)
            .map(|(z, &y)| crate::numerics::log_sum_exp(z) - z[y])
            .sum::<f64>()
            / n as f64;
        Ok(ce + config.lambda_sparse * sparse_penalty(&head.weights, config.alpha).0)
    };

    let mut head = LinearHead::zeros(classes, m);
    let mut prev = head.clone();
    let mut look = head.clone();
    let mut t = 1.0f64;
    let mut prev_obj = objective(&head)?;
    for _ in 0..config.epochs {
        let (gw, gb) = ce_grads(&look, scores, labels)?;
        let mut next = look.clone();
        for ((w, g), wl) in next
            .weights
            .as_mut_slice()
            .iter_mut()
            .zip(gw.as_slice())
            .zip(look.weights.as_slice())
        {
            let z = *w - step * (g + l2 * wl);
            *w = soft_threshold(z, thresh);
        }
        for (b, g) in next.bias.iter_mut().zip(&gb) {
            *b -= step * g;
        }
        let obj = objective(&next)?;
        let t_next = if obj > prev_obj {
            // Momentum restart.
            1.0
        } else {
            0.5 * (1.0 + (1.0 + 4.0 * t * t).sqrt())
        };
        let beta = if obj > prev_obj { 0.0 } else { (t - 1.0) / t_next };
        look = next.clone();
        for ((lw, w), pw) in look
            .weights
            .as_mut_slice()
            .iter_mut()
            .zip(next.weights.as_slice())
            .zip(prev.weights.as_slice())
        {
            *lw = w + beta * (w - pw);
        }
        for ((lb, b), pb) in look.bias.iter_mut().zip(&next.bias).zip(&prev.bias) {
            *lb = b + beta * (b - pb);
        }
        prev = next;
        head = prev.clone();
        prev_obj = obj;
        t = t_next;
    }
    Ok(head)
}

fn soft_threshold(z: f64, t: f64) -> f64 {
    if z > t {
        z - t
    } else if z < -t {
        z + t
    } else {
        0.0
    }
}

/// Mean softmax cross-entropy gradients with respect to `(W, b)`.
pub(crate) fn ce_grads(head: &LinearHead, scores: &DenseMatrix, labels: &[usize]) -> Result<(DenseMatrix, Vec<f64>)> {
    let n = scores.rows() as f64;
    let mut dz = head.apply(scores)?;
    for (r, &y) in labels.iter().enumerate() {
        let row = dz.row_mut(r);
        softmax_in_place(row);
        row[y] -= 1.0;
        row.iter_mut().for_each(|v| *v /= n);
    }
    let gw = dz.matmul_transa(scores)?;
    let mut gb = vec![0.0; head.class_count()];
    for row in dz.row_iter() {
        for (g, v) in gb.iter_mut().zip(row) {
            *g += v;
        }
    }
    Ok((gw, gb))
}
