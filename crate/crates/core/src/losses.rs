//! Adaptation objectives with hand-derived gradients.
//!
//! Conventions shared by every loss here:
//! - concept rows are normalized before scoring, and gradients are carried
//!   back through that normalization to the stored rows;
//! - cross-entropy terms are batch means;
//! - distances inside logarithms are floored at [`DISTANCE_FLOOR`], and a
//!   floored distance contributes no gradient.

use rayon::prelude::*;

use crate::error::{CondaError, Result};
use crate::model::{concept_scores, CbmModel, LinearHead};
use crate::numerics::{axpy, dot, norm, softmax_in_place, DenseMatrix};
use crate::pseudolabel::PseudoLabeledBatch;
use crate::stats::ClassStats;

pub const DISTANCE_FLOOR: f64 = 1e-12;

/// Carries a gradient with respect to row-normalized vectors back to the raw
/// rows: `∂/∂c = (g − (g·ĉ) ĉ) / ‖c‖`.
pub fn backprop_row_normalization(raw: &DenseMatrix, grad_normalized: &DenseMatrix) -> DenseMatrix {
    let mut out = grad_normalized.clone();
    for r in 0..raw.rows() {
        let c = raw.row(r);
        let n = norm(c);
        if n == 0.0 {
            out.row_mut(r).iter_mut().for_each(|v| *v = 0.0);
            continue;
        }
        let g = grad_normalized.row(r);
        let proj = dot(g, c) / (n * n);
        for ((o, &gi), &ci) in out.row_mut(r).iter_mut().zip(g).zip(c) {
            *o = (gi - proj * ci) / n;
        }
    }
    out
}

fn check_batch(op: &'static str, batch: &PseudoLabeledBatch, dim: usize, classes: usize) -> Result<()> {
    if batch.is_empty() {
        return Err(CondaError::Empty(op));
    }
    if batch.features.cols() != dim {
        return Err(CondaError::shape(
            op,
            format!("features are {}-d, model is {dim}-d", batch.features.cols()),
        ));
    }
    if let Some(&y) = batch.labels.iter().find(|&&y| y >= classes) {
        return Err(CondaError::ClassOutOfRange {
            class: y,
            count: classes,
        });
    }
    Ok(())
}

#[derive(Debug, Clone)]
pub struct CsaOutput {
    pub value: f64,
    pub grad: DenseMatrix,
    /// Number of distances that hit the floor.
    pub clamped: usize,
}

/// Mean log-ratio of intra- to inter-class Mahalanobis distance of the batch
/// scores (under the row-normalized `concepts`), plus
/// `lambda_frob·‖concepts − source‖²_F` on the raw rows.
pub fn csa_loss(
    concepts: &DenseMatrix,
    batch: &PseudoLabeledBatch,
    stats: &ClassStats,
    source: &DenseMatrix,
    lambda_frob: f64,
) -> Result<CsaOutput> {
    let (m, d) = concepts.shape();
    let l = stats.class_count();
    check_batch("csa_loss", batch, d, l)?;
    if stats.dim() != m {
        return Err(CondaError::shape(
            "csa_loss",
            format!("stats over {} concepts, bank has {m}", stats.dim()),
        ));
    }
    if source.shape() != concepts.shape() {
        return Err(CondaError::shape("csa_loss", "source bank shape differs"));
    }
    if l < 2 {
        return Err(CondaError::InvalidInput("csa_loss needs at least two classes".into()));
    }
    let n = batch.len();
    let inv_n = 1.0 / n as f64;
    let normalized = concepts.normalized_rows();
    let scores = batch.features.matmul_transb(&normalized)?;

    // Per-sample gradient with respect to the score vector.
    let mut grad_scores = DenseMatrix::zeros(n, m);
    let per_sample: Vec<(f64, usize)> = grad_scores
        .as_mut_slice()
        .par_chunks_mut(m)
        .enumerate()
        .map(|(i, g)| {
            let v = scores.row(i);
            let y = batch.labels[i];
            let mut diff = vec![0.0; m];
            let mut u = vec![0.0; m];
            let mut u_inter = vec![0.0; m];
            let mut u_intra = vec![0.0; m];
            let mut intra = 0.0;
            let mut inter = 0.0;
            for (c, class) in stats.classes().iter().enumerate() {
                for ((dd, a), b) in diff.iter_mut().zip(v).zip(&class.mean) {
                    *dd = a - b;
                }
                for (k, uk) in u.iter_mut().enumerate() {
                    *uk = dot(class.inv.row(k), &diff);
                }
                let dist = dot(&diff, &u).max(0.0);
                if c == y {
                    intra = dist;
                    u_intra.copy_from_slice(&u);
                } else {
                    inter += dist;
                    axpy(1.0, &u, &mut u_inter);
                }
            }
            inter /= (l - 1) as f64;
            let mut clamped = 0;
            let mut value = 0.0;
            if intra > DISTANCE_FLOOR {
                value += intra.ln();
                axpy(2.0 * inv_n / intra, &u_intra, g);
            } else {
                value += DISTANCE_FLOOR.ln();
                clamped += 1;
            }
            if inter > DISTANCE_FLOOR {
                value -= inter.ln();
                axpy(-2.0 * inv_n / ((l - 1) as f64 * inter), &u_inter, g);
            } else {
                value -= DISTANCE_FLOOR.ln();
                clamped += 1;
            }
            (value, clamped)
        })
        .collect();

    let mut value = per_sample.iter().map(|p| p.0).sum::<f64>() * inv_n;
    let clamped = per_sample.iter().map(|p| p.1).sum();

    let grad_normalized = grad_scores.matmul_transa(&batch.features)?;
    let mut grad = backprop_row_normalization(concepts, &grad_normalized);
    let delta = concepts.sub(source)?;
    value += lambda_frob * delta.frobenius_sq();
    grad.add_scaled(2.0 * lambda_frob, &delta)?;
    Ok(CsaOutput { value, grad, clamped })
}

/// Elastic-net penalty `(1/(mL)) Σ_ℓ (α‖w_ℓ‖₁ + (1−α)‖w_ℓ‖²)` and its
/// gradient; the ℓ1 subgradient at zero is zero.
pub fn sparse_penalty(weights: &DenseMatrix, alpha: f64) -> (f64, DenseMatrix) {
    let count = weights.rows() * weights.cols();
    let mut grad = DenseMatrix::zeros(weights.rows(), weights.cols());
    if count == 0 {
        return (0.0, grad);
    }
    let scale = 1.0 / count as f64;
    let mut l1 = 0.0;
    let mut l2 = 0.0;
    for (g, &w) in grad.as_mut_slice().iter_mut().zip(weights.as_slice()) {
        l1 += w.abs();
        l2 += w * w;
        let sign = if w > 0.0 {
            1.0
        } else if w < 0.0 {
            -1.0
        } else {
            0.0
        };
        *g = scale * (alpha * sign + 2.0 * (1.0 - alpha) * w);
    }
    (scale * (alpha * l1 + (1.0 - alpha) * l2), grad)
}

/// Mean cross-entropy of `logits` against `labels`, and `∂/∂logits`.
fn cross_entropy(logits: &DenseMatrix, labels: &[usize]) -> (f64, DenseMatrix) {
    let inv_n = 1.0 / labels.len() as f64;
    let mut dz = logits.clone();
    let mut value = 0.0;
    for (r, &y) in labels.iter().enumerate() {
        let row = dz.row_mut(r);
        value -= {
            let z = logits.row(r);
            z[y] - crate::numerics::log_sum_exp(z)
        };
        softmax_in_place(row);
        row[y] -= 1.0;
        row.iter_mut().for_each(|v| *v *= inv_n);
    }
    (value * inv_n, dz)
}

#[derive(Debug, Clone)]
pub struct LpaOutput {
    pub value: f64,
    pub grad_weights: DenseMatrix,
    pub grad_bias: Vec<f64>,
}

/// LPA objective from precomputed main-branch scores and residual logits;
/// both are constants for this stage.
pub fn lpa_loss_cached(
    head: &LinearHead,
    scores: &DenseMatrix,
    residual_logits: &DenseMatrix,
    labels: &[usize],
    lambda_sparse: f64,
    alpha: f64,
) -> Result<LpaOutput> {
    if labels.is_empty() {
        return Err(CondaError::Empty("lpa_loss"));
    }
    let logits = head.apply(scores)?.add(residual_logits)?;
    let (ce, dz) = cross_entropy(&logits, labels);
    let (pen, pen_grad) = sparse_penalty(&head.weights, alpha);
    let mut grad_weights = dz.matmul_transa(scores)?;
    grad_weights.add_scaled(lambda_sparse, &pen_grad)?;
    let mut grad_bias = vec![0.0; head.class_count()];
    for row in dz.row_iter() {
        axpy(1.0, row, &mut grad_bias);
    }
    Ok(LpaOutput {
        value: ce + lambda_sparse * pen,
        grad_weights,
        grad_bias,
    })
}

/// Pseudo-label cross-entropy of the full model plus the elastic-net penalty
/// on the main head; gradients for `(W, b)` only.
pub fn lpa_loss(model: &CbmModel, batch: &PseudoLabeledBatch, lambda_sparse: f64, alpha: f64) -> Result<LpaOutput> {
    check_batch("lpa_loss", batch, model.dim(), model.class_count())?;
    let scores = concept_scores(&model.bank.vectors, &batch.features)?;
    let residual = model.residual_logits(&batch.features)?;
    lpa_loss_cached(&model.head, &scores, &residual, &batch.labels, lambda_sparse, alpha)
}

/// Redundancy penalty on residual concepts: mean cosine to the bank plus mean
/// pairwise cosine among residual rows (zero when there is a single residual
/// row). Gradient with respect to `residual` only.
pub fn similarity_penalty(bank: &DenseMatrix, residual: &DenseMatrix) -> Result<(f64, DenseMatrix)> {
    let (m, r) = (bank.rows(), residual.rows());
    if r == 0 {
        return Err(CondaError::InvalidInput("similarity_penalty needs r >= 1".into()));
    }
    if bank.cols() != residual.cols() {
        return Err(CondaError::shape("similarity_penalty", "bank and residual dims differ"));
    }
    let res_norms = residual.row_norms();
    if let Some(j) = res_norms.iter().position(|&n| n == 0.0) {
        return Err(CondaError::InvalidInput(format!("residual concept {j} has zero norm")));
    }
    let bank_norms = bank.row_norms();
    let mut grad = DenseMatrix::zeros(r, residual.cols());
    let mut value = 0.0;

    // ∂cos(a, b)/∂b = a/(|a||b|) − cos·b/|b|²
    let accumulate = |grad_row: &mut [f64], a: &[f64], na: f64, b: &[f64], nb: f64, w: f64| -> f64 {
        let cos = dot(a, b) / (na * nb);
        axpy(w / (na * nb), a, grad_row);
        axpy(-w * cos / (nb * nb), b, grad_row);
        cos
    };

    if m > 0 {
        let w = 1.0 / (m * r) as f64;
        for j in 0..r {
            let b = residual.row(j);
            let mut sum = 0.0;
            for i in 0..m {
                if bank_norms[i] == 0.0 {
                    continue;
                }
                sum += accumulate(grad.row_mut(j), bank.row(i), bank_norms[i], b, res_norms[j], w);
            }
            value += w * sum;
        }
    }
    if r > 1 {
        let w = 2.0 / (r * (r - 1)) as f64;
        for i in 0..r {
            for j in (i + 1)..r {
                let (a, b) = (residual.row(i), residual.row(j));
                let cos = accumulate(grad.row_mut(j), a, res_norms[i], b, res_norms[j], w);
                accumulate(grad.row_mut(i), b, res_norms[j], a, res_norms[i], w);
                value += w * cos;
            }
        }
    }
    Ok((value, grad))
}

#[derive(Debug, Clone)]
pub struct CoherencyOutput {
    pub value: f64,
    pub grad: DenseMatrix,
    /// Selected sample indices per residual concept, best first.
    pub memberships: Vec<Vec<usize>>,
    pub k: usize,
    /// `true` when the requested k exceeded the batch and was clamped.
    pub k_clamped: bool,
}

/// Indices of the `k` largest entries, ties broken by lowest index.
fn top_k(scores: impl Iterator<Item = f64>, k: usize) -> Vec<usize> {
    let mut idx: Vec<(usize, f64)> = scores.enumerate().collect();
    idx.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    idx.truncate(k);
    idx.into_iter().map(|(i, _)| i).collect()
}

/// Coherency reward `(1/(rk)) Σ_i Σ_{n ∈ top-k(i)} ⟨c̃_i, φ_n⟩/‖c̃_i‖`.
///
/// Memberships are chosen from the current vectors unless `fixed` supplies
/// them; the gradient treats them as constants either way.
pub fn coherency(
    residual: &DenseMatrix,
    features: &DenseMatrix,
    k: usize,
    fixed: Option<&[Vec<usize>]>,
) -> Result<CoherencyOutput> {
    let (r, d) = residual.shape();
    let n = features.rows();
    if features.cols() != d {
        return Err(CondaError::shape("coherency", "feature and residual dims differ"));
    }
    if n == 0 {
        return Err(CondaError::Empty("coherency batch"));
    }
    if k == 0 {
        return Err(CondaError::InvalidInput("coherency needs k >= 1".into()));
    }
    let k_clamped = k > n;
    let k = k.min(n);
    let norms = residual.row_norms();
    if let Some(j) = norms.iter().position(|&v| v == 0.0) {
        return Err(CondaError::InvalidInput(format!("residual concept {j} has zero norm")));
    }
    let scores = concept_scores(residual, features)?;
    let memberships: Vec<Vec<usize>> = match fixed {
        Some(f) => {
            if f.len() != r || f.iter().any(|s| s.len() != k || s.iter().any(|&i| i >= n)) {
                return Err(CondaError::shape(
                    "coherency",
                    "fixed memberships do not match r, k or the batch",
                ));
            }
            f.to_vec()
        }
        None => (0..r).map(|i| top_k((0..n).map(|s| scores.get(s, i)), k)).collect(),
    };
    let w = 1.0 / (r * k) as f64;
    let mut value = 0.0;
    let mut grad_normalized = DenseMatrix::zeros(r, d);
    for (i, members) in memberships.iter().enumerate() {
        for &s in members {
            value += w * scores.get(s, i);
            axpy(w, features.row(s), grad_normalized.row_mut(i));
        }
    }
    let grad = backprop_row_normalization(residual, &grad_normalized);
    Ok(CoherencyOutput {
        value,
        grad,
        memberships,
        k,
        k_clamped,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RcbWeights {
    pub lambda_sim: f64,
    pub lambda_coh: f64,
    pub k: usize,
}

#[derive(Debug, Clone)]
pub struct RcbOutput {
    pub value: f64,
    pub grad_vectors: DenseMatrix,
    pub grad_weights: DenseMatrix,
    pub grad_bias: Vec<f64>,
    pub memberships: Vec<Vec<usize>>,
    pub k_clamped: bool,
}

/// RCB objective with the main-branch logits supplied as a constant.
pub fn rcb_loss_cached(
    model: &CbmModel,
    main_logits: &DenseMatrix,
    batch: &PseudoLabeledBatch,
    weights: RcbWeights,
    fixed_members: Option<&[Vec<usize>]>,
) -> Result<RcbOutput> {
    let res = &model.residual;
    if res.size() == 0 {
        return Err(CondaError::InvalidInput(
            "rcb_loss: residual branch is disabled (r = 0)".into(),
        ));
    }
    if batch.is_empty() {
        return Err(CondaError::Empty("rcb_loss"));
    }
    let scores = concept_scores(&res.vectors, &batch.features)?;
    let head = LinearHead {
        weights: res.weights.clone(),
        bias: res.bias.clone(),
    };
    let logits = head.apply(&scores)?.add(main_logits)?;
    let (ce, dz) = cross_entropy(&logits, &batch.labels);
    let grad_weights = dz.matmul_transa(&scores)?;
    let mut grad_bias = vec![0.0; model.class_count()];
    for row in dz.row_iter() {
        axpy(1.0, row, &mut grad_bias);
    }
    let grad_scores = dz.matmul(&res.weights)?;
    let grad_normalized = grad_scores.matmul_transa(&batch.features)?;
    let mut grad_vectors = backprop_row_normalization(&res.vectors, &grad_normalized);

    let (sim, sim_grad) = similarity_penalty(&model.bank.vectors, &res.vectors)?;
    let coh = coherency(&res.vectors, &batch.features, weights.k, fixed_members)?;
    grad_vectors.add_scaled(weights.lambda_sim, &sim_grad)?;
    grad_vectors.add_scaled(-weights.lambda_coh, &coh.grad)?;
    Ok(RcbOutput {
        value: ce + weights.lambda_sim * sim - weights.lambda_coh * coh.value,
        grad_vectors,
        grad_weights,
        grad_bias,
        memberships: coh.memberships,
        k_clamped: coh.k_clamped,
    })
}

/// Pseudo-label cross-entropy plus `λ_sim·L_sim − λ_coh·L_coh`; gradients
/// for the residual branch `(C̃, W̃, b̃)` only.
pub fn rcb_loss(
    model: &CbmModel,
    batch: &PseudoLabeledBatch,
    weights: RcbWeights,
    fixed_members: Option<&[Vec<usize>]>,
) -> Result<RcbOutput> {
    check_batch("rcb_loss", batch, model.dim(), model.class_count())?;
    if model.residual.size() == 0 {
        return Err(CondaError::InvalidInput(
            "rcb_loss: residual branch is disabled (r = 0)".into(),
        ));
    }
    let main = model.main_logits(&batch.features)?;
    rcb_loss_cached(model, &main, batch, weights, fixed_members)
}
