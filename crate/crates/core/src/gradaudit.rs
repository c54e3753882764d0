//! Finite-difference audit of every analytic gradient on small random
//! problems. Used by the `gradcheck` command and the test suites.

use rand::Rng;
use serde::Serialize;

use crate::error::Result;
use crate::losses::{coherency, csa_loss, lpa_loss, rcb_loss, similarity_penalty, sparse_penalty, RcbWeights};
use crate::model::{CbmModel, ConceptBank, LinearHead, ResidualBranch};
use crate::numerics::{finite_diff_check, GradCheckReport, DEFAULT_FD_STEP};
use crate::pseudolabel::PseudoLabeledBatch;
use crate::rng;
use crate::stats::fit_class_stats;
use crate::DenseMatrix;

pub const GRADCHECK_TOLERANCE: f64 = 1e-4;

pub const AUDITED_LOSSES: [&str; 6] = [
    "csa_loss",
    "lpa_loss",
    "rcb_loss",
    "sparse_penalty",
    "similarity_penalty",
    "coherency",
];

#[derive(Debug, Clone, Serialize)]
pub struct GradAudit {
    pub loss: &'static str,
    pub parameter: &'static str,
    pub seed: u64,
    pub report: GradCheckReport,
}

impl GradAudit {
    pub fn passed(&self) -> bool {
        self.report.max_rel_error < GRADCHECK_TOLERANCE
    }
}

const M: usize = 4;
const D: usize = 6;
const L: usize = 3;
const N: usize = 12;
const R: usize = 2;

fn uniform(rows: usize, cols: usize, rng: &mut impl Rng) -> DenseMatrix {
    let data = (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect();
    DenseMatrix::from_vec(rows, cols, data).expect("length matches")
}

fn batch(rng: &mut impl Rng) -> PseudoLabeledBatch {
    let labels = (0..N).map(|_| rng.random_range(0..L)).collect();
    PseudoLabeledBatch::new(uniform(N, D, rng), labels, vec![1.0; N]).expect("consistent batch")
}

fn model(rng: &mut impl Rng) -> CbmModel {
    let bank = ConceptBank::new(uniform(M, D, rng), None).expect("nonzero rows");
    let head = LinearHead {
        weights: uniform(L, M, rng),
        bias: (0..L).map(|_| rng.random_range(-1.0..1.0)).collect(),
    };
    let residual = ResidualBranch {
        vectors: uniform(R, D, rng),
        weights: uniform(L, R, rng),
        bias: (0..L).map(|_| rng.random_range(-1.0..1.0)).collect(),
    };
    CbmModel::new(bank, head, residual).expect("consistent shapes")
}

fn audit(
    loss: &'static str,
    parameter: &'static str,
    seed: u64,
    f: impl FnMut(&[f64]) -> f64,
    at: &[f64],
    grad: &[f64],
) -> GradAudit {
    GradAudit {
        loss,
        parameter,
        seed,
        report: finite_diff_check(f, at, grad, DEFAULT_FD_STEP),
    }
}

fn reshape(like: &DenseMatrix, p: &[f64]) -> DenseMatrix {
    DenseMatrix::from_vec(like.rows(), like.cols(), p.to_vec()).expect("same length")
}

/// Checks one loss on the problem drawn from `seed`; returns one entry per
/// parameter block.
pub fn audit_loss(loss: &str, seed: u64) -> Result<Vec<GradAudit>> {
    let mut rng = rng::stream(seed, loss);
    let mut out = Vec::new();
    match loss {
        "csa_loss" => {
            let scores = uniform(60, M, &mut rng);
            let labels: Vec<usize> = (0..60).map(|i| i % L).collect();
            let stats = fit_class_stats(&scores, &labels, L)?;
            let source = uniform(M, D, &mut rng);
            let concepts = uniform(M, D, &mut rng);
            let b = batch(&mut rng);
            let lambda = 0.3;
            let g = csa_loss(&concepts, &b, &stats, &source, lambda)?;
            out.push(audit(
                "csa_loss",
                "concepts",
                seed,
                |p| csa_loss(&reshape(&concepts, p), &b, &stats, &source, lambda).map_or(f64::NAN, |o| o.value),
                concepts.as_slice(),
                g.grad.as_slice(),
            ));
        }
        "lpa_loss" => {
            let m = model(&mut rng);
            let b = batch(&mut rng);
            let (lambda, alpha) = (0.7, 0.6);
            let g = lpa_loss(&m, &b, lambda, alpha)?;
            let eval = |m: &CbmModel| lpa_loss(m, &b, lambda, alpha).map_or(f64::NAN, |o| o.value);
            out.push(audit(
                "lpa_loss",
                "head_weights",
                seed,
                |p| {
                    let mut t = m.clone();
                    t.head.weights = reshape(&m.head.weights, p);
                    eval(&t)
                },
                m.head.weights.as_slice(),
                g.grad_weights.as_slice(),
            ));
            out.push(audit(
                "lpa_loss",
                "head_bias",
                seed,
                |p| {
                    let mut t = m.clone();
                    t.head.bias = p.to_vec();
                    eval(&t)
                },
                &m.head.bias,
                &g.grad_bias,
            ));
        }
        "rcb_loss" => {
            let m = model(&mut rng);
            let b = batch(&mut rng);
            let w = RcbWeights {
                lambda_sim: 0.4,
                lambda_coh: 0.8,
                k: 4,
            };
            let g = rcb_loss(&m, &b, w, None)?;
            let members = g.memberships.clone();
            let eval = |m: &CbmModel| rcb_loss(m, &b, w, Some(&members)).map_or(f64::NAN, |o| o.value);
            out.push(audit(
                "rcb_loss",
                "residual_vectors",
                seed,
                |p| {
                    let mut t = m.clone();
                    t.residual.vectors = reshape(&m.residual.vectors, p);
                    eval(&t)
                },
                m.residual.vectors.as_slice(),
                g.grad_vectors.as_slice(),
            ));
            out.push(audit(
                "rcb_loss",
                "residual_weights",
                seed,
                |p| {
                    let mut t = m.clone();
                    t.residual.weights = reshape(&m.residual.weights, p);
                    eval(&t)
                },
                m.residual.weights.as_slice(),
                g.grad_weights.as_slice(),
            ));
            out.push(audit(
                "rcb_loss",
                "residual_bias",
                seed,
                |p| {
                    let mut t = m.clone();
                    t.residual.bias = p.to_vec();
                    eval(&t)
                },
                &m.residual.bias,
                &g.grad_bias,
            ));
        }
        "sparse_penalty" => {
            let w = uniform(L, M, &mut rng);
            let alpha = 0.9;
            let (_, g) = sparse_penalty(&w, alpha);
            out.push(audit(
                "sparse_penalty",
                "weights",
                seed,
                |p| sparse_penalty(&reshape(&w, p), alpha).0,
                w.as_slice(),
                g.as_slice(),
            ));
        }
        "similarity_penalty" => {
            let bank = uniform(M, D, &mut rng);
            let res = uniform(R + 1, D, &mut rng);
            let (_, g) = similarity_penalty(&bank, &res)?;
            out.push(audit(
                "similarity_penalty",
                "residual_vectors",
                seed,
                |p| similarity_penalty(&bank, &reshape(&res, p)).map_or(f64::NAN, |o| o.0),
                res.as_slice(),
                g.as_slice(),
            ));
        }
        "coherency" => {
            let res = uniform(R, D, &mut rng);
            let feats = uniform(N, D, &mut rng);
            let g = coherency(&res, &feats, 5, None)?;
            let members = g.memberships.clone();
            out.push(audit(
                "coherency",
                "residual_vectors",
                seed,
                |p| coherency(&reshape(&res, p), &feats, 5, Some(&members)).map_or(f64::NAN, |o| o.value),
                res.as_slice(),
                g.grad.as_slice(),
            ));
        }
        other => return Err(crate::CondaError::UnknownKey(other.to_string())),
    }
    Ok(out)
}

/// Audits every loss on seeds `first..first + count`.
pub fn audit_all(first: u64, count: u64) -> Result<Vec<GradAudit>> {
    let mut out = Vec::new();
    for loss in AUDITED_LOSSES {
        for seed in first..first + count {
            out.extend(audit_loss(loss, seed)?);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_loss_passes_on_a_few_seeds() {
        for a in audit_all(0, 3).unwrap() {
            assert!(a.passed(), "{a:?}");
        }
    }

    #[test]
    fn unknown_loss_is_rejected() {
        assert!(audit_loss("hinge", 0).is_err());
    }
}
