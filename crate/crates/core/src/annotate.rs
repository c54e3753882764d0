//! Captions for concept vectors from a precomputed image-text similarity
//! matrix: a concept takes the caption whose column best matches (by cosine)
//! its score vector over the same images.

use rayon::prelude::*;
use serde::Serialize;

use crate::error::{CondaError, Result};
use crate::numerics::{dot, norm};
use crate::DenseMatrix;

pub const DEFAULT_THRESHOLD: f64 = 0.8;

#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityMatrix {
    /// N images × S captions.
    values: DenseMatrix,
    captions: Vec<String>,
}

impl SimilarityMatrix {
    pub fn new(values: DenseMatrix, captions: Vec<String>) -> Result<Self> {
        if values.cols() != captions.len() {
            return Err(CondaError::shape(
                "similarity_matrix",
                format!("{} columns, {} captions", values.cols(), captions.len()),
            ));
        }
        if !values.is_finite() {
            return Err(CondaError::InvalidInput(
                "similarity matrix has non-finite entries".into(),
            ));
        }
        Ok(Self { values, captions })
    }

    pub fn values(&self) -> &DenseMatrix {
        &self.values
    }

    pub fn captions(&self) -> &[String] {
        &self.captions
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConceptAnnotation {
    /// Accepted caption index, `None` when no column clears the threshold.
    pub caption_index: Option<usize>,
    pub caption: Option<String>,
    /// Best cosine over all columns (0 for a degenerate score vector).
    pub score: f64,
    /// Set when the concept's scores have zero variance.
    pub degenerate: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AnnotationResult {
    pub threshold: f64,
    pub concepts: Vec<ConceptAnnotation>,
}

impl AnnotationResult {
    pub fn accepted(&self) -> usize {
        self.concepts.iter().filter(|c| c.caption_index.is_some()).count()
    }
}

fn zero_variance(v: &[f64]) -> bool {
    v.iter().all(|&x| x == v[0])
}

/// Annotates each row of `vectors`. A concept is captioned only when its best
/// cosine is strictly above `threshold`; ties go to the lowest caption index.
pub fn annotate_concepts(
    vectors: &DenseMatrix,
    features: &DenseMatrix,
    simmat: &SimilarityMatrix,
    threshold: f64,
) -> Result<AnnotationResult> {
    if !(-1.0..=1.0).contains(&threshold) {
        return Err(CondaError::Config {
            key: "threshold".into(),
            constraint: "must lie in [-1, 1]".into(),
        });
    }
    let n = features.rows();
    if simmat.values.rows() != n {
        return Err(CondaError::shape(
            "annotate_concepts",
            format!("{n} feature rows, similarity matrix has {}", simmat.values.rows()),
        ));
    }
    if n == 0 {
        return Err(CondaError::Empty("annotation images"));
    }
    // Column-major copy of P so each caption is a contiguous slice.
    let columns = simmat.values.transpose();
    let col_norms = columns.row_norms();
    let scores = features.matmul_transb(vectors)?.transpose();

    let concepts = (0..scores.rows())
        .into_par_iter()
        .map(|c| {
            let v = scores.row(c);
            if zero_variance(v) {
                return ConceptAnnotation {
                    caption_index: None,
                    caption: None,
                    score: 0.0,
                    degenerate: true,
                };
            }
            let vn = norm(v);
            let mut best: Option<(usize, f64)> = None;
            for (s, &cn) in col_norms.iter().enumerate() {
                if cn == 0.0 {
                    continue;
                }
                let cos = (dot(v, columns.row(s)) / (vn * cn)).clamp(-1.0, 1.0);
                if best.is_none_or(|(_, b)| cos > b) {
                    best = Some((s, cos));
                }
            }
            match best {
                Some((s, score)) if score > threshold || threshold == -1.0 => ConceptAnnotation {
                    caption_index: Some(s),
                    caption: Some(simmat.captions[s].clone()),
                    score,
                    degenerate: false,
                },
                Some((_, score)) => ConceptAnnotation {
                    caption_index: None,
                    caption: None,
                    score,
                    degenerate: false,
                },
                None => ConceptAnnotation {
                    caption_index: None,
                    caption: None,
                    score: 0.0,
                    degenerate: false,
                },
            }
        })
        .collect();
    Ok(AnnotationResult { threshold, concepts })
}
