//! Class-conditional Gaussian statistics of source concept scores, the
//! Mahalanobis distances built on them, and a batch-level shift diagnostic.

use serde::Serialize;

use crate::error::{CondaError, Result};
use crate::numerics::{cholesky_inverse, dot, DenseMatrix};

pub const SHRINKAGE_EPS: f64 = 1e-5;
pub const SHRINKAGE_ATTEMPTS: usize = 5;

#[derive(Debug, Clone, PartialEq)]
pub struct ClassGaussian {
    pub mean: Vec<f64>,
    /// Shrunk covariance.
    pub cov: DenseMatrix,
    pub inv: DenseMatrix,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassStats {
    classes: Vec<ClassGaussian>,
}

impl ClassStats {
    pub fn from_parts(classes: Vec<ClassGaussian>) -> Result<Self> {
        let m = classes
            .first()
            .map(|c| c.mean.len())
            .ok_or(CondaError::Empty("class stats"))?;
        for (y, c) in classes.iter().enumerate() {
            if c.mean.len() != m || c.cov.shape() != (m, m) || c.inv.shape() != (m, m) {
                return Err(CondaError::shape(
                    "class_stats",
                    format!("class {y} has inconsistent dims"),
                ));
            }
        }
        Ok(Self { classes })
    }

    pub fn class_count(&self) -> usize {
        self.classes.len()
    }

    pub fn dim(&self) -> usize {
        self.classes[0].mean.len()
    }

    pub fn class(&self, y: usize) -> Result<&ClassGaussian> {
        self.classes.get(y).ok_or(CondaError::ClassOutOfRange {
            class: y,
            count: self.classes.len(),
        })
    }

    pub fn classes(&self) -> &[ClassGaussian] {
        &self.classes
    }
}

/// Per-class mean and biased covariance, with trace-scaled ridge shrinkage
/// `Σ + ε·(tr Σ / m)·I`. ε starts at 1e-5 and grows ×10 until the Cholesky
/// factorization succeeds (at most five attempts). A zero-trace covariance
/// uses unit scale so the ridge is still positive.
pub fn fit_class_stats(scores: &DenseMatrix, labels: &[usize], classes: usize) -> Result<ClassStats> {
    let (n, m) = scores.shape();
    if labels.len() != n {
        return Err(CondaError::shape(
            "fit_class_stats",
            format!("{n} rows vs {} labels", labels.len()),
        ));
    }
    let mut members: Vec<Vec<usize>> = vec![Vec::new(); classes];
    for (i, &y) in labels.iter().enumerate() {
        if y >= classes {
            return Err(CondaError::ClassOutOfRange {
                class: y,
                count: classes,
            });
        }
        members[y].push(i);
    }
    let absent: Vec<usize> = (0..classes).filter(|&c| members[c].is_empty()).collect();
    if !absent.is_empty() {
        return Err(CondaError::MissingClasses(absent));
    }
    let mut out = Vec::with_capacity(classes);
    for idx in &members {
        let (mean, cov) = mean_cov(scores, idx, m);
        let (cov, inv) = shrink_and_invert(cov)?;
        out.push(ClassGaussian {
            mean,
            cov,
            inv,
            count: idx.len(),
        });
    }
    Ok(ClassStats { classes: out })
}

fn mean_cov(scores: &DenseMatrix, idx: &[usize], m: usize) -> (Vec<f64>, DenseMatrix) {
    let k = idx.len() as f64;
    let mut mean = vec![0.0; m];
    for &i in idx {
        for (mu, v) in mean.iter_mut().zip(scores.row(i)) {
            *mu += v;
        }
    }
    mean.iter_mut().for_each(|v| *v /= k);
    let mut cov = DenseMatrix::zeros(m, m);
    let mut centered = vec![0.0; m];
    for &i in idx {
        for ((c, v), mu) in centered.iter_mut().zip(scores.row(i)).zip(&mean) {
            *c = v - mu;
        }
        for a in 0..m {
            let ca = centered[a];
            let row = cov.row_mut(a);
            for b in a..m {
                row[b] += ca * centered[b];
            }
        }
    }
    for a in 0..m {
        for b in a..m {
            let v = cov.get(a, b) / k;
            cov.set(a, b, v);
            cov.set(b, a, v);
        }
    }
    (mean, cov)
}

fn shrink_and_invert(cov: DenseMatrix) -> Result<(DenseMatrix, DenseMatrix)> {
    let m = cov.rows();
    let tr = cov.trace() / m as f64;
    let scale = if tr > 0.0 { tr } else { 1.0 };
    let mut eps = SHRINKAGE_EPS;
    let mut last_err = None;
    for _ in 0..SHRINKAGE_ATTEMPTS {
        let mut shrunk = cov.clone();
        for i in 0..m {
            let v = shrunk.get(i, i) + eps * scale;
            shrunk.set(i, i, v);
        }
        match cholesky_inverse(&shrunk) {
            Ok(inv) => return Ok((shrunk, inv)),
            Err(e @ CondaError::NotPositiveDefinite { .. }) => last_err = Some(e),
            Err(e) => return Err(e),
        }
        eps *= 10.0;
    }
    Err(last_err.expect("at least one attempt"))
}

/// Squared Mahalanobis distance `(v − μ)ᵀ Σ⁻¹ (v − μ)` using a caller-provided
/// scratch buffer of length m.
pub(crate) fn mahalanobis_with(v: &[f64], g: &ClassGaussian, diff: &mut [f64]) -> f64 {
    for ((d, a), b) in diff.iter_mut().zip(v).zip(&g.mean) {
        *d = a - b;
    }
    let mut total = 0.0;
    for (i, &di) in diff.iter().enumerate() {
        total += di * dot(g.inv.row(i), diff);
    }
    total.max(0.0)
}

pub fn mahalanobis(v: &[f64], y: usize, stats: &ClassStats) -> Result<f64> {
    let g = stats.class(y)?;
    if v.len() != g.mean.len() {
        return Err(CondaError::shape(
            "mahalanobis",
            format!("{} vs {}", v.len(), g.mean.len()),
        ));
    }
    let mut diff = vec![0.0; v.len()];
    Ok(mahalanobis_with(v, g, &mut diff))
}

/// `(D_intra, D_inter)`: distance to the pseudo-class Gaussian and the mean
/// distance to every other class Gaussian.
pub fn intra_inter(v: &[f64], y_hat: usize, stats: &ClassStats) -> Result<(f64, f64)> {
    let l = stats.class_count();
    if l < 2 {
        return Err(CondaError::InvalidInput(
            "inter-class distance needs at least two classes".into(),
        ));
    }
    let intra = mahalanobis(v, y_hat, stats)?;
    let mut inter = 0.0;
    for c in (0..l).filter(|&c| c != y_hat) {
        inter += mahalanobis(v, c, stats)?;
    }
    Ok((intra, inter / (l - 1) as f64))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum ShiftKind {
    LowLevelLike,
    ConceptLevelLike,
}

#[derive(Debug, Clone, Serialize)]
pub struct ClassShift {
    pub class: usize,
    pub target_count: usize,
    /// ‖μ̂_t − μ_s‖²; `None` for classes absent from the batch.
    pub mean_shift_sq: Option<f64>,
    /// ‖Σ̂_t − Σ_s‖_F; `None` with fewer than two target samples.
    pub cov_shift_fro: Option<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct ShiftReport {
    pub classes: Vec<ClassShift>,
    /// Σ_y (μ̂_t,y[j] − μ_s,y[j])² per concept j, over classes present.
    pub concept_mean_shift: Vec<f64>,
    /// Mean over present classes of ‖μ̂_t − μ_s‖.
    pub aggregate_shift: f64,
    pub threshold: f64,
    pub kind: ShiftKind,
    /// Classes excluded from the covariance comparison (< 2 target samples).
    pub excluded_from_cov: Vec<usize>,
}

/// Default threshold: half the mean pairwise distance between source class means.
pub fn default_shift_threshold(stats: &ClassStats) -> f64 {
    let l = stats.class_count();
    let mut total = 0.0;
    let mut pairs = 0usize;
    for a in 0..l {
        for b in (a + 1)..l {
            let d: f64 = stats.classes[a]
                .mean
                .iter()
                .zip(&stats.classes[b].mean)
                .map(|(x, y)| (x - y) * (x - y))
                .sum();
            total += d.sqrt();
            pairs += 1;
        }
    }
    if pairs == 0 {
        0.0
    } else {
        0.5 * total / pairs as f64
    }
}

/// Compares target concept-score statistics, grouped by pseudo-label, with
/// the source Gaussians. Advisory only.
pub fn diagnose_shift(
    source: &ClassStats,
    target_scores: &DenseMatrix,
    pseudo_labels: &[usize],
    threshold: Option<f64>,
) -> Result<ShiftReport> {
    let m = source.dim();
    if target_scores.cols() != m {
        return Err(CondaError::shape(
            "diagnose_shift",
            format!("{} vs {m} concepts", target_scores.cols()),
        ));
    }
    if target_scores.rows() != pseudo_labels.len() {
        return Err(CondaError::shape(
            "diagnose_shift",
            "scores and pseudo-labels differ in length",
        ));
    }
    let l = source.class_count();
    let mut members: Vec<Vec<usize>> = vec![Vec::new(); l];
    for (i, &y) in pseudo_labels.iter().enumerate() {
        if y >= l {
            return Err(CondaError::ClassOutOfRange { class: y, count: l });
        }
        members[y].push(i);
    }
    let mut classes = Vec::with_capacity(l);
    let mut concept_mean_shift = vec![0.0; m];
    let mut excluded = Vec::new();
    let mut agg = 0.0;
    let mut present = 0usize;
    for (y, idx) in members.iter().enumerate() {
        let src = &source.classes[y];
        if idx.is_empty() {
            excluded.push(y);
            classes.push(ClassShift {
                class: y,
                target_count: 0,
                mean_shift_sq: None,
                cov_shift_fro: None,
            });
            continue;
        }
        let (mean, cov) = mean_cov(target_scores, idx, m);
        let mut sq = 0.0;
        for (j, (a, b)) in mean.iter().zip(&src.mean).enumerate() {
            let d = (a - b) * (a - b);
            concept_mean_shift[j] += d;
            sq += d;
        }
        agg += sq.sqrt();
        present += 1;
        let cov_shift = if idx.len() >= 2 {
            Some(cov.sub(&src.cov)?.frobenius())
        } else {
            excluded.push(y);
            None
        };
        classes.push(ClassShift {
            class: y,
            target_count: idx.len(),
            mean_shift_sq: Some(sq),
            cov_shift_fro: cov_shift,
        });
    }
    if present == 0 {
        return Err(CondaError::Empty("target batch"));
    }
    let aggregate_shift = agg / present as f64;
    let threshold = threshold.unwrap_or_else(|| default_shift_threshold(source));
    Ok(ShiftReport {
        classes,
        concept_mean_shift,
        aggregate_shift,
        threshold,
        kind: if aggregate_shift < threshold {
            ShiftKind::LowLevelLike
        } else {
            ShiftKind::ConceptLevelLike
        },
        excluded_from_cov: excluded,
    })
}
