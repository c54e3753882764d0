//! Synthetic worlds with planted ground truth for the three failure modes:
//! a low-level rotation that leaves the true concept scores unchanged, a
//! concept-level shift of one spurious concept, and a bank that is missing a
//! predictive concept.
//!
//! Features are `φ = C*ᵀv + Nᵀη` with orthonormal true concepts `C*` (m×d),
//! an orthonormal nuisance basis `N` completing it, class-conditional
//! concept scores `v ~ N(μ_y, Σ)` with a shared diagonal `Σ`, and nuisance
//! noise `η ~ N(0, σ²I)`. The shared covariance makes the Bayes rule linear
//! in `v`.

use std::f64::consts::FRAC_PI_4;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::adapt::{evaluate, EvalReport};
use crate::error::{CondaError, Result};
use crate::model::fit_source_head;
use crate::numerics::{argmax, dot};
use crate::pseudolabel::PredictorLogits;
use crate::rng;
use crate::DenseMatrix;

/// Class-mean offset of each ordinary predictive concept.
const SIGNAL: f64 = 1.5;
/// Per-step spacing of the ordinal class code on the spurious concept.
const SPURIOUS_STEP: f64 = 2.0;
/// Per-step spacing of the ordinal class code on the dropped concept.
const DROPPED_STEP: f64 = 2.0;
/// Class-mean offset of the ordinary concepts when the bank is incomplete,
/// weak enough that the dropped concept matters.
const INCOMPLETE_SIGNAL: f64 = 0.6;
/// Rotation angle at severity 1.
const BASE_ANGLE: f64 = FRAC_PI_4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum ScenarioKind {
    LowLevel,
    ConceptLevel,
    IncompleteBank,
}

impl ScenarioKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ScenarioKind::LowLevel => "LOW_LEVEL",
            ScenarioKind::ConceptLevel => "CONCEPT_LEVEL",
            ScenarioKind::IncompleteBank => "INCOMPLETE_BANK",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s.to_ascii_uppercase().as_str() {
            "LOW_LEVEL" => Some(ScenarioKind::LowLevel),
            "CONCEPT_LEVEL" => Some(ScenarioKind::ConceptLevel),
            "INCOMPLETE_BANK" => Some(ScenarioKind::IncompleteBank),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioSpec {
    pub kind: ScenarioKind,
    pub d: usize,
    pub m: usize,
    pub classes: usize,
    pub n_source: usize,
    pub n_target: usize,
    /// Rotation angle in units of π/4 (LOW_LEVEL) or the fraction of the
    /// spurious mean permutation applied (CONCEPT_LEVEL).
    pub severity: f64,
    pub spurious_concept: Option<usize>,
    pub dropped_concept: Option<usize>,
    pub noise_sigma: f64,
    /// Fraction of samples whose surrogate zero-shot prediction is flipped
    /// to a random other class.
    pub zs_noise_rate: f64,
    pub seed: u64,
}

impl ScenarioSpec {
    pub fn new(kind: ScenarioKind) -> Self {
        let mut spec = Self {
            kind,
            d: 64,
            m: 16,
            classes: 4,
            n_source: 2000,
            n_target: 2000,
            severity: 1.0,
            spurious_concept: None,
            dropped_concept: None,
            noise_sigma: 2.0,
            zs_noise_rate: 0.1,
            seed: 42,
        };
        match kind {
            ScenarioKind::LowLevel => {}
            ScenarioKind::ConceptLevel => spec.spurious_concept = Some(0),
            ScenarioKind::IncompleteBank => spec.dropped_concept = Some(0),
        }
        spec
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, constraint: &str| CondaError::Config {
            key: format!("scenario.{key}"),
            constraint: constraint.to_string(),
        };
        if self.m == 0 {
            return Err(bad("m", "must be >= 1"));
        }
        if self.m >= self.d {
            return Err(bad("m", "must be < d"));
        }
        if self.classes < 2 {
            return Err(bad("classes", "must be >= 2"));
        }
        if self.n_source == 0 || self.n_target == 0 {
            return Err(bad("n_source", "source and target sizes must be >= 1"));
        }
        if !(self.severity.is_finite() && self.severity >= 0.0) {
            return Err(bad("severity", "must be a finite value >= 0"));
        }
        if !(self.noise_sigma.is_finite() && self.noise_sigma >= 0.0) {
            return Err(bad("noise_sigma", "must be a finite value >= 0"));
        }
        if !(0.0..=1.0).contains(&self.zs_noise_rate) {
            return Err(bad("zs_noise_rate", "must lie in [0, 1]"));
        }
        for (key, idx) in [
            ("spurious_concept", self.spurious_concept),
            ("dropped_concept", self.dropped_concept),
        ] {
            if let Some(i) = idx {
                if i >= self.m {
                    return Err(bad(key, "must be < m"));
                }
            }
        }
        match self.kind {
            ScenarioKind::ConceptLevel if self.spurious_concept.is_none() => {
                Err(bad("spurious_concept", "required for CONCEPT_LEVEL"))
            }
            ScenarioKind::ConceptLevel if self.severity > 1.0 => Err(bad("severity", "must be <= 1 for CONCEPT_LEVEL")),
            ScenarioKind::IncompleteBank if self.dropped_concept.is_none() => {
                Err(bad("dropped_concept", "required for INCOMPLETE_BANK"))
            }
            ScenarioKind::IncompleteBank if self.m < 2 => Err(bad("m", "INCOMPLETE_BANK needs m >= 2")),
            _ => Ok(()),
        }
    }

    pub fn is_null_shift(&self) -> bool {
        self.kind != ScenarioKind::IncompleteBank && self.severity == 0.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Domain {
    Source,
    Target,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticWorld {
    pub spec: ScenarioSpec,
    /// m×d, orthonormal rows.
    pub true_bank: DenseMatrix,
    /// (d−m)×d, orthonormal rows orthogonal to the true bank.
    pub nuisance: DenseMatrix,
    /// L×m class means of the true concept scores.
    pub source_means: DenseMatrix,
    pub target_means: DenseMatrix,
    /// Shared diagonal covariance of the true concept scores.
    pub score_variance: Vec<f64>,
    /// Orthogonal d×d map applied to target features (identity unless LOW_LEVEL).
    pub rotation: DenseMatrix,
    /// Rows of the true bank handed to the model.
    pub model_concepts: Vec<usize>,
}

impl SyntheticWorld {
    pub fn model_bank(&self) -> DenseMatrix {
        self.true_bank.select_rows(&self.model_concepts)
    }

    pub fn model_captions(&self) -> Vec<String> {
        self.model_concepts.iter().map(|&j| concept_caption(j)).collect()
    }

    /// True bank composed with the inverse target rotation: its scores on
    /// target features equal the true concept scores.
    pub fn oracle_bank(&self) -> DenseMatrix {
        self.true_bank
            .matmul_transb(&self.rotation)
            .expect("world dimensions are consistent")
    }

    /// The model-visible part of the oracle bank.
    pub fn oracle_model_bank(&self) -> DenseMatrix {
        self.oracle_bank().select_rows(&self.model_concepts)
    }

    pub fn true_scores(&self, features: &DenseMatrix, domain: Domain) -> Result<DenseMatrix> {
        match domain {
            Domain::Source => features.matmul_transb(&self.true_bank),
            Domain::Target => features.matmul_transb(&self.oracle_bank()),
        }
    }

    /// Linear discriminant logits of the generative model (uniform priors).
    pub fn bayes_logits(&self, scores: &DenseMatrix, domain: Domain) -> Result<DenseMatrix> {
        let means = match domain {
            Domain::Source => &self.source_means,
            Domain::Target => &self.target_means,
        };
        let (l, m) = means.shape();
        if scores.cols() != m {
            return Err(CondaError::shape(
                "bayes_logits",
                format!("{} score columns, world has {m}", scores.cols()),
            ));
        }
        let mut w = DenseMatrix::zeros(l, m);
        let mut b = vec![0.0; l];
        for y in 0..l {
            for j in 0..m {
                let p = means.get(y, j) / self.score_variance[j];
                w.set(y, j, p);
                b[y] -= 0.5 * p * means.get(y, j);
            }
        }
        let mut out = scores.matmul_transb(&w)?;
        for row in 0..out.rows() {
            for (z, bias) in out.row_mut(row).iter_mut().zip(&b) {
                *z += bias;
            }
        }
        Ok(out)
    }

    pub fn bayes_predict(&self, features: &DenseMatrix, domain: Domain) -> Result<Vec<usize>> {
        let logits = self.bayes_logits(&self.true_scores(features, domain)?, domain)?;
        Ok(logits.row_iter().map(argmax).collect())
    }

    /// Accuracy of the Bayes predictor of the generative model.
    pub fn oracle_accuracy(&self, set: &LabeledSet, domain: Domain) -> Result<EvalReport> {
        evaluate(
            &self.bayes_predict(&set.features, domain)?,
            &set.labels,
            self.spec.classes,
        )
    }
}

pub fn concept_caption(j: usize) -> String {
    format!("concept_{j}")
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledSet {
    pub features: DenseMatrix,
    pub labels: Vec<usize>,
}

/// Candidate captions for annotation: one planted column per true concept
/// followed by distractor columns.
#[derive(Debug, Clone, PartialEq)]
pub struct CaptionMatrix {
    /// N_target × S.
    pub values: DenseMatrix,
    pub captions: Vec<String>,
}

#[derive(Debug, Clone)]
pub struct Simulation {
    pub world: SyntheticWorld,
    pub source: LabeledSet,
    pub target: LabeledSet,
    /// Surrogate predictor logits on the target set.
    pub target_logits: PredictorLogits,
    pub captions: CaptionMatrix,
}

/// Logit lead of the wrong class on a corrupted zero-shot row: the flipped
/// prediction wins, but with low confidence.
const ZS_FLIP_MARGIN: f64 = 0.5;

/// Relative noise level of planted caption columns.
const CAPTION_NOISE: f64 = 0.05;

pub fn generate(spec: &ScenarioSpec) -> Result<Simulation> {
    spec.validate()?;
    let world = build_world(spec)?;
    let source = sample(
        &world,
        spec.n_source,
        Domain::Source,
        &mut rng::stream(spec.seed, "source"),
    )?;
    let target = sample(
        &world,
        spec.n_target,
        Domain::Target,
        &mut rng::stream(spec.seed, "target"),
    )?;

    let mut zs = world.bayes_logits(&world.true_scores(&target.features, Domain::Target)?, Domain::Target)?;
    let mut noise = rng::stream(spec.seed, "zs_noise");
    for i in 0..zs.rows() {
        let flip = noise.random::<f64>() < spec.zs_noise_rate;
        let other = noise.random_range(0..spec.classes - 1);
        if flip {
            let row = zs.row_mut(i);
            let top = argmax(row);
            let wrong = if other >= top { other + 1 } else { other };
            row[wrong] = row[top] + ZS_FLIP_MARGIN;
        }
    }

    let probe = fit_source_head(&source.features, &source.labels, spec.classes, &Default::default())?;
    let lp = probe.apply(&target.features)?;
    let target_logits = PredictorLogits::new(zs, lp)?;
    let captions = planted_captions(&world, &target.features, &mut rng::stream(spec.seed, "captions"))?;
    Ok(Simulation {
        world,
        source,
        target,
        target_logits,
        captions,
    })
}

fn gaussian(rows: usize, cols: usize, rng: &mut impl Rng) -> DenseMatrix {
    let data = (0..rows * cols).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
    DenseMatrix::from_vec(rows, cols, data).expect("length matches")
}

/// Orthonormalizes the rows of a square Gaussian matrix (two passes of
/// modified Gram-Schmidt).
fn random_orthonormal(d: usize, rng: &mut impl Rng) -> DenseMatrix {
    let mut q = gaussian(d, d, rng);
    for i in 0..d {
        for _ in 0..2 {
            for k in 0..i {
                let (head, tail) = q.as_mut_slice().split_at_mut(i * d);
                let prev = &head[k * d..(k + 1) * d];
                let row = &mut tail[..d];
                let p = dot(prev, row);
                row.iter_mut().zip(prev).for_each(|(r, v)| *r -= p * v);
            }
        }
        let n = crate::numerics::norm(q.row(i));
        q.row_mut(i).iter_mut().for_each(|v| *v /= n);
    }
    q
}

fn ordinal(y: usize, classes: usize) -> f64 {
    y as f64 - (classes as f64 - 1.0) / 2.0
}

fn build_world(spec: &ScenarioSpec) -> Result<SyntheticWorld> {
    let (d, m, l) = (spec.d, spec.m, spec.classes);
    let mut rng = rng::stream(spec.seed, "world");
    let q = random_orthonormal(d, &mut rng);
    let true_bank = q.select_rows(&(0..m).collect::<Vec<_>>());
    let nuisance = q.select_rows(&(m..d).collect::<Vec<_>>());
    let score_variance: Vec<f64> = (0..m).map(|_| rng.random_range(0.6..1.4)).collect();

    let signal = match spec.kind {
        ScenarioKind::IncompleteBank => INCOMPLETE_SIGNAL,
        _ => SIGNAL,
    };
    let mut source_means = DenseMatrix::zeros(l, m);
    for y in 0..l {
        for j in 0..m {
            let hit = if j % l == y { signal } else { 0.0 };
            source_means.set(y, j, hit - signal / l as f64);
        }
    }
    let mut target_means = source_means.clone();
    let mut rotation = DenseMatrix::identity(d);
    let mut model_concepts: Vec<usize> = (0..m).collect();

    match spec.kind {
        ScenarioKind::LowLevel => {
            let angle = spec.severity * BASE_ANGLE;
            let (c, s) = (angle.cos(), angle.sin());
            for i in 0..m.min(d - m) {
                let ci = true_bank.row(i);
                let ni = nuisance.row(i);
                for a in 0..d {
                    for b in 0..d {
                        let cc = ci[a] * ci[b] + ni[a] * ni[b];
                        let skew = ni[a] * ci[b] - ci[a] * ni[b];
                        let v = rotation.get(a, b) + (c - 1.0) * cc + s * skew;
                        rotation.set(a, b, v);
                    }
                }
            }
        }
        ScenarioKind::ConceptLevel => {
            let sp = spec.spurious_concept.expect("validated");
            for y in 0..l {
                let own = SPURIOUS_STEP * ordinal(y, l);
                let next = SPURIOUS_STEP * ordinal((y + 1) % l, l);
                source_means.set(y, sp, own);
                target_means.set(y, sp, (1.0 - spec.severity) * own + spec.severity * next);
            }
        }
        ScenarioKind::IncompleteBank => {
            let dr = spec.dropped_concept.expect("validated");
            for y in 0..l {
                let v = DROPPED_STEP * ordinal(y, l);
                source_means.set(y, dr, v);
                target_means.set(y, dr, v);
            }
            model_concepts.retain(|&j| j != dr);
        }
    }

    Ok(SyntheticWorld {
        spec: spec.clone(),
        true_bank,
        nuisance,
        source_means,
        target_means,
        score_variance,
        rotation,
        model_concepts,
    })
}

fn sample(world: &SyntheticWorld, n: usize, domain: Domain, rng: &mut impl Rng) -> Result<LabeledSet> {
    let spec = &world.spec;
    let (d, m) = (spec.d, spec.m);
    let means = match domain {
        Domain::Source => &world.source_means,
        Domain::Target => &world.target_means,
    };
    let sd: Vec<f64> = world.score_variance.iter().map(|v| v.sqrt()).collect();
    let mut labels = Vec::with_capacity(n);
    let mut features = DenseMatrix::zeros(n, d);
    let mut v = vec![0.0; m];
    let mut eta = vec![0.0; d - m];
    for i in 0..n {
        let y = rng.random_range(0..spec.classes);
        labels.push(y);
        for j in 0..m {
            v[j] = means.get(y, j) + sd[j] * rng.sample::<f64, _>(StandardNormal);
        }
        for e in eta.iter_mut() {
            *e = spec.noise_sigma * rng.sample::<f64, _>(StandardNormal);
        }
        let row = features.row_mut(i);
        for (j, &vj) in v.iter().enumerate() {
            crate::numerics::axpy(vj, world.true_bank.row(j), row);
        }
        for (k, &ek) in eta.iter().enumerate() {
            crate::numerics::axpy(ek, world.nuisance.row(k), row);
        }
    }
    if domain == Domain::Target {
        features = features.matmul_transb(&world.rotation)?;
    }
    Ok(LabeledSet { features, labels })
}

fn planted_captions(world: &SyntheticWorld, features: &DenseMatrix, rng: &mut impl Rng) -> Result<CaptionMatrix> {
    let truth = world.true_scores(features, Domain::Target)?;
    let (n, m) = truth.shape();
    let distractors = m;
    let mut values = DenseMatrix::zeros(n, m + distractors);
    for j in 0..m {
        let col: Vec<f64> = (0..n).map(|i| truth.get(i, j)).collect();
        let rms = (col.iter().map(|v| v * v).sum::<f64>() / n as f64).sqrt();
        for (i, v) in col.iter().enumerate() {
            values.set(i, j, v + CAPTION_NOISE * rms * rng.sample::<f64, _>(StandardNormal));
        }
    }
    for j in m..m + distractors {
        for i in 0..n {
            values.set(i, j, rng.sample::<f64, _>(StandardNormal));
        }
    }
    let captions = (0..m)
        .map(concept_caption)
        .chain((0..distractors).map(|k| format!("distractor_{k}")))
        .collect();
    Ok(CaptionMatrix { values, captions })
}
