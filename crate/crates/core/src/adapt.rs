//! Online, batch-sequential adaptation.
//!
//! Each batch is pseudo-labeled once, then the concept bank (CSA), the main
//! head (LPA) and the residual branch (RCB) are optimized in that order, each
//! for `n_grad` steps with everything else frozen. The batch is predicted with
//! the adapted model, and the adapted parameters (and optimizer moments) carry
//! over to the next batch.

use std::time::Instant;

use rand::seq::SliceRandom;
use serde::Serialize;

use crate::config::AdaptConfig;
use crate::error::{CondaError, Result};
use crate::losses::{csa_loss, lpa_loss_cached, rcb_loss_cached, RcbWeights};
use crate::model::{concept_scores, fit_source_head, CbmModel, ConceptBank, ResidualBranch};
use crate::numerics::{argmax, OptimizerState};
use crate::pseudolabel::{ensemble_pseudolabel, PredictorLogits, PseudoLabeledBatch};
use crate::rng;
use crate::stats::{fit_class_stats, ClassStats};
use crate::DenseMatrix;

/// Shuffles `0..n` with the `split` stream of `seed` and cuts it into
/// consecutive batches; the last batch may be short.
pub fn split_batches(n: usize, batch_size: usize, seed: u64) -> Result<Vec<Vec<usize>>> {
    if n == 0 {
        return Err(CondaError::Empty("dataset"));
    }
    if batch_size == 0 {
        return Err(CondaError::Config {
            key: "batch_size".into(),
            constraint: "must be >= 1".into(),
        });
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng::stream(seed, "split"));
    Ok(order.chunks(batch_size).map(<[usize]>::to_vec).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub avg: f64,
    pub wg: f64,
    /// `None` for classes without true samples.
    pub per_class: Vec<Option<f64>>,
    pub counts: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Confusion {
    classes: usize,
    /// Row = true class, column = predicted class.
    counts: Vec<u64>,
}

impl Confusion {
    pub fn new(classes: usize) -> Self {
        Self {
            classes,
            counts: vec![0; classes * classes],
        }
    }

    pub fn record(&mut self, predictions: &[usize], labels: &[usize]) -> Result<()> {
        if predictions.len() != labels.len() {
            return Err(CondaError::shape(
                "confusion",
                "predictions and labels differ in length",
            ));
        }
        for (&p, &t) in predictions.iter().zip(labels) {
            if p >= self.classes || t >= self.classes {
                return Err(CondaError::ClassOutOfRange {
                    class: p.max(t),
                    count: self.classes,
                });
            }
            self.counts[t * self.classes + p] += 1;
        }
        Ok(())
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn report(&self) -> Result<EvalReport> {
        let l = self.classes;
        let mut per_class = Vec::with_capacity(l);
        let mut counts = Vec::with_capacity(l);
        for t in 0..l {
            let row = &self.counts[t * l..(t + 1) * l];
            let n: u64 = row.iter().sum();
            counts.push(n as usize);
            per_class.push((n > 0).then(|| row[t] as f64 / n as f64));
        }
        let present: Vec<f64> = per_class.iter().flatten().copied().collect();
        if present.is_empty() {
            return Err(CondaError::Empty("evaluation samples"));
        }
        Ok(EvalReport {
            avg: present.iter().sum::<f64>() / present.len() as f64,
            wg: present.iter().copied().fold(f64::INFINITY, f64::min),
            per_class,
            counts,
        })
    }
}

/// Per-class accuracy; AVG is the unweighted mean and WG the minimum over
/// classes that have at least one true sample.
pub fn evaluate(predictions: &[usize], labels: &[usize], classes: usize) -> Result<EvalReport> {
    if predictions.is_empty() {
        return Err(CondaError::Empty("evaluation samples"));
    }
    let mut c = Confusion::new(classes);
    c.record(predictions, labels)?;
    c.report()
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct StageCounters {
    pub wall_seconds: f64,
    pub batches: usize,
    pub gradient_steps: usize,
    /// Σ over steps of the batch size.
    pub sample_steps: usize,
    /// Operation-count estimate from the per-stage cost model.
    pub flop_estimate: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct PerfCounters {
    pub pseudo_label: StageCounters,
    pub csa: StageCounters,
    pub lpa: StageCounters,
    pub rcb: StageCounters,
    pub predict: StageCounters,
    pub batches: usize,
}

impl PerfCounters {
    pub fn adaptation_seconds(&self) -> f64 {
        self.csa.wall_seconds + self.lpa.wall_seconds + self.rcb.wall_seconds
    }
}

struct Dims {
    n: f64,
    m: f64,
    r: f64,
    d: f64,
    l: f64,
    k: f64,
}

fn csa_cost(x: &Dims) -> f64 {
    x.n * (2.0 * x.m * x.d + x.l * x.m * (2.0 * x.m + 3.0) + x.l) + 5.0 * x.m * x.d
}

fn lpa_cost(x: &Dims) -> f64 {
    x.n * (2.0 * (x.m + x.r) * (x.d + x.l) + 5.0 * x.l) + 5.0 * x.l * x.m + 2.0 * x.l
}

fn rcb_cost(x: &Dims) -> f64 {
    x.n * (2.0 * (x.m + x.r) * (x.d + x.l) + 5.0 * x.l)
        + 6.0 * x.d * x.r * (x.m + (x.r - 1.0) / 2.0)
        + 4.0 * x.n * x.r * x.d
        + x.r * x.n * x.n.max(1.0).ln()
        + x.k * x.r
        + 2.0 * x.r * x.d
        + 2.0 * x.l * (x.r + 1.0)
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct Warnings {
    /// Mahalanobis distances floored inside the CSA log-ratio.
    pub clamped_distances: usize,
    /// Batches whose coherency k exceeded the batch size.
    pub k_clamped_batches: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BatchOutcome {
    pub predictions: Vec<usize>,
    pub pseudo_labels: Vec<usize>,
}

/// Mutable adaptation state carried across a stream of batches.
#[derive(Clone)]
pub struct AdaptSession {
    model: CbmModel,
    stats: ClassStats,
    config: AdaptConfig,
    csa_opt: OptimizerState,
    lpa_opt: [OptimizerState; 2],
    rcb_opt: [OptimizerState; 3],
    confusion: Confusion,
    perf: PerfCounters,
    warnings: Warnings,
}

impl AdaptSession {
    pub fn new(model: CbmModel, stats: ClassStats, config: AdaptConfig) -> Result<Self> {
        config.validate()?;
        if stats.class_count() != model.class_count() {
            return Err(CondaError::shape(
                "adapt_session",
                format!(
                    "stats have {} classes, model {}",
                    stats.class_count(),
                    model.class_count()
                ),
            ));
        }
        if stats.dim() != model.bank.concept_count() {
            return Err(CondaError::shape(
                "adapt_session",
                format!(
                    "stats over {} concepts, bank has {}",
                    stats.dim(),
                    model.bank.concept_count()
                ),
            ));
        }
        let opt = |s: &crate::config::StageConfig| OptimizerState::new(s.optimizer, s.lr);
        let l = model.class_count();
        Ok(Self {
            csa_opt: opt(&config.csa),
            lpa_opt: [opt(&config.lpa), opt(&config.lpa)],
            rcb_opt: [opt(&config.rcb), opt(&config.rcb), opt(&config.rcb)],
            confusion: Confusion::new(l),
            perf: PerfCounters::default(),
            warnings: Warnings::default(),
            model,
            stats,
            config,
        })
    }

    pub fn model(&self) -> &CbmModel {
        &self.model
    }

    pub fn into_model(self) -> CbmModel {
        self.model
    }

    pub fn config(&self) -> &AdaptConfig {
        &self.config
    }

    pub fn perf(&self) -> &PerfCounters {
        &self.perf
    }

    pub fn warnings(&self) -> &Warnings {
        &self.warnings
    }

    pub fn confusion(&self) -> &Confusion {
        &self.confusion
    }

    /// Pseudo-labels the batch, runs the enabled stages, and predicts the same
    /// batch with the adapted model.
    pub fn adapt_batch(&mut self, features: &DenseMatrix, logits: &PredictorLogits) -> Result<BatchOutcome> {
        if logits.len() != features.rows() {
            return Err(CondaError::shape(
                "adapt_batch",
                format!("{} logit rows for {} samples", logits.len(), features.rows()),
            ));
        }
        if logits.class_count() != self.model.class_count() {
            return Err(CondaError::shape("adapt_batch", "logit class count differs from model"));
        }
        if features.cols() != self.model.dim() {
            return Err(CondaError::shape(
                "adapt_batch",
                format!("features are {}-d, model is {}-d", features.cols(), self.model.dim()),
            ));
        }
        let n = features.rows();
        let (m, r, l, d) = (
            self.model.bank.concept_count(),
            self.model.residual.size(),
            self.model.class_count(),
            self.model.dim(),
        );
        let k = self.config.k_coh.resolve(self.config.batch_size, l);
        let dims = Dims {
            n: n as f64,
            m: m as f64,
            r: r as f64,
            d: d as f64,
            l: l as f64,
            k: k.min(n) as f64,
        };
        let steps = self.config.n_grad;

        let t = Instant::now();
        let pl = ensemble_pseudolabel(logits, self.config.zs_temperature)?;
        let batch = PseudoLabeledBatch::new(features.clone(), pl.labels, pl.confidences)?;
        tick(&mut self.perf.pseudo_label, t, 0, n, 0.0);

        if self.config.csa.enabled && steps > 0 {
            let t = Instant::now();
            let source = self.model.bank.source_snapshot().clone();
            for _ in 0..steps {
                let out = csa_loss(
                    &self.model.bank.vectors,
                    &batch,
                    &self.stats,
                    &source,
                    self.config.lambda_frob,
                )?;
                self.warnings.clamped_distances += out.clamped;
                self.csa_opt.step(&mut self.model.bank.vectors, &out.grad)?;
            }
            tick(&mut self.perf.csa, t, steps, n, steps as f64 * csa_cost(&dims));
        }

        if self.config.lpa.enabled && steps > 0 {
            let t = Instant::now();
            let scores = concept_scores(&self.model.bank.vectors, features)?;
            let residual = self.model.residual_logits(features)?;
            for _ in 0..steps {
                let out = lpa_loss_cached(
                    &self.model.head,
                    &scores,
                    &residual,
                    &batch.labels,
                    self.config.lambda_sparse,
                    self.config.alpha,
                )?;
                let [w_opt, b_opt] = &mut self.lpa_opt;
                w_opt.step(&mut self.model.head.weights, &out.grad_weights)?;
                b_opt.step_slice(&mut self.model.head.bias, &out.grad_bias)?;
            }
            tick(&mut self.perf.lpa, t, steps, n, steps as f64 * lpa_cost(&dims));
        }

        if self.config.rcb.enabled && steps > 0 && r > 0 {
            let t = Instant::now();
            let main = self.model.main_logits(features)?;
            let weights = RcbWeights {
                lambda_sim: self.config.lambda_sim,
                lambda_coh: self.config.lambda_coh,
                k,
            };
            let mut k_clamped = false;
            for _ in 0..steps {
                let out = rcb_loss_cached(&self.model, &main, &batch, weights, None)?;
                k_clamped |= out.k_clamped;
                let [c_opt, w_opt, b_opt] = &mut self.rcb_opt;
                c_opt.step(&mut self.model.residual.vectors, &out.grad_vectors)?;
                w_opt.step(&mut self.model.residual.weights, &out.grad_weights)?;
                b_opt.step_slice(&mut self.model.residual.bias, &out.grad_bias)?;
            }
            if k_clamped {
                self.warnings.k_clamped_batches += 1;
            }
            tick(&mut self.perf.rcb, t, steps, n, steps as f64 * rcb_cost(&dims));
        }

        let t = Instant::now();
        let predictions = self.model.predict(features)?;
        tick(&mut self.perf.predict, t, 0, n, 0.0);
        self.perf.batches += 1;
        if !self.model.bank.vectors.is_finite() || !self.model.head.weights.is_finite() {
            return Err(CondaError::InvalidInput(
                "adaptation diverged to non-finite parameters".into(),
            ));
        }
        Ok(BatchOutcome {
            predictions,
            pseudo_labels: batch.labels,
        })
    }

    /// Processes batches in order. With labels present, predictions are also
    /// accumulated into the running confusion matrix.
    pub fn adapt_stream<'a, I>(&mut self, batches: I) -> Result<StreamResult>
    where
        I: IntoIterator<Item = StreamBatch<'a>>,
    {
        let mut log = Vec::new();
        let mut labeled = false;
        let mut dim = None;
        for (b, item) in batches.into_iter().enumerate() {
            if *dim.get_or_insert(item.features.cols()) != item.features.cols() {
                return Err(CondaError::shape(
                    "adapt_stream",
                    format!("batch {b} changes feature dimension"),
                ));
            }
            let outcome = self.adapt_batch(&item.features, &item.logits)?;
            if let Some(labels) = item.labels {
                self.confusion.record(&outcome.predictions, labels)?;
                labeled = true;
            }
            log.push(BatchLog {
                batch: b,
                indices: item.indices.to_vec(),
                predictions: outcome.predictions,
                pseudo_labels: outcome.pseudo_labels,
            });
        }
        let report = if labeled { Some(self.confusion.report()?) } else { None };
        Ok(StreamResult { report, log })
    }
}

fn tick(c: &mut StageCounters, start: Instant, steps: usize, n: usize, flops: f64) {
    c.wall_seconds += start.elapsed().as_secs_f64();
    c.batches += 1;
    c.gradient_steps += steps;
    c.sample_steps += steps.max(1) * n;
    c.flop_estimate += flops;
}

/// One batch of a stream: dataset row indices, the gathered features and
/// predictor logits, and optional true labels for evaluation.
pub struct StreamBatch<'a> {
    pub indices: &'a [usize],
    pub features: DenseMatrix,
    pub logits: PredictorLogits,
    pub labels: Option<&'a [usize]>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BatchLog {
    pub batch: usize,
    pub indices: Vec<usize>,
    pub predictions: Vec<usize>,
    pub pseudo_labels: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StreamResult {
    pub report: Option<EvalReport>,
    pub log: Vec<BatchLog>,
}

/// Gathers batch rows from full target arrays.
pub struct TargetData<'a> {
    pub features: &'a DenseMatrix,
    pub logits: &'a PredictorLogits,
    pub labels: Option<&'a [usize]>,
}

/// Per-batch label slices, kept alive alongside the stream.
pub struct PreparedStream {
    pub batches: Vec<Vec<usize>>,
    pub labels: Option<Vec<Vec<usize>>>,
}

impl PreparedStream {
    pub fn new(data: &TargetData<'_>, batch_size: usize, seed: u64) -> Result<Self> {
        if data.logits.len() != data.features.rows() {
            return Err(CondaError::shape(
                "target data",
                "logits and features differ in row count",
            ));
        }
        if let Some(l) = data.labels {
            if l.len() != data.features.rows() {
                return Err(CondaError::shape(
                    "target data",
                    "labels and features differ in row count",
                ));
            }
        }
        let batches = split_batches(data.features.rows(), batch_size, seed)?;
        let labels = data
            .labels
            .map(|l| batches.iter().map(|b| b.iter().map(|&i| l[i]).collect()).collect());
        Ok(Self { batches, labels })
    }

    pub fn iter<'a>(&'a self, data: &'a TargetData<'a>) -> impl Iterator<Item = StreamBatch<'a>> + 'a {
        self.batches.iter().enumerate().map(move |(b, idx)| StreamBatch {
            indices: idx,
            features: data.features.select_rows(idx),
            logits: data.logits.select_rows(idx),
            labels: self.labels.as_ref().map(|l| l[b].as_slice()),
        })
    }
}

/// Splits the target set, adapts over every batch, and returns the session
/// together with the stream result.
pub fn run_stream(
    model: CbmModel,
    stats: ClassStats,
    config: AdaptConfig,
    data: &TargetData<'_>,
) -> Result<(AdaptSession, StreamResult)> {
    let prepared = PreparedStream::new(data, config.batch_size, config.seed)?;
    let mut session = AdaptSession::new(model, stats, config)?;
    let result = session.adapt_stream(prepared.iter(data))?;
    Ok((session, result))
}

/// Fits the source head and class statistics on labeled source features and
/// attaches a freshly initialized residual branch of `config.residual_concepts`
/// vectors drawn from the `residual` stream.
pub fn fit_source_model(
    features: &DenseMatrix,
    labels: &[usize],
    classes: usize,
    bank: ConceptBank,
    config: &AdaptConfig,
) -> Result<(CbmModel, ClassStats)> {
    config.validate()?;
    let scores = concept_scores(&bank.vectors, features)?;
    let stats = fit_class_stats(&scores, labels, classes)?;
    let head = fit_source_head(&scores, labels, classes, &config.source_fit())?;
    let residual = ResidualBranch::init(
        config.residual_concepts,
        classes,
        features.cols(),
        &mut rng::stream(config.seed, "residual"),
    );
    Ok((CbmModel::new(bank, head, residual)?, stats))
}

/// Predictions of an unadapted model over the whole set, as a report.
pub fn evaluate_model(model: &CbmModel, features: &DenseMatrix, labels: &[usize]) -> Result<EvalReport> {
    let logits = model.forward(features)?;
    let preds: Vec<usize> = logits.row_iter().map(argmax).collect();
    evaluate(&preds, labels, model.class_count())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::StageConfig;
    use crate::model::{ConceptBank, ResidualBranch};
    use crate::stats::fit_class_stats;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn split_sizes() {
        let b = split_batches(10, 4, 1).unwrap();
        assert_eq!(b.iter().map(Vec::len).collect::<Vec<_>>(), vec![4, 4, 2]);
        assert_eq!(b, split_batches(10, 4, 1).unwrap());
        let mut all: Vec<usize> = b.concat();
        all.sort_unstable();
        assert_eq!(all, (0..10).collect::<Vec<_>>());
        assert!(split_batches(0, 4, 1).is_err());
        assert!(split_batches(3, 0, 1).is_err());
    }

    #[test]
    fn evaluate_examples() {
        let r = evaluate(&[0, 1, 1], &[0, 1, 1], 2).unwrap();
        assert_eq!((r.avg, r.wg), (1.0, 1.0));

        let labels: Vec<usize> = [vec![0; 10], vec![1; 10]].concat();
        let mut preds = vec![0; 10];
        preds.extend([1, 1, 1, 1, 1, 0, 0, 0, 0, 0]);
        let r = evaluate(&preds, &labels, 2).unwrap();
        assert!((r.avg - 0.75).abs() < 1e-15);
        assert!((r.wg - 0.5).abs() < 1e-15);

        // Class 2 has no samples and is excluded.
        let r = evaluate(&[0, 1, 2], &[0, 1, 1], 3).unwrap();
        assert_eq!(r.per_class[2], None);
        assert!((r.wg - 0.5).abs() < 1e-15);
        assert!(r.wg <= r.avg);
        assert!(evaluate(&[], &[], 2).is_err());
    }

    fn toy(seed: u64, r: usize) -> (CbmModel, ClassStats, DenseMatrix, PredictorLogits) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (m, d, l, n) = (4, 8, 3, 90);
        let mut bank = DenseMatrix::zeros(m, d);
        for i in 0..m {
            bank.set(i, i, 1.0);
        }
        let labels: Vec<usize> = (0..n).map(|i| i % l).collect();
        let mut feats = DenseMatrix::zeros(n, d);
        for i in 0..n {
            for j in 0..d {
                let signal = if j == labels[i] { 2.0 } else { 0.0 };
                feats.set(i, j, signal + rng.random_range(-1.0..1.0));
            }
        }
        let scores = concept_scores(&bank, &feats).unwrap();
        let stats = fit_class_stats(&scores, &labels, l).unwrap();
        let head = crate::model::fit_source_head(&scores, &labels, l, &Default::default()).unwrap();
        let mut rng2 = ChaCha8Rng::seed_from_u64(seed + 1);
        let residual = ResidualBranch::init(r, l, d, &mut rng2);
        let model = CbmModel::new(ConceptBank::new(bank, None).unwrap(), head, residual).unwrap();
        let zs = model.forward(&feats).unwrap();
        let logits = PredictorLogits::new(zs.clone(), zs).unwrap();
        (model, stats, feats, logits)
    }

    fn config(enabled: bool, n_grad: usize) -> AdaptConfig {
        let stage = StageConfig {
            enabled,
            ..StageConfig::default()
        };
        AdaptConfig {
            n_grad,
            batch_size: 32,
            csa: stage,
            lpa: stage,
            rcb: stage,
            residual_concepts: 2,
            ..AdaptConfig::default()
        }
    }

    #[test]
    fn disabled_stages_match_source_predictions() {
        let (model, stats, feats, logits) = toy(1, 2);
        let expected = model.predict(&feats).unwrap();
        for cfg in [config(false, 20), config(true, 0)] {
            let mut s = AdaptSession::new(model.clone(), stats.clone(), cfg).unwrap();
            let out = s.adapt_batch(&feats, &logits).unwrap();
            assert_eq!(out.predictions, expected);
            assert_eq!(s.model(), &model);
        }
    }

    #[test]
    fn stage_isolation() {
        let (model, stats, feats, logits) = toy(2, 2);
        let only = |csa, lpa, rcb| {
            let mut cfg = config(true, 5);
            cfg.csa.enabled = csa;
            cfg.lpa.enabled = lpa;
            cfg.rcb.enabled = rcb;
            let mut s = AdaptSession::new(model.clone(), stats.clone(), cfg).unwrap();
            s.adapt_batch(&feats, &logits).unwrap();
            s.into_model()
        };
        let after = only(false, true, false);
        assert_eq!(after.bank, model.bank);
        assert_eq!(after.residual, model.residual);
        assert_ne!(after.head, model.head);

        let after = only(true, false, false);
        assert_eq!(after.head, model.head);
        assert_eq!(after.residual, model.residual);
        assert_ne!(after.bank.vectors, model.bank.vectors);
        assert_eq!(after.bank.source_snapshot(), model.bank.source_snapshot());

        let after = only(false, false, true);
        assert_eq!(after.bank, model.bank);
        assert_eq!(after.head, model.head);
        assert_ne!(after.residual, model.residual);
    }

    #[test]
    fn one_batch_stream_equals_adapt_batch() {
        let (model, stats, feats, logits) = toy(3, 2);
        let cfg = AdaptConfig {
            batch_size: 1000,
            ..config(true, 3)
        };
        let idx: Vec<usize> = (0..feats.rows()).collect();
        let mut a = AdaptSession::new(model.clone(), stats.clone(), cfg.clone()).unwrap();
        let direct = a.adapt_batch(&feats, &logits).unwrap();
        let mut b = AdaptSession::new(model, stats, cfg).unwrap();
        let res = b
            .adapt_stream([StreamBatch {
                indices: &idx,
                features: feats.clone(),
                logits: logits.clone(),
                labels: None,
            }])
            .unwrap();
        assert_eq!(res.log[0].predictions, direct.predictions);
        assert!(res.report.is_none());
        assert_eq!(a.model(), b.model());
    }

    #[test]
    fn zero_lr_leaves_model_untouched() {
        let (model, stats, feats, logits) = toy(4, 2);
        let mut cfg = config(true, 4);
        cfg.csa.lr = 0.0;
        cfg.lpa.lr = 0.0;
        cfg.rcb.lr = 0.0;
        let mut s = AdaptSession::new(model.clone(), stats, cfg).unwrap();
        s.adapt_batch(&feats, &logits).unwrap();
        assert_eq!(s.model(), &model);
    }

    #[test]
    fn rejects_mismatched_logits() {
        let (model, stats, feats, logits) = toy(5, 2);
        let mut s = AdaptSession::new(model, stats, config(true, 1)).unwrap();
        let short = logits.select_rows(&[0, 1]);
        assert!(s.adapt_batch(&feats, &short).is_err());
    }

    #[test]
    fn perf_counters_accumulate() {
        let (model, stats, feats, logits) = toy(6, 2);
        let data = TargetData {
            features: &feats,
            logits: &logits,
            labels: None,
        };
        let (session, result) = run_stream(model, stats, config(true, 2), &data).unwrap();
        assert_eq!(result.log.len(), 3);
        let p = session.perf();
        assert_eq!(p.batches, 3);
        assert_eq!(p.csa.gradient_steps, 6);
        assert_eq!(p.rcb.sample_steps, 2 * 90);
        assert!(p.csa.flop_estimate > 0.0);
    }
}
