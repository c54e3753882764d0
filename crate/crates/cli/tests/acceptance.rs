//! Acceptance suite: one PASS/FAIL line per criterion, nonzero exit when any
//! criterion fails. Every input comes from the simulator or pinned fixtures.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::Instant;

use conda_core::adapt::{evaluate_model, fit_source_model, run_stream, TargetData};
use conda_core::annotate::annotate_concepts;
use conda_core::gradaudit::{audit_all, AUDITED_LOSSES, GRADCHECK_TOLERANCE};
use conda_core::iofmt::{
    decode_labels, decode_matrix, decode_model, encode_labels, encode_matrix, encode_model, Dtype,
};
use conda_core::model::forward_combined;
use conda_core::numerics::{cholesky_inverse, cosine};
use conda_core::shiftsim::{concept_caption, generate, Domain, ScenarioKind, ScenarioSpec, Simulation};
use conda_core::stats::{fit_class_stats, mahalanobis, ClassGaussian};
use conda_core::{
    AdaptConfig, CbmModel, ClassStats, ConceptBank, DenseMatrix, EvalReport, LinearHead, ResidualBranch, RunConfig,
    SimilarityMatrix,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<(bool, String), Box<dyn std::error::Error>>;
type Criterion = (&'static str, fn() -> Outcome);

const SEEDS: std::ops::Range<u64> = 100..110;

fn workspace() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

fn bundled(name: &str) -> RunConfig {
    conda_core::iofmt::read_config(workspace().join("configs").join(format!("{name}.conf"))).expect("bundled config")
}

fn with_seed(cfg: &RunConfig, seed: u64) -> RunConfig {
    let mut cfg = cfg.clone();
    cfg.scenario.seed = seed;
    cfg.adapt.seed = seed;
    cfg
}

#[derive(Clone, Copy)]
struct Stages(bool, bool, bool);

const FULL: Stages = Stages(true, true, true);
const CSA: Stages = Stages(true, false, false);
const LPA: Stages = Stages(false, true, false);
const CSA_LPA: Stages = Stages(true, true, false);

struct SeedRun {
    sim: Simulation,
    source: EvalReport,
    oracle: EvalReport,
    unadapted: EvalReport,
    adapted: Vec<(EvalReport, CbmModel)>,
}

fn run_seed(cfg: &RunConfig, stages: &[Stages]) -> Result<SeedRun, Box<dyn std::error::Error>> {
    let sim = generate(&cfg.scenario)?;
    let bank = ConceptBank::new(sim.world.model_bank(), None)?;
    let (model, stats) = fit_source_model(
        &sim.source.features,
        &sim.source.labels,
        cfg.scenario.classes,
        bank,
        &cfg.adapt,
    )?;
    let source = evaluate_model(&model, &sim.source.features, &sim.source.labels)?;
    let oracle = sim.world.oracle_accuracy(&sim.target, Domain::Target)?;
    let unadapted = evaluate_model(&model, &sim.target.features, &sim.target.labels)?;
    let data = TargetData {
        features: &sim.target.features,
        logits: &sim.target_logits,
        labels: Some(&sim.target.labels),
    };
    let mut adapted = Vec::new();
    for &Stages(csa, lpa, rcb) in stages {
        let mut config = cfg.adapt.clone();
        config.csa.enabled = csa;
        config.lpa.enabled = lpa;
        config.rcb.enabled = rcb;
        let (session, result) = run_stream(model.clone(), stats.clone(), config, &data)?;
        adapted.push((result.report.expect("labels supplied"), session.into_model()));
    }
    Ok(SeedRun {
        sim,
        source,
        oracle,
        unadapted,
        adapted,
    })
}

fn mean(v: impl IntoIterator<Item = f64>) -> f64 {
    let v: Vec<f64> = v.into_iter().collect();
    v.iter().sum::<f64>() / v.len() as f64
}

fn random(rows: usize, cols: usize, rng: &mut impl Rng) -> DenseMatrix {
    let data = (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect();
    DenseMatrix::from_vec(rows, cols, data).expect("length matches")
}

fn gradients() -> Outcome {
    let start = Instant::now();
    let audits = audit_all(0, 20)?;
    let secs = start.elapsed().as_secs_f64();
    let worst = audits.iter().map(|a| a.report.max_rel_error).fold(0.0, f64::max);
    let pass = audits.iter().all(|a| a.passed()) && secs < 60.0;
    Ok((
        pass,
        format!(
            "{} losses x 20 seeds, worst relative error {worst:.2e} (< {GRADCHECK_TOLERANCE:e}), {secs:.1} s (< 60 s)",
            AUDITED_LOSSES.len()
        ),
    ))
}

fn combined_identity() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let (m, r, d, l, n) = (
            rng.random_range(1..9),
            rng.random_range(0..5),
            rng.random_range(2..12),
            rng.random_range(2..6),
            rng.random_range(1..24),
        );
        let bank = ConceptBank::new(random(m, d, &mut rng).scale(3.0), None)?;
        let head = LinearHead {
            weights: random(l, m, &mut rng),
            bias: (0..l).map(|_| rng.random_range(-1.0..1.0)).collect(),
        };
        let mut residual = ResidualBranch::init(r, l, d, &mut rng);
        residual.weights = random(l, r, &mut rng);
        residual.bias = (0..l).map(|_| rng.random_range(-1.0..1.0)).collect();
        let model = CbmModel::new(bank, head, residual)?;
        let x = random(n, d, &mut rng).scale(5.0);
        let branches = model.forward(&x)?;
        let (w, c, b) = model.combined_params();
        let combined = forward_combined(&w, &c, &b, &x)?;
        for (a, b) in branches.as_slice().iter().zip(combined.as_slice()) {
            worst = worst.max((a - b).abs());
        }
    }
    Ok((
        worst <= 1e-9,
        format!("100 random models, max abs difference {worst:.2e} (<= 1e-9)"),
    ))
}

fn null_shift() -> Outcome {
    let mut base = bundled("low_level");
    base.scenario.severity = 0.0;
    let mut deltas = Vec::new();
    for seed in SEEDS {
        let run = run_seed(&with_seed(&base, seed), &[FULL])?;
        deltas.push((run.adapted[0].0.avg - run.unadapted.avg) * 100.0);
    }
    let worst = deltas.iter().map(|d| d.abs()).fold(0.0, f64::max);
    Ok((
        worst <= 2.0,
        format!(
            "severity 0, 10 seeds: worst |adapted - unadapted| {worst:.2} points (<= 2), mean change {:+.2}",
            mean(deltas.iter().copied())
        ),
    ))
}

fn low_level() -> Outcome {
    let base = bundled("low_level");
    let runs = SEEDS
        .map(|s| run_seed(&with_seed(&base, s), &[FULL, CSA]))
        .collect::<Result<Vec<_>, _>>()?;
    let source = mean(runs.iter().map(|r| r.source.avg));
    let oracle = mean(runs.iter().map(|r| r.oracle.avg));
    let none = mean(runs.iter().map(|r| r.unadapted.avg));
    let full = mean(runs.iter().map(|r| r.adapted[0].0.avg));
    let csa = mean(runs.iter().map(|r| r.adapted[1].0.avg));
    let gap = (source - none) * 100.0;
    let recovered = (full - none) / (oracle - none);
    let csa_share = (csa - none) / (full - none);
    Ok((
        gap >= 15.0 && recovered >= 0.6 && csa_share >= 0.7,
        format!(
            "10-seed AVG: source {source:.3}, unadapted {none:.3} (gap {gap:.1} >= 15 points), \
             oracle {oracle:.3}, full {full:.3} recovers {:.0}% (>= 60%), CSA-only {csa:.3} gives {:.0}% of full gain (>= 70%)",
            recovered * 100.0,
            csa_share * 100.0
        ),
    ))
}

fn concept_level() -> Outcome {
    let base = bundled("concept_level");
    let runs = SEEDS
        .map(|s| run_seed(&with_seed(&base, s), &[FULL, LPA, CSA]))
        .collect::<Result<Vec<_>, _>>()?;
    let source = mean(runs.iter().map(|r| r.source.wg));
    let none = mean(runs.iter().map(|r| r.unadapted.wg));
    let full = mean(runs.iter().map(|r| r.adapted[0].0.wg));
    let lpa = mean(runs.iter().map(|r| r.adapted[1].0.wg));
    let csa = mean(runs.iter().map(|r| r.adapted[2].0.wg));
    let collapse = (source - none) * 100.0;
    let full_gain = (full - none) * 100.0;
    let lpa_gain = (lpa - none) * 100.0;
    let csa_gain = (csa - none) * 100.0;
    let lpa_share = lpa_gain / full_gain;
    Ok((
        collapse >= 25.0 && full_gain >= 15.0 && lpa_share >= 0.7 && csa_gain < 0.5 * lpa_gain,
        format!(
            "10-seed WG: source {source:.3}, unadapted {none:.3} (collapse {collapse:.1} >= 25 points), \
             full +{full_gain:.1} (>= 15), LPA-only +{lpa_gain:.1} = {:.0}% of full (>= 70%), \
             CSA-only {csa_gain:+.1} (< {:.1})",
            lpa_share * 100.0,
            0.5 * lpa_gain
        ),
    ))
}

/// |cos| between the dropped true concept and the residual vector whose head
/// column has the largest norm.
fn residual_alignment(run: &SeedRun, model: &CbmModel, dropped: usize) -> f64 {
    let w = &model.residual.weights;
    let norm = |j: usize| (0..w.rows()).map(|c| w.get(c, j).powi(2)).sum::<f64>();
    let best = (0..w.cols())
        .max_by(|&a, &b| norm(a).total_cmp(&norm(b)))
        .expect("r > 0");
    let target = run.sim.world.true_bank.row(dropped);
    cosine(model.residual.vectors.row(best), target).map_or(0.0, f64::abs)
}

fn incomplete_bank() -> Outcome {
    let base = bundled("incomplete_bank");
    let dropped = base.scenario.dropped_concept.expect("incomplete bank drops a concept");
    let runs = SEEDS
        .map(|s| run_seed(&with_seed(&base, s), &[FULL, CSA_LPA]))
        .collect::<Result<Vec<_>, _>>()?;
    let full = mean(runs.iter().map(|r| r.adapted[0].0.avg));
    let partial = mean(runs.iter().map(|r| r.adapted[1].0.avg));
    let margin = (full - partial) * 100.0;
    let seed_cos = mean(runs.iter().map(|r| residual_alignment(r, &r.adapted[0].1, dropped)));
    let bundled_run = run_seed(&base, &[FULL])?;
    let bundled_cos = residual_alignment(&bundled_run, &bundled_run.adapted[0].1, dropped);
    Ok((
        margin >= 5.0 && bundled_cos >= 0.7 && seed_cos >= 0.7,
        format!(
            "r={}: 10-seed AVG full {full:.3} vs CSA+LPA {partial:.3} (+{margin:.1} >= 5 points); \
             residual |cos| with dropped concept {bundled_cos:.3} on the bundled seed, {seed_cos:.3} 10-seed mean (>= 0.7)",
            base.adapt.residual_concepts
        ),
    ))
}

fn annotation() -> Outcome {
    let mut correct = 0;
    let mut total = 0;
    for name in ["low_level", "concept_level", "incomplete_bank"] {
        let cfg = bundled(name);
        let sim = generate(&cfg.scenario)?;
        let simmat = SimilarityMatrix::new(sim.captions.values.clone(), sim.captions.captions.clone())?;
        let result = annotate_concepts(&sim.world.oracle_bank(), &sim.target.features, &simmat, 0.8)?;
        for (j, c) in result.concepts.iter().enumerate() {
            total += 1;
            if c.caption.as_deref() == Some(concept_caption(j).as_str()) {
                correct += 1;
            }
        }
    }
    let rate = correct as f64 / total as f64;

    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut invariant = 0;
    let cases = 64;
    for _ in 0..cases {
        let feats = random(30, 6, &mut rng);
        let bank = random(4, 6, &mut rng);
        let p = random(30, 7, &mut rng);
        let names: Vec<String> = (0..7).map(|k| format!("caption_{k}")).collect();
        let base = annotate_concepts(&bank, &feats, &SimilarityMatrix::new(p.clone(), names.clone())?, 0.0)?;
        let mut q = p.clone();
        for k in 0..7 {
            let s = rng.random_range(0.01..100.0);
            for i in 0..30 {
                q.set(i, k, q.get(i, k) * s);
            }
        }
        let scaled = annotate_concepts(
            &bank.scale(rng.random_range(0.01..100.0)),
            &feats,
            &SimilarityMatrix::new(q, names)?,
            0.0,
        )?;
        let same = base
            .concepts
            .iter()
            .zip(&scaled.concepts)
            .all(|(a, b)| a.caption_index == b.caption_index && (a.score - b.score).abs() < 1e-9);
        invariant += usize::from(same);
    }
    Ok((
        rate >= 0.9 && invariant == cases,
        format!(
            "planted captions recovered {correct}/{total} ({:.0}% >= 90%) at threshold 0.8; \
             scale invariance holds in {invariant}/{cases} random cases",
            rate * 100.0
        ),
    ))
}

fn gauss_jordan_inverse(a: &DenseMatrix) -> DenseMatrix {
    let n = a.rows();
    let mut aug = vec![vec![0.0; 2 * n]; n];
    for (i, row) in aug.iter_mut().enumerate() {
        for (j, v) in row[..n].iter_mut().enumerate() {
            *v = a.get(i, j);
        }
        row[n + i] = 1.0;
    }
    for col in 0..n {
        let pivot = (col..n)
            .max_by(|&x, &y| aug[x][col].abs().total_cmp(&aug[y][col].abs()))
            .expect("non-empty");
        aug.swap(col, pivot);
        let p = aug[col][col];
        aug[col].iter_mut().for_each(|v| *v /= p);
        let src = aug[col].clone();
        for (r, row) in aug.iter_mut().enumerate() {
            if r != col {
                let f = row[col];
                row.iter_mut().zip(&src).for_each(|(v, s)| *v -= f * s);
            }
        }
    }
    let rows: Vec<Vec<f64>> = aug.into_iter().map(|r| r[n..].to_vec()).collect();
    DenseMatrix::from_rows(&rows).expect("square")
}

fn random_stats(l: usize, m: usize, rng: &mut impl Rng) -> Result<ClassStats, Box<dyn std::error::Error>> {
    let n = 40 * l;
    let mut scores = random(n, m, rng);
    let labels: Vec<usize> = (0..n).map(|i| i % l).collect();
    for (i, &y) in labels.iter().enumerate() {
        scores.row_mut(i).iter_mut().for_each(|v| *v += y as f64);
    }
    Ok(fit_class_stats(&scores, &labels, l)?)
}

fn statistics() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let (l, m) = (3, 5);
    let stats = random_stats(l, m, &mut rng)?;
    let mut oracle_worst: f64 = 0.0;
    for _ in 0..50 {
        let v: Vec<f64> = (0..m).map(|_| rng.random_range(-3.0..3.0)).collect();
        for y in 0..l {
            let g = stats.class(y)?;
            let inv = gauss_jordan_inverse(&g.cov);
            let diff: Vec<f64> = v.iter().zip(&g.mean).map(|(a, b)| a - b).collect();
            let expected: f64 = (0..m)
                .map(|i| (0..m).map(|j| diff[i] * inv.get(i, j) * diff[j]).sum::<f64>())
                .sum();
            let got = mahalanobis(&v, y, &stats)?;
            oracle_worst = oracle_worst.max((got - expected).abs() / expected.abs().max(1.0));
        }
    }

    let mut affine_worst: f64 = 0.0;
    for _ in 0..50 {
        let g = random_stats(1, 4, &mut rng)?.class(0)?.clone();
        let mut a = DenseMatrix::identity(4);
        for v in a.as_mut_slice() {
            *v += 0.3 * rng.random_range(-1.0..1.0);
        }
        let t: Vec<f64> = (0..4).map(|_| rng.random_range(-2.0..2.0)).collect();
        let map = |x: &[f64]| -> Vec<f64> { a.matvec(x).expect("4-d").iter().zip(&t).map(|(p, q)| p + q).collect() };
        let cov = a.matmul(&g.cov)?.matmul_transb(&a)?;
        let mut sym = cov.clone();
        for i in 0..4 {
            for j in 0..4 {
                sym.set(i, j, 0.5 * (cov.get(i, j) + cov.get(j, i)));
            }
        }
        let inv = cholesky_inverse(&sym)?;
        let original = ClassStats::from_parts(vec![g.clone()])?;
        let mapped = ClassStats::from_parts(vec![ClassGaussian {
            mean: map(&g.mean),
            cov: sym,
            inv,
            count: g.count,
        }])?;
        let v: Vec<f64> = (0..4).map(|_| rng.random_range(-2.0..2.0)).collect();
        let before = mahalanobis(&v, 0, &original)?;
        let after = mahalanobis(&map(&v), 0, &mapped)?;
        affine_worst = affine_worst.max((before - after).abs() / before.max(1.0));
    }
    Ok((
        oracle_worst <= 1e-9 && affine_worst <= 1e-7,
        format!(
            "explicit-inverse agreement {oracle_worst:.2e} (<= 1e-9); 50 affine transforms, worst relative change {affine_worst:.2e}"
        ),
    ))
}

fn conda(args: &[&str]) -> Result<(), Box<dyn std::error::Error>> {
    let out = Command::new(env!("CARGO_BIN_EXE_conda")).args(args).output()?;
    if !out.status.success() {
        return Err(format!("conda {args:?} failed: {}", String::from_utf8_lossy(&out.stderr)).into());
    }
    Ok(())
}

fn cli_pipeline(dir: &Path, config: &str) -> Result<(), Box<dyn std::error::Error>> {
    let p = |name: &str| dir.join(name).to_string_lossy().into_owned();
    conda(&["simulate", "--spec", config, "--out", &p("data")])?;
    conda(&[
        "fit-source",
        "--emb",
        &p("data/source_features.emb"),
        "--labels",
        &p("data/source_labels.emb"),
        "--bank",
        &p("data/bank.emb"),
        "--config",
        config,
        "--out",
        &p("fit"),
    ])?;
    conda(&[
        "adapt",
        "--model",
        &p("fit/model.cmd"),
        "--stats",
        &p("fit/stats.cst"),
        "--target-emb",
        &p("data/target_features.emb"),
        "--zs-logits",
        &p("data/target_zs_logits.emb"),
        "--lp-logits",
        &p("data/target_lp_logits.emb"),
        "--labels",
        &p("data/target_labels.emb"),
        "--config",
        config,
        "--out",
        &p("adapt"),
    ])
}

fn determinism() -> Outcome {
    let config = workspace().join("configs/incomplete_bank.conf");
    let config = config.to_string_lossy();
    let runs = [tempfile::tempdir()?, tempfile::tempdir()?];
    for dir in &runs {
        cli_pipeline(dir.path(), &config)?;
    }
    let files = [
        "adapt/predictions.jsonl",
        "adapt/report.json",
        "adapt/shift.json",
        "adapt/adapted_model.cmd",
    ];
    let mut identical = 0;
    for f in files {
        if fs::read(runs[0].path().join(f))? == fs::read(runs[1].path().join(f))? {
            identical += 1;
        }
    }
    let lines = fs::read_to_string(runs[0].path().join(files[0]))?.lines().count();
    Ok((
        identical == files.len() && lines > 0,
        format!(
            "two CLI runs: {identical}/{} outputs byte-identical ({lines} prediction lines)",
            files.len()
        ),
    ))
}

fn runtime() -> Outcome {
    let spec = ScenarioSpec {
        d: 768,
        m: 100,
        classes: 10,
        n_source: 2000,
        n_target: 384,
        ..ScenarioSpec::new(ScenarioKind::LowLevel)
    };
    let config = AdaptConfig {
        batch_size: 128,
        n_grad: 20,
        residual_concepts: 5,
        ..AdaptConfig::default()
    };
    let sim = generate(&spec)?;
    let bank = ConceptBank::new(sim.world.model_bank(), None)?;
    let (model, stats) = fit_source_model(&sim.source.features, &sim.source.labels, spec.classes, bank, &config)?;
    let pool = rayon::ThreadPoolBuilder::new().num_threads(1).build()?;
    let data = TargetData {
        features: &sim.target.features,
        logits: &sim.target_logits,
        labels: None,
    };
    let (session, result) = pool.install(|| run_stream(model, stats, config, &data))?;
    let per_batch = session.perf().adaptation_seconds() / result.log.len() as f64;
    Ok((
        per_batch <= 1.0,
        format!(
            "m=100 d=768 L=10 batch=128 n_grad=20 r=5, one thread: {per_batch:.3} s per batch over {} batches (<= 1.0 s)",
            result.log.len()
        ),
    ))
}

fn io() -> Outcome {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/golden");
    let mut checks = Vec::new();

    let f64_bytes = fs::read(dir.join("matrix_f64.emb"))?;
    let (m, dtype) = decode_matrix(&f64_bytes)?;
    let mut back = Vec::new();
    encode_matrix(&mut back, &m, dtype)?;
    checks.push((
        "f64",
        dtype == Dtype::F64 && m.get(0, 2) == std::f64::consts::PI && back == f64_bytes,
    ));

    let f32_bytes = fs::read(dir.join("matrix_f32.emb"))?;
    let (m, dtype) = decode_matrix(&f32_bytes)?;
    let mut back = Vec::new();
    encode_matrix(&mut back, &m, dtype)?;
    checks.push(("f32", dtype == Dtype::F32 && m.get(0, 1) == -1.25 && back == f32_bytes));

    let label_bytes = fs::read(dir.join("labels.emb"))?;
    let labels = decode_labels(&label_bytes)?;
    let mut back = Vec::new();
    encode_labels(&mut back, &labels)?;
    checks.push(("labels", labels[..5] == [0, 3, 1, 2, 2] && back == label_bytes));

    let model_bytes = fs::read(dir.join("model.cmd"))?;
    let model = decode_model(&model_bytes)?;
    checks.push((
        "model",
        model.bank.captions.as_deref() == Some(&["red".to_string(), "round".to_string()][..])
            && encode_model(&model)? == model_bytes,
    ));

    let mut detected = 0;
    let payload = conda_core::iofmt::EMB_HEADER_LEN..f64_bytes.len() - 4;
    for i in payload.clone() {
        let mut corrupt = f64_bytes.clone();
        corrupt[i] ^= 0x01;
        if matches!(decode_matrix(&corrupt), Err(e) if e.code() == "crc_mismatch") {
            detected += 1;
        }
    }
    let round_trips = checks.iter().filter(|c| c.1).count();
    let failed: Vec<&str> = checks.iter().filter(|c| !c.1).map(|c| c.0).collect();
    Ok((
        round_trips == checks.len() && detected == payload.len(),
        format!(
            "golden round trips bit-exact {round_trips}/{}{}; CRC caught {detected}/{} single-bit payload flips",
            checks.len(),
            if failed.is_empty() {
                String::new()
            } else {
                format!(" (failed: {failed:?})")
            },
            payload.len()
        ),
    ))
}

fn main() {
    let criteria: [Criterion; 11] = [
        ("gradient correctness", gradients),
        ("combined-parameter identity", combined_identity),
        ("null-shift sanity", null_shift),
        ("low-level recovery", low_level),
        ("concept-level recovery", concept_level),
        ("incomplete bank", incomplete_bank),
        ("annotation", annotation),
        ("mahalanobis statistics", statistics),
        ("determinism", determinism),
        ("runtime envelope", runtime),
        ("io round trips", io),
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    for (name, check) in criteria {
        if !filter.is_empty() && !filter.iter().any(|f| name.contains(f.as_str())) {
            continue;
        }
        let start = Instant::now();
        let (pass, detail) = check().unwrap_or_else(|e| (false, format!("error: {e}")));
        failed += usize::from(!pass);
        println!(
            "{} {name}: {detail} [{:.1} s]",
            if pass { "PASS" } else { "FAIL" },
            start.elapsed().as_secs_f64()
        );
    }
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}
