use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use conda_core::adapt::{evaluate_model, fit_source_model, run_stream, StreamResult, TargetData};
use conda_core::annotate::annotate_concepts;
use conda_core::gradaudit::{audit_all, GRADCHECK_TOLERANCE};
use conda_core::iofmt::{
    file_crc, read_config, read_labels, read_matrix, read_model, read_stats, render_config, write_config, write_labels,
    write_matrix, write_model, write_stats, Dtype,
};
use conda_core::model::concept_scores;
use conda_core::shiftsim::{generate, Domain, Simulation};
use conda_core::stats::diagnose_shift;
use conda_core::{
    CbmModel, ClassStats, ConceptBank, DenseMatrix, EvalReport, PredictorLogits, RunConfig, SimilarityMatrix,
};
use serde::Serialize;
use serde_json::json;

use crate::ConfigArg;

type Result<T> = anyhow::Result<T>;
type FileWriter<'a> = Box<dyn Fn(&Path) -> conda_core::Result<()> + 'a>;
/// Values of each grid axis at one point, and the configuration they produce.
type GridPoint = (Vec<String>, RunConfig);

pub const SOURCE_FEATURES: &str = "source_features.emb";
pub const SOURCE_LABELS: &str = "source_labels.emb";
pub const TARGET_FEATURES: &str = "target_features.emb";
pub const TARGET_LABELS: &str = "target_labels.emb";
pub const TARGET_ZS_LOGITS: &str = "target_zs_logits.emb";
pub const TARGET_LP_LOGITS: &str = "target_lp_logits.emb";

fn load_config(path: Option<&Path>) -> Result<RunConfig> {
    let cfg = match path {
        Some(p) => read_config(p).with_context(|| format!("reading config {}", p.display()))?,
        None => RunConfig::default(),
    };
    cfg.validate()?;
    Ok(cfg)
}

fn announce(cfg: &RunConfig) {
    println!("# resolved configuration");
    print!("{}", render_config(cfg));
    println!("# seed {} (scenario seed {})", cfg.adapt.seed, cfg.scenario.seed);
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn read_json<T: for<'de> serde::Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

fn create_dir(out: &Path) -> Result<()> {
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))
}

fn matrix(path: &Path) -> Result<DenseMatrix> {
    Ok(read_matrix(path)
        .with_context(|| format!("reading {}", path.display()))?
        .0)
}

fn labels(path: &Path) -> Result<Vec<usize>> {
    read_labels(path).with_context(|| format!("reading {}", path.display()))
}

pub fn simulate(spec: Option<&Path>, out: &Path) -> Result<()> {
    let cfg = load_config(spec)?;
    announce(&cfg);
    let sim = generate(&cfg.scenario)?;
    create_dir(out)?;

    let w = &sim.world;
    let files: Vec<(&str, FileWriter)> = vec![
        (
            SOURCE_FEATURES,
            Box::new(|p| write_matrix(p, &sim.source.features, Dtype::F64)),
        ),
        (SOURCE_LABELS, Box::new(|p| write_labels(p, &sim.source.labels))),
        (
            TARGET_FEATURES,
            Box::new(|p| write_matrix(p, &sim.target.features, Dtype::F64)),
        ),
        (TARGET_LABELS, Box::new(|p| write_labels(p, &sim.target.labels))),
        (
            TARGET_ZS_LOGITS,
            Box::new(|p| write_matrix(p, &sim.target_logits.zero_shot, Dtype::F64)),
        ),
        (
            TARGET_LP_LOGITS,
            Box::new(|p| write_matrix(p, &sim.target_logits.linear_probe, Dtype::F64)),
        ),
        ("bank.emb", Box::new(|p| write_matrix(p, &w.model_bank(), Dtype::F64))),
        (
            "oracle_bank.emb",
            Box::new(|p| write_matrix(p, &w.oracle_model_bank(), Dtype::F64)),
        ),
        (
            "caption_matrix.emb",
            Box::new(|p| write_matrix(p, &sim.captions.values, Dtype::F64)),
        ),
    ];
    let mut crcs = serde_json::Map::new();
    for (name, write) in &files {
        let path = out.join(name);
        write(&path)?;
        crcs.insert(name.to_string(), json!(format!("{:08x}", file_crc(&path)?)));
    }
    write_json(&out.join("bank_captions.json"), &w.model_captions())?;
    write_json(&out.join("caption_names.json"), &sim.captions.captions)?;
    write_json(&out.join("world.json"), w)?;
    write_config(out.join("scenario.conf"), &cfg)?;

    let oracle = json!({
        "source": w.oracle_accuracy(&sim.source, Domain::Source)?,
        "target": w.oracle_accuracy(&sim.target, Domain::Target)?,
    });
    write_json(&out.join("oracle.json"), &oracle)?;
    write_json(
        &out.join("manifest.json"),
        &json!({
            "scenario": cfg.scenario,
            "null_shift": cfg.scenario.is_null_shift(),
            "files": crcs,
        }),
    )?;
    println!(
        "simulated {}: {} source, {} target rows, oracle target avg {:.4}",
        cfg.scenario.kind.as_str(),
        sim.source.labels.len(),
        sim.target.labels.len(),
        oracle["target"]["avg"].as_f64().unwrap_or(f64::NAN),
    );
    Ok(())
}

pub fn fit_source(
    emb: &Path,
    label_path: &Path,
    bank: &Path,
    captions: Option<&Path>,
    config: &ConfigArg,
    out: &Path,
) -> Result<()> {
    let cfg = load_config(config.config.as_deref())?;
    announce(&cfg);
    let features = matrix(emb)?;
    let y = labels(label_path)?;
    let captions: Option<Vec<String>> = captions.map(read_json).transpose()?;
    let bank = ConceptBank::new(matrix(bank)?, captions)?;
    let classes = y.iter().max().map_or(0, |&c| c + 1);
    let (model, stats) = fit_source_model(&features, &y, classes, bank, &cfg.adapt)?;
    create_dir(out)?;
    write_model(out.join("model.cmd"), &model)?;
    write_stats(out.join("stats.cst"), &stats)?;
    let report = evaluate_model(&model, &features, &y)?;
    write_json(&out.join("source_report.json"), &report)?;
    println!("source fit: avg {:.4} wg {:.4}", report.avg, report.wg);
    Ok(())
}

pub struct AdaptInputs {
    pub model: PathBuf,
    pub stats: PathBuf,
    pub target_emb: PathBuf,
    pub zs_logits: PathBuf,
    pub lp_logits: PathBuf,
    pub labels: Option<PathBuf>,
}

/// Everything one adaptation run produces.
pub struct AdaptRun {
    pub model: CbmModel,
    pub result: StreamResult,
    pub unadapted: Option<EvalReport>,
    pub perf: serde_json::Value,
    pub shift: serde_json::Value,
}

pub fn adapt_target(
    model: CbmModel,
    stats: ClassStats,
    cfg: &RunConfig,
    features: &DenseMatrix,
    logits: &PredictorLogits,
    y: Option<&[usize]>,
) -> Result<AdaptRun> {
    let unadapted = y.map(|y| evaluate_model(&model, features, y)).transpose()?;
    let source_scores = concept_scores(model.bank.source_snapshot(), features)?;
    let data = TargetData {
        features,
        logits,
        labels: y,
    };
    let (session, result) = run_stream(model, stats.clone(), cfg.adapt.clone(), &data)?;

    let mut pseudo = vec![0usize; features.rows()];
    for b in &result.log {
        for (&i, &p) in b.indices.iter().zip(&b.pseudo_labels) {
            pseudo[i] = p;
        }
    }
    let shift = diagnose_shift(&stats, &source_scores, &pseudo, cfg.adapt.shift_threshold)?;
    let perf = session.perf();
    let batches = perf.batches.max(1) as f64;
    let perf = json!({
        "counters": perf,
        "adaptation_seconds": perf.adaptation_seconds(),
        "adaptation_seconds_per_batch": perf.adaptation_seconds() / batches,
        "warnings": session.warnings(),
        "threads": rayon::current_num_threads(),
    });
    Ok(AdaptRun {
        model: session.into_model(),
        result,
        unadapted,
        perf,
        shift: serde_json::to_value(shift)?,
    })
}

fn report_json(run: &AdaptRun) -> serde_json::Value {
    json!({
        "batches": run.result.log.len(),
        "adapted": run.result.report,
        "unadapted": run.unadapted,
    })
}

pub fn adapt(inputs: &AdaptInputs, config: &ConfigArg, out: &Path) -> Result<()> {
    let cfg = load_config(config.config.as_deref())?;
    announce(&cfg);
    let model = read_model(&inputs.model).with_context(|| format!("reading {}", inputs.model.display()))?;
    let stats = read_stats(&inputs.stats).with_context(|| format!("reading {}", inputs.stats.display()))?;
    let features = matrix(&inputs.target_emb)?;
    let logits = PredictorLogits::new(matrix(&inputs.zs_logits)?, matrix(&inputs.lp_logits)?)?;
    let y = inputs.labels.as_deref().map(labels).transpose()?;

    let run = adapt_target(model, stats, &cfg, &features, &logits, y.as_deref())?;
    create_dir(out)?;
    write_model(out.join("adapted_model.cmd"), &run.model)?;
    let mut lines = String::new();
    for b in &run.result.log {
        for ((&i, &p), &q) in b.indices.iter().zip(&b.predictions).zip(&b.pseudo_labels) {
            let line = json!({"index": i, "batch": b.batch, "prediction": p, "pseudo_label": q});
            lines.push_str(&line.to_string());
            lines.push('\n');
        }
    }
    fs::write(out.join("predictions.jsonl"), lines)?;
    write_json(&out.join("report.json"), &report_json(&run))?;
    write_json(&out.join("perf.json"), &run.perf)?;
    write_json(&out.join("shift.json"), &run.shift)?;

    match (&run.result.report, &run.unadapted) {
        (Some(a), Some(u)) => println!(
            "adapted {} batches: avg {:.4} (unadapted {:.4}), wg {:.4} (unadapted {:.4})",
            run.result.log.len(),
            a.avg,
            u.avg,
            a.wg,
            u.wg
        ),
        _ => println!("adapted {} batches", run.result.log.len()),
    }
    Ok(())
}

pub fn evaluate(model: &Path, emb: &Path, label_path: &Path, config: &ConfigArg, out: Option<&Path>) -> Result<()> {
    let cfg = load_config(config.config.as_deref())?;
    announce(&cfg);
    let model = read_model(model).with_context(|| format!("reading {}", model.display()))?;
    let report = evaluate_model(&model, &matrix(emb)?, &labels(label_path)?)?;
    println!("{}", serde_json::to_string(&report)?);
    if let Some(out) = out {
        write_json(out, &report)?;
    }
    Ok(())
}

pub fn annotate(
    model: &Path,
    emb: &Path,
    simmat: &Path,
    captions: &Path,
    threshold: Option<f64>,
    config: &ConfigArg,
    out: Option<&Path>,
) -> Result<()> {
    let mut cfg = load_config(config.config.as_deref())?;
    if let Some(t) = threshold {
        cfg.set("annotate_threshold", &t.to_string())?;
        cfg.validate()?;
    }
    announce(&cfg);
    let model = read_model(model).with_context(|| format!("reading {}", model.display()))?;
    let features = matrix(emb)?;
    let sim = SimilarityMatrix::new(matrix(simmat)?, read_json(captions)?)?;
    let t = cfg.annotate_threshold;
    let bank = annotate_concepts(&model.bank.vectors, &features, &sim, t)?;
    let residual = annotate_concepts(&model.residual.vectors, &features, &sim, t)?;
    println!(
        "annotated bank {}/{} and residual {}/{} at threshold {t}",
        bank.accepted(),
        bank.concepts.len(),
        residual.accepted(),
        residual.concepts.len()
    );
    let body = json!({"bank": bank, "residual": residual});
    match out {
        Some(out) => write_json(out, &body)?,
        None => println!("{}", serde_json::to_string_pretty(&body)?),
    }
    Ok(())
}

pub fn gradcheck(first: u64, count: u64, config: &ConfigArg, out: Option<&Path>) -> Result<()> {
    let cfg = load_config(config.config.as_deref())?;
    announce(&cfg);
    let audits = audit_all(first, count)?;
    let mut worst: Vec<(&str, &str, f64)> = Vec::new();
    for a in &audits {
        let e = a.report.max_rel_error;
        match worst.iter_mut().find(|w| w.0 == a.loss && w.1 == a.parameter) {
            Some(w) => w.2 = w.2.max(e),
            None => worst.push((a.loss, a.parameter, e)),
        }
    }
    for (loss, param, e) in &worst {
        let verdict = if *e < GRADCHECK_TOLERANCE { "ok" } else { "FAIL" };
        println!("{verdict:4} {loss}/{param}: max relative error {e:.3e}");
    }
    if let Some(out) = out {
        write_json(out, &audits)?;
    }
    let failed = audits.iter().filter(|a| !a.passed()).count();
    if failed > 0 {
        bail!(
            "{failed} of {} gradient audits exceeded {GRADCHECK_TOLERANCE:e}",
            audits.len()
        );
    }
    Ok(())
}

/// Parses `key=v1,v2,...` axes and returns every point of their product, the
/// first axis varying slowest.
pub fn grid_points(base: &RunConfig, axes: &[String]) -> Result<(Vec<String>, Vec<GridPoint>)> {
    let mut keys = Vec::new();
    let mut values: Vec<Vec<String>> = Vec::new();
    for axis in axes {
        let Some((key, vals)) = axis.split_once('=') else {
            bail!("grid axis `{axis}` is not key=v1,v2,...");
        };
        let key = key.trim();
        if keys.iter().any(|k| k == key) {
            bail!("grid key `{key}` repeated");
        }
        let vals: Vec<String> = vals.split(',').map(|v| v.trim().to_string()).collect();
        if vals.iter().any(String::is_empty) {
            bail!("grid axis `{axis}` has an empty value");
        }
        keys.push(key.to_string());
        values.push(vals);
    }
    let mut points = vec![(Vec::new(), base.clone())];
    for (key, vals) in keys.iter().zip(&values) {
        let mut next = Vec::with_capacity(points.len() * vals.len());
        for (labels, cfg) in &points {
            for v in vals {
                let mut cfg = cfg.clone();
                cfg.set(key, v)?;
                let mut labels = labels.clone();
                labels.push(v.clone());
                next.push((labels, cfg));
            }
        }
        points = next;
    }
    for (_, cfg) in &points {
        cfg.validate()?;
    }
    Ok((keys, points))
}

/// Simulates the configured scenario, fits the source model and adapts it.
pub fn simulate_and_adapt(cfg: &RunConfig) -> Result<(Simulation, AdaptRun)> {
    let sim = generate(&cfg.scenario)?;
    let bank = ConceptBank::new(sim.world.model_bank(), Some(sim.world.model_captions()))?;
    let (model, stats) = fit_source_model(
        &sim.source.features,
        &sim.source.labels,
        cfg.scenario.classes,
        bank,
        &cfg.adapt,
    )?;
    let run = adapt_target(
        model,
        stats,
        cfg,
        &sim.target.features,
        &sim.target_logits,
        Some(&sim.target.labels),
    )?;
    Ok((sim, run))
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

pub fn sweep(config: &ConfigArg, axes: &[String], out: &Path) -> Result<()> {
    let base = load_config(config.config.as_deref())?;
    announce(&base);
    let (keys, points) = grid_points(&base, axes)?;
    create_dir(out)?;
    let mut csv = String::from("point");
    for k in &keys {
        csv.push(',');
        csv.push_str(&csv_field(k));
    }
    csv.push_str(",avg,wg,unadapted_avg,unadapted_wg\n");
    for (p, (labels, cfg)) in points.iter().enumerate() {
        let (_, run) = simulate_and_adapt(cfg)?;
        let dir = out.join(format!("point_{p:03}"));
        create_dir(&dir)?;
        write_config(dir.join("config.conf"), cfg)?;
        write_json(&dir.join("report.json"), &report_json(&run))?;
        let adapted = run.result.report.as_ref().context("sweep runs carry labels")?;
        let unadapted = run.unadapted.as_ref().context("sweep runs carry labels")?;
        csv.push_str(&p.to_string());
        for v in labels {
            csv.push(',');
            csv.push_str(&csv_field(v));
        }
        csv.push_str(&format!(
            ",{},{},{},{}\n",
            adapted.avg, adapted.wg, unadapted.avg, unadapted.wg
        ));
        println!(
            "point {p}: {} avg {:.4} wg {:.4}",
            keys.iter()
                .zip(labels)
                .map(|(k, v)| format!("{k}={v}"))
                .collect::<Vec<_>>()
                .join(" "),
            adapted.avg,
            adapted.wg
        );
    }
    fs::write(out.join("summary.csv"), csv)?;
    Ok(())
}
