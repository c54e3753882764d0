use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

const SMALL: &str = "scenario.kind = LOW_LEVEL\nscenario.n_source = 400\nscenario.n_target = 256\nscenario.d = 32\nscenario.m = 8\nsource_epochs = 200\n";

fn conda(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_conda"))
        .args(args)
        .output()
        .expect("spawn conda")
}

fn ok(args: &[&str]) -> String {
    let out = conda(args);
    assert!(
        out.status.success(),
        "{args:?}: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn error_code(out: &Output) -> String {
    assert!(!out.status.success());
    let err: Value = serde_json::from_slice(&out.stderr).expect("JSON error on stderr");
    err["error"]["code"].as_str().unwrap().to_string()
}

fn p(dir: &Path, name: &str) -> String {
    dir.join(name).to_string_lossy().into_owned()
}

fn json(path: impl AsRef<Path>) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

fn write_config(dir: &Path, extra: &str) -> String {
    let path = dir.join("run.conf");
    fs::write(&path, format!("{SMALL}{extra}")).unwrap();
    path.to_string_lossy().into_owned()
}

fn pipeline(dir: &Path, config: &str) {
    ok(&["simulate", "--spec", config, "--out", &p(dir, "data")]);
    ok(&[
        "fit-source",
        "--emb",
        &p(dir, "data/source_features.emb"),
        "--labels",
        &p(dir, "data/source_labels.emb"),
        "--bank",
        &p(dir, "data/bank.emb"),
        "--captions",
        &p(dir, "data/bank_captions.json"),
        "--config",
        config,
        "--out",
        &p(dir, "fit"),
    ]);
    ok(&[
        "adapt",
        "--model",
        &p(dir, "fit/model.cmd"),
        "--stats",
        &p(dir, "fit/stats.cst"),
        "--target-emb",
        &p(dir, "data/target_features.emb"),
        "--zs-logits",
        &p(dir, "data/target_zs_logits.emb"),
        "--lp-logits",
        &p(dir, "data/target_lp_logits.emb"),
        "--labels",
        &p(dir, "data/target_labels.emb"),
        "--config",
        config,
        "--out",
        &p(dir, "adapt"),
    ]);
}

#[test]
fn simulate_writes_manifest_with_matching_crcs() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), "");
    let stdout = ok(&["simulate", "--spec", &config, "--out", &p(dir.path(), "data")]);
    assert!(stdout.starts_with("# resolved configuration"));
    assert!(stdout.contains("scenario.seed = 42"));
    let manifest = json(dir.path().join("data/manifest.json"));
    assert_eq!(manifest["null_shift"], Value::Bool(false));
    let files = manifest["files"].as_object().unwrap();
    assert!(files.len() >= 6);
    for (name, crc) in files {
        let got = conda_core::iofmt::file_crc(dir.path().join("data").join(name)).unwrap();
        assert_eq!(crc.as_str().unwrap(), format!("{got:08x}"), "{name}");
    }
}

#[test]
fn severity_zero_is_flagged_as_null_shift() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), "scenario.severity = 0\n");
    ok(&["simulate", "--spec", &config, "--out", &p(dir.path(), "data")]);
    assert_eq!(
        json(dir.path().join("data/manifest.json"))["null_shift"],
        Value::Bool(true)
    );
}

#[test]
fn full_pipeline_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), "");
    pipeline(dir.path(), &config);
    let report = json(dir.path().join("adapt/report.json"));
    assert!(report["adapted"]["avg"].as_f64().unwrap() > report["unadapted"]["avg"].as_f64().unwrap());
    let lines = fs::read_to_string(dir.path().join("adapt/predictions.jsonl")).unwrap();
    assert_eq!(lines.lines().count(), 256);
    let first: Value = serde_json::from_str(lines.lines().next().unwrap()).unwrap();
    for key in ["index", "batch", "prediction", "pseudo_label"] {
        assert!(first.get(key).is_some(), "{key}");
    }
    let perf = json(dir.path().join("adapt/perf.json"));
    assert_eq!(perf["counters"]["batches"], 2);
    let shift = json(dir.path().join("adapt/shift.json"));
    assert_eq!(shift["classes"].as_array().unwrap().len(), 4);

    let model = conda_core::iofmt::read_model(dir.path().join("fit/model.cmd")).unwrap();
    assert_eq!(model.bank.captions.as_ref().unwrap()[0], "concept_0");
}

#[test]
fn disabled_stages_reproduce_unadapted_evaluation() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(
        dir.path(),
        "csa.enabled = false\nlpa.enabled = false\nrcb.enabled = false\n",
    );
    pipeline(dir.path(), &config);
    let report = json(dir.path().join("adapt/report.json"));
    assert_eq!(report["adapted"], report["unadapted"]);
    let eval_path = p(dir.path(), "eval.json");
    ok(&[
        "evaluate",
        "--model",
        &p(dir.path(), "adapt/adapted_model.cmd"),
        "--emb",
        &p(dir.path(), "data/target_features.emb"),
        "--labels",
        &p(dir.path(), "data/target_labels.emb"),
        "--out",
        &eval_path,
    ]);
    assert_eq!(json(&eval_path), report["unadapted"]);
}

#[test]
fn annotate_recovers_planted_captions_of_the_oracle_bank() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), "");
    ok(&["simulate", "--spec", &config, "--out", &p(dir.path(), "data")]);
    // Fit a model on the oracle bank so the bank rows are the true target concepts.
    ok(&[
        "fit-source",
        "--emb",
        &p(dir.path(), "data/source_features.emb"),
        "--labels",
        &p(dir.path(), "data/source_labels.emb"),
        "--bank",
        &p(dir.path(), "data/oracle_bank.emb"),
        "--config",
        &config,
        "--out",
        &p(dir.path(), "fit"),
    ]);
    let out = p(dir.path(), "ann.json");
    ok(&[
        "annotate",
        "--model",
        &p(dir.path(), "fit/model.cmd"),
        "--emb",
        &p(dir.path(), "data/target_features.emb"),
        "--simmat",
        &p(dir.path(), "data/caption_matrix.emb"),
        "--captions",
        &p(dir.path(), "data/caption_names.json"),
        "--out",
        &out,
    ]);
    let ann = json(&out);
    for (j, c) in ann["bank"]["concepts"].as_array().unwrap().iter().enumerate() {
        assert_eq!(c["caption"], format!("concept_{j}"));
    }
}

#[test]
fn sweep_over_stage_ablation_has_eight_rows() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), "");
    ok(&[
        "sweep",
        "--config",
        &config,
        "--grid",
        "csa.enabled=true,false",
        "--grid",
        "lpa.enabled=true,false",
        "--grid",
        "rcb.enabled=true,false",
        "--out",
        &p(dir.path(), "sweep"),
    ]);
    let csv = fs::read_to_string(dir.path().join("sweep/summary.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(
        lines[0],
        "point,csa.enabled,lpa.enabled,rcb.enabled,avg,wg,unadapted_avg,unadapted_wg"
    );
    assert_eq!(lines.len(), 9);
    let last: Vec<&str> = lines[8].split(',').collect();
    assert_eq!(&last[1..4], ["false", "false", "false"]);
    assert_eq!(last[4], last[6]);
    assert!(dir.path().join("sweep/point_007/report.json").exists());
}

#[test]
fn gradcheck_passes() {
    let stdout = ok(&["gradcheck", "--seeds", "3"]);
    assert!(stdout.lines().filter(|l| l.starts_with("ok")).count() >= 6);
    assert!(!stdout.contains("FAIL"));
}

#[test]
fn errors_are_json_with_codes() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.conf");
    fs::write(&bad, "lambda_frob = -1\n").unwrap();
    let out = conda(&[
        "simulate",
        "--spec",
        bad.to_str().unwrap(),
        "--out",
        &p(dir.path(), "x"),
    ]);
    assert_eq!(error_code(&out), "config");

    fs::write(&bad, "not_a_key = 1\n").unwrap();
    let out = conda(&[
        "simulate",
        "--spec",
        bad.to_str().unwrap(),
        "--out",
        &p(dir.path(), "x"),
    ]);
    assert_eq!(error_code(&out), "unknown_key");

    let out = conda(&[
        "evaluate",
        "--model",
        &p(dir.path(), "missing.cmd"),
        "--emb",
        "a",
        "--labels",
        "b",
    ]);
    assert_eq!(error_code(&out), "io");

    let out = conda(&["sweep", "--grid", "bogus", "--out", &p(dir.path(), "s")]);
    assert_eq!(error_code(&out), "cli");

    let out = conda(&[
        "annotate",
        "--model",
        "m",
        "--emb",
        "e",
        "--simmat",
        "s",
        "--captions",
        "c",
        "--threshold",
        "1.5",
    ]);
    assert_eq!(error_code(&out), "config");
}

#[test]
fn same_seed_gives_identical_crcs() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), "");
    ok(&["simulate", "--spec", &config, "--out", &p(dir.path(), "a")]);
    ok(&["simulate", "--spec", &config, "--out", &p(dir.path(), "b")]);
    let a = json(dir.path().join("a/manifest.json"));
    let b = json(dir.path().join("b/manifest.json"));
    assert_eq!(a["files"], b["files"]);
}

#[test]
fn one_point_grid_matches_single_adapt() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), "");
    pipeline(dir.path(), &config);
    ok(&[
        "sweep",
        "--config",
        &config,
        "--grid",
        "seed=0",
        "--out",
        &p(dir.path(), "sweep"),
    ]);
    let single = json(dir.path().join("adapt/report.json"));
    let point = json(dir.path().join("sweep/point_000/report.json"));
    assert_eq!(single, point);
}

fn bundled_gain(name: &str, metric: &str) -> f64 {
    let dir = tempfile::tempdir().unwrap();
    let config = Path::new(env!("CARGO_MANIFEST_DIR")).join(format!("../../configs/{name}.conf"));
    pipeline(dir.path(), config.to_str().unwrap());
    let report = json(dir.path().join("adapt/report.json"));
    report["adapted"][metric].as_f64().unwrap() - report["unadapted"][metric].as_f64().unwrap()
}

#[test]
fn bundled_low_level_gains_fifteen_points_avg() {
    let gain = bundled_gain("low_level", "avg");
    assert!(gain >= 0.15, "{gain}");
}

#[test]
fn bundled_concept_level_gains_fifteen_points_wg() {
    let gain = bundled_gain("concept_level", "wg");
    assert!(gain >= 0.15, "{gain}");
}
