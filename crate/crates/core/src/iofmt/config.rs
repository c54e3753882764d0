//! Plain-text `key = value` configuration. `#` starts a comment, blank lines
//! are ignored, unknown and repeated keys are rejected. Absent keys keep
//! their defaults, so an empty file is the default configuration.

use std::fs;
use std::path::Path;

use crate::config::{AdaptConfig, KCoh, StageConfig};
use crate::error::{CondaError, Result};
use crate::numerics::OptimizerKind;
use crate::shiftsim::{ScenarioKind, ScenarioSpec};

/// Every recognized key, in the order `render_config` writes them.
pub const CONFIG_KEYS: [&str; 35] = [
    "lambda_frob",
    "lambda_sparse",
    "lambda_sim",
    "lambda_coh",
    "alpha",
    "n_grad",
    "batch_size",
    "residual_concepts",
    "k_coh",
    "csa.enabled",
    "csa.optimizer",
    "csa.lr",
    "lpa.enabled",
    "lpa.optimizer",
    "lpa.lr",
    "rcb.enabled",
    "rcb.optimizer",
    "rcb.lr",
    "zs_temperature",
    "seed",
    "source_epochs",
    "shift_threshold",
    "annotate_threshold",
    "scenario.kind",
    "scenario.d",
    "scenario.m",
    "scenario.classes",
    "scenario.n_source",
    "scenario.n_target",
    "scenario.severity",
    "scenario.spurious_concept",
    "scenario.dropped_concept",
    "scenario.noise_sigma",
    "scenario.zs_noise_rate",
    "scenario.seed",
];

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub adapt: AdaptConfig,
    pub scenario: ScenarioSpec,
    pub annotate_threshold: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            adapt: AdaptConfig::default(),
            scenario: ScenarioSpec::new(ScenarioKind::LowLevel),
            annotate_threshold: crate::annotate::DEFAULT_THRESHOLD,
        }
    }
}

fn invalid(key: &str, constraint: &str) -> CondaError {
    CondaError::Config {
        key: key.to_string(),
        constraint: constraint.to_string(),
    }
}

fn num<T: std::str::FromStr>(key: &str, v: &str, what: &str) -> Result<T> {
    v.parse().map_err(|_| invalid(key, what))
}

fn float(key: &str, v: &str) -> Result<f64> {
    let x: f64 = num(key, v, "must be a number")?;
    if !x.is_finite() {
        return Err(invalid(key, "must be finite"));
    }
    Ok(x)
}

fn boolean(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(invalid(key, "must be true or false")),
    }
}

fn optional_index(key: &str, v: &str) -> Result<Option<usize>> {
    if v == "none" {
        Ok(None)
    } else {
        num(key, v, "must be a non-negative integer or none").map(Some)
    }
}

fn stage_mut<'a>(adapt: &'a mut AdaptConfig, stage: &str) -> &'a mut StageConfig {
    match stage {
        "csa" => &mut adapt.csa,
        "lpa" => &mut adapt.lpa,
        _ => &mut adapt.rcb,
    }
}

impl RunConfig {
    /// Applies one `key = value` assignment without cross-field validation.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        let a = &mut self.adapt;
        let s = &mut self.scenario;
        match key {
            "lambda_frob" => a.lambda_frob = float(key, v)?,
            "lambda_sparse" => a.lambda_sparse = float(key, v)?,
            "lambda_sim" => a.lambda_sim = float(key, v)?,
            "lambda_coh" => a.lambda_coh = float(key, v)?,
            "alpha" => a.alpha = float(key, v)?,
            "n_grad" => a.n_grad = num(key, v, "must be a non-negative integer")?,
            "batch_size" => a.batch_size = num(key, v, "must be a positive integer")?,
            "residual_concepts" => a.residual_concepts = num(key, v, "must be a non-negative integer")?,
            "k_coh" => {
                a.k_coh = if v == "auto" {
                    KCoh::Auto
                } else {
                    KCoh::Fixed(num(key, v, "must be a positive integer or auto")?)
                }
            }
            "zs_temperature" => a.zs_temperature = float(key, v)?,
            "seed" => a.seed = num(key, v, "must be an unsigned 64-bit integer")?,
            "source_epochs" => a.source_epochs = num(key, v, "must be a non-negative integer")?,
            "shift_threshold" => a.shift_threshold = if v == "auto" { None } else { Some(float(key, v)?) },
            "annotate_threshold" => self.annotate_threshold = float(key, v)?,
            "scenario.kind" => {
                s.kind = ScenarioKind::parse(v)
                    .ok_or_else(|| invalid(key, "must be LOW_LEVEL, CONCEPT_LEVEL or INCOMPLETE_BANK"))?;
                match s.kind {
                    ScenarioKind::ConceptLevel if s.spurious_concept.is_none() => s.spurious_concept = Some(0),
                    ScenarioKind::IncompleteBank if s.dropped_concept.is_none() => s.dropped_concept = Some(0),
                    _ => {}
                }
            }
            "scenario.d" => s.d = num(key, v, "must be a positive integer")?,
            "scenario.m" => s.m = num(key, v, "must be a positive integer")?,
            "scenario.classes" => s.classes = num(key, v, "must be a positive integer")?,
            "scenario.n_source" => s.n_source = num(key, v, "must be a positive integer")?,
            "scenario.n_target" => s.n_target = num(key, v, "must be a positive integer")?,
            "scenario.severity" => s.severity = float(key, v)?,
            "scenario.spurious_concept" => s.spurious_concept = optional_index(key, v)?,
            "scenario.dropped_concept" => s.dropped_concept = optional_index(key, v)?,
            "scenario.noise_sigma" => s.noise_sigma = float(key, v)?,
            "scenario.zs_noise_rate" => s.zs_noise_rate = float(key, v)?,
            "scenario.seed" => s.seed = num(key, v, "must be an unsigned 64-bit integer")?,
            _ => match key.split_once('.') {
                Some((stage @ ("csa" | "lpa" | "rcb"), field)) => {
                    let st = stage_mut(a, stage);
                    match field {
                        "enabled" => st.enabled = boolean(key, v)?,
                        "optimizer" => {
                            st.optimizer = OptimizerKind::parse(v).ok_or_else(|| invalid(key, "must be sgd or adam"))?
                        }
                        "lr" => st.lr = float(key, v)?,
                        _ => return Err(CondaError::UnknownKey(key.to_string())),
                    }
                }
                _ => return Err(CondaError::UnknownKey(key.to_string())),
            },
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> Result<String> {
        let a = &self.adapt;
        let s = &self.scenario;
        let opt = |o: Option<usize>| o.map_or("none".to_string(), |i| i.to_string());
        Ok(match key {
            "lambda_frob" => a.lambda_frob.to_string(),
            "lambda_sparse" => a.lambda_sparse.to_string(),
            "lambda_sim" => a.lambda_sim.to_string(),
            "lambda_coh" => a.lambda_coh.to_string(),
            "alpha" => a.alpha.to_string(),
            "n_grad" => a.n_grad.to_string(),
            "batch_size" => a.batch_size.to_string(),
            "residual_concepts" => a.residual_concepts.to_string(),
            "k_coh" => match a.k_coh {
                KCoh::Auto => "auto".to_string(),
                KCoh::Fixed(k) => k.to_string(),
            },
            "zs_temperature" => a.zs_temperature.to_string(),
            "seed" => a.seed.to_string(),
            "source_epochs" => a.source_epochs.to_string(),
            "shift_threshold" => a.shift_threshold.map_or("auto".to_string(), |t| t.to_string()),
            "annotate_threshold" => self.annotate_threshold.to_string(),
            "scenario.kind" => s.kind.as_str().to_string(),
            "scenario.d" => s.d.to_string(),
            "scenario.m" => s.m.to_string(),
            "scenario.classes" => s.classes.to_string(),
            "scenario.n_source" => s.n_source.to_string(),
            "scenario.n_target" => s.n_target.to_string(),
            "scenario.severity" => s.severity.to_string(),
            "scenario.spurious_concept" => opt(s.spurious_concept),
            "scenario.dropped_concept" => opt(s.dropped_concept),
            "scenario.noise_sigma" => s.noise_sigma.to_string(),
            "scenario.zs_noise_rate" => s.zs_noise_rate.to_string(),
            "scenario.seed" => s.seed.to_string(),
            _ => match key.split_once('.') {
                Some((stage @ ("csa" | "lpa" | "rcb"), field)) => {
                    let st = match stage {
                        "csa" => &a.csa,
                        "lpa" => &a.lpa,
                        _ => &a.rcb,
                    };
                    match field {
                        "enabled" => st.enabled.to_string(),
                        "optimizer" => st.optimizer.as_str().to_string(),
                        "lr" => st.lr.to_string(),
                        _ => return Err(CondaError::UnknownKey(key.to_string())),
                    }
                }
                _ => return Err(CondaError::UnknownKey(key.to_string())),
            },
        })
    }

    pub fn validate(&self) -> Result<()> {
        self.adapt.validate()?;
        if !(-1.0..=1.0).contains(&self.annotate_threshold) {
            return Err(invalid("annotate_threshold", "must lie in [-1, 1]"));
        }
        Ok(())
    }
}

/// Parses configuration text. `scenario.kind` is applied first so the
/// remaining scenario keys override its defaults.
pub fn parse_config(text: &str) -> Result<RunConfig> {
    let mut pairs: Vec<(String, String)> = Vec::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| CondaError::Format(format!("line {}: expected key = value", lineno + 1)))?;
        let k = k.trim().to_string();
        if pairs.iter().any(|(seen, _)| *seen == k) {
            return Err(invalid(&k, "given more than once"));
        }
        pairs.push((k, v.trim().to_string()));
    }
    let mut cfg = RunConfig::default();
    pairs.sort_by_key(|(k, _)| k != "scenario.kind");
    for (k, v) in &pairs {
        cfg.set(k, v)?;
    }
    cfg.validate()?;
    Ok(cfg)
}

pub fn render_config(cfg: &RunConfig) -> String {
    let mut out = String::new();
    for key in CONFIG_KEYS {
        let v = cfg.get(key).expect("listed keys are known");
        out.push_str(&format!("{key} = {v}\n"));
    }
    out
}

pub fn read_config(path: impl AsRef<Path>) -> Result<RunConfig> {
    parse_config(&fs::read_to_string(path)?)
}

pub fn write_config(path: impl AsRef<Path>, cfg: &RunConfig) -> Result<()> {
    super::write_atomic(path.as_ref(), render_config(cfg).as_bytes())
}
