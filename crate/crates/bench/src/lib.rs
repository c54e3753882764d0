//! Shared fixtures for the adaptation benchmarks.

use conda_core::adapt::fit_source_model;
use conda_core::shiftsim::{generate, ScenarioKind, ScenarioSpec};
use conda_core::{AdaptConfig, AdaptSession, ConceptBank, DenseMatrix, PredictorLogits, Result};

/// A low-level scenario at foundation-model scale: 768-d embeddings,
/// 100 concepts, 10 classes.
pub fn large_scenario() -> ScenarioSpec {
    ScenarioSpec {
        d: 768,
        m: 100,
        classes: 10,
        n_source: 2000,
        n_target: 128,
        ..ScenarioSpec::new(ScenarioKind::LowLevel)
    }
}

/// A fitted session and one target batch to adapt on.
pub struct Fixture {
    pub session: AdaptSession,
    pub features: DenseMatrix,
    pub logits: PredictorLogits,
}

pub fn fixture(spec: &ScenarioSpec, config: AdaptConfig) -> Result<Fixture> {
    let sim = generate(spec)?;
    let bank = ConceptBank::new(sim.world.model_bank(), None)?;
    let (model, stats) = fit_source_model(&sim.source.features, &sim.source.labels, spec.classes, bank, &config)?;
    Ok(Fixture {
        session: AdaptSession::new(model, stats, config)?,
        features: sim.target.features,
        logits: sim.target_logits,
    })
}
