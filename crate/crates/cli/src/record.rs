use std::fs;
use std::path::Path;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use srsd::metrics::{jain_index, CoverageReport, HitCriterion};
use srsd::orchestrator::evaluate::coverage;
use srsd::orchestrator::Trainer;
use srsd::Result;

/// Summary written next to each training run's checkpoint.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub seed: u64,
    pub steps: u64,
    pub sessions: u64,
    pub label_counts: Vec<usize>,
    /// Over the relevant-class counts; absent when no relevant label arrived.
    pub label_jain: Option<f64>,
    pub coverage: CoverageReport,
}

impl RunRecord {
    pub fn measure(trainer: &Trainer, skills: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        let counts = trainer.dataset.relevant_counts(trainer.num_relevant());
        let as_f64: Vec<f64> = counts.iter().map(|&c| c as f64).collect();
        let coverage = coverage(&trainer.agent, &trainer.task, &trainer.skill_config, skills, HitCriterion::Any, rng)?;
        Ok(RunRecord {
            seed: trainer.config.seed,
            steps: trainer.step(),
            sessions: trainer.sessions(),
            label_jain: jain_index(&as_f64).ok(),
            label_counts: counts,
            coverage,
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_slice(&fs::read(path)?)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, serde_json::to_vec_pretty(self)?)?;
        Ok(())
    }
}
