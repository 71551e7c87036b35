use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::agent::{AgentConfig, CriticMode};
use crate::contrastive::DiscriminatorConfig;
use crate::env::{
    make_task_with, Sector, StartMode, TaskSet, DEFAULT_ACTION_BOUND, DEFAULT_EPISODE_LEN, DEFAULT_MIN_RADIUS_FRAC,
    DEFAULT_RADIUS, DEFAULT_SECTOR_GAP,
};
use crate::error::{config_err, Result};
use crate::feedback::{EnsembleConfig, Irrationality, OracleConfig, DEFAULT_ORACLE_THRESHOLD};
use crate::skill::SkillConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TaskConfig {
    pub num_semantics: usize,
    pub radius: f64,
    pub episode_len: usize,
    pub action_bound: f64,
    pub sector_gap: f64,
    pub min_radius_frac: f64,
    pub start: StartMode,
    /// Explicit sectors; overrides the even layout when present.
    pub sectors: Option<Vec<Sector>>,
}

impl Default for TaskConfig {
    fn default() -> Self {
        TaskConfig {
            num_semantics: 4,
            radius: DEFAULT_RADIUS,
            episode_len: DEFAULT_EPISODE_LEN,
            action_bound: DEFAULT_ACTION_BOUND,
            sector_gap: DEFAULT_SECTOR_GAP,
            min_radius_frac: DEFAULT_MIN_RADIUS_FRAC,
            start: StartMode::Center,
            sectors: None,
        }
    }
}

impl TaskConfig {
    pub fn build(&self) -> Result<TaskSet> {
        let task = match &self.sectors {
            Some(sectors) => TaskSet {
                sectors: sectors.clone(),
                radius: self.radius,
                episode_len: self.episode_len,
                action_bound: self.action_bound,
                start: self.start,
            },
            None => {
                let mut t = make_task_with(
                    self.num_semantics,
                    self.radius,
                    self.episode_len,
                    self.sector_gap,
                    self.min_radius_frac,
                )?;
                t.action_bound = self.action_bound;
                t.start = self.start;
                t
            }
        };
        task.validate()?;
        Ok(task)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SkillSettings {
    pub z_dim: usize,
    pub normalize_head: bool,
    pub z_update_frequency: usize,
    /// Pick the semantic of each new skill inversely to its label count.
    pub adaptive_choice: bool,
}

impl Default for SkillSettings {
    fn default() -> Self {
        SkillSettings { z_dim: 64, normalize_head: true, z_update_frequency: 50, adaptive_choice: true }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FeedbackConfig {
    pub budget: usize,
    pub queries_per_session: usize,
    pub session_frequency: u64,
    /// Step `t0` after which sessions may start and the relevance reward may
    /// carry weight.
    pub start_feedback: u64,
    pub segment_len: usize,
    /// Candidate pool is this multiple of the session size.
    pub candidate_factor: usize,
    pub active_sampling: bool,
    pub predictor_epochs: usize,
    pub predictor_batch: usize,
    pub ensemble: EnsembleConfig,
    pub oracle_threshold: f64,
    pub irrationality: Irrationality,
}

impl Default for FeedbackConfig {
    fn default() -> Self {
        FeedbackConfig {
            budget: 400,
            queries_per_session: 40,
            session_frequency: 15_000,
            start_feedback: 10_000,
            segment_len: 25,
            candidate_factor: 10,
            active_sampling: true,
            predictor_epochs: 10,
            predictor_batch: 32,
            ensemble: EnsembleConfig { members: 5, hidden: 64, lr: 3e-4 },
            oracle_threshold: DEFAULT_ORACLE_THRESHOLD,
            irrationality: Irrationality::Rational,
        }
    }
}

impl FeedbackConfig {
    pub fn oracle(&self, num_relevant: usize) -> OracleConfig {
        OracleConfig::uniform(num_relevant, self.oracle_threshold, self.irrationality)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct Ablation {
    pub no_exploration: bool,
    pub no_diversity: bool,
    /// Never query and keep the relevance weight at zero.
    pub no_relevance: bool,
    /// Plain twin-critic TD3 instead of quantile critics.
    pub no_tqc: bool,
    /// Quantile critics without dropping any target atoms.
    pub no_truncation: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainSettings {
    pub total_steps: u64,
    pub batch_size: usize,
    pub replay_capacity: usize,
    /// Steps of uniformly random actions before the policy takes over and
    /// updates begin.
    pub learning_starts: u64,
    /// Environment steps per gradient update.
    pub update_every: usize,
    pub log_every: u64,
}

impl Default for TrainSettings {
    fn default() -> Self {
        TrainSettings {
            total_steps: 200_000,
            batch_size: 128,
            replay_capacity: 1_000_000,
            learning_starts: 2_000,
            update_every: 8,
            log_every: 5_000,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeedbackSourceKind {
    #[default]
    Simulated,
    Human,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub seed: u64,
    pub source: FeedbackSourceKind,
    pub task: TaskConfig,
    pub skill: SkillSettings,
    pub discriminator: DiscriminatorConfig,
    pub agent: AgentConfig,
    pub feedback: FeedbackConfig,
    pub train: TrainSettings,
    pub ablation: Ablation,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            source: FeedbackSourceKind::Simulated,
            task: TaskConfig::default(),
            skill: SkillSettings::default(),
            discriminator: DiscriminatorConfig { embed_dim: 16, hidden: 64, temperature: 0.5, knn_k: 16, lr: 1e-4 },
            agent: AgentConfig { hidden: 64, actor_lr: 3e-4, critic_lr: 3e-4, ..AgentConfig::default() },
            feedback: FeedbackConfig::default(),
            train: TrainSettings::default(),
            ablation: Ablation::default(),
        }
    }
}

impl RunConfig {
    /// Full-size run: 1M steps, 1024-wide networks, batches of 1024, one
    /// update per step, 1400 labels.
    pub fn full_scale() -> Self {
        let mut c = RunConfig::default();
        c.train = TrainSettings {
            total_steps: 1_000_000,
            batch_size: 1024,
            replay_capacity: 1_000_000,
            learning_starts: 4_000,
            update_every: 1,
            log_every: 10_000,
        };
        c.agent.hidden = 1024;
        c.discriminator.hidden = 1024;
        c.discriminator.embed_dim = 64;
        c.feedback.budget = 1400;
        c.feedback.queries_per_session = 140;
        c.feedback.ensemble.hidden = 256;
        c
    }

    /// Parses `s` as overrides on top of [`RunConfig::default`], so a
    /// partial table such as `[agent] hidden = 16` keeps the other defaults.
    pub fn from_toml_str(s: &str) -> Result<Self> {
        let mut base = toml::Table::try_from(RunConfig::default()).map_err(|e| config_err(e.to_string()))?;
        merge_tables(&mut base, s.parse::<toml::Table>()?);
        let c: RunConfig = base.try_into()?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| config_err(e.to_string()))
    }

    pub fn num_relevant(&self) -> usize {
        match &self.task.sectors {
            Some(s) => s.len(),
            None => self.task.num_semantics,
        }
    }

    pub fn skill_config(&self) -> SkillConfig {
        SkillConfig {
            z_dim: self.skill.z_dim,
            num_relevant: self.num_relevant(),
            normalize_head: self.skill.normalize_head,
            z_update_frequency: self.skill.z_update_frequency,
        }
    }

    /// Critic layout after applying the ablation switches.
    pub fn critic_mode(&self) -> CriticMode {
        if self.ablation.no_tqc {
            return CriticMode::Twin;
        }
        match self.agent.critic {
            CriticMode::Tqc { critics, atoms, .. } if self.ablation.no_truncation => {
                CriticMode::Tqc { critics, atoms, drop: 0 }
            }
            m => m,
        }
    }

    /// Whether any labels will ever be requested.
    pub fn feedback_enabled(&self) -> bool {
        !self.ablation.no_relevance && self.feedback.budget > 0
    }

    pub fn validate(&self) -> Result<()> {
        self.task.build()?;
        self.skill_config().validate()?;
        self.critic_mode().validate()?;
        let f = &self.feedback;
        if f.segment_len == 0 || f.segment_len > self.task.episode_len {
            return Err(config_err(format!(
                "segment length {} must lie in 1..={}",
                f.segment_len, self.task.episode_len
            )));
        }
        if f.queries_per_session == 0 || f.session_frequency == 0 || f.candidate_factor == 0 {
            return Err(config_err("session size, frequency and candidate factor must be positive"));
        }
        self.feedback.oracle(self.num_relevant()).validate()?;
        let t = &self.train;
        if t.update_every == 0 || t.log_every == 0 {
            return Err(config_err("update_every and log_every must be positive"));
        }
        if t.batch_size <= self.discriminator.knn_k {
            return Err(config_err(format!(
                "batch size {} must exceed the neighbour count {}",
                t.batch_size, self.discriminator.knn_k
            )));
        }
        if self.agent.policy_delay == 0 {
            return Err(config_err("policy delay must be positive"));
        }
        Ok(())
    }
}

fn merge_tables(base: &mut toml::Table, over: toml::Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge_tables(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}
