//! Downstream evaluation of a pretrained skill set against the ground-truth
//! sector rewards: sampled skills as-is, the best of a small pool, and the
//! best skill fine-tuned on the sector reward.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::agent::{Agent, CriticMode, ReplayBuffer, TransitionRecord};
use crate::env::{self, sector_reward, Position, TaskSet};
use crate::error::{config_err, Error, Result};
use crate::metrics::{coverage_metrics, CoverageReport, HitCriterion};
use crate::skill::{one_hot_tail, sample_head, SemanticId, SkillConfig, SkillLatent};

use super::trainer::Trainer;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalMode {
    ZeroShot,
    FewShot,
    Finetune,
}

impl std::str::FromStr for EvalMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "zero_shot" | "zero-shot" => Ok(EvalMode::ZeroShot),
            "few_shot" | "few-shot" => Ok(EvalMode::FewShot),
            "finetune" | "fine-tune" => Ok(EvalMode::Finetune),
            other => Err(config_err(format!("unknown evaluation mode {other:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FinetuneConfig {
    /// Target atoms dropped per critic while fine-tuning.
    pub drop: usize,
    /// Steps of critic-only training before the actor starts moving.
    pub warmup_steps: u64,
    pub batch_size: usize,
    pub update_every: usize,
    pub exploration_noise: f64,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        FinetuneConfig { drop: 5, warmup_steps: 2_000, batch_size: 128, update_every: 2, exploration_noise: 0.2 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    /// Total environment steps available to few-shot search plus fine-tuning.
    pub budget_steps: u64,
    /// Share of the budget few-shot search may spend.
    pub search_fraction: f64,
    /// Upper bound on heads tried per semantic.
    pub pool_size: usize,
    /// Skills rolled out for the coverage report.
    pub coverage_skills: usize,
    pub hit: HitCriterion,
    /// Semantic whose sector defines the fine-tuning reward.
    pub finetune_target: usize,
    pub finetune: FinetuneConfig,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            budget_steps: 50_000,
            search_fraction: 0.04,
            pool_size: 16,
            coverage_skills: 200,
            hit: HitCriterion::Any,
            finetune_target: 1,
            finetune: FinetuneConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SkillScore {
    pub semantic: SemanticId,
    pub head: Vec<f64>,
    /// Episode return under the semantic's sector reward.
    pub score: f64,
}

impl SkillScore {
    pub fn latent(&self, num_relevant: usize) -> Result<SkillLatent> {
        Ok(SkillLatent { head: self.head.clone(), tail: one_hot_tail(self.semantic, num_relevant)? })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FinetuneResult {
    pub semantic: SemanticId,
    pub start_score: f64,
    pub final_score: f64,
    /// `(steps, score)` after every fine-tuning episode block.
    pub curve: Vec<(u64, f64)>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub mode: EvalMode,
    pub zero_shot: Vec<SkillScore>,
    pub few_shot: Option<Vec<SkillScore>>,
    pub finetune: Option<FinetuneResult>,
    pub search_steps: u64,
}

impl EvalReport {
    pub fn mean(scores: &[SkillScore]) -> f64 {
        scores.iter().map(|s| s.score).sum::<f64>() / scores.len() as f64
    }
}

/// States `s_1 .. s_T` visited by one episode of the skill.
pub fn rollout<R: Rng + ?Sized>(
    agent: &Agent,
    task: &TaskSet,
    z: &[f64],
    reset_seed: u64,
    noise: f64,
    rng: &mut R,
) -> Result<Vec<Position>> {
    let mut state = env::reset(task, reset_seed);
    let mut out = Vec::with_capacity(task.episode_len);
    loop {
        let a = agent.act(state.pos, z, noise, rng)?;
        let (next, done) = env::step(&state, a, task);
        out.push(next.pos);
        state = next;
        if done {
            return Ok(out);
        }
    }
}

pub fn extrinsic_return(states: &[Position], task: &TaskSet, semantic: SemanticId) -> Result<f64> {
    let sector = task
        .sector(semantic.0)
        .ok_or_else(|| config_err(format!("semantic {semantic} has no sector in this task")))?;
    Ok(states.iter().map(|&p| sector_reward(p, sector, task.radius)).sum())
}

fn score_skill(agent: &Agent, task: &TaskSet, semantic: SemanticId, head: Vec<f64>, rng: &mut ChaCha8Rng) -> Result<SkillScore> {
    let z = SkillLatent { head, tail: one_hot_tail(semantic, task.num_semantics())? };
    let states = rollout(agent, task, &z.to_vec(), 0, 0.0, rng)?;
    Ok(SkillScore { semantic, score: extrinsic_return(&states, task, semantic)?, head: z.head })
}

fn check_task(agent: &Agent, task: &TaskSet, skill: &SkillConfig) -> Result<()> {
    if task.num_semantics() != skill.num_relevant || agent.z_dim != skill.z_dim {
        return Err(config_err(format!(
            "task has {} semantics but the skills were trained for {}",
            task.num_semantics(),
            skill.num_relevant
        )));
    }
    Ok(())
}

/// One freshly sampled head per relevant semantic.
pub fn zero_shot(agent: &Agent, task: &TaskSet, skill: &SkillConfig, rng: &mut ChaCha8Rng) -> Result<Vec<SkillScore>> {
    check_task(agent, task, skill)?;
    (1..=skill.num_relevant)
        .map(|c| {
            let head = sample_head(skill, rng);
            score_skill(agent, task, SemanticId(c), head, rng)
        })
        .collect()
}

/// Heads tried per semantic so that search stays within its share of the budget.
pub fn pool_per_semantic(cfg: &EvalConfig, task: &TaskSet) -> usize {
    let allowed = (cfg.search_fraction * cfg.budget_steps as f64) as usize / (task.episode_len * task.num_semantics());
    allowed.clamp(1, cfg.pool_size.max(1))
}

/// Best of a pool per semantic; the pool starts with the zero-shot head so
/// the result can never be worse than `zero`.
pub fn few_shot(
    agent: &Agent,
    task: &TaskSet,
    skill: &SkillConfig,
    zero: &[SkillScore],
    cfg: &EvalConfig,
    rng: &mut ChaCha8Rng,
) -> Result<(Vec<SkillScore>, u64)> {
    check_task(agent, task, skill)?;
    let pool = pool_per_semantic(cfg, task);
    let mut steps = 0;
    let best = zero
        .iter()
        .map(|z0| {
            let mut best = z0.clone();
            steps += task.episode_len as u64;
            for _ in 1..pool {
                let cand = score_skill(agent, task, z0.semantic, sample_head(skill, rng), rng)?;
                steps += task.episode_len as u64;
                if cand.score > best.score {
                    best = cand;
                }
            }
            Ok(best)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((best, steps))
}

/// Continues actor-critic training of one skill on its sector reward with
/// fresh critics, for `steps` environment steps.
pub fn finetune(
    agent: &Agent,
    task: &TaskSet,
    skill: &SkillScore,
    steps: u64,
    cfg: &FinetuneConfig,
    rng: &mut ChaCha8Rng,
) -> Result<(Agent, FinetuneResult)> {
    let mut agent = agent.clone();
    let mode = match agent.config.critic {
        CriticMode::Tqc { critics, atoms, .. } => CriticMode::Tqc { critics, atoms, drop: cfg.drop },
        CriticMode::Twin => CriticMode::Twin,
    };
    agent.reset_critics(mode, rng)?;
    let z = skill.latent(task.num_semantics())?.to_vec();
    let sector = *task
        .sector(skill.semantic.0)
        .ok_or_else(|| config_err(format!("semantic {} has no sector", skill.semantic)))?;
    let mut buffer = ReplayBuffer::new(steps.max(1) as usize)?;
    let sid = buffer.register_skill(z.clone(), skill.semantic);

    let evaluate = |a: &Agent, rng: &mut ChaCha8Rng| -> Result<f64> {
        extrinsic_return(&rollout(a, task, &z, 0, 0.0, rng)?, task, skill.semantic)
    };
    let start_score = evaluate(&agent, rng)?;
    let mut curve = vec![(0, start_score)];
    let mut taken = 0u64;
    let mut episode = 0u64;
    let mut credit = 0usize;
    while taken < steps {
        let mut state = env::reset(task, rng.random());
        for t in 0..task.episode_len {
            let a = agent.act(state.pos, &z, cfg.exploration_noise, rng)?;
            let (next, done) = env::step(&state, a, task);
            buffer.push(TransitionRecord {
                state: state.pos,
                action: a,
                next_state: next.pos,
                skill_id: sid,
                episode,
                step: t,
                done,
            })?;
            state = next;
        }
        episode += 1;
        taken += task.episode_len as u64;
        credit += task.episode_len;
        while credit >= cfg.update_every {
            credit -= cfg.update_every;
            let batch = buffer.sample(cfg.batch_size, rng)?;
            let rewards: Vec<f64> = batch
                .next_states
                .rows()
                .into_iter()
                .map(|r| sector_reward([r[0], r[1]], &sector, task.radius))
                .collect();
            agent.update_with(&batch, &rewards, taken > cfg.warmup_steps, rng)?;
        }
        if episode.is_multiple_of(10) || taken >= steps {
            curve.push((taken, evaluate(&agent, rng)?));
        }
    }
    let final_score = curve.last().map_or(start_score, |c| c.1);
    Ok((agent, FinetuneResult { semantic: skill.semantic, start_score, final_score, curve }))
}

/// Rolls out `n` skills with uniformly drawn semantics and reports coverage.
pub fn coverage(
    agent: &Agent,
    task: &TaskSet,
    skill: &SkillConfig,
    n: usize,
    hit: HitCriterion,
    rng: &mut ChaCha8Rng,
) -> Result<CoverageReport> {
    check_task(agent, task, skill)?;
    let rollouts = (0..n)
        .map(|i| {
            // Cycle through semantics so every class gets the same share.
            let c = SemanticId(i % skill.num_relevant + 1);
            let z = SkillLatent { head: sample_head(skill, rng), tail: one_hot_tail(c, skill.num_relevant)? };
            Ok((c, rollout(agent, task, &z.to_vec(), 0, 0.0, rng)?))
        })
        .collect::<Result<Vec<_>>>()?;
    coverage_metrics(&rollouts, task, hit)
}

/// Runs the requested protocol on a trained checkpoint.
pub fn evaluate(trainer: &Trainer, mode: EvalMode, task: &TaskSet, cfg: &EvalConfig, rng: &mut ChaCha8Rng) -> Result<EvalReport> {
    let agent = &trainer.agent;
    let skill = &trainer.skill_config;
    let zero = zero_shot(agent, task, skill, rng)?;
    if mode == EvalMode::ZeroShot {
        return Ok(EvalReport { mode, zero_shot: zero, few_shot: None, finetune: None, search_steps: 0 });
    }
    let (few, search_steps) = few_shot(agent, task, skill, &zero, cfg, rng)?;
    if mode == EvalMode::FewShot {
        return Ok(EvalReport { mode, zero_shot: zero, few_shot: Some(few), finetune: None, search_steps });
    }
    let target = few
        .iter()
        .find(|s| s.semantic.0 == cfg.finetune_target)
        .ok_or_else(|| config_err(format!("fine-tune target {} is not a semantic of the task", cfg.finetune_target)))?
        .clone();
    let remaining = cfg.budget_steps.saturating_sub(search_steps);
    let (_, ft) = finetune(agent, task, &target, remaining, &cfg.finetune, rng)?;
    Ok(EvalReport { mode, zero_shot: zero, few_shot: Some(few), finetune: Some(ft), search_steps })
}
