//! The pretraining loop: episodes into the replay buffer, label sessions at a
//! fixed cadence once feedback starts, then discriminator and actor-critic
//! updates on rewards recomputed from the current models.

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::agent::{Agent, ReplayBuffer, TransitionRecord};
use crate::contrastive::{apt_reward, ContrastiveBatch, Discriminator};
use crate::env::{self, TaskSet};
use crate::error::{Error, Result};
use crate::feedback::{
    active_sample, oracle_label, relevance_weight, FeedbackDataset, LabelSource, LabeledSegment, OracleConfig,
    ScoringEnsemble, Segment,
};
use crate::skill::{adaptive_semantic_choice, sample_skill, SemanticId, SkillConfig};

use super::config::RunConfig;

/// `r = r_exp + r_div + w * r_rel`.
pub fn combined_reward(r_exp: f64, r_div: f64, r_rel: f64, weight: f64) -> f64 {
    r_exp + r_div + weight * r_rel
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Query {
    pub query_id: u64,
    pub segment: Segment,
}

/// A batch of segments awaiting labels.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SessionRequest {
    pub session_id: u64,
    pub step: u64,
    pub queries: Vec<Query>,
    pub task: TaskSet,
    pub budget_used: usize,
    pub budget_total: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct QueryLabel {
    pub query_id: u64,
    pub label: SemanticId,
}

/// Anything that can label a session: the simulated oracle or a person
/// behind the HTTP gateway.
pub trait FeedbackSource {
    fn kind(&self) -> LabelSource;

    /// Labels for every query of `request`. A timeout leaves the request
    /// pending in the trainer so it can be retried.
    fn collect(&mut self, request: &SessionRequest, rng: &mut ChaCha8Rng) -> Result<Vec<QueryLabel>>;

    /// Called once the labels have been added to the dataset.
    fn ingested(&mut self, _dataset_len: usize) {}
}

#[derive(Clone, Debug)]
pub struct SimulatedOracle {
    pub config: OracleConfig,
}

impl FeedbackSource for SimulatedOracle {
    fn kind(&self) -> LabelSource {
        LabelSource::Simulated
    }

    fn collect(&mut self, request: &SessionRequest, rng: &mut ChaCha8Rng) -> Result<Vec<QueryLabel>> {
        request
            .queries
            .iter()
            .map(|q| {
                Ok(QueryLabel { query_id: q.query_id, label: oracle_label(&q.segment, &request.task, &self.config, rng)? })
            })
            .collect()
    }
}

/// Source for runs that never query; any call is a bug in the caller.
pub struct NoFeedback;

impl FeedbackSource for NoFeedback {
    fn kind(&self) -> LabelSource {
        LabelSource::Simulated
    }

    fn collect(&mut self, request: &SessionRequest, _rng: &mut ChaCha8Rng) -> Result<Vec<QueryLabel>> {
        Err(Error::Feedback(format!("session {} requested from a run without feedback", request.session_id)))
    }
}

/// JSON has no NaN; "not measured yet" round-trips through `null`.
mod nan_as_null {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_nan() {
            s.serialize_none()
        } else {
            s.serialize_some(v)
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        Ok(Option::<f64>::deserialize(d)?.unwrap_or(f64::NAN))
    }
}

/// One line of the metric history; reward terms are means over the updates
/// since the previous line.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub step: u64,
    pub episodes: u64,
    pub updates: u64,
    #[serde(with = "nan_as_null")]
    pub r_exp: f64,
    #[serde(with = "nan_as_null")]
    pub r_div: f64,
    #[serde(with = "nan_as_null")]
    pub r_rel: f64,
    #[serde(with = "nan_as_null")]
    pub weight: f64,
    #[serde(with = "nan_as_null")]
    pub reward: f64,
    #[serde(with = "nan_as_null")]
    pub critic_loss: f64,
    #[serde(with = "nan_as_null")]
    pub actor_loss: f64,
    #[serde(with = "nan_as_null")]
    pub nce_loss: f64,
    pub labels: usize,
    #[serde(with = "nan_as_null")]
    pub predictor_loss: f64,
}

impl MetricRow {
    /// Bitwise comparison, so that two NaN fields still compare equal.
    pub fn bits_eq(&self, other: &MetricRow) -> bool {
        let f = |r: &MetricRow| {
            [r.r_exp, r.r_div, r.r_rel, r.weight, r.reward, r.critic_loss, r.actor_loss, r.nce_loss, r.predictor_loss]
                .map(f64::to_bits)
        };
        self.step == other.step
            && self.episodes == other.episodes
            && self.updates == other.updates
            && self.labels == other.labels
            && f(self) == f(other)
    }
}

pub fn write_history_csv<W: std::io::Write>(rows: &[MetricRow], w: W) -> Result<()> {
    let mut wr = csv::Writer::from_writer(w);
    for r in rows {
        wr.serialize(r).map_err(|e| Error::Io(std::io::Error::other(e)))?;
    }
    wr.flush()?;
    Ok(())
}

pub fn read_history_csv<R: std::io::Read>(r: R) -> Result<Vec<MetricRow>> {
    let mut rd = csv::Reader::from_reader(r);
    rd.deserialize()
        .map(|row| row.map_err(|e| Error::Io(std::io::Error::other(e))))
        .collect()
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
struct Accumulator {
    updates: u64,
    actor_updates: u64,
    r_exp: f64,
    r_div: f64,
    r_rel: f64,
    weight: f64,
    reward: f64,
    critic_loss: f64,
    actor_loss: f64,
    nce_loss: f64,
}

/// Reward terms for one sampled batch.
#[derive(Clone, Debug, PartialEq)]
pub struct RewardParts {
    pub exploration: Vec<f64>,
    pub diversity: Vec<f64>,
    pub relevance: Vec<f64>,
    pub weight: f64,
    pub total: Vec<f64>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Trainer {
    pub config: RunConfig,
    pub task: TaskSet,
    pub skill_config: SkillConfig,
    pub discriminator: Discriminator,
    pub ensemble: ScoringEnsemble,
    pub agent: Agent,
    #[serde(skip, default = "placeholder_buffer")]
    pub buffer: ReplayBuffer,
    pub dataset: FeedbackDataset,
    pub history: Vec<MetricRow>,
    step: u64,
    episode: u64,
    total_updates: u64,
    update_credit: usize,
    next_session_step: u64,
    next_query_id: u64,
    sessions: u64,
    pending_session: Option<SessionRequest>,
    #[serde(with = "nan_as_null")]
    last_predictor_loss: f64,
    next_log: u64,
    acc: Accumulator,
    rng_env: ChaCha8Rng,
    rng_update: ChaCha8Rng,
    rng_feedback: ChaCha8Rng,
}

fn placeholder_buffer() -> ReplayBuffer {
    ReplayBuffer::new(1).expect("non-zero capacity")
}

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(id);
    r
}

impl Trainer {
    pub fn new(config: RunConfig) -> Result<Self> {
        config.validate()?;
        let task = config.task.build()?;
        let skill_config = config.skill_config();
        let mut init = stream(config.seed, 0);
        let discriminator =
            Discriminator::new(crate::agent::STATE_DIM, skill_config.z_dim, &config.discriminator, &mut init)?;
        let ensemble = ScoringEnsemble::new(skill_config.num_relevant + 1, &config.feedback.ensemble, &mut init)?;
        let mut agent_cfg = config.agent;
        agent_cfg.critic = config.critic_mode();
        let agent = Agent::new(skill_config.z_dim, task.action_bound, agent_cfg, &mut init)?;
        let buffer = ReplayBuffer::new(config.train.replay_capacity)?;
        Ok(Trainer {
            dataset: FeedbackDataset::new(config.feedback.budget),
            rng_env: stream(config.seed, 1),
            rng_update: stream(config.seed, 2),
            rng_feedback: stream(config.seed, 3),
            next_log: config.train.log_every,
            config,
            task,
            skill_config,
            discriminator,
            ensemble,
            agent,
            buffer,
            history: Vec::new(),
            step: 0,
            episode: 0,
            total_updates: 0,
            update_credit: 0,
            next_session_step: 0,
            next_query_id: 0,
            sessions: 0,
            pending_session: None,
            last_predictor_loss: f64::NAN,
            acc: Accumulator::default(),
        })
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn episodes(&self) -> u64 {
        self.episode
    }

    pub fn sessions(&self) -> u64 {
        self.sessions
    }

    pub fn total_updates(&self) -> u64 {
        self.total_updates
    }

    pub fn pending_session(&self) -> Option<&SessionRequest> {
        self.pending_session.as_ref()
    }

    pub fn num_relevant(&self) -> usize {
        self.skill_config.num_relevant
    }

    /// The simulated oracle configured for this run.
    pub fn simulated_oracle(&self) -> SimulatedOracle {
        SimulatedOracle { config: self.config.feedback.oracle(self.num_relevant()) }
    }

    /// `w_t` at the current step; zero until the predictor has been trained.
    pub fn current_weight(&self) -> Result<f64> {
        if !self.config.feedback_enabled() || self.ensemble.trained_rounds == 0 {
            return Ok(0.0);
        }
        relevance_weight(self.step, self.config.feedback.start_feedback, self.dataset.len(), self.dataset.budget())
    }

    /// Runs until `total_steps`.
    pub fn train(&mut self, source: &mut dyn FeedbackSource) -> Result<()> {
        self.run_until(self.config.train.total_steps, source)
    }

    /// Runs whole episodes until at least `until` environment steps have been
    /// taken. A feedback timeout returns early with the session kept pending.
    pub fn run_until(&mut self, until: u64, source: &mut dyn FeedbackSource) -> Result<()> {
        while self.step < until {
            self.maybe_query(source)?;
            self.run_episode()?;
            if self.step >= self.config.train.learning_starts {
                self.update_credit += self.task.episode_len;
                while self.update_credit >= self.config.train.update_every {
                    self.update_credit -= self.config.train.update_every;
                    self.update_once()?;
                }
            }
            if self.step >= self.next_log {
                self.log_row();
                while self.next_log <= self.step {
                    self.next_log += self.config.train.log_every;
                }
            }
        }
        Ok(())
    }

    fn choose_semantic(&mut self) -> SemanticId {
        let n = self.num_relevant();
        if self.config.skill.adaptive_choice && self.config.feedback_enabled() {
            adaptive_semantic_choice(&self.dataset.relevant_counts(n), &mut self.rng_env)
        } else {
            SemanticId(self.rng_env.random_range(1..=n))
        }
    }

    fn run_episode(&mut self) -> Result<()> {
        let seed: u64 = self.rng_env.random();
        let mut state = env::reset(&self.task, seed);
        let bound = self.task.action_bound;
        let mut skill_id = 0;
        for t in 0..self.task.episode_len {
            if t % self.skill_config.z_update_frequency == 0 {
                let c = self.choose_semantic();
                let z = sample_skill(c, &mut self.rng_env, &self.skill_config)?;
                skill_id = self.buffer.register_skill(z.to_vec(), c);
            }
            let action = if self.step < self.config.train.learning_starts {
                [self.rng_env.random_range(-bound..=bound), self.rng_env.random_range(-bound..=bound)]
            } else {
                let z = self.buffer.skill(skill_id).to_vec();
                self.agent.act(state.pos, &z, self.config.agent.exploration_noise, &mut self.rng_env)?
            };
            let (next, done) = env::step(&state, action, &self.task);
            self.buffer.push(TransitionRecord {
                state: state.pos,
                action: self.task.clip_action(action),
                next_state: next.pos,
                skill_id,
                episode: self.episode,
                step: t,
                done,
            })?;
            state = next;
            self.step += 1;
        }
        self.episode += 1;
        Ok(())
    }

    fn maybe_query(&mut self, source: &mut dyn FeedbackSource) -> Result<()> {
        if self.pending_session.is_none() {
            let f = &self.config.feedback;
            if !self.config.feedback_enabled()
                || self.step <= f.start_feedback
                || self.step < self.next_session_step
                || self.dataset.remaining() == 0
            {
                return Ok(());
            }
            let req = self.build_session()?;
            if req.queries.is_empty() {
                // Nothing the predictor considers relevant; try next cadence.
                self.next_session_step = self.step + self.config.feedback.session_frequency;
                return Ok(());
            }
            self.pending_session = Some(req);
        }
        let req = self.pending_session.clone().expect("pending session");
        let labels = source.collect(&req, &mut self.rng_feedback)?;
        self.ingest(&req, &labels, source.kind())?;
        source.ingested(self.dataset.len());
        self.pending_session = None;
        self.sessions += 1;
        self.next_session_step = self.step + self.config.feedback.session_frequency;
        Ok(())
    }

    /// Draws candidate segments and picks the session's queries from them.
    fn build_session(&mut self) -> Result<SessionRequest> {
        let f = &self.config.feedback;
        let n = f.queries_per_session.min(self.dataset.remaining());
        let candidates = self.buffer.sample_segments(f.candidate_factor * n, f.segment_len, &mut self.rng_feedback);
        let chosen: Vec<usize> = if f.active_sampling && self.ensemble.trained_rounds > 0 {
            active_sample(&candidates, &self.ensemble, n)?
        } else {
            (0..n.min(candidates.len())).collect()
        };
        let queries = chosen
            .into_iter()
            .map(|i| {
                let q = Query { query_id: self.next_query_id, segment: candidates[i].clone() };
                self.next_query_id += 1;
                q
            })
            .collect();
        Ok(SessionRequest {
            session_id: self.sessions,
            step: self.step,
            queries,
            task: self.task.clone(),
            budget_used: self.dataset.len(),
            budget_total: self.dataset.budget(),
        })
    }

    /// Adds a complete set of labels for `req` and retrains the predictor on
    /// every label it has an output for.
    pub fn ingest(&mut self, req: &SessionRequest, labels: &[QueryLabel], source: LabelSource) -> Result<()> {
        let mut by_id: HashMap<u64, SemanticId> = HashMap::with_capacity(labels.len());
        for l in labels {
            if by_id.insert(l.query_id, l.label).is_some() {
                return Err(Error::Feedback(format!("query {} labelled twice", l.query_id)));
            }
        }
        if by_id.len() != req.queries.len() {
            let missing: Vec<u64> =
                req.queries.iter().map(|q| q.query_id).filter(|id| !by_id.contains_key(id)).collect();
            return Err(Error::Feedback(format!("labels missing for queries {missing:?}")));
        }
        let items = req
            .queries
            .iter()
            .map(|q| {
                let label = *by_id
                    .get(&q.query_id)
                    .ok_or_else(|| Error::Feedback(format!("label missing for query {}", q.query_id)))?;
                Ok(LabeledSegment { segment: q.segment.clone(), label, source, query_id: q.query_id })
            })
            .collect::<Result<Vec<_>>>()?;
        self.dataset.extend(items)?;
        let known = self.ensemble.num_classes();
        let trainable: Vec<LabeledSegment> =
            self.dataset.items().iter().filter(|it| it.label.0 < known).cloned().collect();
        if !trainable.is_empty() {
            let f = &self.config.feedback;
            self.last_predictor_loss = self.ensemble.train_predictor(
                &trainable,
                f.predictor_epochs,
                f.predictor_batch,
                &mut self.rng_feedback,
            )?;
        }
        Ok(())
    }

    /// Reward terms for a batch under the current models.
    pub fn batch_rewards(&self, batch: &crate::agent::Batch) -> Result<RewardParts> {
        let n = batch.len();
        let ab = self.config.ablation;
        let emb = self.discriminator.embed_pairs(batch.state_pairs().view())?;
        let exploration =
            if ab.no_exploration { vec![0.0; n] } else { apt_reward(emb.view(), self.config.discriminator.knn_k)? };
        let diversity = if ab.no_diversity {
            vec![0.0; n]
        } else {
            let zemb = self.discriminator.embed_skills(batch.skills.view())?;
            self.discriminator.row_scores(&emb, &zemb)
        };
        let weight = self.current_weight()?;
        let relevance = if weight > 0.0 {
            self.ensemble.relevance_rewards(batch.state_actions().view(), &batch.semantics)?
        } else {
            vec![0.0; n]
        };
        let total = (0..n).map(|i| combined_reward(exploration[i], diversity[i], relevance[i], weight)).collect();
        Ok(RewardParts { exploration, diversity, relevance, weight, total })
    }

    fn update_once(&mut self) -> Result<()> {
        let batch = self.buffer.sample(self.config.train.batch_size, &mut self.rng_update)?;
        let parts = self.batch_rewards(&batch)?;
        let distinct = batch.distinct_skills();
        let nce = if distinct.len() >= 2 {
            let cb = ContrastiveBatch::new(distinct.state_pairs(), distinct.skills.clone())?;
            self.discriminator.nce_update(&cb)?
        } else {
            f64::NAN
        };
        let stats = self.agent.update(&batch, &parts.total, &mut self.rng_update)?;
        self.total_updates += 1;

        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        let a = &mut self.acc;
        a.updates += 1;
        a.r_exp += mean(&parts.exploration);
        a.r_div += mean(&parts.diversity);
        a.r_rel += mean(&parts.relevance);
        a.weight += parts.weight;
        a.reward += mean(&parts.total);
        a.critic_loss += stats.critic_loss;
        a.nce_loss += nce;
        if let Some(l) = stats.actor_loss {
            a.actor_updates += 1;
            a.actor_loss += l;
        }
        Ok(())
    }

    fn log_row(&mut self) {
        let a = std::mem::take(&mut self.acc);
        let per = |v: f64, n: u64| if n == 0 { f64::NAN } else { v / n as f64 };
        let row = MetricRow {
            step: self.step,
            episodes: self.episode,
            updates: self.total_updates,
            r_exp: per(a.r_exp, a.updates),
            r_div: per(a.r_div, a.updates),
            r_rel: per(a.r_rel, a.updates),
            weight: per(a.weight, a.updates),
            reward: per(a.reward, a.updates),
            critic_loss: per(a.critic_loss, a.updates),
            actor_loss: per(a.actor_loss, a.actor_updates),
            nce_loss: per(a.nce_loss, a.updates),
            labels: self.dataset.len(),
            predictor_loss: self.last_predictor_loss,
        };
        log::info!(
            "step {} r_exp {:.3} r_div {:.3} r_rel {:.3} w {:.2} critic {:.4} labels {}",
            row.step,
            row.r_exp,
            row.r_div,
            row.r_rel,
            row.weight,
            row.critic_loss,
            row.labels
        );
        self.history.push(row);
    }

    pub(crate) fn restore_buffer(&mut self, buffer: ReplayBuffer) {
        self.buffer = buffer;
    }
}
