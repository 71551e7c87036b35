//! Skill-conditioned TD3 with truncated quantile critics, plus the replay
//! buffer it learns from.

use std::io::{Read, Write};

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use ndarray::{concatenate, s, Array1, Array2, ArrayView2, Axis};
use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::env::{Action, Position};
use crate::error::{config_err, Error, Result};
use crate::feedback::Segment;
use crate::nn::{Activation, Adam, AdamConfig, Mlp, OutputActivation};
use crate::skill::SemanticId;

pub const STATE_DIM: usize = 2;
pub const ACTION_DIM: usize = 2;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum CriticMode {
    /// `critics` networks of `atoms` quantiles each; the `drop * critics`
    /// largest pooled target atoms are discarded.
    Tqc { critics: usize, atoms: usize, drop: usize },
    /// Plain TD3: two scalar critics, target is their minimum.
    Twin,
}

impl CriticMode {
    pub fn critics(&self) -> usize {
        match *self {
            CriticMode::Tqc { critics, .. } => critics,
            CriticMode::Twin => 2,
        }
    }

    pub fn atoms(&self) -> usize {
        match *self {
            CriticMode::Tqc { atoms, .. } => atoms,
            CriticMode::Twin => 1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if let CriticMode::Tqc { critics, atoms, drop } = *self {
            if critics == 0 || atoms == 0 {
                return Err(config_err("critic bank needs at least one critic and one atom"));
            }
            if drop >= atoms {
                return Err(config_err(format!(
                    "dropping {drop} of {atoms} atoms per critic leaves no target"
                )));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AgentConfig {
    pub hidden: usize,
    pub actor_lr: f64,
    pub critic_lr: f64,
    pub gamma: f64,
    /// Target networks keep this fraction of themselves on each soft update.
    pub target_smoothing: f64,
    pub policy_delay: u64,
    /// Gaussian noise scales, as fractions of the action bound.
    pub exploration_noise: f64,
    pub policy_noise: f64,
    pub noise_clip: f64,
    pub critic: CriticMode,
    pub huber_kappa: f64,
}

impl Default for AgentConfig {
    fn default() -> Self {
        AgentConfig {
            hidden: 256,
            actor_lr: 1e-4,
            critic_lr: 1e-4,
            gamma: 0.99,
            target_smoothing: 0.995,
            policy_delay: 2,
            exploration_noise: 0.2,
            policy_noise: 0.2,
            noise_clip: 0.5,
            critic: CriticMode::Tqc { critics: 3, atoms: 25, drop: 2 },
            huber_kappa: 1.0,
        }
    }
}

/// Sorts each row of pooled atoms, keeps the smallest `keep`, and maps them
/// through `r + gamma * atom`.
pub fn truncated_targets(pooled: ArrayView2<f64>, keep: usize, rewards: &[f64], gamma: f64) -> Array2<f64> {
    let n = pooled.nrows();
    let mut out = Array2::zeros((n, keep));
    let mut buf = Vec::with_capacity(pooled.ncols());
    for i in 0..n {
        buf.clear();
        buf.extend(pooled.row(i).iter().copied());
        buf.sort_by(f64::total_cmp);
        for (j, &v) in buf[..keep].iter().enumerate() {
            out[[i, j]] = rewards[i] + gamma * v;
        }
    }
    out
}

/// Quantile fractions `(2m - 1) / (2M)` for `m = 1..=M`.
pub fn quantile_midpoints(atoms: usize) -> Vec<f64> {
    (0..atoms).map(|m| (2 * m + 1) as f64 / (2 * atoms) as f64).collect()
}

pub fn huber(u: f64, kappa: f64) -> f64 {
    if u.abs() <= kappa {
        0.5 * u * u
    } else {
        kappa * (u.abs() - 0.5 * kappa)
    }
}

fn huber_grad(u: f64, kappa: f64) -> f64 {
    if u.abs() <= kappa {
        u
    } else {
        kappa * u.signum()
    }
}

/// Quantile Huber regression of `atoms` (n x M) onto every target in
/// `targets` (n x T), averaged over samples, atoms and targets. Returns the
/// loss and its gradient with respect to `atoms`.
pub fn quantile_huber_loss(atoms: ArrayView2<f64>, targets: ArrayView2<f64>, kappa: f64) -> (f64, Array2<f64>) {
    let (n, m) = atoms.dim();
    let t = targets.ncols();
    let taus = quantile_midpoints(m);
    let norm = 1.0 / (n * m * t) as f64;
    let targets = targets.as_standard_layout();
    let mut loss = 0.0;
    let mut grad = Array2::zeros((n, m));
    for i in 0..n {
        let ys = targets.row(i);
        let ys = ys.as_slice().expect("standard layout");
        for (k, &tau) in taus.iter().enumerate() {
            let theta = atoms[[i, k]];
            let mut g = 0.0;
            for &y in ys {
                let u = y - theta;
                let w = if u < 0.0 { 1.0 - tau } else { tau };
                loss += w * huber(u, kappa);
                g -= w * huber_grad(u, kappa);
            }
            grad[[i, k]] = g * norm;
        }
    }
    (loss * norm, grad)
}

fn gaussian_matrix<R: Rng + ?Sized>(rows: usize, cols: usize, std: f64, rng: &mut R) -> Array2<f64> {
    Array2::from_shape_simple_fn((rows, cols), || {
        let v: f64 = StandardNormal.sample(rng);
        v * std
    })
}

fn hstack(parts: &[ArrayView2<f64>]) -> Result<Array2<f64>> {
    concatenate(Axis(1), parts).map_err(|e| Error::Shape(e.to_string()))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuantileCriticBank {
    pub mode: CriticMode,
    pub critics: Vec<Mlp>,
    pub targets: Vec<Mlp>,
    opts: Vec<Adam>,
}

impl QuantileCriticBank {
    pub fn new<R: Rng + ?Sized>(
        input_dim: usize,
        hidden: usize,
        mode: CriticMode,
        lr: f64,
        rng: &mut R,
    ) -> Result<Self> {
        mode.validate()?;
        let critics = (0..mode.critics())
            .map(|_| {
                Mlp::new(&[input_dim, hidden, hidden, mode.atoms()], Activation::Relu, OutputActivation::Identity, rng)
            })
            .collect::<Result<Vec<_>>>()?;
        Self::from_critics(critics, mode, AdamConfig::with_lr(lr))
    }

    pub fn from_critics(critics: Vec<Mlp>, mode: CriticMode, adam: AdamConfig) -> Result<Self> {
        mode.validate()?;
        if critics.len() != mode.critics() || critics.iter().any(|c| c.output_dim() != mode.atoms()) {
            return Err(config_err(format!(
                "critic bank expects {} critics with {} atoms",
                mode.critics(),
                mode.atoms()
            )));
        }
        let opts = critics.iter().map(|c| Adam::new(c, adam)).collect();
        Ok(QuantileCriticBank { mode, targets: critics.clone(), critics, opts })
    }

    /// Target atoms kept per sample after truncation.
    pub fn kept_atoms(&self) -> usize {
        match self.mode {
            CriticMode::Tqc { critics, atoms, drop } => critics * (atoms - drop),
            CriticMode::Twin => 1,
        }
    }

    /// Pooled target atoms `(n, K*M)` at the given critic inputs.
    pub fn pooled_target_atoms(&self, x: ArrayView2<f64>) -> Result<Array2<f64>> {
        let outs = self.targets.iter().map(|t| t.forward_batch(x)).collect::<Result<Vec<_>>>()?;
        let views: Vec<_> = outs.iter().map(|o| o.view()).collect();
        hstack(&views)
    }

    /// Bootstrap targets from pooled atoms already evaluated at `(s', z, a')`.
    pub fn targets_from_pooled(&self, pooled: ArrayView2<f64>, rewards: &[f64], gamma: f64) -> Array2<f64> {
        match self.mode {
            CriticMode::Tqc { .. } => truncated_targets(pooled, self.kept_atoms(), rewards, gamma),
            CriticMode::Twin => {
                let mut out = Array2::zeros((pooled.nrows(), 1));
                for (i, row) in pooled.rows().into_iter().enumerate() {
                    let m = row.iter().copied().fold(f64::INFINITY, f64::min);
                    out[[i, 0]] = rewards[i] + gamma * m;
                }
                out
            }
        }
    }

    /// One gradient step of every critic toward `targets`; returns the mean loss.
    pub fn update(&mut self, x: ArrayView2<f64>, targets: ArrayView2<f64>, kappa: f64) -> Result<f64> {
        let mut total = 0.0;
        for (critic, opt) in self.critics.iter_mut().zip(self.opts.iter_mut()) {
            let cache = critic.forward_cached(x)?;
            let (loss, d_atoms) = quantile_huber_loss(cache.output().view(), targets, kappa);
            let (grads, _) = critic.backward(&cache, d_atoms.view())?;
            opt.step(critic, &grads)?;
            total += loss;
        }
        Ok(total / self.critics.len() as f64)
    }

    pub fn soft_update(&mut self, keep: f64) {
        for (t, c) in self.targets.iter_mut().zip(&self.critics) {
            t.soft_update_from(c, keep);
        }
    }
}

/// Transitions sampled from the buffer, row-aligned.
#[derive(Clone, Debug)]
pub struct Batch {
    pub states: Array2<f64>,
    pub actions: Array2<f64>,
    pub next_states: Array2<f64>,
    pub skills: Array2<f64>,
    pub skill_ids: Vec<usize>,
    pub semantics: Vec<SemanticId>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.states.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.states.nrows() == 0
    }

    /// Rows `[s, s']` for the discriminator.
    pub fn state_pairs(&self) -> Array2<f64> {
        hstack(&[self.states.view(), self.next_states.view()]).expect("aligned batch")
    }

    /// Rows `[s, a]` for the semantic scorer.
    pub fn state_actions(&self) -> Array2<f64> {
        hstack(&[self.states.view(), self.actions.view()]).expect("aligned batch")
    }

    /// Keeps the first row for every skill so the skills are pairwise distinct.
    pub fn distinct_skills(&self) -> Batch {
        let mut seen = std::collections::HashSet::new();
        let rows: Vec<usize> = (0..self.len()).filter(|&i| seen.insert(self.skill_ids[i])).collect();
        Batch {
            states: self.states.select(Axis(0), &rows),
            actions: self.actions.select(Axis(0), &rows),
            next_states: self.next_states.select(Axis(0), &rows),
            skills: self.skills.select(Axis(0), &rows),
            skill_ids: rows.iter().map(|&i| self.skill_ids[i]).collect(),
            semantics: rows.iter().map(|&i| self.semantics[i]).collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransitionRecord {
    pub state: Position,
    pub action: Action,
    pub next_state: Position,
    pub skill_id: usize,
    pub episode: u64,
    /// Index of this step within its episode.
    pub step: usize,
    pub done: bool,
}

/// FIFO ring buffer of transitions. Skills are interned in a side table so
/// each transition only stores an id.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReplayBuffer {
    capacity: usize,
    data: Vec<TransitionRecord>,
    /// Slot the next insertion overwrites once full.
    head: usize,
    skills: Vec<Vec<f64>>,
    skill_semantics: Vec<SemanticId>,
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> Result<Self> {
        if capacity == 0 {
            return Err(config_err("replay capacity must be positive"));
        }
        Ok(ReplayBuffer {
            capacity,
            data: Vec::with_capacity(capacity.min(1 << 20)),
            head: 0,
            skills: Vec::new(),
            skill_semantics: Vec::new(),
        })
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn register_skill(&mut self, z: Vec<f64>, semantic: SemanticId) -> usize {
        self.skills.push(z);
        self.skill_semantics.push(semantic);
        self.skills.len() - 1
    }

    pub fn skill(&self, id: usize) -> &[f64] {
        &self.skills[id]
    }

    pub fn num_skills(&self) -> usize {
        self.skills.len()
    }

    pub fn push(&mut self, rec: TransitionRecord) -> Result<()> {
        if rec.skill_id >= self.skills.len() {
            return Err(Error::InvalidBatch(format!("unknown skill id {}", rec.skill_id)));
        }
        if self.data.len() < self.capacity {
            self.data.push(rec);
        } else {
            self.data[self.head] = rec;
            self.head = (self.head + 1) % self.capacity;
        }
        Ok(())
    }

    /// Transition at logical position `i`, oldest first.
    pub fn get(&self, i: usize) -> &TransitionRecord {
        &self.data[(self.head + i) % self.data.len()]
    }

    pub fn gather(&self, idx: &[usize]) -> Batch {
        let n = idx.len();
        let zdim = self.skills.first().map_or(0, Vec::len);
        let mut b = Batch {
            states: Array2::zeros((n, STATE_DIM)),
            actions: Array2::zeros((n, ACTION_DIM)),
            next_states: Array2::zeros((n, STATE_DIM)),
            skills: Array2::zeros((n, zdim)),
            skill_ids: Vec::with_capacity(n),
            semantics: Vec::with_capacity(n),
        };
        for (r, &i) in idx.iter().enumerate() {
            let t = &self.data[i];
            b.states.row_mut(r).assign(&Array1::from(t.state.to_vec()));
            b.actions.row_mut(r).assign(&Array1::from(t.action.to_vec()));
            b.next_states.row_mut(r).assign(&Array1::from(t.next_state.to_vec()));
            b.skills.row_mut(r).assign(&ndarray::ArrayView1::from(&self.skills[t.skill_id][..]));
            b.skill_ids.push(t.skill_id);
            b.semantics.push(self.skill_semantics[t.skill_id]);
        }
        b
    }

    /// Uniform sample with replacement.
    pub fn sample<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Result<Batch> {
        if self.data.is_empty() {
            return Err(Error::InsufficientData("replay buffer is empty".into()));
        }
        let idx: Vec<usize> = (0..n).map(|_| rng.random_range(0..self.data.len())).collect();
        Ok(self.gather(&idx))
    }

    /// Segment starting at physical slot `start`, if the `horizon` slots from
    /// there hold one episode's consecutive steps beginning at a multiple of
    /// `horizon`.
    fn window(&self, start: usize, horizon: usize) -> Option<Segment> {
        let first = &self.data[start];
        if !first.step.is_multiple_of(horizon) {
            return None;
        }
        let len = self.data.len();
        let mut states = Vec::with_capacity(horizon);
        let mut actions = Vec::with_capacity(horizon);
        let mut last = first;
        for j in 0..horizon {
            // Walking past the write head would cross from newest to oldest.
            if j > 0 && (start + j) % len == self.head && len == self.capacity {
                return None;
            }
            let t = &self.data[(start + j) % len];
            if t.episode != first.episode || t.step != first.step + j {
                return None;
            }
            states.push(t.state);
            actions.push(t.action);
            last = t;
        }
        Some(Segment { states, actions, final_state: last.next_state })
    }

    /// Segment together with the skill that generated its first step.
    pub fn window_with_skill(&self, start: usize, horizon: usize) -> Option<(Segment, usize)> {
        self.window(start, horizon).map(|s| (s, self.data[start].skill_id))
    }

    /// Up to `count` distinct episode-aligned windows of length `horizon`,
    /// drawn uniformly over the stored windows.
    pub fn sample_segments<R: Rng + ?Sized>(&self, count: usize, horizon: usize, rng: &mut R) -> Vec<Segment> {
        let starts: Vec<usize> = (0..self.data.len())
            .filter(|&i| self.data[i].step.is_multiple_of(horizon))
            .filter(|&i| self.window(i, horizon).is_some())
            .collect();
        let picked = rand::seq::index::sample(rng, starts.len(), count.min(starts.len()));
        picked.into_iter().filter_map(|k| self.window(starts[k], horizon)).collect()
    }
}

const REPLAY_MAGIC: &[u8; 8] = b"SRSDRPL1";

impl ReplayBuffer {
    /// Little-endian binary dump: header, skill table, then transitions in
    /// physical slot order.
    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        let zdim = self.skills.first().map_or(0, Vec::len);
        w.write_all(REPLAY_MAGIC)?;
        for v in [self.capacity, self.head, self.data.len(), zdim, self.skills.len()] {
            w.write_u64::<LittleEndian>(v as u64)?;
        }
        for (z, c) in self.skills.iter().zip(&self.skill_semantics) {
            w.write_u64::<LittleEndian>(c.0 as u64)?;
            for &v in z {
                w.write_f64::<LittleEndian>(v)?;
            }
        }
        for t in &self.data {
            for v in t.state.iter().chain(&t.action).chain(&t.next_state) {
                w.write_f64::<LittleEndian>(*v)?;
            }
            w.write_u64::<LittleEndian>(t.skill_id as u64)?;
            w.write_u64::<LittleEndian>(t.episode)?;
            w.write_u64::<LittleEndian>(t.step as u64)?;
            w.write_u8(t.done as u8)?;
        }
        Ok(())
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != REPLAY_MAGIC {
            return Err(Error::Checkpoint("replay file has an unknown header".into()));
        }
        let mut header = [0usize; 5];
        for h in header.iter_mut() {
            *h = r.read_u64::<LittleEndian>()? as usize;
        }
        let [capacity, head, len, zdim, num_skills] = header;
        if capacity == 0 || len > capacity || (head != 0 && head >= len) {
            return Err(Error::Checkpoint(format!(
                "inconsistent replay header: capacity {capacity}, head {head}, len {len}"
            )));
        }
        let mut skills = Vec::with_capacity(num_skills);
        let mut skill_semantics = Vec::with_capacity(num_skills);
        for _ in 0..num_skills {
            skill_semantics.push(SemanticId(r.read_u64::<LittleEndian>()? as usize));
            let mut z = vec![0.0; zdim];
            r.read_f64_into::<LittleEndian>(&mut z)?;
            skills.push(z);
        }
        let mut data = Vec::with_capacity(len);
        for _ in 0..len {
            let mut v = [0.0; 6];
            r.read_f64_into::<LittleEndian>(&mut v)?;
            let skill_id = r.read_u64::<LittleEndian>()? as usize;
            if skill_id >= num_skills {
                return Err(Error::Checkpoint(format!("transition refers to unknown skill {skill_id}")));
            }
            data.push(TransitionRecord {
                state: [v[0], v[1]],
                action: [v[2], v[3]],
                next_state: [v[4], v[5]],
                skill_id,
                episode: r.read_u64::<LittleEndian>()?,
                step: r.read_u64::<LittleEndian>()? as usize,
                done: r.read_u8()? != 0,
            });
        }
        Ok(ReplayBuffer { capacity, data, head, skills, skill_semantics })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct UpdateStats {
    pub critic_loss: f64,
    pub actor_loss: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Agent {
    pub config: AgentConfig,
    pub action_bound: f64,
    pub z_dim: usize,
    pub actor: Mlp,
    pub actor_target: Mlp,
    actor_opt: Adam,
    pub bank: QuantileCriticBank,
    critic_updates: u64,
}

impl Agent {
    pub fn new<R: Rng + ?Sized>(z_dim: usize, action_bound: f64, config: AgentConfig, rng: &mut R) -> Result<Self> {
        let h = config.hidden;
        let mut actor = Mlp::new(
            &[STATE_DIM + z_dim, h, h, ACTION_DIM],
            Activation::Relu,
            OutputActivation::ScaledTanh { scale: action_bound },
            rng,
        )?;
        actor.scale_last_layer(1e-2);
        let bank = QuantileCriticBank::new(STATE_DIM + z_dim + ACTION_DIM, h, config.critic, config.critic_lr, rng)?;
        Ok(Agent {
            config,
            action_bound,
            z_dim,
            actor_target: actor.clone(),
            actor_opt: Adam::new(&actor, AdamConfig::with_lr(config.actor_lr)),
            actor,
            bank,
            critic_updates: 0,
        })
    }

    pub fn critic_updates(&self) -> u64 {
        self.critic_updates
    }

    /// Replaces the critics with freshly initialised ones under `mode`.
    pub fn reset_critics<R: Rng + ?Sized>(&mut self, mode: CriticMode, rng: &mut R) -> Result<()> {
        self.config.critic = mode;
        self.bank = QuantileCriticBank::new(
            STATE_DIM + self.z_dim + ACTION_DIM,
            self.config.hidden,
            mode,
            self.config.critic_lr,
            rng,
        )?;
        self.critic_updates = 0;
        Ok(())
    }

    fn policy_input(s: Position, z: &[f64]) -> Vec<f64> {
        let mut x = Vec::with_capacity(STATE_DIM + z.len());
        x.extend_from_slice(&s);
        x.extend_from_slice(z);
        x
    }

    /// `pi(s, z)` plus Gaussian noise of std `noise * bound`, clipped to the bound.
    pub fn act<R: Rng + ?Sized>(&self, s: Position, z: &[f64], noise: f64, rng: &mut R) -> Result<Action> {
        let out = self.actor.forward(&Self::policy_input(s, z))?;
        let b = self.action_bound;
        let mut a = [out[0], out[1]];
        if noise > 0.0 {
            let dist = Normal::new(0.0, noise * b).map_err(|e| config_err(e.to_string()))?;
            for v in a.iter_mut() {
                *v += dist.sample(rng);
            }
        }
        Ok([a[0].clamp(-b, b), a[1].clamp(-b, b)])
    }

    /// Distributional bootstrap targets for a batch given its rewards.
    /// Time-limit terminations are bootstrapped through.
    pub fn critic_target<R: Rng + ?Sized>(&self, batch: &Batch, rewards: &[f64], rng: &mut R) -> Result<Array2<f64>> {
        let n = batch.len();
        let b = self.action_bound;
        let pin = hstack(&[batch.next_states.view(), batch.skills.view()])?;
        let mut a_next = self.actor_target.forward_batch(pin.view())?;
        let clip = self.config.noise_clip * b;
        let noise = gaussian_matrix(n, ACTION_DIM, self.config.policy_noise * b, rng);
        a_next.zip_mut_with(&noise, |a, &e| *a = (*a + e.clamp(-clip, clip)).clamp(-b, b));
        let x = hstack(&[pin.view(), a_next.view()])?;
        let pooled = self.bank.pooled_target_atoms(x.view())?;
        Ok(self.bank.targets_from_pooled(pooled.view(), rewards, self.config.gamma))
    }

    /// Critic regression, then (on every `policy_delay`-th call) an actor step
    /// and soft target updates.
    pub fn update<R: Rng + ?Sized>(&mut self, batch: &Batch, rewards: &[f64], rng: &mut R) -> Result<UpdateStats> {
        self.update_with(batch, rewards, true, rng)
    }

    /// As [`Self::update`]; with `train_actor` false the delayed step only
    /// soft-updates the critic targets and leaves the actor untouched.
    pub fn update_with<R: Rng + ?Sized>(
        &mut self,
        batch: &Batch,
        rewards: &[f64],
        train_actor: bool,
        rng: &mut R,
    ) -> Result<UpdateStats> {
        if rewards.len() != batch.len() {
            return Err(Error::InvalidBatch(format!(
                "{} rewards for {} transitions",
                rewards.len(),
                batch.len()
            )));
        }
        let targets = self.critic_target(batch, rewards, rng)?;
        let x = hstack(&[batch.states.view(), batch.skills.view(), batch.actions.view()])?;
        let critic_loss = self.bank.update(x.view(), targets.view(), self.config.huber_kappa)?;
        self.critic_updates += 1;
        let actor_loss = if self.critic_updates.is_multiple_of(self.config.policy_delay) {
            let loss = if train_actor {
                let l = self.actor_step(batch)?;
                self.actor_target.soft_update_from(&self.actor, self.config.target_smoothing);
                Some(l)
            } else {
                None
            };
            self.bank.soft_update(self.config.target_smoothing);
            loss
        } else {
            None
        };
        Ok(UpdateStats { critic_loss, actor_loss })
    }

    /// Negated mean of critic 1's atoms at `(s, z, pi(s, z))` and its actor gradient.
    pub fn actor_loss(&self, batch: &Batch) -> Result<(f64, crate::nn::Gradients)> {
        actor_objective(&self.actor, &self.bank.critics[0], batch.states.view(), batch.skills.view())
    }

    fn actor_step(&mut self, batch: &Batch) -> Result<f64> {
        let (loss, grads) = self.actor_loss(batch)?;
        self.actor_opt.step(&mut self.actor, &grads)?;
        Ok(loss)
    }
}

/// `-mean_i mean_m critic(s_i, z_i, actor(s_i, z_i))_m` with gradients for the actor.
pub fn actor_objective(
    actor: &Mlp,
    critic: &Mlp,
    states: ArrayView2<f64>,
    skills: ArrayView2<f64>,
) -> Result<(f64, crate::nn::Gradients)> {
    let n = states.nrows();
    let pin = hstack(&[states, skills])?;
    let acache = actor.forward_cached(pin.view())?;
    let x = hstack(&[pin.view(), acache.output().view()])?;
    let ccache = critic.forward_cached(x.view())?;
    let m = critic.output_dim();
    let loss = -ccache.output().sum() / (n * m) as f64;
    let upstream = Array2::from_elem((n, m), -1.0 / (n * m) as f64);
    let (_, dx) = critic.backward(&ccache, upstream.view())?;
    let da = dx.slice(s![.., pin.ncols()..]).to_owned();
    let (grads, _) = actor.backward(&acache, da.view())?;
    Ok((loss, grads))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn no_drop_keeps_pooled_mean() {
        let pooled = array![[3.0, -1.0, 2.5, 0.25, 7.0, -4.0]];
        let t = truncated_targets(pooled.view(), 6, &[0.0], 1.0);
        assert!((t.mean().unwrap() - pooled.mean().unwrap()).abs() < 1e-9);
    }

    #[test]
    fn hand_built_two_by_three_truncation() {
        // critic 1 atoms [1, 4, 2], critic 2 atoms [3, 6, 5]; drop 1 per critic
        let pooled = array![[1.0, 4.0, 2.0, 3.0, 6.0, 5.0]];
        let t = truncated_targets(pooled.view(), 4, &[0.5], 0.9);
        let expect = [0.5 + 0.9 * 1.0, 0.5 + 0.9 * 2.0, 0.5 + 0.9 * 3.0, 0.5 + 0.9 * 4.0];
        assert_eq!(t.row(0).to_vec(), expect.to_vec());
    }

    #[test]
    fn drop_lowers_mean_on_distinct_atoms() {
        let pooled = array![[0.1, 0.7, 0.3, 0.9, 0.5, 0.2]];
        let full = truncated_targets(pooled.view(), 6, &[0.0], 0.99).mean().unwrap();
        let cut = truncated_targets(pooled.view(), 4, &[0.0], 0.99).mean().unwrap();
        assert!(cut < full);
    }

    #[test]
    fn drop_count_must_leave_atoms() {
        assert!(CriticMode::Tqc { critics: 3, atoms: 25, drop: 25 }.validate().is_err());
        assert!(CriticMode::Tqc { critics: 3, atoms: 25, drop: 5 }.validate().is_ok());
    }

    #[test]
    fn matching_constant_targets_give_zero_loss() {
        let atoms = Array2::from_elem((4, 5), 1.5);
        let targets = Array2::from_elem((4, 7), 1.5);
        let (loss, grad) = quantile_huber_loss(atoms.view(), targets.view(), 1.0);
        assert_eq!(loss, 0.0);
        assert!(grad.iter().all(|&g| g == 0.0));
    }

    #[test]
    fn huber_is_continuous_at_kappa() {
        for kappa in [0.5f64, 1.0, 2.0] {
            let quad = 0.5 * kappa * kappa;
            let lin = kappa * (kappa - 0.5 * kappa);
            assert!((quad - lin).abs() < 1e-9);
            assert!((huber(kappa, kappa) - huber(kappa + 1e-12, kappa)).abs() < 1e-9);
            assert!((huber(-kappa, kappa) - huber(-kappa - 1e-12, kappa)).abs() < 1e-9);
        }
    }

    #[test]
    fn quantile_midpoints_are_symmetric() {
        let t = quantile_midpoints(25);
        assert_eq!(t[0], 1.0 / 50.0);
        assert_eq!(t[24], 49.0 / 50.0);
    }

    #[test]
    fn deterministic_action_is_stable_and_bounded() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let agent = Agent::new(6, 0.1, AgentConfig { hidden: 16, ..Default::default() }, &mut rng).unwrap();
        let z = [0.1, 0.2, -0.3, 0.0, 1.0, 0.0];
        let a = agent.act([0.2, 0.1], &z, 0.0, &mut rng).unwrap();
        assert_eq!(a, agent.act([0.2, 0.1], &z, 0.0, &mut rng).unwrap());
        for _ in 0..1000 {
            let a = agent.act([0.2, 0.1], &z, 3.0, &mut rng).unwrap();
            assert!(a.iter().all(|v| v.abs() <= 0.1));
        }
    }

    #[test]
    fn replay_ring_evicts_oldest() {
        let mut buf = ReplayBuffer::new(3).unwrap();
        let id = buf.register_skill(vec![1.0, 0.0], SemanticId(1));
        for i in 0..5 {
            let x = i as f64;
            buf.push(TransitionRecord {
                state: [x, 0.0],
                action: [0.0, 0.0],
                next_state: [x + 1.0, 0.0],
                skill_id: id,
                episode: 0,
                step: i,
                done: false,
            })
            .unwrap();
        }
        assert_eq!(buf.len(), 3);
        let xs: Vec<f64> = (0..3).map(|i| buf.get(i).state[0]).collect();
        assert_eq!(xs, vec![2.0, 3.0, 4.0]);
    }

    #[test]
    fn segments_are_episode_aligned() {
        let mut buf = ReplayBuffer::new(1000).unwrap();
        let id = buf.register_skill(vec![1.0, 0.0], SemanticId(1));
        for ep in 0..3u64 {
            for step in 0..10 {
                let x = step as f64;
                buf.push(TransitionRecord {
                    state: [x, ep as f64],
                    action: [0.1, 0.0],
                    next_state: [x + 1.0, ep as f64],
                    skill_id: id,
                    episode: ep,
                    step,
                    done: step == 9,
                })
                .unwrap();
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let segs = buf.sample_segments(100, 5, &mut rng);
        assert_eq!(segs.len(), 6);
        for s in segs {
            assert_eq!(s.len(), 5);
            assert!(s.states[0][0] == 0.0 || s.states[0][0] == 5.0);
            assert_eq!(s.final_state[0], s.states[0][0] + 5.0);
        }
    }

    #[test]
    fn distinct_skills_drops_repeats() {
        let mut buf = ReplayBuffer::new(10).unwrap();
        let a = buf.register_skill(vec![1.0, 0.0], SemanticId(1));
        let b = buf.register_skill(vec![0.0, 1.0], SemanticId(2));
        for (i, id) in [a, b, a, a, b].into_iter().enumerate() {
            buf.push(TransitionRecord {
                state: [i as f64, 0.0],
                action: [0.0, 0.0],
                next_state: [0.0, 0.0],
                skill_id: id,
                episode: 0,
                step: i,
                done: false,
            })
            .unwrap();
        }
        let batch = buf.gather(&[0, 1, 2, 3, 4]).distinct_skills();
        assert_eq!(batch.skill_ids, vec![a, b]);
        assert_eq!(batch.semantics, vec![SemanticId(1), SemanticId(2)]);
    }
}
