//! Semantic labels and everything learned from them: the segment-level
//! predictor, the per-transition relevance reward, its budget-driven weight,
//! a simulated labeller and pseudo-label based query selection.

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::env::{sector_reward, Action, Position, TaskSet};
use crate::error::{config_err, Error, Result};
use crate::nn::{Activation, Adam, AdamConfig, Gradients, Mlp, OutputActivation};
use crate::skill::SemanticId;

/// Width of one predictor input row, `[x, y, dx, dy]`.
pub const TRANSITION_DIM: usize = 4;

/// A contiguous window of `H` state/action pairs plus the state reached after
/// the last action, so a segment draws as an `H + 1` point path.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Segment {
    pub states: Vec<Position>,
    pub actions: Vec<Action>,
    pub final_state: Position,
}

impl Segment {
    pub fn new(states: Vec<Position>, actions: Vec<Action>, final_state: Position) -> Result<Self> {
        if states.is_empty() || states.len() != actions.len() {
            return Err(Error::InvalidBatch(format!(
                "segment needs matching non-empty states and actions, got {} and {}",
                states.len(),
                actions.len()
            )));
        }
        Ok(Segment { states, actions, final_state })
    }

    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    /// Rows `[s_t, a_t]` fed to the scorer.
    pub fn transitions(&self) -> Array2<f64> {
        let mut x = Array2::zeros((self.len(), TRANSITION_DIM));
        for (t, (s, a)) in self.states.iter().zip(&self.actions).enumerate() {
            x.row_mut(t).assign(&ndarray::arr1(&[s[0], s[1], a[0], a[1]]));
        }
        x
    }

    /// State after each action: `s_1 .. s_H`.
    pub fn next_states(&self) -> impl Iterator<Item = Position> + '_ {
        self.states[1..].iter().copied().chain(std::iter::once(self.final_state))
    }

    pub fn polyline(&self) -> Vec<Position> {
        let mut pts = self.states.clone();
        pts.push(self.final_state);
        pts
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelSource {
    Simulated,
    Human,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabeledSegment {
    pub segment: Segment,
    pub label: SemanticId,
    pub source: LabelSource,
    pub query_id: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeedbackDataset {
    items: Vec<LabeledSegment>,
    budget: usize,
    /// `counts[c]` is the number of items labelled `c`.
    counts: Vec<usize>,
}

impl FeedbackDataset {
    pub fn new(budget: usize) -> Self {
        FeedbackDataset { items: Vec::new(), budget, counts: Vec::new() }
    }

    pub fn budget(&self) -> usize {
        self.budget
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn remaining(&self) -> usize {
        self.budget - self.items.len()
    }

    pub fn items(&self) -> &[LabeledSegment] {
        &self.items
    }

    pub fn count(&self, label: SemanticId) -> usize {
        self.counts.get(label.0).copied().unwrap_or(0)
    }

    /// Label counts of semantics `1..=num_relevant`, in order.
    pub fn relevant_counts(&self, num_relevant: usize) -> Vec<usize> {
        (1..=num_relevant).map(|c| self.count(SemanticId(c))).collect()
    }

    pub fn push(&mut self, item: LabeledSegment) -> Result<()> {
        if self.items.len() >= self.budget {
            return Err(Error::Feedback(format!("feedback budget of {} exhausted", self.budget)));
        }
        let c = item.label.0;
        if self.counts.len() <= c {
            self.counts.resize(c + 1, 0);
        }
        self.counts[c] += 1;
        self.items.push(item);
        Ok(())
    }

    /// Appends all items or none.
    pub fn extend(&mut self, items: Vec<LabeledSegment>) -> Result<()> {
        if items.len() > self.remaining() {
            return Err(Error::Feedback(format!(
                "{} labels exceed the remaining budget of {}",
                items.len(),
                self.remaining()
            )));
        }
        for it in items {
            self.push(it)?;
        }
        Ok(())
    }
}

/// `w_t` of the combined reward: zero up to `t0`, then the fraction of the
/// budget already collected.
pub fn relevance_weight(t: u64, t0: u64, collected: usize, budget: usize) -> Result<f64> {
    if budget == 0 {
        return Err(config_err("relevance weight is undefined for a zero budget"));
    }
    if collected > budget {
        return Err(config_err(format!("{collected} labels collected against a budget of {budget}")));
    }
    if t <= t0 {
        return Ok(0.0);
    }
    Ok(collected as f64 / budget as f64)
}

fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + logits.iter().map(|&v| (v - m).exp()).sum::<f64>().ln();
    logits.iter().map(|&v| v - lse).collect()
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    log_softmax(logits).into_iter().map(f64::exp).collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnsembleConfig {
    pub members: usize,
    pub hidden: usize,
    pub lr: f64,
}

impl Default for EnsembleConfig {
    fn default() -> Self {
        EnsembleConfig { members: 5, hidden: 64, lr: 3e-4 }
    }
}

/// Cross-entropy `-log p(label | segment)` for one scorer, averaged over the
/// given segments, with gradients.
pub fn segment_cross_entropy(
    scorer: &Mlp,
    segments: &[&Segment],
    labels: &[usize],
) -> Result<(f64, Gradients)> {
    if segments.is_empty() || segments.len() != labels.len() {
        return Err(Error::InvalidBatch("segments and labels must be non-empty and aligned".into()));
    }
    let total: usize = segments.iter().map(|s| s.len()).sum();
    let mut x = Array2::zeros((total, TRANSITION_DIM));
    let mut row = 0;
    for seg in segments {
        let n = seg.len();
        x.slice_mut(ndarray::s![row..row + n, ..]).assign(&seg.transitions());
        row += n;
    }
    let cache = scorer.forward_cached(x.view())?;
    let out = cache.output();
    let classes = out.ncols();
    let inv_b = 1.0 / segments.len() as f64;
    let mut upstream = Array2::zeros(out.raw_dim());
    let mut loss = 0.0;
    row = 0;
    for (seg, &label) in segments.iter().zip(labels) {
        if label >= classes {
            return Err(Error::InvalidLabel(format!(
                "label {label} outside the predictor's {classes} classes"
            )));
        }
        let n = seg.len();
        let summed = out.slice(ndarray::s![row..row + n, ..]).sum_axis(Axis(0));
        let logp = log_softmax(summed.as_slice().expect("contiguous"));
        loss -= logp[label];
        let mut g: Array1<f64> = logp.iter().map(|v| v.exp()).collect();
        g[label] -= 1.0;
        g *= inv_b;
        for r in row..row + n {
            upstream.row_mut(r).assign(&g);
        }
        row += n;
    }
    let (grads, _) = scorer.backward(&cache, upstream.view())?;
    Ok((loss * inv_b, grads))
}

/// `E` independent per-transition scorers `(s, a) -> R^{|C|}`; their logits
/// are averaged before any softmax.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoringEnsemble {
    members: Vec<Mlp>,
    opts: Vec<Adam>,
    num_classes: usize,
    /// Number of completed `train_predictor` calls.
    pub trained_rounds: u64,
}

impl ScoringEnsemble {
    pub fn new<R: Rng + ?Sized>(num_classes: usize, cfg: &EnsembleConfig, rng: &mut R) -> Result<Self> {
        if cfg.members == 0 {
            return Err(config_err("ensemble needs at least one member"));
        }
        let members = (0..cfg.members)
            .map(|_| {
                Mlp::new(
                    &[TRANSITION_DIM, cfg.hidden, cfg.hidden, num_classes],
                    Activation::Relu,
                    OutputActivation::Identity,
                    rng,
                )
            })
            .collect::<Result<Vec<_>>>()?;
        Self::from_members(members, AdamConfig::with_lr(cfg.lr))
    }

    pub fn from_members(members: Vec<Mlp>, adam: AdamConfig) -> Result<Self> {
        let first = members.first().ok_or_else(|| config_err("ensemble needs at least one member"))?;
        let (din, dout) = (first.input_dim(), first.output_dim());
        if din != TRANSITION_DIM {
            return Err(config_err(format!("scorer input must be {TRANSITION_DIM} wide, got {din}")));
        }
        if dout < 2 {
            return Err(config_err("scorer needs at least two classes"));
        }
        if members.iter().any(|m| m.input_dim() != din || m.output_dim() != dout) {
            return Err(config_err("ensemble members disagree on shapes"));
        }
        let opts = members.iter().map(|m| Adam::new(m, adam)).collect();
        Ok(ScoringEnsemble { members, opts, num_classes: dout, trained_rounds: 0 })
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn members(&self) -> &[Mlp] {
        &self.members
    }

    /// Mean member logits per row of `[s, a]`.
    pub fn transition_logits(&self, x: ArrayView2<f64>) -> Result<Array2<f64>> {
        let mut acc = self.members[0].forward_batch(x)?;
        for m in &self.members[1..] {
            acc += &m.forward_batch(x)?;
        }
        acc /= self.members.len() as f64;
        Ok(acc)
    }

    /// Per-class segment logits: aggregated transition logits summed over time.
    pub fn segment_logits(&self, segment: &Segment) -> Result<Vec<f64>> {
        let l = self.transition_logits(segment.transitions().view())?;
        Ok(l.sum_axis(Axis(0)).to_vec())
    }

    pub fn predict(&self, segment: &Segment) -> Result<Vec<f64>> {
        Ok(softmax(&self.segment_logits(segment)?))
    }

    /// Most likely class; ties go to the lowest id.
    pub fn pseudo_label(&self, segment: &Segment) -> Result<SemanticId> {
        let p = self.segment_logits(segment)?;
        let mut best = 0;
        for (c, &v) in p.iter().enumerate() {
            if v > p[best] {
                best = c;
            }
        }
        Ok(SemanticId(best))
    }

    /// `log p(f(z) | s, a)` per row, where `semantics[i]` is `f(z_i)`.
    pub fn relevance_rewards(&self, x: ArrayView2<f64>, semantics: &[SemanticId]) -> Result<Vec<f64>> {
        if x.nrows() != semantics.len() {
            return Err(Error::InvalidBatch(format!(
                "{} transitions but {} semantics",
                x.nrows(),
                semantics.len()
            )));
        }
        let logits = self.transition_logits(x)?;
        logits
            .rows()
            .into_iter()
            .zip(semantics)
            .map(|(row, c)| {
                if c.0 >= self.num_classes {
                    return Err(Error::InvalidLabel(format!("semantic {c} has no scorer output")));
                }
                Ok(log_softmax(&row.to_vec())[c.0])
            })
            .collect()
    }

    pub fn relevance_reward(&self, s: Position, a: Action, semantic: SemanticId) -> Result<f64> {
        let x = ndarray::arr2(&[[s[0], s[1], a[0], a[1]]]);
        Ok(self.relevance_rewards(x.view(), &[semantic])?[0])
    }

    /// Trains every member on its own shuffles of `items` for `epochs`
    /// passes and returns the post-training mean loss across members.
    pub fn train_predictor<R: Rng + ?Sized>(
        &mut self,
        items: &[LabeledSegment],
        epochs: usize,
        batch_size: usize,
        rng: &mut R,
    ) -> Result<f64> {
        if items.is_empty() {
            return Err(Error::InsufficientData("cannot train the predictor on no labels".into()));
        }
        if let Some(bad) = items.iter().find(|it| it.label.0 >= self.num_classes) {
            return Err(Error::InvalidLabel(format!(
                "query {} has label {} but the predictor has {} classes",
                bad.query_id, bad.label, self.num_classes
            )));
        }
        let batch_size = batch_size.max(1);
        let mut order: Vec<usize> = (0..items.len()).collect();
        for (member, opt) in self.members.iter_mut().zip(self.opts.iter_mut()) {
            for _ in 0..epochs {
                order.shuffle(rng);
                for chunk in order.chunks(batch_size) {
                    let segs: Vec<&Segment> = chunk.iter().map(|&i| &items[i].segment).collect();
                    let labels: Vec<usize> = chunk.iter().map(|&i| items[i].label.0).collect();
                    let (_, grads) = segment_cross_entropy(member, &segs, &labels)?;
                    opt.step(member, &grads)?;
                }
            }
        }
        self.trained_rounds += 1;
        let segs: Vec<&Segment> = items.iter().map(|it| &it.segment).collect();
        let labels: Vec<usize> = items.iter().map(|it| it.label.0).collect();
        let mut total = 0.0;
        for m in &self.members {
            total += segment_cross_entropy(m, &segs, &labels)?.0;
        }
        Ok(total / self.members.len() as f64)
    }
}

/// How the simulated labeller departs from the rational model.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Irrationality {
    Rational,
    /// The final label is replaced by a uniformly drawn different one with
    /// probability `epsilon`.
    Mistake { epsilon: f64 },
    /// Later steps count less: step `t` is weighted `gamma^t`.
    Myopic { gamma: f64 },
    /// Later steps count more: step `t` is weighted `gamma^(H-1-t)`.
    Amnesic { gamma: f64 },
}

pub const DEFAULT_ORACLE_THRESHOLD: f64 = 0.8;
pub const DEFAULT_IRRATIONAL_GAMMA: f64 = 0.9;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OracleConfig {
    /// `tau^c` for semantics `1..=|C+|`.
    pub thresholds: Vec<f64>,
    pub mode: Irrationality,
}

impl OracleConfig {
    pub fn uniform(num_relevant: usize, tau: f64, mode: Irrationality) -> Self {
        OracleConfig { thresholds: vec![tau; num_relevant], mode }
    }

    pub fn validate(&self) -> Result<()> {
        if self.thresholds.iter().any(|&t| !(t > 0.0)) {
            return Err(config_err("oracle thresholds must be positive"));
        }
        match self.mode {
            Irrationality::Rational => {}
            Irrationality::Mistake { epsilon } => {
                if !(0.0..=1.0).contains(&epsilon) {
                    return Err(config_err(format!("mistake rate {epsilon} outside [0, 1]")));
                }
            }
            Irrationality::Myopic { gamma } | Irrationality::Amnesic { gamma } => {
                if !(gamma > 0.0 && gamma <= 1.0) {
                    return Err(config_err(format!("discount {gamma} outside (0, 1]")));
                }
            }
        }
        Ok(())
    }

    fn step_weight(&self, t: usize, horizon: usize) -> f64 {
        match self.mode {
            Irrationality::Myopic { gamma } => gamma.powi(t as i32),
            Irrationality::Amnesic { gamma } => gamma.powi((horizon - 1 - t) as i32),
            _ => 1.0,
        }
    }
}

/// `p(c | segment)` for every relevant semantic, in order.
pub fn oracle_probabilities(segment: &Segment, task: &TaskSet, cfg: &OracleConfig) -> Result<Vec<f64>> {
    if cfg.thresholds.len() != task.num_semantics() {
        return Err(config_err(format!(
            "oracle has {} thresholds for {} semantics",
            cfg.thresholds.len(),
            task.num_semantics()
        )));
    }
    let h = segment.len();
    let weights: Vec<f64> = (0..h).map(|t| cfg.step_weight(t, h)).collect();
    let probs = task
        .sectors
        .iter()
        .zip(&cfg.thresholds)
        .map(|(sector, tau)| {
            let total: f64 = segment
                .next_states()
                .zip(&weights)
                .map(|(p, w)| w * sector_reward(p, sector, task.radius))
                .sum();
            (total / (h as f64 * tau)).min(1.0)
        })
        .collect();
    Ok(probs)
}

pub fn oracle_label<R: Rng + ?Sized>(
    segment: &Segment,
    task: &TaskSet,
    cfg: &OracleConfig,
    rng: &mut R,
) -> Result<SemanticId> {
    let probs = oracle_probabilities(segment, task, cfg)?;
    let mut best = 0;
    for (i, &p) in probs.iter().enumerate() {
        if p > probs[best] {
            best = i;
        }
    }
    let p = probs[best];
    // The draw is taken even when p is 0 or 1 so the rng advances identically
    // for every query.
    let u: f64 = rng.random();
    let mut label = if u < p { SemanticId(best + 1) } else { SemanticId::IRRELEVANT };
    if let Irrationality::Mistake { epsilon } = cfg.mode {
        if rng.random::<f64>() < epsilon {
            let num_labels = probs.len() + 1;
            let mut other = rng.random_range(0..num_labels - 1);
            if other >= label.0 {
                other += 1;
            }
            label = SemanticId(other);
        }
    }
    Ok(label)
}

/// Indices into `pseudo_labels` chosen by pseudo-label bucketing: the
/// irrelevant bucket is dropped and every other bucket keeps at most
/// `floor(n / (num_classes - 1))` of its first members.
pub fn active_select(pseudo_labels: &[SemanticId], n: usize, num_classes: usize) -> Result<Vec<usize>> {
    if num_classes < 2 {
        return Err(config_err("active sampling needs at least one relevant class"));
    }
    let quota = n / (num_classes - 1);
    let mut buckets: Vec<Vec<usize>> = vec![Vec::new(); num_classes];
    for (i, c) in pseudo_labels.iter().enumerate() {
        if c.0 >= num_classes {
            return Err(Error::InvalidLabel(format!("pseudo-label {c} outside {num_classes} classes")));
        }
        if c.is_relevant() && buckets[c.0].len() < quota {
            buckets[c.0].push(i);
        }
    }
    Ok(buckets.into_iter().flatten().collect())
}

/// Pseudo-labels `candidates` with the ensemble and applies [`active_select`].
pub fn active_sample(candidates: &[Segment], ensemble: &ScoringEnsemble, n: usize) -> Result<Vec<usize>> {
    let labels = candidates
        .iter()
        .map(|s| ensemble.pseudo_label(s))
        .collect::<Result<Vec<_>>>()?;
    active_select(&labels, n, ensemble.num_classes())
}
