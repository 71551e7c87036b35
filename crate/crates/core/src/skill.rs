//! Skill latents: a Gaussian head followed by a one-hot tail naming the
//! relevant semantic the skill is meant to realise.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{config_err, Error, Result};

/// Semantic class id. `0` is the irrelevant class; `1..=|C+|` are relevant.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct SemanticId(pub usize);

impl SemanticId {
    pub const IRRELEVANT: SemanticId = SemanticId(0);

    pub fn is_relevant(self) -> bool {
        self.0 > 0
    }

    pub fn index(self) -> usize {
        self.0
    }
}

impl std::fmt::Display for SemanticId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SkillConfig {
    pub z_dim: usize,
    pub num_relevant: usize,
    pub normalize_head: bool,
    /// Environment steps between skill resamples within an episode.
    pub z_update_frequency: usize,
}

impl SkillConfig {
    pub fn head_dim(&self) -> usize {
        self.z_dim - self.num_relevant
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_relevant == 0 {
            return Err(config_err("at least one relevant semantic is required"));
        }
        if self.z_dim <= self.num_relevant {
            return Err(config_err(format!(
                "z_dim {} leaves no room for a head next to {} one-hot entries",
                self.z_dim, self.num_relevant
            )));
        }
        if self.z_update_frequency == 0 {
            return Err(config_err("z_update_frequency must be positive"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SkillLatent {
    pub head: Vec<f64>,
    pub tail: Vec<f64>,
}

impl SkillLatent {
    pub fn dim(&self) -> usize {
        self.head.len() + self.tail.len()
    }

    /// Concatenated `[head, tail]` vector fed to the networks.
    pub fn to_vec(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.dim());
        v.extend_from_slice(&self.head);
        v.extend_from_slice(&self.tail);
        v
    }

    pub fn from_vec(z: &[f64], num_relevant: usize) -> Result<Self> {
        if z.len() <= num_relevant {
            return Err(Error::InvalidSkill(format!(
                "latent of length {} cannot hold a {}-way tail",
                z.len(),
                num_relevant
            )));
        }
        let split = z.len() - num_relevant;
        Ok(SkillLatent { head: z[..split].to_vec(), tail: z[split..].to_vec() })
    }
}

pub fn sample_head<R: Rng + ?Sized>(cfg: &SkillConfig, rng: &mut R) -> Vec<f64> {
    let mut head: Vec<f64> = (0..cfg.head_dim()).map(|_| StandardNormal.sample(rng)).collect();
    if cfg.normalize_head {
        let norm = head.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm > 0.0 {
            head.iter_mut().for_each(|v| *v /= norm);
        }
    }
    head
}

pub fn one_hot_tail(semantic: SemanticId, num_relevant: usize) -> Result<Vec<f64>> {
    if !semantic.is_relevant() {
        return Err(Error::InvalidSkill("skills cannot target the irrelevant class".into()));
    }
    if semantic.0 > num_relevant {
        return Err(Error::InvalidSkill(format!(
            "semantic {semantic} out of range 1..={num_relevant}"
        )));
    }
    let mut tail = vec![0.0; num_relevant];
    tail[semantic.0 - 1] = 1.0;
    Ok(tail)
}

pub fn sample_skill<R: Rng + ?Sized>(
    semantic: SemanticId,
    rng: &mut R,
    cfg: &SkillConfig,
) -> Result<SkillLatent> {
    let tail = one_hot_tail(semantic, cfg.num_relevant)?;
    Ok(SkillLatent { head: sample_head(cfg, rng), tail })
}

/// The mapping `f: Z -> C+`, read off the one-hot tail.
pub fn map_semantic(z: &SkillLatent) -> Result<SemanticId> {
    let mut found = None;
    for (i, &v) in z.tail.iter().enumerate() {
        if v == 1.0 {
            if found.is_some() {
                return Err(Error::InvalidSkill("tail has more than one hot entry".into()));
            }
            found = Some(i);
        } else if v != 0.0 {
            return Err(Error::InvalidSkill(format!("tail entry {i} is {v}, not 0 or 1")));
        }
    }
    found
        .map(|i| SemanticId(i + 1))
        .ok_or_else(|| Error::InvalidSkill("tail has no hot entry".into()))
}

/// Sampling weights `1 / (1 + count)` normalised over relevant semantics;
/// `counts[i]` is the label count of semantic `i + 1`.
pub fn adaptive_probabilities(counts: &[usize]) -> Vec<f64> {
    let w: Vec<f64> = counts.iter().map(|&c| 1.0 / (1.0 + c as f64)).collect();
    let total: f64 = w.iter().sum();
    w.into_iter().map(|v| v / total).collect()
}

pub fn adaptive_semantic_choice<R: Rng + ?Sized>(counts: &[usize], rng: &mut R) -> SemanticId {
    assert!(!counts.is_empty(), "need at least one relevant semantic");
    let probs = adaptive_probabilities(counts);
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return SemanticId(i + 1);
        }
    }
    SemanticId(counts.len())
}
