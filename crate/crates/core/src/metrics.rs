//! Evaluation statistics: semantic coverage, Jain's fairness index,
//! probability of improvement and the label-informativeness simulation
//! comparing semantic labels with pairwise preferences.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::env::{Position, TaskSet};
use crate::error::{config_err, Error, Result};
use crate::skill::SemanticId;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum HitCriterion {
    /// Any visited state inside the assigned sector.
    Any,
    /// At least this fraction of visited states inside the assigned sector.
    MinFraction { fraction: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CoverageReport {
    /// `covered[i]` is true when semantic `i + 1` had at least one hit.
    pub covered: Vec<bool>,
    pub hits: usize,
    pub samples: usize,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

pub fn f1_score(precision: f64, recall: f64) -> f64 {
    if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        0.0
    }
}

pub fn is_hit(semantic: SemanticId, states: &[Position], task: &TaskSet, criterion: HitCriterion) -> Result<bool> {
    let sector = task
        .sector(semantic.0)
        .ok_or_else(|| Error::InvalidLabel(format!("rollout tagged with semantic {semantic} outside the task")))?;
    let inside = states.iter().filter(|&&p| sector.contains(p, task.radius)).count();
    Ok(match criterion {
        HitCriterion::Any => inside > 0,
        HitCriterion::MinFraction { fraction } => {
            !states.is_empty() && inside as f64 >= fraction * states.len() as f64
        }
    })
}

pub fn coverage_metrics(
    rollouts: &[(SemanticId, Vec<Position>)],
    task: &TaskSet,
    criterion: HitCriterion,
) -> Result<CoverageReport> {
    if rollouts.is_empty() {
        return Err(Error::InsufficientData("coverage needs at least one rollout".into()));
    }
    let mut covered = vec![false; task.num_semantics()];
    let mut hits = 0;
    for (c, states) in rollouts {
        if is_hit(*c, states, task, criterion)? {
            hits += 1;
            covered[c.0 - 1] = true;
        }
    }
    let precision = hits as f64 / rollouts.len() as f64;
    let recall = covered.iter().filter(|&&c| c).count() as f64 / covered.len() as f64;
    Ok(CoverageReport {
        covered,
        hits,
        samples: rollouts.len(),
        precision,
        recall,
        f1: f1_score(precision, recall),
    })
}

/// `(sum x)^2 / (n sum x^2)`.
pub fn jain_index(x: &[f64]) -> Result<f64> {
    if x.is_empty() {
        return Err(Error::InsufficientData("fairness of an empty allocation".into()));
    }
    if x.iter().any(|&v| v < 0.0 || !v.is_finite()) {
        return Err(config_err("fairness is defined for finite non-negative values"));
    }
    let sum: f64 = x.iter().sum();
    let sq: f64 = x.iter().map(|v| v * v).sum();
    if sq == 0.0 {
        return Err(config_err("fairness of an all-zero allocation is undefined"));
    }
    Ok(sum * sum / (x.len() as f64 * sq))
}

/// Fraction of pairs where `a` beats `b`, ties counting one half.
pub fn prob_improvement_point(a: &[f64], b: &[f64]) -> f64 {
    let mut wins = 0.0;
    for &x in a {
        for &y in b {
            if x > y {
                wins += 1.0;
            } else if x == y {
                wins += 0.5;
            }
        }
    }
    wins / (a.len() * b.len()) as f64
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbImprovement {
    pub p_hat: f64,
    pub ci_low: f64,
    pub ci_high: f64,
}

/// Point estimate plus a 95% percentile bootstrap interval, resampling runs
/// of each method independently.
pub fn prob_improvement<R: Rng + ?Sized>(a: &[f64], b: &[f64], reps: usize, rng: &mut R) -> Result<ProbImprovement> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::InsufficientData("probability of improvement needs two non-empty score lists".into()));
    }
    let p_hat = prob_improvement_point(a, b);
    if reps == 0 {
        return Ok(ProbImprovement { p_hat, ci_low: p_hat, ci_high: p_hat });
    }
    let mut ra = vec![0.0; a.len()];
    let mut rb = vec![0.0; b.len()];
    let mut stats: Vec<f64> = (0..reps)
        .map(|_| {
            ra.iter_mut().for_each(|v| *v = a[rng.random_range(0..a.len())]);
            rb.iter_mut().for_each(|v| *v = b[rng.random_range(0..b.len())]);
            prob_improvement_point(&ra, &rb)
        })
        .collect();
    stats.sort_by(f64::total_cmp);
    Ok(ProbImprovement { p_hat, ci_low: percentile(&stats, 2.5), ci_high: percentile(&stats, 97.5) })
}

/// Linear-interpolated percentile of sorted data.
fn percentile(sorted: &[f64], q: f64) -> f64 {
    let pos = q / 100.0 * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prop1Config {
    /// Total number of classes, including the irrelevant one.
    pub num_classes: usize,
    /// Probability mass of the irrelevant class.
    pub p: f64,
    pub trials: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prop1Result {
    pub p_sem_hat: f64,
    pub p_pref_hat: f64,
    pub p_sem: f64,
    pub p_pref: f64,
}

/// Closed-form informativeness of one semantic label and one preference query.
pub fn prop1_closed_forms(num_classes: usize, p: f64) -> (f64, f64) {
    let c = num_classes as f64;
    let p_sem = 1.0 - p;
    let p_pref = ((1.0 - p) / (c - 1.0)) * ((c - 2.0 + p) / (c - 1.0));
    (p_sem, p_pref)
}

/// Class of a random segment: 0 with probability `p`, otherwise uniform over
/// `1..num_classes`.
fn draw_class<R: Rng + ?Sized>(num_classes: usize, p: f64, rng: &mut R) -> usize {
    if rng.random::<f64>() < p {
        0
    } else {
        rng.random_range(1..num_classes)
    }
}

pub fn prop1_monte_carlo<R: Rng + ?Sized>(cfg: &Prop1Config, rng: &mut R) -> Result<Prop1Result> {
    if cfg.num_classes < 3 {
        return Err(config_err("the comparison needs at least three classes"));
    }
    if !(0.0..1.0).contains(&cfg.p) {
        return Err(config_err(format!("irrelevant mass {} outside [0, 1)", cfg.p)));
    }
    if cfg.trials == 0 {
        return Err(config_err("at least one trial is required"));
    }
    let (mut sem, mut pref) = (0u64, 0u64);
    for _ in 0..cfg.trials {
        if draw_class(cfg.num_classes, cfg.p, rng) != 0 {
            sem += 1;
        }
        let target = rng.random_range(1..cfg.num_classes);
        let a = draw_class(cfg.num_classes, cfg.p, rng);
        let b = draw_class(cfg.num_classes, cfg.p, rng);
        if a == target && b != target {
            pref += 1;
        }
    }
    let (p_sem, p_pref) = prop1_closed_forms(cfg.num_classes, cfg.p);
    let n = cfg.trials as f64;
    Ok(Prop1Result { p_sem_hat: sem as f64 / n, p_pref_hat: pref as f64 / n, p_sem, p_pref })
}
