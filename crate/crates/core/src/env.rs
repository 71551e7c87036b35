//! Point agent in a circular room. Relevant semantics are angular sectors
//! beyond a minimum radius; the ground-truth reward is sector membership.

use std::f64::consts::{PI, TAU};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{config_err, Result};

pub type Position = [f64; 2];
pub type Action = [f64; 2];

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnvState {
    pub pos: Position,
    /// Steps taken in the current episode.
    pub step: usize,
}

/// Half-open angular interval `[theta_lo, theta_hi)` restricted to radii at
/// least `min_radius_frac * R`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sector {
    pub theta_lo: f64,
    pub theta_hi: f64,
    pub min_radius_frac: f64,
}

impl Sector {
    pub fn validate(&self) -> Result<()> {
        if !(0.0 <= self.theta_lo && self.theta_lo < self.theta_hi && self.theta_hi <= TAU) {
            return Err(config_err(format!(
                "sector angles must satisfy 0 <= lo < hi <= 2pi, got [{}, {})",
                self.theta_lo, self.theta_hi
            )));
        }
        if !(self.min_radius_frac > 0.0 && self.min_radius_frac < 1.0) {
            return Err(config_err(format!(
                "sector radius fraction must lie in (0, 1), got {}",
                self.min_radius_frac
            )));
        }
        Ok(())
    }

    pub fn contains(&self, pos: Position, radius: f64) -> bool {
        let r = pos[0].hypot(pos[1]);
        if r == 0.0 || r < self.min_radius_frac * radius {
            return false;
        }
        let theta = polar_angle(pos);
        theta >= self.theta_lo && theta < self.theta_hi
    }

    fn overlaps(&self, other: &Sector) -> bool {
        self.theta_lo < other.theta_hi && other.theta_lo < self.theta_hi
    }
}

/// Polar angle folded into `[0, 2pi)`.
pub fn polar_angle(pos: Position) -> f64 {
    let a = pos[1].atan2(pos[0]);
    let a = if a < 0.0 { a + TAU } else { a };
    // atan2 of a tiny negative y can round up to exactly 2pi after the shift.
    if a >= TAU {
        0.0
    } else {
        a
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StartMode {
    #[default]
    Center,
    /// Uniform over the disk of half the room radius.
    Random,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskSet {
    /// One sector per relevant semantic; sector `i` belongs to semantic `i + 1`.
    pub sectors: Vec<Sector>,
    pub radius: f64,
    pub episode_len: usize,
    pub action_bound: f64,
    #[serde(default)]
    pub start: StartMode,
}

pub const DEFAULT_RADIUS: f64 = 1.0;
pub const DEFAULT_EPISODE_LEN: usize = 100;
pub const DEFAULT_ACTION_BOUND: f64 = 0.1;
pub const DEFAULT_MIN_RADIUS_FRAC: f64 = 0.5;
/// Angular gap left between neighbouring sectors.
pub const DEFAULT_SECTOR_GAP: f64 = PI / 16.0;

impl TaskSet {
    pub fn num_semantics(&self) -> usize {
        self.sectors.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.sectors.is_empty() {
            return Err(config_err("task needs at least one relevant sector"));
        }
        if !(self.radius > 0.0) {
            return Err(config_err("room radius must be positive"));
        }
        if self.episode_len == 0 {
            return Err(config_err("episode length must be positive"));
        }
        if !(self.action_bound > 0.0) {
            return Err(config_err("action bound must be positive"));
        }
        for s in &self.sectors {
            s.validate()?;
        }
        for (i, a) in self.sectors.iter().enumerate() {
            for b in &self.sectors[i + 1..] {
                if a.overlaps(b) {
                    return Err(config_err("semantic sectors must be disjoint"));
                }
            }
        }
        Ok(())
    }

    /// Sector of a relevant semantic (1-based).
    pub fn sector(&self, semantic: usize) -> Option<&Sector> {
        semantic.checked_sub(1).and_then(|i| self.sectors.get(i))
    }

    pub fn clip_action(&self, action: Action) -> Action {
        let b = self.action_bound;
        [action[0].clamp(-b, b), action[1].clamp(-b, b)]
    }
}

/// Evenly spaced sectors with the default gap and radius fraction.
pub fn make_task(num_semantics: usize, radius: f64, episode_len: usize) -> Result<TaskSet> {
    make_task_with(
        num_semantics,
        radius,
        episode_len,
        DEFAULT_SECTOR_GAP,
        DEFAULT_MIN_RADIUS_FRAC,
    )
}

/// Slot `i` spans `[i * 2pi/n, (i + 1) * 2pi/n)`; the sector is the slot with
/// half the gap trimmed from each side.
pub fn make_task_with(
    num_semantics: usize,
    radius: f64,
    episode_len: usize,
    gap: f64,
    min_radius_frac: f64,
) -> Result<TaskSet> {
    if num_semantics == 0 {
        return Err(config_err("at least one semantic is required"));
    }
    if !(gap >= 0.0) {
        return Err(config_err("sector gap must be non-negative"));
    }
    let slot = TAU / num_semantics as f64;
    if gap >= slot {
        return Err(config_err(format!(
            "{num_semantics} sectors do not fit with a gap of {gap} rad (slot is {slot} rad)"
        )));
    }
    let sectors = (0..num_semantics)
        .map(|i| Sector {
            theta_lo: i as f64 * slot + gap / 2.0,
            theta_hi: ((i + 1) as f64 * slot - gap / 2.0).min(TAU),
            min_radius_frac,
        })
        .collect();
    let task = TaskSet {
        sectors,
        radius,
        episode_len,
        action_bound: DEFAULT_ACTION_BOUND,
        start: StartMode::Center,
    };
    task.validate()?;
    Ok(task)
}

pub fn reset(task: &TaskSet, seed: u64) -> EnvState {
    let pos = match task.start {
        StartMode::Center => [0.0, 0.0],
        StartMode::Random => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let r = 0.5 * task.radius * rng.random::<f64>().sqrt();
            let theta = rng.random::<f64>() * TAU;
            [r * theta.cos(), r * theta.sin()]
        }
    };
    EnvState { pos, step: 0 }
}

/// Applies the clipped displacement, projecting radially back onto the disk.
/// Returns the next state and whether the episode is over.
pub fn step(state: &EnvState, action: Action, task: &TaskSet) -> (EnvState, bool) {
    let a = task.clip_action(action);
    let mut pos = [state.pos[0] + a[0], state.pos[1] + a[1]];
    let r = pos[0].hypot(pos[1]);
    if r > task.radius {
        let k = task.radius / r;
        pos = [pos[0] * k, pos[1] * k];
        // Guard against the rescaled point landing a rounding error outside.
        while pos[0] * pos[0] + pos[1] * pos[1] > task.radius * task.radius {
            pos = [pos[0] * (1.0 - 1e-15), pos[1] * (1.0 - 1e-15)];
        }
    }
    let step = state.step + 1;
    (EnvState { pos, step }, step >= task.episode_len)
}

pub fn sector_reward(pos: Position, sector: &Sector, radius: f64) -> f64 {
    if sector.contains(pos, radius) {
        1.0
    } else {
        0.0
    }
}
