//! Contrastive skill discriminator and the two intrinsic rewards built on it:
//! the diversity reward (temperature-scaled cosine between a transition
//! embedding and a skill embedding) and the particle-entropy exploration
//! reward over transition embeddings.

use std::collections::HashSet;

use ndarray::{Array2, ArrayView1, ArrayView2};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{config_err, Error, Result};
use crate::nn::{Activation, Adam, AdamConfig, Gradients, Mlp, OutputActivation};

/// Added to the cosine denominator so zero embeddings never divide by zero.
pub const COSINE_EPS: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiscriminatorConfig {
    pub embed_dim: usize,
    pub hidden: usize,
    pub temperature: f64,
    /// Neighbours used by the particle-entropy reward.
    pub knn_k: usize,
    pub lr: f64,
}

impl Default for DiscriminatorConfig {
    fn default() -> Self {
        DiscriminatorConfig { embed_dim: 16, hidden: 64, temperature: 0.5, knn_k: 16, lr: 1e-4 }
    }
}

/// Temperature-scaled cosine similarity `<u, v> / ((|u| |v| + eps) T)`.
pub fn cosine_logit(u: ArrayView1<f64>, v: ArrayView1<f64>, temperature: f64) -> f64 {
    let nu = u.dot(&u).sqrt();
    let nv = v.dot(&v).sqrt();
    u.dot(&v) / ((nu * nv + COSINE_EPS) * temperature)
}

/// Gradient of [`cosine_logit`] with respect to `u` and `v`.
pub fn cosine_logit_grad(
    u: ArrayView1<f64>,
    v: ArrayView1<f64>,
    temperature: f64,
) -> (ndarray::Array1<f64>, ndarray::Array1<f64>) {
    let nu = u.dot(&u).sqrt();
    let nv = v.dot(&v).sqrt();
    let dot = u.dot(&v);
    let denom = (nu * nv + COSINE_EPS) * temperature;
    // d(dot)/du = v ; d(nu nv)/du = nv u / nu
    let coef = dot * temperature / (denom * denom);
    let mut du = v.to_owned() / denom;
    if nu > 0.0 {
        du.scaled_add(-coef * nv / nu, &u);
    }
    let mut dv = u.to_owned() / denom;
    if nv > 0.0 {
        dv.scaled_add(-coef * nu / nv, &v);
    }
    (du, dv)
}

/// `N` transitions `(s, s')` and the skill each was generated under.
/// Skills must be pairwise distinct.
#[derive(Clone, Debug)]
pub struct ContrastiveBatch {
    /// Rows are `[s, s']`.
    pub pairs: Array2<f64>,
    pub skills: Array2<f64>,
}

impl ContrastiveBatch {
    pub fn new(pairs: Array2<f64>, skills: Array2<f64>) -> Result<Self> {
        if pairs.nrows() == 0 {
            return Err(Error::InvalidBatch("contrastive batch is empty".into()));
        }
        if pairs.nrows() != skills.nrows() {
            return Err(Error::InvalidBatch(format!(
                "{} transitions but {} skills",
                pairs.nrows(),
                skills.nrows()
            )));
        }
        let mut seen = HashSet::with_capacity(skills.nrows());
        for row in skills.rows() {
            let key: Vec<u64> = row.iter().map(|v| v.to_bits()).collect();
            if !seen.insert(key) {
                return Err(Error::InvalidBatch("skills in a contrastive batch must be distinct".into()));
            }
        }
        Ok(ContrastiveBatch { pairs, skills })
    }

    pub fn len(&self) -> usize {
        self.pairs.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.nrows() == 0
    }
}

#[derive(Clone, Debug)]
pub struct DiscriminatorGrads {
    pub state: Gradients,
    pub skill: Gradients,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Discriminator {
    /// `g_1`: `[s, s'] -> R^d`
    pub state_enc: Mlp,
    /// `g_2`: `z -> R^d`
    pub skill_enc: Mlp,
    pub temperature: f64,
    state_opt: Adam,
    skill_opt: Adam,
}

impl Discriminator {
    pub fn new<R: Rng + ?Sized>(
        state_dim: usize,
        z_dim: usize,
        cfg: &DiscriminatorConfig,
        rng: &mut R,
    ) -> Result<Self> {
        if !(cfg.temperature > 0.0) {
            return Err(config_err("temperature must be positive"));
        }
        let h = cfg.hidden;
        let state_enc = Mlp::new(
            &[2 * state_dim, h, h, cfg.embed_dim],
            Activation::Relu,
            OutputActivation::Identity,
            rng,
        )?;
        let skill_enc = Mlp::new(
            &[z_dim, h, h, cfg.embed_dim],
            Activation::Relu,
            OutputActivation::Identity,
            rng,
        )?;
        Self::from_encoders(state_enc, skill_enc, cfg.temperature, AdamConfig::with_lr(cfg.lr))
    }

    pub fn from_encoders(
        state_enc: Mlp,
        skill_enc: Mlp,
        temperature: f64,
        adam: AdamConfig,
    ) -> Result<Self> {
        if state_enc.output_dim() != skill_enc.output_dim() {
            return Err(config_err(format!(
                "encoders disagree on embedding size: {} vs {}",
                state_enc.output_dim(),
                skill_enc.output_dim()
            )));
        }
        if !(temperature > 0.0) {
            return Err(config_err("temperature must be positive"));
        }
        Ok(Discriminator {
            state_opt: Adam::new(&state_enc, adam),
            skill_opt: Adam::new(&skill_enc, adam),
            state_enc,
            skill_enc,
            temperature,
        })
    }

    pub fn embed_pairs(&self, pairs: ArrayView2<f64>) -> Result<Array2<f64>> {
        self.state_enc.forward_batch(pairs)
    }

    pub fn embed_skills(&self, skills: ArrayView2<f64>) -> Result<Array2<f64>> {
        self.skill_enc.forward_batch(skills)
    }

    pub fn score(&self, s: &[f64], s_next: &[f64], z: &[f64]) -> Result<f64> {
        let mut pair = s.to_vec();
        pair.extend_from_slice(s_next);
        let h = self.state_enc.forward(&pair)?;
        let w = self.skill_enc.forward(z)?;
        Ok(cosine_logit(ArrayView1::from(&h), ArrayView1::from(&w), self.temperature))
    }

    /// Row-wise diversity reward `q(s_i, s'_i, z_i)`; no gradients are kept.
    pub fn diversity_rewards(&self, pairs: ArrayView2<f64>, skills: ArrayView2<f64>) -> Result<Vec<f64>> {
        let h = self.embed_pairs(pairs)?;
        let w = self.embed_skills(skills)?;
        Ok(self.row_scores(&h, &w))
    }

    /// Same as [`Self::diversity_rewards`] but reusing pre-computed embeddings.
    pub fn row_scores(&self, pair_emb: &Array2<f64>, skill_emb: &Array2<f64>) -> Vec<f64> {
        pair_emb
            .rows()
            .into_iter()
            .zip(skill_emb.rows())
            .map(|(h, w)| cosine_logit(h, w, self.temperature))
            .collect()
    }

    /// Negated mean InfoNCE contribution and its gradients. Anchor `i`
    /// contributes `S_ii - log(mean_j exp(S_ij))`, where
    /// `S_ij = q(s_j, s'_j, z_i)`.
    pub fn nce_loss(&self, batch: &ContrastiveBatch) -> Result<(f64, DiscriminatorGrads)> {
        let n = batch.len();
        let hc = self.state_enc.forward_cached(batch.pairs.view())?;
        let wc = self.skill_enc.forward_cached(batch.skills.view())?;
        let h = hc.output();
        let w = wc.output();
        let t = self.temperature;

        // dots[i][j] = <w_i, h_j>; scores[i][j] = q(s_j, s'_j, z_i)
        let dots = w.dot(&h.t());
        let nh: Vec<f64> = h.rows().into_iter().map(|r| r.dot(&r).sqrt()).collect();
        let nw: Vec<f64> = w.rows().into_iter().map(|r| r.dot(&r).sqrt()).collect();
        let denom = Array2::from_shape_fn((n, n), |(i, j)| (nw[i] * nh[j] + COSINE_EPS) * t);
        let scores = &dots / &denom;

        let inv_n = 1.0 / n as f64;
        let mut loss = 0.0;
        let mut d_scores = Array2::<f64>::zeros((n, n));
        for i in 0..n {
            let row = scores.row(i);
            let m = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
            let sum_exp: f64 = row.iter().map(|&v| (v - m).exp()).sum();
            let log_mean_exp = m + (sum_exp * inv_n).ln();
            loss -= scores[[i, i]] - log_mean_exp;
            for j in 0..n {
                let soft = (row[j] - m).exp() / sum_exp;
                let delta = if i == j { 1.0 } else { 0.0 };
                d_scores[[i, j]] = -inv_n * (delta - soft);
            }
        }
        loss *= inv_n;

        // Chain rule through the cosine, see `cosine_logit_grad`:
        // dS/dh_j = w_i / D - <w_i, h_j> T |w_i| h_j / (|h_j| D^2), and symmetrically.
        let a = &d_scores / &denom;
        let b = &a * &dots * t / &denom;
        let mut d_h = a.t().dot(w);
        let mut d_w = a.dot(h);
        for j in 0..n {
            if nh[j] > 0.0 {
                let c: f64 = (0..n).map(|i| b[[i, j]] * nw[i]).sum::<f64>() / nh[j];
                d_h.row_mut(j).scaled_add(-c, &h.row(j));
            }
        }
        for i in 0..n {
            if nw[i] > 0.0 {
                let c: f64 = (0..n).map(|j| b[[i, j]] * nh[j]).sum::<f64>() / nw[i];
                d_w.row_mut(i).scaled_add(-c, &w.row(i));
            }
        }
        let (state, _) = self.state_enc.backward(&hc, d_h.view())?;
        let (skill, _) = self.skill_enc.backward(&wc, d_w.view())?;
        Ok((loss, DiscriminatorGrads { state, skill }))
    }

    /// One optimisation step on the NCE objective; returns the loss.
    pub fn nce_update(&mut self, batch: &ContrastiveBatch) -> Result<f64> {
        let (loss, grads) = self.nce_loss(batch)?;
        self.state_opt.step(&mut self.state_enc, &grads.state)?;
        self.skill_opt.step(&mut self.skill_enc, &grads.skill)?;
        Ok(loss)
    }
}

/// Particle-entropy exploration reward: for each row, the mean of
/// `ln(1 + dist)` over its `k` nearest other rows.
pub fn apt_reward(embeddings: ArrayView2<f64>, k: usize) -> Result<Vec<f64>> {
    let n = embeddings.nrows();
    if k == 0 || n <= k {
        return Err(Error::InsufficientData(format!(
            "particle reward needs more than k = {k} points, got {n}"
        )));
    }
    let d = embeddings.ncols();
    let owned = embeddings.as_standard_layout();
    let flat = owned.as_slice().expect("standard layout");
    let mut dists = vec![0.0; n - 1];
    let mut rewards = Vec::with_capacity(n);
    for i in 0..n {
        let a = &flat[i * d..(i + 1) * d];
        let mut slot = 0;
        for j in 0..n {
            if j == i {
                continue;
            }
            let b = &flat[j * d..(j + 1) * d];
            let d2: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
            dists[slot] = d2.sqrt();
            slot += 1;
        }
        let (nearest, kth, _) = dists.select_nth_unstable_by(k - 1, f64::total_cmp);
        let mut chosen: Vec<f64> = nearest.to_vec();
        chosen.push(*kth);
        chosen.sort_by(f64::total_cmp);
        let total: f64 = chosen.iter().map(|d| d.ln_1p()).sum();
        rewards.push(total / k as f64);
    }
    Ok(rewards)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{array, Array1};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn identical_embeddings_score_inverse_temperature() {
        let u = array![0.3, -1.2, 2.0];
        let s = cosine_logit(u.view(), u.view(), 0.5);
        assert!((s - 2.0).abs() < 1e-7, "{s}");
    }

    #[test]
    fn orthogonal_embeddings_score_zero() {
        let u = array![1.0, 0.0];
        let v = array![0.0, 3.0];
        assert_eq!(cosine_logit(u.view(), v.view(), 0.5), 0.0);
    }

    #[test]
    fn zero_embedding_is_finite() {
        let u = Array1::<f64>::zeros(3);
        let v = array![1.0, 2.0, 3.0];
        assert_eq!(cosine_logit(u.view(), v.view(), 0.5), 0.0);
        let (du, dv) = cosine_logit_grad(u.view(), v.view(), 0.5);
        assert!(du.iter().chain(dv.iter()).all(|x| x.is_finite()));
    }

    #[test]
    fn single_element_batch_contributes_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let disc = Discriminator::new(2, 6, &DiscriminatorConfig::default(), &mut rng).unwrap();
        let batch = ContrastiveBatch::new(
            array![[0.1, 0.2, 0.3, 0.4]],
            Array2::from_shape_fn((1, 6), |(_, j)| j as f64 * 0.1),
        )
        .unwrap();
        let (loss, _) = disc.nce_loss(&batch).unwrap();
        assert_eq!(loss, 0.0);
    }

    #[test]
    fn duplicate_skills_rejected() {
        let pairs = Array2::zeros((2, 4));
        let skills = array![[1.0, 0.0], [1.0, 0.0]];
        assert!(ContrastiveBatch::new(pairs, skills).is_err());
    }

    #[test]
    fn apt_identical_points_zero() {
        let emb = Array2::from_elem((5, 3), 0.7);
        assert_eq!(apt_reward(emb.view(), 2).unwrap(), vec![0.0; 5]);
    }

    #[test]
    fn apt_two_points_at_e_minus_one() {
        let d = std::f64::consts::E - 1.0;
        let emb = array![[0.0, 0.0], [d, 0.0]];
        for r in apt_reward(emb.view(), 1).unwrap() {
            assert!((r - 1.0).abs() < 1e-15);
        }
    }

    #[test]
    fn apt_requires_more_points_than_k() {
        let emb = Array2::<f64>::zeros((4, 2));
        assert!(apt_reward(emb.view(), 4).is_err());
        assert!(apt_reward(emb.view(), 0).is_err());
    }
}
