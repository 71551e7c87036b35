//! Reference computations shared by the oracle, gradient and acceptance
//! targets. Each binary uses a different subset.
#![allow(dead_code)]

use ndarray::{arr1, arr2, concatenate, Array2, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use srsd::agent::{actor_objective, quantile_huber_loss, Agent, AgentConfig, Batch, CriticMode};
use srsd::contrastive::{ContrastiveBatch, Discriminator, DiscriminatorConfig};
use srsd::feedback::{segment_cross_entropy, ScoringEnsemble, Segment};
use srsd::nn::{finite_diff_check, Activation, AdamConfig, Dense, Mlp, OutputActivation};
use srsd::skill::SemanticId;

pub const FD_EPS: f64 = 1e-5;
pub const FD_TOL: f64 = 1e-4;

pub fn uniform(rows: usize, cols: usize, scale: f64, rng: &mut ChaCha8Rng) -> Array2<f64> {
    Array2::from_shape_simple_fn((rows, cols), || rng.random_range(-scale..scale))
}

pub fn with_params(net: &Mlp, p: &[f64]) -> Mlp {
    let mut n = net.clone();
    n.set_flat(p).unwrap();
    n
}

/// Worst relative errors of the NCE gradients (state encoder, skill encoder).
pub fn nce_errors(seed: u64, batch_size: usize) -> (f64, f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cfg = DiscriminatorConfig { embed_dim: 4, hidden: 6, temperature: 0.5, knn_k: 1, lr: 1e-3 };
    let d = Discriminator::new(2, 5, &cfg, &mut rng).unwrap();
    let batch = ContrastiveBatch::new(uniform(batch_size, 4, 1.0, &mut rng), uniform(batch_size, 5, 1.0, &mut rng)).unwrap();
    let (_, grads) = d.nce_loss(&batch).unwrap();

    let e_state = finite_diff_check(
        |p| {
            let dd = Discriminator::from_encoders(with_params(&d.state_enc, p), d.skill_enc.clone(), 0.5, AdamConfig::default()).unwrap();
            dd.nce_loss(&batch).unwrap().0
        },
        &d.state_enc.to_flat(),
        &grads.state.to_flat(),
        FD_EPS,
    );
    let e_skill = finite_diff_check(
        |p| {
            let dd = Discriminator::from_encoders(d.state_enc.clone(), with_params(&d.skill_enc, p), 0.5, AdamConfig::default()).unwrap();
            dd.nce_loss(&batch).unwrap().0
        },
        &d.skill_enc.to_flat(),
        &grads.skill.to_flat(),
        FD_EPS,
    );
    (e_state, e_skill)
}

pub fn random_segment(h: usize, rng: &mut ChaCha8Rng) -> Segment {
    let states = (0..h).map(|_| [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)]).collect();
    let actions = (0..h).map(|_| [rng.random_range(-0.1..0.1), rng.random_range(-0.1..0.1)]).collect();
    Segment::new(states, actions, [0.0, 0.0]).unwrap()
}

pub fn segment_ce_error(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let scorer = Mlp::new(&[4, 8, 8, 5], Activation::Relu, OutputActivation::Identity, &mut rng).unwrap();
    let segs: Vec<Segment> = (0..3).map(|i| random_segment(2 + i, &mut rng)).collect();
    let refs: Vec<&Segment> = segs.iter().collect();
    let labels = [0, 3, 4];
    let (_, grads) = segment_cross_entropy(&scorer, &refs, &labels).unwrap();
    finite_diff_check(
        |p| segment_cross_entropy(&with_params(&scorer, p), &refs, &labels).unwrap().0,
        &scorer.to_flat(),
        &grads.to_flat(),
        FD_EPS,
    )
}

pub fn quantile_huber_error(seed: u64, kappa: f64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // Targets spread wider than the atoms so both Huber branches are hit.
    let atoms = uniform(4, 3, 1.0, &mut rng);
    let targets = uniform(4, 6, 2.0, &mut rng);
    let (_, grad) = quantile_huber_loss(atoms.view(), targets.view(), kappa);
    finite_diff_check(
        |p| {
            let a = ArrayView2::from_shape((4, 3), p).unwrap();
            quantile_huber_loss(a, targets.view(), kappa).0
        },
        &atoms.iter().copied().collect::<Vec<_>>(),
        &grad.iter().copied().collect::<Vec<_>>(),
        FD_EPS,
    )
}

pub fn actor_objective_error(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let z_dim = 3;
    let mut actor =
        Mlp::new(&[2 + z_dim, 8, 8, 2], Activation::Relu, OutputActivation::ScaledTanh { scale: 0.1 }, &mut rng).unwrap();
    actor.scale_last_layer(5.0);
    let critic = Mlp::new(&[2 + z_dim + 2, 8, 8, 4], Activation::Relu, OutputActivation::Identity, &mut rng).unwrap();
    let states = uniform(6, 2, 1.0, &mut rng);
    let skills = uniform(6, z_dim, 1.0, &mut rng);
    let (_, grads) = actor_objective(&actor, &critic, states.view(), skills.view()).unwrap();
    finite_diff_check(
        |p| actor_objective(&with_params(&actor, p), &critic, states.view(), skills.view()).unwrap().0,
        &actor.to_flat(),
        &grads.to_flat(),
        FD_EPS,
    )
}

/// Every pairwise distance, fully sorted, first `k` averaged in `ln(1 + d)`.
pub fn brute_force_apt(x: &Array2<f64>, k: usize) -> Vec<f64> {
    let n = x.nrows();
    (0..n)
        .map(|i| {
            let mut all = Vec::new();
            for j in 0..n {
                if i != j {
                    let mut d2 = 0.0;
                    for c in 0..x.ncols() {
                        d2 += (x[[i, c]] - x[[j, c]]) * (x[[i, c]] - x[[j, c]]);
                    }
                    all.push(d2.sqrt());
                }
            }
            all.sort_by(|a, b| a.partial_cmp(b).unwrap());
            all[..k].iter().map(|d| d.ln_1p()).sum::<f64>() / k as f64
        })
        .collect()
}

pub fn segment(states: &[[f64; 2]], actions: &[[f64; 2]]) -> Segment {
    Segment::new(states.to_vec(), actions.to_vec(), [0.0, 0.0]).unwrap()
}

/// Two linear scorers with hand-set weights over three classes.
pub fn linear_ensemble() -> ScoringEnsemble {
    let a = Dense {
        weight: arr2(&[[1.0, 0.0, 0.5, 0.0], [0.0, 2.0, 0.0, -1.0], [-1.0, 1.0, 0.0, 0.0]]),
        bias: arr1(&[0.1, 0.0, -0.2]),
    };
    let b = Dense {
        weight: arr2(&[[0.0, 1.0, 0.0, 0.0], [1.0, 0.0, 0.0, 1.0], [0.5, 0.5, 0.5, 0.5]]),
        bias: arr1(&[0.0, 0.3, 0.0]),
    };
    let members = [a, b]
        .into_iter()
        .map(|l| Mlp::from_layers(vec![l], Activation::Identity, OutputActivation::Identity).unwrap())
        .collect();
    ScoringEnsemble::from_members(members, AdamConfig::default()).unwrap()
}

/// The H = 2 segment scored by hand below, and its reversal.
pub fn hand_segments() -> (Segment, Segment) {
    (
        segment(&[[0.2, -0.4], [0.6, 0.1]], &[[0.05, 0.1], [-0.1, 0.0]]),
        segment(&[[0.6, 0.1], [0.2, -0.4]], &[[-0.1, 0.0], [0.05, 0.1]]),
    )
}

/// Class probabilities of [`linear_ensemble`] on the forward hand segment.
pub fn hand_prediction() -> Vec<f64> {
    // Per-transition logits of each member, averaged, then summed over H = 2.
    // t=0: x = (0.2, -0.4, 0.05, 0.1)
    //   a: (0.2 + 0.025 + 0.1, -0.8 - 0.1, -0.2 - 0.4 - 0.2) = (0.325, -0.9, -0.8)
    //   b: (-0.4, 0.2 + 0.1 + 0.3, 0.5 * -0.05) = (-0.4, 0.6, -0.025)
    // t=1: x = (0.6, 0.1, -0.1, 0.0)
    //   a: (0.6 - 0.05 + 0.1, 0.2, -0.6 + 0.1 - 0.2) = (0.65, 0.2, -0.7)
    //   b: (0.1, 0.6 + 0.3, 0.5 * 0.6) = (0.1, 0.9, 0.3)
    let l: [f64; 3] = [
        (0.325 - 0.4) / 2.0 + (0.65 + 0.1) / 2.0,
        (-0.9 + 0.6) / 2.0 + (0.2 + 0.9) / 2.0,
        (-0.8 - 0.025) / 2.0 + (-0.7 + 0.3) / 2.0,
    ];
    let z: f64 = l.iter().map(|v| v.exp()).sum();
    l.iter().map(|v| v.exp() / z).collect()
}

pub fn toy_batch(n: usize, z_dim: usize, rng: &mut ChaCha8Rng) -> Batch {
    Batch {
        states: uniform(n, 2, 1.0, rng),
        actions: uniform(n, 2, 0.1, rng),
        next_states: uniform(n, 2, 1.0, rng),
        skills: uniform(n, z_dim, 1.0, rng),
        skill_ids: (0..n).collect(),
        semantics: vec![SemanticId(1); n],
    }
}

/// Compares `critic_target` with d = 0 against the pooled-atom mean computed
/// from the target networks directly. Returns the worst absolute error and
/// whether every row's mean dropped once `drop` atoms are cut.
pub fn critic_target_check(seed: u64, drop: usize) -> (f64, bool) {
    let config = |drop| AgentConfig {
        hidden: 16,
        policy_noise: 0.0,
        critic: CriticMode::Tqc { critics: 3, atoms: 5, drop },
        ..AgentConfig::default()
    };
    let full = Agent::new(4, 0.1, config(0), &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
    let cut = Agent::new(4, 0.1, config(drop), &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 1000);
    let batch = toy_batch(12, 4, &mut rng);
    let rewards: Vec<f64> = (0..12).map(|i| 0.1 * i as f64 - 0.5).collect();

    let pin = concatenate(Axis(1), &[batch.next_states.view(), batch.skills.view()]).unwrap();
    let gamma = full.config.gamma;
    let t_full = full.critic_target(&batch, &rewards, &mut rng).unwrap();
    let t_cut = cut.critic_target(&batch, &rewards, &mut rng).unwrap();
    assert_eq!(t_full.ncols(), 15);
    assert_eq!(t_cut.ncols(), 15 - 3 * drop);
    let mut worst: f64 = 0.0;
    let mut reduced = true;
    for i in 0..12 {
        let a = full.actor_target.forward(&pin.row(i).to_vec()).unwrap();
        let mut x = pin.row(i).to_vec();
        x.extend(a.iter().map(|v| v.clamp(-0.1, 0.1)));
        let mut pooled = Vec::new();
        for c in &full.bank.targets {
            pooled.extend(c.forward(&x).unwrap());
        }
        let expected = rewards[i] + gamma * pooled.iter().sum::<f64>() / pooled.len() as f64;
        let got = t_full.row(i).mean().unwrap();
        worst = worst.max((got - expected).abs());
        reduced &= t_cut.row(i).mean().unwrap() < got;
    }
    (worst, reduced)
}
