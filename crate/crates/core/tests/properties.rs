use ndarray::{Array1, Array2};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use srsd::agent::truncated_targets;
use srsd::contrastive::{apt_reward, cosine_logit, ContrastiveBatch, Discriminator, DiscriminatorConfig};
use srsd::feedback::{active_select, EnsembleConfig, ScoringEnsemble, Segment};
use srsd::metrics::{jain_index, prob_improvement_point};
use srsd::skill::{adaptive_probabilities, SemanticId};

fn vec_strategy(len: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-1.0f64..1.0, len)
}

fn far_from_zero(v: &[f64]) -> bool {
    v.iter().map(|x| x * x).sum::<f64>() > 1e-2
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn cosine_is_scale_invariant(u in vec_strategy(6), v in vec_strategy(6), a in 0.1f64..10.0, b in 0.1f64..10.0) {
        prop_assume!(far_from_zero(&u) && far_from_zero(&v));
        let u = Array1::from(u);
        let v = Array1::from(v);
        let base = cosine_logit(u.view(), v.view(), 0.5);
        let scaled = cosine_logit((&u * a).view(), (&v * b).view(), 0.5);
        prop_assert!((base - scaled).abs() < 1e-6, "{base} vs {scaled}");
        prop_assert!(base.abs() <= 2.0 + 1e-12);
    }

    #[test]
    fn nce_loss_ignores_batch_order(seed in 0u64..1000, n in 2usize..7) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cfg = DiscriminatorConfig { embed_dim: 4, hidden: 8, temperature: 0.5, knn_k: 1, lr: 1e-3 };
        let d = Discriminator::new(2, 3, &cfg, &mut rng).unwrap();
        let pairs = Array2::from_shape_fn((n, 4), |(i, j)| ((i * 7 + j * 3 + seed as usize) % 11) as f64 / 5.0 - 1.0);
        let skills = Array2::from_shape_fn((n, 3), |(i, j)| ((i * 5 + j + seed as usize) % 13) as f64 / 6.0 - 1.0);
        let rev: Vec<usize> = (0..n).rev().collect();
        let (a, _) = d.nce_loss(&ContrastiveBatch::new(pairs.clone(), skills.clone()).unwrap()).unwrap();
        let (b, _) = d
            .nce_loss(&ContrastiveBatch::new(pairs.select(ndarray::Axis(0), &rev), skills.select(ndarray::Axis(0), &rev)).unwrap())
            .unwrap();
        prop_assert!((a - b).abs() < 1e-12, "{a} vs {b}");
    }

    #[test]
    fn apt_is_translation_invariant_and_grows_with_spread(
        pts in prop::collection::vec(vec_strategy(3), 20..40),
        shift in vec_strategy(3),
        k in 1usize..8,
    ) {
        let n = pts.len();
        let emb = Array2::from_shape_fn((n, 3), |(i, j)| pts[i][j]);
        let moved = &emb + &Array1::from(shift);
        let base = apt_reward(emb.view(), k).unwrap();
        let shifted = apt_reward(moved.view(), k).unwrap();
        for (x, y) in base.iter().zip(&shifted) {
            prop_assert!((x - y).abs() < 1e-9);
        }
        let spread = apt_reward((&emb * 2.0).view(), k).unwrap();
        for (x, y) in base.iter().zip(&spread) {
            prop_assert!(y >= x);
        }
    }

    #[test]
    fn truncation_never_raises_the_mean(seed in 0u64..1000, r in -1.0f64..1.0) {
        let pooled = Array2::from_shape_fn((3, 15), |(i, j)| (((i + 1) * (j + 3) * (seed as usize + 7)) % 17) as f64 - 8.0);
        let rewards = [r; 3];
        let mut prev = f64::INFINITY;
        for keep in (1..=15).rev() {
            let t = truncated_targets(pooled.view(), keep, &rewards, 0.99);
            let m = t.mean().unwrap();
            prop_assert!(m <= prev + 1e-12);
            prev = m;
        }
    }

    #[test]
    fn jain_is_scale_invariant_and_bounded(x in prop::collection::vec(0.0f64..100.0, 1..20), c in 0.01f64..100.0) {
        prop_assume!(x.iter().any(|&v| v > 1e-6));
        let j = jain_index(&x).unwrap();
        let scaled: Vec<f64> = x.iter().map(|v| v * c).collect();
        prop_assert!((j - jain_index(&scaled).unwrap()).abs() < 1e-12);
        prop_assert!(j >= 1.0 / x.len() as f64 - 1e-12 && j <= 1.0 + 1e-12);
    }

    #[test]
    fn improvement_probability_is_complementary(
        a in prop::collection::vec(0.0f64..1.0, 1..10),
        b in prop::collection::vec(0.0f64..1.0, 1..10),
    ) {
        let p = prob_improvement_point(&a, &b);
        let q = prob_improvement_point(&b, &a);
        prop_assert!((p + q - 1.0).abs() < 1e-12);
        prop_assert!((prob_improvement_point(&a, &a) - 0.5).abs() < 1e-12);
    }

    #[test]
    fn adaptive_probabilities_favour_rare_semantics(counts in prop::collection::vec(0usize..500, 1..10)) {
        let p = adaptive_probabilities(&counts);
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        for i in 0..counts.len() {
            for j in 0..counts.len() {
                if counts[i] < counts[j] {
                    prop_assert!(p[i] > p[j]);
                }
            }
        }
    }

    #[test]
    fn segment_prediction_ignores_transition_order(seed in 0u64..500, h in 1usize..8) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let ens = ScoringEnsemble::new(4, &EnsembleConfig { members: 3, hidden: 8, lr: 1e-3 }, &mut rng).unwrap();
        let states: Vec<[f64; 2]> = (0..h).map(|i| [(i as f64 * 0.37 + seed as f64).sin(), (i as f64 * 0.11).cos()]).collect();
        let actions: Vec<[f64; 2]> = (0..h).map(|i| [0.01 * i as f64, -0.02 * i as f64]).collect();
        let fwd = Segment::new(states.clone(), actions.clone(), [0.0, 0.0]).unwrap();
        let bwd = Segment::new(states.into_iter().rev().collect(), actions.into_iter().rev().collect(), [0.0, 0.0]).unwrap();
        let p = ens.predict(&fwd).unwrap();
        let q = ens.predict(&bwd).unwrap();
        for (x, y) in p.iter().zip(&q) {
            prop_assert!((x - y).abs() < 1e-9);
        }
    }
}

#[test]
fn active_selection_contract_over_random_sessions() {
    use rand::Rng;
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    for _ in 0..1000 {
        let classes = rng.random_range(2..9);
        let l = rng.random_range(1..400);
        let n = rng.random_range(1..200);
        let labels: Vec<SemanticId> = (0..l).map(|_| SemanticId(rng.random_range(0..classes))).collect();
        let picked = active_select(&labels, n, classes).unwrap();
        let quota = n / (classes - 1);
        assert!(picked.len() <= n);
        let mut per_class = vec![0; classes];
        let mut seen = std::collections::HashSet::new();
        for &i in &picked {
            assert!(seen.insert(i), "index {i} picked twice");
            assert!(labels[i].is_relevant());
            per_class[labels[i].0] += 1;
        }
        for (c, &m) in per_class.iter().enumerate().skip(1) {
            let available = labels.iter().filter(|x| x.0 == c).count();
            assert_eq!(m, available.min(quota), "class {c}");
        }
    }
}
