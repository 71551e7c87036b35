//! Trains one seed at desk scale with the simulated oracle and prints the
//! coverage of the resulting skills.
//!
//! cargo run --release --example desk_run -- [seed] [steps] [no-relevance]

use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use srsd::metrics::HitCriterion;
use srsd::orchestrator::evaluate::coverage;
use srsd::orchestrator::{RunConfig, Trainer};

fn main() -> srsd::Result<()> {
    let args: Vec<String> = std::env::args().collect();
    let mut cfg = RunConfig::default();
    cfg.seed = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(0);
    if let Some(steps) = args.get(2).and_then(|s| s.parse().ok()) {
        cfg.train.total_steps = steps;
    }
    cfg.ablation.no_relevance = args.iter().any(|a| a == "no-relevance");
    let t0 = Instant::now();
    let mut trainer = Trainer::new(cfg)?;
    let mut oracle = trainer.simulated_oracle();
    trainer.train(&mut oracle)?;
    for row in &trainer.history {
        println!(
            "{:>7} exp {:>7.3} div {:>7.3} rel {:>7.3} w {:.2} critic {:>8.4} nce {:>7.4} labels {}",
            row.step, row.r_exp, row.r_div, row.r_rel, row.weight, row.critic_loss, row.nce_loss, row.labels
        );
    }
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let rep = coverage(&trainer.agent, &trainer.task, &trainer.skill_config, 200, HitCriterion::Any, &mut rng)?;
    println!(
        "precision {:.3} recall {:.3} f1 {:.3} labels {:?} ({:.1}s)",
        rep.precision,
        rep.recall,
        rep.f1,
        trainer.dataset.relevant_counts(trainer.num_relevant()),
        t0.elapsed().as_secs_f64()
    );
    Ok(())
}
