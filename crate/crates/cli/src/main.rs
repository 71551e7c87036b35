mod record;

use std::fs::{self, File};
use std::io::{self, BufWriter, Write};
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use clap::{Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use srsd::metrics::{jain_index, prob_improvement, prop1_closed_forms, prop1_monte_carlo, Prop1Config};
use srsd::orchestrator::config::FeedbackSourceKind;
use srsd::orchestrator::evaluate::{evaluate, EvalConfig, EvalMode};
use srsd::orchestrator::trainer::write_history_csv;
use srsd::orchestrator::{checkpoint, FeedbackSource, RunConfig, Trainer};
use srsd::Error;
use srsd_gateway::{ClassRegistry, Gateway, GatewayFeedback};

use record::RunRecord;

#[derive(Debug, Parser)]
#[command(name = "srsd", version, about = "Skill discovery guided by semantic labels")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Source {
    Simulated,
    Human,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Mode {
    ZeroShot,
    FewShot,
    Finetune,
}

impl From<Mode> for EvalMode {
    fn from(m: Mode) -> Self {
        match m {
            Mode::ZeroShot => EvalMode::ZeroShot,
            Mode::FewShot => EvalMode::FewShot,
            Mode::Finetune => EvalMode::Finetune,
        }
    }
}

#[derive(Debug, clap::Args)]
struct RunArgs {
    /// TOML run configuration; defaults are used for missing keys.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Override the configured number of environment steps.
    #[arg(long)]
    steps: Option<u64>,
    /// Output directory for the checkpoint, metric history and run record.
    #[arg(long)]
    out: PathBuf,
    /// Skills rolled out for the run record's coverage numbers.
    #[arg(long, default_value_t = 200)]
    coverage_skills: usize,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Pretrain skills.
    Train {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long, value_enum)]
        source: Option<Source>,
    },
    /// Pretrain with labels collected from a person through the HTTP gateway.
    Serve {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long, default_value_t = 8080)]
        serve_port: u16,
        /// Upper bound on label classes, the irrelevant class included.
        #[arg(long, default_value_t = 8)]
        max_classes: usize,
        /// Seconds to wait for a session before pausing to checkpoint.
        #[arg(long, default_value_t = 600)]
        session_timeout: u64,
        /// Directory with the labelling UI's static files.
        #[arg(long)]
        assets: Option<PathBuf>,
    },
    /// Evaluate a checkpoint against the sector rewards.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_enum, default_value_t = Mode::FewShot)]
        mode: Mode,
        /// TOML evaluation settings.
        #[arg(long)]
        eval_config: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Fine-tune the best skill of one semantic on its sector reward.
    Finetune {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 1)]
        semantic: usize,
        /// Environment steps for search plus fine-tuning.
        #[arg(long)]
        budget: Option<u64>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Monte Carlo informativeness of semantic labels vs pairwise preferences.
    Prop1 {
        #[arg(long, value_delimiter = ',', default_value = "3,5,9,13,17")]
        classes: Vec<usize>,
        #[arg(long, value_delimiter = ',', default_value = "0,0.3,0.5")]
        p: Vec<f64>,
        #[arg(long, default_value_t = 1_000_000)]
        trials: u64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Coverage, label fairness and probability of improvement over run records.
    Metrics {
        /// Run records (`record.json`) of the method.
        #[arg(long, num_args = 1.., required = true)]
        runs: Vec<PathBuf>,
        /// Run records of a baseline to compare coverage F1 against.
        #[arg(long, num_args = 1..)]
        baseline: Vec<PathBuf>,
        #[arg(long, default_value_t = 2000)]
        bootstrap: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

type CliResult = std::result::Result<(), Box<dyn std::error::Error>>;

fn load_config(run: &RunArgs) -> srsd::Result<RunConfig> {
    let mut cfg = match &run.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = run.seed {
        cfg.seed = seed;
    }
    if let Some(steps) = run.steps {
        cfg.train.total_steps = steps;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn finish(trainer: &Trainer, run: &RunArgs) -> CliResult {
    checkpoint::save(trainer, &run.out.join("checkpoint"))?;
    write_history_csv(&trainer.history, BufWriter::new(File::create(run.out.join("metrics.csv"))?))?;
    let mut rng = ChaCha8Rng::seed_from_u64(trainer.config.seed);
    rng.set_stream(4);
    let rec = RunRecord::measure(trainer, run.coverage_skills, &mut rng)?;
    rec.save(&run.out.join("record.json"))?;
    println!(
        "seed {} steps {} labels {:?} precision {:.3} recall {:.3} f1 {:.3}",
        rec.seed, rec.steps, rec.label_counts, rec.coverage.precision, rec.coverage.recall, rec.coverage.f1
    );
    Ok(())
}

fn train(run: &RunArgs, source: Option<Source>) -> CliResult {
    let mut cfg = load_config(run)?;
    match source {
        Some(Source::Simulated) => cfg.source = FeedbackSourceKind::Simulated,
        Some(Source::Human) => return Err("use the serve command for human feedback".into()),
        None if cfg.source == FeedbackSourceKind::Human => {
            return Err("configuration asks for human feedback; use the serve command".into())
        }
        None => {}
    }
    fs::create_dir_all(&run.out)?;
    fs::write(run.out.join("config.toml"), cfg.to_toml_string()?)?;
    let mut trainer = Trainer::new(cfg)?;
    let mut oracle = trainer.simulated_oracle();
    trainer.train(&mut oracle)?;
    finish(&trainer, run)
}

/// Trains in log-sized chunks so the gateway's status stays current. A
/// session timeout writes a checkpoint and keeps waiting.
fn serve(run: &RunArgs, port: u16, max_classes: usize, timeout: u64, assets: Option<PathBuf>) -> CliResult {
    let mut cfg = load_config(run)?;
    cfg.source = FeedbackSourceKind::Human;
    fs::create_dir_all(&run.out)?;
    fs::write(run.out.join("config.toml"), cfg.to_toml_string()?)?;
    let ckpt = run.out.join("checkpoint");
    let mut trainer = if ckpt.join("manifest.json").exists() {
        log::info!("resuming from {}", ckpt.display());
        checkpoint::load(&ckpt)?
    } else {
        Trainer::new(cfg)?
    };
    let gateway = Arc::new(Gateway::new(ClassRegistry::new(trainer.num_relevant(), max_classes)?));
    let _server = srsd_gateway::spawn(gateway.clone(), SocketAddr::from(([0, 0, 0, 0], port)), assets)?;
    println!("labelling gateway on port {port}");
    let mut source = GatewayFeedback::new(gateway.clone(), Duration::from_secs(timeout));
    let total = trainer.config.train.total_steps;
    while trainer.step() < total {
        gateway.set_progress(trainer.step(), trainer.dataset.len(), trainer.dataset.budget());
        let until = (trainer.step() + trainer.config.train.log_every).min(total);
        match trainer.run_until(until, &mut source as &mut dyn FeedbackSource) {
            Ok(()) => {}
            Err(Error::FeedbackTimeout { session_id }) => {
                log::warn!("session {session_id} timed out at step {}; checkpointing", trainer.step());
                checkpoint::save(&trainer, &ckpt)?;
            }
            Err(e) => return Err(e.into()),
        }
    }
    finish(&trainer, run)
}

fn load_eval_config(path: Option<&Path>) -> srsd::Result<EvalConfig> {
    match path {
        Some(p) => Ok(toml::from_str(&fs::read_to_string(p)?)?),
        None => Ok(EvalConfig::default()),
    }
}

fn write_json<T: serde::Serialize>(value: &T, out: Option<&Path>) -> CliResult {
    let text = serde_json::to_string_pretty(value)?;
    match out {
        Some(p) => fs::write(p, text)?,
        None => println!("{text}"),
    }
    Ok(())
}

fn eval(checkpoint_dir: &Path, mode: EvalMode, cfg: &EvalConfig, seed: u64, out: Option<&Path>) -> CliResult {
    let trainer = checkpoint::load(checkpoint_dir)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let report = evaluate(&trainer, mode, &trainer.task, cfg, &mut rng)?;
    write_json(&report, out)
}

fn prop1(classes: &[usize], ps: &[f64], trials: u64, seed: u64) -> CliResult {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let stdout = io::stdout();
    let mut w = stdout.lock();
    writeln!(w, "classes,p,p_sem_hat,p_sem,p_pref_hat,p_pref")?;
    for &c in classes {
        for &p in ps {
            let r = prop1_monte_carlo(&Prop1Config { num_classes: c, p, trials }, &mut rng)?;
            let (sem, pref) = prop1_closed_forms(c, p);
            writeln!(w, "{c},{p},{:.6},{sem:.6},{:.6},{pref:.6}", r.p_sem_hat, r.p_pref_hat)?;
        }
    }
    Ok(())
}

fn summarize(name: &str, records: &[RunRecord]) {
    let n = records.len() as f64;
    let mean = |f: &dyn Fn(&RunRecord) -> f64| records.iter().map(f).sum::<f64>() / n;
    println!(
        "{name}: {} runs, precision {:.3} recall {:.3} f1 {:.3}",
        records.len(),
        mean(&|r| r.coverage.precision),
        mean(&|r| r.coverage.recall),
        mean(&|r| r.coverage.f1)
    );
    for r in records {
        let counts: Vec<f64> = r.label_counts.iter().map(|&c| c as f64).collect();
        match jain_index(&counts) {
            Ok(j) => println!("  seed {} f1 {:.3} labels {:?} jain {j:.3}", r.seed, r.coverage.f1, r.label_counts),
            Err(_) => println!("  seed {} f1 {:.3} labels {:?}", r.seed, r.coverage.f1, r.label_counts),
        }
    }
}

fn metrics(runs: &[PathBuf], baseline: &[PathBuf], reps: usize, seed: u64) -> CliResult {
    let load = |paths: &[PathBuf]| paths.iter().map(|p| RunRecord::load(p)).collect::<srsd::Result<Vec<_>>>();
    let a = load(runs)?;
    summarize("runs", &a);
    if !baseline.is_empty() {
        let b = load(baseline)?;
        summarize("baseline", &b);
        let fa: Vec<f64> = a.iter().map(|r| r.coverage.f1).collect();
        let fb: Vec<f64> = b.iter().map(|r| r.coverage.f1).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pi = prob_improvement(&fa, &fb, reps, &mut rng)?;
        println!("P(runs > baseline) on f1: {:.3} [{:.3}, {:.3}]", pi.p_hat, pi.ci_low, pi.ci_high);
    }
    Ok(())
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train { run, source } => train(&run, source),
        Command::Serve { run, serve_port, max_classes, session_timeout, assets } => {
            serve(&run, serve_port, max_classes, session_timeout, assets)
        }
        Command::Eval { checkpoint, mode, eval_config, seed, out } => {
            load_eval_config(eval_config.as_deref())
                .map_err(Into::into)
                .and_then(|cfg| eval(&checkpoint, mode.into(), &cfg, seed, out.as_deref()))
        }
        Command::Finetune { checkpoint, semantic, budget, seed, out } => {
            let mut cfg = EvalConfig { finetune_target: semantic, ..EvalConfig::default() };
            if let Some(b) = budget {
                cfg.budget_steps = b;
            }
            eval(&checkpoint, EvalMode::Finetune, &cfg, seed, out.as_deref())
        }
        Command::Prop1 { classes, p, trials, seed } => prop1(&classes, &p, trials, seed),
        Command::Metrics { runs, baseline, bootstrap, seed } => metrics(&runs, &baseline, bootstrap, seed),
    };
    if let Err(e) = result {
        eprintln!("error: {e}");
        std::process::exit(1);
    }
}
