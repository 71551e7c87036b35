//! End-to-end pretraining, persistence and downstream evaluation.

pub mod checkpoint;
pub mod config;
pub mod evaluate;
pub mod trainer;

pub use config::RunConfig;
pub use trainer::{FeedbackSource, SessionRequest, SimulatedOracle, Trainer};
