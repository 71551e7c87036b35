pub mod agent;
pub mod contrastive;
pub mod env;
pub mod error;
pub mod feedback;
pub mod metrics;
pub mod nn;
pub mod orchestrator;
pub mod skill;

pub use error::{Error, Result};
