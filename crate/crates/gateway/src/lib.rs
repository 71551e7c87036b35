//! HTTP gateway for human labelling: publishes query sessions as polylines,
//! accepts `labels.json` submissions and hands them to the trainer.

pub mod error;
pub mod http;
pub mod hub;
pub mod registry;
pub mod source;
pub mod wire;

pub use error::GatewayError;
pub use http::{router, spawn, ServerHandle};
pub use hub::Gateway;
pub use registry::ClassRegistry;
pub use source::GatewayFeedback;
pub use wire::{ClassInfo, LabelEntry, LabelsFile, QuerySession, StatusSnapshot};
