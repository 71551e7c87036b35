use std::sync::Arc;
use std::time::Duration;

use rand_chacha::ChaCha8Rng;
use srsd::feedback::LabelSource;
use srsd::orchestrator::trainer::{FeedbackSource, QueryLabel, SessionRequest};
use srsd::{Error, Result};

use crate::hub::Gateway;

/// Feedback from a person: publishes each session on the gateway and waits
/// for the labels to come back.
pub struct GatewayFeedback {
    gateway: Arc<Gateway>,
    timeout: Duration,
}

impl GatewayFeedback {
    pub fn new(gateway: Arc<Gateway>, timeout: Duration) -> Self {
        GatewayFeedback { gateway, timeout }
    }

    pub fn gateway(&self) -> &Arc<Gateway> {
        &self.gateway
    }
}

impl FeedbackSource for GatewayFeedback {
    fn kind(&self) -> LabelSource {
        LabelSource::Human
    }

    fn collect(&mut self, request: &SessionRequest, _rng: &mut ChaCha8Rng) -> Result<Vec<QueryLabel>> {
        // A retried request after a timeout finds its session still open, or
        // already answered while training was paused.
        if !self.gateway.is_open(request.session_id) {
            if let Some(labels) = self.gateway.wait_for_labels(request.session_id, Duration::ZERO) {
                return Ok(labels);
            }
            self.gateway.open_session(request).map_err(|e| Error::Feedback(e.to_string()))?;
        }
        self.gateway
            .wait_for_labels(request.session_id, self.timeout)
            .ok_or(Error::FeedbackTimeout { session_id: request.session_id })
    }

    fn ingested(&mut self, dataset_len: usize) {
        self.gateway.set_budget_used(dataset_len);
    }
}
