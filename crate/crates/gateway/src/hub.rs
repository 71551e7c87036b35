//! Session state shared by the HTTP handlers and the training thread.
//!
//! Every mutation takes the one lock, so submissions and opens are applied
//! in a single total order. The trainer parks on the condvar until the open
//! session completes or its timeout runs out.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::sync::{Condvar, Mutex, MutexGuard};
use std::time::Duration;

use srsd::orchestrator::trainer::{QueryLabel, SessionRequest};
use srsd::skill::SemanticId;

use crate::error::GatewayError;
use crate::registry::ClassRegistry;
use crate::wire::{Ack, ClassInfo, LabelsFile, QuerySession, RoomInfo, SessionStatus, StatusSnapshot, WireQuery};

#[derive(Clone, Debug)]
struct StoredSession {
    training_step: u64,
    status: SessionStatus,
    room: RoomInfo,
    queries: Vec<WireQuery>,
}

#[derive(Debug)]
struct Inner {
    registry: ClassRegistry,
    sessions: BTreeMap<u64, StoredSession>,
    open: Option<u64>,
    /// Completed labels not yet picked up by the trainer.
    delivered: HashMap<u64, Vec<QueryLabel>>,
    training_step: u64,
    budget_used: usize,
    budget_total: usize,
}

#[derive(Debug)]
pub struct Gateway {
    inner: Mutex<Inner>,
    done: Condvar,
}

impl Gateway {
    pub fn new(registry: ClassRegistry) -> Self {
        Gateway {
            inner: Mutex::new(Inner {
                registry,
                sessions: BTreeMap::new(),
                open: None,
                delivered: HashMap::new(),
                training_step: 0,
                budget_used: 0,
                budget_total: 0,
            }),
            done: Condvar::new(),
        }
    }

    fn lock(&self) -> MutexGuard<'_, Inner> {
        // A panicking handler cannot leave the state half-written: every
        // mutation validates first and commits with plain assignments.
        self.inner.lock().unwrap_or_else(|e| e.into_inner())
    }

    pub fn open_session(&self, req: &SessionRequest) -> Result<u64, GatewayError> {
        if req.queries.is_empty() {
            return Err(GatewayError::Invalid("a session needs at least one query".into()));
        }
        let mut seen = HashSet::new();
        if let Some(q) = req.queries.iter().find(|q| !seen.insert(q.query_id)) {
            return Err(GatewayError::Invalid(format!("query id {} appears twice", q.query_id)));
        }
        let mut g = self.lock();
        if let Some(open) = g.open {
            return Err(GatewayError::SessionOpen { open });
        }
        if g.sessions.contains_key(&req.session_id) {
            return Err(GatewayError::Invalid(format!("session id {} was already used", req.session_id)));
        }
        let stored = StoredSession {
            training_step: req.step,
            status: SessionStatus::Open,
            room: RoomInfo { radius: req.task.radius, sectors: req.task.sectors.clone() },
            queries: req.queries.iter().map(|q| WireQuery::render(q.query_id, &q.segment)).collect(),
        };
        g.sessions.insert(req.session_id, stored);
        g.open = Some(req.session_id);
        g.training_step = req.step;
        g.budget_used = req.budget_used;
        g.budget_total = req.budget_total;
        log::info!("session {} open with {} queries", req.session_id, req.queries.len());
        Ok(req.session_id)
    }

    pub fn get_session(&self, session_id: u64) -> Result<QuerySession, GatewayError> {
        let g = self.lock();
        let s = g.sessions.get(&session_id).ok_or(GatewayError::NotFound(session_id))?;
        Ok(QuerySession {
            session_id,
            training_step: s.training_step,
            status: s.status,
            room: s.room.clone(),
            queries: s.queries.clone(),
            classes: g.registry.classes().to_vec(),
        })
    }

    pub fn current_session(&self) -> Option<QuerySession> {
        let id = self.lock().open?;
        self.get_session(id).ok()
    }

    pub fn is_open(&self, session_id: u64) -> bool {
        self.lock().open == Some(session_id)
    }

    /// Validates `labels` against the session and the registry and applies
    /// them all, or changes nothing.
    pub fn submit_labels(&self, session_id: u64, labels: &LabelsFile) -> Result<Ack, GatewayError> {
        if labels.session_id != session_id {
            return Err(GatewayError::Invalid(format!(
                "labels are for session {} but were posted to session {session_id}",
                labels.session_id
            )));
        }
        let mut g = self.lock();
        let session = g.sessions.get(&session_id).ok_or(GatewayError::NotFound(session_id))?;
        if session.status == SessionStatus::Complete {
            return Err(GatewayError::AlreadyComplete(session_id));
        }
        let registry = g.registry.with_added(&labels.new_classes)?;

        let wanted: HashSet<u64> = session.queries.iter().map(|q| q.query_id).collect();
        let mut seen = HashSet::new();
        let mut duplicates = Vec::new();
        let mut strangers = Vec::new();
        let mut unknown = Vec::new();
        for l in &labels.labels {
            if !wanted.contains(&l.query_id) {
                strangers.push(l.query_id);
            } else if !seen.insert(l.query_id) {
                duplicates.push(l.query_id);
            }
            if !registry.contains(l.label_id) && !unknown.contains(&l.label_id) {
                unknown.push(l.label_id);
            }
        }
        let missing: Vec<u64> =
            session.queries.iter().map(|q| q.query_id).filter(|id| !seen.contains(id)).collect();
        if !missing.is_empty() {
            return Err(GatewayError::MissingLabels(missing));
        }
        if !strangers.is_empty() {
            return Err(GatewayError::UnknownQueries(strangers));
        }
        if !duplicates.is_empty() {
            return Err(GatewayError::DuplicateLabels(duplicates));
        }
        if !unknown.is_empty() {
            return Err(GatewayError::UnknownLabels(unknown));
        }

        let out: Vec<QueryLabel> = labels
            .labels
            .iter()
            .map(|l| QueryLabel { query_id: l.query_id, label: SemanticId(l.label_id) })
            .collect();
        let accepted = out.len();
        g.registry = registry;
        g.sessions.get_mut(&session_id).expect("checked above").status = SessionStatus::Complete;
        g.open = None;
        g.delivered.insert(session_id, out);
        let classes = g.registry.classes().to_vec();
        drop(g);
        self.done.notify_all();
        log::info!("session {session_id} complete with {accepted} labels");
        Ok(Ack { session_id, accepted, classes })
    }

    /// Blocks until `session_id` has labels or `timeout` passes. Labels are
    /// handed out once.
    pub fn wait_for_labels(&self, session_id: u64, timeout: Duration) -> Option<Vec<QueryLabel>> {
        let g = self.lock();
        let (mut g, _) = self
            .done
            .wait_timeout_while(g, timeout, |s| !s.delivered.contains_key(&session_id))
            .unwrap_or_else(|e| e.into_inner());
        g.delivered.remove(&session_id)
    }

    pub fn classes(&self) -> Vec<ClassInfo> {
        self.lock().registry.classes().to_vec()
    }

    pub fn add_class(&self, name: &str) -> Result<ClassInfo, GatewayError> {
        let mut g = self.lock();
        let info = ClassInfo { id: g.registry.next_id(), name: name.trim().to_string() };
        g.registry = g.registry.with_added(std::slice::from_ref(&info))?;
        Ok(info)
    }

    pub fn status(&self) -> StatusSnapshot {
        let g = self.lock();
        StatusSnapshot {
            training_step: g.training_step,
            awaiting_session: g.open.is_some(),
            session_id: g.open,
            budget_used: g.budget_used,
            budget_total: g.budget_total,
        }
    }

    pub fn set_progress(&self, training_step: u64, budget_used: usize, budget_total: usize) {
        let mut g = self.lock();
        g.training_step = training_step;
        g.budget_used = budget_used;
        g.budget_total = budget_total;
    }

    pub fn set_budget_used(&self, budget_used: usize) {
        self.lock().budget_used = budget_used;
    }
}
