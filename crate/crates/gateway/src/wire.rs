//! JSON documents exchanged with the labelling client.

use serde::{Deserialize, Serialize};
use srsd::env::{Position, Sector};
use srsd::feedback::Segment;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassInfo {
    pub id: usize,
    pub name: String,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SessionStatus {
    Open,
    Complete,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WireQuery {
    pub query_id: u64,
    /// Visited positions in room coordinates, start first.
    pub polyline: Vec<Position>,
    pub start: Position,
}

impl WireQuery {
    pub fn render(query_id: u64, segment: &Segment) -> Self {
        let polyline = segment.polyline();
        WireQuery { query_id, start: polyline[0], polyline }
    }
}

/// Room geometry so the client can draw the sector overlays.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoomInfo {
    pub radius: f64,
    pub sectors: Vec<Sector>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuerySession {
    pub session_id: u64,
    pub training_step: u64,
    pub status: SessionStatus,
    pub room: RoomInfo,
    pub queries: Vec<WireQuery>,
    pub classes: Vec<ClassInfo>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelEntry {
    pub query_id: u64,
    pub label_id: usize,
}

/// Contents of `labels.json`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelsFile {
    pub session_id: u64,
    pub labels: Vec<LabelEntry>,
    #[serde(default)]
    pub new_classes: Vec<ClassInfo>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Ack {
    pub session_id: u64,
    pub accepted: usize,
    pub classes: Vec<ClassInfo>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StatusSnapshot {
    pub training_step: u64,
    pub awaiting_session: bool,
    pub session_id: Option<u64>,
    pub budget_used: usize,
    pub budget_total: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct NewClassRequest {
    pub name: String,
}
