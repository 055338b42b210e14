//! JSON-lines audit trail for loom decisions and link reports.

use std::io::Write;
use std::path::Path;
use std::sync::Mutex;

use serde::Serialize;

use crate::ids::BoxId;
use crate::model::ContinuityLabel;
use crate::loom::LoomDecision;
use crate::weaver::LinkReport;

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum AuditEvent {
    Loom {
        conversation_id: String,
        message_id: String,
        turn_index: u64,
        /// `None` when no classifier call was made.
        label: Option<ContinuityLabel>,
        fail_open: bool,
        decision: LoomDecision,
    },
    Sealed {
        box_id: BoxId,
        messages: usize,
        events: usize,
        fallback_descriptor: bool,
    },
    Linked(LinkReport),
    LinkFailed {
        box_id: BoxId,
        error: String,
    },
}

#[derive(Debug, Default)]
pub struct AuditLog {
    events: Mutex<Vec<AuditEvent>>,
}

impl AuditLog {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn record(&self, event: AuditEvent) {
        self.events.lock().expect("audit log poisoned").push(event);
    }

    pub fn events(&self) -> Vec<AuditEvent> {
        self.events.lock().expect("audit log poisoned").clone()
    }

    pub fn to_jsonl(&self) -> String {
        let events = self.events.lock().expect("audit log poisoned");
        let mut out = String::new();
        for e in events.iter() {
            out.push_str(&serde_json::to_string(e).expect("audit events serialize"));
            out.push('\n');
        }
        out
    }

    pub fn write_to(&self, path: impl AsRef<Path>) -> std::io::Result<()> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(self.to_jsonl().as_bytes())
    }
}
