//! End-to-end store construction: loom, seal, weave, one store per conversation.

use serde::{Deserialize, Serialize};

use crate::audit::AuditLog;
use crate::embedding::Embedder;
use crate::eval::Conversation;
use crate::gateway::Gateway;
use crate::loom::{FinishReport, LoomConfig, LoomError, TopicLoom};
use crate::model::{MemoryStore, NewMessage};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BuildSummary {
    pub conversation_id: String,
    pub messages: usize,
    pub boxes: usize,
    pub traces: usize,
    pub force_sealed: bool,
    pub fallback_descriptor: bool,
    pub pending_links: usize,
}

/// Feeds every message of `conv` through the loom and closes the stream.
pub fn build_store(
    conv: &Conversation,
    gateway: &Gateway,
    embedder: &Embedder,
    config: LoomConfig,
    audit: Option<&AuditLog>,
) -> Result<(MemoryStore, BuildSummary), LoomError> {
    let mut store = MemoryStore::new();
    let h = store.open_conversation(&conv.id)?;
    let mut loom = TopicLoom::new(gateway, embedder).with_config(config);
    if let Some(a) = audit {
        loom = loom.with_audit(a);
    }
    for m in &conv.messages {
        let mut nm = NewMessage::new(&m.speaker, &m.text)
            .session(&m.session_id)
            .with_id(&m.id);
        nm.timestamp = m.timestamp.clone();
        store.append_message(&h, nm)?;
    }
    let FinishReport {
        force_sealed,
        fallback_descriptor,
        ..
    } = loom.finish(&mut store, &h)?;
    let summary = BuildSummary {
        conversation_id: conv.id.clone(),
        messages: conv.messages.len(),
        boxes: store.sealed_boxes().count(),
        traces: store.traces.len(),
        force_sealed: force_sealed.is_some(),
        fallback_descriptor,
        pending_links: store.pending_links.len(),
    };
    log::info!(
        "{}: {} messages -> {} boxes, {} traces",
        summary.conversation_id,
        summary.messages,
        summary.boxes,
        summary.traces
    );
    Ok((store, summary))
}
