//! Topic Loom: sliding-window continuity monitor that groups consecutive
//! same-topic messages into memory boxes.
//!
//! Per message, in arrival order:
//! - no open box: open one with the message;
//! - open box holds one message: append unconditionally;
//! - otherwise classify the message against the last two messages of the open
//!   box. `continuous` appends; `partial_shift` and `discontinuous` seal the
//!   open box and start a new one with the message.

use serde::{Deserialize, Serialize};

use crate::audit::{AuditEvent, AuditLog};
use crate::embedding::{Embedder, EmbeddingError, SourceKind};
use crate::gateway::{absorb_records, Gateway, GatewayError};
use crate::ids::{BoxId, EventId};
use crate::model::{
    BoxDescriptor, BoxEmbeddings, BoxState, ContinuityLabel, ConversationHandle, MemBox,
    MemoryStore, Message, NewMessage, StoreError, TraceEvent,
};
use crate::weaver::{LinkError, TraceWeaver};

/// Number of trailing messages shown to the continuity classifier.
pub const WINDOW_SIZE: usize = 2;
/// Words of the first message used as topic by the fallback descriptor.
pub const FALLBACK_TOPIC_WORDS: usize = 8;

#[derive(Debug, thiserror::Error)]
pub enum LoomError {
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error("classifying message {message_id}: {source}")]
    Classification {
        message_id: String,
        source: GatewayError,
    },
    #[error("extracting descriptor for box {box_id}: {source}")]
    Extraction { box_id: BoxId, source: GatewayError },
    #[error(transparent)]
    Embedding(#[from] EmbeddingError),
    #[error("linking box {box_id}: {source}")]
    Link { box_id: BoxId, source: LinkError },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LoomConfig {
    /// Treat a message whose classification keeps failing as continuous instead of halting.
    pub fail_open: bool,
    /// Run the trace weaver on every freshly sealed box.
    pub link_on_seal: bool,
}

impl Default for LoomConfig {
    fn default() -> Self {
        Self {
            fail_open: true,
            link_on_seal: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LoomDecision {
    Appended { box_id: BoxId },
    Sealed { sealed: BoxId, opened: BoxId },
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct FinishReport {
    pub decisions: Vec<LoomDecision>,
    pub force_sealed: Option<BoxId>,
    pub fallback_descriptor: bool,
}

/// `"<speaker>: <text>"` per message, newline separated, no trailing newline.
pub fn render_messages(messages: &[Message]) -> String {
    messages
        .iter()
        .map(|m| format!("{}: {}", m.speaker, m.text))
        .collect::<Vec<_>>()
        .join("\n")
}

pub fn render_box_text(b: &MemBox) -> String {
    render_messages(&b.messages)
}

/// Classifier window: the literal tail of the open box.
pub fn window(b: &MemBox) -> &[Message] {
    let n = b.messages.len();
    &b.messages[n.saturating_sub(WINDOW_SIZE)..]
}

pub fn fallback_descriptor(b: &MemBox) -> BoxDescriptor {
    let topic = b
        .messages
        .first()
        .map(|m| {
            m.text
                .split_whitespace()
                .take(FALLBACK_TOPIC_WORDS)
                .collect::<Vec<_>>()
                .join(" ")
        })
        .unwrap_or_default();
    BoxDescriptor {
        topic,
        events: Vec::new(),
        keywords: Vec::new(),
    }
}

pub struct TopicLoom<'a> {
    gateway: &'a Gateway,
    embedder: &'a Embedder,
    config: LoomConfig,
    audit: Option<&'a AuditLog>,
}

impl<'a> TopicLoom<'a> {
    pub fn new(gateway: &'a Gateway, embedder: &'a Embedder) -> Self {
        Self {
            gateway,
            embedder,
            config: LoomConfig::default(),
            audit: None,
        }
    }

    pub fn with_config(mut self, config: LoomConfig) -> Self {
        self.config = config;
        self
    }

    pub fn with_audit(mut self, audit: &'a AuditLog) -> Self {
        self.audit = Some(audit);
        self
    }

    fn audit(&self, event: AuditEvent) {
        if let Some(log) = self.audit {
            log.record(event);
        }
    }

    fn weaver(&self) -> TraceWeaver<'a> {
        let w = TraceWeaver::new(self.gateway);
        match self.audit {
            Some(a) => w.with_audit(a),
            None => w,
        }
    }

    /// Enqueues `msg` and processes the queue up to and including it.
    pub fn process_message(
        &self,
        store: &mut MemoryStore,
        h: &ConversationHandle,
        msg: NewMessage,
    ) -> Result<LoomDecision, LoomError> {
        let turn = store.append_message(h, msg)?;
        loop {
            let front = store.conversation(h)?.pending.front().map(|m| m.turn_index);
            let decision = self
                .process_next(store, h)?
                .expect("queue holds the appended message");
            if front == Some(turn) {
                return Ok(decision);
            }
        }
    }

    /// Drains the pending queue. Stops at the first error, leaving the failing message parked.
    pub fn process_pending(
        &self,
        store: &mut MemoryStore,
        h: &ConversationHandle,
    ) -> Result<Vec<LoomDecision>, LoomError> {
        let mut out = Vec::new();
        while let Some(d) = self.process_next(store, h)? {
            out.push(d);
        }
        Ok(out)
    }

    /// Places the oldest pending message. `Ok(None)` when the queue is empty.
    pub fn process_next(
        &self,
        store: &mut MemoryStore,
        h: &ConversationHandle,
    ) -> Result<Option<LoomDecision>, LoomError> {
        let conv = store.conversation(h)?;
        let Some(msg) = conv.pending.front().cloned() else {
            return Ok(None);
        };
        let open = conv.open_box;

        let mut label = None;
        let mut fail_open = false;
        let decision = match open {
            None => {
                let id = self.open_box(store, h, msg.clone())?;
                LoomDecision::Appended { box_id: id }
            }
            Some(id) if store.get_box(id)?.messages.len() < WINDOW_SIZE => {
                self.push(store, id, msg.clone());
                LoomDecision::Appended { box_id: id }
            }
            Some(id) => {
                let window_text = render_messages(window(store.get_box(id)?));
                let current = render_messages(std::slice::from_ref(&msg));
                let mark = self.gateway.ledger_len();
                let result = self.gateway.classify_continuation(&window_text, &current);
                absorb_records(&mut store.accounting, &self.gateway.records_since(mark));
                let l = match result {
                    Ok(l) => l,
                    Err(e) if self.config.fail_open => {
                        log::warn!("classification of {} failed, assuming continuous: {e}", msg.id);
                        store.accounting.fail_open_classifications += 1;
                        fail_open = true;
                        ContinuityLabel::Continuous
                    }
                    Err(source) => {
                        return Err(LoomError::Classification {
                            message_id: msg.id.clone(),
                            source,
                        })
                    }
                };
                label = Some(l);
                if l.is_break() {
                    self.seal_box(store, id)?;
                    let opened = self.open_box(store, h, msg.clone())?;
                    LoomDecision::Sealed { sealed: id, opened }
                } else {
                    self.push(store, id, msg.clone());
                    LoomDecision::Appended { box_id: id }
                }
            }
        };
        store.conversation_mut(h)?.pending.pop_front();
        self.audit(AuditEvent::Loom {
            conversation_id: h.id().to_string(),
            message_id: msg.id,
            turn_index: msg.turn_index,
            label,
            fail_open,
            decision,
        });
        Ok(Some(decision))
    }

    fn open_box(
        &self,
        store: &mut MemoryStore,
        h: &ConversationHandle,
        msg: Message,
    ) -> Result<BoxId, StoreError> {
        let id = store.counters.box_id();
        store.boxes.insert(
            id,
            MemBox {
                id,
                conversation_id: h.id().to_string(),
                state: BoxState::Unsealed,
                messages: vec![msg],
                descriptor: None,
                sealed_at: None,
                box_index: id.0,
                embeddings: None,
                event_ids: Vec::new(),
            },
        );
        store.conversation_mut(h)?.open_box = Some(id);
        Ok(id)
    }

    fn push(&self, store: &mut MemoryStore, id: BoxId, msg: Message) {
        store
            .boxes
            .get_mut(&id)
            .expect("open box exists")
            .messages
            .push(msg);
    }

    /// Extracts the descriptor, embeds the box, mints its trace events and seals it.
    /// Extraction failure leaves the box unsealed.
    pub fn seal_box<'s>(&self, store: &'s mut MemoryStore, id: BoxId) -> Result<&'s MemBox, LoomError> {
        self.seal_inner(store, id, false)?;
        Ok(store.get_box(id)?)
    }

    fn seal_inner(&self, store: &mut MemoryStore, id: BoxId, force: bool) -> Result<bool, LoomError> {
        let b = store.get_box(id)?;
        if b.is_sealed() {
            return Err(StoreError::AlreadySealed(id).into());
        }
        let text = render_box_text(b);
        let mark = self.gateway.ledger_len();
        let result = self.gateway.extract_dialog_descriptor(&text);
        absorb_records(&mut store.accounting, &self.gateway.records_since(mark));
        let (descriptor, fallback) = match result {
            Ok(d) => (d, false),
            Err(e) if force => {
                log::warn!("descriptor extraction for box {id} failed at end of stream, using fallback: {e}");
                (fallback_descriptor(store.get_box(id)?), true)
            }
            Err(source) => return Err(LoomError::Extraction { box_id: id, source }),
        };

        let b = store.get_box(id)?;
        let message_texts: Vec<String> = b.messages.iter().map(|m| m.text.clone()).collect();
        let box_index = b.box_index;
        let box_timestamp = b.first_timestamp().map(str::to_string);
        let sealed_at = b.messages.last().and_then(|m| m.timestamp.clone());

        let mut unique_events: Vec<&String> = Vec::new();
        for e in &descriptor.events {
            if !unique_events.contains(&e) {
                unique_events.push(e);
            }
        }

        let mut emb = BoxEmbeddings::default();
        for t in &message_texts {
            emb.messages.push(store.embed(self.embedder, t, SourceKind::Message)?);
        }
        if !descriptor.topic.trim().is_empty() {
            emb.topic = Some(store.embed(self.embedder, &descriptor.topic, SourceKind::Topic)?);
        }
        for e in &unique_events {
            emb.events.push(store.embed(self.embedder, e, SourceKind::Event)?);
        }
        for k in descriptor.keywords.iter().filter(|k| !k.trim().is_empty()) {
            emb.keywords.push(store.embed(self.embedder, k, SourceKind::Keyword)?);
        }

        let mut event_ids: Vec<EventId> = Vec::with_capacity(unique_events.len());
        for (pos, (text, &embedding_id)) in unique_events.iter().zip(&emb.events).enumerate() {
            let eid = store.counters.event_id();
            store.trace_events.insert(
                eid,
                TraceEvent {
                    id: eid,
                    text: (*text).clone(),
                    source_box_id: id,
                    box_timestamp: box_timestamp.clone(),
                    embedding_id,
                    box_index,
                    position: pos as u32,
                },
            );
            event_ids.push(eid);
        }

        let n_events = event_ids.len();
        let b = store.boxes.get_mut(&id).expect("box exists");
        let conversation_id = b.conversation_id.clone();
        b.state = BoxState::Sealed;
        b.descriptor = Some(descriptor);
        b.sealed_at = sealed_at;
        b.embeddings = Some(emb);
        b.event_ids = event_ids;
        let n_messages = b.messages.len();
        if let Some(conv) = store.conversations.get_mut(&conversation_id) {
            if conv.open_box == Some(id) {
                conv.open_box = None;
            }
        }
        if fallback {
            store.accounting.fallback_descriptors.push(id);
        }
        store.pending_links.insert(id);
        self.audit(AuditEvent::Sealed {
            box_id: id,
            messages: n_messages,
            events: n_events,
            fallback_descriptor: fallback,
        });

        if self.config.link_on_seal {
            if let Err(e) = self.weaver().link_box(store, id) {
                log::warn!("linking box {id} failed, left pending: {e}");
                store.accounting.link_failures += 1;
                self.audit(AuditEvent::LinkFailed {
                    box_id: id,
                    error: e.to_string(),
                });
            }
        }
        Ok(fallback)
    }

    /// End of stream: drains the queue, force-seals the open box and retries
    /// any pending links of this conversation. The conversation is closed afterwards.
    pub fn finish(
        &self,
        store: &mut MemoryStore,
        h: &ConversationHandle,
    ) -> Result<FinishReport, LoomError> {
        let decisions = self.process_pending(store, h)?;
        let mut report = FinishReport {
            decisions,
            ..Default::default()
        };
        if let Some(id) = store.conversation(h)?.open_box {
            report.fallback_descriptor = self.seal_inner(store, id, true)?;
            report.force_sealed = Some(id);
        }
        store.conversation_mut(h)?.closed = true;
        if self.config.link_on_seal {
            let pending: Vec<BoxId> = store
                .pending_links
                .iter()
                .copied()
                .filter(|b| store.boxes.get(b).map(|x| x.conversation_id.as_str()) == Some(h.id()))
                .collect();
            let weaver = self.weaver();
            for id in pending {
                weaver
                    .link_box(store, id)
                    .map_err(|source| LoomError::Link { box_id: id, source })?;
            }
        }
        Ok(report)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gateway::{CallKind, Matcher, ScriptEntry, ScriptedBackend};
    use std::sync::Arc;

    const EXTRACT: &str = r#"{"keywords":["k"],"topic":"t","explicit_mentions":[]}"#;

    fn gateway(labels: &[(u64, &str)]) -> Gateway {
        let mut entries: Vec<ScriptEntry> = labels
            .iter()
            .map(|(i, l)| ScriptEntry::new(CallKind::MsgContinuation, Some(Matcher::Index(*i)), *l))
            .collect();
        entries.push(ScriptEntry::new(CallKind::DialogExtract, None, EXTRACT));
        Gateway::new(Arc::new(ScriptedBackend::new(entries)))
    }

    fn msg(i: usize) -> NewMessage {
        NewMessage::new(if i.is_multiple_of(2) { "user" } else { "agent" }, format!("message {i}"))
    }

    #[test]
    fn first_message_opens_box_without_call() {
        let gw = gateway(&[]);
        let emb = Embedder::hash(8);
        let loom = TopicLoom::new(&gw, &emb);
        let mut store = MemoryStore::new();
        let h = store.open_conversation("c").unwrap();
        let d = loom.process_message(&mut store, &h, msg(0)).unwrap();
        assert_eq!(d, LoomDecision::Appended { box_id: BoxId(0) });
        assert_eq!(gw.ledger_len(), 0);
    }

    #[test]
    fn second_message_appended_unconditionally() {
        let gw = gateway(&[]);
        let emb = Embedder::hash(8);
        let loom = TopicLoom::new(&gw, &emb);
        let mut store = MemoryStore::new();
        let h = store.open_conversation("c").unwrap();
        loom.process_message(&mut store, &h, msg(0)).unwrap();
        let d = loom.process_message(&mut store, &h, msg(1)).unwrap();
        assert_eq!(d, LoomDecision::Appended { box_id: BoxId(0) });
        assert_eq!(store.get_box(BoxId(0)).unwrap().messages.len(), 2);
        assert_eq!(gw.ledger_len(), 0);
    }

    #[test]
    fn discontinuous_label_seals_and_opens() {
        let gw = gateway(&[(0, "No")]);
        let emb = Embedder::hash(8);
        let loom = TopicLoom::new(&gw, &emb);
        let mut store = MemoryStore::new();
        let h = store.open_conversation("c").unwrap();
        for i in 0..2 {
            loom.process_message(&mut store, &h, msg(i)).unwrap();
        }
        let d = loom.process_message(&mut store, &h, msg(2)).unwrap();
        assert_eq!(d, LoomDecision::Sealed { sealed: BoxId(0), opened: BoxId(1) });
        let b0 = store.get_box(BoxId(0)).unwrap();
        assert!(b0.is_sealed());
        assert_eq!(b0.messages.iter().map(|m| m.turn_index).collect::<Vec<_>>(), vec![0, 1]);
        assert_eq!(store.get_box(BoxId(1)).unwrap().messages[0].turn_index, 2);
        store.validate().unwrap();
    }

    #[test]
    fn render_box_text_format() {
        let mut store = MemoryStore::new();
        let h = store.open_conversation("c").unwrap();
        let gw = gateway(&[]);
        let emb = Embedder::hash(8);
        let loom = TopicLoom::new(&gw, &emb);
        loom.process_message(&mut store, &h, NewMessage::new("user", "hi")).unwrap();
        assert_eq!(render_box_text(store.get_box(BoxId(0)).unwrap()), "user: hi");
        loom.process_message(&mut store, &h, NewMessage::new("agent", "hello ☕ ünïcode")).unwrap();
        assert_eq!(
            render_box_text(store.get_box(BoxId(0)).unwrap()),
            "user: hi\nagent: hello ☕ ünïcode"
        );
    }

    #[test]
    fn sealing_twice_is_an_error() {
        let gw = gateway(&[]);
        let emb = Embedder::hash(8);
        let loom = TopicLoom::new(&gw, &emb);
        let mut store = MemoryStore::new();
        let h = store.open_conversation("c").unwrap();
        loom.process_message(&mut store, &h, msg(0)).unwrap();
        loom.process_message(&mut store, &h, msg(1)).unwrap();
        assert!(loom.seal_box(&mut store, BoxId(0)).unwrap().descriptor.is_some());
        assert!(matches!(
            loom.seal_box(&mut store, BoxId(0)),
            Err(LoomError::Store(StoreError::AlreadySealed(_)))
        ));
    }

    #[test]
    fn force_seal_single_message_box_with_fallback() {
        // Only two extraction responses; the third (final box) fails.
        let entries = vec![
            ScriptEntry::new(CallKind::MsgContinuation, None, "No"),
            ScriptEntry::new(CallKind::DialogExtract, Some(Matcher::Index(0)), EXTRACT),
        ];
        let gw = Gateway::new(Arc::new(ScriptedBackend::new(entries)));
        let emb = Embedder::hash(8);
        let loom = TopicLoom::new(&gw, &emb);
        let mut store = MemoryStore::new();
        let h = store.open_conversation("c").unwrap();
        for i in 0..2 {
            loom.process_message(&mut store, &h, msg(i)).unwrap();
        }
        loom.process_message(
            &mut store,
            &h,
            NewMessage::new("user", "one two three four five six seven eight nine ten"),
        )
        .unwrap();
        let report = loom.finish(&mut store, &h).unwrap();
        assert_eq!(report.force_sealed, Some(BoxId(1)));
        assert!(report.fallback_descriptor);
        let last = store.get_box(BoxId(1)).unwrap();
        assert!(last.is_sealed());
        assert_eq!(last.messages.len(), 1);
        let d = last.descriptor.as_ref().unwrap();
        assert_eq!(d.topic, "one two three four five six seven eight");
        assert!(d.events.is_empty() && d.keywords.is_empty());
        assert_eq!(store.accounting.fallback_descriptors, vec![BoxId(1)]);
        store.validate().unwrap();
    }

    #[test]
    fn extraction_failure_mid_stream_keeps_box_unsealed_and_message_parked() {
        let entries = vec![
            ScriptEntry::new(CallKind::MsgContinuation, None, "No"),
            ScriptEntry::new(CallKind::DialogExtract, None, "garbage"),
        ];
        let gw = Gateway::new(Arc::new(ScriptedBackend::new(entries)));
        let emb = Embedder::hash(8);
        let loom = TopicLoom::new(&gw, &emb);
        let mut store = MemoryStore::new();
        let h = store.open_conversation("c").unwrap();
        for i in 0..2 {
            loom.process_message(&mut store, &h, msg(i)).unwrap();
        }
        assert!(matches!(
            loom.process_message(&mut store, &h, msg(2)),
            Err(LoomError::Extraction { .. })
        ));
        assert!(!store.get_box(BoxId(0)).unwrap().is_sealed());
        assert_eq!(store.conversation(&h).unwrap().pending.len(), 1);
    }

    #[test]
    fn strict_mode_halts_on_classification_failure() {
        let entries = vec![ScriptEntry::new(CallKind::MsgContinuation, None, "maybe?")];
        let gw = Gateway::new(Arc::new(ScriptedBackend::new(entries)));
        let emb = Embedder::hash(8);
        let strict = LoomConfig { fail_open: false, link_on_seal: true };
        let loom = TopicLoom::new(&gw, &emb).with_config(strict);
        let mut store = MemoryStore::new();
        let h = store.open_conversation("c").unwrap();
        for i in 0..2 {
            loom.process_message(&mut store, &h, msg(i)).unwrap();
        }
        assert!(matches!(
            loom.process_message(&mut store, &h, msg(2)),
            Err(LoomError::Classification { .. })
        ));
        assert_eq!(store.conversation(&h).unwrap().pending.len(), 1);
        assert_eq!(store.get_box(BoxId(0)).unwrap().messages.len(), 2);
    }

    #[test]
    fn fail_open_appends() {
        let entries = vec![ScriptEntry::new(CallKind::MsgContinuation, None, "maybe?")];
        let gw = Gateway::new(Arc::new(ScriptedBackend::new(entries)));
        let emb = Embedder::hash(8);
        let loom = TopicLoom::new(&gw, &emb);
        let mut store = MemoryStore::new();
        let h = store.open_conversation("c").unwrap();
        for i in 0..3 {
            loom.process_message(&mut store, &h, msg(i)).unwrap();
        }
        assert_eq!(store.get_box(BoxId(0)).unwrap().messages.len(), 3);
        assert_eq!(store.accounting.fail_open_classifications, 1);
    }

    #[test]
    fn window_is_literal_tail() {
        let gw = gateway(&[(0, "Yes"), (1, "Yes")]);
        let emb = Embedder::hash(8);
        let loom = TopicLoom::new(&gw, &emb);
        let mut store = MemoryStore::new();
        let h = store.open_conversation("c").unwrap();
        for i in 0..4 {
            loom.process_message(&mut store, &h, NewMessage::new("user", format!("m{i}"))).unwrap();
        }
        let w: Vec<_> = window(store.get_box(BoxId(0)).unwrap()).iter().map(|m| m.text.as_str()).collect();
        assert_eq!(w, vec!["m2", "m3"]);
    }
}
