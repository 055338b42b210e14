//! Domain types shared across the pipeline and the memory store state machine.

use std::collections::{BTreeMap, BTreeSet, HashMap, VecDeque};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::embedding::EmbeddingVector;
use crate::ids::{BoxId, Counters, EmbeddingId, EventId, TraceId};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum StoreError {
    #[error("conversation `{0}` is already open")]
    DuplicateConversation(String),
    #[error("unknown conversation `{0}`")]
    UnknownConversation(String),
    #[error("invalid message: {0}")]
    InvalidMessage(String),
    #[error("unknown box {0}")]
    UnknownBox(BoxId),
    #[error("box {0} is already sealed")]
    AlreadySealed(BoxId),
    #[error("box {0} is not sealed")]
    NotSealed(BoxId),
    #[error("unknown trace {0}")]
    UnknownTrace(TraceId),
    #[error("unsupported schema_version {0} (expected {SCHEMA_VERSION})")]
    SchemaVersion(u32),
    #[error("store integrity violation: {0}")]
    Integrity(String),
    #[error("store json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("store io: {0}")]
    Io(#[from] std::io::Error),
}

/// One dialogue turn.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Message {
    pub id: String,
    pub conversation_id: String,
    pub session_id: String,
    pub speaker: String,
    pub text: String,
    /// Free-form date string as supplied by the source (LoCoMo uses "1:56 pm on 8 May, 2023").
    pub timestamp: Option<String>,
    pub turn_index: u64,
}

/// A message before the store assigns its turn index.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct NewMessage {
    pub id: Option<String>,
    pub session_id: String,
    pub speaker: String,
    pub text: String,
    pub timestamp: Option<String>,
}

impl NewMessage {
    pub fn new(speaker: impl Into<String>, text: impl Into<String>) -> Self {
        Self {
            speaker: speaker.into(),
            text: text.into(),
            ..Default::default()
        }
    }

    pub fn session(mut self, session_id: impl Into<String>) -> Self {
        self.session_id = session_id.into();
        self
    }

    pub fn at(mut self, timestamp: impl Into<String>) -> Self {
        self.timestamp = Some(timestamp.into());
        self
    }

    pub fn with_id(mut self, id: impl Into<String>) -> Self {
        self.id = Some(id.into());
        self
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ContinuityLabel {
    Continuous,
    PartialShift,
    Discontinuous,
}

impl ContinuityLabel {
    /// Both partial and complete shifts close the current box.
    pub fn is_break(self) -> bool {
        !matches!(self, ContinuityLabel::Continuous)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct BoxDescriptor {
    pub topic: String,
    pub events: Vec<String>,
    pub keywords: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BoxState {
    Unsealed,
    Sealed,
}

/// Embedding ids computed for a box when it is sealed.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct BoxEmbeddings {
    pub messages: Vec<EmbeddingId>,
    pub topic: Option<EmbeddingId>,
    pub events: Vec<EmbeddingId>,
    pub keywords: Vec<EmbeddingId>,
}

impl BoxEmbeddings {
    pub fn all(&self) -> impl Iterator<Item = EmbeddingId> + '_ {
        self.messages
            .iter()
            .chain(self.topic.iter())
            .chain(self.events.iter())
            .chain(self.keywords.iter())
            .copied()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MemBox {
    pub id: BoxId,
    pub conversation_id: String,
    pub state: BoxState,
    pub messages: Vec<Message>,
    pub descriptor: Option<BoxDescriptor>,
    /// Timestamp of the last message at sealing time, when the source carries one.
    pub sealed_at: Option<String>,
    pub box_index: u64,
    #[serde(default)]
    pub embeddings: Option<BoxEmbeddings>,
    /// Trace events minted from `descriptor.events`, deduplicated, in descriptor order.
    #[serde(default)]
    pub event_ids: Vec<EventId>,
}

impl MemBox {
    pub fn is_sealed(&self) -> bool {
        self.state == BoxState::Sealed
    }

    pub fn session_id(&self) -> Option<&str> {
        self.messages.first().map(|m| m.session_id.as_str())
    }

    pub fn first_timestamp(&self) -> Option<&str> {
        self.messages.first().and_then(|m| m.timestamp.as_deref())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceEvent {
    pub id: EventId,
    pub text: String,
    pub source_box_id: BoxId,
    pub box_timestamp: Option<String>,
    pub embedding_id: EmbeddingId,
    pub box_index: u64,
    /// Position of the event within the source box's deduplicated event list.
    pub position: u32,
}

impl TraceEvent {
    pub fn chrono_key(&self) -> (u64, u32) {
        (self.box_index, self.position)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Trace {
    pub id: TraceId,
    pub conversation_id: String,
    pub events: Vec<EventId>,
    pub summary: Option<String>,
    /// Logical creation time from the store clock.
    pub created_at: u64,
}

impl Trace {
    pub fn contains(&self, event: EventId) -> bool {
        self.events.contains(&event)
    }
}

/// LLM usage totals for one purpose.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct UsageTotals {
    pub calls: u64,
    pub failed_calls: u64,
    pub input_tokens: u64,
    pub output_tokens: u64,
}

impl UsageTotals {
    pub fn tokens(&self) -> u64 {
        self.input_tokens + self.output_tokens
    }
}

/// Persisted LLM ledger summary for everything that built this store.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Accounting {
    pub box_construction: UsageTotals,
    pub linking: UsageTotals,
    /// Boxes sealed with the end-of-stream fallback descriptor.
    pub fallback_descriptors: Vec<BoxId>,
    pub fail_open_classifications: u64,
    pub link_failures: u64,
    pub verification_failures: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConversationState {
    /// Next turn index to assign.
    pub next_turn: u64,
    pub open_box: Option<BoxId>,
    /// Messages accepted but not yet placed in a box, in arrival order.
    pub pending: VecDeque<Message>,
    pub closed: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ConversationHandle(String);

impl ConversationHandle {
    pub fn id(&self) -> &str {
        &self.0
    }
}

impl From<&str> for ConversationHandle {
    fn from(s: &str) -> Self {
        ConversationHandle(s.to_string())
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct MemoryStore {
    pub schema_version: u32,
    pub conversations: BTreeMap<String, ConversationState>,
    pub boxes: BTreeMap<BoxId, MemBox>,
    pub traces: BTreeMap<TraceId, Trace>,
    pub trace_events: BTreeMap<EventId, TraceEvent>,
    pub embeddings: BTreeMap<EmbeddingId, EmbeddingVector>,
    /// Sealed boxes whose linking has not completed.
    pub pending_links: BTreeSet<BoxId>,
    pub counters: Counters,
    pub accounting: Accounting,
    #[serde(skip)]
    pub(crate) embedding_cache: HashMap<(String, String), EmbeddingId>,
}

impl PartialEq for MemoryStore {
    fn eq(&self, other: &Self) -> bool {
        self.schema_version == other.schema_version
            && self.conversations == other.conversations
            && self.boxes == other.boxes
            && self.traces == other.traces
            && self.trace_events == other.trace_events
            && self.embeddings == other.embeddings
            && self.pending_links == other.pending_links
            && self.counters == other.counters
            && self.accounting == other.accounting
    }
}

impl MemoryStore {
    pub fn new() -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            ..Default::default()
        }
    }

    pub fn open_conversation(&mut self, id: &str) -> Result<ConversationHandle, StoreError> {
        if self.conversations.contains_key(id) {
            return Err(StoreError::DuplicateConversation(id.to_string()));
        }
        self.conversations
            .insert(id.to_string(), ConversationState::default());
        Ok(ConversationHandle(id.to_string()))
    }

    pub fn handle(&self, id: &str) -> Result<ConversationHandle, StoreError> {
        if self.conversations.contains_key(id) {
            Ok(ConversationHandle(id.to_string()))
        } else {
            Err(StoreError::UnknownConversation(id.to_string()))
        }
    }

    pub fn conversation(&self, h: &ConversationHandle) -> Result<&ConversationState, StoreError> {
        self.conversations
            .get(h.id())
            .ok_or_else(|| StoreError::UnknownConversation(h.id().to_string()))
    }

    pub(crate) fn conversation_mut(
        &mut self,
        h: &ConversationHandle,
    ) -> Result<&mut ConversationState, StoreError> {
        self.conversations
            .get_mut(h.id())
            .ok_or_else(|| StoreError::UnknownConversation(h.id().to_string()))
    }

    /// Validates a message, assigns its turn index and queues it for the loom.
    pub fn append_message(
        &mut self,
        h: &ConversationHandle,
        msg: NewMessage,
    ) -> Result<u64, StoreError> {
        if msg.text.trim().is_empty() {
            return Err(StoreError::InvalidMessage("text is empty".into()));
        }
        let conv = self.conversation_mut(h)?;
        if conv.closed {
            return Err(StoreError::InvalidMessage(format!(
                "conversation `{}` is closed",
                h.id()
            )));
        }
        let turn_index = conv.next_turn;
        conv.next_turn += 1;
        let id = msg
            .id
            .unwrap_or_else(|| format!("{}:{}", h.id(), turn_index));
        conv.pending.push_back(Message {
            id,
            conversation_id: h.id().to_string(),
            session_id: msg.session_id,
            speaker: msg.speaker,
            text: msg.text,
            timestamp: msg.timestamp,
            turn_index,
        });
        Ok(turn_index)
    }

    pub fn get_box(&self, id: BoxId) -> Result<&MemBox, StoreError> {
        self.boxes.get(&id).ok_or(StoreError::UnknownBox(id))
    }

    pub fn get_trace(&self, id: TraceId) -> Result<&Trace, StoreError> {
        self.traces.get(&id).ok_or(StoreError::UnknownTrace(id))
    }

    pub fn sealed_boxes(&self) -> impl Iterator<Item = &MemBox> {
        self.boxes.values().filter(|b| b.is_sealed())
    }

    /// Boxes of one conversation in creation order.
    pub fn conversation_boxes<'a>(&'a self, conversation_id: &'a str) -> impl Iterator<Item = &'a MemBox> {
        self.boxes
            .values()
            .filter(move |b| b.conversation_id == conversation_id)
    }

    pub fn conversation_traces<'a>(&'a self, conversation_id: &'a str) -> impl Iterator<Item = &'a Trace> {
        self.traces
            .values()
            .filter(move |t| t.conversation_id == conversation_id)
    }

    /// Traces that hold at least one event minted from `box_id`.
    pub fn traces_touching(&self, box_id: BoxId) -> impl Iterator<Item = &Trace> {
        self.traces.values().filter(move |t| {
            t.events
                .iter()
                .any(|e| self.trace_events.get(e).map(|ev| ev.source_box_id) == Some(box_id))
        })
    }

    /// All messages of a conversation, in box order then turn order. Pending messages excluded.
    pub fn boxed_messages<'a>(&'a self, conversation_id: &'a str) -> impl Iterator<Item = &'a Message> {
        self.conversation_boxes(conversation_id)
            .flat_map(|b| b.messages.iter())
    }

    pub(crate) fn rebuild_caches(&mut self) {
        self.embedding_cache = self
            .embeddings
            .values()
            .map(|v| ((v.embedder.clone(), v.source_text.clone()), v.id))
            .collect();
    }

    /// Checks the cross-reference invariants between boxes, traces and embeddings.
    pub fn validate(&self) -> Result<(), StoreError> {
        let fail = |m: String| Err(StoreError::Integrity(m));
        let mut open: HashMap<&str, usize> = HashMap::new();
        for b in self.boxes.values() {
            if b.messages.is_empty() {
                return fail(format!("box {} has no messages", b.id));
            }
            if b.messages.windows(2).any(|w| w[1].turn_index != w[0].turn_index + 1) {
                return fail(format!("box {} messages are not contiguous", b.id));
            }
            if b.is_sealed() != b.descriptor.is_some() {
                return fail(format!("box {} descriptor/state mismatch", b.id));
            }
            if !b.is_sealed() {
                *open.entry(&b.conversation_id).or_default() += 1;
            }
            if let Some(emb) = &b.embeddings {
                for id in emb.all() {
                    if !self.embeddings.contains_key(&id) {
                        return fail(format!("box {} references missing embedding {id}", b.id));
                    }
                }
            }
        }
        if let Some((conv, _)) = open.iter().find(|(_, n)| **n > 1) {
            return fail(format!("conversation {conv} has more than one unsealed box"));
        }
        for ev in self.trace_events.values() {
            match self.boxes.get(&ev.source_box_id) {
                Some(b) if b.is_sealed() => {}
                _ => return fail(format!("event {} source box is not sealed", ev.id)),
            }
            if !self.embeddings.contains_key(&ev.embedding_id) {
                return fail(format!("event {} references missing embedding", ev.id));
            }
        }
        for t in self.traces.values() {
            if t.events.is_empty() {
                return fail(format!("trace {} is empty", t.id));
            }
            let mut seen = BTreeSet::new();
            let mut last = (0, 0);
            for id in &t.events {
                let Some(ev) = self.trace_events.get(id) else {
                    return fail(format!("trace {} references missing event {id}", t.id));
                };
                if !seen.insert(*id) {
                    return fail(format!("trace {} holds event {id} twice", t.id));
                }
                if ev.chrono_key() < last {
                    return fail(format!("trace {} is not chronological", t.id));
                }
                last = ev.chrono_key();
            }
        }
        Ok(())
    }

    /// Canonical JSON: pretty-printed, keys sorted at every level.
    pub fn to_json_string(&self) -> Result<String, StoreError> {
        let value = serde_json::to_value(self)?;
        let mut out = serde_json::to_string_pretty(&sort_keys(value))?;
        out.push('\n');
        Ok(out)
    }

    pub fn from_json_str(s: &str) -> Result<Self, StoreError> {
        let mut store: MemoryStore = serde_json::from_str(s)?;
        if store.schema_version != SCHEMA_VERSION {
            return Err(StoreError::SchemaVersion(store.schema_version));
        }
        store.rebuild_caches();
        store.validate()?;
        Ok(store)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), StoreError> {
        std::fs::write(path, self.to_json_string()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, StoreError> {
        Self::from_json_str(&std::fs::read_to_string(path)?)
    }
}

/// Recursively sorts object keys so output does not depend on insertion order.
pub fn sort_keys(value: serde_json::Value) -> serde_json::Value {
    use serde_json::Value;
    match value {
        Value::Object(map) => {
            let mut entries: Vec<(String, Value)> = map.into_iter().collect();
            entries.sort_by(|a, b| a.0.cmp(&b.0));
            Value::Object(entries.into_iter().map(|(k, v)| (k, sort_keys(v))).collect())
        }
        Value::Array(items) => Value::Array(items.into_iter().map(sort_keys).collect()),
        other => other,
    }
}
