//! Topic-continuity conversational memory.
//!
//! Messages are grouped into topic-coherent memory boxes by the [`loom`],
//! box events are linked into cross-box timelines by the [`weaver`], and
//! questions are answered over the result by [`retrieval`].

pub mod audit;
pub mod config;
pub mod embedding;
pub mod eval;
pub mod gateway;
pub mod ids;
pub mod loom;
pub mod model;
pub mod pipeline;
pub mod retrieval;
pub mod weaver;

pub use audit::{AuditEvent, AuditLog};
pub use config::Config;
pub use embedding::{cosine, nearest_trace, top_k_boxes, Aggregation, Embedder};
pub use gateway::Gateway;
pub use ids::{BoxId, EmbeddingId, EventId, TraceId};
pub use loom::{LoomConfig, LoomDecision, TopicLoom};
pub use model::{MemBox, MemoryStore, Message, NewMessage, Trace};
pub use retrieval::{answer, assemble_context, retrieve, RetrievalConfig, TextMode};
pub use weaver::{trace_timeline, LinkReport, TraceWeaver};
