//! Question answering over a built store: top-k box retrieval, context
//! assembly per text mode, and answer generation.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::embedding::{top_k_boxes, Aggregation, Embedder, EmbeddingError, ScoredBox};
use crate::gateway::prompts::render_qa_prompt;
use crate::gateway::{whitespace_tokens, Gateway, GatewayError, Purpose};
use crate::ids::{BoxId, TraceId};
use crate::loom::render_box_text;
use crate::model::{MemBox, MemoryStore, StoreError};
use crate::weaver::trace_timeline;

pub const TRACE_SECTION_HEADER: &str = "Event timelines:";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TextMode {
    #[default]
    Content,
    TraceEvent,
    ContentTraceEvent,
}

impl TextMode {
    pub fn as_str(self) -> &'static str {
        match self {
            TextMode::Content => "content",
            TextMode::TraceEvent => "trace_event",
            TextMode::ContentTraceEvent => "content_trace_event",
        }
    }
}

impl std::str::FromStr for TextMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "content" => Ok(TextMode::Content),
            "trace_event" => Ok(TextMode::TraceEvent),
            "content_trace_event" => Ok(TextMode::ContentTraceEvent),
            other => Err(format!(
                "unknown text mode `{other}` (expected content, trace_event or content_trace_event)"
            )),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RetrievalConfig {
    pub top_k: usize,
    pub text_mode: TextMode,
    pub aggregation: Aggregation,
}

impl Default for RetrievalConfig {
    fn default() -> Self {
        Self {
            top_k: 5,
            text_mode: TextMode::Content,
            aggregation: Aggregation::Max,
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum RetrievalError {
    #[error("question is empty")]
    EmptyQuestion,
    #[error("top_k must be at least 1")]
    ZeroTopK,
    #[error(transparent)]
    Embedding(#[from] EmbeddingError),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Gateway(#[from] GatewayError),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Context {
    pub text: String,
    pub token_count: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Answer {
    pub prediction: String,
    pub context_token_count: u64,
    pub retrieved: Vec<BoxId>,
    pub scores: Vec<f64>,
}

/// Embeds the question (not stored) and ranks sealed boxes against it.
pub fn retrieve(
    store: &MemoryStore,
    embedder: &Embedder,
    question: &str,
    config: &RetrievalConfig,
) -> Result<Vec<ScoredBox>, RetrievalError> {
    if question.trim().is_empty() {
        return Err(RetrievalError::EmptyQuestion);
    }
    if config.top_k == 0 {
        return Err(RetrievalError::ZeroTopK);
    }
    if store.sealed_boxes().next().is_none() {
        return Err(EmbeddingError::NoBoxes.into());
    }
    let query = embedder.vector(question)?;
    Ok(top_k_boxes(store, &query, config.top_k, config.aggregation)?)
}

fn box_header(b: &MemBox) -> Option<String> {
    let mut parts = Vec::new();
    if let Some(s) = b.session_id().filter(|s| !s.is_empty()) {
        parts.push(s.to_string());
    }
    if let Some(t) = b.first_timestamp() {
        parts.push(t.to_string());
    }
    (!parts.is_empty()).then(|| format!("[{}]", parts.join(" | ")))
}

fn content_section(store: &MemoryStore, retrieved: &[BoxId]) -> Result<String, StoreError> {
    let mut blocks = Vec::with_capacity(retrieved.len());
    for id in retrieved {
        let b = store.get_box(*id)?;
        let body = render_box_text(b);
        blocks.push(match box_header(b) {
            Some(h) => format!("{h}\n{body}"),
            None => body,
        });
    }
    Ok(blocks.join("\n\n"))
}

fn trace_section(store: &MemoryStore, retrieved: &[BoxId]) -> Result<String, StoreError> {
    let mut seen: BTreeSet<TraceId> = BTreeSet::new();
    let mut out = String::from(TRACE_SECTION_HEADER);
    for id in retrieved {
        let mut touching: Vec<TraceId> = store.traces_touching(*id).map(|t| t.id).collect();
        touching.sort();
        for tid in touching {
            if !seen.insert(tid) {
                continue;
            }
            let trace = store.get_trace(tid)?;
            out.push_str(&format!("\n[trace {tid}]"));
            if let Some(s) = &trace.summary {
                out.push_str(&format!(" {s}"));
            }
            for entry in trace_timeline(store, tid)? {
                out.push('\n');
                if let Some(ts) = &entry.box_timestamp {
                    out.push_str(&format!("({ts}) "));
                }
                out.push_str(&entry.text);
            }
        }
    }
    Ok(out)
}

pub fn assemble_context(
    store: &MemoryStore,
    retrieved: &[BoxId],
    mode: TextMode,
) -> Result<Context, StoreError> {
    let text = match mode {
        TextMode::Content => content_section(store, retrieved)?,
        TextMode::TraceEvent => trace_section(store, retrieved)?,
        TextMode::ContentTraceEvent => format!(
            "{}\n\n{}",
            content_section(store, retrieved)?,
            trace_section(store, retrieved)?
        ),
    };
    let token_count = whitespace_tokens(&text);
    Ok(Context { text, token_count })
}

pub fn answer(
    store: &MemoryStore,
    gateway: &Gateway,
    embedder: &Embedder,
    question: &str,
    config: &RetrievalConfig,
) -> Result<Answer, RetrievalError> {
    let ranked = retrieve(store, embedder, question, config)?;
    let ids: Vec<BoxId> = ranked.iter().map(|s| s.box_id).collect();
    let context = assemble_context(store, &ids, config.text_mode)?;
    let prompt = render_qa_prompt(&context.text, question);
    let prediction = gateway.complete(&prompt, Purpose::Qa)?.trim().to_string();
    Ok(Answer {
        prediction,
        context_token_count: context.token_count,
        retrieved: ids,
        scores: ranked.iter().map(|s| s.score).collect(),
    })
}
