//! Memory accounting and the QA evaluation report.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::locomo::{Category, QaInstance};
use super::metrics::{bleu1, token_f1};
use crate::embedding::Embedder;
use crate::gateway::{whitespace_tokens, Gateway};
use crate::ids::BoxId;
use crate::model::{MemoryStore, UsageTotals};
use crate::retrieval::{answer, RetrievalConfig, RetrievalError};

/// Whitespace tokens a sealed box contributes to memory: its message texts
/// plus topic, events and keywords.
pub fn box_memory_tokens(b: &crate::model::MemBox) -> u64 {
    let mut n: u64 = b.messages.iter().map(|m| whitespace_tokens(&m.text)).sum();
    if let Some(d) = &b.descriptor {
        n += whitespace_tokens(&d.topic);
        n += d.events.iter().map(|e| whitespace_tokens(e)).sum::<u64>();
        n += d.keywords.iter().map(|k| whitespace_tokens(k)).sum::<u64>();
    }
    n
}

fn ratio(num: f64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num / den as f64
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MemoryStats {
    pub utterances: u64,
    pub mb_count: u64,
    pub dialogue_tokens: u64,
    pub memory_tokens: u64,
    pub box_construction: UsageTotals,
    pub linking: UsageTotals,
    pub trace_count: u64,
    pub tok_ratio: f64,
    pub utter_per_mb: f64,
    /// Memory tokens per box.
    pub tok_per_mb: f64,
    /// Box-construction LLM tokens per utterance.
    pub llm_tok_per_utterance: f64,
    /// Box-construction LLM tokens per box.
    pub llm_tok_per_mb: f64,
    /// Linking calls per box.
    pub calls_per_mb: f64,
    /// Linking LLM tokens per box.
    pub tok_per_mb_linking: f64,
    pub empty: bool,
}

impl MemoryStats {
    pub fn from_counts(
        utterances: u64,
        mb_count: u64,
        dialogue_tokens: u64,
        memory_tokens: u64,
        box_construction: UsageTotals,
        linking: UsageTotals,
    ) -> Self {
        Self {
            utterances,
            mb_count,
            dialogue_tokens,
            memory_tokens,
            box_construction,
            linking,
            trace_count: 0,
            tok_ratio: ratio(memory_tokens as f64, dialogue_tokens),
            utter_per_mb: ratio(utterances as f64, mb_count),
            tok_per_mb: ratio(memory_tokens as f64, mb_count),
            llm_tok_per_utterance: ratio(box_construction.tokens() as f64, utterances),
            llm_tok_per_mb: ratio(box_construction.tokens() as f64, mb_count),
            calls_per_mb: ratio(linking.calls as f64, mb_count),
            tok_per_mb_linking: ratio(linking.tokens() as f64, mb_count),
            empty: mb_count == 0,
        }
    }

    /// Counts sealed boxes only; messages still pending or in an open box are ignored.
    pub fn from_store(store: &MemoryStore) -> Self {
        Self::from_stores([store])
    }

    pub fn from_stores<'a>(stores: impl IntoIterator<Item = &'a MemoryStore>) -> Self {
        let (mut utt, mut mb, mut dtok, mut mtok, mut traces) = (0, 0, 0, 0, 0);
        let mut bc = UsageTotals::default();
        let mut link = UsageTotals::default();
        for s in stores {
            for b in s.sealed_boxes() {
                mb += 1;
                utt += b.messages.len() as u64;
                dtok += b.messages.iter().map(|m| whitespace_tokens(&m.text)).sum::<u64>();
                mtok += box_memory_tokens(b);
            }
            traces += s.traces.len() as u64;
            add(&mut bc, &s.accounting.box_construction);
            add(&mut link, &s.accounting.linking);
        }
        let mut stats = Self::from_counts(utt, mb, dtok, mtok, bc, link);
        stats.trace_count = traces;
        stats
    }

    pub fn to_table(&self) -> String {
        let mut out = String::new();
        if self.empty {
            out.push_str("empty: true (no sealed boxes)\n");
        }
        for (k, v) in [
            ("utterances", self.utterances.to_string()),
            ("tok_ratio", format!("{:.3}", self.tok_ratio)),
            ("mb_count", self.mb_count.to_string()),
            ("utter_per_mb", format!("{:.3}", self.utter_per_mb)),
            ("tok_per_mb", format!("{:.3}", self.tok_per_mb)),
            ("traces", self.trace_count.to_string()),
            ("llm_tok_per_mb", format!("{:.2}", self.llm_tok_per_mb)),
            ("llm_tok_per_utterance", format!("{:.2}", self.llm_tok_per_utterance)),
            ("calls_per_mb_linking", format!("{:.3}", self.calls_per_mb)),
            ("tok_per_mb_linking", format!("{:.3}", self.tok_per_mb_linking)),
        ] {
            let _ = writeln!(out, "{k:<22} {v}");
        }
        out
    }
}

fn add(acc: &mut UsageTotals, u: &UsageTotals) {
    acc.calls += u.calls;
    acc.failed_calls += u.failed_calls;
    acc.input_tokens += u.input_tokens;
    acc.output_tokens += u.output_tokens;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstanceRecord {
    pub conversation_id: String,
    pub question: String,
    pub gold_answer: String,
    pub category: Category,
    pub prediction: String,
    pub f1: f64,
    pub bleu1: f64,
    pub ctx_tok: u64,
    pub retrieved: Vec<BoxId>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategoryRow {
    /// Category name or `overall`.
    pub category: String,
    pub avg_f1: f64,
    pub avg_bleu: f64,
    pub avg_ctx_tok: f64,
    pub count: usize,
}

impl CategoryRow {
    fn of(category: &str, records: &[&InstanceRecord]) -> Self {
        let n = records.len();
        let mean = |f: &dyn Fn(&InstanceRecord) -> f64| {
            if n == 0 {
                0.0
            } else {
                records.iter().map(|r| f(r)).sum::<f64>() / n as f64
            }
        };
        Self {
            category: category.to_string(),
            avg_f1: mean(&|r| r.f1),
            avg_bleu: mean(&|r| r.bleu1),
            avg_ctx_tok: mean(&|r| r.ctx_tok as f64),
            count: n,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub method: String,
    pub top_n: usize,
    pub text_mode: String,
    /// Categories with at least one instance, in fixed order, then `overall`.
    pub rows: Vec<CategoryRow>,
    pub accounting: MemoryStats,
    pub qa_usage: UsageTotals,
    /// One per input instance, in input order.
    pub records: Vec<InstanceRecord>,
}

impl MetricsReport {
    pub fn assemble(
        method: &str,
        retrieval: &RetrievalConfig,
        records: Vec<InstanceRecord>,
        accounting: MemoryStats,
        qa_usage: UsageTotals,
    ) -> Self {
        let mut rows = Vec::new();
        for c in Category::ALL {
            let subset: Vec<&InstanceRecord> = records.iter().filter(|r| r.category == c).collect();
            if !subset.is_empty() {
                rows.push(CategoryRow::of(c.as_str(), &subset));
            }
        }
        let all: Vec<&InstanceRecord> = records.iter().collect();
        rows.push(CategoryRow::of("overall", &all));
        Self {
            method: method.to_string(),
            top_n: retrieval.top_k,
            text_mode: retrieval.text_mode.as_str().to_string(),
            rows,
            accounting,
            qa_usage,
            records,
        }
    }

    pub fn overall(&self) -> &CategoryRow {
        self.rows.last().expect("overall row always present")
    }

    pub fn row(&self, category: &str) -> Option<&CategoryRow> {
        self.rows.iter().find(|r| r.category == category)
    }

    pub fn to_json_string(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }

    /// Aligned plain-text table: Method, topn, text_mode, category, avg_f1, avg_bleu, avg_ctx_tok, count.
    pub fn to_table(&self) -> String {
        let header = ["Method", "topn", "text_mode", "category", "avg_f1", "avg_bleu", "avg_ctx_tok", "count"];
        let mut lines: Vec<[String; 8]> = vec![header.map(str::to_string)];
        for r in &self.rows {
            lines.push([
                self.method.clone(),
                self.top_n.to_string(),
                self.text_mode.clone(),
                r.category.clone(),
                format!("{:.2}", r.avg_f1 * 100.0),
                format!("{:.2}", r.avg_bleu * 100.0),
                format!("{:.2}", r.avg_ctx_tok),
                r.count.to_string(),
            ]);
        }
        let mut widths = [0usize; 8];
        for l in &lines {
            for (w, cell) in widths.iter_mut().zip(l) {
                *w = (*w).max(cell.chars().count());
            }
        }
        let mut out = String::new();
        for l in &lines {
            let cells: Vec<String> = l
                .iter()
                .zip(widths)
                .enumerate()
                .map(|(i, (c, w))| if i < 4 { format!("{c:<w$}") } else { format!("{c:>w$}") })
                .collect();
            out.push_str(cells.join("  ").trim_end());
            out.push('\n');
        }
        out
    }
}

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error("no store for conversation `{0}`")]
    MissingStore(String),
    #[error("answering {question:?} ({conversation_id}): {source}")]
    Answer {
        conversation_id: String,
        question: String,
        source: RetrievalError,
    },
    #[error("building worker pool: {0}")]
    Pool(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub method: String,
    pub retrieval: RetrievalConfig,
    /// Worker threads; 0 uses the rayon default.
    pub jobs: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            method: "Membox".to_string(),
            retrieval: RetrievalConfig::default(),
            jobs: 0,
        }
    }
}

/// Answers every instance against its conversation's store and aggregates.
/// Instances run concurrently; the report does not depend on completion order.
pub fn run_eval(
    stores: &BTreeMap<String, MemoryStore>,
    qa: &[QaInstance],
    gateway: &Gateway,
    embedder: &Embedder,
    config: &EvalConfig,
) -> Result<MetricsReport, EvalError> {
    use rayon::prelude::*;

    if let Some(missing) = qa.iter().find(|q| !stores.contains_key(&q.conversation_id)) {
        return Err(EvalError::MissingStore(missing.conversation_id.clone()));
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(config.jobs)
        .build()
        .map_err(|e| EvalError::Pool(e.to_string()))?;
    let mark = gateway.ledger_len();
    let records: Vec<InstanceRecord> = pool.install(|| {
        qa.par_iter()
            .map(|q| {
                let store = &stores[&q.conversation_id];
                let a = answer(store, gateway, embedder, &q.question, &config.retrieval).map_err(|source| {
                    EvalError::Answer {
                        conversation_id: q.conversation_id.clone(),
                        question: q.question.clone(),
                        source,
                    }
                })?;
                Ok(InstanceRecord {
                    conversation_id: q.conversation_id.clone(),
                    question: q.question.clone(),
                    gold_answer: q.gold_answer.clone(),
                    category: q.category,
                    f1: token_f1(&a.prediction, &q.gold_answer),
                    bleu1: bleu1(&a.prediction, &q.gold_answer),
                    prediction: a.prediction,
                    ctx_tok: a.context_token_count,
                    retrieved: a.retrieved,
                })
            })
            .collect::<Result<_, EvalError>>()
    })?;

    let mut qa_usage = UsageTotals::default();
    for r in gateway.records_since(mark) {
        qa_usage.calls += 1;
        if r.outcome != crate::gateway::CallOutcome::Ok {
            qa_usage.failed_calls += 1;
        }
        qa_usage.input_tokens += r.input_token_count;
        qa_usage.output_tokens += r.output_token_count;
    }
    let referenced: Vec<&MemoryStore> = stores
        .iter()
        .filter(|(id, _)| qa.iter().any(|q| &q.conversation_id == *id))
        .map(|(_, s)| s)
        .collect();
    let accounting = MemoryStats::from_stores(referenced);
    Ok(MetricsReport::assemble(
        &config.method,
        &config.retrieval,
        records,
        accounting,
        qa_usage,
    ))
}
