//! Fixtures and independent reference implementations shared by the
//! integration and acceptance tests.

#![allow(dead_code)]

use std::collections::{BTreeMap, BTreeSet};
use std::sync::{Arc, Mutex};

use membox::embedding::{EmbeddingTable, EmbeddingVector, ScriptedEmbedder, SourceKind};
use membox::eval::{Category, Conversation, QaInstance};
use membox::gateway::{
    BackendError, CallKind, ChatRequest, ChatResponse, FnBackend, Matcher, ScriptEntry, ScriptedBackend,
};
use membox::model::{BoxState, MemBox, Message, Trace, TraceEvent};
use membox::{BoxId, EmbeddingId, Embedder, EventId, Gateway, MemoryStore, TraceId};
use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn message(conv: &str, i: usize, speaker: &str, text: &str) -> Message {
    Message {
        id: format!("D1:{}", i + 1),
        conversation_id: conv.to_string(),
        session_id: "session_1".to_string(),
        speaker: speaker.to_string(),
        text: text.to_string(),
        timestamp: Some("1:56 pm on 8 May, 2023".to_string()),
        turn_index: i as u64,
    }
}

// ---------------------------------------------------------------------------
// 30-message segmentation fixture

/// Continuity labels in classifier-call order. The comment names the message
/// each call classifies; see `SEG_PARTITION` for the resulting boxes.
pub const SEG_LABELS: [&str; 22] = [
    "Yes",               // m2
    "Yes",               // m3
    "Yes",               // m4
    "No",                // m5  seals box 0
    "Yes",               // m7
    "Yes",               // m8
    "Yes",               // m9
    "Partially Shifted", // m10 seals box 1
    "No",                // m12 seals box 2 (m11 was appended without a call)
    "Yes",               // m14
    "Yes",               // m15
    "Yes",               // m16
    "Yes",               // m17
    "Yes",               // m18
    "Partially Shifted", // m19 seals box 3
    "No",                // m21 seals box 4
    "Yes",               // m23
    "Yes",               // m24
    "No",                // m25 seals box 5
    "Yes",               // m27
    "Yes",               // m28
    "No",                // m29 seals box 6; box 7 = {m29} is force-sealed at end of stream
];

/// Hand-traced partition, inclusive message ranges.
pub const SEG_PARTITION: [(usize, usize); 8] =
    [(0, 4), (5, 9), (10, 11), (12, 18), (19, 20), (21, 24), (25, 28), (29, 29)];

/// Messages appended without a classifier call: the second message of every
/// box that reached two messages.
pub const SEG_UNCONDITIONAL: [usize; 7] = [1, 6, 11, 13, 20, 22, 26];

const SEG_TOPICS: [&str; 8] = [
    "hiking trip",
    "pottery class",
    "job interview",
    "adopting a dog",
    "tax forms",
    "birthday party",
    "guitar lessons",
    "moving house",
];

pub fn segmentation_conversation() -> Conversation {
    let mut messages = Vec::new();
    for (b, &(start, end)) in SEG_PARTITION.iter().enumerate() {
        for i in start..=end {
            let speaker = if i % 2 == 0 { "Caroline" } else { "Melanie" };
            let text = if i == 11 {
                // Off-topic second message: kept with its box by the one-message rule.
                "Unrelated, but did you see the game last night?".to_string()
            } else {
                format!("Turn {i} about the {} with detail number {}", SEG_TOPICS[b], i * 7 % 13)
            };
            messages.push(message("seg", i, speaker, &text));
        }
    }
    Conversation {
        id: "seg".into(),
        messages,
    }
}

pub fn seg_descriptor(b: usize) -> String {
    let topic = SEG_TOPICS[b];
    serde_json::json!({
        "keywords": [topic, format!("box{b}"), "plans"],
        "topic": format!("Talking about the {topic}"),
        "explicit_mentions": [format!("Caroline mentioned the {topic}"), format!("Melanie asked about the {topic}")],
    })
    .to_string()
}

pub fn segmentation_script() -> Vec<ScriptEntry> {
    let mut entries: Vec<ScriptEntry> = SEG_LABELS
        .iter()
        .enumerate()
        .map(|(i, l)| ScriptEntry::new(CallKind::MsgContinuation, Some(Matcher::Index(i as u64)), *l))
        .collect();
    for b in 0..SEG_PARTITION.len() {
        entries.push(ScriptEntry::new(
            CallKind::DialogExtract,
            Some(Matcher::Index(b as u64)),
            seg_descriptor(b),
        ));
    }
    entries.push(ScriptEntry::new(
        CallKind::TraceInit,
        None,
        r#"{"primary_chain": [], "secondary_chains": [], "isolated_events": [], "chain_summary": ""}"#,
    ));
    entries.push(ScriptEntry::new(
        CallKind::TraceEventFilter,
        None,
        r#"{"chain_summary": "", "related_events": [], "unrelated_events": []}"#,
    ));
    entries
}

pub fn segmentation_gateway() -> Gateway {
    Gateway::new(Arc::new(ScriptedBackend::new(segmentation_script())))
}

// ---------------------------------------------------------------------------
// Independent vector oracles

pub fn naive_cosine(a: &[f64], b: &[f64]) -> f64 {
    let mut dot = 0.0;
    let mut na = 0.0;
    let mut nb = 0.0;
    for i in 0..a.len() {
        dot += a[i] * b[i];
        na += a[i] * a[i];
        nb += b[i] * b[i];
    }
    dot / (na.sqrt() * nb.sqrt())
}

pub fn random_unit(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-6 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

fn put_vector(store: &mut MemoryStore, values: Vec<f64>, text: &str, kind: SourceKind) -> EmbeddingId {
    let id = store.counters.embedding_id();
    store.embeddings.insert(
        id,
        EmbeddingVector {
            id,
            dim: values.len(),
            values,
            source_text: text.to_string(),
            source_kind: kind,
            embedder: "seeded-test".into(),
        },
    );
    id
}

/// A store with random traces over random event vectors; some events are shared by several traces.
pub struct VotingInstance {
    pub store: MemoryStore,
    pub queries: Vec<Vec<f64>>,
}

pub fn voting_instance(rng: &mut ChaCha8Rng, dim: usize) -> VotingInstance {
    let mut store = MemoryStore::new();
    let n_traces = rng.random_range(1..=20);
    let mut all_events: Vec<EventId> = Vec::new();
    let box_id = BoxId(0);
    for t in 0..n_traces {
        let n_events = rng.random_range(1..=10);
        let mut events = Vec::new();
        for _ in 0..n_events {
            let reuse = !all_events.is_empty() && rng.random_bool(0.15);
            let eid = if reuse {
                *all_events.choose(rng).unwrap()
            } else {
                // Occasionally duplicate an existing vector to create exact ties.
                let values = if !all_events.is_empty() && rng.random_bool(0.1) {
                    let other = all_events.choose(rng).unwrap();
                    let emb = store.trace_events[other].embedding_id;
                    store.embeddings[&emb].values.clone()
                } else {
                    random_unit(rng, dim)
                };
                let eid = store.counters.event_id();
                let text = format!("event {}", eid.0);
                let embedding_id = put_vector(&mut store, values, &text, SourceKind::Event);
                store.trace_events.insert(
                    eid,
                    TraceEvent {
                        id: eid,
                        text,
                        source_box_id: box_id,
                        box_timestamp: None,
                        embedding_id,
                        box_index: 0,
                        position: eid.0 as u32,
                    },
                );
                all_events.push(eid);
                eid
            };
            if !events.contains(&eid) {
                events.push(eid);
            }
        }
        let id = TraceId(t as u64 * 3 + 1);
        store.traces.insert(
            id,
            Trace {
                id,
                conversation_id: "v".into(),
                events,
                summary: None,
                created_at: t as u64,
            },
        );
    }
    let n_queries = rng.random_range(1..=10);
    let mut queries = Vec::new();
    for _ in 0..n_queries {
        if rng.random_bool(0.2) {
            let e = all_events.choose(rng).unwrap();
            let emb = store.trace_events[e].embedding_id;
            queries.push(store.embeddings[&emb].values.clone());
        } else {
            queries.push(random_unit(rng, dim));
        }
    }
    VotingInstance { store, queries }
}

/// Exhaustive max-of-max scan: every (trace, event) pair, best cosine, ties to
/// the smaller trace id then the smaller event id.
pub fn oracle_nearest(store: &MemoryStore, query: &[f64]) -> (TraceId, EventId, f64) {
    let mut pairs: Vec<(f64, TraceId, EventId)> = Vec::new();
    for t in store.traces.values() {
        for e in &t.events {
            let v = &store.embeddings[&store.trace_events[e].embedding_id].values;
            pairs.push((naive_cosine(query, v).clamp(-1.0, 1.0), t.id, *e));
        }
    }
    let best = pairs.iter().map(|p| p.0).fold(f64::NEG_INFINITY, f64::max);
    let (s, t, e) = pairs
        .into_iter()
        .filter(|p| p.0 == best)
        .min_by_key(|p| (p.1, p.2))
        .unwrap();
    (t, e, s)
}

/// Exhaustive box ranking with the same tie rule as retrieval.
pub fn oracle_top_k(store: &MemoryStore, query: &[f64], k: usize, mean: bool) -> Vec<(BoxId, f64)> {
    let mut scored: Vec<(BoxId, u64, f64)> = Vec::new();
    for b in store.boxes.values().filter(|b| b.state == BoxState::Sealed) {
        let Some(emb) = &b.embeddings else { continue };
        let ids: Vec<EmbeddingId> = emb.all().collect();
        if ids.is_empty() {
            continue;
        }
        let sims: Vec<f64> = ids
            .iter()
            .map(|id| naive_cosine(query, &store.embeddings[id].values).clamp(-1.0, 1.0))
            .collect();
        let s = if mean {
            sims.iter().sum::<f64>() / sims.len() as f64
        } else {
            sims.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
        };
        scored.push((b.id, b.box_index, s));
    }
    // Selection by repeated scan rather than sorting.
    let mut out = Vec::new();
    let mut taken = BTreeSet::new();
    for _ in 0..k.min(scored.len()) {
        let mut best: Option<&(BoxId, u64, f64)> = None;
        for c in scored.iter().filter(|c| !taken.contains(&c.0)) {
            best = match best {
                None => Some(c),
                Some(b) if c.2 > b.2 || (c.2 == b.2 && c.1 < b.1) => Some(c),
                keep => keep,
            };
        }
        let b = best.unwrap();
        taken.insert(b.0);
        out.push((b.0, b.2));
    }
    out
}

/// A store of sealed boxes with random vectors, for ranking properties.
pub fn random_box_store(rng: &mut ChaCha8Rng, n_boxes: usize, dim: usize) -> MemoryStore {
    let mut store = MemoryStore::new();
    for i in 0..n_boxes {
        let id = store.counters.box_id();
        let mut emb = membox::model::BoxEmbeddings::default();
        for _ in 0..rng.random_range(1..=3) {
            emb.messages.push(put_vector(&mut store, random_unit(rng, dim), "m", SourceKind::Message));
        }
        if rng.random_bool(0.8) {
            emb.topic = Some(put_vector(&mut store, random_unit(rng, dim), "t", SourceKind::Topic));
        }
        for _ in 0..rng.random_range(0..=2) {
            emb.events.push(put_vector(&mut store, random_unit(rng, dim), "e", SourceKind::Event));
        }
        if rng.random_bool(0.1) && i > 0 {
            // Exact duplicate of an earlier box's first vector, to exercise ties.
            let earlier = store.boxes.values().next().unwrap().embeddings.as_ref().unwrap().messages[0];
            emb.keywords.push(earlier);
        }
        store.boxes.insert(
            id,
            MemBox {
                id,
                conversation_id: "r".into(),
                state: BoxState::Sealed,
                messages: vec![message("r", i, "A", &format!("box {i}"))],
                descriptor: None,
                sealed_at: None,
                box_index: id.0,
                embeddings: Some(emb),
                event_ids: vec![],
            },
        );
    }
    store
}

// ---------------------------------------------------------------------------
// Naive metric references, transcribed from the definitions

pub fn naive_tokens(s: &str, drop_articles: bool) -> Vec<String> {
    let mut cleaned = String::new();
    for c in s.chars() {
        if c.is_ascii_punctuation() {
            continue;
        }
        for l in c.to_lowercase() {
            cleaned.push(l);
        }
    }
    let mut out = Vec::new();
    for t in cleaned.split_whitespace() {
        if drop_articles && (t == "a" || t == "an" || t == "the") {
            continue;
        }
        out.push(t.to_string());
    }
    out
}

/// Multiset overlap by removing each matched gold token from a working list.
fn naive_overlap(pred: &[String], gold: &[String]) -> usize {
    let mut remaining: Vec<String> = gold.to_vec();
    let mut n = 0;
    for p in pred {
        if let Some(pos) = remaining.iter().position(|g| g == p) {
            remaining.remove(pos);
            n += 1;
        }
    }
    n
}

pub fn naive_f1(pred: &str, gold: &str) -> f64 {
    let p = naive_tokens(pred, true);
    let g = naive_tokens(gold, true);
    if p.is_empty() && g.is_empty() {
        return 1.0;
    }
    if p.is_empty() || g.is_empty() {
        return 0.0;
    }
    let o = naive_overlap(&p, &g);
    if o == 0 {
        return 0.0;
    }
    let precision = o as f64 / p.len() as f64;
    let recall = o as f64 / g.len() as f64;
    2.0 * precision * recall / (precision + recall)
}

pub fn naive_bleu1(pred: &str, gold: &str) -> f64 {
    let p = naive_tokens(pred, false);
    let g = naive_tokens(gold, false);
    if p.is_empty() {
        return 0.0;
    }
    let precision = naive_overlap(&p, &g) as f64 / p.len() as f64;
    let bp = if p.len() < g.len() {
        (1.0 - g.len() as f64 / p.len() as f64).exp()
    } else {
        1.0
    };
    precision * bp
}

const VOCAB: [&str; 16] = [
    "the", "a", "an", "Basketball", "basketball", "park", "Paris", "7", "May,", "2023", "dog's", "blue", "run", "RUN",
    "ran.", "éclair",
];

pub fn random_sentence(rng: &mut ChaCha8Rng) -> String {
    let n = rng.random_range(0..=8);
    let mut s = String::new();
    for i in 0..n {
        if i > 0 {
            s.push_str([" ", "  ", "\t", " - "].choose(rng).unwrap());
        }
        s.push_str(VOCAB.choose(rng).unwrap());
        if rng.random_bool(0.1) {
            s.push_str([",", "!", "?", "'s"].choose(rng).unwrap());
        }
    }
    s
}

// ---------------------------------------------------------------------------
// Randomized weaver runs

/// JSON array following `marker` in a prompt, as rendered by the gateway.
pub fn list_after(prompt: &str, marker: &str) -> Vec<String> {
    let start = prompt.rfind(marker).expect("marker in prompt") + marker.len();
    let mut it = serde_json::Deserializer::from_str(&prompt[start..]).into_iter::<Vec<String>>();
    it.next().expect("list present").expect("list parses")
}

/// Randomized but seeded model: random labels, random events drawn from a
/// small pool (so traces recur), and verification/initialization answers that
/// mix correct, re-cased, unknown and dropped strings. Verification calls fail
/// outright now and then; initialization always answers.
pub fn chaotic_backend(seed: u64) -> FnBackend {
    let rng = Mutex::new(rng(seed));
    let pool: Vec<String> = (0..12).map(|i| format!("event number {i}")).collect();
    FnBackend::new("chaotic", move |req: &ChatRequest<'_>| {
        let mut rng = rng.lock().unwrap();
        let text = match req.kind {
            CallKind::MsgContinuation => ["Yes", "Yes", "No", "Partially Shifted"].choose(&mut *rng).unwrap().to_string(),
            CallKind::DialogExtract => {
                let n = rng.random_range(0..=4);
                let mut events: Vec<String> = (0..n).map(|_| pool.choose(&mut *rng).unwrap().clone()).collect();
                if rng.random_bool(0.2) {
                    events.push(format!("unique happening {}", rng.random_range(0..1_000_000)));
                }
                serde_json::json!({"keywords": ["k"], "topic": "topic", "explicit_mentions": events}).to_string()
            }
            CallKind::TraceEventFilter => {
                if rng.random_bool(0.15) {
                    return Err(BackendError::Fatal("verification unavailable".into()));
                }
                let b = list_after(req.prompt, "Event List B: ");
                let mut related = Vec::new();
                let mut unrelated = Vec::new();
                for e in b {
                    let e = if rng.random_bool(0.2) { e.to_uppercase() } else { e };
                    if rng.random_bool(0.5) {
                        related.push(e);
                    } else if rng.random_bool(0.7) {
                        unrelated.push(e);
                    }
                }
                if rng.random_bool(0.2) {
                    related.push("something the model made up".into());
                }
                serde_json::json!({"chain_summary": "s", "related_events": related, "unrelated_events": unrelated})
                    .to_string()
            }
            CallKind::TraceInit => {
                let mut events = list_after(req.prompt, "Events: ");
                events.shuffle(&mut *rng);
                let mut primary = Vec::new();
                let mut secondary: Vec<Vec<String>> = Vec::new();
                let mut isolated = Vec::new();
                for e in events {
                    match rng.random_range(0..5) {
                        0 | 1 => primary.push(e),
                        2 => match secondary.last_mut() {
                            Some(c) if rng.random_bool(0.5) => c.push(e),
                            _ => secondary.push(vec![e]),
                        },
                        3 => isolated.push(e.to_lowercase()),
                        _ => {} // dropped by the model
                    }
                }
                if rng.random_bool(0.2) {
                    primary.push("hallucinated event".into());
                }
                serde_json::json!({
                    "primary_chain": primary,
                    "secondary_chains": secondary,
                    "isolated_events": isolated,
                    "chain_summary": "summary"
                })
                .to_string()
            }
            _ => "ok".to_string(),
        };
        Ok(ChatResponse::text(text))
    })
}

pub fn chaotic_conversation(rng: &mut ChaCha8Rng, id: &str) -> Conversation {
    let n = rng.random_range(6..=24);
    Conversation {
        id: id.to_string(),
        messages: (0..n)
            .map(|i| message(id, i, if i % 2 == 0 { "A" } else { "B" }, &format!("{id} says thing {i}")))
            .collect(),
    }
}

// ---------------------------------------------------------------------------
// End-to-end QA fixture: ten topics, one per box, one question per box

pub const QA_ANSWERS: [&str; 10] = [
    "seven days",
    "blue bicycle",
    "grandmother Rosa",
    "Lisbon harbour",
    "chess tournament",
    "lemon cake",
    "violin recital",
    "marathon training",
    "oak bookshelf",
    "night shift",
];

pub fn qa_conversation() -> Conversation {
    let mut messages = Vec::new();
    for (b, ans) in QA_ANSWERS.iter().enumerate() {
        messages.push(message("qa-conv", 2 * b, "A", &format!("Let me tell you about subject{b}.")));
        messages.push(message("qa-conv", 2 * b + 1, "B", &format!("FACT: {ans}")));
    }
    Conversation {
        id: "qa-conv".into(),
        messages,
    }
}

pub fn qa_question(b: usize) -> String {
    format!("What do we know about subject{b}?")
}

pub fn qa_instances() -> Vec<QaInstance> {
    let cats = [Category::SingleHop, Category::MultiHop, Category::Temporal, Category::OpenDomain];
    (0..QA_ANSWERS.len())
        .map(|b| QaInstance {
            question: qa_question(b),
            gold_answer: QA_ANSWERS[b].to_string(),
            category: cats[b % cats.len()],
            conversation_id: "qa-conv".into(),
        })
        .collect()
}

/// Every box opens on its first message, so each later box-opener is a "No".
pub fn qa_script() -> Vec<ScriptEntry> {
    let mut entries = vec![ScriptEntry::new(CallKind::MsgContinuation, None, "No")];
    for b in 0..QA_ANSWERS.len() {
        entries.push(ScriptEntry::new(
            CallKind::DialogExtract,
            Some(Matcher::Index(b as u64)),
            serde_json::json!({"keywords": [], "topic": format!("topic of subject{b}"), "explicit_mentions": []})
                .to_string(),
        ));
    }
    entries
}

/// Scripted construction plus a QA responder that copies the first FACT line of its context.
pub fn qa_gateway() -> Gateway {
    let scripted = ScriptedBackend::new(qa_script());
    Gateway::new(Arc::new(FnBackend::new("qa-fixture", move |req: &ChatRequest<'_>| {
        use membox::gateway::ChatBackend;
        if req.kind != CallKind::Qa {
            return scripted.chat(req);
        }
        let ctx = req.prompt.split("Context:\n").nth(1).unwrap_or("");
        let fact = ctx
            .lines()
            .find_map(|l| l.split("FACT: ").nth(1))
            .unwrap_or("unknown");
        Ok(ChatResponse::text(fact))
    })))
}

/// One-hot retrieval script: question b and topic b share axis b; every other
/// text gets its own axis, so the right box is the unique top hit.
pub fn qa_embedding_table() -> EmbeddingTable {
    let dim = 64;
    let one_hot = |axis: usize| {
        let mut v = vec![0.0; dim];
        v[axis] = 1.0;
        v
    };
    let mut vectors = std::collections::HashMap::new();
    let conv = qa_conversation();
    for (i, m) in conv.messages.iter().enumerate() {
        vectors.insert(m.text.clone(), one_hot(QA_ANSWERS.len() + i));
    }
    for b in 0..QA_ANSWERS.len() {
        vectors.insert(qa_question(b), one_hot(b));
        vectors.insert(format!("topic of subject{b}"), one_hot(b));
    }
    EmbeddingTable { dim, vectors }
}

pub fn qa_embedder(table: EmbeddingTable) -> Embedder {
    Embedder::new(Arc::new(ScriptedEmbedder::new(table).unwrap()))
}

pub fn qa_stores(embedder: &Embedder) -> BTreeMap<String, MemoryStore> {
    let (store, _) = membox::pipeline::build_store(
        &qa_conversation(),
        &qa_gateway(),
        embedder,
        membox::LoomConfig::default(),
        None,
    )
    .unwrap();
    BTreeMap::from([("qa-conv".to_string(), store)])
}

// ---------------------------------------------------------------------------
// 100-box store for context-budget properties

/// Three messages per box; a message tagged `[new]` is labelled a shift.
/// Every box mentions one private event and one of seven recurring events,
/// and verification accepts recurring events, so traces span many boxes.
pub fn budget_conversation(n_boxes: usize) -> Conversation {
    let mut messages = Vec::new();
    for b in 0..n_boxes {
        for j in 0..3 {
            let i = 3 * b + j;
            let tag = if j == 0 { "[new] " } else { "" };
            let text = format!("{tag}box{b} line {j} talks about item{} and more words here", (b * 31 + j) % 17);
            messages.push(message("budget", i, if i % 2 == 0 { "A" } else { "B" }, &text));
        }
    }
    Conversation {
        id: "budget".into(),
        messages,
    }
}

pub fn budget_backend() -> FnBackend {
    FnBackend::new("budget", |req: &ChatRequest<'_>| {
        let text = match req.kind {
            CallKind::MsgContinuation => {
                let curr = req.prompt.split("current message: ").nth(1).unwrap_or("");
                if curr.contains("[new]") { "No" } else { "Yes" }.to_string()
            }
            CallKind::DialogExtract => {
                let content = req.prompt.split("Content to analyze: ").nth(1).unwrap_or("");
                let b: usize = content
                    .split("box")
                    .nth(1)
                    .and_then(|s| s.split_whitespace().next())
                    .and_then(|s| s.parse().ok())
                    .unwrap_or(0);
                serde_json::json!({
                    "keywords": [format!("kw{b}"), format!("item{}", b % 17)],
                    "topic": format!("subject number {b}"),
                    "explicit_mentions": [format!("private happening {b}"), format!("recurring happening {}", b % 7)],
                })
                .to_string()
            }
            CallKind::TraceEventFilter => {
                let chain = list_after(req.prompt, "Event Chain A: ");
                let b = list_after(req.prompt, "Event List B: ");
                let related: Vec<&String> = b.iter().filter(|e| chain.contains(e)).collect();
                serde_json::json!({"chain_summary": "s", "related_events": related}).to_string()
            }
            CallKind::TraceInit => {
                let events = list_after(req.prompt, "Events: ");
                let (rec, other): (Vec<String>, Vec<String>) =
                    events.into_iter().partition(|e| e.starts_with("recurring"));
                serde_json::json!({
                    "primary_chain": rec,
                    "isolated_events": other,
                    "chain_summary": "recurring matters"
                })
                .to_string()
            }
            _ => "ok".to_string(),
        };
        Ok(ChatResponse::text(text))
    })
}

pub fn budget_store(n_boxes: usize) -> MemoryStore {
    let gw = Gateway::new(Arc::new(budget_backend()));
    let (store, _) = membox::pipeline::build_store(
        &budget_conversation(n_boxes),
        &gw,
        &Embedder::hash(32),
        membox::LoomConfig::default(),
        None,
    )
    .unwrap();
    store
}

// ---------------------------------------------------------------------------
// Sealed but unlinked boxes with chosen events

/// One two-message box per entry of `events`, sealed and left pending
/// linking. Box `b` is dated "day {b}" and has topic "topic {b}".
pub fn store_with_boxes(events: &[&[&str]], embedder: &Embedder) -> MemoryStore {
    let mut entries = vec![ScriptEntry::new(CallKind::MsgContinuation, None, "No")];
    for (b, evs) in events.iter().enumerate() {
        entries.push(ScriptEntry::new(
            CallKind::DialogExtract,
            Some(Matcher::Index(b as u64)),
            serde_json::json!({"keywords": [], "topic": format!("topic {b}"), "explicit_mentions": evs}).to_string(),
        ));
    }
    let gw = Gateway::new(Arc::new(ScriptedBackend::new(entries)));
    let loom = membox::TopicLoom::new(&gw, embedder).with_config(membox::LoomConfig {
        fail_open: false,
        link_on_seal: false,
    });
    let mut store = MemoryStore::new();
    let h = store.open_conversation("c").unwrap();
    for b in 0..events.len() {
        for j in 0..2 {
            let msg = membox::NewMessage::new(if j == 0 { "A" } else { "B" }, format!("box {b} message {j}"))
                .session(format!("session_{}", b + 1))
                .at(format!("day {b}"));
            store.append_message(&h, msg).unwrap();
        }
    }
    loom.finish(&mut store, &h).unwrap();
    store
}

/// Embedder mapping the listed texts to fixed vectors; anything else hashes.
pub fn table_embedder(dim: usize, entries: &[(&str, Vec<f64>)]) -> Embedder {
    let vectors = entries.iter().map(|(t, v)| (t.to_string(), v.clone())).collect();
    Embedder::new(Arc::new(ScriptedEmbedder::new(EmbeddingTable { dim, vectors }).unwrap()))
}

pub fn axis(dim: usize, i: usize) -> Vec<f64> {
    let mut v = vec![0.0; dim];
    v[i] = 1.0;
    v
}

pub fn scripted(entries: Vec<ScriptEntry>) -> Gateway {
    Gateway::new(Arc::new(ScriptedBackend::new(entries)))
}

pub fn count_calls(gw: &Gateway, kind: CallKind) -> usize {
    gw.records().iter().filter(|r| r.prompt_name == kind).count()
}
