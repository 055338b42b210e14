//! LoCoMo-style dataset loader.
//!
//! Expected shape (one sample object, or an array of them):
//!
//! ```json
//! {
//!   "sample_id": "conv-26",
//!   "conversation": {
//!     "speaker_a": "Caroline", "speaker_b": "Melanie",
//!     "session_1_date_time": "1:56 pm on 8 May, 2023",
//!     "session_1": [{"speaker": "Caroline", "dia_id": "D1:1", "text": "Hey Mel!"}]
//!   },
//!   "qa": [{"question": "...", "answer": "...", "category": 2}]
//! }
//! ```
//!
//! Sessions are read in file order, whatever their dates say.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::model::Message;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Category {
    MultiHop,
    Temporal,
    OpenDomain,
    SingleHop,
}

impl Category {
    pub const ALL: [Category; 4] = [
        Category::MultiHop,
        Category::Temporal,
        Category::OpenDomain,
        Category::SingleHop,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Category::MultiHop => "multi_hop",
            Category::Temporal => "temporal",
            Category::OpenDomain => "open_domain",
            Category::SingleHop => "single_hop",
        }
    }
}

/// Raw category label → evaluated category; `None` excludes the instance.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct CategoryMap(pub BTreeMap<String, Option<Category>>);

impl Default for CategoryMap {
    /// Numeric LoCoMo labels 1–5 plus their names; 5 is the adversarial set.
    fn default() -> Self {
        let mut m = BTreeMap::new();
        for (k, v) in [
            ("1", Some(Category::MultiHop)),
            ("2", Some(Category::Temporal)),
            ("3", Some(Category::OpenDomain)),
            ("4", Some(Category::SingleHop)),
            ("5", None),
            ("multi_hop", Some(Category::MultiHop)),
            ("temporal", Some(Category::Temporal)),
            ("open_domain", Some(Category::OpenDomain)),
            ("single_hop", Some(Category::SingleHop)),
            ("adversarial", None),
        ] {
            m.insert(k.to_string(), v);
        }
        CategoryMap(m)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QaInstance {
    pub question: String,
    pub gold_answer: String,
    pub category: Category,
    pub conversation_id: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Conversation {
    pub id: String,
    pub messages: Vec<Message>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Dataset {
    pub conversations: Vec<Conversation>,
    pub qa: Vec<QaInstance>,
    /// Instances whose category maps to "excluded".
    pub dropped_qa: usize,
    /// Turns with empty text.
    pub skipped_turns: usize,
}

#[derive(Debug, thiserror::Error)]
pub enum LoadError {
    #[error("reading {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("invalid JSON at line {line}, column {column}: {message}")]
    Syntax { line: usize, column: usize, message: String },
    #[error("schema violation at {path}: {message}")]
    Schema { path: String, message: String },
}

fn schema(path: &str, message: impl Into<String>) -> LoadError {
    LoadError::Schema {
        path: path.to_string(),
        message: message.into(),
    }
}

fn label_of(v: &Value) -> Option<String> {
    match v {
        Value::String(s) => Some(s.clone()),
        Value::Number(n) => Some(n.to_string()),
        _ => None,
    }
}

pub fn load(path: impl AsRef<Path>, categories: &CategoryMap) -> Result<Dataset, LoadError> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|source| LoadError::Io {
        path: path.display().to_string(),
        source,
    })?;
    parse(&text, categories)
}

pub fn parse(text: &str, categories: &CategoryMap) -> Result<Dataset, LoadError> {
    let root: Value = serde_json::from_str(text).map_err(|e| LoadError::Syntax {
        line: e.line(),
        column: e.column(),
        message: e.to_string(),
    })?;
    let samples: Vec<(String, &Value)> = match &root {
        Value::Array(items) => items
            .iter()
            .enumerate()
            .map(|(i, v)| (format!("[{i}]"), v))
            .collect(),
        Value::Object(_) => vec![(String::from("$"), &root)],
        _ => return Err(schema("$", "expected a sample object or an array of samples")),
    };
    if samples.is_empty() {
        return Err(schema("$", "no samples"));
    }

    let mut ds = Dataset::default();
    for (path, sample) in samples {
        let obj = sample
            .as_object()
            .ok_or_else(|| schema(&path, "sample is not an object"))?;
        let id = obj
            .get("sample_id")
            .and_then(label_of)
            .ok_or_else(|| schema(&format!("{path}.sample_id"), "missing or not a string"))?;
        if ds.conversations.iter().any(|c| c.id == id) {
            return Err(schema(&format!("{path}.sample_id"), format!("duplicate sample_id `{id}`")));
        }
        let conv_path = format!("{path}.conversation");
        let conv = obj
            .get("conversation")
            .and_then(Value::as_object)
            .ok_or_else(|| schema(&conv_path, "missing or not an object"))?;

        let mut messages = Vec::new();
        for (key, value) in conv {
            let Some(num) = key.strip_prefix("session_") else { continue };
            if num.is_empty() || !num.bytes().all(|b| b.is_ascii_digit()) {
                continue;
            }
            let session_path = format!("{conv_path}.{key}");
            let turns = value
                .as_array()
                .ok_or_else(|| schema(&session_path, "session is not an array"))?;
            let date = conv
                .get(&format!("{key}_date_time"))
                .and_then(Value::as_str)
                .map(str::to_string);
            for (i, turn) in turns.iter().enumerate() {
                let turn_path = format!("{session_path}[{i}]");
                let speaker = turn
                    .get("speaker")
                    .and_then(Value::as_str)
                    .ok_or_else(|| schema(&format!("{turn_path}.speaker"), "missing or not a string"))?;
                let text = turn
                    .get("text")
                    .and_then(Value::as_str)
                    .ok_or_else(|| schema(&format!("{turn_path}.text"), "missing or not a string"))?;
                if text.trim().is_empty() {
                    log::warn!("{turn_path}: empty text, turn skipped");
                    ds.skipped_turns += 1;
                    continue;
                }
                let turn_index = messages.len() as u64;
                let msg_id = turn
                    .get("dia_id")
                    .and_then(label_of)
                    .unwrap_or_else(|| format!("{id}:{turn_index}"));
                messages.push(Message {
                    id: msg_id,
                    conversation_id: id.clone(),
                    session_id: key.clone(),
                    speaker: speaker.to_string(),
                    text: text.to_string(),
                    timestamp: date.clone(),
                    turn_index,
                });
            }
        }
        if messages.is_empty() {
            return Err(schema(&conv_path, "conversation has no turns"));
        }

        if let Some(qa) = obj.get("qa") {
            let qa_path = format!("{path}.qa");
            let items = qa
                .as_array()
                .ok_or_else(|| schema(&qa_path, "not an array"))?;
            for (i, item) in items.iter().enumerate() {
                let item_path = format!("{qa_path}[{i}]");
                let raw = item
                    .get("category")
                    .and_then(label_of)
                    .ok_or_else(|| schema(&format!("{item_path}.category"), "missing"))?;
                let category = match categories.0.get(&raw) {
                    Some(Some(c)) => *c,
                    Some(None) => {
                        log::info!("{item_path}: category {raw} excluded");
                        ds.dropped_qa += 1;
                        continue;
                    }
                    None => {
                        return Err(schema(
                            &format!("{item_path}.category"),
                            format!("unmapped category `{raw}`"),
                        ))
                    }
                };
                let question = item
                    .get("question")
                    .and_then(Value::as_str)
                    .ok_or_else(|| schema(&format!("{item_path}.question"), "missing or not a string"))?;
                let gold_answer = item
                    .get("answer")
                    .and_then(label_of)
                    .ok_or_else(|| schema(&format!("{item_path}.answer"), "missing or not a string"))?;
                ds.qa.push(QaInstance {
                    question: question.to_string(),
                    gold_answer,
                    category,
                    conversation_id: id.clone(),
                });
            }
        }
        ds.conversations.push(Conversation { id, messages });
    }
    Ok(ds)
}
