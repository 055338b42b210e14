//! Provider-agnostic LLM access: typed prompt operations, retries and the call ledger.

pub mod backend;
pub mod json;
pub mod live;
pub mod prompts;

use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

pub use backend::{
    BackendError, CallKind, ChatBackend, ChatRequest, ChatResponse, EchoBackend, FnBackend,
    Matcher, RetryPolicy, ScriptEntry, ScriptError, ScriptedBackend, Usage,
};
pub use prompts::{PromptName, PromptTemplate, RenderError};

use crate::model::{Accounting, BoxDescriptor, ContinuityLabel};

pub const MAX_KEYWORDS: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Purpose {
    BoxConstruction,
    Linking,
    Qa,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CallOutcome {
    Ok,
    /// Backend answered but the answer did not parse.
    ParseError,
    TransportError,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LlmCallRecord {
    pub prompt_name: CallKind,
    pub input_token_count: u64,
    pub output_token_count: u64,
    pub latency: Duration,
    pub backend: String,
    pub purpose: Purpose,
    pub outcome: CallOutcome,
}

#[derive(Debug, thiserror::Error)]
pub enum GatewayError {
    #[error("empty input for {0}")]
    EmptyInput(&'static str),
    #[error(transparent)]
    Render(#[from] RenderError),
    #[error("{kind:?} call failed after {attempts} attempt(s): {source}")]
    Call {
        kind: CallKind,
        attempts: u32,
        source: BackendError,
    },
    #[error("{kind:?} response unparseable after {attempts} attempt(s): {reason}")]
    Parse {
        kind: CallKind,
        attempts: u32,
        reason: String,
    },
}

/// Whitespace-delimited token count, the fallback when a backend reports no usage.
pub fn whitespace_tokens(text: &str) -> u64 {
    text.split_whitespace().count() as u64
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FilterOutcome {
    pub chain_summary: Option<String>,
    pub related: Vec<String>,
    /// Includes every new event the model placed in neither list.
    pub unrelated: Vec<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct InitOutcome {
    pub primary_chain: Vec<String>,
    pub secondary_chains: Vec<Vec<String>>,
    pub isolated_events: Vec<String>,
    pub chain_summary: String,
}

/// Renders event strings as a JSON array, the list format used in the prompt examples.
pub fn render_event_list(events: &[String]) -> String {
    serde_json::to_string(events).expect("string list serializes")
}

pub struct Gateway {
    backend: Arc<dyn ChatBackend>,
    retry: RetryPolicy,
    ledger: Mutex<Vec<LlmCallRecord>>,
}

impl Gateway {
    pub fn new(backend: Arc<dyn ChatBackend>) -> Self {
        let retry = backend.default_retry();
        Self {
            backend,
            retry,
            ledger: Mutex::new(Vec::new()),
        }
    }

    pub fn with_retry(mut self, retry: RetryPolicy) -> Self {
        self.retry = retry;
        self
    }

    /// Same backend and policy, fresh ledger.
    pub fn fork(&self) -> Self {
        Self {
            backend: Arc::clone(&self.backend),
            retry: self.retry,
            ledger: Mutex::new(Vec::new()),
        }
    }

    pub fn backend_name(&self) -> &str {
        self.backend.name()
    }

    pub fn records(&self) -> Vec<LlmCallRecord> {
        self.ledger.lock().expect("ledger poisoned").clone()
    }

    pub fn ledger_len(&self) -> usize {
        self.ledger.lock().expect("ledger poisoned").len()
    }

    pub fn records_since(&self, mark: usize) -> Vec<LlmCallRecord> {
        let ledger = self.ledger.lock().expect("ledger poisoned");
        ledger[mark.min(ledger.len())..].to_vec()
    }

    fn record(&self, rec: LlmCallRecord) {
        self.ledger.lock().expect("ledger poisoned").push(rec);
    }

    /// Calls the backend until `parse` accepts a response or the retry budget runs out.
    fn invoke<T>(
        &self,
        kind: CallKind,
        purpose: Purpose,
        prompt: &str,
        parse: impl Fn(&str) -> Result<T, String>,
    ) -> Result<T, GatewayError> {
        let budget = self.retry.max_attempts.max(1);
        let mut attempt = 0;
        loop {
            attempt += 1;
            let started = Instant::now();
            let result = self.backend.chat(&ChatRequest { kind, prompt });
            let latency = started.elapsed();
            let mut rec = LlmCallRecord {
                prompt_name: kind,
                input_token_count: whitespace_tokens(prompt),
                output_token_count: 0,
                latency,
                backend: self.backend.name().to_string(),
                purpose,
                outcome: CallOutcome::TransportError,
            };
            match result {
                Ok(resp) => {
                    match resp.usage {
                        Some(u) => {
                            rec.input_token_count = u.input_tokens;
                            rec.output_token_count = u.output_tokens;
                        }
                        None => rec.output_token_count = whitespace_tokens(&resp.text),
                    }
                    match parse(&resp.text) {
                        Ok(v) => {
                            rec.outcome = CallOutcome::Ok;
                            self.record(rec);
                            return Ok(v);
                        }
                        Err(reason) => {
                            rec.outcome = CallOutcome::ParseError;
                            self.record(rec);
                            log::warn!("{kind:?} attempt {attempt}: unparseable response: {reason}");
                            if attempt >= budget {
                                return Err(GatewayError::Parse {
                                    kind,
                                    attempts: attempt,
                                    reason,
                                });
                            }
                        }
                    }
                }
                Err(e) => {
                    self.record(rec);
                    log::warn!("{kind:?} attempt {attempt}: {e}");
                    if !e.is_transient() || attempt >= budget {
                        return Err(GatewayError::Call {
                            kind,
                            attempts: attempt,
                            source: e,
                        });
                    }
                }
            }
            let delay = self.retry.delay_after(attempt);
            if !delay.is_zero() {
                std::thread::sleep(delay);
            }
        }
    }

    /// Free-form completion; the response is returned verbatim.
    pub fn complete(&self, prompt: &str, purpose: Purpose) -> Result<String, GatewayError> {
        if prompt.trim().is_empty() {
            return Err(GatewayError::EmptyInput("complete"));
        }
        let kind = if purpose == Purpose::Qa {
            CallKind::Qa
        } else {
            CallKind::Other
        };
        self.invoke(kind, purpose, prompt, |s| Ok(s.to_string()))
    }

    pub fn classify_continuation(
        &self,
        window_text: &str,
        current_text: &str,
    ) -> Result<ContinuityLabel, GatewayError> {
        if window_text.trim().is_empty() || current_text.trim().is_empty() {
            return Err(GatewayError::EmptyInput("msg_continuation"));
        }
        let prompt = prompts::MSG_CONTINUATION.render(&[("ref", window_text), ("curr", current_text)])?;
        self.invoke(
            CallKind::MsgContinuation,
            Purpose::BoxConstruction,
            &prompt,
            parse_label,
        )
    }

    pub fn extract_dialog_descriptor(&self, box_text: &str) -> Result<BoxDescriptor, GatewayError> {
        if box_text.trim().is_empty() {
            return Err(GatewayError::EmptyInput("dialog_extract"));
        }
        let prompt = prompts::DIALOG_EXTRACT.render(&[("text", box_text)])?;
        self.invoke(
            CallKind::DialogExtract,
            Purpose::BoxConstruction,
            &prompt,
            parse_descriptor,
        )
    }

    pub fn filter_trace_events(
        &self,
        chain: &[String],
        new_events: &[String],
    ) -> Result<FilterOutcome, GatewayError> {
        if chain.is_empty() || new_events.is_empty() {
            return Err(GatewayError::EmptyInput("trace_event_filter"));
        }
        let a = render_event_list(chain);
        let b = render_event_list(new_events);
        let prompt = prompts::TRACE_EVENT_FILTER.render(&[("content_a", &a), ("content_b", &b)])?;
        let mut outcome = self.invoke(
            CallKind::TraceEventFilter,
            Purpose::Linking,
            &prompt,
            parse_filter,
        )?;
        for ev in new_events {
            let mentioned = outcome
                .related
                .iter()
                .chain(outcome.unrelated.iter())
                .any(|s| s == ev || s.eq_ignore_ascii_case(ev));
            if !mentioned {
                log::info!("event {ev:?} absent from verification output; treated as unrelated");
                outcome.unrelated.push(ev.clone());
            }
        }
        Ok(outcome)
    }

    pub fn init_traces(&self, events: &[String]) -> Result<InitOutcome, GatewayError> {
        if events.is_empty() {
            return Err(GatewayError::EmptyInput("trace_init"));
        }
        let prompt = prompts::TRACE_INIT.render(&[("events", &render_event_list(events))])?;
        self.invoke(CallKind::TraceInit, Purpose::Linking, &prompt, parse_init)
    }
}

/// Folds ledger records into persisted per-purpose totals.
pub fn absorb_records(acct: &mut Accounting, records: &[LlmCallRecord]) {
    for r in records {
        let totals = match r.purpose {
            Purpose::BoxConstruction => &mut acct.box_construction,
            Purpose::Linking => &mut acct.linking,
            Purpose::Qa => continue,
        };
        totals.calls += 1;
        if r.outcome != CallOutcome::Ok {
            totals.failed_calls += 1;
        }
        totals.input_tokens += r.input_token_count;
        totals.output_tokens += r.output_token_count;
    }
}

/// Maps the first alphabetic token: `yes…` → continuous, `partial…` → partial shift, `no` → discontinuous.
pub fn parse_label(response: &str) -> Result<ContinuityLabel, String> {
    let token: String = response
        .split(|c: char| !c.is_alphabetic())
        .find(|t| !t.is_empty())
        .unwrap_or("")
        .to_lowercase();
    if token.starts_with("yes") {
        Ok(ContinuityLabel::Continuous)
    } else if token.starts_with("partial") {
        Ok(ContinuityLabel::PartialShift)
    } else if token == "no" {
        Ok(ContinuityLabel::Discontinuous)
    } else {
        Err(format!("no continuity label in {:?}", truncate(response, 80)))
    }
}

fn truncate(s: &str, n: usize) -> &str {
    match s.char_indices().nth(n) {
        Some((i, _)) => &s[..i],
        None => s,
    }
}

fn object(response: &str) -> Result<serde_json::Map<String, serde_json::Value>, String> {
    match json::extract_json_object(response) {
        Some(serde_json::Value::Object(m)) => Ok(m),
        _ => Err(format!("no JSON object in {:?}", truncate(response, 80))),
    }
}

fn string_list(v: &serde_json::Value, key: &str) -> Result<Vec<String>, String> {
    let arr = v
        .as_array()
        .ok_or_else(|| format!("`{key}` is not an array"))?;
    arr.iter()
        .map(|x| match x {
            serde_json::Value::String(s) => Ok(s.trim().to_string()),
            serde_json::Value::Number(n) => Ok(n.to_string()),
            _ => Err(format!("`{key}` holds a non-string item")),
        })
        .filter(|r| !matches!(r, Ok(s) if s.is_empty()))
        .collect()
}

fn required<'a>(
    m: &'a serde_json::Map<String, serde_json::Value>,
    key: &str,
) -> Result<&'a serde_json::Value, String> {
    m.get(key).ok_or_else(|| format!("missing key `{key}`"))
}

pub fn parse_descriptor(response: &str) -> Result<BoxDescriptor, String> {
    let m = object(response)?;
    let topic = required(&m, "topic")?
        .as_str()
        .ok_or("`topic` is not a string")?
        .trim()
        .to_string();
    let mut keywords = string_list(required(&m, "keywords")?, "keywords")?;
    let events = string_list(required(&m, "explicit_mentions")?, "explicit_mentions")?;
    if keywords.len() > MAX_KEYWORDS {
        log::info!("truncating {} keywords to {MAX_KEYWORDS}", keywords.len());
        keywords.truncate(MAX_KEYWORDS);
    } else if keywords.len() < 3 {
        log::info!("descriptor has only {} keyword(s)", keywords.len());
    }
    Ok(BoxDescriptor {
        topic,
        events,
        keywords,
    })
}

pub fn parse_filter(response: &str) -> Result<FilterOutcome, String> {
    let m = object(response)?;
    Ok(FilterOutcome {
        chain_summary: m
            .get("chain_summary")
            .and_then(|v| v.as_str())
            .map(str::to_string),
        related: string_list(required(&m, "related_events")?, "related_events")?,
        unrelated: match m.get("unrelated_events") {
            Some(v) => string_list(v, "unrelated_events")?,
            None => Vec::new(),
        },
    })
}

pub fn parse_init(response: &str) -> Result<InitOutcome, String> {
    let m = object(response)?;
    let secondary_chains = match m.get("secondary_chains") {
        None | Some(serde_json::Value::Null) => Vec::new(),
        Some(v) => v
            .as_array()
            .ok_or("`secondary_chains` is not an array")?
            .iter()
            .map(|c| string_list(c, "secondary_chains"))
            .collect::<Result<Vec<_>, _>>()?
            .into_iter()
            .filter(|c| !c.is_empty())
            .collect(),
    };
    Ok(InitOutcome {
        primary_chain: string_list(required(&m, "primary_chain")?, "primary_chain")?,
        secondary_chains,
        isolated_events: match m.get("isolated_events") {
            None | Some(serde_json::Value::Null) => Vec::new(),
            Some(v) => string_list(v, "isolated_events")?,
        },
        chain_summary: m
            .get("chain_summary")
            .and_then(|v| v.as_str())
            .unwrap_or_default()
            .to_string(),
    })
}
