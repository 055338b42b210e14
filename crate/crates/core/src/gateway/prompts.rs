//! The four prompt templates and placeholder rendering.
//!
//! Templates contain literal JSON braces, so rendering only replaces the
//! exact `{name}` tokens declared for each template, in a single pass.
//! Substituted values are never rescanned.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptName {
    MsgContinuation,
    DialogExtract,
    TraceEventFilter,
    TraceInit,
}

impl PromptName {
    pub const ALL: [PromptName; 4] = [
        PromptName::MsgContinuation,
        PromptName::DialogExtract,
        PromptName::TraceEventFilter,
        PromptName::TraceInit,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            PromptName::MsgContinuation => "msg_continuation",
            PromptName::DialogExtract => "dialog_extract",
            PromptName::TraceEventFilter => "trace_event_filter",
            PromptName::TraceInit => "trace_init",
        }
    }

    pub fn template(self) -> &'static PromptTemplate {
        match self {
            PromptName::MsgContinuation => &MSG_CONTINUATION,
            PromptName::DialogExtract => &DIALOG_EXTRACT,
            PromptName::TraceEventFilter => &TRACE_EVENT_FILTER,
            PromptName::TraceInit => &TRACE_INIT,
        }
    }
}

#[derive(Debug)]
pub struct PromptTemplate {
    pub name: PromptName,
    pub template_text: &'static str,
    pub placeholders: &'static [&'static str],
}

pub static MSG_CONTINUATION: PromptTemplate = PromptTemplate {
    name: PromptName::MsgContinuation,
    template_text: include_str!("../../prompts/msg_continuation.txt"),
    placeholders: &["ref", "curr"],
};

pub static DIALOG_EXTRACT: PromptTemplate = PromptTemplate {
    name: PromptName::DialogExtract,
    template_text: include_str!("../../prompts/dialog_extract.txt"),
    placeholders: &["text"],
};

pub static TRACE_EVENT_FILTER: PromptTemplate = PromptTemplate {
    name: PromptName::TraceEventFilter,
    template_text: include_str!("../../prompts/trace_event_filter.txt"),
    placeholders: &["content_a", "content_b"],
};

pub static TRACE_INIT: PromptTemplate = PromptTemplate {
    name: PromptName::TraceInit,
    template_text: include_str!("../../prompts/trace_init.txt"),
    placeholders: &["events"],
};

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum RenderError {
    #[error("template {template} has no placeholder `{name}`")]
    UnknownPlaceholder { template: &'static str, name: String },
    #[error("template {template} is missing a value for `{name}`")]
    MissingValue { template: &'static str, name: &'static str },
}

impl PromptTemplate {
    /// Renders the template. Every declared placeholder needs a value.
    pub fn render(&self, values: &[(&str, &str)]) -> Result<String, RenderError> {
        for (k, _) in values {
            if !self.placeholders.contains(k) {
                return Err(RenderError::UnknownPlaceholder {
                    template: self.name.as_str(),
                    name: k.to_string(),
                });
            }
        }
        for p in self.placeholders {
            if !values.iter().any(|(k, _)| k == p) {
                return Err(RenderError::MissingValue {
                    template: self.name.as_str(),
                    name: p,
                });
            }
        }

        let text = self.template_text;
        let mut out = String::with_capacity(text.len() + 256);
        let mut rest = text;
        'scan: while let Some(open) = rest.find('{') {
            out.push_str(&rest[..open]);
            let tail = &rest[open..];
            for (k, v) in values {
                let token_len = k.len() + 2;
                if tail.len() >= token_len
                    && tail.as_bytes()[k.len() + 1] == b'}'
                    && &tail[1..=k.len()] == *k
                {
                    out.push_str(v);
                    rest = &tail[token_len..];
                    continue 'scan;
                }
            }
            out.push('{');
            rest = &tail[1..];
        }
        out.push_str(rest);
        Ok(out)
    }
}

/// Instruction prefix of the QA prompt.
pub const QA_INSTRUCTION: &str =
    "Answer the question using only the context. Reply with a short answer.";

pub fn render_qa_prompt(context: &str, question: &str) -> String {
    format!("{QA_INSTRUCTION}\n\nContext:\n{context}\n\nQuestion: {question}\nAnswer:")
}
