//! Token-level F1 and BLEU-1.
//!
//! Absolute scores depend on normalization, so both are pinned here:
//! - F1 uses SQuAD normalization: lowercase, drop ASCII punctuation, drop the
//!   articles a/an/the, split on whitespace.
//! - BLEU-1 lowercases and drops ASCII punctuation but keeps articles.

use std::collections::HashMap;

fn strip_punct_lower(s: &str) -> String {
    s.chars()
        .filter(|c| !c.is_ascii_punctuation())
        .flat_map(char::to_lowercase)
        .collect()
}

/// Tokens used by [`token_f1`].
pub fn normalize_answer(s: &str) -> Vec<String> {
    strip_punct_lower(s)
        .split_whitespace()
        .filter(|t| !matches!(*t, "a" | "an" | "the"))
        .map(str::to_string)
        .collect()
}

/// Tokens used by [`bleu1`].
pub fn bleu_tokens(s: &str) -> Vec<String> {
    strip_punct_lower(s)
        .split_whitespace()
        .map(str::to_string)
        .collect()
}

fn counts(tokens: &[String]) -> HashMap<&str, usize> {
    let mut m = HashMap::new();
    for t in tokens {
        *m.entry(t.as_str()).or_insert(0) += 1;
    }
    m
}

fn clipped_overlap(pred: &[String], gold: &[String]) -> usize {
    let g = counts(gold);
    counts(pred)
        .into_iter()
        .map(|(t, n)| n.min(g.get(t).copied().unwrap_or(0)))
        .sum()
}

pub fn token_f1(prediction: &str, gold: &str) -> f64 {
    let p = normalize_answer(prediction);
    let g = normalize_answer(gold);
    match (p.is_empty(), g.is_empty()) {
        (true, true) => return 1.0,
        (true, false) | (false, true) => return 0.0,
        _ => {}
    }
    let overlap = clipped_overlap(&p, &g);
    if overlap == 0 {
        return 0.0;
    }
    let precision = overlap as f64 / p.len() as f64;
    let recall = overlap as f64 / g.len() as f64;
    2.0 * precision * recall / (precision + recall)
}

pub fn bleu1(prediction: &str, gold: &str) -> f64 {
    let p = bleu_tokens(prediction);
    let g = bleu_tokens(gold);
    if p.is_empty() {
        return 0.0;
    }
    let precision = clipped_overlap(&p, &g) as f64 / p.len() as f64;
    let bp = if p.len() < g.len() {
        (1.0 - g.len() as f64 / p.len() as f64).exp()
    } else {
        1.0
    };
    precision * bp
}
