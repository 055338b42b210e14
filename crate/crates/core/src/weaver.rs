//! Trace Weaver: links sealed boxes into event-timeline traces.
//!
//! For a freshly sealed box with events `E`:
//! 1. no events: nothing to do;
//! 2. no traces yet in the conversation: cluster `E` into new traces;
//! 3. otherwise every event votes for the trace holding its nearest stored event;
//! 4. each distinct candidate trace is verified against the full `E` in one
//!    call, and the related events are appended to it;
//! 5. events accepted by no trace are clustered into new traces.
//!
//! The whole plan is computed before anything is committed, so a failing
//! initialization call leaves the store untouched and the box pending.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::audit::{AuditEvent, AuditLog};
use crate::embedding::{nearest_trace, EmbeddingError};
use crate::gateway::{absorb_records, Gateway, GatewayError, InitOutcome};
use crate::ids::{BoxId, EventId, TraceId};
use crate::model::{MemoryStore, StoreError, Trace};

#[derive(Debug, thiserror::Error)]
pub enum LinkError {
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Embedding(#[from] EmbeddingError),
    #[error(transparent)]
    Gateway(#[from] GatewayError),
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LinkReport {
    pub box_id: BoxId,
    /// Candidate trace of each event, in event order.
    pub votes: Vec<(EventId, TraceId)>,
    pub appended: Vec<(TraceId, EventId)>,
    pub new_traces: Vec<TraceId>,
    pub verification_failures: Vec<TraceId>,
    /// Events accepted by no candidate and passed to secondary initialization.
    pub unlinked: Vec<EventId>,
    /// Model output strings that matched no event of the box.
    pub discarded: Vec<String>,
}

impl LinkReport {
    pub fn candidates(&self) -> BTreeSet<TraceId> {
        self.votes.iter().map(|(_, t)| *t).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TimelineEntry {
    pub event_id: EventId,
    pub text: String,
    pub box_id: BoxId,
    pub box_timestamp: Option<String>,
}

struct NewTrace {
    events: Vec<EventId>,
    summary: Option<String>,
}

/// Exact match first, then case-insensitive.
fn match_back(s: &str, events: &[(EventId, String)]) -> Option<EventId> {
    let s = s.trim();
    events
        .iter()
        .find(|(_, t)| t == s)
        .or_else(|| {
            let lower = s.to_lowercase();
            events.iter().find(|(_, t)| t.to_lowercase() == lower)
        })
        .map(|(id, _)| *id)
}

pub struct TraceWeaver<'a> {
    gateway: &'a Gateway,
    audit: Option<&'a AuditLog>,
}

impl<'a> TraceWeaver<'a> {
    pub fn new(gateway: &'a Gateway) -> Self {
        Self { gateway, audit: None }
    }

    pub fn with_audit(mut self, audit: &'a AuditLog) -> Self {
        self.audit = Some(audit);
        self
    }

    pub fn link_box(&self, store: &mut MemoryStore, box_id: BoxId) -> Result<LinkReport, LinkError> {
        let mark = self.gateway.ledger_len();
        let planned = self.plan(store, box_id);
        absorb_records(&mut store.accounting, &self.gateway.records_since(mark));
        let (mut report, appends, new_traces) = planned?;

        store.accounting.verification_failures += report.verification_failures.len() as u64;
        for (tid, eids) in appends {
            for eid in eids {
                insert_chronological(store, tid, eid);
                report.appended.push((tid, eid));
            }
        }
        let conversation_id = store.get_box(box_id)?.conversation_id.clone();
        for nt in new_traces {
            let id = store.counters.trace_id();
            let created_at = store.counters.tick();
            let mut events = nt.events;
            events.sort_by_key(|e| store.trace_events[e].chrono_key());
            store.traces.insert(
                id,
                Trace {
                    id,
                    conversation_id: conversation_id.clone(),
                    events,
                    summary: nt.summary.filter(|s| !s.trim().is_empty()),
                    created_at,
                },
            );
            report.new_traces.push(id);
        }
        store.pending_links.remove(&box_id);
        if let Some(log) = self.audit {
            log.record(AuditEvent::Linked(report.clone()));
        }
        Ok(report)
    }

    #[allow(clippy::type_complexity)]
    fn plan(
        &self,
        store: &MemoryStore,
        box_id: BoxId,
    ) -> Result<(LinkReport, BTreeMap<TraceId, Vec<EventId>>, Vec<NewTrace>), LinkError> {
        let b = store.get_box(box_id)?;
        if !b.is_sealed() {
            return Err(StoreError::NotSealed(box_id).into());
        }
        let mut report = LinkReport {
            box_id,
            ..Default::default()
        };
        let mut appends: BTreeMap<TraceId, Vec<EventId>> = BTreeMap::new();
        let events: Vec<(EventId, String)> = b
            .event_ids
            .iter()
            .map(|id| (*id, store.trace_events[id].text.clone()))
            .collect();
        if events.is_empty() {
            return Ok((report, appends, Vec::new()));
        }

        let existing: Vec<&Trace> = store
            .conversation_traces(&b.conversation_id)
            .filter(|t| !t.events.is_empty())
            .collect();
        if existing.is_empty() {
            let new_traces = self.init_path(&events, &mut report)?;
            return Ok((report, appends, new_traces));
        }

        let mut voters: BTreeMap<TraceId, Vec<EventId>> = BTreeMap::new();
        for (eid, _) in &events {
            let v = store.vector(store.trace_events[eid].embedding_id)?;
            let nearest = nearest_trace(store, v, existing.iter().copied())?;
            voters.entry(nearest.trace_id).or_default().push(*eid);
            report.votes.push((*eid, nearest.trace_id));
        }

        let new_texts: Vec<String> = events.iter().map(|(_, t)| t.clone()).collect();
        let mut accepted: BTreeSet<EventId> = BTreeSet::new();
        for &tid in voters.keys() {
            let trace = store.get_trace(tid)?;
            let chain: Vec<String> = trace
                .events
                .iter()
                .map(|e| store.trace_events[e].text.clone())
                .collect();
            match self.gateway.filter_trace_events(&chain, &new_texts) {
                Ok(out) => {
                    for s in out.related {
                        match match_back(&s, &events) {
                            Some(eid) => {
                                accepted.insert(eid);
                                let list = appends.entry(tid).or_default();
                                if !trace.contains(eid) && !list.contains(&eid) {
                                    list.push(eid);
                                }
                            }
                            None => {
                                log::info!("verification for trace {tid} returned unknown event {s:?}");
                                report.discarded.push(s);
                            }
                        }
                    }
                }
                Err(e) => {
                    log::warn!("verification against trace {tid} failed, voters go to secondary init: {e}");
                    report.verification_failures.push(tid);
                }
            }
        }
        appends.retain(|_, v| !v.is_empty());

        let unlinked: Vec<(EventId, String)> = events
            .iter()
            .filter(|(id, _)| !accepted.contains(id))
            .cloned()
            .collect();
        report.unlinked = unlinked.iter().map(|(id, _)| *id).collect();
        let new_traces = if unlinked.is_empty() {
            Vec::new()
        } else {
            self.init_path(&unlinked, &mut report)?
        };
        Ok((report, appends, new_traces))
    }

    /// Clusters `events` into new traces. Isolated events and events the
    /// model dropped become singleton traces.
    fn init_path(
        &self,
        events: &[(EventId, String)],
        report: &mut LinkReport,
    ) -> Result<Vec<NewTrace>, LinkError> {
        let texts: Vec<String> = events.iter().map(|(_, t)| t.clone()).collect();
        let InitOutcome {
            primary_chain,
            secondary_chains,
            isolated_events,
            chain_summary,
        } = self.gateway.init_traces(&texts)?;

        let mut resolve = |chain: &[String]| -> Vec<EventId> {
            let mut ids = Vec::new();
            for s in chain {
                match match_back(s, events) {
                    Some(id) if !ids.contains(&id) => ids.push(id),
                    Some(_) => {}
                    None => {
                        log::info!("initialization returned unknown event {s:?}");
                        report.discarded.push(s.clone());
                    }
                }
            }
            ids
        };

        let mut out = Vec::new();
        let mut covered: BTreeSet<EventId> = BTreeSet::new();
        let primary = resolve(&primary_chain);
        if !primary.is_empty() {
            covered.extend(&primary);
            out.push(NewTrace {
                events: primary,
                summary: Some(chain_summary),
            });
        }
        for chain in &secondary_chains {
            let ids = resolve(chain);
            if !ids.is_empty() {
                covered.extend(&ids);
                out.push(NewTrace {
                    events: ids,
                    summary: None,
                });
            }
        }
        for id in resolve(&isolated_events) {
            if covered.insert(id) {
                out.push(NewTrace {
                    events: vec![id],
                    summary: None,
                });
            }
        }
        for (id, text) in events {
            if covered.insert(*id) {
                log::info!("event {text:?} missing from initialization output; singleton trace");
                out.push(NewTrace {
                    events: vec![*id],
                    summary: None,
                });
            }
        }
        Ok(out)
    }

    /// Drops every trace and relinks all sealed boxes in creation order.
    pub fn relink_all(&self, store: &mut MemoryStore) -> Result<Vec<LinkReport>, LinkError> {
        store.traces.clear();
        store.accounting.linking = Default::default();
        store.accounting.link_failures = 0;
        store.accounting.verification_failures = 0;
        store.pending_links = store.sealed_boxes().map(|b| b.id).collect();
        let order: Vec<BoxId> = store.pending_links.iter().copied().collect();
        order
            .into_iter()
            .map(|id| self.link_box(store, id))
            .collect()
    }
}

fn insert_chronological(store: &mut MemoryStore, tid: TraceId, eid: EventId) {
    let key = store.trace_events[&eid].chrono_key();
    let events = &store.trace_events;
    let trace = store.traces.get_mut(&tid).expect("candidate trace exists");
    if trace.events.contains(&eid) {
        return;
    }
    let pos = trace
        .events
        .iter()
        .position(|e| events[e].chrono_key() > key)
        .unwrap_or(trace.events.len());
    trace.events.insert(pos, eid);
}

/// Events of a trace in chronological order.
pub fn trace_timeline(store: &MemoryStore, trace_id: TraceId) -> Result<Vec<TimelineEntry>, StoreError> {
    let trace = store.get_trace(trace_id)?;
    Ok(trace
        .events
        .iter()
        .map(|e| {
            let ev = &store.trace_events[e];
            TimelineEntry {
                event_id: ev.id,
                text: ev.text.clone(),
                box_id: ev.source_box_id,
                box_timestamp: ev.box_timestamp.clone(),
            }
        })
        .collect())
}
