//! Monotonic integer identifiers, rendered as decimal strings when persisted.

use std::fmt;
use std::str::FromStr;

use serde::de::{self, Deserializer, Visitor};
use serde::{Deserialize, Serialize, Serializer};

macro_rules! string_id {
    ($(#[$meta:meta])* $name:ident) => {
        $(#[$meta])*
        #[derive(Debug, Clone, Copy, Default, PartialEq, Eq, PartialOrd, Ord, Hash)]
        pub struct $name(pub u64);

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                write!(f, "{}", self.0)
            }
        }

        impl FromStr for $name {
            type Err = std::num::ParseIntError;

            fn from_str(s: &str) -> Result<Self, Self::Err> {
                s.parse().map($name)
            }
        }

        impl Serialize for $name {
            fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
                serializer.collect_str(&self.0)
            }
        }

        impl<'de> Deserialize<'de> for $name {
            fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
                struct IdVisitor;

                impl Visitor<'_> for IdVisitor {
                    type Value = $name;

                    fn expecting(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                        f.write_str("a decimal id string")
                    }

                    fn visit_str<E: de::Error>(self, v: &str) -> Result<$name, E> {
                        v.parse().map_err(E::custom)
                    }

                    fn visit_u64<E: de::Error>(self, v: u64) -> Result<$name, E> {
                        Ok($name(v))
                    }
                }

                deserializer.deserialize_any(IdVisitor)
            }
        }
    };
}

string_id!(
    /// Identifier of a [`MemBox`](crate::model::MemBox).
    BoxId
);
string_id!(
    /// Identifier of a [`Trace`](crate::model::Trace).
    TraceId
);
string_id!(
    /// Identifier of a [`TraceEvent`](crate::model::TraceEvent).
    EventId
);
string_id!(
    /// Identifier of a stored [`EmbeddingVector`](crate::embedding::EmbeddingVector).
    EmbeddingId
);

/// Per-store id generators. Ids are never reused.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counters {
    pub next_box: u64,
    pub next_trace: u64,
    pub next_event: u64,
    pub next_embedding: u64,
    /// Logical clock used for `Trace::created_at`.
    pub clock: u64,
}

impl Counters {
    pub fn box_id(&mut self) -> BoxId {
        let id = BoxId(self.next_box);
        self.next_box += 1;
        id
    }

    pub fn trace_id(&mut self) -> TraceId {
        let id = TraceId(self.next_trace);
        self.next_trace += 1;
        id
    }

    pub fn event_id(&mut self) -> EventId {
        let id = EventId(self.next_event);
        self.next_event += 1;
        id
    }

    pub fn embedding_id(&mut self) -> EmbeddingId {
        let id = EmbeddingId(self.next_embedding);
        self.next_embedding += 1;
        id
    }

    pub fn tick(&mut self) -> u64 {
        let t = self.clock;
        self.clock += 1;
        t
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeMap;

    #[test]
    fn ids_serialize_as_strings() {
        assert_eq!(serde_json::to_string(&BoxId(7)).unwrap(), "\"7\"");
        let back: TraceId = serde_json::from_str("\"12\"").unwrap();
        assert_eq!(back, TraceId(12));
    }

    #[test]
    fn ids_work_as_map_keys() {
        let mut m = BTreeMap::new();
        m.insert(EventId(3), 1);
        let s = serde_json::to_string(&m).unwrap();
        assert_eq!(s, r#"{"3":1}"#);
        let back: BTreeMap<EventId, i32> = serde_json::from_str(&s).unwrap();
        assert_eq!(back[&EventId(3)], 1);
    }

    #[test]
    fn counters_are_monotonic() {
        let mut c = Counters::default();
        assert_eq!(c.box_id(), BoxId(0));
        assert_eq!(c.box_id(), BoxId(1));
        assert_eq!(c.trace_id(), TraceId(0));
    }
}
