//! Values, timestamped values, and bounded port queues.
//!
//! Everything a port carries is a [`Value`] stamped with its creation time;
//! the stamp travels with the value across every queue it visits. Queues are
//! bounded FIFOs with one twist: a data port's queue has capacity one and an
//! arriving value *overwrites* the old one, while event and event-data
//! arrivals append and overflow is a hard error surfaced to the caller.
//!
//! Printed queue notation elsewhere in the crate follows `⟨v2 v1⟩` = "v1 was
//! enqueued first"; in memory, `items[0]` is always the oldest element.

use std::collections::BTreeMap;
use std::fmt;
use std::sync::Arc;

use serde::de::Error as _;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

use crate::model::PortKind;
use crate::temporal::Time;

// ---------------------------------------------------------------------------
// Value
// ---------------------------------------------------------------------------

/// A runtime value. Scalars, enumeration literals, records, arrays, and the
/// payload-less event marker.
#[derive(Debug, Clone)]
pub enum Value {
    Bool(bool),
    Int(i64),
    Float(f64),
    Str(Arc<str>),
    /// An enumeration literal, carried by name.
    Enum(Arc<str>),
    Record(BTreeMap<String, Value>),
    Array(Vec<Value>),
    /// The event marker (an event with no payload).
    Event,
}

/// Equality is structural; floats compare bit-for-bit so that replayed traces
/// agree exactly.
impl PartialEq for Value {
    fn eq(&self, other: &Self) -> bool {
        match (self, other) {
            (Value::Bool(a), Value::Bool(b)) => a == b,
            (Value::Int(a), Value::Int(b)) => a == b,
            (Value::Float(a), Value::Float(b)) => a.to_bits() == b.to_bits(),
            (Value::Str(a), Value::Str(b)) => a == b,
            (Value::Enum(a), Value::Enum(b)) => a == b,
            (Value::Record(a), Value::Record(b)) => a == b,
            (Value::Array(a), Value::Array(b)) => a == b,
            (Value::Event, Value::Event) => true,
            _ => false,
        }
    }
}

impl Eq for Value {}

impl Value {
    pub fn str(s: &str) -> Self {
        Value::Str(Arc::from(s))
    }

    pub fn enumeration(lit: &str) -> Self {
        Value::Enum(Arc::from(lit))
    }

    /// Tag name used in diagnostics and for the array-uniformity rule.
    pub fn tag(&self) -> &'static str {
        match self {
            Value::Bool(_) => "bool",
            Value::Int(_) => "int",
            Value::Float(_) => "float",
            Value::Str(_) => "string",
            Value::Enum(_) => "enum",
            Value::Record(_) => "record",
            Value::Array(_) => "array",
            Value::Event => "event",
        }
    }

    pub fn is_event_marker(&self) -> bool {
        matches!(self, Value::Event)
    }

    /// Decodes the JSON encoding. Scalars map onto themselves; objects are
    /// records except for the reserved single-key forms `{"event":true}`
    /// (event marker) and `{"enum":"lit"}` (enumeration literal), which are
    /// matched before the record interpretation.
    pub fn from_json(v: &serde_json::Value) -> Result<Value, ValueDecodeError> {
        use serde_json::Value as J;
        match v {
            J::Null => Err(ValueDecodeError::new("null is not a value")),
            J::Bool(b) => Ok(Value::Bool(*b)),
            J::Number(n) => {
                if let Some(i) = n.as_i64() {
                    Ok(Value::Int(i))
                } else if let Some(f) = n.as_f64() {
                    Ok(Value::Float(f))
                } else {
                    Err(ValueDecodeError::new(format!(
                        "integer {n} does not fit in 64 bits"
                    )))
                }
            }
            J::String(s) => Ok(Value::str(s)),
            J::Array(items) => {
                let decoded = items
                    .iter()
                    .map(Value::from_json)
                    .collect::<Result<Vec<_>, _>>()?;
                if let Some(first) = decoded.first() {
                    if let Some(bad) = decoded.iter().find(|v| v.tag() != first.tag()) {
                        return Err(ValueDecodeError::new(format!(
                            "array mixes element tags {} and {}",
                            first.tag(),
                            bad.tag()
                        )));
                    }
                }
                Ok(Value::Array(decoded))
            }
            J::Object(map) => {
                if map.len() == 1 {
                    match map.iter().next() {
                        Some((k, J::Bool(true))) if k == "event" => return Ok(Value::Event),
                        Some((k, J::String(lit))) if k == "enum" => {
                            return Ok(Value::enumeration(lit))
                        }
                        _ => {}
                    }
                }
                let mut rec = BTreeMap::new();
                for (k, field) in map {
                    rec.insert(k.clone(), Value::from_json(field)?);
                }
                Ok(Value::Record(rec))
            }
        }
    }

    pub fn to_json(&self) -> serde_json::Value {
        use serde_json::json;
        match self {
            Value::Bool(b) => json!(b),
            Value::Int(i) => json!(i),
            Value::Float(f) => json!(f),
            Value::Str(s) => json!(s.as_ref()),
            Value::Enum(lit) => json!({ "enum": lit.as_ref() }),
            Value::Record(fields) => serde_json::Value::Object(
                fields
                    .iter()
                    .map(|(k, v)| (k.clone(), v.to_json()))
                    .collect(),
            ),
            Value::Array(items) => {
                serde_json::Value::Array(items.iter().map(Value::to_json).collect())
            }
            Value::Event => json!({ "event": true }),
        }
    }
}

impl fmt::Display for Value {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Value::Event => write!(f, "*"),
            Value::Enum(lit) => write!(f, "{lit}"),
            other => write!(f, "{}", other.to_json()),
        }
    }
}

impl Serialize for Value {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        self.to_json().serialize(serializer)
    }
}

impl<'de> Deserialize<'de> for Value {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let raw = serde_json::Value::deserialize(deserializer)?;
        Value::from_json(&raw).map_err(D::Error::custom)
    }
}

/// A malformed value literal.
#[derive(Debug, Clone, Error)]
#[error("{msg}")]
pub struct ValueDecodeError {
    msg: String,
}

impl ValueDecodeError {
    fn new(msg: impl Into<String>) -> Self {
        Self { msg: msg.into() }
    }
}

// ---------------------------------------------------------------------------
// Timestamped values and queues
// ---------------------------------------------------------------------------

/// A value plus the instant it was created (entered the system). The stamp is
/// never rewritten as the value moves between queues.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TimestampedValue {
    pub v: Value,
    pub ts: Time,
}

impl TimestampedValue {
    pub fn new(v: Value, ts: Time) -> Self {
        Self { v, ts }
    }
}

/// Queue overflow on an event or event-data port.
#[derive(Debug, Clone, Error)]
#[error("queue overflow: capacity {capacity} exceeded")]
pub struct OverflowError {
    pub capacity: usize,
}

/// A bounded FIFO of timestamped values. `items[0]` is the oldest entry.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PortQueue {
    #[serde(rename = "q")]
    items: Vec<TimestampedValue>,
    #[serde(skip, default)]
    capacity: usize,
}

/// Queues compare by content only: the capacity is static model metadata and
/// is not carried by serialized queue values.
impl PartialEq for PortQueue {
    fn eq(&self, other: &Self) -> bool {
        self.items == other.items
    }
}

impl Eq for PortQueue {}

impl PortQueue {
    pub fn new(capacity: usize) -> Self {
        Self {
            items: Vec::new(),
            capacity,
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    /// Oldest entry, if any.
    pub fn head(&self) -> Option<&TimestampedValue> {
        self.items.first()
    }

    /// Oldest-first iteration.
    pub fn iter(&self) -> impl Iterator<Item = &TimestampedValue> {
        self.items.iter()
    }

    /// Enqueues one value under the port-kind discipline: a data arrival
    /// replaces the queue's content, an event(-data) arrival appends, and an
    /// append past capacity is an overflow error (nothing is dropped
    /// silently).
    pub fn enqueue(&mut self, v: TimestampedValue, kind: PortKind) -> Result<(), OverflowError> {
        match kind {
            PortKind::Data => {
                debug_assert_eq!(self.capacity, 1, "data queues have capacity one");
                self.items.clear();
                self.items.push(v);
                Ok(())
            }
            PortKind::Event | PortKind::EventData => {
                if self.items.len() >= self.capacity {
                    return Err(OverflowError {
                        capacity: self.capacity,
                    });
                }
                self.items.push(v);
                Ok(())
            }
        }
    }

    /// Removes and returns every entry, oldest first.
    pub fn dequeue_all(&mut self) -> Vec<TimestampedValue> {
        std::mem::take(&mut self.items)
    }

    /// Removes and returns the oldest entry.
    pub fn dequeue_one(&mut self) -> Option<TimestampedValue> {
        if self.items.is_empty() {
            None
        } else {
            Some(self.items.remove(0))
        }
    }

    /// Restores a capacity on a queue deserialized from a trace snapshot.
    pub fn with_capacity_restored(mut self, capacity: usize) -> Self {
        self.capacity = capacity;
        self
    }
}

impl fmt::Display for PortQueue {
    /// Renders newest-first: `⟨v2 v1⟩` means v1 is the oldest entry.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "<")?;
        for (i, tv) in self.items.iter().rev().enumerate() {
            if i > 0 {
                write!(f, " ")?;
            }
            write!(f, "{}", tv.v)?;
        }
        write!(f, ">")
    }
}
