//! Timeouts: declarative watchdogs owned by a thread.
//!
//! A timeout has a set of *reset ports* (event or event-data ports of the
//! owning thread, in or out) and a duration `d`. Every occurrence on a reset
//! port (re)arms it. It fires at instant `τ` exactly when some occurrence
//! happened at `τ − d` and **no** occurrence happened strictly inside
//! `(τ − d, τ)`. The interval is open on both ends, which pins down the two
//! boundary cases:
//!
//! * an occurrence at the arming instant itself (two reset ports at once)
//!   does not suppress the fire, and
//! * an occurrence exactly at the expiry instant does not prevent the fire —
//!   the timeout fires *and* the occurrence re-arms it for one duration
//!   later.
//!
//! A fire is consumed by firing: with no further occurrences the timeout
//! stays quiet (no self-refire). Occurrence instants are measured where the
//! engine observes them — arrival on the infrastructure in-queue for in
//! ports, publication to the infrastructure out-queue for out ports.
//!
//! The module offers the same semantics twice on purpose: [`expected_fires`]
//! is the direct reading of the definition over a completed occurrence
//! history, while [`TimerState`] is the incremental single-expiry timer the
//! engine runs. The unit tests drive both over random histories and insist
//! on identical fire sets; the run-time checker repeats that comparison
//! against recorded traces.

use serde_json::json;

use crate::rts::ThreadState;
use crate::values::Value;

/// How long after an arming occurrence a timeout fires.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum TimeoutDuration {
    /// A fixed span in nanoseconds.
    Fixed(u64),
    /// Sampled at each arming from an in data port (local name) of the
    /// owning thread, holding a positive int of nanoseconds.
    FromPort(String),
}

/// A validated timeout declaration.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TimeoutDecl {
    /// Trigger id; distinct from every port and timeout id of the thread.
    pub id: String,
    /// Reset ports, by local name.
    pub reset: Vec<String>,
    pub duration: TimeoutDuration,
}

impl TimeoutDecl {
    pub fn to_json(&self) -> serde_json::Value {
        let mut obj = serde_json::Map::new();
        obj.insert("id".into(), json!(self.id));
        obj.insert("reset".into(), json!(self.reset));
        match &self.duration {
            TimeoutDuration::Fixed(ns) => obj.insert("duration_ns".into(), json!(ns)),
            TimeoutDuration::FromPort(p) => obj.insert("duration_port".into(), json!(p)),
        };
        serde_json::Value::Object(obj)
    }

    /// Samples the duration at an arming instant. A port-supplied duration
    /// reads the owner's frozen (application) value, falling back to the
    /// infrastructure queue before the first dispatch has frozen anything.
    pub fn resolve_duration(&self, state: &ThreadState) -> Result<u64, String> {
        match &self.duration {
            TimeoutDuration::Fixed(ns) => Ok(*ns),
            TimeoutDuration::FromPort(port) => {
                let sample = state
                    .aps_in
                    .get(port)
                    .and_then(|q| q.head())
                    .or_else(|| state.ips_in.get(port).and_then(|q| q.head()));
                let Some(tv) = sample else {
                    return Err(format!(
                        "timeout {}: duration port {port:?} holds no value",
                        self.id
                    ));
                };
                match &tv.v {
                    Value::Int(ns) if *ns > 0 => Ok(*ns as u64),
                    Value::Int(ns) => Err(format!(
                        "timeout {}: duration from port {port:?} must be positive, got {ns}",
                        self.id
                    )),
                    other => Err(format!(
                        "timeout {}: duration port {port:?} holds a {} value, want int",
                        self.id,
                        other.tag()
                    )),
                }
            }
        }
    }
}

/// The fire instants a completed occurrence history produces, per the
/// definition. `armings` pairs each occurrence instant with the duration
/// sampled there, in strictly increasing instant order (collapse same-instant
/// occurrences to one entry carrying the last-sampled duration first). Fires
/// later than `horizon` are unobservable and omitted; a fire exactly at the
/// horizon counts.
pub fn expected_fires(armings: &[(u64, u64)], horizon: u64) -> std::collections::BTreeSet<u64> {
    debug_assert!(
        armings.windows(2).all(|w| w[0].0 < w[1].0),
        "armings must be strictly increasing in instant"
    );
    let mut fires = std::collections::BTreeSet::new();
    for &(e, d) in armings {
        let Some(tau) = e.checked_add(d) else {
            continue;
        };
        if tau > horizon {
            continue;
        }
        let suppressed = armings.iter().any(|&(e2, _)| e < e2 && e2 < tau);
        if !suppressed {
            fires.insert(tau);
        }
    }
    fires
}

/// Whether the timeout is armed-and-counting at `t` given the history so
/// far: the latest occurrence at or before `t` has not yet expired.
pub fn timeout_active(armings: &[(u64, u64)], t: u64) -> bool {
    armings
        .iter()
        .rev()
        .find(|&&(e, _)| e <= t)
        .is_some_and(|&(e, d)| e.checked_add(d).is_some_and(|tau| t < tau))
}

/// The engine's incremental timer: at most one pending expiry, replaced on
/// every arming, consumed by firing.
#[derive(Debug, Clone)]
pub struct TimerState {
    pub decl: TimeoutDecl,
    /// Absolute instant at which the timeout will fire unless re-armed.
    pub armed_expiry: Option<u64>,
}

impl TimerState {
    pub fn new(decl: TimeoutDecl) -> Self {
        Self {
            decl,
            armed_expiry: None,
        }
    }

    /// A reset-port occurrence at `t` with sampled duration `d`.
    pub fn arm(&mut self, t: u64, d: u64) {
        // An overflowing expiry lies beyond any representable instant.
        self.armed_expiry = t.checked_add(d);
    }

    /// True exactly when the pending expiry is `t`.
    pub fn due_at(&self, t: u64) -> bool {
        self.armed_expiry == Some(t)
    }

    /// Firing consumes the arming.
    pub fn consume_fire(&mut self) {
        self.armed_expiry = None;
    }
}
