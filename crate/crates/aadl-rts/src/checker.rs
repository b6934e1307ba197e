//! Trace property checking.
//!
//! A suite is a list of named properties over one recorded trace. Four
//! property kinds exist:
//!
//! * `pointwise` — a boolean expression evaluated either at one world
//!   (`"at": [t, n]`) or at every world the trace touches.
//! * `ordering` — structural invariants of the record stream itself
//!   (`phase-sequence`, `receive-execute-send`, `world-order`,
//!   `one-move-per-round`).
//! * `conservation` — value accounting (`move`, `timestamps`,
//!   `data-port-nonempty`, `queue-bounds`).
//! * `oracle` — independent re-predictions compared against what the engine
//!   recorded (`timeout`, `periodic-exactness`).
//!
//! The oracle checks re-derive expected behavior from the embedded model and
//! the observable occurrence history alone, never from engine internals, so
//! they catch the engine and the definition drifting apart. The `timeout`
//! oracle covers model-declared timeouts; timeouts created at runtime are
//! not re-predicted (their declarations are not in the model header).
//!
//! Properties are independent, so the default build checks them in parallel
//! (`parallel` feature, on by default); `check_suite_sequential` is the
//! fallback and the reference for equivalence. Report order always matches
//! suite order.

use std::collections::{BTreeMap, BTreeSet};

use crate::expr::parse_expr;
use crate::model::{Direction, PortId, PortKind, ThreadId};
use crate::temporal::{
    Phase, RuleKind, Time, TraceData, TraceRecord, TraceValue, VarRole, VariableId,
};
use crate::timeout::{expected_fires, TimeoutDuration};
use crate::values::{PortQueue, TimestampedValue, Value};

// ---------------------------------------------------------------------------
// Suites
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub enum PropKind {
    Pointwise { expr: String, at: Option<Time> },
    Ordering(OrderingCheck),
    Conservation(ConservationCheck),
    Oracle(OracleCheck),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OrderingCheck {
    PhaseSequence,
    ReceiveExecuteSend,
    WorldOrder,
    OneMovePerRound,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ConservationCheck {
    Move,
    Timestamps,
    DataPortNonempty,
    QueueBounds,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OracleCheck {
    Timeout,
    PeriodicExactness,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Property {
    pub name: String,
    pub kind: PropKind,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Suite {
    pub properties: Vec<Property>,
}

impl Suite {
    /// Parses the JSON suite form: `{"properties": [{"name": ..., "kind":
    /// ..., "check"?: ..., "expr"?: ..., "at"?: [t, n]}, ...]}`.
    pub fn parse(text: &str) -> Result<Suite, String> {
        #[derive(serde::Deserialize)]
        #[serde(deny_unknown_fields)]
        struct RawSuite {
            properties: Vec<RawProperty>,
        }
        #[derive(serde::Deserialize)]
        #[serde(deny_unknown_fields)]
        struct RawProperty {
            name: String,
            kind: String,
            #[serde(default)]
            check: Option<String>,
            #[serde(default)]
            expr: Option<String>,
            #[serde(default)]
            at: Option<(u64, u32)>,
        }

        let raw: RawSuite = serde_json::from_str(text).map_err(|e| e.to_string())?;
        let mut seen = BTreeSet::new();
        let mut properties = Vec::new();
        for rp in raw.properties {
            if !seen.insert(rp.name.clone()) {
                return Err(format!("duplicate property name {:?}", rp.name));
            }
            let reject_expr = |what: &str| -> Result<(), String> {
                if rp.expr.is_some() || rp.at.is_some() {
                    Err(format!("property {:?}: {what} takes no expr/at", rp.name))
                } else {
                    Ok(())
                }
            };
            let kind = match rp.kind.as_str() {
                "pointwise" => {
                    if rp.check.is_some() {
                        return Err(format!(
                            "property {:?}: pointwise takes no check selector",
                            rp.name
                        ));
                    }
                    let expr = rp
                        .expr
                        .clone()
                        .ok_or_else(|| format!("property {:?}: pointwise needs an expr", rp.name))?;
                    PropKind::Pointwise {
                        expr,
                        at: rp.at.map(|(t, n)| Time::new(t, n)),
                    }
                }
                "ordering" => {
                    reject_expr("an ordering check")?;
                    let check = match rp.check.as_deref() {
                        Some("phase-sequence") => OrderingCheck::PhaseSequence,
                        Some("receive-execute-send") => OrderingCheck::ReceiveExecuteSend,
                        Some("world-order") => OrderingCheck::WorldOrder,
                        Some("one-move-per-round") => OrderingCheck::OneMovePerRound,
                        other => {
                            return Err(format!(
                                "property {:?}: unknown ordering check {other:?}",
                                rp.name
                            ))
                        }
                    };
                    PropKind::Ordering(check)
                }
                "conservation" => {
                    reject_expr("a conservation check")?;
                    let check = match rp.check.as_deref() {
                        Some("move") => ConservationCheck::Move,
                        Some("timestamps") => ConservationCheck::Timestamps,
                        Some("data-port-nonempty") => ConservationCheck::DataPortNonempty,
                        Some("queue-bounds") => ConservationCheck::QueueBounds,
                        other => {
                            return Err(format!(
                                "property {:?}: unknown conservation check {other:?}",
                                rp.name
                            ))
                        }
                    };
                    PropKind::Conservation(check)
                }
                "oracle" => {
                    reject_expr("an oracle check")?;
                    let check = match rp.check.as_deref() {
                        Some("timeout") => OracleCheck::Timeout,
                        Some("periodic-exactness") => OracleCheck::PeriodicExactness,
                        other => {
                            return Err(format!(
                                "property {:?}: unknown oracle check {other:?}",
                                rp.name
                            ))
                        }
                    };
                    PropKind::Oracle(check)
                }
                other => return Err(format!("property {:?}: unknown kind {other:?}", rp.name)),
            };
            properties.push(Property {
                name: rp.name,
                kind,
            });
        }
        Ok(Suite { properties })
    }

    /// The built-in suite: every ordering, conservation, and oracle check.
    pub fn builtin_all() -> Suite {
        Suite::parse(include_str!("data/builtin_all.json"))
            .expect("the built-in suite parses")
    }
}

// ---------------------------------------------------------------------------
// Reports
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct CheckOutcome {
    pub name: String,
    pub passed: bool,
    /// Violation or error description when not passed.
    pub detail: Option<String>,
}

#[derive(Debug, Clone)]
pub struct CheckReport {
    pub outcomes: Vec<CheckOutcome>,
}

impl CheckReport {
    pub fn all_passed(&self) -> bool {
        self.outcomes.iter().all(|o| o.passed)
    }

    pub fn failures(&self) -> impl Iterator<Item = &CheckOutcome> {
        self.outcomes.iter().filter(|o| !o.passed)
    }
}

/// Checks every property of the suite against the trace, in suite order.
#[cfg(feature = "parallel")]
pub fn check_suite(trace: &TraceData, suite: &Suite) -> CheckReport {
    use rayon::prelude::*;
    let outcomes = suite
        .properties
        .par_iter()
        .map(|p| check_property(trace, p))
        .collect();
    CheckReport { outcomes }
}

/// Checks every property of the suite against the trace, in suite order.
#[cfg(not(feature = "parallel"))]
pub fn check_suite(trace: &TraceData, suite: &Suite) -> CheckReport {
    check_suite_sequential(trace, suite)
}

/// Sequential reference implementation of [`check_suite`].
pub fn check_suite_sequential(trace: &TraceData, suite: &Suite) -> CheckReport {
    let outcomes = suite
        .properties
        .iter()
        .map(|p| check_property(trace, p))
        .collect();
    CheckReport { outcomes }
}

pub fn check_property(trace: &TraceData, prop: &Property) -> CheckOutcome {
    let result = match &prop.kind {
        PropKind::Pointwise { expr, at } => check_pointwise(trace, expr, *at),
        PropKind::Ordering(OrderingCheck::PhaseSequence) => check_phase_sequence(trace),
        PropKind::Ordering(OrderingCheck::ReceiveExecuteSend) => {
            check_receive_execute_send(trace)
        }
        PropKind::Ordering(OrderingCheck::WorldOrder) => check_world_order(trace),
        PropKind::Ordering(OrderingCheck::OneMovePerRound) => check_one_move_per_round(trace),
        PropKind::Conservation(ConservationCheck::Move) => check_move_conservation(trace),
        PropKind::Conservation(ConservationCheck::Timestamps) => check_timestamps(trace),
        PropKind::Conservation(ConservationCheck::DataPortNonempty) => {
            check_data_port_nonempty(trace)
        }
        PropKind::Conservation(ConservationCheck::QueueBounds) => check_queue_bounds(trace),
        PropKind::Oracle(OracleCheck::Timeout) => check_timeout_oracle(trace),
        PropKind::Oracle(OracleCheck::PeriodicExactness) => check_periodic_exactness(trace),
    };
    match result {
        Ok(()) => CheckOutcome {
            name: prop.name.clone(),
            passed: true,
            detail: None,
        },
        Err(detail) => CheckOutcome {
            name: prop.name.clone(),
            passed: false,
            detail: Some(detail),
        },
    }
}

fn world_str(w: Time) -> String {
    format!("({}, {})", w.t, w.n)
}

// ---------------------------------------------------------------------------
// Pointwise
// ---------------------------------------------------------------------------

fn check_pointwise(trace: &TraceData, expr_src: &str, at: Option<Time>) -> Result<(), String> {
    let expr = parse_expr(expr_src).map_err(|e| format!("bad expression: {e}"))?;
    let worlds = match at {
        Some(w) => vec![w],
        None => trace.worlds(),
    };
    for w in worlds {
        let val = trace
            .eval(&expr, w)
            .map_err(|e| format!("evaluation failed at {}: {e}", world_str(w)))?;
        match val.into_value() {
            Ok(Value::Bool(true)) => {}
            Ok(Value::Bool(false)) => {
                return Err(format!(
                    "false at {}\n{}",
                    world_str(w),
                    neighborhood(trace, w)
                ))
            }
            Ok(other) => {
                return Err(format!(
                    "expression is not boolean at {} (got {})",
                    world_str(w),
                    other.tag()
                ))
            }
            Err(e) => return Err(format!("expression is not boolean at {}: {e}", world_str(w))),
        }
    }
    Ok(())
}

/// A few records around world `w`, for violation context.
fn neighborhood(trace: &TraceData, w: Time) -> String {
    let split = trace.records.partition_point(|r| r.time() <= w);
    let lo = split.saturating_sub(3);
    let hi = (split + 3).min(trace.records.len());
    trace.records[lo..hi]
        .iter()
        .map(|r| format!("  {r:?}"))
        .collect::<Vec<_>>()
        .join("\n")
}

// ---------------------------------------------------------------------------
// Ordering
// ---------------------------------------------------------------------------

/// Initialize, Move, then (Dispatch, Compute, Move) per round, then
/// Finalize, Off — nothing more and in no other order.
fn check_phase_sequence(trace: &TraceData) -> Result<(), String> {
    let phases: Vec<(Time, Phase)> = trace
        .records
        .iter()
        .filter_map(|r| match r {
            TraceRecord::PhaseChange { time, phase } => Some((*time, *phase)),
            _ => None,
        })
        .collect();
    let mut i = 0;
    let expect = |want: Phase, i: &mut usize| -> Result<(), String> {
        match phases.get(*i) {
            Some((_, p)) if *p == want => {
                *i += 1;
                Ok(())
            }
            Some((w, p)) => Err(format!("phase {p} at {}, expected {want}", world_str(*w))),
            None => Err(format!("trace ends, expected phase {want}")),
        }
    };
    expect(Phase::Initialize, &mut i)?;
    expect(Phase::Move, &mut i)?;
    while matches!(phases.get(i), Some((_, Phase::Dispatch))) {
        i += 1;
        expect(Phase::Compute, &mut i)?;
        expect(Phase::Move, &mut i)?;
    }
    expect(Phase::Finalize, &mut i)?;
    expect(Phase::Off, &mut i)?;
    if let Some((w, p)) = phases.get(i) {
        return Err(format!(
            "phase {p} at {} after the off transition",
            world_str(*w)
        ));
    }
    Ok(())
}

/// Per thread: every execution is a receive at one world, then either a
/// compute and a send at strictly later worlds, or a halt; nothing after a
/// halt.
fn check_receive_execute_send(trace: &TraceData) -> Result<(), String> {
    #[derive(Clone, Copy, PartialEq, Debug)]
    enum Step {
        R,
        C,
        S,
        H,
    }
    let mut seqs: BTreeMap<ThreadId, Vec<(Time, Step)>> = BTreeMap::new();
    for rec in &trace.records {
        match rec {
            TraceRecord::Rule { time, rule, thread } => {
                let step = match rule {
                    RuleKind::ReceiveInput => Step::R,
                    RuleKind::Compute => Step::C,
                    RuleKind::SendOutput => Step::S,
                };
                seqs.entry(thread.clone()).or_default().push((*time, step));
            }
            TraceRecord::Halt { time, thread, .. } => {
                seqs.entry(thread.clone()).or_default().push((*time, Step::H));
            }
            _ => {}
        }
    }
    for (tid, seq) in &seqs {
        let mut i = 0;
        while i < seq.len() {
            if seq[i].1 != Step::R {
                return Err(format!(
                    "thread {tid}: {:?} at {} outside an execution",
                    seq[i].1,
                    world_str(seq[i].0)
                ));
            }
            match seq.get(i + 1) {
                Some((wh, Step::H)) => {
                    if i + 2 != seq.len() {
                        return Err(format!(
                            "thread {tid}: rule records after the halt at {}",
                            world_str(*wh)
                        ));
                    }
                    i += 2;
                }
                Some((wc, Step::C)) => match seq.get(i + 2) {
                    Some((ws, Step::S)) => {
                        if !(seq[i].0 < *wc && wc < ws) {
                            return Err(format!(
                                "thread {tid}: execution worlds not increasing at {}",
                                world_str(seq[i].0)
                            ));
                        }
                        i += 3;
                    }
                    other => {
                        return Err(format!(
                            "thread {tid}: compute at {} not followed by a send (got {other:?})",
                            world_str(*wc)
                        ))
                    }
                },
                other => {
                    return Err(format!(
                        "thread {tid}: receive at {} not followed by compute or halt (got {other:?})",
                        world_str(seq[i].0)
                    ))
                }
            }
        }
    }
    Ok(())
}

/// Records in world order, starting from the initialize transition at the
/// origin, never beyond the horizon.
fn check_world_order(trace: &TraceData) -> Result<(), String> {
    match trace.records.first() {
        Some(TraceRecord::PhaseChange {
            time: Time { t: 0, n: 0 },
            phase: Phase::Initialize,
        }) => {}
        Some(r) => {
            return Err(format!(
                "first record at {} is not the initialize transition",
                world_str(r.time())
            ))
        }
        None => return Err("empty trace".into()),
    }
    let mut prev = Time::ZERO;
    for rec in &trace.records {
        let w = rec.time();
        if w < prev {
            return Err(format!(
                "world {} after {} in record order",
                world_str(w),
                world_str(prev)
            ));
        }
        if w.t > trace.horizon() {
            return Err(format!(
                "record at {} beyond the horizon {}",
                world_str(w),
                trace.horizon()
            ));
        }
        prev = w;
    }
    Ok(())
}

/// In-port infrastructure queues only grow inside a move sub-phase or at
/// micro-step 0 (environment injections and the recorded baseline).
fn check_one_move_per_round(trace: &TraceData) -> Result<(), String> {
    let model = &trace.header.model;
    let mut phase: Option<Phase> = None;
    let mut lens: BTreeMap<VariableId, usize> = BTreeMap::new();
    for rec in &trace.records {
        match rec {
            TraceRecord::PhaseChange { phase: p, .. } => phase = Some(*p),
            TraceRecord::Write { time, var, val } if var.role == VarRole::Ips => {
                let decl = model
                    .port_decl(&var.port_id())
                    .map_err(|e| format!("write to unknown port: {e}"))?;
                if decl.dir != Direction::In {
                    continue;
                }
                let q = match val {
                    TraceValue::Queue(q) => q,
                    TraceValue::Val(_) => {
                        return Err(format!("non-queue write to {var} at {}", world_str(*time)))
                    }
                };
                let prev = lens.get(var).copied().unwrap_or(0);
                if q.len() > prev && time.n != 0 && phase != Some(Phase::Move) {
                    let ph = phase.map_or("no".to_string(), |p| p.to_string());
                    return Err(format!(
                        "{var} grew at {} during {ph} phase",
                        world_str(*time)
                    ));
                }
                lens.insert(var.clone(), q.len());
            }
            _ => {}
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Conservation
// ---------------------------------------------------------------------------

/// Sorts timestamped values into a canonical multiset representation.
fn multiset(mut items: Vec<TimestampedValue>) -> Vec<String> {
    let mut keys: Vec<String> = items
        .drain(..)
        .map(|tv| serde_json::to_string(&tv).expect("values serialize"))
        .collect();
    keys.sort();
    keys
}

/// Every move transfers exactly what was pending: each value published on a
/// connected out port arrives once at every destination (timestamp intact),
/// sources drain, and nothing else appears. Applies to every move world
/// after the baseline.
fn check_move_conservation(trace: &TraceData) -> Result<(), String> {
    let model = &trace.header.model;
    let mut phase: Option<Phase> = None;
    let mut contents: BTreeMap<VariableId, PortQueue> = BTreeMap::new();
    // (world, var, pre, post) for ips writes inside move phases past the baseline.
    let mut move_writes: Vec<(Time, VariableId, PortQueue, PortQueue)> = Vec::new();
    for rec in &trace.records {
        match rec {
            TraceRecord::PhaseChange { phase: p, .. } => phase = Some(*p),
            TraceRecord::Write { time, var, val } if var.role == VarRole::Ips => {
                let q = match val {
                    TraceValue::Queue(q) => q.clone(),
                    TraceValue::Val(_) => {
                        return Err(format!("non-queue write to {var} at {}", world_str(*time)))
                    }
                };
                let pre = contents.get(var).cloned().unwrap_or_else(|| PortQueue::new(0));
                if phase == Some(Phase::Move) && time.n >= 1 {
                    move_writes.push((*time, var.clone(), pre.clone(), q.clone()));
                }
                contents.insert(var.clone(), q);
            }
            _ => {}
        }
    }

    let mut i = 0;
    while i < move_writes.len() {
        let world = move_writes[i].0;
        let mut j = i;
        while j < move_writes.len() && move_writes[j].0 == world {
            j += 1;
        }
        check_one_move_world(model, world, &move_writes[i..j])?;
        i = j;
    }
    Ok(())
}

fn check_one_move_world(
    model: &crate::model::InstanceModel,
    world: Time,
    entries: &[(Time, VariableId, PortQueue, PortQueue)],
) -> Result<(), String> {
    let mut outgoing: Vec<(PortId, TimestampedValue)> = Vec::new();
    let mut delivered: BTreeMap<PortId, Vec<TimestampedValue>> = BTreeMap::new();
    for (_, var, pre, post) in entries {
        let pid = var.port_id();
        let decl = model
            .port_decl(&pid)
            .map_err(|e| format!("write to unknown port: {e}"))?;
        if decl.dir == Direction::Out {
            if !post.is_empty() {
                return Err(format!(
                    "move at {} left source {pid} nonempty",
                    world_str(world)
                ));
            }
            for tv in pre.iter() {
                outgoing.push((pid.clone(), tv.clone()));
            }
        } else {
            let added: Vec<TimestampedValue> = match decl.kind {
                PortKind::Data => {
                    if post.len() != 1 {
                        return Err(format!(
                            "move at {} left data port {pid} with {} values",
                            world_str(world),
                            post.len()
                        ));
                    }
                    vec![post.head().unwrap().clone()]
                }
                PortKind::Event | PortKind::EventData => {
                    let pre_items: Vec<&TimestampedValue> = pre.iter().collect();
                    let post_items: Vec<&TimestampedValue> = post.iter().collect();
                    if post_items.len() < pre_items.len()
                        || post_items[..pre_items.len()]
                            .iter()
                            .zip(&pre_items)
                            .any(|(a, b)| a != b)
                    {
                        return Err(format!(
                            "move at {} rewrote {pid} instead of appending",
                            world_str(world)
                        ));
                    }
                    post_items[pre_items.len()..]
                        .iter()
                        .map(|tv| (*tv).clone())
                        .collect()
                }
            };
            delivered.insert(pid, added);
        }
    }

    let mut expected: BTreeMap<PortId, Vec<TimestampedValue>> = BTreeMap::new();
    for (src, tv) in outgoing {
        for dst in model
            .conn_dest(&src)
            .map_err(|e| format!("connection lookup: {e}"))?
        {
            expected.entry(dst.clone()).or_default().push(tv.clone());
        }
    }

    let expected: BTreeMap<PortId, Vec<String>> = expected
        .into_iter()
        .map(|(k, v)| (k, multiset(v)))
        .collect();
    let delivered: BTreeMap<PortId, Vec<String>> = delivered
        .into_iter()
        .map(|(k, v)| (k, multiset(v)))
        .collect();
    if expected != delivered {
        return Err(format!(
            "move at {}: sent and delivered value multisets differ\n  expected: {expected:?}\n  observed: {delivered:?}",
            world_str(world)
        ));
    }
    Ok(())
}

/// No queue item is stamped later than the world that wrote it.
fn check_timestamps(trace: &TraceData) -> Result<(), String> {
    for rec in &trace.records {
        if let TraceRecord::Write {
            time,
            var,
            val: TraceValue::Queue(q),
        } = rec
        {
            for tv in q.iter() {
                if tv.ts > *time {
                    return Err(format!(
                        "{var} at {} holds a value stamped {} (in its future)",
                        world_str(*time),
                        world_str(tv.ts)
                    ));
                }
            }
        }
    }
    Ok(())
}

/// Every in data port holds exactly one value from the recorded baseline on.
fn check_data_port_nonempty(trace: &TraceData) -> Result<(), String> {
    let model = &trace.header.model;
    for decl in model.threads() {
        for p in &decl.ports {
            if p.dir != Direction::In || p.kind != PortKind::Data {
                continue;
            }
            let var = VariableId::ips(&decl.id, p.id.local_name());
            match trace.at(&var, Time::ZERO) {
                Ok(TraceValue::Queue(q)) if q.len() == 1 => {}
                Ok(TraceValue::Queue(q)) => {
                    return Err(format!(
                        "{var} holds {} values at the baseline, wanted one",
                        q.len()
                    ))
                }
                Ok(TraceValue::Val(_)) => return Err(format!("{var} is not a queue")),
                Err(e) => return Err(format!("{var} unreadable at the baseline: {e}")),
            }
        }
    }
    for rec in &trace.records {
        if let TraceRecord::Write {
            time,
            var,
            val: TraceValue::Queue(q),
        } = rec
        {
            if var.role != VarRole::Ips {
                continue;
            }
            let decl = model
                .port_decl(&var.port_id())
                .map_err(|e| format!("write to unknown port: {e}"))?;
            if decl.dir == Direction::In && decl.kind == PortKind::Data && q.len() != 1 {
                return Err(format!(
                    "{var} written with {} values at {}",
                    q.len(),
                    world_str(*time)
                ));
            }
        }
    }
    Ok(())
}

/// No recorded queue exceeds its declared capacity (out-side queues are
/// one-deep).
fn check_queue_bounds(trace: &TraceData) -> Result<(), String> {
    let model = &trace.header.model;
    for rec in &trace.records {
        if let TraceRecord::Write {
            time,
            var,
            val: TraceValue::Queue(q),
        } = rec
        {
            if var.role == VarRole::Var {
                continue;
            }
            let decl = model
                .port_decl(&var.port_id())
                .map_err(|e| format!("write to unknown port: {e}"))?;
            let cap = match decl.dir {
                Direction::In => decl.queue_size,
                Direction::Out => 1,
            };
            if q.len() > cap {
                return Err(format!(
                    "{var} holds {} values at {} (capacity {cap})",
                    q.len(),
                    world_str(*time)
                ));
            }
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Oracles
// ---------------------------------------------------------------------------

/// First halt instant per thread, if any.
fn halt_instants(trace: &TraceData) -> BTreeMap<ThreadId, u64> {
    let mut halts = BTreeMap::new();
    for rec in &trace.records {
        if let TraceRecord::Halt { time, thread, .. } = rec {
            halts.entry(thread.clone()).or_insert(time.t);
        }
    }
    halts
}

/// Re-predicts every model-declared timeout's fire instants from the
/// observable occurrence history (startup, in-port arrivals, out-port
/// publications on its reset ports) and compares with the recorded fires.
fn check_timeout_oracle(trace: &TraceData) -> Result<(), String> {
    let model = &trace.header.model;
    let halts = halt_instants(trace);
    for decl in model.threads() {
        for to in &decl.timeouts {
            // Occurrence worlds, in record order. Startup arms at the origin.
            let mut occurrences: Vec<Time> = vec![Time::ZERO];
            let mut lens: BTreeMap<VariableId, usize> = BTreeMap::new();
            for rec in &trace.records {
                let TraceRecord::Write {
                    time,
                    var,
                    val: TraceValue::Queue(q),
                } = rec
                else {
                    continue;
                };
                if var.role != VarRole::Ips || var.thread != decl.id {
                    continue;
                }
                let local = var.name.as_str();
                if !to.reset.iter().any(|r| r == local) {
                    continue;
                }
                let port = decl.port(local).ok_or_else(|| {
                    format!("timeout {} resets unknown port {local}", to.id)
                })?;
                let is_occurrence = match port.dir {
                    // Arrival: the infrastructure queue grew.
                    Direction::In => {
                        let prev = lens.get(var).copied().unwrap_or(0);
                        q.len() > prev
                    }
                    // Publication: a nonempty value was placed for transfer.
                    Direction::Out => !q.is_empty(),
                };
                lens.insert(var.clone(), q.len());
                if is_occurrence {
                    occurrences.push(*time);
                }
            }

            // Sample the duration at each occurrence world; collapse several
            // occurrences within one instant to the last one.
            let mut armings: Vec<(u64, u64)> = Vec::new();
            for w in occurrences {
                let d = sample_duration(trace, &decl.id, &to.duration, w)
                    .map_err(|e| format!("timeout {}: {e}", to.id))?;
                match armings.last_mut() {
                    Some((t, dur)) if *t == w.t => *dur = d,
                    _ => armings.push((w.t, d)),
                }
            }

            let horizon = halts.get(&decl.id).copied().unwrap_or(trace.horizon());
            let expected = expected_fires(&armings, horizon.min(trace.horizon()));
            let actual: BTreeSet<u64> = trace
                .records
                .iter()
                .filter_map(|r| match r {
                    TraceRecord::Fire {
                        time,
                        timeout,
                        thread,
                    } if *thread == decl.id && *timeout == to.id => Some(time.t),
                    _ => None,
                })
                .collect();
            if expected != actual {
                return Err(format!(
                    "timeout {} of thread {}: predicted fires {expected:?}, recorded {actual:?}",
                    to.id, decl.id
                ));
            }
        }
    }
    Ok(())
}

/// The duration a timeout samples at arming world `w`: fixed, or the head
/// of the duration port (application side first, else infrastructure side).
fn sample_duration(
    trace: &TraceData,
    thread: &ThreadId,
    duration: &TimeoutDuration,
    w: Time,
) -> Result<u64, String> {
    match duration {
        TimeoutDuration::Fixed(d) => Ok(*d),
        TimeoutDuration::FromPort(p) => {
            let head = |var: VariableId| -> Option<Value> {
                match trace.at(&var, w) {
                    Ok(TraceValue::Queue(q)) => q.head().map(|tv| tv.v.clone()),
                    _ => None,
                }
            };
            let v = head(VariableId::aps(thread, p))
                .or_else(|| head(VariableId::ips(thread, p)))
                .ok_or_else(|| {
                    format!("duration port {p} empty at arming world {}", world_str(w))
                })?;
            match v {
                Value::Int(i) if i > 0 => Ok(i as u64),
                other => Err(format!(
                    "duration port {p} holds {} at {}, wanted a positive int",
                    other.tag(),
                    world_str(w)
                )),
            }
        }
    }
}

/// Periodic and timed threads receive exactly one time-triggered offer per
/// period multiple within the horizon (truncated if the thread halts), and
/// no time-triggered offers anywhere else.
fn check_periodic_exactness(trace: &TraceData) -> Result<(), String> {
    use crate::model::DispatchProtocol;
    use crate::rts::StatusKind;
    let model = &trace.header.model;
    let halts = halt_instants(trace);
    for decl in model.threads() {
        let period = match (decl.dispatch, decl.period_ns) {
            (DispatchProtocol::Periodic | DispatchProtocol::Timed, Some(p)) => p,
            _ => continue,
        };
        let offers: Vec<u64> = trace
            .records
            .iter()
            .filter_map(|r| match r {
                TraceRecord::Dispatch {
                    time,
                    thread,
                    status,
                    ..
                } if *thread == decl.id && status.kind == StatusKind::TimeTriggered => {
                    Some(time.t)
                }
                _ => None,
            })
            .collect();
        let last = halts
            .get(&decl.id)
            .copied()
            .unwrap_or(trace.horizon())
            .min(trace.horizon());
        let expected: Vec<u64> = (0..=last / period).map(|k| k * period).collect();
        if offers != expected {
            return Err(format!(
                "thread {}: time-triggered offers at {offers:?}, expected every {period} ns: {expected:?}",
                decl.id
            ));
        }
    }
    Ok(())
}
