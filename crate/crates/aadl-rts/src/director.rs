//! The director: deterministic whole-system execution.
//!
//! A run is a phase sequence — initialize, a first value move, then at every
//! visited instant zero or more rounds of (dispatch, compute, move), and a
//! finalize that changes nothing. Time is superdense: each world is a pair
//! `(t, n)` of a nanosecond instant and a micro-step, and every rule
//! application writes its effects at the successor of the world it read.
//! Initialization and the first move all write at the `(0, 0)` baseline;
//! environment injections land at micro-step 0 of their instant.
//!
//! Within an instant the order is fixed: due timers fire first, then
//! scenario injections arrive, then dispatch rounds run until no new
//! event deliveries occur. Each round offers dispatches to enabled threads
//! in ascending thread-id order; each accepted dispatch freezes input
//! (micro-step +1), commits its behavior step (+1), and publishes output
//! (+1), after which one move transfers every pending output value in a
//! single world. A move that delivers to event or event-data ports can
//! enable further dispatches at the same instant, producing cascaded rounds
//! (bounded — exceeding the bound aborts the run as a livelock).
//!
//! Determinism: iteration orders are fixed (sorted maps throughout), and the
//! only scheduling freedom — arrival order when several values reach the
//! same in port in one move — is resolved by a seeded shuffle. Same model,
//! scenario, and seed give byte-identical traces.
//!
//! Faults split two ways: a failing behavior halts its own thread (recorded,
//! run continues), while infrastructure faults — startup failures, queue
//! overflow, bad timeout durations, cascade overrun — abort the run.

use std::collections::{BTreeMap, BTreeSet};
use std::io;

use thiserror::Error;

use crate::model::{
    DispatchProtocol, Direction, InstanceModel, ModelError, PortId, PortKind, ThreadId,
};
use crate::rng::SimRng;
use crate::rts::{
    Behavior, BehaviorRef, DispatchStatus, MachineBehavior, PortMetaMap, StateServices,
    StatusKind, ThreadState, TimeoutRequest,
};
use crate::temporal::{
    Phase, RuleKind, Time, TraceError, TraceHeader, TraceRecord, TraceValue, TraceWriter,
    VariableId, TIE_BREAK_THREAD_ID_ASC, TRACE_VERSION,
};
use crate::timeout::{TimeoutDecl, TimeoutDuration, TimerState};
use crate::values::{OverflowError, PortQueue, TimestampedValue, Value};

/// Upper bound on dispatch rounds within one instant; exceeding it aborts
/// the run (same-instant event cascades that never settle are livelocks).
pub const CASCADE_LIMIT: u32 = 10_000;

// ---------------------------------------------------------------------------
// Configuration, scenario, hosts
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct RunConfig {
    /// Run until this instant (inclusive), unless the scenario stops sooner.
    pub horizon_ns: u64,
    /// Seed for arrival-order resolution.
    pub seed: u64,
    /// When false, `timed` threads dispatch only at their period multiples
    /// (their between-tick event half is disabled).
    pub enable_timed: bool,
}

impl RunConfig {
    pub fn new(horizon_ns: u64) -> Self {
        Self {
            horizon_ns,
            seed: 0,
            enable_timed: true,
        }
    }
}

/// One environment stimulus: a value appearing on an in port at an instant.
#[derive(Debug, Clone)]
pub struct Injection {
    pub at_ns: u64,
    pub port: PortId,
    pub value: Value,
}

/// An environment script: injections plus an optional early stop. The stop
/// instant is processed in full (injections, dispatches) before the run
/// finalizes.
#[derive(Debug, Clone, Default)]
pub struct Scenario {
    pub injections: Vec<Injection>,
    pub stop_ns: Option<u64>,
}

impl Scenario {
    pub fn empty() -> Self {
        Self::default()
    }

    /// Parses the JSON form: `{"inject": [{"at_ns": N, "port": "th.p",
    /// "value": V}, ...], "stop_ns": N}`. `value` may be omitted on event
    /// ports (the event marker is implied).
    pub fn parse(text: &str) -> Result<Scenario, String> {
        #[derive(serde::Deserialize)]
        #[serde(deny_unknown_fields)]
        struct RawScenario {
            #[serde(default)]
            inject: Vec<RawInjection>,
            #[serde(default)]
            stop_ns: Option<u64>,
        }
        #[derive(serde::Deserialize)]
        #[serde(deny_unknown_fields)]
        struct RawInjection {
            at_ns: u64,
            port: String,
            #[serde(default)]
            value: Option<serde_json::Value>,
        }
        let raw: RawScenario = serde_json::from_str(text).map_err(|e| e.to_string())?;
        let mut injections = Vec::new();
        for (i, inj) in raw.inject.into_iter().enumerate() {
            let value = match inj.value {
                Some(v) => Value::from_json(&v)
                    .map_err(|e| format!("injection {i}: bad value: {e}"))?,
                None => Value::Event,
            };
            injections.push(Injection {
                at_ns: inj.at_ns,
                port: PortId::new(&inj.port),
                value,
            });
        }
        Ok(Scenario {
            injections,
            stop_ns: raw.stop_ns,
        })
    }

    /// Injection targets must be declared in ports admitting the value.
    pub fn validate(&self, model: &InstanceModel) -> Result<(), String> {
        for inj in &self.injections {
            let decl = model
                .port_decl(&inj.port)
                .map_err(|_| format!("injection targets unknown port {}", inj.port))?;
            if decl.dir != Direction::In {
                return Err(format!("injection targets out port {}", inj.port));
            }
            if !decl.ty.admits(&inj.value) {
                return Err(format!(
                    "injection value {} is not admitted by port {} (type {:?})",
                    inj.value, inj.port, decl.ty
                ));
            }
        }
        Ok(())
    }
}

type BehaviorFactory = Box<dyn Fn() -> Box<dyn Behavior>>;

/// Host-implemented behaviors, looked up by the name a model references.
#[derive(Default)]
pub struct HostRegistry {
    factories: BTreeMap<String, BehaviorFactory>,
}

impl HostRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register<F>(&mut self, name: &str, factory: F)
    where
        F: Fn() -> Box<dyn Behavior> + 'static,
    {
        self.factories.insert(name.to_string(), Box::new(factory));
    }

    fn make(&self, name: &str) -> Option<Box<dyn Behavior>> {
        self.factories.get(name).map(|f| f())
    }
}

// ---------------------------------------------------------------------------
// Errors and summary
// ---------------------------------------------------------------------------

#[derive(Debug, Error)]
pub enum EngineError {
    #[error("startup failure: {0}")]
    Startup(String),
    #[error("scenario error: {0}")]
    Scenario(String),
    #[error("port {port} at {t} ns: {source}")]
    Overflow {
        port: PortId,
        t: u64,
        source: OverflowError,
    },
    #[error("instant {t} ns did not settle within {limit} dispatch rounds")]
    CascadeLimit { t: u64, limit: u32 },
    #[error("at {t} ns: {msg}")]
    Duration { t: u64, msg: String },
    #[error(transparent)]
    Trace(#[from] TraceError),
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// What a completed run did. A run that aborted returns an error instead.
#[derive(Debug, Clone)]
pub struct RunSummary {
    /// The instant the run actually covered (horizon or scenario stop).
    pub end_ns: u64,
    pub instants: u64,
    pub rounds: u64,
    pub dispatches_offered: u64,
    pub dispatches_accepted: u64,
    pub fires: u64,
    pub records: u64,
    /// Threads halted by behavior faults, with reasons.
    pub halted: Vec<(ThreadId, String)>,
}

impl RunSummary {
    /// True when no thread faulted.
    pub fn clean(&self) -> bool {
        self.halted.is_empty()
    }
}

// ---------------------------------------------------------------------------
// Dispatch status computation
// ---------------------------------------------------------------------------

/// The dispatch status of a thread at instant `t`. Pure: `pending` is the
/// thread's trigger set (retained triggers plus ports with waiting events
/// plus fired timeouts), `time_offered_at` is the most recent instant at
/// which a time-triggered dispatch was already offered (each instant offers
/// at most one), and `timed_events` gates the event half of `timed`
/// dispatch. The returned status always carries the pending set; when the
/// thread is not enabled the caller is looking at what it would retain.
pub fn dispatch_status_for(
    protocol: DispatchProtocol,
    period_ns: Option<u64>,
    t: u64,
    pending: &BTreeSet<String>,
    time_offered_at: Option<u64>,
    timed_events: bool,
) -> DispatchStatus {
    let time_due =
        period_ns.is_some_and(|p| t % p == 0) && time_offered_at != Some(t);
    let kind = match protocol {
        DispatchProtocol::Periodic => {
            if time_due {
                StatusKind::TimeTriggered
            } else {
                StatusKind::NotEnabled
            }
        }
        DispatchProtocol::Sporadic => {
            if pending.is_empty() {
                StatusKind::NotEnabled
            } else {
                StatusKind::EventTriggered
            }
        }
        // At a shared instant the time trigger wins; events dispatch between
        // ticks (unless disabled, which reduces timed to periodic).
        DispatchProtocol::Timed => {
            if time_due {
                StatusKind::TimeTriggered
            } else if timed_events && !pending.is_empty() {
                StatusKind::EventTriggered
            } else {
                StatusKind::NotEnabled
            }
        }
    };
    DispatchStatus {
        kind,
        triggers: pending.clone(),
    }
}

// ---------------------------------------------------------------------------
// Engine
// ---------------------------------------------------------------------------

struct ThreadRt {
    id: ThreadId,
    protocol: DispatchProtocol,
    period_ns: Option<u64>,
    meta: PortMetaMap,
    state: ThreadState,
    behavior: Box<dyn Behavior>,
    timers: Vec<TimerState>,
    /// Per in-data-port: the frozen value of the previous accepted dispatch
    /// (seeded with the initially delivered value).
    prev_frozen: BTreeMap<String, Value>,
    updated_flags: BTreeMap<String, bool>,
    halted: Option<String>,
    time_offered_at: Option<u64>,
    in_data_ports: Vec<String>,
}

impl ThreadRt {
    fn pending_triggers(&self) -> BTreeSet<String> {
        let mut pending = self.state.status.triggers.clone();
        for (local, m) in &self.meta {
            if m.dir == Direction::In
                && m.kind != PortKind::Data
                && !self.state.ips_in[local].is_empty()
            {
                pending.insert(local.clone());
            }
        }
        pending
    }
}

struct Engine<'m, W: io::Write> {
    model: &'m InstanceModel,
    cfg: RunConfig,
    threads: Vec<ThreadRt>,
    index: BTreeMap<ThreadId, usize>,
    writer: TraceWriter<W>,
    rng: SimRng,
    cursor: Time,
    last_emit: Time,
    end_ns: u64,
    calendar: BTreeSet<u64>,
    injections: BTreeMap<u64, Vec<(PortId, Value)>>,
    summary: RunSummary,
}

/// Executes a model against a scenario, streaming the trace to `sink`.
pub fn run_model<W: io::Write>(
    model: &InstanceModel,
    scenario: &Scenario,
    cfg: &RunConfig,
    hosts: &HostRegistry,
    sink: W,
) -> Result<RunSummary, EngineError> {
    let mut engine = Engine::new(model, scenario, cfg, hosts, sink)?;
    engine.initialize()?;
    while let Some(t) = engine.calendar.pop_first() {
        if t > engine.end_ns {
            break;
        }
        engine.process_instant(t)?;
    }
    engine.finalize()?;
    let Engine {
        writer, summary, ..
    } = engine;
    writer.seal()?;
    Ok(summary)
}

impl<'m, W: io::Write> Engine<'m, W> {
    fn new(
        model: &'m InstanceModel,
        scenario: &Scenario,
        cfg: &RunConfig,
        hosts: &HostRegistry,
        sink: W,
    ) -> Result<Self, EngineError> {
        scenario.validate(model).map_err(EngineError::Scenario)?;
        let end_ns = scenario
            .stop_ns
            .map_or(cfg.horizon_ns, |s| s.min(cfg.horizon_ns));

        let mut threads = Vec::new();
        let mut index = BTreeMap::new();
        for decl in model.threads() {
            let behavior: Box<dyn Behavior> = match &decl.behavior {
                BehaviorRef::Machine(spec) => Box::new(MachineBehavior::new(spec.clone())),
                BehaviorRef::Host(name) => hosts.make(name).ok_or_else(|| {
                    EngineError::Startup(format!(
                        "thread {}: host behavior {name:?} is not registered",
                        decl.id
                    ))
                })?,
            };
            let meta = crate::rts::port_meta_of(decl);
            let state = ThreadState::from_meta(&meta);
            let in_data_ports = meta
                .iter()
                .filter(|(_, m)| m.dir == Direction::In && m.kind == PortKind::Data)
                .map(|(n, _)| n.clone())
                .collect();
            index.insert(decl.id.clone(), threads.len());
            threads.push(ThreadRt {
                id: decl.id.clone(),
                protocol: decl.dispatch,
                period_ns: decl.period_ns,
                meta,
                state,
                behavior,
                timers: decl
                    .timeouts
                    .iter()
                    .map(|d| TimerState::new(d.clone()))
                    .collect(),
                prev_frozen: BTreeMap::new(),
                updated_flags: BTreeMap::new(),
                halted: None,
                time_offered_at: None,
                in_data_ports,
            });
        }

        let mut injections: BTreeMap<u64, Vec<(PortId, Value)>> = BTreeMap::new();
        let mut calendar: BTreeSet<u64> = BTreeSet::new();
        calendar.insert(0);
        for inj in &scenario.injections {
            if inj.at_ns <= end_ns {
                injections
                    .entry(inj.at_ns)
                    .or_default()
                    .push((inj.port.clone(), inj.value.clone()));
                calendar.insert(inj.at_ns);
            }
        }
        if let Some(stop) = scenario.stop_ns {
            if stop <= end_ns {
                calendar.insert(stop);
            }
        }

        let header = TraceHeader {
            version: TRACE_VERSION,
            model_hash: model.hash(),
            seed: cfg.seed,
            horizon_ns: end_ns,
            tie_break: TIE_BREAK_THREAD_ID_ASC.to_string(),
            model: model.clone(),
        };
        let writer = TraceWriter::new(sink, &header)?;

        Ok(Engine {
            model,
            cfg: cfg.clone(),
            threads,
            index,
            writer,
            rng: SimRng::new(cfg.seed),
            cursor: Time::ZERO,
            last_emit: Time::ZERO,
            end_ns,
            calendar,
            injections,
            summary: RunSummary {
                end_ns,
                instants: 0,
                rounds: 0,
                dispatches_offered: 0,
                dispatches_accepted: 0,
                fires: 0,
                records: 0,
                halted: Vec::new(),
            },
        })
    }

    fn emit(&mut self, rec: TraceRecord) -> Result<(), EngineError> {
        debug_assert!(rec.time() >= self.last_emit, "record order regressed");
        self.last_emit = rec.time();
        self.summary.records += 1;
        self.writer.record(&rec)?;
        Ok(())
    }

    fn emit_all(&mut self, recs: Vec<TraceRecord>) -> Result<(), EngineError> {
        for rec in recs {
            self.emit(rec)?;
        }
        Ok(())
    }

    // -- startup ------------------------------------------------------------

    /// Runs every behavior's initialization, fills unset out-data defaults,
    /// publishes and moves the initial values, arms every timeout, and
    /// records the resulting baseline — all at world (0, 0).
    fn initialize(&mut self) -> Result<(), EngineError> {
        self.emit(TraceRecord::PhaseChange {
            time: Time::ZERO,
            phase: Phase::Initialize,
        })?;

        for i in 0..self.threads.len() {
            let th = &mut self.threads[i];
            let mut svc = StateServices::new(
                &mut th.state,
                &th.meta,
                &th.updated_flags,
                Time::ZERO,
                true,
            );
            th.behavior
                .initialize(&mut svc)
                .map_err(|msg| EngineError::Startup(format!("thread {}: {msg}", th.id)))?;
            let requests = std::mem::take(&mut svc.timeout_requests);
            drop(svc);
            for req in requests {
                register_timeout(th, req)
                    .map_err(|msg| EngineError::Startup(format!("thread {}: {msg}", th.id)))?;
            }
            // Unset out-data ports publish their type's zero value so every
            // connected in-data port holds a value from the start.
            for (local, m) in &th.meta {
                if m.dir == Direction::Out
                    && m.kind == PortKind::Data
                    && th.state.aps_out[local].is_empty()
                {
                    th.state
                        .aps_out
                        .get_mut(local)
                        .unwrap()
                        .enqueue(
                            TimestampedValue::new(m.ty.zero_value(), Time::ZERO),
                            PortKind::Data,
                        )
                        .expect("empty one-deep queue accepts one value");
                }
            }
            th.state.send_output(&th.meta);
        }

        // Baseline variable values.
        let mut recs = Vec::new();
        for th in &self.threads {
            for (name, v) in &th.state.vars {
                recs.push(TraceRecord::Write {
                    time: Time::ZERO,
                    var: VariableId::var(&th.id, name),
                    val: TraceValue::Val(v.clone()),
                });
            }
        }
        self.emit_all(recs)?;

        // The first move, still at the baseline world.
        self.emit(TraceRecord::PhaseChange {
            time: Time::ZERO,
            phase: Phase::Move,
        })?;
        self.move_values(Time::ZERO, 0, false)?;
        let mut recs = Vec::new();
        for th in &self.threads {
            for (local, q) in &th.state.ips_in {
                if !q.is_empty() {
                    recs.push(TraceRecord::Write {
                        time: Time::ZERO,
                        var: VariableId::ips(&th.id, local),
                        val: TraceValue::Queue(q.clone()),
                    });
                }
            }
        }
        self.emit_all(recs)?;

        // Seed the updated() baseline with the initially delivered values,
        // then arm every timeout: creation is its first arming occurrence.
        for i in 0..self.threads.len() {
            let th = &mut self.threads[i];
            for p in &th.in_data_ports.clone() {
                if let Some(tv) = th.state.ips_in[p].head() {
                    th.prev_frozen.insert(p.clone(), tv.v.clone());
                }
            }
            let mut expiries = Vec::new();
            for k in 0..th.timers.len() {
                let d = th.timers[k]
                    .decl
                    .resolve_duration(&th.state)
                    .map_err(|msg| EngineError::Startup(format!("thread {}: {msg}", th.id)))?;
                th.timers[k].arm(0, d);
                expiries.extend(th.timers[k].armed_expiry);
            }
            for e in expiries {
                if e <= self.end_ns {
                    self.calendar.insert(e);
                }
            }
        }
        Ok(())
    }

    // -- one instant --------------------------------------------------------

    fn process_instant(&mut self, t: u64) -> Result<(), EngineError> {
        self.summary.instants += 1;
        if Time::new(t, 0) > self.cursor {
            self.cursor = Time::new(t, 0);
        }

        // 1. Due timers fire; a fire becomes a retained trigger.
        let mut fires = Vec::new();
        for (i, th) in self.threads.iter_mut().enumerate() {
            if th.halted.is_some() {
                continue;
            }
            for timer in &mut th.timers {
                if timer.due_at(t) {
                    timer.consume_fire();
                    fires.push((i, timer.decl.id.clone()));
                }
            }
        }
        for (i, id) in fires {
            let thread = self.threads[i].id.clone();
            self.threads[i].state.status.triggers.insert(id.clone());
            self.summary.fires += 1;
            self.emit(TraceRecord::Fire {
                time: Time::new(t, 0),
                timeout: id,
                thread,
            })?;
        }

        // 2. Scenario injections arrive on infrastructure in-queues.
        if let Some(list) = self.injections.remove(&t) {
            for (pid, value) in list {
                let di = self.index[&ThreadId::new(pid.thread_part())];
                let local = pid.local_name().to_string();
                let th = &mut self.threads[di];
                let kind = th.meta[&local].kind;
                let q = th.state.ips_in.get_mut(&local).unwrap();
                q.enqueue(TimestampedValue::new(value, Time::new(t, 0)), kind)
                    .map_err(|source| EngineError::Overflow {
                        port: pid.clone(),
                        t,
                        source,
                    })?;
                let snapshot = q.clone();
                let var = VariableId::ips(&th.id, &local);
                self.emit(TraceRecord::Write {
                    time: Time::new(t, 0),
                    var,
                    val: TraceValue::Queue(snapshot),
                })?;
                if kind != PortKind::Data {
                    self.arm_for_occurrence(di, &local, t)?;
                }
            }
        }

        // 3. Dispatch rounds until the instant settles.
        self.rounds(t)?;

        // 4. Keep the calendar fed with the next period multiples.
        let mut ticks = Vec::new();
        for th in &self.threads {
            if th.halted.is_some() {
                continue;
            }
            if let Some(p) = th.period_ns {
                let next = (t / p + 1).saturating_mul(p);
                if next <= self.end_ns {
                    ticks.push(next);
                }
            }
        }
        self.calendar.extend(ticks);
        Ok(())
    }

    fn status_for(&self, i: usize, t: u64) -> DispatchStatus {
        let th = &self.threads[i];
        dispatch_status_for(
            th.protocol,
            th.period_ns,
            t,
            &th.pending_triggers(),
            th.time_offered_at,
            self.cfg.enable_timed,
        )
    }

    fn rounds(&mut self, t: u64) -> Result<(), EngineError> {
        let mut round = 0u32;
        loop {
            let any_enabled = (0..self.threads.len()).any(|i| {
                self.threads[i].halted.is_none() && self.status_for(i, t).enabled()
            });
            if !any_enabled {
                return Ok(());
            }
            round += 1;
            if round > CASCADE_LIMIT {
                return Err(EngineError::CascadeLimit {
                    t,
                    limit: CASCADE_LIMIT,
                });
            }
            self.summary.rounds += 1;

            // Dispatch sub-phase: offer, and freeze inputs on acceptance.
            self.emit(TraceRecord::PhaseChange {
                time: self.cursor,
                phase: Phase::Dispatch,
            })?;
            let mut accepted: Vec<(usize, DispatchStatus)> = Vec::new();
            for i in 0..self.threads.len() {
                if self.threads[i].halted.is_some() {
                    continue;
                }
                let status = self.status_for(i, t);
                if !status.enabled() {
                    continue;
                }
                if status.kind == StatusKind::TimeTriggered {
                    self.threads[i].time_offered_at = Some(t);
                }
                let acc = self.threads[i].behavior.accepts(&status);
                self.summary.dispatches_offered += 1;
                let thread = self.threads[i].id.clone();
                self.emit(TraceRecord::Dispatch {
                    time: self.cursor,
                    thread,
                    status: status.clone(),
                    accepted: acc,
                })?;
                if !acc {
                    // Deferral: the status retains the triggers; waiting
                    // events stay on the infrastructure queues untouched.
                    self.threads[i].state.status = DispatchStatus::retained(status.triggers);
                    continue;
                }
                self.summary.dispatches_accepted += 1;
                self.cursor = self.cursor.succ();
                let w = self.cursor;
                let recs = {
                    let th = &mut self.threads[i];
                    let pre_ips = th.state.ips_in.clone();
                    let pre_aps = th.state.aps_in.clone();
                    th.state.receive_input(&th.meta);
                    for p in &th.in_data_ports {
                        let frozen = th.state.aps_in[p].head().map(|tv| tv.v.clone());
                        let flag = match (&frozen, th.prev_frozen.get(p)) {
                            (Some(f), Some(prev)) => f != prev,
                            (Some(_), None) => true,
                            (None, _) => false,
                        };
                        th.updated_flags.insert(p.clone(), flag);
                        if let Some(f) = frozen {
                            th.prev_frozen.insert(p.clone(), f);
                        }
                    }
                    // Acceptance consumes the triggers; the status names
                    // what this execution is for.
                    th.state.status = status.clone();
                    let mut recs = vec![TraceRecord::Rule {
                        time: w,
                        rule: RuleKind::ReceiveInput,
                        thread: th.id.clone(),
                    }];
                    queue_writes(w, &th.id, QueueSide::IpsIn, &pre_ips, &th.state.ips_in, &mut recs);
                    queue_writes(w, &th.id, QueueSide::ApsIn, &pre_aps, &th.state.aps_in, &mut recs);
                    recs
                };
                self.emit_all(recs)?;
                accepted.push((i, status));
            }

            // Compute sub-phase: behavior step then publication, per thread.
            self.emit(TraceRecord::PhaseChange {
                time: self.cursor,
                phase: Phase::Compute,
            })?;
            for k in 0..accepted.len() {
                let (i, status) = (accepted[k].0, accepted[k].1.clone());
                self.cursor = self.cursor.succ();
                let w = self.cursor;
                let outcome = {
                    let th = &mut self.threads[i];
                    let snapshot = th.state.clone();
                    let mut svc = StateServices::new(
                        &mut th.state,
                        &th.meta,
                        &th.updated_flags,
                        w,
                        false,
                    );
                    let res = th.behavior.compute(&mut svc, &status);
                    drop(svc);
                    match res {
                        Err(msg) => {
                            th.state = snapshot;
                            th.halted = Some(msg.clone());
                            Err((th.id.clone(), msg))
                        }
                        Ok(()) => {
                            let mut recs = vec![TraceRecord::Rule {
                                time: w,
                                rule: RuleKind::Compute,
                                thread: th.id.clone(),
                            }];
                            var_writes(w, &th.id, &snapshot.vars, &th.state.vars, &mut recs);
                            queue_writes(
                                w,
                                &th.id,
                                QueueSide::ApsIn,
                                &snapshot.aps_in,
                                &th.state.aps_in,
                                &mut recs,
                            );
                            queue_writes(
                                w,
                                &th.id,
                                QueueSide::ApsOut,
                                &snapshot.aps_out,
                                &th.state.aps_out,
                                &mut recs,
                            );
                            Ok(recs)
                        }
                    }
                };
                match outcome {
                    Err((id, msg)) => {
                        self.summary.halted.push((id.clone(), msg.clone()));
                        self.emit(TraceRecord::Halt {
                            time: w,
                            thread: id,
                            reason: msg,
                        })?;
                        continue;
                    }
                    Ok(recs) => self.emit_all(recs)?,
                }

                // Publication.
                self.cursor = self.cursor.succ();
                let w2 = self.cursor;
                let (recs, sent_ports) = {
                    let th = &mut self.threads[i];
                    let pre_aps = th.state.aps_out.clone();
                    let pre_ips = th.state.ips_out.clone();
                    th.state.send_output(&th.meta);
                    let mut recs = vec![TraceRecord::Rule {
                        time: w2,
                        rule: RuleKind::SendOutput,
                        thread: th.id.clone(),
                    }];
                    queue_writes(w2, &th.id, QueueSide::ApsOut, &pre_aps, &th.state.aps_out, &mut recs);
                    queue_writes(w2, &th.id, QueueSide::IpsOut, &pre_ips, &th.state.ips_out, &mut recs);
                    let sent: Vec<String> = th
                        .state
                        .ips_out
                        .iter()
                        .filter(|(local, q)| {
                            !q.is_empty() && th.meta[local.as_str()].kind != PortKind::Data
                        })
                        .map(|(local, _)| local.clone())
                        .collect();
                    th.state.status = DispatchStatus::not_enabled();
                    (recs, sent)
                };
                self.emit_all(recs)?;
                // Publishing on a reset port is an arming occurrence.
                for local in sent_ports {
                    self.arm_for_occurrence(i, &local, t)?;
                }
            }

            // Move sub-phase: one world for every transfer.
            self.emit(TraceRecord::PhaseChange {
                time: self.cursor,
                phase: Phase::Move,
            })?;
            let pending = self
                .threads
                .iter()
                .any(|th| th.state.ips_out.values().any(|q| !q.is_empty()));
            let delivered_event = if pending {
                self.cursor = self.cursor.succ();
                self.move_values(self.cursor, t, true)?
            } else {
                false
            };
            if !delivered_event {
                return Ok(());
            }
        }
    }

    /// Transfers every pending output value to its destinations in one
    /// world. Arrival order into a shared destination queue is the only
    /// scheduling freedom and is resolved by the seeded shuffle (never
    /// consulted for single arrivals). Returns whether any event or
    /// event-data port received a value.
    fn move_values(
        &mut self,
        world: Time,
        t: u64,
        record: bool,
    ) -> Result<bool, EngineError> {
        // Pending sources in (thread, port) order.
        let mut pending: Vec<(usize, String, PortId, TimestampedValue)> = Vec::new();
        for (i, th) in self.threads.iter().enumerate() {
            for (local, q) in &th.state.ips_out {
                if let Some(tv) = q.head() {
                    pending.push((
                        i,
                        local.clone(),
                        PortId::qualified(&th.id, local),
                        tv.clone(),
                    ));
                }
            }
        }
        if pending.is_empty() {
            return Ok(false);
        }

        // Fan out to destinations, keyed (and so processed) in sorted order.
        let mut by_dest: BTreeMap<PortId, Vec<TimestampedValue>> = BTreeMap::new();
        for (_, _, src_pid, tv) in &pending {
            for dst in self.model.conn_dest(src_pid)? {
                by_dest.entry(dst.clone()).or_default().push(tv.clone());
            }
        }

        let mut delivered_event = false;
        let mut recs = Vec::new();
        let mut occurrences: Vec<(usize, String)> = Vec::new();
        for (dst, mut arrivals) in by_dest {
            if arrivals.len() >= 2 {
                self.rng.shuffle(&mut arrivals);
            }
            let di = self.index[&ThreadId::new(dst.thread_part())];
            let local = dst.local_name().to_string();
            let th = &mut self.threads[di];
            let kind = th.meta[&local].kind;
            let q = th.state.ips_in.get_mut(&local).unwrap();
            for tv in arrivals {
                q.enqueue(tv, kind).map_err(|source| EngineError::Overflow {
                    port: dst.clone(),
                    t,
                    source,
                })?;
            }
            recs.push(TraceRecord::Write {
                time: world,
                var: VariableId::ips(&th.id, &local),
                val: TraceValue::Queue(q.clone()),
            });
            if kind != PortKind::Data {
                delivered_event = true;
                occurrences.push((di, local));
            }
        }

        // Sources drain.
        for (i, local, _, _) in &pending {
            let th = &mut self.threads[*i];
            let q = th.state.ips_out.get_mut(local).unwrap();
            q.dequeue_all();
            recs.push(TraceRecord::Write {
                time: world,
                var: VariableId::ips(&th.id, local),
                val: TraceValue::Queue(q.clone()),
            });
        }

        if record {
            self.emit_all(recs)?;
        }
        for (di, local) in occurrences {
            self.arm_for_occurrence(di, &local, t)?;
        }
        Ok(delivered_event)
    }

    /// An occurrence on `local` at instant `t` re-arms every timeout of the
    /// thread that lists it as a reset port.
    fn arm_for_occurrence(&mut self, i: usize, local: &str, t: u64) -> Result<(), EngineError> {
        let mut expiries = Vec::new();
        {
            let th = &mut self.threads[i];
            for k in 0..th.timers.len() {
                if !th.timers[k].decl.reset.iter().any(|r| r == local) {
                    continue;
                }
                let d = th.timers[k]
                    .decl
                    .resolve_duration(&th.state)
                    .map_err(|msg| EngineError::Duration { t, msg })?;
                th.timers[k].arm(t, d);
                expiries.extend(th.timers[k].armed_expiry);
            }
        }
        for e in expiries {
            if e <= self.end_ns {
                self.calendar.insert(e);
            }
        }
        Ok(())
    }

    /// Finalization changes no thread state; the trace shows the phase pair
    /// and nothing between.
    fn finalize(&mut self) -> Result<(), EngineError> {
        let w = if self.cursor.t == self.end_ns {
            self.cursor
        } else {
            Time::new(self.end_ns, 0)
        };
        self.emit(TraceRecord::PhaseChange {
            time: w,
            phase: Phase::Finalize,
        })?;
        for th in &mut self.threads {
            th.behavior.finalize();
        }
        self.emit(TraceRecord::PhaseChange {
            time: w,
            phase: Phase::Off,
        })?;
        Ok(())
    }
}

fn register_timeout(th: &mut ThreadRt, req: TimeoutRequest) -> Result<(), String> {
    if th.meta.contains_key(&req.id) || th.timers.iter().any(|t| t.decl.id == req.id) {
        return Err(format!("timeout id {:?} is already taken", req.id));
    }
    if req.reset.is_empty() {
        return Err("timeout needs at least one reset port".into());
    }
    let mut seen = BTreeSet::new();
    for p in &req.reset {
        match th.meta.get(p) {
            Some(m) if m.kind != PortKind::Data => {}
            Some(_) => return Err(format!("reset port {p:?} is a data port")),
            None => return Err(format!("reset port {p:?} is not a port of the thread")),
        }
        if !seen.insert(p.clone()) {
            return Err(format!("duplicate reset port {p:?}"));
        }
    }
    match &req.duration {
        TimeoutDuration::Fixed(0) => return Err("timeout duration must be positive".into()),
        TimeoutDuration::Fixed(_) => {}
        TimeoutDuration::FromPort(p) => match th.meta.get(p) {
            Some(m)
                if m.dir == Direction::In
                    && m.kind == PortKind::Data
                    && m.ty == crate::model::TypeRef::Int => {}
            _ => {
                return Err(format!(
                    "duration port {p:?} must be an in data port of type int"
                ))
            }
        },
    }
    th.timers.push(TimerState::new(TimeoutDecl {
        id: req.id,
        reset: req.reset,
        duration: req.duration,
    }));
    Ok(())
}

// ---------------------------------------------------------------------------
// Diff recording
// ---------------------------------------------------------------------------

#[derive(Clone, Copy)]
enum QueueSide {
    IpsIn,
    ApsIn,
    ApsOut,
    IpsOut,
}

/// Records a write for every queue whose content changed between `pre` and
/// `post`, in key order, all at world `w`.
fn queue_writes(
    w: Time,
    thread: &ThreadId,
    side: QueueSide,
    pre: &BTreeMap<String, PortQueue>,
    post: &BTreeMap<String, PortQueue>,
    out: &mut Vec<TraceRecord>,
) {
    for (local, q) in post {
        if pre.get(local) == Some(q) {
            continue;
        }
        let var = match side {
            QueueSide::IpsIn | QueueSide::IpsOut => VariableId::ips(thread, local),
            QueueSide::ApsIn | QueueSide::ApsOut => VariableId::aps(thread, local),
        };
        out.push(TraceRecord::Write {
            time: w,
            var,
            val: TraceValue::Queue(q.clone()),
        });
    }
}

/// Records a write for every variable that changed or appeared.
fn var_writes(
    w: Time,
    thread: &ThreadId,
    pre: &BTreeMap<String, Value>,
    post: &BTreeMap<String, Value>,
    out: &mut Vec<TraceRecord>,
) {
    for (name, v) in post {
        if pre.get(name) == Some(v) {
            continue;
        }
        out.push(TraceRecord::Write {
            time: w,
            var: VariableId::var(thread, name),
            val: TraceValue::Val(v.clone()),
        });
    }
}

// ---------------------------------------------------------------------------
// Convenience wrappers
// ---------------------------------------------------------------------------

/// Runs and returns the trace as bytes alongside the summary.
pub fn run_to_vec(
    model: &InstanceModel,
    scenario: &Scenario,
    cfg: &RunConfig,
    hosts: &HostRegistry,
) -> Result<(RunSummary, Vec<u8>), EngineError> {
    let mut buf = Vec::new();
    let summary = run_model(model, scenario, cfg, hosts, &mut buf)?;
    Ok((summary, buf))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::parse_model;
    use crate::temporal::TraceData;

    fn producer_consumer() -> InstanceModel {
        let json = serde_json::json!({
            "threads": [
                {
                    "id": "prod",
                    "dispatch": "periodic",
                    "period_ns": 10_000_000u64,
                    "ports": [
                        {"id": "tick_out", "kind": "eventdata", "dir": "out", "type": "int"},
                        {"id": "temp_out", "kind": "data", "dir": "out", "type": "int"}
                    ],
                    "behavior": {
                        "states": ["run"],
                        "initial": "run",
                        "init_actions": ["n := 0"],
                        "transitions": [
                            {"from": "run", "when": "on dispatch timetriggered",
                             "actions": ["n := n + 1", "put(tick_out, n)", "put(temp_out, n * 10)"],
                             "to": "run"}
                        ]
                    }
                },
                {
                    "id": "sink",
                    "dispatch": "sporadic",
                    "ports": [
                        {"id": "tick_in", "kind": "eventdata", "dir": "in", "type": "int", "queueSize": 4},
                        {"id": "temp_in", "kind": "data", "dir": "in", "type": "int"}
                    ],
                    "behavior": {
                        "states": ["run"],
                        "initial": "run",
                        "init_actions": ["seen := 0", "hot := 0"],
                        "transitions": [
                            {"from": "run", "when": "on dispatch tick_in",
                             "actions": ["seen := seen + value(tick_in)",
                                          "hot := value(temp_in)",
                                          "next(tick_in)"],
                             "to": "run"}
                        ]
                    }
                }
            ],
            "connections": [
                ["prod.tick_out", "sink.tick_in"],
                ["prod.temp_out", "sink.temp_in"]
            ]
        });
        parse_model(&json.to_string()).unwrap()
    }

    fn run_pc(horizon: u64, seed: u64) -> (RunSummary, TraceData) {
        let model = producer_consumer();
        let cfg = RunConfig {
            horizon_ns: horizon,
            seed,
            enable_timed: true,
        };
        let (summary, bytes) =
            run_to_vec(&model, &Scenario::empty(), &cfg, &HostRegistry::new()).unwrap();
        let trace = TraceData::from_reader(bytes.as_slice()).unwrap();
        (summary, trace)
    }

    #[test]
    fn pipeline_runs_and_counts_dispatches() {
        let (summary, trace) = run_pc(50_000_000, 1);
        assert!(summary.clean());
        // prod ticks at 0..=50ms -> 6 time dispatches; each tick cascades a
        // sink dispatch at the same instant.
        assert_eq!(summary.dispatches_accepted, 12);
        let v = trace
            .eval_str("Var:sink:seen", Time::new(50_000_000, u32::MAX))
            .unwrap();
        // seen = 1+2+..+6
        assert_eq!(v.into_value().unwrap(), Value::Int(21));
        let hot = trace
            .eval_str("Var:sink:hot", Time::new(50_000_000, u32::MAX))
            .unwrap();
        assert_eq!(hot.into_value().unwrap(), Value::Int(60));
    }

    #[test]
    fn init_baseline_sits_at_the_origin_world() {
        let (_, trace) = run_pc(20_000_000, 1);
        // The initially delivered data value is visible at (0,0)...
        let q = trace
            .at(&VariableId::ips(&ThreadId::new("sink"), "temp_in"), Time::ZERO)
            .unwrap();
        assert_eq!(q.as_queue().unwrap().len(), 1);
        assert_eq!(q.as_queue().unwrap().head().unwrap().v, Value::Int(0));
        // ...and so are the init-assigned variables.
        let n = trace
            .at(&VariableId::var(&ThreadId::new("prod"), "n"), Time::ZERO)
            .unwrap();
        assert_eq!(n.as_value().unwrap(), &Value::Int(0));
    }

    #[test]
    fn same_seed_is_byte_identical() {
        let model = producer_consumer();
        let cfg = RunConfig {
            horizon_ns: 40_000_000,
            seed: 7,
            enable_timed: true,
        };
        let (_, a) = run_to_vec(&model, &Scenario::empty(), &cfg, &HostRegistry::new()).unwrap();
        let (_, b) = run_to_vec(&model, &Scenario::empty(), &cfg, &HostRegistry::new()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn deferral_retains_triggers_until_the_set_completes() {
        let json = serde_json::json!({
            "threads": [{
                "id": "gate",
                "dispatch": "sporadic",
                "ports": [
                    {"id": "A", "kind": "event", "dir": "in", "type": "event", "queueSize": 2},
                    {"id": "B", "kind": "event", "dir": "in", "type": "event", "queueSize": 2}
                ],
                "behavior": {
                    "states": ["X", "Y"],
                    "initial": "X",
                    "transitions": [
                        {"from": "X", "when": "on dispatch A and B", "actions": [], "to": "Y"}
                    ]
                }
            }],
            "connections": []
        });
        let model = parse_model(&json.to_string()).unwrap();
        let scenario = Scenario {
            injections: vec![
                Injection {
                    at_ns: 100_000_000,
                    port: PortId::new("gate.A"),
                    value: Value::Event,
                },
                Injection {
                    at_ns: 300_000_000,
                    port: PortId::new("gate.B"),
                    value: Value::Event,
                },
            ],
            stop_ns: None,
        };
        let cfg = RunConfig::new(400_000_000);
        let (summary, bytes) =
            run_to_vec(&model, &scenario, &cfg, &HostRegistry::new()).unwrap();
        assert!(summary.clean());
        let trace = TraceData::from_reader(bytes.as_slice()).unwrap();

        let dispatches: Vec<_> = trace
            .records
            .iter()
            .filter_map(|r| match r {
                TraceRecord::Dispatch {
                    time,
                    status,
                    accepted,
                    ..
                } => Some((time.t, status.clone(), *accepted)),
                _ => None,
            })
            .collect();
        assert_eq!(dispatches.len(), 2);
        // First offer at 100ms: declined, only A pending.
        assert_eq!(dispatches[0].0, 100_000_000);
        assert!(!dispatches[0].2);
        assert_eq!(
            dispatches[0].1.triggers.iter().cloned().collect::<Vec<_>>(),
            vec!["A"]
        );
        // Second offer at 300ms: both triggers present, accepted.
        assert_eq!(dispatches[1].0, 300_000_000);
        assert!(dispatches[1].2);
        assert_eq!(
            dispatches[1].1.triggers.iter().cloned().collect::<Vec<_>>(),
            vec!["A", "B"]
        );
        // The machine reached Y.
        let s = trace
            .eval_str("Var:gate:@state", Time::new(400_000_000, u32::MAX));
        // "@state" is not a parseable identifier; read it via at().
        assert!(s.is_err());
        let st = trace
            .at(
                &VariableId::var(&ThreadId::new("gate"), "@state"),
                Time::new(400_000_000, u32::MAX),
            )
            .unwrap();
        assert_eq!(st.as_value().unwrap(), &Value::enumeration("Y"));
    }

    #[test]
    fn watchdog_fires_and_refires_on_its_own_output() {
        // One thread: timeout (1s) resets on its own pace output; with no
        // input it paces at 1s, 2s, 3s.
        let json = serde_json::json!({
            "threads": [{
                "id": "pm",
                "dispatch": "sporadic",
                "ports": [
                    {"id": "n", "kind": "event", "dir": "in", "type": "event", "queueSize": 4},
                    {"id": "p", "kind": "event", "dir": "out", "type": "event"}
                ],
                "timeout": {"id": "lrl", "reset": ["n", "p"], "duration_ns": 1_000_000_000u64},
                "behavior": {
                    "states": ["run"],
                    "initial": "run",
                    "transitions": [
                        {"from": "run", "when": "on dispatch lrl", "actions": ["emit(p)"], "to": "run"},
                        {"from": "run", "when": "on dispatch n", "actions": ["next(n)"], "to": "run"}
                    ]
                }
            }],
            "connections": []
        });
        let model = parse_model(&json.to_string()).unwrap();
        let cfg = RunConfig::new(3_500_000_000);
        let (summary, bytes) =
            run_to_vec(&model, &Scenario::empty(), &cfg, &HostRegistry::new()).unwrap();
        assert!(summary.clean());
        assert_eq!(summary.fires, 3);
        let trace = TraceData::from_reader(bytes.as_slice()).unwrap();
        let fires: Vec<u64> = trace
            .records
            .iter()
            .filter_map(|r| match r {
                TraceRecord::Fire { time, .. } => Some(time.t),
                _ => None,
            })
            .collect();
        assert_eq!(fires, vec![1_000_000_000, 2_000_000_000, 3_000_000_000]);
    }

    #[test]
    fn behavior_fault_halts_the_thread_but_not_the_run() {
        struct FailSecond {
            calls: u32,
        }
        impl Behavior for FailSecond {
            fn initialize(
                &mut self,
                _api: &mut dyn crate::rts::InitServices,
            ) -> Result<(), String> {
                Ok(())
            }
            fn accepts(&self, status: &DispatchStatus) -> bool {
                status.enabled()
            }
            fn compute(
                &mut self,
                _api: &mut dyn crate::rts::ComputeServices,
                _status: &DispatchStatus,
            ) -> Result<(), String> {
                self.calls += 1;
                if self.calls >= 2 {
                    Err("synthetic fault".into())
                } else {
                    Ok(())
                }
            }
        }

        let json = serde_json::json!({
            "threads": [
                {
                    "id": "flaky",
                    "dispatch": "periodic",
                    "period_ns": 10_000_000u64,
                    "ports": [],
                    "behavior": {"host": "fail_second"}
                },
                {
                    "id": "steady",
                    "dispatch": "periodic",
                    "period_ns": 10_000_000u64,
                    "ports": [],
                    "behavior": {
                        "states": ["s"], "initial": "s",
                        "init_actions": ["k := 0"],
                        "transitions": [
                            {"from": "s", "when": "on dispatch", "actions": ["k := k + 1"], "to": "s"}
                        ]
                    }
                }
            ],
            "connections": []
        });
        let model = parse_model(&json.to_string()).unwrap();
        let mut hosts = HostRegistry::new();
        hosts.register("fail_second", || Box::new(FailSecond { calls: 0 }));
        let cfg = RunConfig::new(50_000_000);
        let (summary, bytes) = run_to_vec(&model, &Scenario::empty(), &cfg, &hosts).unwrap();
        assert_eq!(summary.halted.len(), 1);
        assert_eq!(summary.halted[0].0.as_str(), "flaky");
        let trace = TraceData::from_reader(bytes.as_slice()).unwrap();
        let halts: Vec<_> = trace
            .records
            .iter()
            .filter(|r| matches!(r, TraceRecord::Halt { .. }))
            .collect();
        assert_eq!(halts.len(), 1);
        // The healthy thread kept going through the whole horizon.
        let k = trace
            .eval_str("Var:steady:k", Time::new(50_000_000, u32::MAX))
            .unwrap();
        assert_eq!(k.into_value().unwrap(), Value::Int(6));
    }

    #[test]
    fn init_event_emission_aborts_startup() {
        let json = serde_json::json!({
            "threads": [{
                "id": "bad",
                "dispatch": "sporadic",
                "ports": [
                    {"id": "e", "kind": "event", "dir": "out", "type": "event"},
                    {"id": "inp", "kind": "event", "dir": "in", "type": "event", "queueSize": 1}
                ],
                "behavior": {
                    "states": ["s"], "initial": "s",
                    "init_actions": ["emit(e)"],
                    "transitions": [
                        {"from": "s", "when": "on dispatch", "actions": [], "to": "s"}
                    ]
                }
            }],
            "connections": []
        });
        let model = parse_model(&json.to_string()).unwrap();
        let cfg = RunConfig::new(1_000_000);
        let err = run_to_vec(&model, &Scenario::empty(), &cfg, &HostRegistry::new()).unwrap_err();
        match err {
            EngineError::Startup(msg) => {
                assert!(msg.contains("event emission during initialization"), "{msg}")
            }
            other => panic!("expected startup failure, got {other}"),
        }
    }

    #[test]
    fn stop_event_truncates_the_run() {
        let model = producer_consumer();
        let scenario = Scenario {
            injections: vec![],
            stop_ns: Some(25_000_000),
        };
        let cfg = RunConfig::new(1_000_000_000);
        let (summary, bytes) =
            run_to_vec(&model, &scenario, &cfg, &HostRegistry::new()).unwrap();
        assert_eq!(summary.end_ns, 25_000_000);
        // Ticks at 0, 10ms, 20ms only.
        assert_eq!(summary.dispatches_accepted, 6);
        let trace = TraceData::from_reader(bytes.as_slice()).unwrap();
        assert_eq!(trace.horizon(), 25_000_000);
    }

    #[test]
    fn updated_reflects_data_freshness() {
        // Consumer is sporadic on a kick event; producer rewrites its data
        // value only on every second tick, so updated() alternates.
        let json = serde_json::json!({
            "threads": [
                {
                    "id": "prod",
                    "dispatch": "periodic",
                    "period_ns": 10_000_000u64,
                    "ports": [
                        {"id": "kick", "kind": "event", "dir": "out", "type": "event"},
                        {"id": "d", "kind": "data", "dir": "out", "type": "int"}
                    ],
                    "behavior": {
                        "states": ["a", "b"],
                        "initial": "a",
                        "init_actions": ["n := 0"],
                        "transitions": [
                            {"from": "a", "when": "on dispatch",
                             "actions": ["n := n + 1", "put(d, n)", "emit(kick)"], "to": "b"},
                            {"from": "b", "when": "on dispatch", "actions": ["emit(kick)"], "to": "a"}
                        ]
                    }
                },
                {
                    "id": "cons",
                    "dispatch": "sporadic",
                    "ports": [
                        {"id": "kick_in", "kind": "event", "dir": "in", "type": "event", "queueSize": 2},
                        {"id": "d_in", "kind": "data", "dir": "in", "type": "int"}
                    ],
                    "behavior": {
                        "states": ["s"], "initial": "s",
                        "init_actions": ["saw := false"],
                        "transitions": [
                            {"from": "s", "when": "on dispatch kick_in",
                             "actions": ["saw := updated(d_in)"], "to": "s"}
                        ]
                    }
                }
            ],
            "connections": [
                ["prod.kick", "cons.kick_in"],
                ["prod.d", "cons.d_in"]
            ]
        });
        let model = parse_model(&json.to_string()).unwrap();
        let cfg = RunConfig::new(20_000_000);
        let (summary, bytes) =
            run_to_vec(&model, &Scenario::empty(), &cfg, &HostRegistry::new()).unwrap();
        assert!(summary.clean());
        let trace = TraceData::from_reader(bytes.as_slice()).unwrap();
        let saw_at = |t: u64| {
            trace
                .eval_str("Var:cons:saw", Time::new(t, u32::MAX))
                .unwrap()
                .into_value()
                .unwrap()
        };
        // Tick 0 rewrites d (0 -> 1): fresh. Tick 1 leaves d alone: stale.
        // Tick 2 rewrites again (1 -> 2): fresh.
        assert_eq!(saw_at(0), Value::Bool(true));
        assert_eq!(saw_at(10_000_000), Value::Bool(false));
        assert_eq!(saw_at(20_000_000), Value::Bool(true));
    }

    #[test]
    fn machine_conditions_are_over_triggers_only() {
        // Dispatch conditions speak about the status (triggers and kind);
        // value-level tests like updated() belong in actions, not conditions.
        let json = serde_json::json!({
            "threads": [{
                "id": "cons",
                "dispatch": "sporadic",
                "ports": [
                    {"id": "kick_in", "kind": "event", "dir": "in", "type": "event", "queueSize": 2},
                    {"id": "d_in", "kind": "data", "dir": "in", "type": "int"}
                ],
                "behavior": {
                    "states": ["s"], "initial": "s",
                    "transitions": [
                        {"from": "s", "when": "on dispatch kick_in and updated(d_in)",
                         "actions": [], "to": "s"}
                    ]
                }
            }],
            "connections": []
        });
        assert!(parse_model(&json.to_string()).is_err());
    }

    #[test]
    fn dispatch_status_rules() {
        let none: BTreeSet<String> = BTreeSet::new();
        let some: BTreeSet<String> = ["p".to_string()].into();

        // Periodic: exactly at multiples, once per instant.
        let s = dispatch_status_for(DispatchProtocol::Periodic, Some(10), 20, &none, None, true);
        assert_eq!(s.kind, StatusKind::TimeTriggered);
        let s = dispatch_status_for(DispatchProtocol::Periodic, Some(10), 25, &none, None, true);
        assert_eq!(s.kind, StatusKind::NotEnabled);
        let s =
            dispatch_status_for(DispatchProtocol::Periodic, Some(10), 20, &none, Some(20), true);
        assert_eq!(s.kind, StatusKind::NotEnabled, "one offer per instant");

        // Sporadic: pending triggers and nothing else.
        let s = dispatch_status_for(DispatchProtocol::Sporadic, None, 25, &some, None, true);
        assert_eq!(s.kind, StatusKind::EventTriggered);
        assert!(s.triggers.contains("p"));
        let s = dispatch_status_for(DispatchProtocol::Sporadic, None, 20, &none, None, true);
        assert_eq!(s.kind, StatusKind::NotEnabled);

        // Timed: time wins at shared instants; events between ticks.
        let s = dispatch_status_for(DispatchProtocol::Timed, Some(10), 20, &some, None, true);
        assert_eq!(s.kind, StatusKind::TimeTriggered);
        let s = dispatch_status_for(DispatchProtocol::Timed, Some(10), 25, &some, None, true);
        assert_eq!(s.kind, StatusKind::EventTriggered);
        let s = dispatch_status_for(DispatchProtocol::Timed, Some(10), 25, &some, None, false);
        assert_eq!(s.kind, StatusKind::NotEnabled, "event half disabled");
        let s = dispatch_status_for(DispatchProtocol::Timed, Some(10), 20, &some, Some(20), false);
        assert_eq!(s.kind, StatusKind::NotEnabled);
    }
}
