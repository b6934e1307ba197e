//! Per-thread run-time state and services.
//!
//! A thread's dynamic state is the six-tuple of its infrastructure in-queues
//! (`ips_in`), application in-queues (`aps_in`), application out-queues
//! (`aps_out`), infrastructure out-queues (`ips_out`), behavior variables,
//! and current dispatch status. Threads follow a receive–execute–send
//! discipline:
//!
//! * [`ThreadState::receive_input`] freezes the inputs: for every in port the
//!   application queue becomes a copy of the infrastructure queue, and the
//!   infrastructure queue is drained unless the port is a data port (data
//!   values persist until overwritten — the sampled-value semantics).
//! * The behavior then computes against the frozen view only.
//! * [`ThreadState::send_output`] publishes: every out port's infrastructure
//!   queue is replaced by the application queue, which empties. Output ports
//!   are one-deep; a later `put_value` before the send replaces the pending
//!   value.
//!
//! Behaviors come in two forms with identical service contracts: a
//! transition-machine interpreted from the model file ([`BehaviorSpec`]), or
//! a host-supplied [`Behavior`] implementation registered by name. The
//! service traits expose exactly the legal calls for each window — there is
//! no way for a behavior to read inputs during initialization or to create a
//! timeout after it.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::expr::{eval_expr, parse_expr, EvalContext, Expr, Val};
use crate::model::{Direction, PortKind, ThreadDecl, TypeRef};
use crate::temporal::Time;
use crate::timeout::TimeoutDuration;
use crate::values::{PortQueue, TimestampedValue, Value};

/// Reserved variable name under which a machine behavior records its current
/// state. User identifiers cannot start with `@`, so there is no collision.
pub const STATE_VAR: &str = "@state";

// ---------------------------------------------------------------------------
// Dispatch status
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum StatusKind {
    TimeTriggered,
    EventTriggered,
    NotEnabled,
}

/// What a thread has been (or is being) dispatched for. `triggers` holds the
/// pending trigger ids — port local names and timeout ids. Triggers survive a
/// declined dispatch (the status retains them) and are cleared when a
/// dispatch is accepted.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DispatchStatus {
    pub kind: StatusKind,
    pub triggers: BTreeSet<String>,
}

impl DispatchStatus {
    pub fn not_enabled() -> Self {
        Self {
            kind: StatusKind::NotEnabled,
            triggers: BTreeSet::new(),
        }
    }

    pub fn time_triggered() -> Self {
        Self {
            kind: StatusKind::TimeTriggered,
            triggers: BTreeSet::new(),
        }
    }

    pub fn event<I>(triggers: I) -> Self
    where
        I: IntoIterator,
        I::Item: Into<String>,
    {
        Self {
            kind: StatusKind::EventTriggered,
            triggers: triggers.into_iter().map(Into::into).collect(),
        }
    }

    /// Retained-but-not-enabled: what a thread keeps after declining.
    pub fn retained<I>(triggers: I) -> Self
    where
        I: IntoIterator,
        I::Item: Into<String>,
    {
        Self {
            kind: StatusKind::NotEnabled,
            triggers: triggers.into_iter().map(Into::into).collect(),
        }
    }

    pub fn enabled(&self) -> bool {
        self.kind != StatusKind::NotEnabled
    }
}

// ---------------------------------------------------------------------------
// Thread state
// ---------------------------------------------------------------------------

/// Static facts about one port, enough to drive the rules without a full
/// model (the conformance harnesses build these directly).
#[derive(Debug, Clone)]
pub struct PortMeta {
    pub kind: PortKind,
    pub dir: Direction,
    /// In-queue capacity. Out-side queues are always one-deep.
    pub capacity: usize,
    pub ty: TypeRef,
}

pub type PortMetaMap = BTreeMap<String, PortMeta>;

/// Builds the meta map for a declared thread (keyed by local port name).
pub fn port_meta_of(decl: &ThreadDecl) -> PortMetaMap {
    decl.ports
        .iter()
        .map(|p| {
            (
                p.id.local_name().to_string(),
                PortMeta {
                    kind: p.kind,
                    dir: p.dir,
                    capacity: p.queue_size,
                    ty: p.ty.clone(),
                },
            )
        })
        .collect()
}

/// The dynamic six-tuple of one thread. Queue maps are keyed by local port
/// name; every declared port has an entry on its side(s) at all times.
#[derive(Debug, Clone, PartialEq)]
pub struct ThreadState {
    pub ips_in: BTreeMap<String, PortQueue>,
    pub aps_in: BTreeMap<String, PortQueue>,
    pub aps_out: BTreeMap<String, PortQueue>,
    pub ips_out: BTreeMap<String, PortQueue>,
    pub vars: BTreeMap<String, Value>,
    pub status: DispatchStatus,
}

impl ThreadState {
    /// Fresh state with empty queues shaped by the meta map.
    pub fn from_meta(meta: &PortMetaMap) -> Self {
        let mut st = ThreadState {
            ips_in: BTreeMap::new(),
            aps_in: BTreeMap::new(),
            aps_out: BTreeMap::new(),
            ips_out: BTreeMap::new(),
            vars: BTreeMap::new(),
            status: DispatchStatus::not_enabled(),
        };
        for (name, m) in meta {
            match m.dir {
                Direction::In => {
                    st.ips_in.insert(name.clone(), PortQueue::new(m.capacity));
                    st.aps_in.insert(name.clone(), PortQueue::new(m.capacity));
                }
                Direction::Out => {
                    st.aps_out.insert(name.clone(), PortQueue::new(1));
                    st.ips_out.insert(name.clone(), PortQueue::new(1));
                }
            }
        }
        st
    }

    /// Freezes inputs: for every in port, the application queue becomes the
    /// infrastructure queue's content (replacing whatever the application
    /// side still held), and non-data infrastructure queues empty. Data
    /// infrastructure queues are untouched — the latest value stays current.
    pub fn receive_input(&mut self, meta: &PortMetaMap) {
        for (name, m) in meta {
            if m.dir != Direction::In {
                continue;
            }
            let ips = self.ips_in.get_mut(name).expect("declared in port");
            let frozen = ips.clone();
            if m.kind != PortKind::Data {
                ips.dequeue_all();
            }
            self.aps_in.insert(name.clone(), frozen);
        }
    }

    /// Publishes outputs: for every out port the infrastructure queue is
    /// overwritten by the application queue (even when that is empty — a
    /// port with nothing pending sends nothing), and the application queue
    /// empties.
    pub fn send_output(&mut self, meta: &PortMetaMap) {
        for (name, m) in meta {
            if m.dir != Direction::Out {
                continue;
            }
            let aps = self.aps_out.get_mut(name).expect("declared out port");
            let sent = std::mem::replace(aps, PortQueue::new(1));
            self.ips_out.insert(name.clone(), sent);
        }
    }
}

// ---------------------------------------------------------------------------
// Services
// ---------------------------------------------------------------------------

/// Timeout creation request captured during initialization; the engine
/// validates and registers it.
#[derive(Debug, Clone)]
pub struct TimeoutRequest {
    pub id: String,
    pub reset: Vec<String>,
    pub duration: TimeoutDuration,
}

/// Services legal during the initialization window: variables may be set,
/// out **data** ports may be given their initial values, and timeouts may be
/// created. Emitting onto an event or event-data port here is a startup
/// fault; reading inputs is not expressible at all.
pub trait InitServices {
    fn get_var(&self, name: &str) -> Result<Value, String>;
    fn set_var(&mut self, name: &str, v: Value) -> Result<(), String>;
    fn put_value(&mut self, port: &str, v: Value) -> Result<(), String>;
    fn create_timeout(
        &mut self,
        reset: &[String],
        duration: TimeoutDuration,
        label: Option<&str>,
    ) -> Result<String, String>;
}

/// Services legal during the compute window (between receive and send).
pub trait ComputeServices {
    /// Oldest frozen value of an in port; on an event port this is the event
    /// marker. Empty queue is a fault.
    fn get_value(&self, port: &str) -> Result<Value, String>;
    /// Removes and returns the oldest frozen value, exposing the next one.
    fn next_value(&mut self, port: &str) -> Result<Value, String>;
    fn get_count(&self, port: &str) -> Result<i64, String>;
    /// Whether this dispatch's freeze changed the data value relative to the
    /// previous accepted dispatch's frozen value.
    fn updated(&self, port: &str) -> Result<bool, String>;
    /// Stages a value on an out port (replacing any value staged earlier in
    /// the same dispatch — outputs are one-deep).
    fn put_value(&mut self, port: &str, v: Value) -> Result<(), String>;
    fn get_var(&self, name: &str) -> Result<Value, String>;
    fn set_var(&mut self, name: &str, v: Value) -> Result<(), String>;
    /// Engine clock in seconds.
    fn time_stamp(&self) -> f64;
}

/// The engine's service implementation over a thread's state. `now` is the
/// world upcoming writes will land on (it stamps created values).
pub struct StateServices<'a> {
    pub state: &'a mut ThreadState,
    pub meta: &'a PortMetaMap,
    pub updated_flags: &'a BTreeMap<String, bool>,
    pub now: Time,
    pub in_init: bool,
    pub timeout_requests: Vec<TimeoutRequest>,
    timeout_counter: u32,
}

impl<'a> StateServices<'a> {
    pub fn new(
        state: &'a mut ThreadState,
        meta: &'a PortMetaMap,
        updated_flags: &'a BTreeMap<String, bool>,
        now: Time,
        in_init: bool,
    ) -> Self {
        Self {
            state,
            meta,
            updated_flags,
            now,
            in_init,
            timeout_requests: Vec::new(),
            timeout_counter: 0,
        }
    }

    fn out_port(&self, port: &str) -> Result<&PortMeta, String> {
        let m = self
            .meta
            .get(port)
            .ok_or_else(|| format!("unknown port {port:?}"))?;
        if m.dir != Direction::Out {
            return Err(format!("put_value on in port {port:?}"));
        }
        Ok(m)
    }

    fn in_port(&self, port: &str) -> Result<&PortMeta, String> {
        let m = self
            .meta
            .get(port)
            .ok_or_else(|| format!("unknown port {port:?}"))?;
        if m.dir != Direction::In {
            return Err(format!("{port:?} is not an in port"));
        }
        Ok(m)
    }

    fn stage_output(&mut self, port: &str, v: Value) -> Result<(), String> {
        let m = self.out_port(port)?;
        if !m.ty.admits(&v) {
            return Err(format!(
                "type error: port {port:?} does not admit a {} value",
                v.tag()
            ));
        }
        let kind = m.kind;
        let q = self.state.aps_out.get_mut(port).expect("declared out port");
        // Outputs are one-deep regardless of kind: replace, don't append.
        q.dequeue_all();
        q.enqueue(TimestampedValue::new(v, self.now), kind)
            .map_err(|e| e.to_string())
    }
}

impl InitServices for StateServices<'_> {
    fn get_var(&self, name: &str) -> Result<Value, String> {
        self.state
            .vars
            .get(name)
            .cloned()
            .ok_or_else(|| format!("variable {name:?} has not been set"))
    }

    fn set_var(&mut self, name: &str, v: Value) -> Result<(), String> {
        self.state.vars.insert(name.to_string(), v);
        Ok(())
    }

    fn put_value(&mut self, port: &str, v: Value) -> Result<(), String> {
        let m = self.out_port(port)?;
        if m.kind != PortKind::Data {
            return Err(format!(
                "event emission during initialization (port {port:?})"
            ));
        }
        self.stage_output(port, v)
    }

    fn create_timeout(
        &mut self,
        reset: &[String],
        duration: TimeoutDuration,
        label: Option<&str>,
    ) -> Result<String, String> {
        if !self.in_init {
            return Err("create_timeout may only be served during initialization".into());
        }
        let mut id = String::from("timeout");
        for p in reset {
            id.push('_');
            id.push_str(p);
        }
        if let Some(l) = label {
            id.push('_');
            id.push_str(l);
        }
        let base = id.clone();
        while self
            .timeout_requests
            .iter()
            .any(|r| r.id == id)
            || self.meta.contains_key(&id)
        {
            self.timeout_counter += 1;
            id = format!("{base}_{}", self.timeout_counter);
        }
        self.timeout_requests.push(TimeoutRequest {
            id: id.clone(),
            reset: reset.to_vec(),
            duration,
        });
        Ok(id)
    }
}

impl ComputeServices for StateServices<'_> {
    fn get_value(&self, port: &str) -> Result<Value, String> {
        self.in_port(port)?;
        self.state
            .aps_in
            .get(port)
            .and_then(|q| q.head())
            .map(|tv| tv.v.clone())
            .ok_or_else(|| format!("get_value on empty queue of port {port:?}"))
    }

    fn next_value(&mut self, port: &str) -> Result<Value, String> {
        self.in_port(port)?;
        self.state
            .aps_in
            .get_mut(port)
            .and_then(|q| q.dequeue_one())
            .map(|tv| tv.v)
            .ok_or_else(|| format!("next_value on empty queue of port {port:?}"))
    }

    fn get_count(&self, port: &str) -> Result<i64, String> {
        self.in_port(port)?;
        Ok(self.state.aps_in.get(port).map_or(0, |q| q.len()) as i64)
    }

    fn updated(&self, port: &str) -> Result<bool, String> {
        let m = self.in_port(port)?;
        if m.kind != PortKind::Data {
            return Err(format!("updated is defined for data ports only ({port:?})"));
        }
        Ok(*self.updated_flags.get(port).unwrap_or(&false))
    }

    fn put_value(&mut self, port: &str, v: Value) -> Result<(), String> {
        self.stage_output(port, v)
    }

    fn get_var(&self, name: &str) -> Result<Value, String> {
        InitServices::get_var(self, name)
    }

    fn set_var(&mut self, name: &str, v: Value) -> Result<(), String> {
        InitServices::set_var(self, name, v)
    }

    fn time_stamp(&self) -> f64 {
        self.now.as_secs_f64()
    }
}

// ---------------------------------------------------------------------------
// Behaviors
// ---------------------------------------------------------------------------

/// Application logic of one thread. The engine drives the windows: it asks
/// `accepts` first, runs receive_input only on acceptance, then `compute`,
/// then send_output.
pub trait Behavior {
    fn initialize(&mut self, api: &mut dyn InitServices) -> Result<(), String>;

    /// Whether this dispatch status satisfies some transition. Must be pure.
    fn accepts(&self, status: &DispatchStatus) -> bool;

    /// Runs between receive and send, against the frozen input view.
    fn compute(
        &mut self,
        api: &mut dyn ComputeServices,
        status: &DispatchStatus,
    ) -> Result<(), String>;

    /// Finalization does nothing by default — and overrides must not touch
    /// state they can no longer reach (they get no services handle).
    fn finalize(&mut self) {}
}

/// A thread's behavior as declared in the model: either an inline machine or
/// a reference to a host-registered implementation.
#[derive(Debug, Clone)]
pub enum BehaviorRef {
    Machine(BehaviorSpec),
    Host(String),
}

impl BehaviorRef {
    pub fn from_json(v: &serde_json::Value) -> Result<BehaviorRef, String> {
        if let Some(obj) = v.as_object() {
            if let Some(host) = obj.get("host") {
                if obj.len() != 1 {
                    return Err("host behavior reference takes no other fields".into());
                }
                return Ok(BehaviorRef::Host(
                    host.as_str()
                        .ok_or("host behavior name must be a string")?
                        .to_string(),
                ));
            }
        }
        Ok(BehaviorRef::Machine(BehaviorSpec::from_json(v)?))
    }

    pub fn to_json(&self) -> serde_json::Value {
        match self {
            BehaviorRef::Machine(spec) => spec.to_json(),
            BehaviorRef::Host(name) => serde_json::json!({ "host": name }),
        }
    }
}

/// A dispatch condition over trigger ids.
#[derive(Debug, Clone, PartialEq)]
pub enum Condition {
    /// `on dispatch` with no qualifier: any enabled dispatch.
    AnyDispatch,
    /// `timetriggered`: the status is time-triggered.
    TimeTriggered,
    /// A port or timeout id present among the status triggers.
    Trigger(String),
    And(Box<Condition>, Box<Condition>),
    Or(Box<Condition>, Box<Condition>),
    Not(Box<Condition>),
}

impl Condition {
    /// Parses `on dispatch`, `on dispatch <cond>`, or a bare condition, where
    /// `<cond>` combines trigger ids and `timetriggered` with `and`, `or`,
    /// `not`, and parentheses.
    pub fn parse(src: &str) -> Result<Condition, String> {
        let s = src.trim();
        let rest = match s.strip_prefix("on") {
            Some(r) if r.starts_with(char::is_whitespace) => {
                let r = r.trim_start();
                match r.strip_prefix("dispatch") {
                    Some(r2) if r2.is_empty() || r2.starts_with(|c: char| !c.is_alphanumeric() && c != '_') => r2.trim(),
                    _ => s,
                }
            }
            _ => s,
        };
        if rest.is_empty() {
            return Ok(Condition::AnyDispatch);
        }
        let expr = parse_expr(rest).map_err(|e| format!("bad dispatch condition: {e}"))?;
        Condition::from_expr(&expr)
    }

    fn from_expr(e: &Expr) -> Result<Condition, String> {
        use crate::expr::{BinOp, UnOp};
        match e {
            Expr::Ident { name, at: None } => {
                if name == "timetriggered" {
                    Ok(Condition::TimeTriggered)
                } else if name.contains(':') || name.contains('.') {
                    Err(format!("{name:?} is not a trigger id"))
                } else {
                    Ok(Condition::Trigger(name.clone()))
                }
            }
            Expr::Binary {
                op: BinOp::And,
                lhs,
                rhs,
            } => Ok(Condition::And(
                Box::new(Condition::from_expr(lhs)?),
                Box::new(Condition::from_expr(rhs)?),
            )),
            Expr::Binary {
                op: BinOp::Or,
                lhs,
                rhs,
            } => Ok(Condition::Or(
                Box::new(Condition::from_expr(lhs)?),
                Box::new(Condition::from_expr(rhs)?),
            )),
            Expr::Unary {
                op: UnOp::Not,
                expr,
            } => Ok(Condition::Not(Box::new(Condition::from_expr(expr)?))),
            _ => Err("dispatch conditions combine trigger ids with and/or/not only".into()),
        }
    }

    pub fn eval(&self, status: &DispatchStatus) -> bool {
        match self {
            Condition::AnyDispatch => status.enabled(),
            Condition::TimeTriggered => status.kind == StatusKind::TimeTriggered,
            Condition::Trigger(id) => status.triggers.contains(id),
            Condition::And(a, b) => a.eval(status) && b.eval(status),
            Condition::Or(a, b) => a.eval(status) || b.eval(status),
            Condition::Not(a) => !a.eval(status),
        }
    }

    fn render(&self) -> String {
        match self {
            Condition::AnyDispatch => String::new(),
            Condition::TimeTriggered => "timetriggered".into(),
            Condition::Trigger(id) => id.clone(),
            Condition::And(a, b) => format!("({} and {})", a.render(), b.render()),
            Condition::Or(a, b) => format!("({} or {})", a.render(), b.render()),
            Condition::Not(a) => format!("(not {})", a.render()),
        }
    }

    fn triggers(&self, out: &mut BTreeSet<String>) {
        match self {
            Condition::Trigger(id) => {
                out.insert(id.clone());
            }
            Condition::And(a, b) | Condition::Or(a, b) => {
                a.triggers(out);
                b.triggers(out);
            }
            Condition::Not(a) => a.triggers(out),
            _ => {}
        }
    }
}

/// One behavior action.
#[derive(Debug, Clone, PartialEq)]
pub enum Action {
    /// `x := expr`
    Assign(String, Expr),
    /// `put(port, expr)`
    Put(String, Expr),
    /// `emit(port)` — stage the event marker on an out event port.
    Emit(String),
    /// `next(port)` — advance the frozen queue of an in port.
    Next(String),
}

impl Action {
    pub fn parse(src: &str) -> Result<Action, String> {
        let s = src.trim();
        if let Some((lhs, rhs)) = s.split_once(":=") {
            let name = lhs.trim();
            if name.is_empty()
                || !name
                    .chars()
                    .all(|c| c.is_ascii_alphanumeric() || c == '_')
                || name.starts_with(|c: char| c.is_ascii_digit())
            {
                return Err(format!("bad assignment target {name:?}"));
            }
            let expr = parse_expr(rhs).map_err(|e| format!("bad expression: {e}"))?;
            return Ok(Action::Assign(name.to_string(), expr));
        }
        let expr = parse_expr(s).map_err(|e| format!("bad action {s:?}: {e}"))?;
        match expr {
            Expr::Call { func, args } => match func.as_str() {
                "put" => {
                    if args.len() != 2 {
                        return Err("put takes (port, expression)".into());
                    }
                    let port = Self::port_arg(&args[0])?;
                    Ok(Action::Put(port, args[1].clone()))
                }
                "emit" => {
                    if args.len() != 1 {
                        return Err("emit takes (port)".into());
                    }
                    Ok(Action::Emit(Self::port_arg(&args[0])?))
                }
                "next" => {
                    if args.len() != 1 {
                        return Err("next takes (port)".into());
                    }
                    Ok(Action::Next(Self::port_arg(&args[0])?))
                }
                other => Err(format!(
                    "unknown action {other:?} (expected assignment, put, emit, or next)"
                )),
            },
            _ => Err(format!("action {s:?} is not an assignment or a service call")),
        }
    }

    fn port_arg(e: &Expr) -> Result<String, String> {
        match e {
            Expr::Ident { name, at: None } if !name.contains(':') && !name.contains('.') => {
                Ok(name.clone())
            }
            _ => Err("expected a port name".into()),
        }
    }

    fn render(&self) -> String {
        match self {
            Action::Assign(name, e) => format!("{name} := {}", render_expr(e)),
            Action::Put(port, e) => format!("put({port}, {})", render_expr(e)),
            Action::Emit(port) => format!("emit({port})"),
            Action::Next(port) => format!("next({port})"),
        }
    }
}

fn render_expr(e: &Expr) -> String {
    use crate::expr::{BinOp, UnOp};
    match e {
        Expr::Lit(v) => match v {
            Value::Str(s) => format!("{:?}", s.as_ref()),
            other => other.to_string(),
        },
        Expr::Ident { name, at: None } => name.clone(),
        Expr::Ident { name, at: Some(t) } => format!("{name}@({}, {})", t.t, t.n),
        Expr::Call { func, args } => {
            let rendered: Vec<String> = args.iter().map(render_expr).collect();
            format!("{func}({})", rendered.join(", "))
        }
        Expr::Unary { op, expr } => match op {
            UnOp::Neg => format!("(-{})", render_expr(expr)),
            UnOp::Not => format!("(not {})", render_expr(expr)),
        },
        Expr::Binary { op, lhs, rhs } => {
            let sym = match op {
                BinOp::Add => "+",
                BinOp::Sub => "-",
                BinOp::Mul => "*",
                BinOp::Div => "/",
                BinOp::Lt => "<",
                BinOp::Le => "<=",
                BinOp::Gt => ">",
                BinOp::Ge => ">=",
                BinOp::Eq => "=",
                BinOp::Ne => "!=",
                BinOp::And => "and",
                BinOp::Or => "or",
                BinOp::Implies => "implies",
            };
            format!("({} {} {})", render_expr(lhs), sym, render_expr(rhs))
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Transition {
    pub from: String,
    pub when: Condition,
    pub actions: Vec<Action>,
    pub to: String,
}

/// An inline transition-machine behavior.
#[derive(Debug, Clone, PartialEq)]
pub struct BehaviorSpec {
    pub states: Vec<String>,
    pub initial: String,
    pub init_actions: Vec<Action>,
    pub transitions: Vec<Transition>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawBehavior {
    states: Vec<String>,
    initial: String,
    #[serde(default)]
    init_actions: Vec<String>,
    #[serde(default)]
    transitions: Vec<RawTransition>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawTransition {
    from: String,
    when: String,
    #[serde(default)]
    actions: Vec<String>,
    to: String,
}

impl BehaviorSpec {
    pub fn from_json(v: &serde_json::Value) -> Result<BehaviorSpec, String> {
        let raw: RawBehavior = serde_json::from_value(v.clone()).map_err(|e| e.to_string())?;
        let init_actions = raw
            .init_actions
            .iter()
            .map(|s| Action::parse(s).map_err(|e| format!("init action {s:?}: {e}")))
            .collect::<Result<Vec<_>, _>>()?;
        let transitions = raw
            .transitions
            .into_iter()
            .map(|rt| {
                Ok(Transition {
                    when: Condition::parse(&rt.when)
                        .map_err(|e| format!("transition {} -> {}: {e}", rt.from, rt.to))?,
                    actions: rt
                        .actions
                        .iter()
                        .map(|s| {
                            Action::parse(s).map_err(|e| {
                                format!("transition {} -> {}: action {s:?}: {e}", rt.from, rt.to)
                            })
                        })
                        .collect::<Result<Vec<_>, String>>()?,
                    from: rt.from,
                    to: rt.to,
                })
            })
            .collect::<Result<Vec<_>, String>>()?;
        Ok(BehaviorSpec {
            states: raw.states,
            initial: raw.initial,
            init_actions,
            transitions,
        })
    }

    pub fn to_json(&self) -> serde_json::Value {
        use serde_json::json;
        let transitions: Vec<serde_json::Value> = self
            .transitions
            .iter()
            .map(|t| {
                let when = match &t.when {
                    Condition::AnyDispatch => "on dispatch".to_string(),
                    other => format!("on dispatch {}", other.render()),
                };
                json!({
                    "from": t.from,
                    "when": when,
                    "actions": t.actions.iter().map(Action::render).collect::<Vec<_>>(),
                    "to": t.to,
                })
            })
            .collect();
        json!({
            "states": self.states,
            "initial": self.initial,
            "init_actions": self.init_actions.iter().map(Action::render).collect::<Vec<_>>(),
            "transitions": transitions,
        })
    }

    /// Static checks against the owning thread's declaration.
    pub fn validate(&self, decl: &ThreadDecl) -> Result<(), String> {
        if self.states.is_empty() {
            return Err("behavior declares no states".into());
        }
        let states: BTreeSet<&String> = self.states.iter().collect();
        if states.len() != self.states.len() {
            return Err("duplicate state names".into());
        }
        if !states.contains(&self.initial) {
            return Err(format!("initial state {:?} is not declared", self.initial));
        }
        for t in &self.transitions {
            if !states.contains(&t.from) {
                return Err(format!("transition from undeclared state {:?}", t.from));
            }
            if !states.contains(&t.to) {
                return Err(format!("transition to undeclared state {:?}", t.to));
            }
            let mut trigs = BTreeSet::new();
            t.when.triggers(&mut trigs);
            for trig in trigs {
                let is_timeout = decl.timeout(&trig).is_some();
                let is_event_in = decl.port(&trig).is_some_and(|p| {
                    p.dir == Direction::In && p.kind != PortKind::Data
                });
                if !is_timeout && !is_event_in {
                    return Err(format!(
                        "dispatch condition references {trig:?}, which is neither an in \
                         event(-data) port nor a timeout of the thread"
                    ));
                }
            }
            for a in &t.actions {
                Self::validate_action(a, decl)?;
            }
        }
        for a in &self.init_actions {
            // Emission legality is enforced at runtime (hosts go through the
            // same gate); here only name resolution is checked.
            Self::validate_action(a, decl)?;
        }
        Ok(())
    }

    fn validate_action(a: &Action, decl: &ThreadDecl) -> Result<(), String> {
        match a {
            Action::Assign(_, e) => Self::validate_expr(e, decl),
            Action::Put(port, e) => {
                let p = decl
                    .port(port)
                    .ok_or_else(|| format!("put on unknown port {port:?}"))?;
                if p.dir != Direction::Out || p.kind == PortKind::Event {
                    return Err(format!(
                        "put needs an out data or eventdata port, {port:?} is {} {}",
                        p.dir, p.kind
                    ));
                }
                Self::validate_expr(e, decl)
            }
            Action::Emit(port) => {
                let p = decl
                    .port(port)
                    .ok_or_else(|| format!("emit on unknown port {port:?}"))?;
                if p.dir != Direction::Out || p.kind != PortKind::Event {
                    return Err(format!(
                        "emit needs an out event port, {port:?} is {} {}",
                        p.dir, p.kind
                    ));
                }
                Ok(())
            }
            Action::Next(port) => {
                let p = decl
                    .port(port)
                    .ok_or_else(|| format!("next on unknown port {port:?}"))?;
                if p.dir != Direction::In {
                    return Err(format!("next needs an in port, {port:?} is an out port"));
                }
                Ok(())
            }
        }
    }

    fn validate_expr(e: &Expr, decl: &ThreadDecl) -> Result<(), String> {
        match e {
            Expr::Lit(_) => Ok(()),
            Expr::Ident { name, at } => {
                if at.is_some() || name.contains(':') || name.contains('.') {
                    Err(format!(
                        "{name:?}: trace references are not available in behaviors"
                    ))
                } else {
                    Ok(())
                }
            }
            Expr::Call { func, args } => match func.as_str() {
                "value" | "count" => {
                    let port = Self::call_port(func, args)?;
                    let p = decl
                        .port(&port)
                        .ok_or_else(|| format!("{func} on unknown port {port:?}"))?;
                    if p.dir != Direction::In {
                        return Err(format!("{func} reads in ports; {port:?} is an out port"));
                    }
                    Ok(())
                }
                "updated" => {
                    let port = Self::call_port(func, args)?;
                    let p = decl
                        .port(&port)
                        .ok_or_else(|| format!("updated on unknown port {port:?}"))?;
                    if p.dir != Direction::In || p.kind != PortKind::Data {
                        return Err(format!("updated needs an in data port, got {port:?}"));
                    }
                    Ok(())
                }
                "time_stamp" => {
                    if !args.is_empty() {
                        return Err("time_stamp takes no arguments".into());
                    }
                    Ok(())
                }
                other => Err(format!("unknown function {other:?} in behavior expression")),
            },
            Expr::Unary { expr, .. } => Self::validate_expr(expr, decl),
            Expr::Binary { lhs, rhs, .. } => {
                Self::validate_expr(lhs, decl)?;
                Self::validate_expr(rhs, decl)
            }
        }
    }

    fn call_port(func: &str, args: &[Expr]) -> Result<String, String> {
        if args.len() != 1 {
            return Err(format!("{func} takes exactly one port argument"));
        }
        Action::port_arg(&args[0]).map_err(|_| format!("{func} takes a port name"))
    }
}

// ---------------------------------------------------------------------------
// Machine interpreter
// ---------------------------------------------------------------------------

/// Runs a [`BehaviorSpec`]. Transition choice is deterministic: the first
/// transition in declaration order whose source state and condition match.
pub struct MachineBehavior {
    spec: BehaviorSpec,
    current: String,
}

impl MachineBehavior {
    pub fn new(spec: BehaviorSpec) -> Self {
        let current = spec.initial.clone();
        Self { spec, current }
    }

    pub fn current_state(&self) -> &str {
        &self.current
    }

    fn pick(&self, status: &DispatchStatus) -> Option<usize> {
        self.spec
            .transitions
            .iter()
            .position(|t| t.from == self.current && t.when.eval(status))
    }
}

impl Behavior for MachineBehavior {
    fn initialize(&mut self, api: &mut dyn InitServices) -> Result<(), String> {
        for a in &self.spec.init_actions {
            match a {
                Action::Assign(name, e) => {
                    let v = eval_init_expr(e, api)?;
                    api.set_var(name, v)?;
                }
                Action::Put(port, e) => {
                    let v = eval_init_expr(e, api)?;
                    api.put_value(port, v)?;
                }
                Action::Emit(port) => {
                    // Reaches the same gate a host would hit.
                    api.put_value(port, Value::Event)?;
                }
                Action::Next(_) => {
                    return Err("next is not available during initialization".into());
                }
            }
        }
        api.set_var(STATE_VAR, Value::enumeration(&self.current))?;
        Ok(())
    }

    fn accepts(&self, status: &DispatchStatus) -> bool {
        self.pick(status).is_some()
    }

    fn compute(
        &mut self,
        api: &mut dyn ComputeServices,
        status: &DispatchStatus,
    ) -> Result<(), String> {
        let idx = self
            .pick(status)
            .ok_or("compute invoked without a satisfied transition")?;
        let t = self.spec.transitions[idx].clone();
        for a in &t.actions {
            match a {
                Action::Assign(name, e) => {
                    let v = eval_compute_expr(e, api)?;
                    api.set_var(name, v)?;
                }
                Action::Put(port, e) => {
                    let v = eval_compute_expr(e, api)?;
                    api.put_value(port, v)?;
                }
                Action::Emit(port) => api.put_value(port, Value::Event)?,
                Action::Next(port) => {
                    api.next_value(port)?;
                }
            }
        }
        if t.to != self.current {
            self.current = t.to.clone();
            api.set_var(STATE_VAR, Value::enumeration(&self.current))?;
        }
        Ok(())
    }
}

fn eval_init_expr(e: &Expr, api: &dyn InitServices) -> Result<Value, String> {
    struct Ctx<'a>(&'a dyn InitServices);
    impl EvalContext for Ctx<'_> {
        fn ident(&mut self, name: &str, _at: Option<Time>) -> Result<Val, String> {
            self.0.get_var(name).map(Val::V)
        }
        fn call(&mut self, func: &str, _args: &[Expr]) -> Result<Val, String> {
            Err(format!("{func} is not available during initialization"))
        }
    }
    eval_expr(e, &mut Ctx(api))?.into_value()
}

fn eval_compute_expr(e: &Expr, api: &mut dyn ComputeServices) -> Result<Value, String> {
    struct Ctx<'a>(&'a mut dyn ComputeServices);
    impl EvalContext for Ctx<'_> {
        fn ident(&mut self, name: &str, _at: Option<Time>) -> Result<Val, String> {
            self.0.get_var(name).map(Val::V)
        }
        fn call(&mut self, func: &str, args: &[Expr]) -> Result<Val, String> {
            let port = |args: &[Expr]| -> Result<String, String> {
                match args {
                    [Expr::Ident { name, at: None }] => Ok(name.clone()),
                    _ => Err(format!("{func} takes a port name")),
                }
            };
            match func {
                "value" => self.0.get_value(&port(args)?).map(Val::V),
                "count" => self.0.get_count(&port(args)?).map(|n| Val::V(Value::Int(n))),
                "updated" => self.0.updated(&port(args)?).map(|b| Val::V(Value::Bool(b))),
                "time_stamp" => {
                    if !args.is_empty() {
                        return Err("time_stamp takes no arguments".into());
                    }
                    Ok(Val::V(Value::Float(self.0.time_stamp())))
                }
                other => Err(format!("unknown function {other:?}")),
            }
        }
    }
    eval_expr(e, &mut Ctx(api))?.into_value()
}
