//! Superdense time, trace variables, and the recorded-trace store.
//!
//! Time is a pair `(t, n)`: `t` in nanoseconds plus a micro-step index `n`
//! that orders causally-distinct worlds inside one real instant. `(t, n)`
//! precedes `(t, n+1)` although no real time passes between them — every rule
//! application the engine performs writes its post-state at the successor of
//! the world it read. Comparison is lexicographic.
//!
//! A trace is an append-only JSONL file. The first line is a header carrying
//! the canonical model, its hash, the run seed, the horizon, and the
//! tie-break rule; every later line is either a variable write
//! `{"t","n","var","val"}` or an engine event (`"ev"`: phase change, dispatch
//! attempt, rule application, timer fire, thread halt). Port-variable writes
//! store the whole queue after the write; behavior-variable writes store the
//! value. Reading a variable `d` at world `τ` returns the most recent write
//! at or before `τ` — the frame property: untouched variables keep their
//! values — with declared ports defaulting to an empty queue before their
//! first write.

use std::collections::BTreeMap;
use std::fmt;
use std::io::{BufRead, Write as _};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::expr::{eval_expr, EvalContext, Expr, Val};
use crate::model::{InstanceModel, ModelError, PortId, ThreadId};
use crate::rts::DispatchStatus;
use crate::values::{PortQueue, Value};

/// Trace format version written to and required in headers.
pub const TRACE_VERSION: u32 = 1;

/// The only tie-break rule this engine emits: threads dispatch in ascending
/// id order within an instant.
pub const TIE_BREAK_THREAD_ID_ASC: &str = "thread-id-asc";

// ---------------------------------------------------------------------------
// Time
// ---------------------------------------------------------------------------

/// A superdense instant: real time in nanoseconds plus a micro-step index.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Time {
    pub t: u64,
    pub n: u32,
}

impl Time {
    pub const ZERO: Time = Time { t: 0, n: 0 };

    pub fn new(t: u64, n: u32) -> Self {
        Self { t, n }
    }

    /// The next micro-step of the same real instant.
    pub fn succ(self) -> Self {
        Time {
            t: self.t,
            n: self.n + 1,
        }
    }

    /// Clock reading in seconds. Micro-steps take no real time, so the index
    /// does not contribute.
    pub fn as_secs_f64(self) -> f64 {
        self.t as f64 / 1e9
    }
}

impl fmt::Display for Time {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {})", self.t, self.n)
    }
}

impl Serialize for Time {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        (self.t, self.n).serialize(s)
    }
}

impl<'de> Deserialize<'de> for Time {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let (t, n) = <(u64, u32)>::deserialize(d)?;
        Ok(Time { t, n })
    }
}

// ---------------------------------------------------------------------------
// Variables
// ---------------------------------------------------------------------------

/// Which slot of a thread's state a trace variable names.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum VarRole {
    /// Infrastructure port state (a queue).
    Ips,
    /// Application port state (a queue).
    Aps,
    /// A behavior variable (a value).
    Var,
}

impl VarRole {
    pub fn as_str(self) -> &'static str {
        match self {
            VarRole::Ips => "IPS",
            VarRole::Aps => "APS",
            VarRole::Var => "Var",
        }
    }
}

/// A dynamic variable, written `role:thread:name` (e.g. `IPS:ctrl:cmd`,
/// `Var:ctrl:x`). For ports, `name` is the port's local name.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct VariableId {
    pub role: VarRole,
    pub thread: ThreadId,
    pub name: String,
}

impl VariableId {
    pub fn ips(thread: &ThreadId, port: &str) -> Self {
        Self {
            role: VarRole::Ips,
            thread: thread.clone(),
            name: port.to_string(),
        }
    }

    pub fn aps(thread: &ThreadId, port: &str) -> Self {
        Self {
            role: VarRole::Aps,
            thread: thread.clone(),
            name: port.to_string(),
        }
    }

    pub fn var(thread: &ThreadId, name: &str) -> Self {
        Self {
            role: VarRole::Var,
            thread: thread.clone(),
            name: name.to_string(),
        }
    }

    /// The qualified port id this variable refers to (for port roles).
    pub fn port_id(&self) -> PortId {
        PortId::new(&format!("{}.{}", self.thread, self.name))
    }
}

impl fmt::Display for VariableId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}:{}", self.role.as_str(), self.thread, self.name)
    }
}

impl FromStr for VariableId {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        let mut parts = s.splitn(3, ':');
        let (role, thread, name) = match (parts.next(), parts.next(), parts.next()) {
            (Some(r), Some(t), Some(n)) if !t.is_empty() && !n.is_empty() => (r, t, n),
            _ => return Err(format!("malformed variable id {s:?}; want role:thread:name")),
        };
        let role = match role.to_ascii_lowercase().as_str() {
            "ips" => VarRole::Ips,
            "aps" => VarRole::Aps,
            "var" => VarRole::Var,
            other => return Err(format!("unknown variable role {other:?}")),
        };
        Ok(VariableId {
            role,
            thread: ThreadId::new(thread),
            name: name.to_string(),
        })
    }
}

// ---------------------------------------------------------------------------
// Records
// ---------------------------------------------------------------------------

/// Value of a write record: queues for port variables, plain values for
/// behavior variables.
#[derive(Debug, Clone, PartialEq)]
pub enum TraceValue {
    Queue(PortQueue),
    Val(Value),
}

impl TraceValue {
    pub fn as_queue(&self) -> Option<&PortQueue> {
        match self {
            TraceValue::Queue(q) => Some(q),
            TraceValue::Val(_) => None,
        }
    }

    pub fn as_value(&self) -> Option<&Value> {
        match self {
            TraceValue::Val(v) => Some(v),
            TraceValue::Queue(_) => None,
        }
    }
}

/// Director phases as they appear in phase records.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Off,
    Initialize,
    Move,
    Dispatch,
    Compute,
    Finalize,
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Phase::Off => "off",
            Phase::Initialize => "initialize",
            Phase::Move => "move",
            Phase::Dispatch => "dispatch",
            Phase::Compute => "compute",
            Phase::Finalize => "finalize",
        };
        write!(f, "{s}")
    }
}

/// Rule applications recorded around an accepted dispatch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RuleKind {
    ReceiveInput,
    Compute,
    SendOutput,
}

impl fmt::Display for RuleKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            RuleKind::ReceiveInput => "receive_input",
            RuleKind::Compute => "compute",
            RuleKind::SendOutput => "send_output",
        };
        write!(f, "{s}")
    }
}

/// One line of a trace file (after the header).
#[derive(Debug, Clone, PartialEq)]
pub enum TraceRecord {
    /// A variable assumed a (possibly identical) new value.
    Write {
        time: Time,
        var: VariableId,
        val: TraceValue,
    },
    /// The director changed phase.
    PhaseChange { time: Time, phase: Phase },
    /// A thread's compute entrypoint was invoked with this status.
    Dispatch {
        time: Time,
        thread: ThreadId,
        status: DispatchStatus,
        accepted: bool,
    },
    /// A run-time-service rule application (writes share this record's world).
    Rule {
        time: Time,
        rule: RuleKind,
        thread: ThreadId,
    },
    /// A timer elapsed.
    Fire {
        time: Time,
        timeout: String,
        thread: ThreadId,
    },
    /// A thread faulted and was halted; the run continued.
    Halt {
        time: Time,
        thread: ThreadId,
        reason: String,
    },
}

impl TraceRecord {
    pub fn time(&self) -> Time {
        match self {
            TraceRecord::Write { time, .. }
            | TraceRecord::PhaseChange { time, .. }
            | TraceRecord::Dispatch { time, .. }
            | TraceRecord::Rule { time, .. }
            | TraceRecord::Fire { time, .. }
            | TraceRecord::Halt { time, .. } => *time,
        }
    }

    fn to_json(&self) -> serde_json::Value {
        use serde_json::json;
        match self {
            TraceRecord::Write { time, var, val } => {
                let val = match val {
                    TraceValue::Queue(q) => serde_json::to_value(q).unwrap(),
                    TraceValue::Val(v) => v.to_json(),
                };
                json!({"t": time.t, "n": time.n, "var": var.to_string(), "val": val})
            }
            TraceRecord::PhaseChange { time, phase } => {
                json!({"t": time.t, "n": time.n, "ev": "phase", "phase": phase})
            }
            TraceRecord::Dispatch {
                time,
                thread,
                status,
                accepted,
            } => json!({
                "t": time.t, "n": time.n, "ev": "dispatch",
                "thread": thread.as_str(), "status": status, "accepted": accepted
            }),
            TraceRecord::Rule { time, rule, thread } => {
                json!({"t": time.t, "n": time.n, "ev": "rule", "rule": rule, "thread": thread.as_str()})
            }
            TraceRecord::Fire {
                time,
                timeout,
                thread,
            } => json!({
                "t": time.t, "n": time.n, "ev": "fire",
                "timeout": timeout, "thread": thread.as_str()
            }),
            TraceRecord::Halt {
                time,
                thread,
                reason,
            } => json!({
                "t": time.t, "n": time.n, "ev": "halt",
                "thread": thread.as_str(), "reason": reason
            }),
        }
    }

    fn from_json(v: &serde_json::Value, line: usize) -> Result<TraceRecord, TraceError> {
        let bad = |msg: String| TraceError::Format { line, msg };
        let obj = v
            .as_object()
            .ok_or_else(|| bad("record is not an object".into()))?;
        let t = obj
            .get("t")
            .and_then(|x| x.as_u64())
            .ok_or_else(|| bad("missing t".into()))?;
        let n = obj
            .get("n")
            .and_then(|x| x.as_u64())
            .ok_or_else(|| bad("missing n".into()))?;
        let time = Time::new(t, n as u32);

        if let Some(var) = obj.get("var") {
            let var: VariableId = var
                .as_str()
                .ok_or_else(|| bad("var must be a string".into()))?
                .parse()
                .map_err(bad)?;
            let raw = obj.get("val").ok_or_else(|| bad("missing val".into()))?;
            let val = match var.role {
                VarRole::Ips | VarRole::Aps => TraceValue::Queue(
                    serde_json::from_value(raw.clone())
                        .map_err(|e| bad(format!("bad queue snapshot: {e}")))?,
                ),
                VarRole::Var => TraceValue::Val(
                    Value::from_json(raw).map_err(|e| bad(format!("bad value: {e}")))?,
                ),
            };
            return Ok(TraceRecord::Write { time, var, val });
        }

        let ev = obj
            .get("ev")
            .and_then(|x| x.as_str())
            .ok_or_else(|| bad("record has neither var nor ev".into()))?;
        let get_thread = || -> Result<ThreadId, TraceError> {
            Ok(ThreadId::new(
                obj.get("thread")
                    .and_then(|x| x.as_str())
                    .ok_or_else(|| bad("missing thread".into()))?,
            ))
        };
        match ev {
            "phase" => Ok(TraceRecord::PhaseChange {
                time,
                phase: serde_json::from_value(
                    obj.get("phase")
                        .cloned()
                        .ok_or_else(|| bad("missing phase".into()))?,
                )
                .map_err(|e| bad(format!("bad phase: {e}")))?,
            }),
            "dispatch" => Ok(TraceRecord::Dispatch {
                time,
                thread: get_thread()?,
                status: serde_json::from_value(
                    obj.get("status")
                        .cloned()
                        .ok_or_else(|| bad("missing status".into()))?,
                )
                .map_err(|e| bad(format!("bad status: {e}")))?,
                accepted: obj
                    .get("accepted")
                    .and_then(|x| x.as_bool())
                    .ok_or_else(|| bad("missing accepted".into()))?,
            }),
            "rule" => Ok(TraceRecord::Rule {
                time,
                rule: serde_json::from_value(
                    obj.get("rule")
                        .cloned()
                        .ok_or_else(|| bad("missing rule".into()))?,
                )
                .map_err(|e| bad(format!("bad rule: {e}")))?,
                thread: get_thread()?,
            }),
            "fire" => Ok(TraceRecord::Fire {
                time,
                timeout: obj
                    .get("timeout")
                    .and_then(|x| x.as_str())
                    .ok_or_else(|| bad("missing timeout".into()))?
                    .to_string(),
                thread: get_thread()?,
            }),
            "halt" => Ok(TraceRecord::Halt {
                time,
                thread: get_thread()?,
                reason: obj
                    .get("reason")
                    .and_then(|x| x.as_str())
                    .unwrap_or("")
                    .to_string(),
            }),
            other => Err(bad(format!("unknown event kind {other:?}"))),
        }
    }
}

// ---------------------------------------------------------------------------
// Header, writer, loaded trace
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct TraceHeader {
    pub version: u32,
    pub model_hash: String,
    pub seed: u64,
    pub horizon_ns: u64,
    pub tie_break: String,
    pub model: InstanceModel,
}

#[derive(Debug, Error)]
pub enum TraceError {
    #[error("trace i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("trace line {line}: {msg}")]
    Format { line: usize, msg: String },
    #[error("trace has no header line")]
    MissingHeader,
    #[error("unsupported trace version {found} (expected {TRACE_VERSION})")]
    Version { found: u32 },
    #[error("trace line {line}: records are not in time order")]
    OutOfOrder { line: usize },
    #[error("embedded model is invalid: {0}")]
    Model(#[from] ModelError),
    #[error("time {time} is beyond the trace horizon ({horizon} ns)")]
    BeyondHorizon { time: Time, horizon: u64 },
    #[error("unknown variable {0}")]
    UnknownVariable(String),
    #[error("variable {var} has no value at {time}")]
    NoValue { var: VariableId, time: Time },
    #[error("evaluation error: {0}")]
    Eval(String),
}

/// Streams records to a JSONL sink as the engine produces them.
pub struct TraceWriter<W: std::io::Write> {
    out: std::io::BufWriter<W>,
}

impl<W: std::io::Write> TraceWriter<W> {
    /// Creates the writer and emits the header line.
    pub fn new(sink: W, header: &TraceHeader) -> Result<Self, TraceError> {
        use serde_json::json;
        let mut out = std::io::BufWriter::new(sink);
        let model_json: serde_json::Value = serde_json::from_str(&header.model.serialize())
            .expect("canonical model is valid JSON");
        let line = json!({
            "header": {
                "version": header.version,
                "model_hash": header.model_hash,
                "seed": header.seed,
                "horizon_ns": header.horizon_ns,
                "tie_break": header.tie_break,
                "model": model_json,
            }
        });
        writeln!(out, "{line}")?;
        Ok(Self { out })
    }

    pub fn record(&mut self, rec: &TraceRecord) -> Result<(), TraceError> {
        writeln!(self.out, "{}", rec.to_json())?;
        Ok(())
    }

    /// Flushes and returns the underlying sink.
    pub fn seal(self) -> Result<W, TraceError> {
        Ok(self
            .out
            .into_inner()
            .map_err(|e| std::io::Error::new(std::io::ErrorKind::Other, e.to_string()))?)
    }
}

/// A fully loaded trace: header, records in file order, and a per-variable
/// write index for `at`.
#[derive(Debug, Clone)]
pub struct TraceData {
    pub header: TraceHeader,
    pub records: Vec<TraceRecord>,
    /// var -> (time, record index), in file order. File order is time order;
    /// among writes at the same world the later record wins.
    index: BTreeMap<VariableId, Vec<(Time, usize)>>,
}

impl TraceData {
    pub fn from_reader(r: impl std::io::Read) -> Result<Self, TraceError> {
        let reader = std::io::BufReader::new(r);
        let mut lines = reader.lines();
        let header_line = lines.next().ok_or(TraceError::MissingHeader)??;
        let header = Self::parse_header(&header_line)?;

        let mut records = Vec::new();
        let mut last_time = Time::ZERO;
        for (i, line) in lines.enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let lineno = i + 2;
            let v: serde_json::Value =
                serde_json::from_str(&line).map_err(|e| TraceError::Format {
                    line: lineno,
                    msg: e.to_string(),
                })?;
            let rec = TraceRecord::from_json(&v, lineno)?;
            if rec.time() < last_time {
                return Err(TraceError::OutOfOrder { line: lineno });
            }
            last_time = rec.time();
            records.push(rec);
        }

        let mut index: BTreeMap<VariableId, Vec<(Time, usize)>> = BTreeMap::new();
        for (i, rec) in records.iter().enumerate() {
            if let TraceRecord::Write { time, var, .. } = rec {
                index.entry(var.clone()).or_default().push((*time, i));
            }
        }
        Ok(TraceData {
            header,
            records,
            index,
        })
    }

    pub fn from_str_data(s: &str) -> Result<Self, TraceError> {
        Self::from_reader(s.as_bytes())
    }

    fn parse_header(line: &str) -> Result<TraceHeader, TraceError> {
        let v: serde_json::Value = serde_json::from_str(line).map_err(|e| TraceError::Format {
            line: 1,
            msg: e.to_string(),
        })?;
        let h = v.get("header").ok_or(TraceError::MissingHeader)?;
        let bad = |msg: &str| TraceError::Format {
            line: 1,
            msg: msg.to_string(),
        };
        let version = h
            .get("version")
            .and_then(|x| x.as_u64())
            .ok_or_else(|| bad("header missing version"))? as u32;
        if version != TRACE_VERSION {
            return Err(TraceError::Version { found: version });
        }
        let model_text = serde_json::to_string(
            h.get("model").ok_or_else(|| bad("header missing model"))?,
        )
        .expect("re-serializing JSON cannot fail");
        let model = crate::model::parse_model(&model_text)?;
        Ok(TraceHeader {
            version,
            model_hash: h
                .get("model_hash")
                .and_then(|x| x.as_str())
                .ok_or_else(|| bad("header missing model_hash"))?
                .to_string(),
            seed: h
                .get("seed")
                .and_then(|x| x.as_u64())
                .ok_or_else(|| bad("header missing seed"))?,
            horizon_ns: h
                .get("horizon_ns")
                .and_then(|x| x.as_u64())
                .ok_or_else(|| bad("header missing horizon_ns"))?,
            tie_break: h
                .get("tie_break")
                .and_then(|x| x.as_str())
                .ok_or_else(|| bad("header missing tie_break"))?
                .to_string(),
            model,
        })
    }

    pub fn horizon(&self) -> u64 {
        self.header.horizon_ns
    }

    /// The value of variable `d` at world `τ`: the most recent write at or
    /// before `τ`. Declared ports with no write yet read as an empty queue;
    /// a behavior variable read before its first write is an error, as are
    /// undeclared variables and worlds beyond the horizon.
    pub fn at(&self, d: &VariableId, tau: Time) -> Result<TraceValue, TraceError> {
        if tau.t > self.header.horizon_ns {
            return Err(TraceError::BeyondHorizon {
                time: tau,
                horizon: self.header.horizon_ns,
            });
        }
        if let Some(writes) = self.index.get(d) {
            let k = writes.partition_point(|(time, _)| *time <= tau);
            if k > 0 {
                let (_, idx) = writes[k - 1];
                if let TraceRecord::Write { val, .. } = &self.records[idx] {
                    return Ok(val.clone());
                }
                unreachable!("index points at write records only");
            }
        }
        // No write at or before tau: fall back to the declared default.
        match d.role {
            VarRole::Ips | VarRole::Aps => {
                let decl = self
                    .header
                    .model
                    .port_decl(&d.port_id())
                    .map_err(|_| TraceError::UnknownVariable(d.to_string()))?;
                Ok(TraceValue::Queue(PortQueue::new(decl.queue_size)))
            }
            VarRole::Var => {
                if self.index.contains_key(d) {
                    Err(TraceError::NoValue {
                        var: d.clone(),
                        time: tau,
                    })
                } else {
                    Err(TraceError::UnknownVariable(d.to_string()))
                }
            }
        }
    }

    /// Evaluates an expression pointwise at world `τ`. Identifiers name trace
    /// variables (`Role:thread:name`), optionally pinned with `@`; the queue
    /// functions `nonempty`, `count`, and `head` are available.
    pub fn eval(&self, e: &Expr, tau: Time) -> Result<Val, TraceError> {
        let mut ctx = TraceEvalCtx { trace: self, tau };
        eval_expr(e, &mut ctx).map_err(TraceError::Eval)
    }

    /// Parses and evaluates an expression (convenience for the CLI).
    pub fn eval_str(&self, src: &str, tau: Time) -> Result<Val, TraceError> {
        let e = crate::expr::parse_expr(src).map_err(|err| TraceError::Eval(err.to_string()))?;
        self.eval(&e, tau)
    }

    /// All distinct worlds that carry at least one record, in order.
    pub fn worlds(&self) -> Vec<Time> {
        let mut out: Vec<Time> = Vec::new();
        for rec in &self.records {
            let t = rec.time();
            if out.last() != Some(&t) {
                out.push(t);
            }
        }
        out
    }
}

struct TraceEvalCtx<'a> {
    trace: &'a TraceData,
    tau: Time,
}

impl EvalContext for TraceEvalCtx<'_> {
    fn ident(&mut self, name: &str, at: Option<Time>) -> Result<Val, String> {
        let var: VariableId = name.parse()?;
        let tau = at.unwrap_or(self.tau);
        match self.trace.at(&var, tau).map_err(|e| e.to_string())? {
            TraceValue::Queue(q) => Ok(Val::Q(q)),
            TraceValue::Val(v) => Ok(Val::V(v)),
        }
    }

    fn call(&mut self, func: &str, args: &[Expr]) -> Result<Val, String> {
        let one_queue = |ctx: &mut Self, args: &[Expr]| -> Result<PortQueue, String> {
            if args.len() != 1 {
                return Err(format!("{func} takes exactly one argument"));
            }
            match eval_expr(&args[0], ctx)? {
                Val::Q(q) => Ok(q),
                Val::V(v) => Err(format!("{func} expects a port queue, got {}", v.tag())),
            }
        };
        match func {
            "nonempty" => {
                let q = one_queue(self, args)?;
                Ok(Val::V(Value::Bool(!q.is_empty())))
            }
            "count" => {
                let q = one_queue(self, args)?;
                Ok(Val::V(Value::Int(q.len() as i64)))
            }
            "head" => {
                let q = one_queue(self, args)?;
                q.head()
                    .map(|tv| Val::V(tv.v.clone()))
                    .ok_or_else(|| "head of an empty queue".to_string())
            }
            other => Err(format!("unknown function {other}")),
        }
    }
}

/// The engine clock reading for a world, in seconds ([`Time::as_secs_f64`]).
pub fn time_stamp(now: Time) -> f64 {
    now.as_secs_f64()
}
