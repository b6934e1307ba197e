//! Deterministic execution and checking of port-based thread systems.
//!
//! The crate loads an instance model (threads, typed ports, connections,
//! timeouts, behaviors), executes it under a deterministic scheduler that
//! timestamps every state write on a superdense clock, records the run as a
//! replayable trace, and checks traces against temporal properties.
//!
//! * [`model`] — model files, validation, canonical form.
//! * [`values`] — runtime values and timestamped port queues.
//! * [`expr`] — the expression language shared by behaviors and properties.
//! * [`temporal`] — superdense time, trace records, trace evaluation.
//! * [`rts`] — per-thread state, the receive/send rules, behavior services.
//! * [`timeout`] — watchdog declarations and fire semantics.
//! * [`director`] — the system-level engine: rounds, moves, fault handling.
//! * [`checker`] — property suites evaluated over recorded traces.
//! * [`cli`] — the `aadl-rts` command line.

pub mod checker;
pub mod cli;
pub mod director;
pub mod expr;
pub mod model;
pub mod rng;
pub mod rts;
pub mod temporal;
pub mod timeout;
pub mod values;

pub use director::{run_model, HostRegistry, RunConfig, Scenario};
pub use model::{parse_model, InstanceModel, ModelError};
pub use temporal::{Time, TraceData, VariableId};
pub use values::Value;
