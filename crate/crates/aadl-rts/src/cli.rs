//! The `aadl-rts` command line.
//!
//! Four subcommands: `run` executes a model against a scenario and records
//! the trace; `check` evaluates a property suite over a recorded trace;
//! `eval` evaluates one expression at a world of a recorded trace;
//! `validate` parses a model and prints its canonical form and hash.
//!
//! Exit codes: `0` success (and all checks passed / expression true);
//! `1` a property violation, a false expression, a thread fault, or an
//! aborted run; `2` usage, parse, or input errors. The CLI registers no
//! host behaviors: models that reference them fail at startup.

use std::fs;
use std::io::{self, Write};
use std::path::PathBuf;

use clap::{Parser, Subcommand};

use crate::checker::{check_suite, CheckReport, Suite};
use crate::director::{run_to_vec, EngineError, HostRegistry, RunConfig, Scenario};
use crate::expr::Val;
use crate::model::parse_model;
use crate::temporal::{Time, TraceData};

#[derive(Parser, Debug)]
#[command(
    name = "aadl-rts",
    version,
    about = "Deterministic execution and trace checking of port-based thread systems"
)]
pub struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Execute a model against a scenario and record the trace.
    Run {
        /// Model file (JSON).
        #[arg(long)]
        model: PathBuf,
        /// Scenario file (JSON); defaults to no injections.
        #[arg(long)]
        scenario: Option<PathBuf>,
        /// Run until this instant, inclusive (nanoseconds).
        #[arg(long)]
        horizon_ns: u64,
        /// Seed for arrival-order resolution.
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Trace output path; stdout when omitted.
        #[arg(long)]
        trace: Option<PathBuf>,
        /// Restrict timed threads to their period (drop the event half).
        #[arg(long)]
        disable_timed: bool,
        /// After the run, check the trace against a suite
        /// (a file path or "builtin:all").
        #[arg(long)]
        check: Option<String>,
    },
    /// Check a recorded trace against a property suite.
    Check {
        /// Trace file (JSONL).
        #[arg(long)]
        trace: PathBuf,
        /// Suite: a file path or "builtin:all".
        #[arg(long, default_value = "builtin:all")]
        suite: String,
    },
    /// Evaluate an expression at a world of a recorded trace.
    Eval {
        /// Trace file (JSONL).
        #[arg(long)]
        trace: PathBuf,
        /// Expression over trace variables (e.g. "Var:ctrl:x == 3").
        #[arg(long)]
        expr: String,
        /// World to evaluate at, as "t,n"; default: the last recorded world.
        #[arg(long)]
        at: Option<String>,
        /// Instant in nanoseconds (evaluated at the end of the instant).
        #[arg(long, conflicts_with = "at")]
        at_ns: Option<u64>,
    },
    /// Validate a model file; print its canonical form and content hash.
    Validate {
        /// Model file (JSON).
        #[arg(long)]
        model: PathBuf,
        /// Print only the hash.
        #[arg(long)]
        hash_only: bool,
    },
}

/// Runs the CLI and returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            // Clap renders --help/--version as "errors" with exit code 0.
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match cli.command {
        Command::Run {
            model,
            scenario,
            horizon_ns,
            seed,
            trace,
            disable_timed,
            check,
        } => cmd_run(model, scenario, horizon_ns, seed, trace, disable_timed, check),
        Command::Check { trace, suite } => cmd_check(trace, &suite),
        Command::Eval {
            trace,
            expr,
            at,
            at_ns,
        } => cmd_eval(trace, &expr, at.as_deref(), at_ns),
        Command::Validate { model, hash_only } => cmd_validate(model, hash_only),
    }
}

fn fail2(msg: impl std::fmt::Display) -> i32 {
    eprintln!("error: {msg}");
    2
}

fn read_file(path: &PathBuf) -> Result<String, String> {
    fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))
}

fn resolve_suite(spec: &str) -> Result<Suite, String> {
    if spec == "builtin:all" {
        Ok(Suite::builtin_all())
    } else if let Some(rest) = spec.strip_prefix("builtin:") {
        Err(format!("unknown builtin suite {rest:?} (have: builtin:all)"))
    } else {
        Suite::parse(&read_file(&PathBuf::from(spec))?)
    }
}

fn print_report(report: &CheckReport, out: &mut dyn Write) -> io::Result<()> {
    for o in &report.outcomes {
        if o.passed {
            writeln!(out, "PASS {}", o.name)?;
        } else {
            let detail = o.detail.as_deref().unwrap_or("violation");
            let first = detail.lines().next().unwrap_or("violation");
            writeln!(out, "FAIL {}: {first}", o.name)?;
            for line in detail.lines().skip(1) {
                writeln!(out, "     {line}")?;
            }
        }
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_run(
    model_path: PathBuf,
    scenario_path: Option<PathBuf>,
    horizon_ns: u64,
    seed: u64,
    trace_path: Option<PathBuf>,
    disable_timed: bool,
    check: Option<String>,
) -> i32 {
    let model = match read_file(&model_path).and_then(|s| parse_model(&s).map_err(|e| e.to_string()))
    {
        Ok(m) => m,
        Err(e) => return fail2(e),
    };
    let scenario = match scenario_path {
        Some(p) => match read_file(&p).and_then(|s| Scenario::parse(&s)) {
            Ok(s) => s,
            Err(e) => return fail2(e),
        },
        None => Scenario::empty(),
    };
    let suite = match check.as_deref().map(resolve_suite).transpose() {
        Ok(s) => s,
        Err(e) => return fail2(e),
    };
    let cfg = RunConfig {
        horizon_ns,
        seed,
        enable_timed: !disable_timed,
    };
    let (summary, bytes) = match run_to_vec(&model, &scenario, &cfg, &HostRegistry::new()) {
        Ok(ok) => ok,
        Err(EngineError::Scenario(msg)) => return fail2(msg),
        Err(e) => {
            eprintln!("run aborted: {e}");
            return 1;
        }
    };

    match &trace_path {
        Some(p) => {
            if let Err(e) = fs::write(p, &bytes) {
                return fail2(format!("{}: {e}", p.display()));
            }
        }
        None => {
            let mut out = io::stdout().lock();
            if out.write_all(&bytes).and_then(|()| out.flush()).is_err() {
                return 1;
            }
        }
    }

    eprintln!(
        "run complete: end {} ns, {} instants, {} rounds, {}/{} dispatches accepted, {} fires, {} records",
        summary.end_ns,
        summary.instants,
        summary.rounds,
        summary.dispatches_accepted,
        summary.dispatches_offered,
        summary.fires,
        summary.records
    );
    for (thread, reason) in &summary.halted {
        eprintln!("thread {thread} halted: {reason}");
    }

    let mut code = if summary.clean() { 0 } else { 1 };
    if let Some(suite) = suite {
        let trace = match TraceData::from_reader(bytes.as_slice()) {
            Ok(t) => t,
            Err(e) => return fail2(format!("recorded trace does not load: {e}")),
        };
        let report = check_suite(&trace, &suite);
        let _ = print_report(&report, &mut io::stderr().lock());
        if !report.all_passed() {
            code = 1;
        }
    }
    code
}

fn cmd_check(trace_path: PathBuf, suite_spec: &str) -> i32 {
    let suite = match resolve_suite(suite_spec) {
        Ok(s) => s,
        Err(e) => return fail2(e),
    };
    let trace = match read_file(&trace_path)
        .and_then(|s| TraceData::from_str_data(&s).map_err(|e| e.to_string()))
    {
        Ok(t) => t,
        Err(e) => return fail2(e),
    };
    let report = check_suite(&trace, &suite);
    let mut out = io::stdout().lock();
    if print_report(&report, &mut out).is_err() {
        return 1;
    }
    if report.all_passed() {
        0
    } else {
        1
    }
}

fn cmd_eval(trace_path: PathBuf, expr: &str, at: Option<&str>, at_ns: Option<u64>) -> i32 {
    let trace = match read_file(&trace_path)
        .and_then(|s| TraceData::from_str_data(&s).map_err(|e| e.to_string()))
    {
        Ok(t) => t,
        Err(e) => return fail2(e),
    };
    let world = match (at, at_ns) {
        (Some(spec), _) => match parse_world(spec) {
            Ok(w) => w,
            Err(e) => return fail2(e),
        },
        (None, Some(t)) => Time::new(t, u32::MAX),
        (None, None) => trace
            .worlds()
            .last()
            .copied()
            .unwrap_or(Time::new(trace.horizon(), u32::MAX)),
    };
    match trace.eval_str(expr, world) {
        Ok(val) => {
            let rendered = match val {
                Val::V(v) => v.to_json().to_string(),
                Val::Q(q) => serde_json::to_string(&q).unwrap_or_else(|e| e.to_string()),
            };
            println!("{rendered}");
            if rendered == "false" {
                1
            } else {
                0
            }
        }
        Err(e) => fail2(e),
    }
}

fn parse_world(spec: &str) -> Result<Time, String> {
    let (t, n) = spec
        .split_once(',')
        .ok_or_else(|| format!("world {spec:?} is not \"t,n\""))?;
    let t: u64 = t
        .trim()
        .parse()
        .map_err(|e| format!("bad instant in {spec:?}: {e}"))?;
    let n: u32 = n
        .trim()
        .parse()
        .map_err(|e| format!("bad micro-step in {spec:?}: {e}"))?;
    Ok(Time::new(t, n))
}

fn cmd_validate(model_path: PathBuf, hash_only: bool) -> i32 {
    match read_file(&model_path).and_then(|s| parse_model(&s).map_err(|e| e.to_string())) {
        Ok(model) => {
            if hash_only {
                println!("{}", model.hash());
            } else {
                println!("{}", model.serialize());
                println!("{}", model.hash());
            }
            0
        }
        Err(e) => fail2(e),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flags_parse() {
        let cli = Cli::try_parse_from([
            "aadl-rts",
            "run",
            "--model",
            "m.json",
            "--horizon-ns",
            "1000",
            "--seed",
            "7",
            "--disable-timed",
            "--check",
            "builtin:all",
        ])
        .unwrap();
        match cli.command {
            Command::Run {
                horizon_ns,
                seed,
                disable_timed,
                check,
                trace,
                scenario,
                ..
            } => {
                assert_eq!(horizon_ns, 1000);
                assert_eq!(seed, 7);
                assert!(disable_timed);
                assert_eq!(check.as_deref(), Some("builtin:all"));
                assert!(trace.is_none());
                assert!(scenario.is_none());
            }
            other => panic!("parsed {other:?}"),
        }
    }

    #[test]
    fn eval_world_syntax() {
        assert_eq!(parse_world("5,3").unwrap(), Time::new(5, 3));
        assert_eq!(parse_world(" 10 , 0 ").unwrap(), Time::new(10, 0));
        assert!(parse_world("5").is_err());
        assert!(parse_world("a,b").is_err());
    }

    #[test]
    fn at_and_at_ns_conflict() {
        let res = Cli::try_parse_from([
            "aadl-rts", "eval", "--trace", "t.jsonl", "--expr", "1 == 1", "--at", "0,0",
            "--at-ns", "5",
        ]);
        assert!(res.is_err());
    }

    #[test]
    fn unknown_builtin_suite_is_an_error() {
        assert!(resolve_suite("builtin:none").is_err());
        assert!(resolve_suite("builtin:all").is_ok());
    }

    #[test]
    fn value_renders_as_json() {
        // Sanity for the eval output contract: booleans print bare, so the
        // exit-code rule can latch on "false".
        use crate::values::Value;
        assert_eq!(Value::Bool(false).to_json().to_string(), "false");
        assert_eq!(Value::Int(7).to_json().to_string(), "7");
    }
}
