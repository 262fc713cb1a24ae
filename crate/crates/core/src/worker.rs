//! Demand worker tier: claims procedural demands, runs the registered
//! procedure and fulfills the result.
//!
//! Procedure failures are not dropped. They are fulfilled as a `Str`
//! value starting with [`ERROR_PREFIX`] so that whoever awaits the demand
//! fails fast instead of timing out.

use std::collections::BTreeMap;
use std::fmt;
use std::sync::atomic::{AtomicBool, AtomicU8, Ordering};
use std::sync::Arc;
use std::time::Duration;

use thiserror::Error;

use crate::model::{Demand, DemandKind, KindSet, Value};
use crate::warehouse::{StoreError, StoreHandle, DEFAULT_LEASE_MS};

pub const ERROR_PREFIX: &str = "!ERR:";

/// Environment handed to a running procedure.
pub struct ProcEnv<'a> {
    pub store: &'a dyn StoreHandle,
}

pub type ProcFn = dyn Fn(&[Value], &ProcEnv<'_>) -> Result<Value, String> + Send + Sync;

#[derive(Clone)]
struct Procedure {
    arity: usize,
    body: Arc<ProcFn>,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum WorkerError {
    #[error("procedure `{0}` already registered")]
    DuplicateProcedure(String),
    #[error("unknown procedure `{0}`")]
    UnknownProcedure(String),
    #[error("procedure `{name}` takes {expected} arguments, got {got}")]
    ArityMismatch { name: String, expected: usize, got: usize },
    #[error("procedure fault: {0}")]
    ProcedureFault(String),
    #[error("demand is not procedural")]
    NotProcedural,
    #[error("store unreachable: {0}")]
    StoreUnreachable(String),
}

impl WorkerError {
    pub fn code(&self) -> &'static str {
        match self {
            WorkerError::DuplicateProcedure(_) => "DuplicateProcedure",
            WorkerError::UnknownProcedure(_) => "UnknownProcedure",
            WorkerError::ArityMismatch { .. } => "ArityMismatch",
            WorkerError::ProcedureFault(_) => "ProcedureFault",
            WorkerError::NotProcedural => "NotProcedural",
            WorkerError::StoreUnreachable(_) => "StoreUnreachable",
        }
    }
}

/// Encodes a failure as the reserved error value.
pub fn error_value(code: &str, message: &str) -> Value {
    Value::Str(format!("{ERROR_PREFIX}{code}: {message}"))
}

/// Splits a reserved error value into `(code, message)`.
pub fn parse_error_value(v: &Value) -> Option<(String, String)> {
    let rest = v.as_str()?.strip_prefix(ERROR_PREFIX)?;
    let (code, message) = rest.split_once(": ").unwrap_or((rest, ""));
    Some((code.to_owned(), message.to_owned()))
}

/// Named procedures with fixed arities.
#[derive(Clone, Default)]
pub struct ProcedureRegistry {
    procs: BTreeMap<String, Procedure>,
}

impl fmt::Debug for ProcedureRegistry {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_map().entries(self.procs.iter().map(|(k, p)| (k, p.arity))).finish()
    }
}

impl ProcedureRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register<F>(&mut self, name: &str, arity: usize, body: F) -> Result<(), WorkerError>
    where
        F: Fn(&[Value], &ProcEnv<'_>) -> Result<Value, String> + Send + Sync + 'static,
    {
        if self.procs.contains_key(name) {
            return Err(WorkerError::DuplicateProcedure(name.to_owned()));
        }
        self.procs.insert(name.to_owned(), Procedure { arity, body: Arc::new(body) });
        Ok(())
    }

    pub fn contains(&self, name: &str) -> bool {
        self.procs.contains_key(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.procs.keys().map(String::as_str)
    }

    /// Runs `name` on `args` directly.
    pub fn invoke(&self, name: &str, args: &[Value], env: &ProcEnv<'_>) -> Result<Value, WorkerError> {
        let p = self.procs.get(name).ok_or_else(|| WorkerError::UnknownProcedure(name.to_owned()))?;
        if p.arity != args.len() {
            return Err(WorkerError::ArityMismatch { name: name.to_owned(), expected: p.arity, got: args.len() });
        }
        let v = (p.body)(args, env).map_err(WorkerError::ProcedureFault)?;
        if !v.is_finite() {
            return Err(WorkerError::ProcedureFault(format!("`{name}` returned a non-finite value")));
        }
        Ok(v)
    }

    /// Executes a claimed procedural demand.
    pub fn execute_one(&self, demand: &Demand, env: &ProcEnv<'_>) -> Result<Value, WorkerError> {
        if demand.signature.kind != DemandKind::Procedural {
            return Err(WorkerError::NotProcedural);
        }
        self.invoke(&demand.signature.name, &demand.signature.args, env)
    }
}

/// Small arithmetic procedures, handy for programs and smoke tests.
pub fn register_math(reg: &mut ProcedureRegistry) -> Result<(), WorkerError> {
    reg.register("add2", 2, |args, _| match (&args[0], &args[1]) {
        (Value::Int(a), Value::Int(b)) => a.checked_add(*b).map(Value::Int).ok_or_else(|| "overflow".into()),
        (Value::Float(a), Value::Float(b)) => Ok(Value::Float(a + b)),
        (Value::Int(a), Value::Float(b)) | (Value::Float(b), Value::Int(a)) => Ok(Value::Float(*a as f64 + b)),
        _ => Err("add2 expects numbers".into()),
    })?;
    reg.register("square", 1, |args, _| match &args[0] {
        Value::Int(a) => a.checked_mul(*a).map(Value::Int).ok_or_else(|| "overflow".into()),
        Value::Float(a) => Ok(Value::Float(a * a)),
        _ => Err("square expects a number".into()),
    })?;
    reg.register("sum", 1, |args, _| match &args[0] {
        Value::FloatArray(xs) => Ok(Value::Float(xs.iter().sum())),
        _ => Err("sum expects a float array".into()),
    })
}

#[derive(Debug, Clone)]
pub struct WorkerConfig {
    pub worker_id: String,
    pub poll_interval_ms: u64,
    pub lease_ms: u64,
    pub kinds: KindSet,
}

impl WorkerConfig {
    pub fn new(worker_id: impl Into<String>) -> Self {
        Self {
            worker_id: worker_id.into(),
            poll_interval_ms: 50,
            lease_ms: DEFAULT_LEASE_MS,
            kinds: KindSet::of(&[DemandKind::Procedural]),
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.poll_interval_ms >= self.lease_ms {
            return Err(format!(
                "poll interval {} ms must be shorter than lease {} ms",
                self.poll_interval_ms, self.lease_ms
            ));
        }
        Ok(())
    }
}

const RUNNING: u8 = 0;
const CRASH_NOW: u8 = 1;
const CRASH_ON_CLAIM: u8 = 2;

/// Shared switch for a running worker loop.
#[derive(Debug, Default)]
pub struct WorkerControl {
    stop: AtomicBool,
    crash: AtomicU8,
}

impl WorkerControl {
    pub fn new() -> Arc<Self> {
        Arc::new(Self::default())
    }

    /// Finish the current demand, then exit.
    pub fn stop(&self) {
        self.stop.store(true, Ordering::SeqCst);
    }

    /// Exit at the next step, abandoning any claimed demand unfulfilled.
    pub fn crash(&self) {
        self.crash.store(CRASH_NOW, Ordering::SeqCst);
    }

    /// Claim one more demand and die holding its lease, as a node that
    /// fails mid-execution would.
    pub fn crash_holding_next_claim(&self) {
        self.crash.store(CRASH_ON_CLAIM, Ordering::SeqCst);
    }

    pub fn is_stopped(&self) -> bool {
        self.stop.load(Ordering::SeqCst)
    }

    fn crash_mode(&self) -> u8 {
        self.crash.load(Ordering::SeqCst)
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct RunSummary {
    pub claims: u64,
    pub fulfills: u64,
    pub failures: u64,
    pub crashed: bool,
}

const MAX_BACKOFF_MS: u64 = 1000;

/// Claim/execute/fulfill loop; returns when stopped or crashed.
pub fn run_worker(
    cfg: &WorkerConfig,
    store: &dyn StoreHandle,
    registry: &ProcedureRegistry,
    control: &WorkerControl,
) -> Result<RunSummary, WorkerError> {
    cfg.validate().map_err(WorkerError::ProcedureFault)?;
    if let Err(e) = store.stats() {
        return Err(WorkerError::StoreUnreachable(e.to_string()));
    }
    let mut summary = RunSummary::default();
    let mut backoff_ms = cfg.poll_interval_ms.max(1);
    let env = ProcEnv { store };
    loop {
        if control.crash_mode() == CRASH_NOW {
            summary.crashed = true;
            return Ok(summary);
        }
        if control.is_stopped() {
            return Ok(summary);
        }
        let claimed = match store.claim(&cfg.worker_id, cfg.kinds, cfg.lease_ms) {
            Ok(c) => c,
            Err(e) if e.is_transport() => {
                tracing::warn!(worker = %cfg.worker_id, error = %e, backoff_ms, "claim failed, backing off");
                std::thread::sleep(Duration::from_millis(backoff_ms));
                backoff_ms = (backoff_ms * 2).min(MAX_BACKOFF_MS);
                continue;
            }
            Err(e) => return Err(WorkerError::StoreUnreachable(e.to_string())),
        };
        backoff_ms = cfg.poll_interval_ms.max(1);
        let Some(demand) = claimed else {
            std::thread::sleep(Duration::from_millis(cfg.poll_interval_ms));
            continue;
        };
        summary.claims += 1;
        if control.crash_mode() != RUNNING {
            tracing::info!(worker = %cfg.worker_id, sig = %demand.signature, "crashing with demand in hand");
            summary.crashed = true;
            return Ok(summary);
        }
        let value = match registry.execute_one(&demand, &env) {
            Ok(v) => v,
            Err(e) => {
                summary.failures += 1;
                error_value(e.code(), &e.to_string())
            }
        };
        if control.crash_mode() == CRASH_NOW {
            summary.crashed = true;
            return Ok(summary);
        }
        match fulfill_with_retry(store, &demand, &value, &cfg.worker_id, control) {
            Ok(()) => summary.fulfills += 1,
            Err(e) => {
                tracing::warn!(worker = %cfg.worker_id, sig = %demand.signature, error = %e, "fulfill rejected");
                summary.failures += 1;
            }
        }
    }
}

fn fulfill_with_retry(
    store: &dyn StoreHandle,
    demand: &Demand,
    value: &Value,
    worker: &str,
    control: &WorkerControl,
) -> Result<(), StoreError> {
    let mut backoff_ms = 50;
    loop {
        match store.fulfill(&demand.signature, value, worker) {
            Err(e) if e.is_transport() && control.crash_mode() == RUNNING => {
                std::thread::sleep(Duration::from_millis(backoff_ms));
                backoff_ms = (backoff_ms * 2).min(MAX_BACKOFF_MS);
            }
            other => return other,
        }
    }
}
