//! Demand generator tier: eduction over a compiled program.
//!
//! Each identifier demanded at a context is looked up in the local cache,
//! then in the store's warehouse, and only computed when both miss. The
//! result is published back to the warehouse. Procedure calls become
//! PROCEDURAL demands that workers execute; their results come back
//! through the store.

use std::collections::{HashMap, HashSet};

use thiserror::Error;

use crate::lang::{self, BinOp, Expr, Geer};
use crate::model::{Context, Demand, DemandSignature, DemandState, Value};
use crate::warehouse::{DepositOutcome, StoreError, StoreHandle};
use crate::worker;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum EvalError {
    #[error("circular demand: {}", .0.join(" -> "))]
    CircularDemand(Vec<String>),
    #[error("demand chain deeper than {0}")]
    DepthExceeded(usize),
    #[error("type mismatch: {0}")]
    TypeMismatch(String),
    #[error("division by zero")]
    DivisionByZero,
    #[error("arithmetic overflow")]
    Overflow,
    #[error("timed out waiting for procedure `{0}`")]
    ProcTimeout(String),
    #[error("undefined identifier `{0}`")]
    UndefinedIdentifier(String),
    #[error("procedure failed with {code}: {message}")]
    ProcedureFault { code: String, message: String },
    #[error("store: {0}")]
    Store(StoreError),
}

impl EvalError {
    /// Error class name, stable across evaluators.
    pub fn code(&self) -> &'static str {
        match self {
            EvalError::CircularDemand(_) => "CircularDemand",
            EvalError::DepthExceeded(_) => "DepthExceeded",
            EvalError::TypeMismatch(_) => "TypeMismatch",
            EvalError::DivisionByZero => "DivisionByZero",
            EvalError::Overflow => "Overflow",
            EvalError::ProcTimeout(_) => "ProcTimeout",
            EvalError::UndefinedIdentifier(_) => "UndefinedIdentifier",
            EvalError::ProcedureFault { .. } => "ProcedureFault",
            EvalError::Store(_) => "Store",
        }
    }
}

impl EvalError {
    /// Message text carried next to [`Self::code`] in an error value.
    pub fn detail(&self) -> String {
        match self {
            EvalError::CircularDemand(chain) => chain.join(" -> "),
            EvalError::DepthExceeded(d) => d.to_string(),
            EvalError::TypeMismatch(s) | EvalError::ProcTimeout(s) | EvalError::UndefinedIdentifier(s) => s.clone(),
            EvalError::DivisionByZero | EvalError::Overflow => String::new(),
            EvalError::ProcedureFault { code, message } => format!("{code}: {message}"),
            EvalError::Store(e) => e.to_string(),
        }
    }

    /// Rebuilds an error from a reserved error value written by another
    /// generator or a worker.
    pub fn from_marker(code: &str, message: &str) -> Self {
        match code {
            "CircularDemand" => EvalError::CircularDemand(message.split(" -> ").map(str::to_owned).collect()),
            "DepthExceeded" => EvalError::DepthExceeded(message.parse().unwrap_or(0)),
            "TypeMismatch" => EvalError::TypeMismatch(message.to_owned()),
            "DivisionByZero" => EvalError::DivisionByZero,
            "Overflow" => EvalError::Overflow,
            "ProcTimeout" => EvalError::ProcTimeout(message.to_owned()),
            "UndefinedIdentifier" => EvalError::UndefinedIdentifier(message.to_owned()),
            "ProcedureFault" => match message.split_once(": ") {
                Some((c, m)) => EvalError::ProcedureFault { code: c.to_owned(), message: m.to_owned() },
                None => EvalError::ProcedureFault { code: code.to_owned(), message: message.to_owned() },
            },
            _ => EvalError::ProcedureFault { code: code.to_owned(), message: message.to_owned() },
        }
    }

    /// Encodes the error as a reserved error value.
    pub fn to_marker(&self) -> Value {
        worker::error_value(self.code(), &self.detail())
    }
}

impl From<StoreError> for EvalError {
    fn from(e: StoreError) -> Self {
        EvalError::Store(e)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EvalConfig {
    pub max_depth: usize,
    pub proc_timeout_ms: u64,
    pub warehouse_enabled: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { max_depth: 10_000, proc_timeout_ms: 30_000, warehouse_enabled: true }
    }
}

type EResult<T> = Result<T, EvalError>;

fn mismatch(what: impl Into<String>) -> EvalError {
    EvalError::TypeMismatch(what.into())
}

fn numeric_pair(op: BinOp, l: &Value, r: &Value) -> EResult<Result<(i64, i64), (f64, f64)>> {
    match (l, r) {
        (Value::Int(a), Value::Int(b)) => Ok(Ok((*a, *b))),
        (Value::Int(a), Value::Float(b)) => Ok(Err((*a as f64, *b))),
        (Value::Float(a), Value::Int(b)) => Ok(Err((*a, *b as f64))),
        (Value::Float(a), Value::Float(b)) => Ok(Err((*a, *b))),
        _ => Err(mismatch(format!("{} {op} {}", l.type_name(), r.type_name()))),
    }
}

fn finite(x: f64) -> EResult<Value> {
    if x.is_finite() {
        Ok(Value::Float(x))
    } else {
        Err(EvalError::Overflow)
    }
}

fn arithmetic(op: BinOp, l: &Value, r: &Value) -> EResult<Value> {
    match numeric_pair(op, l, r)? {
        Ok((a, b)) => {
            let v = match op {
                BinOp::Add => a.checked_add(b),
                BinOp::Sub => a.checked_sub(b),
                BinOp::Mul => a.checked_mul(b),
                BinOp::Div | BinOp::Rem if b == 0 => return Err(EvalError::DivisionByZero),
                BinOp::Div => a.checked_div(b),
                BinOp::Rem => Some(a.wrapping_rem(b)),
                _ => unreachable!(),
            };
            v.map(Value::Int).ok_or(EvalError::Overflow)
        }
        Err((a, b)) => match op {
            BinOp::Add => finite(a + b),
            BinOp::Sub => finite(a - b),
            BinOp::Mul => finite(a * b),
            BinOp::Div | BinOp::Rem if b == 0.0 => Err(EvalError::DivisionByZero),
            BinOp::Div => finite(a / b),
            BinOp::Rem => finite(a % b),
            _ => unreachable!(),
        },
    }
}

fn equality(l: &Value, r: &Value) -> EResult<bool> {
    Ok(match (l, r) {
        (Value::Bool(a), Value::Bool(b)) => a == b,
        (Value::Str(a), Value::Str(b)) => a == b,
        (Value::FloatArray(a), Value::FloatArray(b)) => a == b,
        _ => match numeric_pair(BinOp::Eq, l, r)? {
            Ok((a, b)) => a == b,
            Err((a, b)) => a == b,
        },
    })
}

/// Applies a binary operator to two already evaluated operands.
pub fn apply_binary(op: BinOp, l: &Value, r: &Value) -> EResult<Value> {
    match op {
        BinOp::Add | BinOp::Sub | BinOp::Mul | BinOp::Div | BinOp::Rem => arithmetic(op, l, r),
        BinOp::Eq => equality(l, r).map(Value::Bool),
        BinOp::Ne => equality(l, r).map(|b| Value::Bool(!b)),
        BinOp::Lt | BinOp::Le | BinOp::Gt | BinOp::Ge => {
            let ord = match numeric_pair(op, l, r)? {
                Ok((a, b)) => a.partial_cmp(&b),
                Err((a, b)) => a.partial_cmp(&b),
            };
            let Some(ord) = ord else { return Ok(Value::Bool(false)) };
            Ok(Value::Bool(match op {
                BinOp::Lt => ord.is_lt(),
                BinOp::Le => ord.is_le(),
                BinOp::Gt => ord.is_gt(),
                _ => ord.is_ge(),
            }))
        }
        BinOp::And | BinOp::Or => match (l, r) {
            (Value::Bool(a), Value::Bool(b)) => Ok(Value::Bool(if op == BinOp::And { *a && *b } else { *a || *b })),
            _ => Err(mismatch(format!("{} {op} {}", l.type_name(), r.type_name()))),
        },
    }
}

fn negate(v: &Value) -> EResult<Value> {
    match v {
        Value::Int(i) => i.checked_neg().map(Value::Int).ok_or(EvalError::Overflow),
        Value::Float(x) => Ok(Value::Float(-x)),
        other => Err(mismatch(format!("-{}", other.type_name()))),
    }
}

/// Eduction engine bound to one store. Runs one top-level evaluation at a
/// time; the cache persists across evaluations until cleared.
pub struct Evaluator<'s> {
    store: &'s dyn StoreHandle,
    cfg: EvalConfig,
    cache: HashMap<Vec<u8>, Value>,
    in_flight: HashSet<Vec<u8>>,
    chain: Vec<DemandSignature>,
    published: HashSet<String>,
    computations: u64,
}

impl<'s> Evaluator<'s> {
    pub fn new(store: &'s dyn StoreHandle, cfg: EvalConfig) -> Self {
        assert!(cfg.max_depth >= 1, "max_depth must be at least 1");
        Self {
            store,
            cfg,
            cache: HashMap::new(),
            in_flight: HashSet::new(),
            chain: Vec::new(),
            published: HashSet::new(),
            computations: 0,
        }
    }

    pub fn config(&self) -> &EvalConfig {
        &self.cfg
    }

    /// Identifier bodies evaluated since the last reset; hits excluded.
    pub fn computation_counter(&self) -> u64 {
        self.computations
    }

    pub fn reset_counter(&mut self) {
        self.computations = 0;
    }

    pub fn clear_cache(&mut self) {
        self.cache.clear();
    }

    /// Value of identifier `name` at `ctx`.
    pub fn eval_demand(&mut self, geer: &Geer, name: &str, ctx: &Context) -> EResult<Value> {
        self.begin(geer)?;
        let out = self.demand(geer, name, ctx);
        self.finish();
        out
    }

    /// Value of the program's root expression at `ctx`.
    pub fn eval_root(&mut self, geer: &Geer, ctx: &Context) -> EResult<Value> {
        self.begin(geer)?;
        let ctx = ctx.restrict(|d| geer.declares(d));
        let out = self.expr(geer, &geer.root, &ctx);
        self.finish();
        out
    }

    fn begin(&mut self, geer: &Geer) -> EResult<()> {
        debug_assert!(self.in_flight.is_empty() && self.chain.is_empty());
        if self.cfg.warehouse_enabled && !self.published.contains(&geer.program_id) {
            self.store.put_resource(&geer.program_id, &lang::encode_geer(geer))?;
            self.published.insert(geer.program_id.clone());
        }
        Ok(())
    }

    fn finish(&mut self) {
        self.in_flight.clear();
        self.chain.clear();
    }

    fn demand(&mut self, geer: &Geer, name: &str, ctx: &Context) -> EResult<Value> {
        let body = geer.lookup(name).ok_or_else(|| EvalError::UndefinedIdentifier(name.to_owned()))?;
        let sig = DemandSignature::intensional(&geer.program_id, name, ctx.restrict(|d| geer.declares(d)));
        let key = sig.key();
        if self.in_flight.contains(&key) {
            let mut names: Vec<String> = self.chain.iter().map(|s| s.to_string()).collect();
            names.push(sig.to_string());
            return Err(EvalError::CircularDemand(names));
        }
        if self.cfg.warehouse_enabled {
            if let Some(v) = self.cache.get(&key) {
                return Ok(v.clone());
            }
            match self.store.fetch(&sig) {
                Ok((DemandState::Computed, Some(v))) => {
                    if let Some((code, message)) = worker::parse_error_value(&v) {
                        return Err(EvalError::from_marker(&code, &message));
                    }
                    self.cache.insert(key, v.clone());
                    return Ok(v);
                }
                Ok(_) | Err(StoreError::NotFound) => {}
                Err(e) => return Err(e.into()),
            }
        }
        if self.chain.len() >= self.cfg.max_depth {
            return Err(EvalError::DepthExceeded(self.cfg.max_depth));
        }
        self.in_flight.insert(key.clone());
        self.chain.push(sig.clone());
        self.computations += 1;
        let out = stacker::maybe_grow(64 * 1024, 2 * 1024 * 1024, || self.expr(geer, body, &sig.context));
        self.chain.pop();
        self.in_flight.remove(&key);
        let v = out?;
        if self.cfg.warehouse_enabled {
            match self.store.deposit(&Demand::computed(sig, v.clone()))? {
                DepositOutcome::AlreadyComputed(stored) if stored != v => {
                    return Err(StoreError::ConflictingResult.into())
                }
                _ => {}
            }
            self.cache.insert(key, v.clone());
        }
        Ok(v)
    }

    fn expr(&mut self, geer: &Geer, node: &Expr, ctx: &Context) -> EResult<Value> {
        match node {
            Expr::Literal(v) => Ok(v.clone()),
            Expr::Ident(name) => self.demand(geer, name, ctx),
            Expr::HashDim(d) => Ok(Value::Int(ctx.get(d))),
            Expr::Binary(op, l, r) => {
                let l = self.expr(geer, l, ctx)?;
                let r = self.expr(geer, r, ctx)?;
                apply_binary(*op, &l, &r)
            }
            Expr::Neg(inner) => negate(&self.expr(geer, inner, ctx)?),
            Expr::If(c, t, e) => match self.expr(geer, c, ctx)? {
                Value::Bool(true) => self.expr(geer, t, ctx),
                Value::Bool(false) => self.expr(geer, e, ctx),
                other => Err(mismatch(format!("if condition is {}", other.type_name()))),
            },
            Expr::At(inner, dim, tag) => match self.expr(geer, tag, ctx)? {
                Value::Int(t) => self.expr(geer, inner, &ctx.with(dim, t)),
                other => Err(mismatch(format!("tag for `{dim}` is {}", other.type_name()))),
            },
            Expr::Call(name, args) => {
                let mut values = Vec::with_capacity(args.len());
                for a in args {
                    values.push(self.expr(geer, a, ctx)?);
                }
                self.procedure(&geer.program_id, name, values)
            }
        }
    }

    fn procedure(&mut self, program_id: &str, name: &str, args: Vec<Value>) -> EResult<Value> {
        let sig = DemandSignature::procedural(program_id, name, args);
        let key = sig.key();
        if let Some(v) = self.cache.get(&key) {
            return Ok(v.clone());
        }
        let v = match self.store.deposit(&Demand::pending(sig.clone()))? {
            DepositOutcome::AlreadyComputed(v) => v,
            DepositOutcome::Enqueued | DepositOutcome::DuplicatePending => {
                match self.store.await_result(&sig, self.cfg.proc_timeout_ms) {
                    Ok(v) => v,
                    Err(StoreError::Timeout) => return Err(EvalError::ProcTimeout(name.to_owned())),
                    Err(e) => return Err(e.into()),
                }
            }
        };
        if let Some((code, message)) = worker::parse_error_value(&v) {
            return Err(EvalError::ProcedureFault { code, message });
        }
        if self.cfg.warehouse_enabled {
            self.cache.insert(key, v.clone());
        }
        Ok(v)
    }
}

/// One-shot evaluation with a fresh evaluator.
pub fn eval_demand(geer: &Geer, name: &str, ctx: &Context, store: &dyn StoreHandle, cfg: EvalConfig) -> EResult<Value> {
    Evaluator::new(store, cfg).eval_demand(geer, name, ctx)
}
