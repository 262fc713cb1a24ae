//! Plain recursive interpreter used as a test oracle for the eduction
//! engine. No cache, no store, no transport: procedures run inline.
//!
//! Everything here is written independently of [`crate::eval`] so that a
//! shared bug does not hide itself. Errors are reported as the same class
//! names that [`crate::eval::EvalError::code`] uses.

use std::collections::{BTreeSet, HashSet};

use crate::lang::{BinOp, Expr, Geer};
use crate::model::{Context, DemandSignature, Value};
use crate::warehouse::Warehouse;
use crate::worker::{ProcEnv, ProcedureRegistry};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RefError {
    pub code: &'static str,
    pub detail: String,
}

fn fail<T>(code: &'static str, detail: impl Into<String>) -> Result<T, RefError> {
    Err(RefError { code, detail: detail.into() })
}

pub const REF_MAX_DEPTH: usize = 10_000;

struct Interp<'a> {
    geer: &'a Geer,
    procs: &'a ProcedureRegistry,
    chain: Vec<DemandSignature>,
    on_chain: HashSet<Vec<u8>>,
    max_depth: usize,
    trace: Option<BTreeSet<Vec<u8>>>,
    proc_env: Warehouse,
}

impl Interp<'_> {
    fn ident(&mut self, name: &str, ctx: &Context) -> Result<Value, RefError> {
        let Some(body) = self.geer.lookup(name) else {
            return fail("UndefinedIdentifier", name);
        };
        let mut local = Context::empty();
        for (dim, tag) in ctx.iter() {
            if self.geer.dimensions.contains(dim) {
                local = local.with(dim, tag);
            }
        }
        let sig = DemandSignature::intensional(&self.geer.program_id, name, local.clone());
        let key = sig.key();
        if self.on_chain.contains(&key) {
            return fail("CircularDemand", sig.to_string());
        }
        if self.chain.len() == self.max_depth {
            return fail("DepthExceeded", self.max_depth.to_string());
        }
        if let Some(t) = self.trace.as_mut() {
            t.insert(key.clone());
        }
        self.chain.push(sig);
        self.on_chain.insert(key.clone());
        let r = stacker::maybe_grow(64 * 1024, 2 * 1024 * 1024, || self.eval(body, &local));
        self.on_chain.remove(&key);
        self.chain.pop();
        r
    }

    fn eval(&mut self, e: &Expr, ctx: &Context) -> Result<Value, RefError> {
        match e {
            Expr::Literal(v) => Ok(v.clone()),
            Expr::Ident(n) => self.ident(n, ctx),
            Expr::HashDim(d) => Ok(Value::Int(ctx.get(d))),
            Expr::Neg(x) => match self.eval(x, ctx)? {
                Value::Int(i) if i == i64::MIN => fail("Overflow", "negation"),
                Value::Int(i) => Ok(Value::Int(-i)),
                Value::Float(f) => Ok(Value::Float(-f)),
                v => fail("TypeMismatch", v.type_name()),
            },
            Expr::If(c, t, f) => {
                let c = self.eval(c, ctx)?;
                if c == Value::Bool(true) {
                    self.eval(t, ctx)
                } else if c == Value::Bool(false) {
                    self.eval(f, ctx)
                } else {
                    fail("TypeMismatch", "condition")
                }
            }
            Expr::At(x, dim, tag) => {
                let Value::Int(t) = self.eval(tag, ctx)? else {
                    return fail("TypeMismatch", "tag");
                };
                let shifted = ctx.with(dim, t);
                self.eval(x, &shifted)
            }
            Expr::Binary(op, l, r) => {
                let a = self.eval(l, ctx)?;
                let b = self.eval(r, ctx)?;
                binary(*op, a, b)
            }
            Expr::Call(name, args) => {
                let mut vals = Vec::new();
                for a in args {
                    let v = self.eval(a, ctx)?;
                    vals.push(v);
                }
                let env = ProcEnv { store: &self.proc_env };
                match self.procs.invoke(name, &vals, &env) {
                    Ok(v) => Ok(v),
                    Err(e) => fail("ProcedureFault", e.to_string()),
                }
            }
        }
    }
}

enum Num {
    I(i64, i64),
    F(f64, f64),
}

fn nums(a: &Value, b: &Value) -> Option<Num> {
    let f = |v: &Value| match v {
        Value::Int(i) => Some(*i as f64),
        Value::Float(x) => Some(*x),
        _ => None,
    };
    if let (Value::Int(x), Value::Int(y)) = (a, b) {
        return Some(Num::I(*x, *y));
    }
    Some(Num::F(f(a)?, f(b)?))
}

fn binary(op: BinOp, a: Value, b: Value) -> Result<Value, RefError> {
    use BinOp::*;
    if matches!(op, And | Or) {
        return match (a, b) {
            (Value::Bool(x), Value::Bool(y)) => Ok(Value::Bool(if op == And { x & y } else { x | y })),
            _ => fail("TypeMismatch", op.symbol()),
        };
    }
    if matches!(op, Eq | Ne) {
        let same = match nums(&a, &b) {
            Some(Num::I(x, y)) => x == y,
            Some(Num::F(x, y)) => x == y,
            None => match (&a, &b) {
                (Value::Bool(x), Value::Bool(y)) => x == y,
                (Value::Str(x), Value::Str(y)) => x == y,
                (Value::FloatArray(x), Value::FloatArray(y)) => {
                    x.len() == y.len() && x.iter().zip(y).all(|(p, q)| p == q)
                }
                _ => return fail("TypeMismatch", op.symbol()),
            },
        };
        return Ok(Value::Bool(same == (op == Eq)));
    }
    let Some(n) = nums(&a, &b) else {
        return fail("TypeMismatch", op.symbol());
    };
    match n {
        Num::I(x, y) => {
            let r = match op {
                Lt => return Ok(Value::Bool(x < y)),
                Le => return Ok(Value::Bool(x <= y)),
                Gt => return Ok(Value::Bool(x > y)),
                Ge => return Ok(Value::Bool(x >= y)),
                Add => x as i128 + y as i128,
                Sub => x as i128 - y as i128,
                Mul => x as i128 * y as i128,
                Div | Rem if y == 0 => return fail("DivisionByZero", ""),
                Div => x as i128 / y as i128,
                Rem => x as i128 % y as i128,
                And | Or | Eq | Ne => unreachable!(),
            };
            match i64::try_from(r) {
                Ok(v) => Ok(Value::Int(v)),
                Err(_) => fail("Overflow", op.symbol()),
            }
        }
        Num::F(x, y) => {
            let r = match op {
                Lt => return Ok(Value::Bool(x < y)),
                Le => return Ok(Value::Bool(x <= y)),
                Gt => return Ok(Value::Bool(x > y)),
                Ge => return Ok(Value::Bool(x >= y)),
                Add => x + y,
                Sub => x - y,
                Mul => x * y,
                Div | Rem if y == 0.0 => return fail("DivisionByZero", ""),
                Div => x / y,
                Rem => x % y,
                And | Or | Eq | Ne => unreachable!(),
            };
            if r.is_finite() {
                Ok(Value::Float(r))
            } else {
                fail("Overflow", op.symbol())
            }
        }
    }
}

fn interp<'a>(geer: &'a Geer, procs: &'a ProcedureRegistry, trace: bool) -> Interp<'a> {
    Interp {
        geer,
        procs,
        chain: Vec::new(),
        on_chain: HashSet::new(),
        max_depth: REF_MAX_DEPTH,
        trace: trace.then(BTreeSet::new),
        proc_env: Warehouse::new(),
    }
}

/// Value of identifier `name` at `ctx`.
pub fn reference_eval(geer: &Geer, name: &str, ctx: &Context, procs: &ProcedureRegistry) -> Result<Value, RefError> {
    interp(geer, procs, false).ident(name, ctx)
}

/// [`reference_eval`] with a demand chain limit other than
/// [`REF_MAX_DEPTH`].
pub fn reference_eval_limited(
    geer: &Geer,
    name: &str,
    ctx: &Context,
    procs: &ProcedureRegistry,
    max_depth: usize,
) -> Result<Value, RefError> {
    let mut it = interp(geer, procs, false);
    it.max_depth = max_depth;
    it.ident(name, ctx)
}

/// Value of the root expression at `ctx`.
pub fn reference_eval_root(geer: &Geer, ctx: &Context, procs: &ProcedureRegistry) -> Result<Value, RefError> {
    let mut local = Context::empty();
    for (d, t) in ctx.iter() {
        if geer.dimensions.contains(d) {
            local = local.with(d, t);
        }
    }
    interp(geer, procs, false).eval(&geer.root, &local)
}

/// Like [`reference_eval`], also returning how many distinct intensional
/// signatures the evaluation touched.
pub fn reference_eval_traced(
    geer: &Geer,
    name: &str,
    ctx: &Context,
    procs: &ProcedureRegistry,
) -> (Result<Value, RefError>, usize) {
    let mut it = interp(geer, procs, true);
    let r = it.ident(name, ctx);
    (r, it.trace.map_or(0, |t| t.len()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lang::compile;

    #[test]
    fn fibonacci_distinct_signatures() {
        let src =
            "fib where dimension n; fib = if #.n <= 1 then #.n else (fib @.n (#.n - 1)) + (fib @.n (#.n - 2)); end";
        let g = compile(src, "f").unwrap();
        let ctx = Context::empty().with("n", 15);
        let (v, distinct) = reference_eval_traced(&g, "fib", &ctx, &ProcedureRegistry::new());
        assert_eq!(v, Ok(Value::Int(610)));
        assert_eq!(distinct, 16);
    }

    #[test]
    fn errors_use_shared_class_names() {
        let g = compile("x where x = y; y = x; end", "c").unwrap();
        let e = reference_eval(&g, "x", &Context::empty(), &ProcedureRegistry::new()).unwrap_err();
        assert_eq!(e.code, "CircularDemand");
        let g = compile("1 % 0", "z").unwrap();
        let e = reference_eval_root(&g, &Context::empty(), &ProcedureRegistry::new()).unwrap_err();
        assert_eq!(e.code, "DivisionByZero");
    }
}
