use std::collections::BTreeMap;

use eduction_core::eval::{EvalConfig, Evaluator};
use eduction_core::lang::pretty::program_to_source;
use eduction_core::lang::random::{declared_dims, random_program, Shape};
use eduction_core::lang::{compile, Geer};
use eduction_core::reference::{reference_eval, reference_eval_limited, reference_eval_traced};
use eduction_core::worker::ProcedureRegistry;
use eduction_core::{Context, Value, Warehouse};

fn contexts(dims: &[String], max_tag: i64) -> Vec<Context> {
    let mut out = vec![Context::empty()];
    for d in dims {
        out = out.into_iter().flat_map(|c| (0..=max_tag).map(move |t| c.with(d, t))).collect();
    }
    out
}

// Runaway descents are common in random programs; a short chain limit
// keeps each of them cheap while still exercising DepthExceeded.
const DEPTH: usize = 64;

fn limited() -> EvalConfig {
    EvalConfig { max_depth: DEPTH, ..Default::default() }
}

/// Up to `n` contexts over `dims`, spread over the tag range.
fn some_contexts(dims: &[String], max_tag: i64, n: usize, seed: u64) -> Vec<Context> {
    let all = contexts(dims, max_tag);
    let step = (all.len() / n).max(1);
    let offset = seed as usize % step;
    all.into_iter().skip(offset).step_by(step).take(n).collect()
}

fn same(a: &Value, b: &Value) -> bool {
    match (a, b) {
        (Value::Float(x), Value::Float(y)) => x == y || (x - y).abs() <= 1e-12 * x.abs().max(y.abs()),
        _ => a == b,
    }
}

fn names(g: &Geer) -> Vec<String> {
    g.dictionary.keys().cloned().collect()
}

#[test]
fn evaluator_matches_reference_on_random_programs() {
    let shape = Shape::default();
    let reg = ProcedureRegistry::new();
    let mut outcomes: BTreeMap<String, usize> = BTreeMap::new();
    for seed in 0..600u64 {
        let program = random_program(seed, &shape);
        let geer = compile(&program_to_source(&program), &format!("p{seed}")).unwrap();
        let wh = Warehouse::new();
        let mut ev = Evaluator::new(&wh, limited());
        for ctx in some_contexts(&declared_dims(&program), shape.max_tag, 4, seed) {
            for name in names(&geer) {
                let got = ev.eval_demand(&geer, &name, &ctx);
                let want = reference_eval_limited(&geer, &name, &ctx, &reg, DEPTH);
                match (&got, &want) {
                    (Ok(a), Ok(b)) => assert!(same(a, b), "seed {seed} {name} {ctx}: {a} vs {b}"),
                    (Err(a), Err(b)) => assert_eq!(a.code(), b.code, "seed {seed} {name} {ctx}"),
                    _ => panic!("seed {seed} {name} {ctx}: {got:?} vs {want:?}"),
                }
                let class = match &got {
                    Ok(v) => v.type_name().to_owned(),
                    Err(e) => e.code().to_owned(),
                };
                *outcomes.entry(class).or_default() += 1;
            }
        }
    }
    // the generator must exercise values and errors alike
    assert!(outcomes.get("Int").copied().unwrap_or(0) > 100, "{outcomes:?}");
    assert!(outcomes.get("Float").copied().unwrap_or(0) > 100, "{outcomes:?}");
    assert!(outcomes.get("Bool").copied().unwrap_or(0) > 20, "{outcomes:?}");
    assert!(outcomes.get("TypeMismatch").copied().unwrap_or(0) > 20, "{outcomes:?}");
    assert!(outcomes.get("CircularDemand").copied().unwrap_or(0) > 20, "{outcomes:?}");
    assert!(outcomes.get("DepthExceeded").copied().unwrap_or(0) > 5, "{outcomes:?}");
    println!("{outcomes:?}");
}

#[test]
fn warehouse_toggle_changes_only_the_counter() {
    let shape = Shape::default();
    for seed in 1000..1300u64 {
        let program = random_program(seed, &shape);
        let geer = compile(&program_to_source(&program), "m").unwrap();
        let (a, b) = (Warehouse::new(), Warehouse::new());
        let mut on = Evaluator::new(&a, limited());
        let mut off = Evaluator::new(&b, EvalConfig { warehouse_enabled: false, ..limited() });
        for ctx in some_contexts(&declared_dims(&program), shape.max_tag, 4, seed) {
            let x = on.eval_demand(&geer, "x0", &ctx);
            let y = off.eval_demand(&geer, "x0", &ctx);
            match (&x, &y) {
                (Ok(p), Ok(q)) => assert!(same(p, q), "seed {seed}"),
                (Err(p), Err(q)) => assert_eq!(p.code(), q.code(), "seed {seed}"),
                _ => panic!("seed {seed}: {x:?} vs {y:?}"),
            }
        }
        assert!(on.computation_counter() <= off.computation_counter());
    }
}

#[test]
fn each_signature_is_computed_at_most_once() {
    let shape = Shape::default();
    let reg = ProcedureRegistry::new();
    let mut checked = 0;
    for seed in 2000..2400u64 {
        let program = random_program(seed, &shape);
        let geer = compile(&program_to_source(&program), "s").unwrap();
        let ctx = Context::empty();
        let wh = Warehouse::new();
        let mut ev = Evaluator::new(&wh, EvalConfig::default());
        if ev.eval_demand(&geer, "x0", &ctx).is_err() {
            continue;
        }
        let (_, distinct) = reference_eval_traced(&geer, "x0", &ctx, &reg);
        assert_eq!(ev.computation_counter(), distinct as u64, "seed {seed}");
        ev.eval_demand(&geer, "x0", &ctx).unwrap();
        assert_eq!(ev.computation_counter(), distinct as u64, "seed {seed}");
        checked += 1;
    }
    assert!(checked > 100);
}

const FACT: &str = "fact where dimension d; fact = if #.d == 0 then 1 else #.d * (fact @.d (#.d - 1)); end";
const FIB: &str = "fib where dimension d; \
    fib = if #.d <= 1 then #.d else (fib @.d (#.d - 1)) + (fib @.d (#.d - 2)); end";

#[test]
fn warehouse_economy_counts() {
    let reg = ProcedureRegistry::new();
    let d20 = Context::empty().with("d", 20);

    let fact = compile(FACT, "fact").unwrap();
    let wh = Warehouse::new();
    let mut ev = Evaluator::new(&wh, EvalConfig::default());
    assert_eq!(ev.eval_demand(&fact, "fact", &d20), Ok(Value::Int(2_432_902_008_176_640_000)));
    let (want, distinct) = reference_eval_traced(&fact, "fact", &d20, &reg);
    assert_eq!(want, Ok(Value::Int(2_432_902_008_176_640_000)));
    assert_eq!((ev.computation_counter(), distinct), (21, 21));
    ev.reset_counter();
    ev.eval_demand(&fact, "fact", &d20).unwrap();
    assert_eq!(ev.computation_counter(), 0);
    ev.clear_cache();
    ev.eval_demand(&fact, "fact", &Context::empty().with("d", 5)).unwrap();
    assert_eq!(ev.computation_counter(), 0, "warehouse still holds fact at d <= 20");

    let fib = compile(FIB, "fib").unwrap();
    let wh = Warehouse::new();
    let mut ev = Evaluator::new(&wh, EvalConfig::default());
    assert_eq!(ev.eval_demand(&fib, "fib", &d20), Ok(Value::Int(6765)));
    let (_, distinct) = reference_eval_traced(&fib, "fib", &d20, &reg);
    assert_eq!((ev.computation_counter(), distinct), (21, 21));
}

#[test]
fn small_programs() {
    let reg = ProcedureRegistry::new();
    let g = compile("42", "c").unwrap();
    let wh = Warehouse::new();
    let mut ev = Evaluator::new(&wh, EvalConfig::default());
    assert_eq!(ev.eval_root(&g, &Context::empty()), Ok(Value::Int(42)));
    assert_eq!(eduction_core::reference::reference_eval_root(&g, &Context::empty(), &reg), Ok(Value::Int(42)));
    let fact = compile(FACT, "fact").unwrap();
    assert_eq!(reference_eval(&fact, "fact", &Context::empty().with("d", 5), &reg), Ok(Value::Int(120)));
}
