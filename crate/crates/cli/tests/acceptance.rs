//! End-to-end acceptance checks. Each criterion prints one PASS or FAIL
//! line; the process exits non-zero if any fails.

use std::collections::HashSet;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::process::Command;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use eduction_client::{connect_gmt, TcpStore};
use eduction_core::clock::ManualClock;
use eduction_core::codec;
use eduction_core::eval::{EvalConfig, Evaluator};
use eduction_core::lang::compile;
use eduction_core::lang::pretty::program_to_source;
use eduction_core::lang::random::{declared_dims, random_program, Shape};
use eduction_core::manager::{live_tiers, TierHandle, TierKind, TierState};
use eduction_core::pipeline::{
    corpus, run_pipeline_distributed, run_pipeline_local, top1_hits, Labeled, Mode, Outcome, PipelineConfig, ResultSet,
    TrainingSet,
};
use eduction_core::reference::{reference_eval_limited, reference_eval_traced};
use eduction_core::tiers::{dwt_tier, LoopSettings};
use eduction_core::transport::frame::{decode_all, encode_frame, HEADER_LEN};
use eduction_core::transport::{inproc_store, Frame, Request, Service};
use eduction_core::worker::{register_math, run_worker, ProcedureRegistry, WorkerConfig, WorkerControl};
use eduction_core::{
    Context, Demand, DemandKind, DemandSignature, DemandState, DepositOutcome, KindSet, StoreError, StoreHandle,
    StoreStats, Value, Warehouse,
};
use eduction_server::{FrameServer, Node, NodeOptions};
use proptest::strategy::{Strategy, ValueTree};
use proptest::test_runner::{Config as PropConfig, TestRunner};

type Outcome_ = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome_);

fn ensure(ok: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg())
    }
}

// ---------------------------------------------------------------- 1

fn same_value(a: &Value, b: &Value) -> bool {
    match (a, b) {
        (Value::Float(x), Value::Float(y)) => x == y || (x - y).abs() <= 1e-12 * x.abs().max(y.abs()),
        _ => a == b,
    }
}

fn contexts(dims: &[String], max_tag: i64) -> Vec<Context> {
    let mut out = vec![Context::empty()];
    for d in dims {
        out = out.into_iter().flat_map(|c| (0..=max_tag).map(move |t| c.with(d, t))).collect();
    }
    out
}

fn eduction_matches_reference() -> Outcome_ {
    const DEPTH: usize = 64;
    let start = Instant::now();
    let shape = Shape::default();
    let reg = ProcedureRegistry::new();
    let cfg = EvalConfig { max_depth: DEPTH, ..EvalConfig::default() };
    let (mut programs, mut demands, mut values) = (0, 0, 0);
    for seed in 0..600u64 {
        let program = random_program(seed, &shape);
        let geer =
            compile(&program_to_source(&program), &format!("p{seed}")).map_err(|e| format!("seed {seed}: {e}"))?;
        let wh = Warehouse::new();
        let mut ev = Evaluator::new(&wh, cfg);
        let all = contexts(&declared_dims(&program), shape.max_tag);
        let step = (all.len() / 4).max(1);
        for ctx in all.into_iter().step_by(step).take(4) {
            for name in geer.dictionary.keys() {
                let got = ev.eval_demand(&geer, name, &ctx);
                let want = reference_eval_limited(&geer, name, &ctx, &reg, DEPTH);
                match (&got, &want) {
                    (Ok(a), Ok(b)) => {
                        ensure(same_value(a, b), || format!("seed {seed} {name} at {ctx}: {a} vs {b}"))?;
                        values += 1;
                    }
                    (Err(a), Err(b)) => {
                        ensure(a.code() == b.code, || format!("seed {seed} {name}: {a} vs {}", b.code))?
                    }
                    _ => return Err(format!("seed {seed} {name} at {ctx}: {got:?} vs {want:?}")),
                }
                demands += 1;
            }
        }
        programs += 1;
    }
    let t = start.elapsed();
    ensure(t < Duration::from_secs(60), || format!("took {t:?}"))?;
    Ok(format!("{programs} programs, {demands} demands ({values} values) agree in {:.1}s", t.as_secs_f64()))
}

// ---------------------------------------------------------------- 2

const FACT: &str = "fact where dimension d; fact = if #.d == 0 then 1 else #.d * (fact @.d (#.d - 1)); end";
const FIB: &str =
    "fib where dimension d; fib = if #.d <= 1 then #.d else (fib @.d (#.d - 1)) + (fib @.d (#.d - 2)); end";

fn warehouse_economy() -> Outcome_ {
    let reg = ProcedureRegistry::new();
    let d20 = Context::empty().with("d", 20);
    let mut counts = Vec::new();
    for (src, id, want) in [(FACT, "fact", 2_432_902_008_176_640_000), (FIB, "fib", 6765)] {
        let g = compile(src, id).map_err(|e| e.to_string())?;
        let wh = Warehouse::new();
        let mut ev = Evaluator::new(&wh, EvalConfig::default());
        let v = ev.eval_demand(&g, id, &d20).map_err(|e| e.to_string())?;
        ensure(v == Value::Int(want), || format!("{id}(20) = {v}"))?;
        let (_, distinct) = reference_eval_traced(&g, id, &d20, &reg);
        let cold = ev.computation_counter();
        ensure(cold == 21 && distinct == 21, || format!("{id}: {cold} computations, {distinct} reachable signatures"))?;
        ev.reset_counter();
        ev.eval_demand(&g, id, &d20).map_err(|e| e.to_string())?;
        ensure(ev.computation_counter() == 0, || format!("{id} repeat computed {}", ev.computation_counter()))?;
        counts.push(format!("{id}: cold {cold}, repeat 0"));
    }
    Ok(counts.join("; "))
}

// ---------------------------------------------------------------- 3

fn claim_exclusivity() -> Outcome_ {
    let sig = |n: i64| DemandSignature::procedural("x", "twice", vec![Value::Int(n)]);
    let wh = Arc::new(Warehouse::new());
    for n in 0..1000 {
        wh.deposit(&Demand::pending(sig(n))).map_err(|e| e.to_string())?;
    }
    let held: Arc<Mutex<HashSet<Vec<u8>>>> = Arc::default();
    let counters: Arc<[AtomicU64; 4]> = Arc::new(Default::default());
    let start = Instant::now();
    let threads: Vec<_> = (0..16)
        .map(|t| {
            let (wh, held, c) = (wh.clone(), held.clone(), counters.clone());
            std::thread::spawn(move || {
                let me = format!("c{t}");
                let kinds = KindSet::of(&[DemandKind::Procedural]);
                while let Ok(Some(d)) = wh.claim(&me, kinds, 60_000) {
                    c[0].fetch_add(1, Ordering::SeqCst);
                    if !held.lock().unwrap().insert(d.signature.key()) {
                        c[3].fetch_add(1, Ordering::SeqCst);
                    }
                    let n = d.signature.args[0].as_int().unwrap_or(0);
                    match wh.fulfill(&d.signature, &Value::Int(2 * n), &me) {
                        Ok(()) => c[1].fetch_add(1, Ordering::SeqCst),
                        Err(StoreError::ConflictingResult) => c[2].fetch_add(1, Ordering::SeqCst),
                        Err(_) => 0,
                    };
                }
            })
        })
        .collect();
    for t in threads {
        t.join().map_err(|_| "claimer panicked".to_owned())?;
    }
    let t = start.elapsed();
    let [claims, fulfills, conflicts, doubles] = [0, 1, 2, 3].map(|i| counters[i].load(Ordering::SeqCst));
    ensure(claims == 1000 && fulfills == 1000 && conflicts == 0 && doubles == 0, || {
        format!("claims {claims}, fulfills {fulfills}, conflicts {conflicts}, double hand-outs {doubles}")
    })?;
    ensure(t < Duration::from_secs(10), || format!("took {t:?}"))?;
    Ok(format!("16 claimers: 1000 claims, 1000 fulfills, 0 conflicts in {:.2}s", t.as_secs_f64()))
}

// ---------------------------------------------------------------- 4

/// Passes everything through and arms a crash on `victim` once `at`
/// fulfills have gone by.
struct Tripwire {
    inner: Arc<Warehouse>,
    fulfills: AtomicU64,
    at: u64,
    victim: Arc<WorkerControl>,
}

impl StoreHandle for Tripwire {
    fn deposit(&self, d: &Demand) -> Result<DepositOutcome, StoreError> {
        self.inner.deposit(d)
    }
    fn claim(&self, w: &str, k: KindSet, l: u64) -> Result<Option<Demand>, StoreError> {
        self.inner.claim(w, k, l)
    }
    fn fulfill(&self, s: &DemandSignature, v: &Value, w: &str) -> Result<(), StoreError> {
        self.inner.fulfill(s, v, w)?;
        if self.fulfills.fetch_add(1, Ordering::SeqCst) + 1 == self.at {
            self.victim.crash_holding_next_claim();
        }
        Ok(())
    }
    fn fetch(&self, s: &DemandSignature) -> Result<(DemandState, Option<Value>), StoreError> {
        self.inner.fetch(s)
    }
    fn await_result(&self, s: &DemandSignature, t: u64) -> Result<Value, StoreError> {
        self.inner.await_result(s, t)
    }
    fn put_resource(&self, id: &str, b: &[u8]) -> Result<(), StoreError> {
        self.inner.put_resource(id, b)
    }
    fn get_resource(&self, id: &str) -> Result<Vec<u8>, StoreError> {
        self.inner.get_resource(id)
    }
    fn stats(&self) -> Result<StoreStats, StoreError> {
        self.inner.stats()
    }
}

fn fault_demands() -> Vec<DemandSignature> {
    (0..200)
        .map(|i: i64| match i % 3 {
            0 => DemandSignature::procedural("ft", "square", vec![Value::Int(i - 100)]),
            1 => DemandSignature::procedural("ft", "add2", vec![Value::Int(i), Value::Float(i as f64 / 7.0)]),
            _ => DemandSignature::procedural(
                "ft",
                "sum",
                vec![Value::FloatArray((0..i).map(|k| k as f64 * 0.25).collect())],
            ),
        })
        .collect()
}

fn run_fault_scenario(workers: usize, crash_at: Option<u64>) -> Result<(Vec<Vec<u8>>, StoreStats, bool), String> {
    let wh = Arc::new(Warehouse::new());
    let _sweeper = wh.spawn_sweeper(Duration::from_millis(500));
    let sigs = fault_demands();
    for s in &sigs {
        wh.deposit(&Demand::pending(s.clone())).map_err(|e| e.to_string())?;
    }
    let mut reg = ProcedureRegistry::new();
    register_math(&mut reg).map_err(|e| e.to_string())?;
    let reg = Arc::new(reg);
    let controls: Vec<_> = (0..workers).map(|_| WorkerControl::new()).collect();
    let store = Arc::new(Tripwire {
        inner: wh.clone(),
        fulfills: AtomicU64::new(0),
        at: crash_at.unwrap_or(0),
        victim: controls[0].clone(),
    });
    let handles: Vec<_> = controls
        .iter()
        .enumerate()
        .map(|(i, c)| {
            let (store, reg, c) = (store.clone(), reg.clone(), c.clone());
            let cfg = WorkerConfig { lease_ms: 5000, poll_interval_ms: 5, ..WorkerConfig::new(format!("dwt{i}")) };
            std::thread::spawn(move || run_worker(&cfg, &*store, &reg, &c))
        })
        .collect();
    let mut out = Vec::new();
    for s in &sigs {
        let v = wh.await_result(s, 30_000).map_err(|e| format!("{s}: {e}"))?;
        out.push(codec::encode_value(&v));
    }
    for c in &controls {
        c.stop();
    }
    let mut crashed = false;
    for h in handles {
        crashed |= h.join().map_err(|_| "worker panicked".to_owned())?.map_err(|e| e.to_string())?.crashed;
    }
    Ok((out, wh.stats().map_err(|e| e.to_string())?, crashed))
}

fn fault_tolerance() -> Outcome_ {
    let (baseline, _, _) = run_fault_scenario(1, None)?;
    let start = Instant::now();
    let (results, stats, crashed) = run_fault_scenario(2, Some(50))?;
    let t = start.elapsed();
    ensure(crashed, || "the victim worker never crashed".into())?;
    ensure(results.len() == 200 && results == baseline, || "results differ from the single-worker baseline".into())?;
    ensure(stats.redeliveries >= 1, || "no redelivery recorded".into())?;
    ensure(t < Duration::from_secs(30), || format!("took {t:?}"))?;
    Ok(format!(
        "worker killed at fulfill 50; 200/200 results byte-identical to baseline; {} redelivery; {:.1}s",
        stats.redeliveries,
        t.as_secs_f64()
    ))
}

// ---------------------------------------------------------------- 5

fn scripted_requests() -> Vec<Request> {
    let sigs: Vec<DemandSignature> = (0..6)
        .map(|i| match i % 3 {
            0 => DemandSignature::intensional("c", "x", Context::empty().with("d", i)),
            1 => DemandSignature::procedural("c", "add2", vec![Value::Int(i), Value::Float(0.5)]),
            _ => DemandSignature::procedural(
                "c",
                "norm",
                vec![Value::FloatArray(vec![i as f64; 3]), Value::Str("ok".into())],
            ),
        })
        .collect();
    let all = KindSet::of(&[DemandKind::Intensional, DemandKind::Procedural]);
    (0..100usize)
        .map(|i| {
            let s = sigs[(i * 5 + i / 7) % sigs.len()].clone();
            let w = format!("w{}", i % 3);
            match i % 9 {
                0 | 4 => Request::Deposit(Demand::pending(s)),
                1 | 6 => Request::Claim { worker: w, kinds: all, lease_ms: 1000 },
                2 => Request::Fulfill { signature: s, value: Value::Int(i as i64), worker: w },
                3 => Request::Fetch(s),
                5 => Request::Await { signature: s, timeout_ms: 0 },
                7 if i % 2 == 0 => Request::ResourcePut { id: format!("model:m@{}", i % 4), bytes: vec![i as u8; 5] },
                7 => Request::ResourceGet { id: format!("model:m@{}", i % 4) },
                _ => Request::Stats,
            }
        })
        .collect()
}

fn carrier_equivalence() -> Outcome_ {
    let inproc = inproc_store(Arc::new(Warehouse::with_clock(ManualClock::new(1000))));
    let remote_wh: Arc<dyn StoreHandle> = Arc::new(Warehouse::with_clock(ManualClock::new(1000)));
    let server = FrameServer::start("127.0.0.1:0", Arc::new(Service::store(remote_wh))).map_err(|e| e.to_string())?;
    let tcp = TcpStore::new(server.local_addr().to_string());
    let script = scripted_requests();
    let mut errors = 0;
    for (i, r) in script.iter().enumerate() {
        let a: Frame = inproc.raw(r).map_err(|e| format!("#{i} inproc: {e}"))?;
        let b: Frame = tcp.raw(r).map_err(|e| format!("#{i} tcp: {e}"))?;
        ensure(a == b, || format!("request #{i} {r:?}: {a:?} vs {b:?}"))?;
        errors += usize::from(a.msg_type == eduction_core::transport::MsgType::Err);
    }
    let kinds: HashSet<_> = script.iter().map(|r| r.msg_type()).collect();
    ensure(kinds.len() >= 8, || format!("script covers only {} message types", kinds.len()))?;
    Ok(format!("{} requests over {} message types, identical replies ({errors} errors)", script.len(), kinds.len()))
}

// ---------------------------------------------------------------- 6 and 7

fn same_results(a: &[ResultSet], b: &[ResultSet]) -> bool {
    a.len() == b.len()
        && a.iter()
            .zip(b)
            .all(|(x, y)| x.len() == y.len() && x.iter().zip(y).all(|((s, d), (t, e))| s == t && (d - e).abs() <= 1e-9))
}

fn corpus_sets() -> (Vec<Labeled>, Vec<Labeled>) {
    corpus(4, 512, 1..=5, 6..=10)
}

fn local_results() -> Result<Vec<ResultSet>, String> {
    let (train, test) = corpus_sets();
    let mut model = TrainingSet::new();
    run_pipeline_local(8, &mut model, &train, Mode::Train).map_err(|e| e.to_string())?;
    run_pipeline_local(8, &mut model, &test, Mode::Classify).map_err(|e| e.to_string())
}

fn distributed_results(store: &dyn StoreHandle) -> Result<Vec<ResultSet>, String> {
    let (train, test) = corpus_sets();
    let cfg = PipelineConfig { windows: 8, ..PipelineConfig::default() };
    let Outcome::Trained { model_id, version, .. } =
        run_pipeline_distributed(store, &cfg, &train, Mode::Train, None).map_err(|e| e.to_string())?
    else {
        return Err("training did not return a model".into());
    };
    match run_pipeline_distributed(store, &cfg, &test, Mode::Classify, Some((&model_id, version))) {
        Ok(Outcome::Classified(r)) => Ok(r),
        Ok(_) => Err("classification did not return results".into()),
        Err(e) => Err(e.to_string()),
    }
}

fn pipeline_recognition() -> Outcome_ {
    let (_, test) = corpus_sets();
    let local = local_results()?;
    let wh = Arc::new(Warehouse::new());
    let reg = eduction_core::pipeline::standard_registry();
    let tier = dwt_tier(wh.clone(), reg, LoopSettings { workers: 2, poll_ms: 2, lease_ms: 5000 });
    tier.start().map_err(|e| e.to_string())?;
    let distributed = distributed_results(&*wh);
    tier.stop();
    let distributed = distributed?;
    let (l, d) = (top1_hits(&test, &local), top1_hits(&test, &distributed));
    ensure(l == 20 && d == 20, || format!("top-1 local {l}/20, distributed {d}/20"))?;
    ensure(same_results(&local, &distributed), || "local and distributed result sets differ".into())?;
    Ok("top-1 local 20/20, distributed 20/20, result sets equal within 1e-9".into())
}

fn eduction_cli(args: &[&str]) -> Result<String, String> {
    let o = Command::new(env!("CARGO_BIN_EXE_eduction"))
        .args(args)
        .env_remove("EDUCTION_CONFIG")
        .output()
        .map_err(|e| e.to_string())?;
    if !o.status.success() {
        return Err(format!("eduction {args:?}: {}", String::from_utf8_lossy(&o.stderr)));
    }
    Ok(String::from_utf8_lossy(&o.stdout).trim().to_owned())
}

fn cli_status(gmt: &str) -> Result<serde_json::Value, String> {
    serde_json::from_str(&eduction_cli(&["mgr", "--gmt", gmt, "status"])?).map_err(|e| e.to_string())
}

fn worker_node(gmt: &str, dst: &str, hb: u64) -> Result<Node, String> {
    let mut opts = NodeOptions::new(vec![]);
    opts.gmt = Some(gmt.to_owned());
    opts.dst = Some(dst.to_owned());
    opts.heartbeat_ms = hb;
    Node::start(opts).map_err(|e| e.to_string())
}

fn wait_until(limit: Duration, mut f: impl FnMut() -> Result<bool, String>) -> Result<(), String> {
    let start = Instant::now();
    while !f()? {
        if start.elapsed() > limit {
            return Err("timed out".into());
        }
        std::thread::sleep(Duration::from_millis(10));
    }
    Ok(())
}

fn topology_operations() -> Outcome_ {
    const HB: u64 = 200;
    let mut head = NodeOptions::new(vec![TierKind::Gmt, TierKind::Dst]);
    head.dst_port = 0;
    head.gmt_port = 0;
    head.heartbeat_ms = HB;
    let head = Node::start(head).map_err(|e| e.to_string())?;
    let dst = head.dst_addr().ok_or("no store address")?.to_string();
    let gmt = head.gmt_addr().ok_or("no manager address")?.to_string();
    let mut a = worker_node(&gmt, &dst, HB)?;
    let b = worker_node(&gmt, &dst, HB)?;
    let client = connect_gmt(&gmt);
    let tier = client.allocate(a.node_id(), "DWT", "workers=2,poll.ms=2").map_err(|e| e.to_string())?;
    wait_until(Duration::from_secs(5), || Ok(a.running_tiers().contains(&tier)))?;

    // run the pipeline and move the worker tier from A to B part-way
    let local = local_results()?;
    let store = TcpStore::new(dst.clone());
    let wh = head.warehouse().ok_or("head has no warehouse")?.clone();
    let (moved, results) = std::thread::scope(|s| {
        let run = s.spawn(|| distributed_results(&store));
        let moved = (|| {
            wait_until(Duration::from_secs(20), || Ok(wh.stats().map_err(|e| e.to_string())?.computed >= 30))?;
            let finished = run.is_finished();
            let id = eduction_cli(&["mgr", "--gmt", &gmt, "move", &tier.to_string(), &b.node_id().to_string()])?;
            Ok::<_, String>((id, finished))
        })();
        (moved, run.join().unwrap_or_else(|_| Err("pipeline thread panicked".into())))
    });
    let (new_tier, finished_early) = moved?;
    let results = results?;
    ensure(!finished_early, || "pipeline finished before the move".into())?;
    ensure(same_results(&local, &results), || "result sets changed across the move".into())?;
    let new_tier: u64 = new_tier.parse().map_err(|_| format!("move printed `{new_tier}`"))?;
    wait_until(Duration::from_secs(5), || Ok(b.running_tiers().contains(&new_tier)))?;
    std::thread::sleep(Duration::from_millis(HB * 2));
    let report = client.status().map_err(|e| e.to_string())?;
    let live = live_tiers(&report, TierKind::Dwt);
    let on_b = report.tier(new_tier).map(|t| (t.node_id, t.state));
    ensure(live.len() == 1 && on_b == Some((b.node_id(), TierState::Running)), || {
        format!("after move: live DWTs {live:?}, new tier {on_b:?}")
    })?;

    // silence node A and time the DEAD verdict through `mgr status`
    a.silence();
    let last = a.last_heartbeat().ok_or("node A never heartbeat")?;
    let node = a.node_id();
    let status_of = |v: &serde_json::Value| {
        v["nodes"]
            .as_array()
            .and_then(|ns| ns.iter().find(|n| n["id"] == node))
            .map(|n| n["status"].as_str().unwrap_or("").to_owned())
    };
    let mut seen_suspect = false;
    wait_until(Duration::from_millis(HB * 10), || {
        let st = status_of(&cli_status(&gmt)?);
        seen_suspect |= st.as_deref() == Some("SUSPECT");
        Ok(st.as_deref() == Some("DEAD"))
    })?;
    let after = last.elapsed().as_millis() as f64 / HB as f64;
    ensure((4.0..=6.0).contains(&after), || format!("DEAD after {after:.2} intervals"))?;
    ensure(seen_suspect, || "never reported SUSPECT before DEAD".into())?;
    Ok(format!(
        "DWT moved mid-run with unchanged result sets; DEAD reported {after:.2} intervals after the last heartbeat"
    ))
}

// ---------------------------------------------------------------- 8

fn round_trips<S: Strategy>(
    runner: &mut TestRunner,
    strategy: S,
    n: usize,
    check: impl Fn(&S::Value) -> bool,
) -> Result<(), String>
where
    S::Value: std::fmt::Debug,
{
    for _ in 0..n {
        let v = strategy.new_tree(runner).map_err(|e| e.to_string())?.current();
        ensure(check(&v), || format!("did not round-trip: {v:?}"))?;
    }
    Ok(())
}

fn rejected(wire: &[u8]) -> bool {
    match decode_all(wire) {
        Err(_) => true,
        Ok(frames) => frames.iter().any(|f| Request::decode(f.msg_type, &f.payload).is_err()),
    }
}

fn wire_round_trip() -> Outcome_ {
    use eduction_testkit as kit;
    let mut runner = TestRunner::new(PropConfig::default());
    const N: usize = 10_000;
    round_trips(&mut runner, kit::value(), N, |v| codec::decode_value(&codec::encode_value(v)).as_ref() == Ok(v))?;
    round_trips(&mut runner, kit::context(), N, |c| {
        codec::decode_context(&codec::encode_context(c)).as_ref() == Ok(c)
    })?;
    round_trips(&mut runner, kit::signature(), N, |s| {
        codec::decode_signature(&codec::encode_signature(s)).as_ref() == Ok(s)
    })?;
    round_trips(&mut runner, kit::demand(), N, |d| codec::decode_demand(&codec::encode_demand(d)).as_ref() == Ok(d))?;
    let requests = 200;
    let mut corruptions = 0u64;
    for _ in 0..requests {
        let r = kit::request().new_tree(&mut runner).map_err(|e| e.to_string())?.current();
        let (msg, payload) = r.encode();
        let wire = encode_frame(msg, &payload);
        ensure(!rejected(&wire), || format!("clean frame rejected: {r:?}"))?;
        for pos in 0..HEADER_LEN {
            for b in (0..=255u8).filter(|b| *b != wire[pos]) {
                let mut bad = wire.clone();
                bad[pos] = b;
                ensure(rejected(&bad), || format!("byte {pos} -> {b:#04x} accepted for {r:?}"))?;
                corruptions += 1;
            }
        }
    }
    Ok(format!("4 x {N} round trips; {corruptions} single-byte header corruptions over {requests} frames all rejected"))
}

// ----------------------------------------------------------------

fn main() {
    let criteria: [Criterion; 8] = [
        ("eduction matches the reference evaluator", eduction_matches_reference),
        ("warehouse economy", warehouse_economy),
        ("claim exclusivity", claim_exclusivity),
        ("fault tolerance", fault_tolerance),
        ("carrier equivalence", carrier_equivalence),
        ("pipeline recognition", pipeline_recognition),
        ("topology operations", topology_operations),
        ("wire round-trip", wire_round_trip),
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        if !filter.is_empty() && !filter.iter().any(|f| name.contains(f.as_str())) {
            continue;
        }
        let start = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|p| {
            Err(p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default())
        });
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("PASS criterion {} ({name}): {detail} [{secs:.1}s]", i + 1),
            Err(why) => {
                failed += 1;
                println!("FAIL criterion {} ({name}): {why} [{secs:.1}s]", i + 1);
            }
        }
    }
    if failed > 0 {
        std::process::exit(1);
    }
}
