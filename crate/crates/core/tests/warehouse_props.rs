use std::collections::{HashMap, HashSet};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::time::{Duration, Instant};

use eduction_core::clock::{Clock, ManualClock};
use eduction_core::warehouse::StoreEntry;
use eduction_core::{
    Demand, DemandKind, DemandSignature, DemandState, KindSet, StoreError, StoreHandle, Value, Warehouse,
};
use parking_lot::Mutex;
use proptest::prelude::*;

fn sig(n: i64) -> DemandSignature {
    DemandSignature::procedural("w", "twice", vec![Value::Int(n)])
}

fn procedural() -> KindSet {
    KindSet::of(&[DemandKind::Procedural])
}

#[test]
fn sixteen_claimers_share_a_thousand_demands() {
    let wh = Arc::new(Warehouse::new());
    for n in 0..1000 {
        wh.deposit(&Demand::pending(sig(n))).unwrap();
    }
    let held: Arc<Mutex<HashSet<Vec<u8>>>> = Arc::default();
    let (claims, fulfills, conflicts) =
        (Arc::new(AtomicU64::new(0)), Arc::new(AtomicU64::new(0)), Arc::new(AtomicU64::new(0)));
    let start = Instant::now();
    let threads: Vec<_> = (0..16)
        .map(|t| {
            let (wh, held) = (Arc::clone(&wh), Arc::clone(&held));
            let (claims, fulfills, conflicts) = (Arc::clone(&claims), Arc::clone(&fulfills), Arc::clone(&conflicts));
            std::thread::spawn(move || {
                let me = format!("c{t}");
                while let Some(d) = wh.claim(&me, procedural(), 60_000).unwrap() {
                    claims.fetch_add(1, Ordering::SeqCst);
                    assert!(held.lock().insert(d.signature.key()), "{} handed out twice", d.signature);
                    let n = d.signature.args[0].as_int().unwrap();
                    match wh.fulfill(&d.signature, &Value::Int(2 * n), &me) {
                        Ok(()) => fulfills.fetch_add(1, Ordering::SeqCst),
                        Err(StoreError::ConflictingResult) => conflicts.fetch_add(1, Ordering::SeqCst),
                        Err(e) => panic!("{e}"),
                    };
                }
            })
        })
        .collect();
    for t in threads {
        t.join().unwrap();
    }
    assert_eq!(claims.load(Ordering::SeqCst), 1000);
    assert_eq!(fulfills.load(Ordering::SeqCst), 1000);
    assert_eq!(conflicts.load(Ordering::SeqCst), 0);
    assert!(start.elapsed() < Duration::from_secs(10));
    let s = wh.stats().unwrap();
    assert_eq!((s.computed, s.pending, s.in_process), (1000, 0, 0));
    for n in 0..1000 {
        assert_eq!(wh.fetch(&sig(n)).unwrap(), (DemandState::Computed, Some(Value::Int(2 * n))));
    }
}

#[derive(Debug, Clone)]
enum Op {
    Deposit(i64),
    Claim(u8),
    Fulfill(i64, u8, i64),
    Advance(u64),
    Sweep,
    Fetch(i64),
}

fn op() -> impl Strategy<Value = Op> {
    prop_oneof![
        3 => (0..6i64).prop_map(Op::Deposit),
        3 => (0..3u8).prop_map(Op::Claim),
        3 => (0..6i64, 0..3u8, 0..2i64).prop_map(|(n, w, v)| Op::Fulfill(n, w, v)),
        1 => (0..3000u64).prop_map(Op::Advance),
        1 => Just(Op::Sweep),
        1 => (0..6i64).prop_map(Op::Fetch),
    ]
}

fn allowed(from: DemandState, to: DemandState) -> bool {
    use DemandState::*;
    from == to || matches!((from, to), (Pending, InProcess) | (InProcess, Computed) | (InProcess, Pending))
}

fn snapshot(wh: &Warehouse) -> HashMap<i64, StoreEntry> {
    (0..6).filter_map(|n| wh.entry(&sig(n)).map(|e| (n, e))).collect()
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 400, ..ProptestConfig::default() })]

    #[test]
    fn entries_follow_the_state_machine(ops in proptest::collection::vec(op(), 1..60)) {
        let clock = ManualClock::new(1);
        let wh = Warehouse::with_clock(clock.clone());
        let mut before = snapshot(&wh);
        let mut fulfilled: HashSet<i64> = HashSet::new();
        for op in &ops {
            match op {
                Op::Deposit(n) => { wh.deposit(&Demand::pending(sig(*n))).unwrap(); }
                Op::Claim(w) => { wh.claim(&format!("w{w}"), procedural(), 1000).unwrap(); }
                Op::Fulfill(n, w, v) => {
                    if wh.fulfill(&sig(*n), &Value::Int(*v), &format!("w{w}")).is_ok() {
                        fulfilled.insert(*n);
                    }
                }
                Op::Advance(ms) => clock.advance(*ms),
                Op::Sweep => { wh.sweep_expired_leases(clock.now_ms()); }
                Op::Fetch(n) => { let _ = wh.fetch(&sig(*n)); }
            }
            let after = snapshot(&wh);
            let leased = after.values().filter(|e| e.demand.state == DemandState::InProcess).count();
            let s = wh.stats().unwrap();
            prop_assert_eq!(s.in_process as usize, leased);
            prop_assert_eq!((s.computed + s.pending + s.in_process) as usize, after.len());
            for (n, old) in &before {
                let new = &after[n];
                prop_assert!(allowed(old.demand.state, new.demand.state), "{:?} -> {:?}", old.demand.state, new.demand.state);
                if old.demand.state == DemandState::Computed {
                    prop_assert_eq!(&old.demand.result, &new.demand.result);
                }
            }
            before = after;
        }
        let computed: HashSet<i64> = before
            .iter()
            .filter(|(_, e)| e.demand.state == DemandState::Computed)
            .map(|(n, _)| *n)
            .collect();
        prop_assert_eq!(computed, fulfilled);
        prop_assert_eq!(wh.stats().unwrap().computed as usize, before.values().filter(|e| e.demand.state == DemandState::Computed).count());
    }
}

#[test]
fn completion_is_idempotent() {
    let wh = Warehouse::new();
    let s = sig(7);
    wh.deposit(&Demand::pending(s.clone())).unwrap();
    wh.claim("a", procedural(), 5000).unwrap().unwrap();
    wh.fulfill(&s, &Value::Int(14), "a").unwrap();
    wh.fulfill(&s, &Value::Int(14), "b").unwrap();
    assert_eq!(wh.fulfill(&s, &Value::Int(15), "a"), Err(StoreError::ConflictingResult));
    assert_eq!(wh.fetch(&s).unwrap().1, Some(Value::Int(14)));
    assert_eq!(wh.stats().unwrap().computed, 1);
}

#[test]
fn expired_lease_is_redelivered_to_another_claimer() {
    let clock = ManualClock::new(0);
    let wh = Warehouse::with_clock(clock.clone());
    let s = sig(1);
    wh.deposit(&Demand::pending(s.clone())).unwrap();
    assert!(wh.claim("dead", procedural(), 5000).unwrap().is_some());
    assert!(wh.claim("live", procedural(), 5000).unwrap().is_none());
    clock.advance(5001);
    assert_eq!(wh.sweep_expired_leases(5001), 1);
    let again = wh.claim("live", procedural(), 5000).unwrap().unwrap();
    assert_eq!(again.attempts, 1);
    assert_eq!(wh.fulfill(&s, &Value::Int(2), "dead"), Err(StoreError::NotClaimed));
    wh.fulfill(&s, &Value::Int(2), "live").unwrap();
    assert_eq!(wh.stats().unwrap().redeliveries, 1);
}

#[test]
fn sweeper_thread_redelivers_on_the_real_clock() {
    let wh = Arc::new(Warehouse::new());
    let _sweeper = wh.spawn_sweeper(Duration::from_millis(10));
    wh.deposit(&Demand::pending(sig(3))).unwrap();
    wh.claim("gone", procedural(), 30).unwrap().unwrap();
    let deadline = Instant::now() + Duration::from_secs(5);
    let d = loop {
        if let Some(d) = wh.claim("next", procedural(), 5000).unwrap() {
            break d;
        }
        assert!(Instant::now() < deadline, "lease never expired");
        std::thread::sleep(Duration::from_millis(5));
    };
    assert_eq!(d.signature, sig(3));
}

#[test]
fn claims_are_fifo_within_a_kind() {
    let clock = ManualClock::new(0);
    let wh = Warehouse::with_clock(clock.clone());
    for n in [5, 3, 9, 1] {
        wh.deposit(&Demand::pending(sig(n))).unwrap();
        clock.advance(1);
    }
    let order: Vec<i64> = std::iter::from_fn(|| wh.claim("w", procedural(), 100).unwrap())
        .map(|d| d.signature.args[0].as_int().unwrap())
        .collect();
    assert_eq!(order, vec![5, 3, 9, 1]);
}

#[test]
fn log_replay_restores_every_state() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("dst.log");
    let clock = ManualClock::new(0);
    {
        let wh = Warehouse::open(&path, clock.clone()).unwrap();
        for n in 0..3 {
            wh.deposit(&Demand::pending(sig(n))).unwrap();
        }
        wh.claim("w", procedural(), 1000).unwrap().unwrap();
        wh.fulfill(&sig(0), &Value::Int(0), "w").unwrap();
        wh.put_resource("model:m@1", b"abc").unwrap();
    }
    let wh = Warehouse::open(&path, clock).unwrap();
    assert_eq!(wh.fetch(&sig(0)).unwrap(), (DemandState::Computed, Some(Value::Int(0))));
    assert_eq!(wh.fetch(&sig(1)).unwrap().0, DemandState::Pending);
    assert_eq!(wh.get_resource("model:m@1").unwrap(), b"abc");
    let s = wh.stats().unwrap();
    assert_eq!((s.computed, s.pending), (1, 2));
}
