use std::collections::BTreeMap;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;

use eduction_core::clock::ManualClock;
use eduction_core::manager::{
    Manager, ManagerError, NodeStatus, TierFactory, TierHandle, TierKind, TierState, DEFAULT_HEARTBEAT_MS,
};
use proptest::prelude::*;

struct Stub {
    kind: TierKind,
    running: AtomicBool,
}

impl TierHandle for Stub {
    fn kind(&self) -> TierKind {
        self.kind
    }
    fn start(&self) -> Result<(), ManagerError> {
        self.running.store(true, Ordering::SeqCst);
        Ok(())
    }
    fn stop(&self) {
        self.running.store(false, Ordering::SeqCst);
    }
    fn is_running(&self) -> bool {
        self.running.load(Ordering::SeqCst)
    }
}

struct StubFactory;

impl TierFactory for StubFactory {
    fn build(&self, kind: TierKind, _config: &str) -> Result<Box<dyn TierHandle>, ManagerError> {
        Ok(Box::new(Stub { kind, running: AtomicBool::new(false) }))
    }
}

fn topology(m: &Manager) -> BTreeMap<(String, String), usize> {
    let mut out = BTreeMap::new();
    for t in m.status_report().tiers {
        if t.kind != TierKind::Gmt && t.state != TierState::Stopped {
            *out.entry((t.kind.name().to_owned(), t.config.clone())).or_default() += 1;
        }
    }
    out
}

fn alloc() -> impl Strategy<Value = (usize, &'static str, String)> {
    (0..3usize, prop::sample::select(vec!["DGT", "DWT", "DST"]), "(workers=[1-4])?")
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 200, ..ProptestConfig::default() })]

    #[test]
    fn moves_conserve_topology(
        allocs in prop::collection::vec(alloc(), 1..8),
        moves in prop::collection::vec((any::<prop::sample::Index>(), 0..3usize), 0..20),
    ) {
        let clock = ManualClock::new(0);
        let m = Manager::new(clock, DEFAULT_HEARTBEAT_MS);
        let nodes: Vec<u64> = (0..3)
            .map(|i| m.register_local(&format!("10.0.0.{i}:4000"), Arc::new(StubFactory)).unwrap())
            .collect();
        for (n, kind, cfg) in &allocs {
            // a second DST is refused; that is fine here
            let _ = m.allocate(nodes[*n], kind, cfg);
        }
        let before = topology(&m);
        for (pick, dest) in &moves {
            let live: Vec<u64> = m
                .status_report()
                .tiers
                .iter()
                .filter(|t| t.kind != TierKind::Gmt && t.state != TierState::Stopped)
                .map(|t| t.tier_id)
                .collect();
            if live.is_empty() {
                break;
            }
            let id = live[pick.index(live.len())];
            let new_id = m.move_tier(id, nodes[*dest]).unwrap();
            let r = m.status_report();
            prop_assert_eq!(r.tier(id).unwrap().state, TierState::Stopped);
            prop_assert_eq!(r.tier(new_id).unwrap().node_id, nodes[*dest]);
            prop_assert_eq!(&topology(&m), &before);
        }
        prop_assert_eq!(m.status_report().tiers.iter().filter(|t| t.kind == TierKind::Gmt).count(), 1);
    }

    #[test]
    fn liveness_follows_missed_intervals(silence in 0..20_000u64, interval in 100..3000u64) {
        let clock = ManualClock::new(0);
        let m = Manager::new(clock.clone(), interval);
        let n = m.register_node("node:1").unwrap();
        m.heartbeat(n, &[]).unwrap();
        clock.advance(silence);
        let status = m.status_report().node(n).unwrap().status;
        let missed = silence / interval;
        let want = if missed >= 5 { NodeStatus::Dead } else if missed >= 2 { NodeStatus::Suspect } else { NodeStatus::Alive };
        prop_assert_eq!(status, want);
        m.heartbeat(n, &[]).unwrap();
        prop_assert_eq!(m.status_report().node(n).unwrap().status, NodeStatus::Alive);
    }
}

#[test]
fn dead_nodes_refuse_new_tiers_but_moves_can_leave_them() {
    let clock = ManualClock::new(0);
    let m = Manager::new(clock.clone(), 1000);
    let a = m.register_local("a:1", Arc::new(StubFactory)).unwrap();
    let b = m.register_node("b:1").unwrap();
    let t = m.allocate(b, "DWT", "workers=2").unwrap();
    assert_eq!(m.status_report().tier(t).unwrap().state, TierState::Starting);
    clock.advance(5000);
    m.heartbeat(a, &[]).unwrap();
    assert_eq!(m.status_report().node(b).unwrap().status, NodeStatus::Dead);
    assert_eq!(m.allocate(b, "DWT", ""), Err(ManagerError::NodeDead(b)));
    let moved = m.move_tier(t, a).unwrap();
    let r = m.status_report();
    assert_eq!(r.tier(moved).unwrap().state, TierState::Running);
    assert_eq!(r.tier(moved).unwrap().config, "workers=2");
}
