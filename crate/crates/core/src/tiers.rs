//! In-process tier instances: the store sweeper (DST), generator loops
//! (DGT) and worker loops (DWT), built by [`LocalTierFactory`].

use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::thread::JoinHandle;
use std::time::Duration;

use parking_lot::Mutex;

use crate::eval::{EvalConfig, EvalError, Evaluator};
use crate::lang::{decode_geer, Geer};
use crate::manager::{parse_tier_config, ManagerError, TierFactory, TierHandle, TierKind};
use crate::model::{DemandKind, KindSet, Value};
use crate::warehouse::{StoreError, StoreHandle, SweeperGuard, Warehouse, DEFAULT_SWEEP_MS};
use crate::worker::{self, run_worker, ProcedureRegistry, RunSummary, WorkerConfig, WorkerControl, WorkerError};

static INSTANCE: AtomicU64 = AtomicU64::new(1);

/// Loop settings read from a tier config string.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LoopSettings {
    pub workers: usize,
    pub poll_ms: u64,
    pub lease_ms: u64,
}

impl LoopSettings {
    pub fn parse(config: &str) -> Result<Self, ManagerError> {
        let map = parse_tier_config(config)?;
        let num = |key: &str, default: u64| -> Result<u64, ManagerError> {
            match map.get(key) {
                None => Ok(default),
                Some(v) => v
                    .parse::<u64>()
                    .ok()
                    .filter(|n| *n > 0)
                    .ok_or_else(|| ManagerError::BadRequest(format!("`{key}` must be a positive integer"))),
            }
        };
        if let Some(k) = map.keys().find(|k| !["workers", "poll.ms", "lease.ms"].contains(&k.as_str())) {
            return Err(ManagerError::BadRequest(format!("unknown tier config key `{k}`")));
        }
        let base = WorkerConfig::new("");
        let s = LoopSettings {
            workers: num("workers", 1)? as usize,
            poll_ms: num("poll.ms", base.poll_interval_ms)?,
            lease_ms: num("lease.ms", base.lease_ms)?,
        };
        let mut cfg = base;
        cfg.poll_interval_ms = s.poll_ms;
        cfg.lease_ms = s.lease_ms;
        cfg.validate().map_err(ManagerError::BadRequest)?;
        Ok(s)
    }

    fn worker_config(&self, id: String, kinds: KindSet) -> WorkerConfig {
        WorkerConfig { worker_id: id, poll_interval_ms: self.poll_ms, lease_ms: self.lease_ms, kinds }
    }
}

type Spawn = dyn Fn(String, Arc<WorkerControl>) -> JoinHandle<()> + Send + Sync;

/// A set of identical loops sharing one start/stop switch.
pub struct LoopTier {
    kind: TierKind,
    name: String,
    workers: usize,
    spawn: Box<Spawn>,
    running: Mutex<Vec<(Arc<WorkerControl>, JoinHandle<()>)>>,
}

impl LoopTier {
    fn new(kind: TierKind, workers: usize, spawn: Box<Spawn>) -> Self {
        let name = format!("{}-{}", kind.name().to_lowercase(), INSTANCE.fetch_add(1, Ordering::Relaxed));
        Self { kind, name, workers, spawn, running: Mutex::new(Vec::new()) }
    }

    /// Worker ids used by this instance's loops.
    pub fn loop_ids(&self) -> Vec<String> {
        (0..self.workers).map(|i| format!("{}.{i}", self.name)).collect()
    }

    /// Kills every loop without waiting for in-hand demands to finish;
    /// their leases lapse and the store redelivers them.
    pub fn crash(&self) {
        let loops = std::mem::take(&mut *self.running.lock());
        for (c, _) in &loops {
            c.crash();
        }
        for (_, h) in loops {
            let _ = h.join();
        }
    }
}

impl TierHandle for LoopTier {
    fn kind(&self) -> TierKind {
        self.kind
    }

    fn start(&self) -> Result<(), ManagerError> {
        let mut running = self.running.lock();
        if running.is_empty() {
            for id in self.loop_ids() {
                let control = WorkerControl::new();
                let handle = (self.spawn)(id, Arc::clone(&control));
                running.push((control, handle));
            }
        }
        Ok(())
    }

    fn stop(&self) {
        let loops = std::mem::take(&mut *self.running.lock());
        for (c, _) in &loops {
            c.stop();
        }
        for (_, h) in loops {
            let _ = h.join();
        }
    }

    fn is_running(&self) -> bool {
        !self.running.lock().is_empty()
    }
}

impl Drop for LoopTier {
    fn drop(&mut self) {
        self.stop();
    }
}

fn spawn_named<F: FnOnce() + Send + 'static>(name: &str, f: F) -> JoinHandle<()> {
    std::thread::Builder::new().name(name.to_owned()).spawn(f).expect("spawn tier thread")
}

/// Store tier: keeps the lease sweeper of a warehouse running.
pub struct DstTier {
    store: Arc<Warehouse>,
    sweep: Duration,
    guard: Mutex<Option<SweeperGuard>>,
}

impl DstTier {
    pub fn new(store: Arc<Warehouse>) -> Self {
        Self { store, sweep: Duration::from_millis(DEFAULT_SWEEP_MS), guard: Mutex::new(None) }
    }

    pub fn store(&self) -> &Arc<Warehouse> {
        &self.store
    }
}

impl TierHandle for DstTier {
    fn kind(&self) -> TierKind {
        TierKind::Dst
    }

    fn start(&self) -> Result<(), ManagerError> {
        let mut g = self.guard.lock();
        if g.is_none() {
            *g = Some(self.store.spawn_sweeper(self.sweep));
        }
        Ok(())
    }

    fn stop(&self) {
        self.guard.lock().take();
    }

    fn is_running(&self) -> bool {
        self.guard.lock().is_some()
    }
}

/// Worker tier: `workers` claim loops over procedural demands.
pub fn dwt_tier(store: Arc<dyn StoreHandle>, registry: ProcedureRegistry, settings: LoopSettings) -> LoopTier {
    let registry = Arc::new(registry);
    let spawn = move |id: String, control: Arc<WorkerControl>| {
        let (store, registry) = (Arc::clone(&store), Arc::clone(&registry));
        let cfg = settings.worker_config(id.clone(), KindSet::of(&[DemandKind::Procedural]));
        spawn_named(&id, move || match run_worker(&cfg, &*store, &registry, &control) {
            Ok(s) => tracing::debug!(worker = %cfg.worker_id, ?s, "worker loop ended"),
            Err(e) => tracing::error!(worker = %cfg.worker_id, error = %e, "worker loop failed"),
        })
    };
    LoopTier::new(TierKind::Dwt, settings.workers, Box::new(spawn))
}

/// Generator tier: `workers` loops that claim top-level intensional
/// demands and evaluate them.
pub fn dgt_tier(store: Arc<dyn StoreHandle>, eval: EvalConfig, settings: LoopSettings) -> LoopTier {
    let spawn = move |id: String, control: Arc<WorkerControl>| {
        let store = Arc::clone(&store);
        let cfg = settings.worker_config(id.clone(), KindSet::of(&[DemandKind::Intensional]));
        spawn_named(&id, move || match run_generator(&cfg, &*store, eval, &control) {
            Ok(s) => tracing::debug!(generator = %cfg.worker_id, ?s, "generator loop ended"),
            Err(e) => tracing::error!(generator = %cfg.worker_id, error = %e, "generator loop failed"),
        })
    };
    LoopTier::new(TierKind::Dgt, settings.workers, Box::new(spawn))
}

fn load_geer(store: &dyn StoreHandle, program_id: &str) -> Result<Geer, EvalError> {
    let bytes = store.get_resource(program_id)?;
    decode_geer(&bytes).map_err(|e| EvalError::Store(StoreError::MalformedGeer(e.to_string())))
}

/// Claim/evaluate/fulfill loop for intensional demands. Failures are
/// fulfilled as error values so that callers waiting on the demand see
/// them.
pub fn run_generator(
    cfg: &WorkerConfig,
    store: &dyn StoreHandle,
    eval: EvalConfig,
    control: &WorkerControl,
) -> Result<RunSummary, WorkerError> {
    cfg.validate().map_err(WorkerError::ProcedureFault)?;
    if let Err(e) = store.stats() {
        return Err(WorkerError::StoreUnreachable(e.to_string()));
    }
    let mut programs: HashMap<String, Geer> = HashMap::new();
    let mut evaluator = Evaluator::new(store, eval);
    let mut summary = RunSummary::default();
    let mut backoff = cfg.poll_interval_ms;
    while !control.is_stopped() {
        let demand = match store.claim(&cfg.worker_id, cfg.kinds, cfg.lease_ms) {
            Ok(Some(d)) => d,
            Ok(None) => {
                std::thread::sleep(Duration::from_millis(cfg.poll_interval_ms));
                continue;
            }
            Err(e) if e.is_transport() => {
                std::thread::sleep(Duration::from_millis(backoff));
                backoff = (backoff * 2).min(1000);
                continue;
            }
            Err(e) => return Err(WorkerError::StoreUnreachable(e.to_string())),
        };
        backoff = cfg.poll_interval_ms;
        summary.claims += 1;
        let sig = &demand.signature;
        let result = match programs.get(&sig.program_id) {
            Some(g) => Ok(g),
            None => load_geer(store, &sig.program_id).map(|g| &*programs.entry(sig.program_id.clone()).or_insert(g)),
        }
        .and_then(|g| evaluator.eval_demand(g, &sig.name, &sig.context));
        let value: Value = match result {
            Ok(v) => v,
            Err(e) => {
                summary.failures += 1;
                e.to_marker()
            }
        };
        match store.fulfill(sig, &value, &cfg.worker_id) {
            Ok(()) => summary.fulfills += 1,
            Err(e) => {
                tracing::warn!(generator = %cfg.worker_id, %sig, error = %e, "fulfill rejected");
                summary.failures += 1;
            }
        }
    }
    Ok(summary)
}

/// Builds tiers that run as threads in this process.
pub struct LocalTierFactory {
    store: Arc<dyn StoreHandle>,
    warehouse: Option<Arc<Warehouse>>,
    registry: ProcedureRegistry,
    eval: EvalConfig,
}

impl LocalTierFactory {
    /// `store` is what DGT and DWT loops talk to. A DST tier can only be
    /// built when the node owns a warehouse.
    pub fn new(store: Arc<dyn StoreHandle>, warehouse: Option<Arc<Warehouse>>, registry: ProcedureRegistry) -> Self {
        Self { store, warehouse, registry, eval: EvalConfig::default() }
    }

    pub fn with_eval_config(mut self, eval: EvalConfig) -> Self {
        self.eval = eval;
        self
    }

    pub fn dwt(&self, config: &str) -> Result<LoopTier, ManagerError> {
        Ok(dwt_tier(Arc::clone(&self.store), self.registry.clone(), LoopSettings::parse(config)?))
    }

    pub fn dgt(&self, config: &str) -> Result<LoopTier, ManagerError> {
        Ok(dgt_tier(Arc::clone(&self.store), self.eval, LoopSettings::parse(config)?))
    }
}

impl TierFactory for LocalTierFactory {
    fn build(&self, kind: TierKind, config: &str) -> Result<Box<dyn TierHandle>, ManagerError> {
        match kind {
            TierKind::Dst => {
                parse_tier_config(config)?;
                let wh = self
                    .warehouse
                    .as_ref()
                    .ok_or_else(|| ManagerError::StartFailed("this node has no warehouse to serve".into()))?;
                Ok(Box::new(DstTier::new(Arc::clone(wh))))
            }
            TierKind::Dgt => Ok(Box::new(self.dgt(config)?)),
            TierKind::Dwt => Ok(Box::new(self.dwt(config)?)),
            TierKind::Gmt => Err(ManagerError::UnknownTierKind(kind.name().to_owned())),
        }
    }
}

/// True when `v` is a reserved error value.
pub fn is_error_value(v: &Value) -> bool {
    worker::parse_error_value(v).is_some()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lang::{compile, encode_geer};
    use crate::model::{Context, Demand, DemandSignature};
    use crate::pipeline::standard_registry;

    fn settings(workers: usize) -> LoopSettings {
        LoopSettings { workers, poll_ms: 5, lease_ms: 5000 }
    }

    #[test]
    fn settings_parse() {
        assert_eq!(LoopSettings::parse("").unwrap(), LoopSettings { workers: 1, poll_ms: 50, lease_ms: 5000 });
        assert_eq!(LoopSettings::parse("workers=3, poll.ms=10").unwrap().workers, 3);
        assert!(LoopSettings::parse("workers=0").is_err());
        assert!(LoopSettings::parse("poll.ms=5000").is_err());
        assert!(LoopSettings::parse("colour=red").is_err());
    }

    #[test]
    fn dwt_tier_serves_procedures_and_restarts() {
        let wh = Arc::new(Warehouse::new());
        let tier = dwt_tier(wh.clone(), standard_registry(), settings(2));
        tier.start().unwrap();
        tier.start().unwrap();
        assert!(tier.is_running());
        let sig = DemandSignature::procedural("t", "add2", vec![Value::Int(3), Value::Int(4)]);
        wh.deposit(&Demand::pending(sig.clone())).unwrap();
        assert_eq!(wh.await_result(&sig, 5000), Ok(Value::Int(7)));
        tier.stop();
        tier.stop();
        assert!(!tier.is_running());
        tier.start().unwrap();
        let sig = DemandSignature::procedural("t", "square", vec![Value::Int(9)]);
        wh.deposit(&Demand::pending(sig.clone())).unwrap();
        assert_eq!(wh.await_result(&sig, 5000), Ok(Value::Int(81)));
    }

    #[test]
    fn dgt_tier_evaluates_remote_demands() {
        let wh = Arc::new(Warehouse::new());
        let g =
            compile("fact where dimension d; fact = if #.d == 0 then 1 else #.d * (fact @.d (#.d - 1)); end", "fact")
                .unwrap();
        wh.put_resource("fact", &encode_geer(&g)).unwrap();
        let tier = dgt_tier(wh.clone(), EvalConfig::default(), settings(1));
        tier.start().unwrap();
        let sig = DemandSignature::intensional("fact", "fact", Context::empty().with("d", 6));
        wh.deposit(&Demand::pending(sig.clone())).unwrap();
        assert_eq!(wh.await_result(&sig, 5000), Ok(Value::Int(720)));
        // sub-results were published by the generator
        let sub = DemandSignature::intensional("fact", "fact", Context::empty().with("d", 3));
        assert_eq!(wh.fetch(&sub).unwrap().1, Some(Value::Int(6)));

        let missing = DemandSignature::intensional("nope", "x", Context::empty());
        wh.deposit(&Demand::pending(missing.clone())).unwrap();
        let v = wh.await_result(&missing, 5000).unwrap();
        assert!(is_error_value(&v), "{v}");
        tier.stop();
    }

    #[test]
    fn factory_builds_each_runtime_tier() {
        let wh = Arc::new(Warehouse::new());
        let f = LocalTierFactory::new(wh.clone(), Some(wh.clone()), standard_registry());
        for k in [TierKind::Dst, TierKind::Dgt, TierKind::Dwt] {
            let t = f.build(k, "").unwrap();
            assert_eq!(t.kind(), k);
            t.start().unwrap();
            assert!(t.is_running());
            t.stop();
            assert!(!t.is_running());
        }
        let no_dst = LocalTierFactory::new(wh, None, ProcedureRegistry::new());
        assert!(no_dst.build(TierKind::Dst, "").is_err());
    }

    #[test]
    fn crashed_tier_leaves_work_for_others() {
        let wh = Arc::new(Warehouse::new());
        let tier = dwt_tier(wh.clone(), standard_registry(), settings(1));
        tier.start().unwrap();
        tier.crash();
        assert!(!tier.is_running());
        let sig = DemandSignature::procedural("t", "add2", vec![Value::Int(1), Value::Int(1)]);
        wh.deposit(&Demand::pending(sig.clone())).unwrap();
        assert_eq!(wh.await_result(&sig, 50), Err(StoreError::Timeout));
        let other = dwt_tier(wh.clone(), standard_registry(), settings(1));
        other.start().unwrap();
        assert_eq!(wh.await_result(&sig, 5000), Ok(Value::Int(2)));
    }
}
