//! A node process: serves the store and/or manager it hosts, registers
//! with the manager, and keeps its local tiers in line with the
//! manager's assignments through the heartbeat loop.

use std::collections::{BTreeSet, HashMap};
use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::{Arc, Mutex};
use std::thread::JoinHandle;
use std::time::{Duration, Instant};

use eduction_client::{connect_gmt, TcpStore};
use eduction_core::clock;
use eduction_core::eval::EvalConfig;
use eduction_core::manager::{Assignment, Manager, ManagerError, TierFactory, TierHandle, TierKind, TierState};
use eduction_core::tiers::LocalTierFactory;
use eduction_core::transport::Service;
use eduction_core::worker::ProcedureRegistry;
use eduction_core::{StoreError, StoreHandle, Warehouse};
use thiserror::Error;

use crate::frames::FrameServer;
use crate::http::{Gateway, HttpGateway};

#[derive(Debug, Error)]
pub enum NodeError {
    #[error("{0}")]
    Config(String),
    #[error("{0}")]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Manager(#[from] ManagerError),
    #[error(transparent)]
    Store(#[from] StoreError),
}

impl NodeError {
    pub fn is_transport(&self) -> bool {
        match self {
            NodeError::Io(_) => true,
            NodeError::Store(e) | NodeError::Manager(ManagerError::Store(e)) => e.is_transport(),
            _ => false,
        }
    }
}

#[derive(Clone)]
pub struct NodeOptions {
    /// Tiers this node hosts. GMT and DST also open their listeners here.
    pub tiers: Vec<TierKind>,
    /// Manager address, when the manager runs elsewhere.
    pub gmt: Option<String>,
    /// Store address, when the store runs elsewhere.
    pub dst: Option<String>,
    pub host: String,
    pub dst_port: u16,
    pub gmt_port: u16,
    pub http_port: Option<u16>,
    pub heartbeat_ms: u64,
    /// Config string for the DGT and DWT tiers this node allocates.
    pub tier_config: String,
    pub data_dir: Option<PathBuf>,
    /// Address to register under; defaults to the store address or a
    /// process-unique name.
    pub advertise: Option<String>,
    pub registry: ProcedureRegistry,
    pub eval: EvalConfig,
}

impl NodeOptions {
    pub fn new(tiers: Vec<TierKind>) -> Self {
        Self {
            tiers,
            gmt: None,
            dst: None,
            host: "127.0.0.1".into(),
            dst_port: eduction_core::transport::DEFAULT_DST_PORT,
            gmt_port: eduction_core::transport::DEFAULT_GMT_PORT,
            http_port: None,
            heartbeat_ms: eduction_core::manager::DEFAULT_HEARTBEAT_MS,
            tier_config: String::new(),
            data_dir: None,
            advertise: None,
            registry: eduction_core::pipeline::standard_registry(),
            eval: EvalConfig::default(),
        }
    }

    fn hosts(&self, k: TierKind) -> bool {
        self.tiers.contains(&k)
    }
}

/// How the node talks to its manager.
#[derive(Clone)]
enum Gmt {
    Local(Arc<Manager>),
    Remote(String),
}

impl Gmt {
    fn status(&self) -> Result<eduction_core::manager::StatusReport, ManagerError> {
        match self {
            Gmt::Local(m) => Ok(m.status_report()),
            Gmt::Remote(addr) => connect_gmt(addr).status(),
        }
    }
}

static UNNAMED: AtomicU64 = AtomicU64::new(0);

pub struct Node {
    node_id: u64,
    address: String,
    dst_addr: Option<SocketAddr>,
    gmt_addr: Option<SocketAddr>,
    http_addr: Option<SocketAddr>,
    manager: Option<Arc<Manager>>,
    warehouse: Option<Arc<Warehouse>>,
    local_tiers: Arc<Mutex<HashMap<u64, Box<dyn TierHandle>>>>,
    beating: Arc<AtomicBool>,
    last_beat: Arc<Mutex<Option<Instant>>>,
    heartbeat: Option<JoinHandle<()>>,
    servers: Vec<FrameServer>,
    http: Option<HttpGateway>,
}

impl Node {
    pub fn start(opts: NodeOptions) -> Result<Node, NodeError> {
        if opts.heartbeat_ms == 0 {
            return Err(NodeError::Config("heartbeat interval must be positive".into()));
        }
        let data = |file: &str| opts.data_dir.as_ref().map(|d| d.join(file));
        if let Some(d) = &opts.data_dir {
            std::fs::create_dir_all(d)?;
        }
        let mut servers = Vec::new();

        let warehouse = if opts.hosts(TierKind::Dst) {
            let wh = match data("dst.log") {
                Some(p) => Warehouse::open(&p, clock::monotonic())?,
                None => Warehouse::new(),
            };
            Some(Arc::new(wh))
        } else {
            None
        };
        let dst_addr = match &warehouse {
            Some(wh) => {
                let svc = Arc::new(Service::store(wh.clone()));
                let s = FrameServer::start(&format!("{}:{}", opts.host, opts.dst_port), svc)?;
                let a = s.local_addr();
                servers.push(s);
                Some(a)
            }
            None => None,
        };

        let manager = if opts.hosts(TierKind::Gmt) {
            let m = match data("gmt.log") {
                Some(p) => Manager::open(&p, clock::monotonic(), opts.heartbeat_ms)?,
                None => Manager::new(clock::monotonic(), opts.heartbeat_ms),
            };
            Some(Arc::new(m))
        } else {
            None
        };
        let gmt_addr = match &manager {
            Some(m) => {
                let svc = Arc::new(Service::system(m.clone()));
                let s = FrameServer::start(&format!("{}:{}", opts.host, opts.gmt_port), svc)?;
                let a = s.local_addr();
                servers.push(s);
                Some(a)
            }
            None => None,
        };
        let gmt = match (&manager, &opts.gmt) {
            (Some(m), _) => Gmt::Local(m.clone()),
            (None, Some(addr)) => Gmt::Remote(addr.clone()),
            (None, None) => return Err(NodeError::Config("no manager: host a GMT tier or pass its address".into())),
        };

        let store: Option<Arc<dyn StoreHandle>> = match (&warehouse, &opts.dst) {
            (Some(wh), _) => Some(wh.clone()),
            (None, Some(addr)) => Some(Arc::new(TcpStore::new(addr.clone()))),
            (None, None) => None,
        };
        let loops = opts.hosts(TierKind::Dgt) || opts.hosts(TierKind::Dwt);
        if loops && store.is_none() {
            return Err(NodeError::Config("generator and worker tiers need a store address".into()));
        }

        let address = match (&opts.advertise, dst_addr) {
            (Some(a), _) => a.clone(),
            (None, Some(a)) => a.to_string(),
            (None, None) => format!("node-{}-{}", std::process::id(), UNNAMED.fetch_add(1, Ordering::Relaxed)),
        };

        let factory: Option<Arc<dyn TierFactory>> = store.clone().map(|s| {
            Arc::new(LocalTierFactory::new(s, warehouse.clone(), opts.registry.clone()).with_eval_config(opts.eval))
                as Arc<dyn TierFactory>
        });

        let node_id = register(&gmt, &address, factory.clone())?;
        let wanted: Vec<TierKind> = opts.tiers.iter().copied().filter(|k| *k != TierKind::Gmt).collect();
        allocate_missing(&gmt, node_id, &wanted, &opts.tier_config)?;

        let local_tiers: Arc<Mutex<HashMap<u64, Box<dyn TierHandle>>>> = Arc::default();
        let beating = Arc::new(AtomicBool::new(true));
        let last_beat: Arc<Mutex<Option<Instant>>> = Arc::default();
        let heartbeat = {
            let (gmt, beating, tiers, last) = (gmt.clone(), beating.clone(), local_tiers.clone(), last_beat.clone());
            let acked = move |ok: bool| {
                if ok {
                    *last.lock().unwrap_or_else(|e| e.into_inner()) = Some(Instant::now());
                }
            };
            let interval = Duration::from_millis(opts.heartbeat_ms);
            // tiers started by a local manager are not reconciled here
            let factory = match &gmt {
                Gmt::Local(_) => None,
                Gmt::Remote(_) => factory.clone(),
            };
            if let Some(f) = &factory {
                acked(beat(&gmt, node_id, f.as_ref(), &tiers));
            }
            std::thread::Builder::new().name(format!("heartbeat-{node_id}")).spawn(move || {
                while beating.load(Ordering::SeqCst) {
                    std::thread::sleep(interval);
                    if !beating.load(Ordering::SeqCst) {
                        break;
                    }
                    let ok = match (&factory, &gmt) {
                        (Some(f), _) => beat(&gmt, node_id, f.as_ref(), &tiers),
                        (None, Gmt::Local(m)) => match m.heartbeat(node_id, &[]) {
                            Ok(_) => true,
                            Err(e) => {
                                tracing::warn!(node = node_id, error = %e, "heartbeat failed");
                                false
                            }
                        },
                        (None, Gmt::Remote(_)) => false,
                    };
                    acked(ok);
                }
            })?
        };

        let http = match opts.http_port {
            Some(port) => {
                let status = {
                    let gmt = gmt.clone();
                    Arc::new(move || gmt.status().map_err(|e| e.to_string()))
                };
                let g = Gateway { store: store.clone(), status: Some(status) };
                Some(HttpGateway::start(&format!("{}:{port}", opts.host), g)?)
            }
            None => None,
        };

        tracing::info!(node = node_id, %address, "node started");
        Ok(Node {
            node_id,
            address,
            dst_addr,
            gmt_addr,
            http_addr: http.as_ref().map(|h| h.local_addr()),
            manager,
            warehouse,
            local_tiers,
            beating,
            last_beat,
            heartbeat: Some(heartbeat),
            servers,
            http,
        })
    }

    pub fn node_id(&self) -> u64 {
        self.node_id
    }

    pub fn address(&self) -> &str {
        &self.address
    }

    pub fn dst_addr(&self) -> Option<SocketAddr> {
        self.dst_addr
    }

    pub fn gmt_addr(&self) -> Option<SocketAddr> {
        self.gmt_addr
    }

    pub fn http_addr(&self) -> Option<SocketAddr> {
        self.http_addr
    }

    pub fn manager(&self) -> Option<&Arc<Manager>> {
        self.manager.as_ref()
    }

    pub fn warehouse(&self) -> Option<&Arc<Warehouse>> {
        self.warehouse.as_ref()
    }

    /// Ids of the tiers this node runs on behalf of a remote manager.
    pub fn running_tiers(&self) -> BTreeSet<u64> {
        self.local_tiers.lock().unwrap_or_else(|e| e.into_inner()).keys().copied().collect()
    }

    /// When the manager last acknowledged a heartbeat from this node.
    pub fn last_heartbeat(&self) -> Option<Instant> {
        *self.last_beat.lock().unwrap_or_else(|e| e.into_inner())
    }

    /// Stops heartbeating while leaving everything else up, as a node
    /// cut off from the manager would.
    pub fn silence(&mut self) {
        self.beating.store(false, Ordering::SeqCst);
        if let Some(h) = self.heartbeat.take() {
            let _ = h.join();
        }
    }

    pub fn shutdown(&mut self) {
        self.silence();
        let tiers: Vec<_> = self.local_tiers.lock().unwrap_or_else(|e| e.into_inner()).drain().collect();
        for (_, t) in tiers {
            t.stop();
        }
        if let Some(m) = &self.manager {
            m.shutdown();
        }
        self.http = None;
        for s in &mut self.servers {
            s.shutdown();
        }
    }
}

impl Drop for Node {
    fn drop(&mut self) {
        self.shutdown();
    }
}

fn register(gmt: &Gmt, address: &str, factory: Option<Arc<dyn TierFactory>>) -> Result<u64, NodeError> {
    let first = match (gmt, &factory) {
        (Gmt::Local(m), Some(f)) => m.register_local(address, f.clone()),
        (Gmt::Local(m), None) => m.register_node(address),
        (Gmt::Remote(addr), _) => connect_gmt(addr).register_node(address),
    };
    match first {
        Ok(id) => Ok(id),
        Err(ManagerError::DuplicateAddress(_)) => {
            // a restarted node keeps its identity
            let id = gmt
                .status()?
                .nodes
                .iter()
                .find(|n| n.address == address)
                .map(|n| n.node_id)
                .ok_or_else(|| NodeError::Config(format!("{address} registered but not listed")))?;
            if let (Gmt::Local(m), Some(f)) = (gmt, factory) {
                m.attach_factory(id, f)?;
            }
            Ok(id)
        }
        Err(e) => Err(e.into()),
    }
}

fn allocate_missing(gmt: &Gmt, node_id: u64, wanted: &[TierKind], config: &str) -> Result<(), NodeError> {
    let report = gmt.status()?;
    for kind in wanted {
        let present =
            report.tiers.iter().any(|t| t.node_id == node_id && t.kind == *kind && t.state != TierState::Stopped);
        if present {
            continue;
        }
        let cfg = if *kind == TierKind::Dst { "" } else { config };
        match gmt {
            Gmt::Local(m) => m.allocate(node_id, kind.name(), cfg)?,
            Gmt::Remote(addr) => connect_gmt(addr).allocate(node_id, kind.name(), cfg)?,
        };
    }
    Ok(())
}

/// One heartbeat against a remote manager, followed by starting and
/// stopping local tiers to match the returned assignments. Returns
/// whether the manager acknowledged the heartbeat.
fn beat(gmt: &Gmt, node_id: u64, factory: &dyn TierFactory, tiers: &Mutex<HashMap<u64, Box<dyn TierHandle>>>) -> bool {
    let Gmt::Remote(addr) = gmt else { return false };
    let client = connect_gmt(addr);
    let running: Vec<u64> = tiers.lock().unwrap_or_else(|e| e.into_inner()).keys().copied().collect();
    let assignments = match client.heartbeat(node_id, &running) {
        Ok(a) => a,
        Err(e) => {
            tracing::warn!(node = node_id, error = %e, "heartbeat failed");
            return false;
        }
    };
    if reconcile(node_id, factory, tiers, &assignments) {
        let running: Vec<u64> = tiers.lock().unwrap_or_else(|e| e.into_inner()).keys().copied().collect();
        if let Err(e) = client.heartbeat(node_id, &running) {
            tracing::warn!(node = node_id, error = %e, "heartbeat failed");
        }
    }
    true
}

fn reconcile(
    node_id: u64,
    factory: &dyn TierFactory,
    tiers: &Mutex<HashMap<u64, Box<dyn TierHandle>>>,
    assignments: &[Assignment],
) -> bool {
    let mut local = tiers.lock().unwrap_or_else(|e| e.into_inner());
    let wanted: BTreeSet<u64> = assignments.iter().map(|a| a.tier_id).collect();
    let stale: Vec<u64> = local.keys().copied().filter(|id| !wanted.contains(id)).collect();
    let mut changed = !stale.is_empty();
    for id in stale {
        if let Some(t) = local.remove(&id) {
            tracing::info!(node = node_id, tier = id, "stopping tier no longer assigned here");
            t.stop();
        }
    }
    let missing: Vec<&Assignment> = assignments.iter().filter(|a| !local.contains_key(&a.tier_id)).collect();
    for a in missing {
        match factory.build(a.kind, &a.config).and_then(|t| t.start().map(|_| t)) {
            Ok(t) => {
                tracing::info!(node = node_id, tier = a.tier_id, kind = %a.kind, "tier started");
                local.insert(a.tier_id, t);
                changed = true;
            }
            Err(e) => tracing::error!(node = node_id, tier = a.tier_id, error = %e, "tier failed to start"),
        }
    }
    changed
}
