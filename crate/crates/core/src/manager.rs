//! General manager tier: node registry, tier lifecycle and liveness.
//!
//! Nodes that register with a [`TierFactory`] attached are driven
//! directly: their tiers start inside `allocate`. Remote nodes learn their
//! assignments from heartbeat replies and report back which tiers they
//! run; a tier is RUNNING once its node says so.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::sync::Arc;

use parking_lot::Mutex;
use thiserror::Error;

use crate::clock::Clock;
use crate::model::{DemandKind, DemandSignature, Value};
use crate::transport::message::{ServiceError, SystemHandler};
use crate::transport::{Agent, RemoteStore, Reply, Request};
use crate::warehouse::StoreError;

pub const DEFAULT_HEARTBEAT_MS: u64 = 1000;
pub const SUSPECT_AFTER_MISSES: u64 = 2;
pub const DEAD_AFTER_MISSES: u64 = 5;
/// Program id carried by every system demand.
pub const SYSTEM_PROGRAM: &str = "gmt";
/// Tier id of the manager itself.
pub const GMT_TIER_ID: u64 = 0;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ManagerError {
    #[error("address {0} is already registered")]
    DuplicateAddress(String),
    #[error("unknown tier kind `{0}`")]
    UnknownTierKind(String),
    #[error("unknown node {0}")]
    NodeUnknown(u64),
    #[error("node {0} is dead")]
    NodeDead(u64),
    #[error("a {0} tier is already allocated")]
    AlreadyAllocated(TierKind),
    #[error("unknown tier {0}")]
    TierUnknown(u64),
    #[error("the manager tier cannot be moved or deallocated")]
    ManagerTier,
    #[error("bad system request: {0}")]
    BadRequest(String),
    #[error("tier failed to start: {0}")]
    StartFailed(String),
    #[error("event log: {0}")]
    Log(String),
    #[error("{0}")]
    Store(StoreError),
}

impl ManagerError {
    pub fn code(&self) -> &str {
        match self {
            ManagerError::DuplicateAddress(_) => "DuplicateAddress",
            ManagerError::UnknownTierKind(_) => "UnknownTierKind",
            ManagerError::NodeUnknown(_) => "NodeUnknown",
            ManagerError::NodeDead(_) => "NodeDead",
            ManagerError::AlreadyAllocated(_) => "AlreadyAllocated",
            ManagerError::TierUnknown(_) => "TierUnknown",
            ManagerError::ManagerTier => "ManagerTier",
            ManagerError::BadRequest(_) => "BadRequest",
            ManagerError::StartFailed(_) => "StartFailed",
            ManagerError::Log(_) => "Log",
            ManagerError::Store(e) => e.code(),
        }
    }

    /// The variant's payload alone, as sent next to [`Self::code`].
    pub fn detail(&self) -> String {
        match self {
            ManagerError::DuplicateAddress(s)
            | ManagerError::UnknownTierKind(s)
            | ManagerError::BadRequest(s)
            | ManagerError::StartFailed(s)
            | ManagerError::Log(s) => s.clone(),
            ManagerError::NodeUnknown(id) | ManagerError::NodeDead(id) | ManagerError::TierUnknown(id) => {
                id.to_string()
            }
            ManagerError::AlreadyAllocated(k) => k.name().to_owned(),
            ManagerError::ManagerTier => String::new(),
            ManagerError::Store(e) => e.to_string(),
        }
    }

    /// Inverse of `(code(), detail())`.
    pub fn from_wire(code: &str, message: &str) -> Self {
        let id = || message.trim().parse::<u64>().unwrap_or(0);
        match code {
            "DuplicateAddress" => ManagerError::DuplicateAddress(message.to_owned()),
            "UnknownTierKind" => ManagerError::UnknownTierKind(message.to_owned()),
            "NodeUnknown" => ManagerError::NodeUnknown(id()),
            "NodeDead" => ManagerError::NodeDead(id()),
            "AlreadyAllocated" => TierKind::parse(message)
                .map(ManagerError::AlreadyAllocated)
                .unwrap_or_else(|_| ManagerError::BadRequest(message.to_owned())),
            "TierUnknown" => ManagerError::TierUnknown(id()),
            "ManagerTier" => ManagerError::ManagerTier,
            "StartFailed" => ManagerError::StartFailed(message.to_owned()),
            "Log" => ManagerError::Log(message.to_owned()),
            "BadRequest" => ManagerError::BadRequest(message.to_owned()),
            other => ManagerError::Store(StoreError::from_code(other, message)),
        }
    }
}

impl From<StoreError> for ManagerError {
    fn from(e: StoreError) -> Self {
        ManagerError::Store(e)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum TierKind {
    Dst,
    Dgt,
    Dwt,
    Gmt,
}

impl TierKind {
    pub const ALL: [TierKind; 4] = [TierKind::Dst, TierKind::Dgt, TierKind::Dwt, TierKind::Gmt];

    pub fn name(self) -> &'static str {
        match self {
            TierKind::Dst => "DST",
            TierKind::Dgt => "DGT",
            TierKind::Dwt => "DWT",
            TierKind::Gmt => "GMT",
        }
    }

    /// Case-insensitive parse of a tier kind name.
    pub fn parse(s: &str) -> Result<Self, ManagerError> {
        Self::ALL
            .into_iter()
            .find(|k| k.name().eq_ignore_ascii_case(s.trim()))
            .ok_or_else(|| ManagerError::UnknownTierKind(s.to_owned()))
    }
}

impl fmt::Display for TierKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NodeStatus {
    Alive,
    Suspect,
    Dead,
}

impl NodeStatus {
    pub fn name(self) -> &'static str {
        match self {
            NodeStatus::Alive => "ALIVE",
            NodeStatus::Suspect => "SUSPECT",
            NodeStatus::Dead => "DEAD",
        }
    }

    fn parse(s: &str) -> Option<Self> {
        [NodeStatus::Alive, NodeStatus::Suspect, NodeStatus::Dead].into_iter().find(|n| n.name() == s)
    }

    /// Status after `age_ms` of silence with heartbeats every `interval_ms`.
    pub fn from_age(age_ms: u64, interval_ms: u64) -> Self {
        let missed = age_ms / interval_ms.max(1);
        if missed >= DEAD_AFTER_MISSES {
            NodeStatus::Dead
        } else if missed >= SUSPECT_AFTER_MISSES {
            NodeStatus::Suspect
        } else {
            NodeStatus::Alive
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TierState {
    Starting,
    Running,
    Stopped,
}

impl TierState {
    pub fn name(self) -> &'static str {
        match self {
            TierState::Starting => "STARTING",
            TierState::Running => "RUNNING",
            TierState::Stopped => "STOPPED",
        }
    }

    fn parse(s: &str) -> Option<Self> {
        [TierState::Starting, TierState::Running, TierState::Stopped].into_iter().find(|t| t.name() == s)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NodeRecord {
    pub node_id: u64,
    pub address: String,
    pub registered_at: u64,
    pub last_heartbeat: u64,
    pub status: NodeStatus,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TierRecord {
    pub tier_id: u64,
    pub kind: TierKind,
    pub node_id: u64,
    pub config: String,
    pub state: TierState,
}

/// Parses a tier config string of the form `key=value,key=value`.
pub fn parse_tier_config(config: &str) -> Result<BTreeMap<String, String>, ManagerError> {
    let mut out = BTreeMap::new();
    for item in config.split(',').map(str::trim).filter(|s| !s.is_empty()) {
        let (k, v) = item
            .split_once('=')
            .ok_or_else(|| ManagerError::BadRequest(format!("config item `{item}` is not key=value")))?;
        out.insert(k.trim().to_owned(), v.trim().to_owned());
    }
    Ok(out)
}

/// A running (or runnable) tier instance. Start and stop are idempotent.
pub trait TierHandle: Send + Sync {
    fn kind(&self) -> TierKind;
    fn start(&self) -> Result<(), ManagerError>;
    fn stop(&self);
    fn is_running(&self) -> bool;
}

/// Builds concrete tier instances on one node.
pub trait TierFactory: Send + Sync {
    fn build(&self, kind: TierKind, config: &str) -> Result<Box<dyn TierHandle>, ManagerError>;
}

/// Dispatches on a tier kind name; only the three runtime tiers can be
/// created this way.
pub fn create_tier(factory: &dyn TierFactory, kind: &str, config: &str) -> Result<Box<dyn TierHandle>, ManagerError> {
    match TierKind::parse(kind) {
        Ok(k @ (TierKind::Dst | TierKind::Dgt | TierKind::Dwt)) => factory.build(k, config),
        _ => Err(ManagerError::UnknownTierKind(kind.to_owned())),
    }
}

/// Everything the manager knows, as reported by STATUS.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StatusReport {
    pub nodes: Vec<NodeRecord>,
    pub tiers: Vec<TierRecord>,
}

impl StatusReport {
    pub fn node(&self, id: u64) -> Option<&NodeRecord> {
        self.nodes.iter().find(|n| n.node_id == id)
    }

    pub fn tier(&self, id: u64) -> Option<&TierRecord> {
        self.tiers.iter().find(|t| t.tier_id == id)
    }

    pub fn to_values(&self) -> Vec<Value> {
        let mut v = vec![Value::Int(self.nodes.len() as i64)];
        for n in &self.nodes {
            v.push(Value::Int(n.node_id as i64));
            v.push(Value::Str(n.address.clone()));
            v.push(Value::Int(n.registered_at as i64));
            v.push(Value::Int(n.last_heartbeat as i64));
            v.push(Value::Str(n.status.name().to_owned()));
        }
        v.push(Value::Int(self.tiers.len() as i64));
        for t in &self.tiers {
            v.push(Value::Int(t.tier_id as i64));
            v.push(Value::Str(t.kind.name().to_owned()));
            v.push(Value::Int(t.node_id as i64));
            v.push(Value::Str(t.config.clone()));
            v.push(Value::Str(t.state.name().to_owned()));
        }
        v
    }

    pub fn from_values(values: &[Value]) -> Result<Self, ManagerError> {
        let mut r = ValueReader(values.iter());
        let mut nodes = Vec::new();
        for _ in 0..r.int()? {
            nodes.push(NodeRecord {
                node_id: r.int()?,
                address: r.str()?,
                registered_at: r.int()?,
                last_heartbeat: r.int()?,
                status: NodeStatus::parse(&r.str()?).ok_or_else(|| bad("node status"))?,
            });
        }
        let mut tiers = Vec::new();
        for _ in 0..r.int()? {
            tiers.push(TierRecord {
                tier_id: r.int()?,
                kind: TierKind::parse(&r.str()?)?,
                node_id: r.int()?,
                config: r.str()?,
                state: TierState::parse(&r.str()?).ok_or_else(|| bad("tier state"))?,
            });
        }
        r.end()?;
        Ok(StatusReport { nodes, tiers })
    }
}

impl fmt::Display for StatusReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for n in &self.nodes {
            writeln!(f, "node {} {} {}", n.node_id, n.address, n.status.name())?;
        }
        for t in &self.tiers {
            let cfg = if t.config.is_empty() { "-" } else { &t.config };
            writeln!(f, "tier {} {} node={} {} {}", t.tier_id, t.kind, t.node_id, t.state.name(), cfg)?;
        }
        Ok(())
    }
}

/// One tier a node should be running, as carried by a heartbeat reply.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Assignment {
    pub tier_id: u64,
    pub kind: TierKind,
    pub config: String,
}

fn bad(what: &str) -> ManagerError {
    ManagerError::BadRequest(format!("malformed {what}"))
}

struct ValueReader<'a>(std::slice::Iter<'a, Value>);

impl ValueReader<'_> {
    fn int(&mut self) -> Result<u64, ManagerError> {
        match self.0.next() {
            Some(Value::Int(i)) if *i >= 0 => Ok(*i as u64),
            _ => Err(bad("integer argument")),
        }
    }

    fn str(&mut self) -> Result<String, ManagerError> {
        match self.0.next() {
            Some(Value::Str(s)) => Ok(s.clone()),
            _ => Err(bad("string argument")),
        }
    }

    fn end(&mut self) -> Result<(), ManagerError> {
        match self.0.next() {
            None => Ok(()),
            Some(_) => Err(bad("argument list")),
        }
    }
}

/// Operations a system demand can carry.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum SystemDemandMsg {
    RegisterNode { address: String },
    Allocate { node_id: u64, kind: String, config: String },
    Deallocate { tier_id: u64 },
    Move { tier_id: u64, dest: u64 },
    Heartbeat { node_id: u64, running: Vec<u64> },
    Status,
}

impl SystemDemandMsg {
    pub fn op(&self) -> &'static str {
        match self {
            SystemDemandMsg::RegisterNode { .. } => "REGISTER_NODE",
            SystemDemandMsg::Allocate { .. } => "ALLOCATE",
            SystemDemandMsg::Deallocate { .. } => "DEALLOCATE",
            SystemDemandMsg::Move { .. } => "MOVE",
            SystemDemandMsg::Heartbeat { .. } => "HEARTBEAT",
            SystemDemandMsg::Status => "STATUS",
        }
    }

    pub fn to_signature(&self) -> DemandSignature {
        let int = |i: u64| Value::Int(i as i64);
        let args = match self {
            SystemDemandMsg::RegisterNode { address } => vec![Value::Str(address.clone())],
            SystemDemandMsg::Allocate { node_id, kind, config } => {
                vec![int(*node_id), Value::Str(kind.clone()), Value::Str(config.clone())]
            }
            SystemDemandMsg::Deallocate { tier_id } => vec![int(*tier_id)],
            SystemDemandMsg::Move { tier_id, dest } => vec![int(*tier_id), int(*dest)],
            SystemDemandMsg::Heartbeat { node_id, running } => {
                std::iter::once(*node_id).chain(running.iter().copied()).map(int).collect()
            }
            SystemDemandMsg::Status => vec![],
        };
        DemandSignature {
            program_id: SYSTEM_PROGRAM.to_owned(),
            name: self.op().to_owned(),
            context: Default::default(),
            kind: DemandKind::System,
            args,
        }
    }

    pub fn from_signature(sig: &DemandSignature) -> Result<Self, ManagerError> {
        if sig.kind != DemandKind::System || sig.program_id != SYSTEM_PROGRAM {
            return Err(ManagerError::BadRequest(format!("not a system demand: {sig}")));
        }
        let mut r = ValueReader(sig.args.iter());
        let msg = match sig.name.as_str() {
            "REGISTER_NODE" => SystemDemandMsg::RegisterNode { address: r.str()? },
            "ALLOCATE" => SystemDemandMsg::Allocate { node_id: r.int()?, kind: r.str()?, config: r.str()? },
            "DEALLOCATE" => SystemDemandMsg::Deallocate { tier_id: r.int()? },
            "MOVE" => SystemDemandMsg::Move { tier_id: r.int()?, dest: r.int()? },
            "HEARTBEAT" => {
                let node_id = r.int()?;
                let mut running = Vec::new();
                while r.0.len() > 0 {
                    running.push(r.int()?);
                }
                SystemDemandMsg::Heartbeat { node_id, running }
            }
            "STATUS" => SystemDemandMsg::Status,
            other => return Err(ManagerError::BadRequest(format!("unknown system op `{other}`"))),
        };
        r.end()?;
        Ok(msg)
    }
}

fn assignments_to_values(list: &[Assignment]) -> Vec<Value> {
    list.iter()
        .flat_map(|a| {
            [Value::Int(a.tier_id as i64), Value::Str(a.kind.name().to_owned()), Value::Str(a.config.clone())]
        })
        .collect()
}

fn assignments_from_values(values: &[Value]) -> Result<Vec<Assignment>, ManagerError> {
    let mut r = ValueReader(values.iter());
    let mut out = Vec::new();
    while r.0.len() > 0 {
        out.push(Assignment { tier_id: r.int()?, kind: TierKind::parse(&r.str()?)?, config: r.str()? });
    }
    Ok(out)
}

struct NodeEntry {
    record: NodeRecord,
    factory: Option<Arc<dyn TierFactory>>,
}

struct TierEntry {
    record: TierRecord,
    handle: Option<Arc<dyn TierHandle>>,
}

#[derive(Default)]
struct Registry {
    nodes: BTreeMap<u64, NodeEntry>,
    tiers: BTreeMap<u64, TierEntry>,
    next_node: u64,
    next_tier: u64,
}

enum Event<'a> {
    Node(u64, &'a str),
    Tier(&'a TierRecord),
    Stop(u64),
}

/// Manager tier state machine.
pub struct Manager {
    clock: Arc<dyn Clock>,
    heartbeat_ms: u64,
    // Serializes commands; heartbeats and status only take `reg`.
    commands: Mutex<()>,
    reg: Mutex<Registry>,
    log: Mutex<Option<File>>,
}

impl Manager {
    pub fn new(clock: Arc<dyn Clock>, heartbeat_ms: u64) -> Self {
        assert!(heartbeat_ms > 0, "heartbeat interval must be positive");
        let reg = Registry { next_node: 1, next_tier: 1, ..Default::default() };
        Self { clock, heartbeat_ms, commands: Mutex::new(()), reg: Mutex::new(reg), log: Mutex::new(None) }
    }

    /// Restores registrations and allocations from an event log and keeps
    /// appending to it. Restored tiers wait for their nodes to report in.
    pub fn open(path: &Path, clock: Arc<dyn Clock>, heartbeat_ms: u64) -> Result<Self, ManagerError> {
        let m = Self::new(clock, heartbeat_ms);
        let io = |e: std::io::Error| ManagerError::Log(format!("{}: {e}", path.display()));
        if path.exists() {
            let now = m.clock.now_ms();
            let mut reg = m.reg.lock();
            for line in BufReader::new(File::open(path).map_err(io)?).lines() {
                let line = line.map_err(io)?;
                let f: Vec<&str> = line.split('\t').collect();
                let num = |i: usize| f.get(i).and_then(|s| s.parse::<u64>().ok());
                match (f.first().copied(), f.len()) {
                    (Some("node"), 3) => {
                        let Some(id) = num(1) else { continue };
                        let record = NodeRecord {
                            node_id: id,
                            address: f[2].to_owned(),
                            registered_at: now,
                            last_heartbeat: now,
                            status: NodeStatus::Alive,
                        };
                        reg.nodes.insert(id, NodeEntry { record, factory: None });
                        reg.next_node = reg.next_node.max(id + 1);
                    }
                    (Some("tier"), 5) => {
                        let (Some(id), Some(node), Ok(kind)) = (num(1), num(2), TierKind::parse(f[3])) else {
                            continue;
                        };
                        let record = TierRecord {
                            tier_id: id,
                            kind,
                            node_id: node,
                            config: f[4].to_owned(),
                            state: TierState::Starting,
                        };
                        reg.tiers.insert(id, TierEntry { record, handle: None });
                        reg.next_tier = reg.next_tier.max(id + 1);
                    }
                    (Some("stop"), 2) => {
                        if let Some(t) = num(1).and_then(|id| reg.tiers.get_mut(&id)) {
                            t.record.state = TierState::Stopped;
                        }
                    }
                    _ => tracing::warn!(line = %line, "skipping unreadable manager log line"),
                }
            }
        }
        let file = OpenOptions::new().create(true).append(true).open(path).map_err(io)?;
        *m.log.lock() = Some(file);
        Ok(m)
    }

    pub fn heartbeat_interval_ms(&self) -> u64 {
        self.heartbeat_ms
    }

    fn record(&self, event: Event<'_>) -> Result<(), ManagerError> {
        let mut log = self.log.lock();
        let Some(file) = log.as_mut() else { return Ok(()) };
        let line = match event {
            Event::Node(id, addr) => format!("node\t{id}\t{addr}\n"),
            Event::Tier(t) => format!("tier\t{}\t{}\t{}\t{}\n", t.tier_id, t.node_id, t.kind, t.config),
            Event::Stop(id) => format!("stop\t{id}\n"),
        };
        file.write_all(line.as_bytes()).and_then(|_| file.flush()).map_err(|e| ManagerError::Log(e.to_string()))
    }

    fn check_field(what: &str, s: &str) -> Result<(), ManagerError> {
        if s.chars().any(|c| c.is_control()) {
            return Err(ManagerError::BadRequest(format!("{what} contains control characters")));
        }
        Ok(())
    }

    /// Registers a node that hosts tiers elsewhere and polls for its
    /// assignments.
    pub fn register_node(&self, address: &str) -> Result<u64, ManagerError> {
        self.register(address, None)
    }

    /// Registers a node whose tiers this manager starts directly.
    pub fn register_local(&self, address: &str, factory: Arc<dyn TierFactory>) -> Result<u64, ManagerError> {
        self.register(address, Some(factory))
    }

    fn register(&self, address: &str, factory: Option<Arc<dyn TierFactory>>) -> Result<u64, ManagerError> {
        Self::check_field("address", address)?;
        if address.is_empty() {
            return Err(ManagerError::BadRequest("empty address".into()));
        }
        let _cmd = self.commands.lock();
        let now = self.clock.now_ms();
        let id = {
            let mut reg = self.reg.lock();
            if reg.nodes.values().any(|n| n.record.address == address) {
                return Err(ManagerError::DuplicateAddress(address.to_owned()));
            }
            let id = reg.next_node;
            reg.next_node += 1;
            let record = NodeRecord {
                node_id: id,
                address: address.to_owned(),
                registered_at: now,
                last_heartbeat: now,
                status: NodeStatus::Alive,
            };
            reg.nodes.insert(id, NodeEntry { record, factory });
            id
        };
        self.record(Event::Node(id, address))?;
        tracing::info!(node = id, address, "node registered");
        Ok(id)
    }

    /// Attaches a factory to an already known node (after a manager
    /// restart) and starts the tiers assigned to it.
    pub fn attach_factory(&self, node_id: u64, factory: Arc<dyn TierFactory>) -> Result<(), ManagerError> {
        let _cmd = self.commands.lock();
        let pending: Vec<TierRecord> = {
            let mut reg = self.reg.lock();
            let node = reg.nodes.get_mut(&node_id).ok_or(ManagerError::NodeUnknown(node_id))?;
            node.factory = Some(Arc::clone(&factory));
            reg.tiers
                .values()
                .filter(|t| t.record.node_id == node_id && t.record.state != TierState::Stopped)
                .map(|t| t.record.clone())
                .collect()
        };
        for t in pending {
            let handle: Arc<dyn TierHandle> = Arc::from(factory.build(t.kind, &t.config)?);
            handle.start()?;
            let mut reg = self.reg.lock();
            if let Some(e) = reg.tiers.get_mut(&t.tier_id) {
                e.record.state = TierState::Running;
                e.handle = Some(handle);
            }
        }
        Ok(())
    }

    fn status_of(&self, rec: &NodeRecord, now: u64) -> NodeStatus {
        NodeStatus::from_age(now.saturating_sub(rec.last_heartbeat), self.heartbeat_ms)
    }

    fn live_node(&self, reg: &Registry, node_id: u64, now: u64) -> Result<Option<Arc<dyn TierFactory>>, ManagerError> {
        let node = reg.nodes.get(&node_id).ok_or(ManagerError::NodeUnknown(node_id))?;
        if self.status_of(&node.record, now) == NodeStatus::Dead {
            return Err(ManagerError::NodeDead(node_id));
        }
        Ok(node.factory.clone())
    }

    /// Allocates a tier of `kind` on `node_id`.
    pub fn allocate(&self, node_id: u64, kind: &str, config: &str) -> Result<u64, ManagerError> {
        let _cmd = self.commands.lock();
        self.allocate_locked(node_id, kind, config)
    }

    fn allocate_locked(&self, node_id: u64, kind: &str, config: &str) -> Result<u64, ManagerError> {
        Self::check_field("config", config)?;
        let kind = TierKind::parse(kind)?;
        let now = self.clock.now_ms();
        let (factory, tier_id) = {
            let reg = self.reg.lock();
            if kind == TierKind::Gmt {
                return Err(ManagerError::AlreadyAllocated(TierKind::Gmt));
            }
            let factory = self.live_node(&reg, node_id, now)?;
            if kind == TierKind::Dst
                && reg.tiers.values().any(|t| t.record.kind == TierKind::Dst && t.record.state != TierState::Stopped)
            {
                return Err(ManagerError::AlreadyAllocated(TierKind::Dst));
            }
            (factory, reg.next_tier)
        };
        let mut record = TierRecord { tier_id, kind, node_id, config: config.to_owned(), state: TierState::Starting };
        let handle = match factory {
            Some(f) => {
                let h: Arc<dyn TierHandle> = Arc::from(create_tier(&*f, kind.name(), config)?);
                h.start()?;
                record.state = TierState::Running;
                Some(h)
            }
            None => None,
        };
        self.record(Event::Tier(&record))?;
        let mut reg = self.reg.lock();
        reg.next_tier += 1;
        reg.tiers.insert(tier_id, TierEntry { record, handle });
        tracing::info!(tier = tier_id, %kind, node = node_id, "tier allocated");
        Ok(tier_id)
    }

    /// Stops a tier. Stopping a stopped tier is a no-op.
    pub fn deallocate(&self, tier_id: u64) -> Result<(), ManagerError> {
        let _cmd = self.commands.lock();
        self.deallocate_locked(tier_id).map(|_| ())
    }

    fn deallocate_locked(&self, tier_id: u64) -> Result<TierRecord, ManagerError> {
        if tier_id == GMT_TIER_ID {
            return Err(ManagerError::ManagerTier);
        }
        let (record, handle, was_stopped) = {
            let mut reg = self.reg.lock();
            let e = reg.tiers.get_mut(&tier_id).ok_or(ManagerError::TierUnknown(tier_id))?;
            let was_stopped = e.record.state == TierState::Stopped;
            e.record.state = TierState::Stopped;
            (e.record.clone(), e.handle.take(), was_stopped)
        };
        if let Some(h) = handle {
            h.stop();
        }
        if !was_stopped {
            self.record(Event::Stop(tier_id))?;
            tracing::info!(tier = tier_id, "tier deallocated");
        }
        Ok(record)
    }

    /// Stops a tier and starts one with the same kind and config on
    /// `dest`. Returns the new tier id.
    pub fn move_tier(&self, tier_id: u64, dest: u64) -> Result<u64, ManagerError> {
        let _cmd = self.commands.lock();
        if tier_id == GMT_TIER_ID {
            return Err(ManagerError::ManagerTier);
        }
        {
            let reg = self.reg.lock();
            if !reg.tiers.contains_key(&tier_id) {
                return Err(ManagerError::TierUnknown(tier_id));
            }
            self.live_node(&reg, dest, self.clock.now_ms())?;
        }
        let old = self.deallocate_locked(tier_id)?;
        self.allocate_locked(dest, old.kind.name(), &old.config)
    }

    /// Refreshes a node's liveness and records which tiers it runs.
    /// Returns the tiers the node should be running.
    pub fn heartbeat(&self, node_id: u64, running: &[u64]) -> Result<Vec<Assignment>, ManagerError> {
        let now = self.clock.now_ms();
        let mut reg = self.reg.lock();
        let node = reg.nodes.get_mut(&node_id).ok_or(ManagerError::NodeUnknown(node_id))?;
        node.record.last_heartbeat = now;
        let mut out = Vec::new();
        for t in reg.tiers.values_mut().filter(|t| t.record.node_id == node_id) {
            if t.record.state == TierState::Stopped {
                continue;
            }
            if t.handle.is_none() && running.contains(&t.record.tier_id) {
                t.record.state = TierState::Running;
            }
            out.push(Assignment { tier_id: t.record.tier_id, kind: t.record.kind, config: t.record.config.clone() });
        }
        Ok(out)
    }

    pub fn status_report(&self) -> StatusReport {
        let now = self.clock.now_ms();
        let reg = self.reg.lock();
        let nodes = reg
            .nodes
            .values()
            .map(|n| NodeRecord { status: self.status_of(&n.record, now), ..n.record.clone() })
            .collect();
        let gmt = TierRecord {
            tier_id: GMT_TIER_ID,
            kind: TierKind::Gmt,
            node_id: 0,
            config: String::new(),
            state: TierState::Running,
        };
        let tiers = std::iter::once(gmt).chain(reg.tiers.values().map(|t| t.record.clone())).collect();
        StatusReport { nodes, tiers }
    }

    /// Stops every locally started tier.
    pub fn shutdown(&self) {
        let _cmd = self.commands.lock();
        let handles: Vec<_> = self.reg.lock().tiers.values_mut().filter_map(|t| t.handle.clone()).collect();
        for h in handles {
            h.stop();
        }
    }

    pub fn execute(&self, msg: &SystemDemandMsg) -> Result<Vec<Value>, ManagerError> {
        let int = |i: u64| Value::Int(i as i64);
        Ok(match msg {
            SystemDemandMsg::RegisterNode { address } => vec![int(self.register_node(address)?)],
            SystemDemandMsg::Allocate { node_id, kind, config } => vec![int(self.allocate(*node_id, kind, config)?)],
            SystemDemandMsg::Deallocate { tier_id } => {
                self.deallocate(*tier_id)?;
                vec![]
            }
            SystemDemandMsg::Move { tier_id, dest } => vec![int(self.move_tier(*tier_id, *dest)?)],
            SystemDemandMsg::Heartbeat { node_id, running } => {
                assignments_to_values(&self.heartbeat(*node_id, running)?)
            }
            SystemDemandMsg::Status => self.status_report().to_values(),
        })
    }
}

impl SystemHandler for Manager {
    fn handle_system(&self, sig: &DemandSignature) -> Result<Vec<Value>, ServiceError> {
        SystemDemandMsg::from_signature(sig)
            .and_then(|m| self.execute(&m))
            .map_err(|e| ServiceError::new(e.code(), e.detail()))
    }
}

/// Typed client for a manager reached through a transport agent.
pub struct GmtClient<A: Agent> {
    remote: RemoteStore<A>,
}

impl<A: Agent> GmtClient<A> {
    pub fn new(agent: A) -> Self {
        Self { remote: RemoteStore::new(agent) }
    }

    pub fn call(&self, msg: &SystemDemandMsg) -> Result<Vec<Value>, ManagerError> {
        let req = Request::System(msg.to_signature());
        let frame = self.remote.raw(&req)?;
        match Reply::decode_for(&req, &frame).map_err(StoreError::from)? {
            Reply::System(values) => Ok(values),
            Reply::Error { code, message } => Err(ManagerError::from_wire(&code, &message)),
            other => Err(ManagerError::BadRequest(format!("unexpected reply {other:?}"))),
        }
    }

    fn single_id(&self, msg: &SystemDemandMsg) -> Result<u64, ManagerError> {
        let values = self.call(msg)?;
        let mut r = ValueReader(values.iter());
        let id = r.int()?;
        r.end()?;
        Ok(id)
    }

    pub fn register_node(&self, address: &str) -> Result<u64, ManagerError> {
        self.single_id(&SystemDemandMsg::RegisterNode { address: address.to_owned() })
    }

    pub fn allocate(&self, node_id: u64, kind: &str, config: &str) -> Result<u64, ManagerError> {
        self.single_id(&SystemDemandMsg::Allocate { node_id, kind: kind.to_owned(), config: config.to_owned() })
    }

    pub fn deallocate(&self, tier_id: u64) -> Result<(), ManagerError> {
        self.call(&SystemDemandMsg::Deallocate { tier_id }).map(|_| ())
    }

    pub fn move_tier(&self, tier_id: u64, dest: u64) -> Result<u64, ManagerError> {
        self.single_id(&SystemDemandMsg::Move { tier_id, dest })
    }

    pub fn heartbeat(&self, node_id: u64, running: &[u64]) -> Result<Vec<Assignment>, ManagerError> {
        assignments_from_values(&self.call(&SystemDemandMsg::Heartbeat { node_id, running: running.to_vec() })?)
    }

    pub fn status(&self) -> Result<StatusReport, ManagerError> {
        StatusReport::from_values(&self.call(&SystemDemandMsg::Status)?)
    }
}

/// Ids of the non-stopped tiers of `kind` in a report.
pub fn live_tiers(report: &StatusReport, kind: TierKind) -> BTreeSet<u64> {
    report.tiers.iter().filter(|t| t.kind == kind && t.state != TierState::Stopped).map(|t| t.tier_id).collect()
}
