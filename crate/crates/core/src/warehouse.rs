//! The demand store: a warehouse of demands and their results, a pending
//! queue handed out under exclusive leases, and a resource map holding
//! compiled programs and classifier models.
//!
//! State machine per signature:
//!
//! ```text
//! PENDING --claim--> IN_PROCESS --fulfill--> COMPUTED (terminal)
//!    ^                   |
//!    +---lease expiry----+
//! ```
//!
//! With a log path the store appends every deposit, completion and
//! resource write as a framed record and replays them on open.

use std::collections::{BTreeSet, HashMap, HashSet};
use std::fs::{File, OpenOptions};
use std::io::{self, BufWriter, Read};
use std::path::Path;
use std::sync::Arc;
use std::time::{Duration, Instant};

use parking_lot::{Condvar, Mutex};
use thiserror::Error;

use crate::clock::{self, Clock};
use crate::codec::{self, CodecError, Reader, Writer};
use crate::lang;
use crate::model::{Demand, DemandKind, DemandSignature, DemandState, KindSet, Value};
use crate::transport::frame::{self, FrameError, MsgType};

pub const DEFAULT_LEASE_MS: u64 = 5000;
pub const DEFAULT_SWEEP_MS: u64 = 500;

/// Resource names with this prefix hold arbitrary bytes (classifier
/// models); every other resource must decode as a compiled program.
pub const MODEL_PREFIX: &str = "model:";

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum StoreError {
    #[error("malformed demand: {0}")]
    MalformedDemand(String),
    #[error("demand is not claimed by this worker")]
    NotClaimed,
    #[error("demand already computed with a different value")]
    ConflictingResult,
    #[error("non-finite value")]
    NonFiniteValue,
    #[error("not found")]
    NotFound,
    #[error("timed out waiting for result")]
    Timeout,
    #[error("malformed compiled program: {0}")]
    MalformedGeer(String),
    #[error("resource already stored with different bytes")]
    ConflictingResource,
    #[error("lease duration must be positive")]
    InvalidLease,
    #[error("transport unreachable: {0}")]
    TransportUnreachable(String),
    #[error("protocol error: {0}")]
    ProtocolError(String),
    #[error("storage error: {0}")]
    Storage(String),
    #[error("{code}: {message}")]
    Remote { code: String, message: String },
}

impl StoreError {
    pub fn code(&self) -> &str {
        match self {
            StoreError::MalformedDemand(_) => "MalformedDemand",
            StoreError::NotClaimed => "NotClaimed",
            StoreError::ConflictingResult => "ConflictingResult",
            StoreError::NonFiniteValue => "NonFiniteValue",
            StoreError::NotFound => "NotFound",
            StoreError::Timeout => "Timeout",
            StoreError::MalformedGeer(_) => "MalformedGeer",
            StoreError::ConflictingResource => "ConflictingResource",
            StoreError::InvalidLease => "InvalidLease",
            StoreError::TransportUnreachable(_) => "TransportUnreachable",
            StoreError::ProtocolError(_) => "ProtocolError",
            StoreError::Storage(_) => "Storage",
            StoreError::Remote { code, .. } => code,
        }
    }

    /// Rebuilds an error from the code and message carried by an ERR reply.
    pub fn from_code(code: &str, message: &str) -> Self {
        match code {
            "MalformedDemand" => StoreError::MalformedDemand(message.to_owned()),
            "NotClaimed" => StoreError::NotClaimed,
            "ConflictingResult" => StoreError::ConflictingResult,
            "NonFiniteValue" => StoreError::NonFiniteValue,
            "NotFound" => StoreError::NotFound,
            "Timeout" => StoreError::Timeout,
            "MalformedGeer" => StoreError::MalformedGeer(message.to_owned()),
            "ConflictingResource" => StoreError::ConflictingResource,
            "InvalidLease" => StoreError::InvalidLease,
            "Storage" => StoreError::Storage(message.to_owned()),
            _ => StoreError::Remote { code: code.to_owned(), message: message.to_owned() },
        }
    }

    pub fn is_transport(&self) -> bool {
        matches!(self, StoreError::TransportUnreachable(_) | StoreError::ProtocolError(_))
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum DepositOutcome {
    AlreadyComputed(Value),
    Enqueued,
    DuplicatePending,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct StoreStats {
    pub deposits: u64,
    pub hits: u64,
    pub misses: u64,
    pub computed: u64,
    pub pending: u64,
    pub in_process: u64,
    pub redeliveries: u64,
}

impl StoreStats {
    pub fn total(&self) -> u64 {
        self.computed + self.pending + self.in_process
    }
}

/// Operations every tier uses to talk to the store, whether it lives in
/// the same process or behind a transport agent.
pub trait StoreHandle: Send + Sync {
    /// Adds a pending demand, or answers it from the warehouse. A demand
    /// deposited already COMPUTED publishes a locally computed result.
    fn deposit(&self, demand: &Demand) -> Result<DepositOutcome, StoreError>;
    fn claim(&self, worker: &str, kinds: KindSet, lease_ms: u64) -> Result<Option<Demand>, StoreError>;
    fn fulfill(&self, sig: &DemandSignature, value: &Value, worker: &str) -> Result<(), StoreError>;
    fn fetch(&self, sig: &DemandSignature) -> Result<(DemandState, Option<Value>), StoreError>;
    fn await_result(&self, sig: &DemandSignature, timeout_ms: u64) -> Result<Value, StoreError>;
    fn put_resource(&self, id: &str, bytes: &[u8]) -> Result<(), StoreError>;
    fn get_resource(&self, id: &str) -> Result<Vec<u8>, StoreError>;
    fn stats(&self) -> Result<StoreStats, StoreError>;
}

impl<T: StoreHandle + ?Sized> StoreHandle for Arc<T> {
    fn deposit(&self, demand: &Demand) -> Result<DepositOutcome, StoreError> {
        (**self).deposit(demand)
    }
    fn claim(&self, worker: &str, kinds: KindSet, lease_ms: u64) -> Result<Option<Demand>, StoreError> {
        (**self).claim(worker, kinds, lease_ms)
    }
    fn fulfill(&self, sig: &DemandSignature, value: &Value, worker: &str) -> Result<(), StoreError> {
        (**self).fulfill(sig, value, worker)
    }
    fn fetch(&self, sig: &DemandSignature) -> Result<(DemandState, Option<Value>), StoreError> {
        (**self).fetch(sig)
    }
    fn await_result(&self, sig: &DemandSignature, timeout_ms: u64) -> Result<Value, StoreError> {
        (**self).await_result(sig, timeout_ms)
    }
    fn put_resource(&self, id: &str, bytes: &[u8]) -> Result<(), StoreError> {
        (**self).put_resource(id, bytes)
    }
    fn get_resource(&self, id: &str) -> Result<Vec<u8>, StoreError> {
        (**self).get_resource(id)
    }
    fn stats(&self) -> Result<StoreStats, StoreError> {
        (**self).stats()
    }
}

#[derive(Debug, Clone)]
pub struct StoreEntry {
    pub demand: Demand,
    pub deposited_at: u64,
    pub computed_at: Option<u64>,
    pub hit_count: u64,
    lease_holder: Option<String>,
}

type QueueKey = (u64, Vec<u8>);

#[derive(Default)]
struct State {
    entries: HashMap<Vec<u8>, StoreEntry>,
    // One FIFO per demand kind, ordered by (deposit time, signature key).
    pending: [BTreeSet<QueueKey>; 4],
    in_process: HashSet<Vec<u8>>,
    resources: HashMap<String, Vec<u8>>,
    deposits: u64,
    hits: u64,
    misses: u64,
    computed: u64,
    redeliveries: u64,
}

impl State {
    fn enqueue(&mut self, key: Vec<u8>, kind: DemandKind, deposited_at: u64) {
        self.pending[kind.code() as usize].insert((deposited_at, key));
    }

    fn dequeue(&mut self, key: &[u8], kind: DemandKind, deposited_at: u64) {
        self.pending[kind.code() as usize].remove(&(deposited_at, key.to_vec()));
    }

    fn pending_count(&self) -> u64 {
        self.pending.iter().map(|q| q.len() as u64).sum()
    }

    /// Marks an entry COMPUTED, dropping any queue slot or lease.
    fn complete(&mut self, key: &[u8], value: Value, now: u64) {
        let entry = self.entries.get_mut(key).expect("entry exists");
        let kind = entry.demand.signature.kind;
        let deposited_at = entry.deposited_at;
        let prev = entry.demand.state;
        entry.demand.state = DemandState::Computed;
        entry.demand.result = Some(value);
        entry.demand.lease_expiry = None;
        entry.lease_holder = None;
        entry.computed_at = Some(now);
        match prev {
            DemandState::Pending => self.dequeue(key, kind, deposited_at),
            DemandState::InProcess => {
                self.in_process.remove(key);
            }
            DemandState::Computed => unreachable!("completing a computed entry"),
        }
        self.computed += 1;
    }
}

enum LogRecord<'a> {
    Deposit(&'a Demand),
    Fulfill(&'a Demand),
    Resource(&'a str, &'a [u8]),
}

/// In-process demand store.
pub struct Warehouse {
    state: Mutex<State>,
    changed: Condvar,
    clock: Arc<dyn Clock>,
    log: Option<Mutex<BufWriter<File>>>,
}

impl Warehouse {
    pub fn new() -> Self {
        Self::with_clock(clock::monotonic())
    }

    pub fn with_clock(clock: Arc<dyn Clock>) -> Self {
        Self { state: Mutex::new(State::default()), changed: Condvar::new(), clock, log: None }
    }

    /// Opens a store backed by an append-only log, replaying existing
    /// records first. A torn final record is truncated away.
    pub fn open(path: &Path, clock: Arc<dyn Clock>) -> Result<Self, StoreError> {
        let storage = |e: io::Error| StoreError::Storage(format!("{}: {e}", path.display()));
        let mut store = Self::with_clock(clock);
        let mut valid_len = 0u64;
        if path.exists() {
            let mut buf = Vec::new();
            File::open(path).and_then(|mut f| f.read_to_end(&mut buf)).map_err(storage)?;
            let mut rest = &buf[..];
            loop {
                match frame::decode_frame(rest) {
                    Ok(Some((f, used))) => {
                        store.replay(f.msg_type, &f.payload)?;
                        rest = &rest[used..];
                        valid_len += used as u64;
                    }
                    Ok(None) => break,
                    Err(e) => return Err(StoreError::Storage(format!("corrupt log: {e}"))),
                }
            }
            if !rest.is_empty() {
                tracing::warn!(bytes = rest.len(), "discarding torn record at end of store log");
            }
        }
        let mut file = OpenOptions::new().create(true).write(true).truncate(false).open(path).map_err(storage)?;
        file.set_len(valid_len).map_err(storage)?;
        io::Seek::seek(&mut file, io::SeekFrom::End(0)).map_err(storage)?;
        store.log = Some(Mutex::new(BufWriter::new(file)));
        Ok(store)
    }

    fn replay(&mut self, msg: MsgType, payload: &[u8]) -> Result<(), StoreError> {
        let bad = |e: CodecError| StoreError::Storage(format!("corrupt log record: {e}"));
        let now = self.clock.now_ms();
        let st = self.state.get_mut();
        match msg {
            MsgType::Deposit => {
                let d = codec::decode_demand(payload).map_err(bad)?;
                let key = d.signature.key();
                if !st.entries.contains_key(&key) {
                    st.enqueue(key.clone(), d.signature.kind, now);
                    st.entries.insert(
                        key,
                        StoreEntry {
                            demand: Demand::pending(d.signature),
                            deposited_at: now,
                            computed_at: None,
                            hit_count: 0,
                            lease_holder: None,
                        },
                    );
                }
            }
            MsgType::Fulfill => {
                let d = codec::decode_demand(payload).map_err(bad)?;
                let value = d.result.ok_or_else(|| StoreError::Storage("fulfill record without value".into()))?;
                let key = d.signature.key();
                match st.entries.get(&key).map(|e| e.demand.state) {
                    Some(DemandState::Computed) => {}
                    Some(_) => st.complete(&key, value, now),
                    None => {
                        st.entries.insert(
                            key.clone(),
                            StoreEntry {
                                demand: Demand::pending(d.signature.clone()),
                                deposited_at: now,
                                computed_at: None,
                                hit_count: 0,
                                lease_holder: None,
                            },
                        );
                        st.enqueue(key.clone(), d.signature.kind, now);
                        st.complete(&key, value, now);
                    }
                }
            }
            MsgType::ResourcePut => {
                let mut r = Reader::new(payload);
                let id = r.str().map_err(bad)?;
                let bytes = r.bytes().map_err(bad)?;
                r.finish().map_err(bad)?;
                st.resources.insert(id, bytes);
            }
            other => return Err(StoreError::Storage(format!("unexpected log record {other:?}"))),
        }
        Ok(())
    }

    fn append(&self, record: LogRecord<'_>) -> Result<(), StoreError> {
        let Some(log) = &self.log else { return Ok(()) };
        let (msg, payload) = match record {
            LogRecord::Deposit(d) => (MsgType::Deposit, codec::encode_demand(d)),
            LogRecord::Fulfill(d) => (MsgType::Fulfill, codec::encode_demand(d)),
            LogRecord::Resource(id, bytes) => {
                let mut w = Writer::new();
                w.str(id).bytes(bytes);
                (MsgType::ResourcePut, w.into_bytes())
            }
        };
        let mut log = log.lock();
        frame::write_frame(&mut *log, msg, &payload).map_err(|e| StoreError::Storage(FrameError::Io(e).to_string()))
    }

    pub fn now_ms(&self) -> u64 {
        self.clock.now_ms()
    }

    /// Returns expired leases to the pending queue.
    pub fn sweep_expired_leases(&self, now: u64) -> usize {
        let mut st = self.state.lock();
        let expired: Vec<Vec<u8>> = st
            .in_process
            .iter()
            .filter(|k| st.entries[*k].demand.lease_expiry.is_some_and(|t| t < now))
            .cloned()
            .collect();
        for key in &expired {
            let entry = st.entries.get_mut(key).unwrap();
            entry.demand.state = DemandState::Pending;
            entry.demand.lease_expiry = None;
            entry.demand.attempts += 1;
            let holder = entry.lease_holder.take();
            let (kind, at) = (entry.demand.signature.kind, entry.deposited_at);
            tracing::debug!(sig = %entry.demand.signature, ?holder, "lease expired, redelivering");
            st.in_process.remove(key);
            st.enqueue(key.clone(), kind, at);
            st.redeliveries += 1;
        }
        expired.len()
    }

    /// Snapshot of one entry, for inspection.
    pub fn entry(&self, sig: &DemandSignature) -> Option<StoreEntry> {
        self.state.lock().entries.get(&sig.key()).cloned()
    }

    /// Runs [`Self::sweep_expired_leases`] every `interval` on a background
    /// thread until the returned guard is dropped.
    pub fn spawn_sweeper(self: &Arc<Self>, interval: Duration) -> SweeperGuard {
        let stop = Arc::new((Mutex::new(false), Condvar::new()));
        let store = Arc::clone(self);
        let signal = Arc::clone(&stop);
        let handle = std::thread::Builder::new()
            .name("lease-sweeper".into())
            .spawn(move || {
                let (lock, cv) = &*signal;
                let mut stopped = lock.lock();
                while !*stopped {
                    cv.wait_for(&mut stopped, interval);
                    if *stopped {
                        break;
                    }
                    let n = store.sweep_expired_leases(store.now_ms());
                    if n > 0 {
                        tracing::info!(redelivered = n, "swept expired leases");
                    }
                }
            })
            .expect("spawn sweeper thread");
        SweeperGuard { stop, handle: Some(handle) }
    }

    fn validate_resource(id: &str, bytes: &[u8]) -> Result<(), StoreError> {
        if id.starts_with(MODEL_PREFIX) {
            return Ok(());
        }
        let geer = lang::decode_geer(bytes).map_err(|e| StoreError::MalformedGeer(e.to_string()))?;
        if geer.program_id != id {
            return Err(StoreError::MalformedGeer(format!(
                "program id `{}` does not match resource `{id}`",
                geer.program_id
            )));
        }
        Ok(())
    }
}

impl Default for Warehouse {
    fn default() -> Self {
        Self::new()
    }
}

pub struct SweeperGuard {
    stop: Arc<(Mutex<bool>, Condvar)>,
    handle: Option<std::thread::JoinHandle<()>>,
}

impl Drop for SweeperGuard {
    fn drop(&mut self) {
        *self.stop.0.lock() = true;
        self.stop.1.notify_all();
        if let Some(h) = self.handle.take() {
            let _ = h.join();
        }
    }
}

impl StoreHandle for Warehouse {
    fn deposit(&self, demand: &Demand) -> Result<DepositOutcome, StoreError> {
        let sig = &demand.signature;
        if !sig.is_well_formed() {
            return Err(StoreError::MalformedDemand(format!("ill-formed signature {sig}")));
        }
        let publish = match (demand.state, &demand.result) {
            (DemandState::Pending, None) => None,
            (DemandState::Computed, Some(v)) if sig.kind == DemandKind::Intensional => Some(v),
            _ => {
                return Err(StoreError::MalformedDemand(format!(
                    "cannot deposit a {:?} {:?} demand",
                    demand.state, sig.kind
                )))
            }
        };
        if publish.is_some_and(|v| !v.is_finite()) {
            return Err(StoreError::NonFiniteValue);
        }
        let key = sig.key();
        let now = self.clock.now_ms();
        let mut st = self.state.lock();
        let existing = st.entries.get(&key).map(|e| (e.demand.state, e.demand.result.clone()));
        match (existing, publish) {
            (Some((DemandState::Computed, Some(v))), None) => {
                st.hits += 1;
                st.entries.get_mut(&key).unwrap().hit_count += 1;
                Ok(DepositOutcome::AlreadyComputed(v))
            }
            (Some((DemandState::Computed, Some(v))), Some(p)) => {
                if &v == p {
                    Ok(DepositOutcome::AlreadyComputed(v))
                } else {
                    Err(StoreError::ConflictingResult)
                }
            }
            (Some(_), None) => Ok(DepositOutcome::DuplicatePending),
            (Some(_), Some(p)) => {
                st.complete(&key, p.clone(), now);
                let d = st.entries[&key].demand.clone();
                drop(st);
                self.changed.notify_all();
                self.append(LogRecord::Fulfill(&d))?;
                Ok(DepositOutcome::AlreadyComputed(p.clone()))
            }
            (None, publish) => {
                st.deposits += 1;
                st.misses += 1;
                st.entries.insert(
                    key.clone(),
                    StoreEntry {
                        demand: Demand::pending(sig.clone()),
                        deposited_at: now,
                        computed_at: None,
                        hit_count: 0,
                        lease_holder: None,
                    },
                );
                st.enqueue(key.clone(), sig.kind, now);
                match publish {
                    None => {
                        drop(st);
                        self.append(LogRecord::Deposit(&Demand::pending(sig.clone())))?;
                        Ok(DepositOutcome::Enqueued)
                    }
                    Some(p) => {
                        st.complete(&key, p.clone(), now);
                        drop(st);
                        self.changed.notify_all();
                        self.append(LogRecord::Fulfill(demand))?;
                        Ok(DepositOutcome::AlreadyComputed(p.clone()))
                    }
                }
            }
        }
    }

    fn claim(&self, worker: &str, kinds: KindSet, lease_ms: u64) -> Result<Option<Demand>, StoreError> {
        if lease_ms == 0 {
            return Err(StoreError::InvalidLease);
        }
        let now = self.clock.now_ms();
        let mut st = self.state.lock();
        let next = DemandKind::ALL
            .iter()
            .filter(|k| kinds.contains(**k))
            .filter_map(|k| st.pending[k.code() as usize].first().map(|qk| (qk.clone(), *k)))
            .min();
        let Some((qk, kind)) = next else { return Ok(None) };
        st.pending[kind.code() as usize].remove(&qk);
        let key = qk.1;
        st.in_process.insert(key.clone());
        let entry = st.entries.get_mut(&key).unwrap();
        entry.demand.state = DemandState::InProcess;
        entry.demand.lease_expiry = Some(now + lease_ms);
        entry.lease_holder = Some(worker.to_owned());
        Ok(Some(entry.demand.clone()))
    }

    fn fulfill(&self, sig: &DemandSignature, value: &Value, worker: &str) -> Result<(), StoreError> {
        if !value.is_finite() {
            return Err(StoreError::NonFiniteValue);
        }
        let key = sig.key();
        let now = self.clock.now_ms();
        let mut st = self.state.lock();
        let Some(entry) = st.entries.get(&key) else { return Err(StoreError::NotClaimed) };
        match entry.demand.state {
            DemandState::Computed => {
                return if entry.demand.result.as_ref() == Some(value) {
                    Ok(())
                } else {
                    Err(StoreError::ConflictingResult)
                };
            }
            DemandState::Pending => return Err(StoreError::NotClaimed),
            DemandState::InProcess => {
                if entry.lease_holder.as_deref() != Some(worker) {
                    return Err(StoreError::NotClaimed);
                }
            }
        }
        st.complete(&key, value.clone(), now);
        let d = st.entries[&key].demand.clone();
        drop(st);
        self.changed.notify_all();
        self.append(LogRecord::Fulfill(&d))
    }

    fn fetch(&self, sig: &DemandSignature) -> Result<(DemandState, Option<Value>), StoreError> {
        let mut st = self.state.lock();
        let key = sig.key();
        let Some(entry) = st.entries.get_mut(&key) else {
            st.misses += 1;
            return Err(StoreError::NotFound);
        };
        let state = entry.demand.state;
        let result = entry.demand.result.clone();
        if state == DemandState::Computed {
            entry.hit_count += 1;
            st.hits += 1;
        } else {
            st.misses += 1;
        }
        Ok((state, result))
    }

    fn await_result(&self, sig: &DemandSignature, timeout_ms: u64) -> Result<Value, StoreError> {
        let key = sig.key();
        let deadline = Instant::now() + Duration::from_millis(timeout_ms);
        let mut st = self.state.lock();
        loop {
            match st.entries.get(&key) {
                None => return Err(StoreError::NotFound),
                Some(e) => {
                    if let Some(v) = &e.demand.result {
                        return Ok(v.clone());
                    }
                }
            }
            if self.changed.wait_until(&mut st, deadline).timed_out() {
                return match st.entries.get(&key).and_then(|e| e.demand.result.clone()) {
                    Some(v) => Ok(v),
                    None => Err(StoreError::Timeout),
                };
            }
        }
    }

    fn put_resource(&self, id: &str, bytes: &[u8]) -> Result<(), StoreError> {
        Self::validate_resource(id, bytes)?;
        let mut st = self.state.lock();
        if let Some(existing) = st.resources.get(id) {
            return if existing.as_slice() == bytes { Ok(()) } else { Err(StoreError::ConflictingResource) };
        }
        st.resources.insert(id.to_owned(), bytes.to_vec());
        drop(st);
        self.append(LogRecord::Resource(id, bytes))
    }

    fn get_resource(&self, id: &str) -> Result<Vec<u8>, StoreError> {
        self.state.lock().resources.get(id).cloned().ok_or(StoreError::NotFound)
    }

    fn stats(&self) -> Result<StoreStats, StoreError> {
        let st = self.state.lock();
        Ok(StoreStats {
            deposits: st.deposits,
            hits: st.hits,
            misses: st.misses,
            computed: st.computed,
            pending: st.pending_count(),
            in_process: st.in_process.len() as u64,
            redeliveries: st.redeliveries,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::clock::ManualClock;
    use crate::model::Context;

    fn proc_sig(n: i64) -> DemandSignature {
        DemandSignature::procedural("p", "f", vec![Value::Int(n)])
    }

    fn procedural() -> KindSet {
        KindSet::of(&[DemandKind::Procedural])
    }

    fn store() -> (Warehouse, Arc<ManualClock>) {
        let clock = ManualClock::new(1000);
        (Warehouse::with_clock(clock.clone()), clock)
    }

    #[test]
    fn deposit_outcomes() {
        let (wh, _) = store();
        let s = proc_sig(1);
        assert_eq!(wh.deposit(&Demand::pending(s.clone())), Ok(DepositOutcome::Enqueued));
        assert_eq!(wh.deposit(&Demand::pending(s.clone())), Ok(DepositOutcome::DuplicatePending));
        let d = wh.claim("w", procedural(), 100).unwrap().unwrap();
        assert_eq!(wh.deposit(&Demand::pending(s.clone())), Ok(DepositOutcome::DuplicatePending));
        wh.fulfill(&d.signature, &Value::Int(7), "w").unwrap();
        assert_eq!(wh.deposit(&Demand::pending(s.clone())), Ok(DepositOutcome::AlreadyComputed(Value::Int(7))));
        assert_eq!(wh.entry(&s).unwrap().hit_count, 1);
    }

    #[test]
    fn malformed_deposits() {
        let (wh, _) = store();
        let mut d = Demand::pending(proc_sig(1));
        d.result = Some(Value::Int(1));
        assert!(matches!(wh.deposit(&d), Err(StoreError::MalformedDemand(_))));
        let mut sig = proc_sig(1);
        sig.context = Context::from_pairs([("d", 1)]).unwrap();
        assert!(matches!(wh.deposit(&Demand::pending(sig)), Err(StoreError::MalformedDemand(_))));
        let computed_proc = Demand::computed(proc_sig(2), Value::Int(1));
        assert!(matches!(wh.deposit(&computed_proc), Err(StoreError::MalformedDemand(_))));
    }

    #[test]
    fn claim_rules() {
        let (wh, _) = store();
        assert_eq!(wh.claim("w", procedural(), 100), Ok(None));
        assert_eq!(wh.claim("w", procedural(), 0), Err(StoreError::InvalidLease));
        let intensional = DemandSignature::intensional("p", "x", Context::empty());
        wh.deposit(&Demand::pending(intensional.clone())).unwrap();
        assert_eq!(wh.claim("w", procedural(), 100), Ok(None));
        wh.deposit(&Demand::pending(proc_sig(1))).unwrap();
        let got = wh.claim("w", procedural(), 100).unwrap().unwrap();
        assert_eq!(got.signature, proc_sig(1));
        assert_eq!(got.state, DemandState::InProcess);
        assert_eq!(got.lease_expiry, Some(1100));
        let any = KindSet::of(&DemandKind::ALL);
        assert_eq!(wh.claim("w", any, 100).unwrap().unwrap().signature, intensional);
    }

    #[test]
    fn claim_order_is_deposit_time_then_key() {
        let (wh, clock) = store();
        for n in [5, 3, 9] {
            wh.deposit(&Demand::pending(proc_sig(n))).unwrap();
        }
        clock.advance(1);
        wh.deposit(&Demand::pending(proc_sig(1))).unwrap();
        let order: Vec<_> = std::iter::from_fn(|| wh.claim("w", procedural(), 10).unwrap())
            .map(|d| d.signature.args[0].clone())
            .collect();
        assert_eq!(order, vec![Value::Int(3), Value::Int(5), Value::Int(9), Value::Int(1)]);
    }

    #[test]
    fn fulfill_rules() {
        let (wh, _) = store();
        let s = proc_sig(1);
        assert_eq!(wh.fulfill(&s, &Value::Int(1), "w"), Err(StoreError::NotClaimed));
        wh.deposit(&Demand::pending(s.clone())).unwrap();
        assert_eq!(wh.fulfill(&s, &Value::Int(1), "w"), Err(StoreError::NotClaimed));
        wh.claim("w", procedural(), 100).unwrap();
        assert_eq!(wh.fulfill(&s, &Value::Int(1), "other"), Err(StoreError::NotClaimed));
        assert_eq!(wh.fulfill(&s, &Value::Float(f64::NAN), "w"), Err(StoreError::NonFiniteValue));
        assert_eq!(wh.fulfill(&s, &Value::Int(8), "w"), Ok(()));
        assert_eq!(wh.fulfill(&s, &Value::Int(8), "w"), Ok(()));
        assert_eq!(wh.fulfill(&s, &Value::Int(7), "w"), Err(StoreError::ConflictingResult));
        assert_eq!(wh.fetch(&s), Ok((DemandState::Computed, Some(Value::Int(8)))));
    }

    #[test]
    fn fetch_states() {
        let (wh, _) = store();
        let s = proc_sig(1);
        assert_eq!(wh.fetch(&s), Err(StoreError::NotFound));
        wh.deposit(&Demand::pending(s.clone())).unwrap();
        assert_eq!(wh.fetch(&s), Ok((DemandState::Pending, None)));
    }

    #[test]
    fn await_paths() {
        let wh = Arc::new(Warehouse::new());
        let s = proc_sig(1);
        assert_eq!(wh.await_result(&s, 10), Err(StoreError::NotFound));
        wh.deposit(&Demand::pending(s.clone())).unwrap();
        assert_eq!(wh.await_result(&s, 30), Err(StoreError::Timeout));
        let w2 = Arc::clone(&wh);
        let s2 = s.clone();
        let t = std::thread::spawn(move || {
            let d = w2.claim("w", procedural(), 1000).unwrap().unwrap();
            std::thread::sleep(Duration::from_millis(20));
            w2.fulfill(&d.signature, &Value::Int(42), "w").unwrap();
            let _ = s2;
        });
        assert_eq!(wh.await_result(&s, 5000), Ok(Value::Int(42)));
        t.join().unwrap();
        assert_eq!(wh.await_result(&s, 0), Ok(Value::Int(42)));
    }

    #[test]
    fn sweep_redelivers_expired_only() {
        let (wh, clock) = store();
        assert_eq!(wh.sweep_expired_leases(clock.now_ms()), 0);
        wh.deposit(&Demand::pending(proc_sig(1))).unwrap();
        wh.deposit(&Demand::pending(proc_sig(2))).unwrap();
        wh.claim("a", procedural(), 100).unwrap();
        clock.advance(50);
        wh.claim("b", procedural(), 100).unwrap();
        clock.advance(60);
        assert_eq!(wh.sweep_expired_leases(clock.now_ms()), 1);
        let again = wh.claim("c", procedural(), 100).unwrap().unwrap();
        assert_eq!(again.signature, proc_sig(1));
        assert_eq!(again.attempts, 1);
        assert_eq!(wh.fulfill(&proc_sig(1), &Value::Int(1), "a"), Err(StoreError::NotClaimed));
        assert_eq!(wh.stats().unwrap().redeliveries, 1);
    }

    #[test]
    fn resources() {
        let (wh, _) = store();
        let g = lang::compile("x where x = 1; end", "prog").unwrap();
        let bytes = lang::encode_geer(&g);
        assert_eq!(wh.get_resource("prog"), Err(StoreError::NotFound));
        wh.put_resource("prog", &bytes).unwrap();
        wh.put_resource("prog", &bytes).unwrap();
        assert_eq!(wh.get_resource("prog").unwrap(), bytes);
        assert!(matches!(wh.put_resource("other", &bytes), Err(StoreError::MalformedGeer(_))));
        assert!(matches!(wh.put_resource("junk", b"xx"), Err(StoreError::MalformedGeer(_))));
        wh.put_resource("model:m@1", b"anything").unwrap();
        assert_eq!(wh.put_resource("model:m@1", b"different"), Err(StoreError::ConflictingResource));
    }

    #[test]
    fn stats_counters() {
        let (wh, clock) = store();
        assert_eq!(wh.stats().unwrap(), StoreStats::default());
        let s = proc_sig(1);
        wh.deposit(&Demand::pending(s.clone())).unwrap();
        wh.claim("w", procedural(), 10).unwrap();
        wh.fulfill(&s, &Value::Int(2), "w").unwrap();
        wh.fetch(&s).unwrap();
        let st = wh.stats().unwrap();
        assert_eq!((st.computed, st.hits, st.pending, st.in_process), (1, 1, 0, 0));
        wh.deposit(&Demand::pending(proc_sig(2))).unwrap();
        wh.claim("w", procedural(), 10).unwrap();
        clock.advance(11);
        wh.sweep_expired_leases(clock.now_ms());
        let st = wh.stats().unwrap();
        assert_eq!(st.redeliveries, 1);
        assert_eq!(st.total(), 2);
    }

    #[test]
    fn publishing_computed_intensional_results() {
        let (wh, _) = store();
        let s = DemandSignature::intensional("p", "x", Context::from_pairs([("d", 1)]).unwrap());
        assert_eq!(
            wh.deposit(&Demand::computed(s.clone(), Value::Int(3))),
            Ok(DepositOutcome::AlreadyComputed(Value::Int(3)))
        );
        assert_eq!(wh.deposit(&Demand::computed(s.clone(), Value::Int(4))), Err(StoreError::ConflictingResult));
        let pending = DemandSignature::intensional("p", "y", Context::empty());
        wh.deposit(&Demand::pending(pending.clone())).unwrap();
        wh.claim("g", KindSet::of(&[DemandKind::Intensional]), 100).unwrap();
        wh.deposit(&Demand::computed(pending.clone(), Value::Int(9))).unwrap();
        assert_eq!(wh.fulfill(&pending, &Value::Int(9), "g"), Ok(()));
        assert_eq!(wh.stats().unwrap().in_process, 0);
    }

    #[test]
    fn log_replay_restores_state() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("dst.log");
        let clock = ManualClock::new(0);
        {
            let wh = Warehouse::open(&path, clock.clone()).unwrap();
            wh.deposit(&Demand::pending(proc_sig(1))).unwrap();
            wh.deposit(&Demand::pending(proc_sig(2))).unwrap();
            wh.claim("w", procedural(), 100).unwrap();
            wh.fulfill(&proc_sig(1), &Value::Int(10), "w").unwrap();
            wh.put_resource("model:x", b"abc").unwrap();
        }
        let mut bytes = std::fs::read(&path).unwrap();
        bytes.extend_from_slice(&frame::MAGIC);
        std::fs::write(&path, &bytes).unwrap();
        let wh = Warehouse::open(&path, clock.clone()).unwrap();
        assert_eq!(wh.fetch(&proc_sig(1)), Ok((DemandState::Computed, Some(Value::Int(10)))));
        assert_eq!(wh.fetch(&proc_sig(2)), Ok((DemandState::Pending, None)));
        assert_eq!(wh.get_resource("model:x").unwrap(), b"abc");
        wh.deposit(&Demand::pending(proc_sig(3))).unwrap();
        drop(wh);
        let wh = Warehouse::open(&path, clock).unwrap();
        assert_eq!(wh.stats().unwrap().pending, 2);
    }
}
