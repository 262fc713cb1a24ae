//! The `eduction` command: compiler, evaluator, node runtime, manager
//! and store clients, and the recognition pipeline behind one binary.
//!
//! Results go to standard output as a single line; diagnostics go to
//! standard error. Exit status is 0 on success, 1 for usage errors, 2 for
//! domain errors and 3 when a peer cannot be reached.

pub mod config;
pub mod sig;

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use clap::{Args, Parser, Subcommand};
use eduction_client::{connect_gmt, TcpStore};
use eduction_core::eval::{EvalConfig, EvalError, Evaluator};
use eduction_core::lang::{self, decode_geer, encode_geer};
use eduction_core::manager::{ManagerError, TierHandle, TierKind};
use eduction_core::pipeline::{
    self, corpus, load_sample, model_resource, run_pipeline_distributed, run_pipeline_local, standard_registry,
    top1_hits, Labeled, Mode, Outcome, PipelineConfig, PipelineError, ResultSet, TrainingSet,
};
use eduction_core::tiers::{dwt_tier, LoopSettings};
use eduction_core::{DemandState, StoreError, StoreHandle, Warehouse};
use eduction_server::http::status_json;
use eduction_server::{Node, NodeError, NodeOptions};
use serde_json::json;
use sha2::{Digest, Sha256};
use thiserror::Error;

pub use config::{load_config, Config, ConfigError};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DOMAIN: i32 = 2;
pub const EXIT_TRANSPORT: i32 = 3;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{code}: {message}")]
    Domain { code: String, message: String },
    #[error("{0}")]
    Transport(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => EXIT_USAGE,
            CliError::Domain { .. } => EXIT_DOMAIN,
            CliError::Transport(_) => EXIT_TRANSPORT,
        }
    }

    fn domain(code: &str, message: impl ToString) -> Self {
        CliError::Domain { code: code.to_owned(), message: message.to_string() }
    }
}

impl From<StoreError> for CliError {
    fn from(e: StoreError) -> Self {
        if e.is_transport() {
            CliError::Transport(e.to_string())
        } else {
            CliError::domain(e.code(), &e)
        }
    }
}

impl From<EvalError> for CliError {
    fn from(e: EvalError) -> Self {
        match e {
            EvalError::Store(s) => s.into(),
            e => CliError::domain(e.code(), &e),
        }
    }
}

impl From<PipelineError> for CliError {
    fn from(e: PipelineError) -> Self {
        match e {
            PipelineError::Store(s) => s.into(),
            e => CliError::domain(e.code(), &e),
        }
    }
}

impl From<ManagerError> for CliError {
    fn from(e: ManagerError) -> Self {
        match e {
            ManagerError::Store(s) => s.into(),
            e => CliError::domain(e.code(), &e),
        }
    }
}

impl From<NodeError> for CliError {
    fn from(e: NodeError) -> Self {
        match e {
            NodeError::Config(m) => CliError::Usage(m),
            NodeError::Manager(m) => m.into(),
            NodeError::Store(s) => s.into(),
            NodeError::Io(e) => CliError::Transport(e.to_string()),
        }
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        CliError::Usage(format!("config: {e}"))
    }
}

type CliResult<T = ()> = Result<T, CliError>;

#[derive(Parser, Debug)]
#[command(name = "eduction", version, about = "Demand-driven eduction run-time")]
struct Cli {
    /// Config file; overrides EDUCTION_CONFIG.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Compile a source program to a .geer file.
    Compile {
        source: PathBuf,
        #[arg(short, long)]
        out: PathBuf,
        /// Program id; defaults to the source file stem.
        #[arg(long)]
        id: Option<String>,
    },
    /// Evaluate an identifier of a compiled program.
    Eval {
        geer: PathBuf,
        identifier: String,
        /// Context as dim=tag pairs, e.g. d=5,t=1.
        #[arg(long, default_value = "")]
        ctx: String,
        /// Use a remote demand store instead of an in-process one.
        #[arg(long)]
        dst: Option<String>,
    },
    /// Run a node.
    Node {
        #[command(subcommand)]
        action: NodeCmd,
    },
    /// Talk to a manager.
    Mgr {
        #[arg(long, global = true)]
        gmt: Option<String>,
        #[command(subcommand)]
        action: MgrCmd,
    },
    /// Inspect a demand store.
    Wh {
        #[arg(long, global = true)]
        dst: Option<String>,
        #[command(subcommand)]
        action: WhCmd,
    },
    /// Speaker recognition pipeline.
    Pipeline {
        #[command(subcommand)]
        action: PipelineCmd,
    },
}

#[derive(Subcommand, Debug)]
enum NodeCmd {
    /// Start a node and run until killed.
    Start {
        /// Tiers to host: any of gmt, dst, dgt, dwt.
        #[arg(long, value_delimiter = ',', default_value = "dst,dgt,dwt")]
        tiers: Vec<String>,
        /// Manager address; without it the node hosts its own manager.
        #[arg(long)]
        gmt: Option<String>,
        /// Store address, for nodes that do not host one.
        #[arg(long)]
        dst: Option<String>,
        #[arg(long, default_value = "127.0.0.1")]
        host: String,
        /// Also serve /health, /stats and /status over HTTP on this port.
        #[arg(long)]
        http: Option<u16>,
        /// Worker threads per DGT/DWT tier.
        #[arg(long, default_value_t = 1)]
        workers: usize,
    },
}

#[derive(Subcommand, Debug)]
enum MgrCmd {
    Register {
        address: String,
    },
    Alloc {
        node: u64,
        kind: String,
        /// Tier settings such as workers=2,lease.ms=5000.
        #[arg(long = "tier-config", default_value = "")]
        tier_config: String,
    },
    Dealloc {
        tier: u64,
    },
    Move {
        tier: u64,
        node: u64,
    },
    Status,
}

#[derive(Subcommand, Debug)]
enum WhCmd {
    Stats,
    /// State and value of one demand, by signature text.
    Get {
        signature: String,
    },
}

#[derive(Args, Debug)]
struct Exec {
    /// Feature windows per sample.
    #[arg(long)]
    windows: Option<usize>,
    /// Run stages as demands on a remote store.
    #[arg(long)]
    dst: Option<String>,
}

#[derive(Subcommand, Debug)]
enum PipelineCmd {
    /// Train a model from labelled sample files given as subject=path.
    Train {
        #[arg(required = true)]
        samples: Vec<String>,
        #[arg(short, long)]
        out: PathBuf,
        #[command(flatten)]
        exec: Exec,
    },
    /// Rank subjects for each sample file.
    Classify {
        #[arg(long)]
        model: PathBuf,
        #[arg(required = true)]
        samples: Vec<PathBuf>,
        #[command(flatten)]
        exec: Exec,
    },
    /// Write a synthetic sample, one amplitude per line.
    Gen {
        #[arg(long)]
        subject: u32,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value_t = 512)]
        n: usize,
        #[arg(short, long)]
        out: PathBuf,
    },
    /// Train and classify the synthetic corpus in-process and print the accuracy.
    Demo {
        #[arg(long, default_value_t = 4)]
        subjects: u32,
        #[arg(long)]
        windows: Option<usize>,
        #[arg(long, default_value_t = 2)]
        workers: usize,
        /// Run through an in-process store and workers.
        #[arg(long)]
        distributed: bool,
    },
}

/// Runs one command, writing its result line to `out`.
pub fn run<I, T>(argv: I, out: &mut dyn Write) -> CliResult
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            let _ = write!(out, "{e}");
            return Ok(());
        }
        Err(e) => return Err(CliError::Usage(e.to_string())),
    };
    let cfg = config::resolve(cli.config.as_deref())?;
    match cli.command {
        Command::Compile { source, out: dest, id } => compile(&source, &dest, id, out),
        Command::Eval { geer, identifier, ctx, dst } => eval(&cfg, &geer, &identifier, &ctx, dst, out),
        Command::Node { action: NodeCmd::Start { tiers, gmt, dst, host, http, workers } } => {
            node_start(&cfg, &tiers, gmt, dst, host, http, workers, out)
        }
        Command::Mgr { gmt, action } => mgr(&gmt.unwrap_or_else(|| format!("127.0.0.1:{}", cfg.gmt_port)), action, out),
        Command::Wh { dst, action } => wh(&dst.unwrap_or_else(|| format!("127.0.0.1:{}", cfg.dst_port)), action, out),
        Command::Pipeline { action } => pipeline_cmd(&cfg, action, out),
    }
}

/// Entry point for the binary: runs, reports and returns the exit code.
pub fn main_with_args<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let stdout = std::io::stdout();
    let mut lock = stdout.lock();
    match run(argv, &mut lock) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            match &e {
                CliError::Usage(m) => eprint!("{m}{}", if m.ends_with('\n') { "" } else { "\n" }),
                other => eprintln!("error: {other}"),
            }
            e.exit_code()
        }
    }
}

fn emit(out: &mut dyn Write, line: impl std::fmt::Display) -> CliResult {
    writeln!(out, "{line}").and_then(|_| out.flush()).map_err(|e| CliError::domain("Io", e))
}

fn io_err(path: &Path, e: std::io::Error) -> CliError {
    CliError::domain("Io", format!("{}: {e}", path.display()))
}

fn compile(source: &Path, dest: &Path, id: Option<String>, out: &mut dyn Write) -> CliResult {
    let text = std::fs::read_to_string(source).map_err(|e| io_err(source, e))?;
    let id = match id {
        Some(id) => id,
        None => source
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .ok_or_else(|| CliError::Usage("cannot derive a program id from the source path".into()))?,
    };
    let geer = lang::compile(&text, &id).map_err(|e| CliError::domain(e.code(), &e))?;
    std::fs::write(dest, encode_geer(&geer)).map_err(|e| io_err(dest, e))?;
    emit(out, dest.display())
}

fn read_geer(path: &Path) -> CliResult<(lang::Geer, Vec<u8>)> {
    let bytes = std::fs::read(path).map_err(|e| io_err(path, e))?;
    let geer = decode_geer(&bytes).map_err(|e| CliError::domain("MalformedGeer", e))?;
    Ok((geer, bytes))
}

fn local_workers(store: Arc<Warehouse>, workers: usize, lease_ms: u64) -> CliResult<impl TierHandle> {
    let tier = dwt_tier(store, standard_registry(), LoopSettings { workers: workers.max(1), poll_ms: 2, lease_ms });
    tier.start()?;
    Ok(tier)
}

fn eval(cfg: &Config, geer: &Path, ident: &str, ctx: &str, dst: Option<String>, out: &mut dyn Write) -> CliResult {
    let (geer, bytes) = read_geer(geer)?;
    let ctx = sig::parse_context(ctx).map_err(CliError::Usage)?;
    if !geer.dictionary.contains_key(ident) {
        return Err(CliError::domain(
            "UndefinedIdentifier",
            format!("`{ident}` is not defined in {}", geer.program_id),
        ));
    }
    let value = match dst {
        Some(addr) => {
            let store = TcpStore::new(addr);
            store.put_resource(&geer.program_id, &bytes)?;
            Evaluator::new(&store, EvalConfig::default()).eval_demand(&geer, ident, &ctx)?
        }
        None => {
            let wh = Arc::new(Warehouse::new());
            let tier = local_workers(wh.clone(), 1, cfg.lease_ms)?;
            let v = Evaluator::new(&*wh, EvalConfig::default()).eval_demand(&geer, ident, &ctx);
            tier.stop();
            v?
        }
    };
    if let Some((code, message)) = eduction_core::worker::parse_error_value(&value) {
        return Err(CliError::Domain { code, message });
    }
    emit(out, value)
}

fn tier_kinds(names: &[String]) -> CliResult<Vec<TierKind>> {
    let mut kinds = Vec::new();
    for n in names.iter().map(|n| n.trim()).filter(|n| !n.is_empty()) {
        let k = TierKind::parse(&n.to_ascii_uppercase()).map_err(|e| CliError::Usage(e.to_string()))?;
        if !kinds.contains(&k) {
            kinds.push(k);
        }
    }
    Ok(kinds)
}

#[allow(clippy::too_many_arguments)]
fn node_start(
    cfg: &Config,
    tiers: &[String],
    gmt: Option<String>,
    dst: Option<String>,
    host: String,
    http: Option<u16>,
    workers: usize,
    out: &mut dyn Write,
) -> CliResult {
    let mut kinds = tier_kinds(tiers)?;
    if gmt.is_none() && !kinds.contains(&TierKind::Gmt) {
        kinds.insert(0, TierKind::Gmt);
    }
    let mut opts = NodeOptions::new(kinds);
    opts.gmt = gmt;
    opts.dst = dst;
    opts.host = host;
    opts.dst_port = cfg.dst_port;
    opts.gmt_port = cfg.gmt_port;
    opts.http_port = http;
    opts.heartbeat_ms = cfg.heartbeat_ms;
    opts.tier_config = format!("workers={},lease.ms={}", workers.max(1), cfg.lease_ms);
    opts.data_dir = Some(cfg.log_path.clone());
    let node = Node::start(opts)?;
    let line = json!({
        "node": node.node_id(),
        "address": node.address(),
        "dst": node.dst_addr().map(|a| a.to_string()),
        "gmt": node.gmt_addr().map(|a| a.to_string()),
        "http": node.http_addr().map(|a| a.to_string()),
    });
    emit(out, line)?;
    loop {
        std::thread::sleep(Duration::from_secs(3600));
    }
}

fn mgr(addr: &str, action: MgrCmd, out: &mut dyn Write) -> CliResult {
    let client = connect_gmt(addr);
    match action {
        MgrCmd::Register { address } => emit(out, client.register_node(&address)?),
        MgrCmd::Alloc { node, kind, tier_config } => {
            emit(out, client.allocate(node, &kind.to_ascii_uppercase(), &tier_config)?)
        }
        MgrCmd::Dealloc { tier } => {
            client.deallocate(tier)?;
            emit(out, "ok")
        }
        MgrCmd::Move { tier, node } => emit(out, client.move_tier(tier, node)?),
        MgrCmd::Status => emit(out, status_json(&client.status()?)),
    }
}

fn wh(addr: &str, action: WhCmd, out: &mut dyn Write) -> CliResult {
    let store = TcpStore::new(addr);
    match action {
        WhCmd::Stats => {
            let s = store.stats()?;
            emit(
                out,
                json!({
                    "deposits": s.deposits,
                    "hits": s.hits,
                    "misses": s.misses,
                    "computed": s.computed,
                    "pending": s.pending,
                    "in_process": s.in_process,
                    "redeliveries": s.redeliveries,
                }),
            )
        }
        WhCmd::Get { signature } => {
            let sig = sig::parse_signature(&signature).map_err(CliError::Usage)?;
            match store.fetch(&sig)? {
                (state, Some(v)) => emit(out, format!("{} {v}", state_name(state))),
                (state, None) => emit(out, state_name(state)),
            }
        }
    }
}

fn windows(cfg: &Config, w: Option<usize>) -> usize {
    w.unwrap_or(cfg.pipeline_windows)
}

fn labelled(specs: &[String]) -> CliResult<Vec<Labeled>> {
    specs
        .iter()
        .map(|s| {
            let (subject, path) =
                s.split_once('=').ok_or_else(|| CliError::Usage(format!("sample `{s}` must be subject=path")))?;
            let subject =
                subject.parse().map_err(|_| CliError::Usage(format!("subject `{subject}` is not an integer")))?;
            Ok(Labeled { subject, sample: load_sample(Path::new(path))? })
        })
        .collect()
}

fn results_json(rs: &[ResultSet]) -> serde_json::Value {
    rs.iter().map(|r| json!(r.iter().map(|(s, d)| json!([s, d])).collect::<Vec<_>>())).collect()
}

fn model_size(model: &TrainingSet) -> u64 {
    model.subjects().filter_map(|s| model.subject(s)).map(|(_, n)| n).sum()
}

fn pipeline_cmd(cfg: &Config, action: PipelineCmd, out: &mut dyn Write) -> CliResult {
    match action {
        PipelineCmd::Train { samples, out: dest, exec } => {
            let samples = labelled(&samples)?;
            let w = windows(cfg, exec.windows);
            let model = match exec.dst {
                Some(addr) => {
                    let store = TcpStore::new(addr);
                    let pc = PipelineConfig { windows: w, ..PipelineConfig::default() };
                    match run_pipeline_distributed(&store, &pc, &samples, Mode::Train, None)? {
                        Outcome::Trained { model, .. } => model,
                        Outcome::Classified(_) => unreachable!("training returns a model"),
                    }
                }
                None => {
                    let mut m = TrainingSet::new();
                    run_pipeline_local(w, &mut m, &samples, Mode::Train)?;
                    m
                }
            };
            model.save(&dest)?;
            emit(out, json!({ "model": dest.display().to_string(), "samples": model_size(&model) }))
        }
        PipelineCmd::Classify { model, samples, exec } => {
            let mut trained = TrainingSet::load(&model)?;
            let w = trained.windows().unwrap_or(windows(cfg, exec.windows));
            let samples = samples
                .iter()
                .map(|p| Ok(Labeled { subject: 0, sample: load_sample(p)? }))
                .collect::<CliResult<Vec<_>>>()?;
            let results = match exec.dst {
                Some(addr) => {
                    let store = TcpStore::new(addr);
                    let bytes = trained.encode();
                    let id = format!("cli-{}", hex::encode(&Sha256::digest(&bytes)[..8]));
                    let version = model_size(&trained);
                    store.put_resource(&model_resource(&id, version), &bytes)?;
                    let pc = PipelineConfig { windows: w, ..PipelineConfig::default() };
                    match run_pipeline_distributed(&store, &pc, &samples, Mode::Classify, Some((&id, version)))? {
                        Outcome::Classified(r) => r,
                        Outcome::Trained { .. } => unreachable!("classification returns results"),
                    }
                }
                None => run_pipeline_local(w, &mut trained, &samples, Mode::Classify)?,
            };
            emit(out, results_json(&results))
        }
        PipelineCmd::Gen { subject, seed, n, out: dest } => {
            let s = pipeline::gen_sample(subject, n, seed);
            std::fs::write(&dest, pipeline::format_amplitudes(&s)).map_err(|e| io_err(&dest, e))?;
            emit(out, dest.display())
        }
        PipelineCmd::Demo { subjects, windows: w, workers, distributed } => {
            let w = windows(cfg, w);
            let (train, test) = corpus(subjects, 512, 1..=5, 6..=10);
            let results = if distributed {
                let wh = Arc::new(Warehouse::new());
                let _sweeper = wh.spawn_sweeper(Duration::from_millis(500));
                let tier = local_workers(wh.clone(), workers, cfg.lease_ms)?;
                let pc = PipelineConfig { windows: w, ..PipelineConfig::default() };
                let run = || -> CliResult<Vec<ResultSet>> {
                    let Outcome::Trained { model_id, version, .. } =
                        run_pipeline_distributed(&*wh, &pc, &train, Mode::Train, None)?
                    else {
                        unreachable!("training returns a model")
                    };
                    match run_pipeline_distributed(&*wh, &pc, &test, Mode::Classify, Some((&model_id, version)))? {
                        Outcome::Classified(r) => Ok(r),
                        Outcome::Trained { .. } => unreachable!("classification returns results"),
                    }
                };
                let r = run();
                tier.stop();
                r?
            } else {
                let mut model = TrainingSet::new();
                run_pipeline_local(w, &mut model, &train, Mode::Train)?;
                run_pipeline_local(w, &mut model, &test, Mode::Classify)?
            };
            let hits = top1_hits(&test, &results);
            emit(
                out,
                json!({
                    "correct": hits,
                    "total": test.len(),
                    "accuracy": hits as f64 / test.len().max(1) as f64,
                    "mode": if distributed { "distributed" } else { "local" },
                }),
            )
        }
    }
}

fn state_name(s: DemandState) -> &'static str {
    match s {
        DemandState::Pending => "PENDING",
        DemandState::InProcess => "IN_PROCESS",
        DemandState::Computed => "COMPUTED",
    }
}
