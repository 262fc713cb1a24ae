//! Speaker-recognition style pipeline: load, normalize, window-energy
//! features, nearest-mean classification.
//!
//! The stages are plain functions. [`register_pipeline`] exposes feature
//! extraction and the classifier as procedures so that
//! [`run_pipeline_distributed`] can push them through the store to
//! workers. Classifier state lives in store resources named
//! `model:<id>@<version>`; each train step reads one version and writes
//! the next, so a redelivered train demand rewrites identical bytes.
//!
//! Synthetic samples use SplitMix64 (state increment `0x9E3779B97F4A7C15`,
//! output mix multipliers `0xBF58476D1CE4E5B9` and `0x94D049BB133111EB`,
//! shifts 30/27/31) with initial state `(subject << 32) ^ seed`, so every
//! (subject, seed) pair gets its own noise stream. Each draw maps
//! the top 53 bits to `u` in [0, 1) and the noise term is `0.1 * u - 0.05`.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::fmt::Write as _;
use std::path::Path;

use rand_core::{RngCore, SeedableRng};
use rand_xoshiro::SplitMix64;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::codec::{CodecError, Reader, Writer};
use crate::model::{Demand, DemandSignature, Value};
use crate::warehouse::{DepositOutcome, StoreError, StoreHandle, MODEL_PREFIX};
use crate::worker::{self, ProcEnv, ProcedureRegistry, WorkerError};

pub const DEFAULT_WINDOWS: usize = 8;
pub const PIPELINE_PROGRAM: &str = "recog";
pub const PROC_FEATURES: &str = "fe.window_energy";
pub const PROC_TRAIN: &str = "cls.train";
pub const PROC_CLASSIFY: &str = "cls.classify";
const MODEL_MAGIC: &[u8; 4] = b"MTS1";

#[derive(Debug, Clone, PartialEq, Error)]
pub enum PipelineError {
    #[error("sample file not found: {0}")]
    FileNotFound(String),
    #[error("malformed amplitude on line {0}")]
    MalformedAmplitude(usize),
    #[error("sample has no amplitudes")]
    EmptySample,
    #[error("window count must be at least 1")]
    InvalidWindows,
    #[error("feature vector has length {got}, expected {expected}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("training set is empty")]
    EmptyTrainingSet,
    #[error("malformed model: {0}")]
    MalformedModel(String),
    #[error("timed out waiting for `{0}`")]
    ProcTimeout(String),
    #[error("store: {0}")]
    Store(StoreError),
    #[error("{code}: {message}")]
    Remote { code: String, message: String },
    #[error("io: {0}")]
    Io(String),
}

impl PipelineError {
    pub fn code(&self) -> &str {
        match self {
            PipelineError::FileNotFound(_) => "FileNotFound",
            PipelineError::MalformedAmplitude(_) => "MalformedAmplitude",
            PipelineError::EmptySample => "EmptySample",
            PipelineError::InvalidWindows => "InvalidWindows",
            PipelineError::DimensionMismatch { .. } => "DimensionMismatch",
            PipelineError::EmptyTrainingSet => "EmptyTrainingSet",
            PipelineError::MalformedModel(_) => "MalformedModel",
            PipelineError::ProcTimeout(_) => "ProcTimeout",
            PipelineError::Store(e) => e.code(),
            PipelineError::Remote { code, .. } => code,
            PipelineError::Io(_) => "Io",
        }
    }
}

impl From<StoreError> for PipelineError {
    fn from(e: StoreError) -> Self {
        PipelineError::Store(e)
    }
}

impl From<CodecError> for PipelineError {
    fn from(e: CodecError) -> Self {
        PipelineError::MalformedModel(e.to_string())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub id: String,
    pub amplitudes: Vec<f64>,
    pub sample_rate: u32,
}

pub const DEFAULT_SAMPLE_RATE: u32 = 8000;

/// Parses `.amp` text: one decimal amplitude per line, `#` starts a
/// comment, blank lines are skipped.
pub fn parse_amplitudes(text: &str) -> Result<Vec<f64>, PipelineError> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let body = line.split('#').next().unwrap_or("").trim();
        if body.is_empty() {
            continue;
        }
        match body.parse::<f64>() {
            Ok(x) if x.is_finite() => out.push(x),
            _ => return Err(PipelineError::MalformedAmplitude(i + 1)),
        }
    }
    if out.is_empty() {
        return Err(PipelineError::EmptySample);
    }
    Ok(out)
}

pub fn load_sample(path: &Path) -> Result<Sample, PipelineError> {
    let text = std::fs::read_to_string(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => PipelineError::FileNotFound(path.display().to_string()),
        _ => PipelineError::Io(format!("{}: {e}", path.display())),
    })?;
    let id = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    Ok(Sample { id, amplitudes: parse_amplitudes(&text)?, sample_rate: DEFAULT_SAMPLE_RATE })
}

/// Renders amplitudes in `.amp` form; [`parse_amplitudes`] reads it back
/// exactly.
pub fn format_amplitudes(sample: &Sample) -> String {
    let mut out = format!("# {} rate={}\n", sample.id, sample.sample_rate);
    for a in &sample.amplitudes {
        let _ = writeln!(out, "{a:?}");
    }
    out
}

/// Deterministic two-tone test signal for `subject`; see the module docs
/// for the noise generator.
pub fn gen_sample(subject: u32, n: usize, seed: Option<u64>) -> Sample {
    let f = 2.0 + subject as f64;
    let mut rng = seed.map(|s| SplitMix64::seed_from_u64(((subject as u64) << 32) ^ s));
    let amplitudes = (0..n)
        .map(|i| {
            let t = i as f64 / n as f64;
            let tone = (2.0 * PI * f * t).sin() + 0.25 * (2.0 * PI * 3.0 * f * t).sin();
            let noise = rng.as_mut().map_or(0.0, |r| {
                let u = (r.next_u64() >> 11) as f64 / (1u64 << 53) as f64;
                0.1 * u - 0.05
            });
            tone + noise
        })
        .collect();
    let id = match seed {
        Some(s) => format!("s{subject}-n{n}-seed{s}"),
        None => format!("s{subject}-n{n}"),
    };
    Sample { id, amplitudes, sample_rate: DEFAULT_SAMPLE_RATE }
}

/// Scales amplitudes so the peak magnitude is 1. All-zero input is
/// returned unchanged.
pub fn preprocess(s: &Sample) -> Sample {
    let peak = s.amplitudes.iter().fold(0.0f64, |m, a| m.max(a.abs()));
    let amplitudes = if peak == 0.0 { s.amplitudes.clone() } else { s.amplitudes.iter().map(|a| a / peak).collect() };
    Sample { amplitudes, ..s.clone() }
}

/// Mean-square energy of `windows` equal windows; the tail is zero padded
/// up to `ceil(n / windows)` samples per window.
pub fn extract_features(amplitudes: &[f64], windows: usize) -> Result<Vec<f64>, PipelineError> {
    if windows == 0 {
        return Err(PipelineError::InvalidWindows);
    }
    if amplitudes.is_empty() {
        return Err(PipelineError::EmptySample);
    }
    let len = amplitudes.len().div_ceil(windows);
    Ok((0..windows)
        .map(|k| {
            let start = (k * len).min(amplitudes.len());
            let end = ((k + 1) * len).min(amplitudes.len());
            amplitudes[start..end].iter().map(|a| a * a).sum::<f64>() / len as f64
        })
        .collect())
}

/// Subjects ranked by distance, nearest first.
pub type ResultSet = Vec<(i64, f64)>;

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainingSet {
    subjects: BTreeMap<i64, (Vec<f64>, u64)>,
}

impl TrainingSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn is_empty(&self) -> bool {
        self.subjects.is_empty()
    }

    /// Feature length shared by every stored mean, if any.
    pub fn windows(&self) -> Option<usize> {
        self.subjects.values().next().map(|(m, _)| m.len())
    }

    pub fn subject(&self, id: i64) -> Option<(&[f64], u64)> {
        self.subjects.get(&id).map(|(m, c)| (m.as_slice(), *c))
    }

    pub fn subjects(&self) -> impl Iterator<Item = i64> + '_ {
        self.subjects.keys().copied()
    }

    fn check_len(&self, fv: &[f64]) -> Result<(), PipelineError> {
        match self.windows() {
            Some(w) if w != fv.len() => Err(PipelineError::DimensionMismatch { expected: w, got: fv.len() }),
            _ => Ok(()),
        }
    }

    /// Folds `fv` into the running mean of `subject`.
    pub fn train(&mut self, fv: &[f64], subject: i64) -> Result<(), PipelineError> {
        self.check_len(fv)?;
        match self.subjects.get_mut(&subject) {
            None => {
                self.subjects.insert(subject, (fv.to_vec(), 1));
            }
            Some((mean, count)) => {
                *count += 1;
                let n = *count as f64;
                for (m, x) in mean.iter_mut().zip(fv) {
                    *m += (x - *m) / n;
                }
            }
        }
        Ok(())
    }

    pub fn classify(&self, fv: &[f64]) -> Result<ResultSet, PipelineError> {
        if self.is_empty() {
            return Err(PipelineError::EmptyTrainingSet);
        }
        self.check_len(fv)?;
        let mut out: ResultSet = self
            .subjects
            .iter()
            .map(|(s, (mean, _))| {
                let d2: f64 = mean.iter().zip(fv).map(|(m, x)| (x - m) * (x - m)).sum();
                (*s, d2.sqrt())
            })
            .collect();
        out.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
        Ok(out)
    }

    /// Canonical bytes: magic, subject count, then per subject in
    /// ascending order its id, sample count and mean vector.
    pub fn encode(&self) -> Vec<u8> {
        let mut w = Writer::new();
        w.raw(MODEL_MAGIC);
        w.u32(self.subjects.len() as u32);
        for (s, (mean, count)) in &self.subjects {
            w.i64(*s);
            w.u64(*count);
            w.value(&Value::FloatArray(mean.clone()));
        }
        w.into_bytes()
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, PipelineError> {
        let mut r = Reader::new(bytes);
        if r.take(4)? != MODEL_MAGIC {
            return Err(PipelineError::MalformedModel("bad magic".into()));
        }
        let n = r.count(8 + 8 + 5)?;
        let mut ts = TrainingSet::new();
        let mut last = None;
        for _ in 0..n {
            let s = r.i64()?;
            if last.is_some_and(|l| l >= s) {
                return Err(PipelineError::MalformedModel("subjects out of order".into()));
            }
            last = Some(s);
            let count = r.u64()?;
            let Value::FloatArray(mean) = r.value()? else {
                return Err(PipelineError::MalformedModel("mean is not a float array".into()));
            };
            if count == 0 || mean.iter().any(|m| !m.is_finite()) {
                return Err(PipelineError::MalformedModel(format!("bad entry for subject {s}")));
            }
            ts.check_len(&mean)?;
            ts.subjects.insert(s, (mean, count));
        }
        r.finish()?;
        Ok(ts)
    }

    pub fn save(&self, path: &Path) -> Result<(), PipelineError> {
        std::fs::write(path, self.encode()).map_err(|e| PipelineError::Io(format!("{}: {e}", path.display())))
    }

    pub fn load(path: &Path) -> Result<Self, PipelineError> {
        let bytes = std::fs::read(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => PipelineError::FileNotFound(path.display().to_string()),
            _ => PipelineError::Io(format!("{}: {e}", path.display())),
        })?;
        Self::decode(&bytes)
    }
}

/// Resource id holding `version` of model `model_id`.
pub fn model_resource(model_id: &str, version: u64) -> String {
    format!("{MODEL_PREFIX}{model_id}@{version}")
}

/// Reads a model version from the store; version 0 is the empty model.
pub fn fetch_model(store: &dyn StoreHandle, model_id: &str, version: u64) -> Result<TrainingSet, PipelineError> {
    if version == 0 {
        return Ok(TrainingSet::new());
    }
    TrainingSet::decode(&store.get_resource(&model_resource(model_id, version))?)
}

/// Flattens a result set to `[subject, distance, subject, distance, ...]`.
pub fn result_set_to_value(rs: &ResultSet) -> Value {
    Value::FloatArray(rs.iter().flat_map(|(s, d)| [*s as f64, *d]).collect())
}

pub fn result_set_from_value(v: &Value) -> Result<ResultSet, PipelineError> {
    let xs = v
        .as_float_array()
        .filter(|xs| xs.len() % 2 == 0)
        .ok_or_else(|| PipelineError::MalformedModel(format!("not a result set: {}", v.type_name())))?;
    Ok(xs.chunks(2).map(|p| (p[0] as i64, p[1])).collect())
}

fn arg_usize(v: &Value, what: &str) -> Result<usize, String> {
    match v {
        Value::Int(i) if *i >= 0 => Ok(*i as usize),
        _ => Err(format!("{what} must be a non-negative Int")),
    }
}

fn arg_floats<'v>(v: &'v Value, what: &str) -> Result<&'v [f64], String> {
    v.as_float_array().ok_or_else(|| format!("{what} must be a FloatArray"))
}

fn arg_str<'v>(v: &'v Value, what: &str) -> Result<&'v str, String> {
    v.as_str().ok_or_else(|| format!("{what} must be a Str"))
}

fn train_step(args: &[Value], env: &ProcEnv<'_>) -> Result<Value, PipelineError> {
    let bad = |m: String| PipelineError::Remote { code: "BadArgument".into(), message: m };
    let model_id = arg_str(&args[0], "model id").map_err(bad)?;
    let version = arg_usize(&args[1], "version").map_err(bad)? as u64;
    let subject = args[2].as_int().ok_or_else(|| bad("subject must be an Int".into()))?;
    let fv = arg_floats(&args[3], "feature vector").map_err(bad)?;
    let mut ts = fetch_model(env.store, model_id, version)?;
    ts.train(fv, subject)?;
    env.store.put_resource(&model_resource(model_id, version + 1), &ts.encode())?;
    Ok(Value::Int(version as i64 + 1))
}

fn classify_step(args: &[Value], env: &ProcEnv<'_>) -> Result<Value, PipelineError> {
    let bad = |m: String| PipelineError::Remote { code: "BadArgument".into(), message: m };
    let model_id = arg_str(&args[0], "model id").map_err(bad)?;
    let version = arg_usize(&args[1], "version").map_err(bad)? as u64;
    let fv = arg_floats(&args[2], "feature vector").map_err(bad)?;
    let ts = fetch_model(env.store, model_id, version)?;
    Ok(result_set_to_value(&ts.classify(fv)?))
}

fn describe(e: PipelineError) -> String {
    format!("{}: {e}", e.code())
}

/// Registers the feature extraction and classifier procedures.
pub fn register_pipeline(reg: &mut ProcedureRegistry) -> Result<(), WorkerError> {
    reg.register(PROC_FEATURES, 2, |args, _| {
        let amps = arg_floats(&args[0], "amplitudes")?;
        let w = arg_usize(&args[1], "window count")?;
        extract_features(amps, w).map(Value::FloatArray).map_err(describe)
    })?;
    reg.register(PROC_TRAIN, 4, |args, env| train_step(args, env).map_err(describe))?;
    reg.register(PROC_CLASSIFY, 3, |args, env| classify_step(args, env).map_err(describe))
}

/// Registry with the arithmetic helpers and the pipeline procedures.
pub fn standard_registry() -> ProcedureRegistry {
    let mut reg = ProcedureRegistry::new();
    worker::register_math(&mut reg).expect("fresh registry");
    register_pipeline(&mut reg).expect("fresh registry");
    reg
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Classify,
}

#[derive(Debug, Clone)]
pub struct PipelineConfig {
    pub windows: usize,
    /// Model resource name; derived from the training data when `None`.
    pub model_id: Option<String>,
    pub proc_timeout_ms: u64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self { windows: DEFAULT_WINDOWS, model_id: None, proc_timeout_ms: 30_000 }
    }
}

/// A sample with its subject label; the label is ignored when
/// classifying.
#[derive(Debug, Clone, PartialEq)]
pub struct Labeled {
    pub subject: i64,
    pub sample: Sample,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Outcome {
    Trained { model_id: String, version: u64, model: TrainingSet },
    Classified(Vec<ResultSet>),
}

/// Runs every stage in this thread.
pub fn run_pipeline_local(
    windows: usize,
    model: &mut TrainingSet,
    samples: &[Labeled],
    mode: Mode,
) -> Result<Vec<ResultSet>, PipelineError> {
    let mut out = Vec::new();
    for l in samples {
        let fv = extract_features(&preprocess(&l.sample).amplitudes, windows)?;
        match mode {
            Mode::Train => model.train(&fv, l.subject)?,
            Mode::Classify => out.push(model.classify(&fv)?),
        }
    }
    Ok(out)
}

/// Stable model name for a training batch: identical batches share
/// their model resources and warehouse entries.
pub fn derive_model_id(windows: usize, samples: &[Labeled]) -> String {
    let mut h = Sha256::new();
    h.update((windows as u64).to_be_bytes());
    for l in samples {
        h.update(l.subject.to_be_bytes());
        h.update((l.sample.amplitudes.len() as u64).to_be_bytes());
        for a in &l.sample.amplitudes {
            h.update(a.to_bits().to_be_bytes());
        }
    }
    h.finalize()[..8].iter().map(|b| format!("{b:02x}")).collect()
}

fn proc_sig(name: &str, args: Vec<Value>) -> DemandSignature {
    DemandSignature::procedural(PIPELINE_PROGRAM, name, args)
}

fn submit(store: &dyn StoreHandle, sig: &DemandSignature) -> Result<Option<Value>, PipelineError> {
    match store.deposit(&Demand::pending(sig.clone()))? {
        DepositOutcome::AlreadyComputed(v) => Ok(Some(v)),
        DepositOutcome::Enqueued | DepositOutcome::DuplicatePending => Ok(None),
    }
}

fn collect(
    store: &dyn StoreHandle,
    sig: &DemandSignature,
    ready: Option<Value>,
    timeout_ms: u64,
) -> Result<Value, PipelineError> {
    let v = match ready {
        Some(v) => v,
        None => match store.await_result(sig, timeout_ms) {
            Err(StoreError::Timeout) => return Err(PipelineError::ProcTimeout(sig.name.clone())),
            other => other?,
        },
    };
    if let Some((code, message)) = worker::parse_error_value(&v) {
        return Err(PipelineError::Remote { code, message });
    }
    Ok(v)
}

/// Dispatches all feature demands at once and waits for every result.
fn remote_features(
    store: &dyn StoreHandle,
    cfg: &PipelineConfig,
    samples: &[Labeled],
) -> Result<Vec<Vec<f64>>, PipelineError> {
    let mut pending = Vec::new();
    for l in samples {
        let amps = preprocess(&l.sample).amplitudes;
        let sig = proc_sig(PROC_FEATURES, vec![Value::FloatArray(amps), Value::Int(cfg.windows as i64)]);
        let ready = submit(store, &sig)?;
        pending.push((sig, ready));
    }
    pending
        .into_iter()
        .map(|(sig, ready)| match collect(store, &sig, ready, cfg.proc_timeout_ms)? {
            Value::FloatArray(fv) => Ok(fv),
            other => Err(PipelineError::MalformedModel(format!("features came back as {}", other.type_name()))),
        })
        .collect()
}

/// Runs the pipeline with feature extraction and classification executed
/// by workers. Training steps are chained one after another; each
/// classify demand names the model version it reads.
pub fn run_pipeline_distributed(
    store: &dyn StoreHandle,
    cfg: &PipelineConfig,
    samples: &[Labeled],
    mode: Mode,
    model: Option<(&str, u64)>,
) -> Result<Outcome, PipelineError> {
    if cfg.windows == 0 {
        return Err(PipelineError::InvalidWindows);
    }
    let features = remote_features(store, cfg, samples)?;
    match mode {
        Mode::Train => {
            let model_id = cfg.model_id.clone().unwrap_or_else(|| derive_model_id(cfg.windows, samples));
            let mut version = 0u64;
            for (l, fv) in samples.iter().zip(features) {
                let sig = proc_sig(
                    PROC_TRAIN,
                    vec![
                        Value::Str(model_id.clone()),
                        Value::Int(version as i64),
                        Value::Int(l.subject),
                        Value::FloatArray(fv),
                    ],
                );
                let ready = submit(store, &sig)?;
                match collect(store, &sig, ready, cfg.proc_timeout_ms)? {
                    Value::Int(v) if v == version as i64 + 1 => version += 1,
                    other => return Err(PipelineError::MalformedModel(format!("train returned {other}"))),
                }
            }
            let model = fetch_model(store, &model_id, version)?;
            Ok(Outcome::Trained { model_id, version, model })
        }
        Mode::Classify => {
            let (model_id, version) =
                model.ok_or_else(|| PipelineError::MalformedModel("classification needs a trained model".into()))?;
            if version == 0 {
                return Err(PipelineError::EmptyTrainingSet);
            }
            let mut pending = Vec::new();
            for fv in features {
                let sig = proc_sig(
                    PROC_CLASSIFY,
                    vec![Value::Str(model_id.to_owned()), Value::Int(version as i64), Value::FloatArray(fv)],
                );
                let ready = submit(store, &sig)?;
                pending.push((sig, ready));
            }
            let results = pending
                .into_iter()
                .map(|(sig, ready)| result_set_from_value(&collect(store, &sig, ready, cfg.proc_timeout_ms)?))
                .collect::<Result<Vec<_>, _>>()?;
            Ok(Outcome::Classified(results))
        }
    }
}

/// Training and test batches of the synthetic corpus: for each subject,
/// `train_seeds` then `test_seeds`.
pub fn corpus(
    subjects: u32,
    n: usize,
    train_seeds: std::ops::RangeInclusive<u64>,
    test_seeds: std::ops::RangeInclusive<u64>,
) -> (Vec<Labeled>, Vec<Labeled>) {
    let batch = |seeds: &std::ops::RangeInclusive<u64>| {
        (1..=subjects)
            .flat_map(|s| {
                seeds.clone().map(move |seed| Labeled { subject: s as i64, sample: gen_sample(s, n, Some(seed)) })
            })
            .collect::<Vec<_>>()
    };
    (batch(&train_seeds), batch(&test_seeds))
}

/// Fraction of samples whose nearest subject is their label.
pub fn top1_hits(samples: &[Labeled], results: &[ResultSet]) -> usize {
    samples.iter().zip(results).filter(|(l, rs)| rs.first().map(|r| r.0) == Some(l.subject)).count()
}
