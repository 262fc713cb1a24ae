//! Values, contexts, signatures and demands shared by every tier.
//!
//! Everything here is immutable once built. Equality of [`Value`] is
//! bitwise on floats so that it coincides with equality of the canonical
//! encoding (`-0.0 != 0.0`, and a NaN equals itself).

use std::collections::BTreeMap;
use std::fmt;

use thiserror::Error;

use crate::codec;

/// A runtime value.
#[derive(Debug, Clone)]
pub enum Value {
    Int(i64),
    Float(f64),
    Bool(bool),
    Str(String),
    FloatArray(Vec<f64>),
}

impl Value {
    pub fn type_name(&self) -> &'static str {
        match self {
            Value::Int(_) => "Int",
            Value::Float(_) => "Float",
            Value::Bool(_) => "Bool",
            Value::Str(_) => "Str",
            Value::FloatArray(_) => "FloatArray",
        }
    }

    /// True when every float payload is finite.
    pub fn is_finite(&self) -> bool {
        match self {
            Value::Float(f) => f.is_finite(),
            Value::FloatArray(xs) => xs.iter().all(|x| x.is_finite()),
            _ => true,
        }
    }

    pub fn as_int(&self) -> Option<i64> {
        match self {
            Value::Int(i) => Some(*i),
            _ => None,
        }
    }

    pub fn as_str(&self) -> Option<&str> {
        match self {
            Value::Str(s) => Some(s),
            _ => None,
        }
    }

    pub fn as_float_array(&self) -> Option<&[f64]> {
        match self {
            Value::FloatArray(xs) => Some(xs),
            _ => None,
        }
    }
}

impl PartialEq for Value {
    fn eq(&self, other: &Self) -> bool {
        match (self, other) {
            (Value::Int(a), Value::Int(b)) => a == b,
            (Value::Float(a), Value::Float(b)) => a.to_bits() == b.to_bits(),
            (Value::Bool(a), Value::Bool(b)) => a == b,
            (Value::Str(a), Value::Str(b)) => a == b,
            (Value::FloatArray(a), Value::FloatArray(b)) => {
                a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits())
            }
            _ => false,
        }
    }
}

impl Eq for Value {}

impl fmt::Display for Value {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Value::Int(i) => write!(f, "{i}"),
            Value::Float(x) => write!(f, "{x:?}"),
            Value::Bool(b) => write!(f, "{b}"),
            Value::Str(s) => write!(f, "{s:?}"),
            Value::FloatArray(xs) => {
                f.write_str("[")?;
                for (i, x) in xs.iter().enumerate() {
                    if i > 0 {
                        f.write_str(", ")?;
                    }
                    write!(f, "{x:?}")?;
                }
                f.write_str("]")
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ModelError {
    #[error("duplicate dimension `{0}`")]
    DuplicateDimension(String),
    #[error("invalid dimension name `{0}`")]
    InvalidDimension(String),
}

/// Returns true for names matching `[a-zA-Z_][a-zA-Z0-9_]*`.
pub fn is_identifier(name: &str) -> bool {
    let mut chars = name.chars();
    match chars.next() {
        Some(c) if c.is_ascii_alphabetic() || c == '_' => {}
        _ => return false,
    }
    chars.all(|c| c.is_ascii_alphanumeric() || c == '_')
}

/// An evaluation coordinate: dimension name to integer tag, iterated in
/// ascending name order. Absent dimensions read as tag 0.
#[derive(Debug, Clone, Default, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Context {
    tags: BTreeMap<String, i64>,
}

impl Context {
    pub fn empty() -> Self {
        Self::default()
    }

    /// Builds a canonical context, rejecting repeated or malformed names.
    pub fn from_pairs<I, S>(pairs: I) -> Result<Self, ModelError>
    where
        I: IntoIterator<Item = (S, i64)>,
        S: Into<String>,
    {
        let mut tags = BTreeMap::new();
        for (dim, tag) in pairs {
            let dim = dim.into();
            if !is_identifier(&dim) {
                return Err(ModelError::InvalidDimension(dim));
            }
            if tags.contains_key(&dim) {
                return Err(ModelError::DuplicateDimension(dim));
            }
            tags.insert(dim, tag);
        }
        Ok(Self { tags })
    }

    /// Copy of `self` with `dim` bound to `tag`.
    pub fn with(&self, dim: &str, tag: i64) -> Self {
        let mut tags = self.tags.clone();
        tags.insert(dim.to_owned(), tag);
        Self { tags }
    }

    pub fn get(&self, dim: &str) -> i64 {
        self.tags.get(dim).copied().unwrap_or(0)
    }

    pub fn contains(&self, dim: &str) -> bool {
        self.tags.contains_key(dim)
    }

    /// Keeps only the dimensions accepted by `keep`.
    pub fn restrict<F: Fn(&str) -> bool>(&self, keep: F) -> Self {
        Self { tags: self.tags.iter().filter(|(k, _)| keep(k)).map(|(k, v)| (k.clone(), *v)).collect() }
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, i64)> {
        self.tags.iter().map(|(k, v)| (k.as_str(), *v))
    }

    pub fn len(&self) -> usize {
        self.tags.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tags.is_empty()
    }
}

impl fmt::Display for Context {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("{")?;
        for (i, (k, v)) in self.iter().enumerate() {
            if i > 0 {
                f.write_str(",")?;
            }
            write!(f, "{k}:{v}")?;
        }
        f.write_str("}")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum DemandKind {
    Intensional,
    Procedural,
    Resource,
    System,
}

impl DemandKind {
    pub const ALL: [DemandKind; 4] =
        [DemandKind::Intensional, DemandKind::Procedural, DemandKind::Resource, DemandKind::System];

    pub fn code(self) -> u8 {
        match self {
            DemandKind::Intensional => 0,
            DemandKind::Procedural => 1,
            DemandKind::Resource => 2,
            DemandKind::System => 3,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        Self::ALL.get(code as usize).copied()
    }
}

/// Set of demand kinds, used to filter claims.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct KindSet(u8);

impl KindSet {
    pub fn of(kinds: &[DemandKind]) -> Self {
        Self(kinds.iter().fold(0, |m, k| m | (1 << k.code())))
    }

    pub fn contains(self, kind: DemandKind) -> bool {
        self.0 & (1 << kind.code()) != 0
    }

    pub fn bits(self) -> u8 {
        self.0
    }

    pub fn from_bits(bits: u8) -> Option<Self> {
        (bits & !0x0f == 0).then_some(Self(bits))
    }
}

/// Identity of a request for a value.
///
/// Procedural signatures carry argument values and no context; every
/// other kind carries a context. System signatures additionally use the
/// argument list as their message payload.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DemandSignature {
    pub program_id: String,
    pub name: String,
    pub context: Context,
    pub kind: DemandKind,
    pub args: Vec<Value>,
}

impl DemandSignature {
    pub fn intensional(program_id: &str, name: &str, context: Context) -> Self {
        Self {
            program_id: program_id.to_owned(),
            name: name.to_owned(),
            context,
            kind: DemandKind::Intensional,
            args: Vec::new(),
        }
    }

    pub fn procedural(program_id: &str, name: &str, args: Vec<Value>) -> Self {
        Self {
            program_id: program_id.to_owned(),
            name: name.to_owned(),
            context: Context::empty(),
            kind: DemandKind::Procedural,
            args,
        }
    }

    /// Structural well-formedness: procedural signatures are context-free
    /// and only procedural/system signatures carry arguments.
    pub fn is_well_formed(&self) -> bool {
        match self.kind {
            DemandKind::Procedural => self.context.is_empty(),
            DemandKind::System => true,
            _ => self.args.is_empty(),
        }
    }

    /// Canonical byte key; equal signatures give equal keys and vice versa.
    pub fn key(&self) -> Vec<u8> {
        codec::encode_signature(self)
    }
}

impl fmt::Display for DemandSignature {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.kind {
            DemandKind::Procedural | DemandKind::System => {
                write!(f, "{}:{}(", self.program_id, self.name)?;
                for (i, a) in self.args.iter().enumerate() {
                    if i > 0 {
                        f.write_str(", ")?;
                    }
                    write!(f, "{a}")?;
                }
                f.write_str(")")
            }
            _ => write!(f, "{}:{}@{}", self.program_id, self.name, self.context),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum DemandState {
    Pending,
    InProcess,
    Computed,
}

impl DemandState {
    pub fn code(self) -> u8 {
        match self {
            DemandState::Pending => 0,
            DemandState::InProcess => 1,
            DemandState::Computed => 2,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(DemandState::Pending),
            1 => Some(DemandState::InProcess),
            2 => Some(DemandState::Computed),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Demand {
    pub signature: DemandSignature,
    pub state: DemandState,
    pub result: Option<Value>,
    pub lease_expiry: Option<u64>,
    pub attempts: u32,
}

impl Demand {
    pub fn pending(signature: DemandSignature) -> Self {
        Self { signature, state: DemandState::Pending, result: None, lease_expiry: None, attempts: 0 }
    }

    pub fn computed(signature: DemandSignature, value: Value) -> Self {
        Self { signature, state: DemandState::Computed, result: Some(value), lease_expiry: None, attempts: 0 }
    }

    /// Checks the state/result/lease coupling.
    pub fn is_consistent(&self) -> bool {
        (self.state == DemandState::Computed) == self.result.is_some()
            && (self.state == DemandState::InProcess) == self.lease_expiry.is_some()
            && self.signature.is_well_formed()
    }
}
