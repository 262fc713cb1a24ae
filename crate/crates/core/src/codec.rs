//! Canonical binary encoding of the data model.
//!
//! All integers are big-endian. Strings are a 4-byte length followed by
//! UTF-8 bytes. A value is a tag byte (0=Int, 1=Float, 2=Bool, 3=Str,
//! 4=FloatArray) followed by its payload. Contexts are a 4-byte pair count
//! followed by `(string, i64)` pairs in ascending name order; decoders
//! reject any other order, so equal structures always have equal bytes.

use thiserror::Error;

use crate::model::{is_identifier, Context, Demand, DemandKind, DemandSignature, DemandState, Value};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum CodecError {
    #[error("malformed value: {0}")]
    MalformedValue(String),
    #[error("{0} trailing bytes after value")]
    TrailingBytes(usize),
    #[error("malformed encoding: {0}")]
    MalformedEncoding(String),
    #[error("dimension `{0}` out of canonical order")]
    NonCanonicalOrder(String),
}

impl CodecError {
    pub fn code(&self) -> &'static str {
        match self {
            CodecError::MalformedValue(_) => "MalformedValue",
            CodecError::TrailingBytes(_) => "TrailingBytes",
            CodecError::MalformedEncoding(_) => "MalformedEncoding",
            CodecError::NonCanonicalOrder(_) => "NonCanonicalOrder",
        }
    }
}

pub type Result<T> = std::result::Result<T, CodecError>;

const TAG_INT: u8 = 0;
const TAG_FLOAT: u8 = 1;
const TAG_BOOL: u8 = 2;
const TAG_STR: u8 = 3;
const TAG_FLOAT_ARRAY: u8 = 4;

/// Append-only encoder.
#[derive(Debug, Default)]
pub struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn into_bytes(self) -> Vec<u8> {
        self.buf
    }

    pub fn u8(&mut self, v: u8) -> &mut Self {
        self.buf.push(v);
        self
    }

    pub fn u32(&mut self, v: u32) -> &mut Self {
        self.buf.extend_from_slice(&v.to_be_bytes());
        self
    }

    pub fn u64(&mut self, v: u64) -> &mut Self {
        self.buf.extend_from_slice(&v.to_be_bytes());
        self
    }

    pub fn i64(&mut self, v: i64) -> &mut Self {
        self.buf.extend_from_slice(&v.to_be_bytes());
        self
    }

    pub fn f64(&mut self, v: f64) -> &mut Self {
        self.buf.extend_from_slice(&v.to_bits().to_be_bytes());
        self
    }

    pub fn len_prefix(&mut self, len: usize) -> &mut Self {
        let len = u32::try_from(len).expect("length exceeds u32");
        self.u32(len)
    }

    pub fn str(&mut self, s: &str) -> &mut Self {
        self.len_prefix(s.len());
        self.buf.extend_from_slice(s.as_bytes());
        self
    }

    pub fn bytes(&mut self, b: &[u8]) -> &mut Self {
        self.len_prefix(b.len());
        self.buf.extend_from_slice(b);
        self
    }

    pub fn raw(&mut self, b: &[u8]) -> &mut Self {
        self.buf.extend_from_slice(b);
        self
    }

    pub fn value(&mut self, v: &Value) -> &mut Self {
        match v {
            Value::Int(i) => self.u8(TAG_INT).i64(*i),
            Value::Float(x) => self.u8(TAG_FLOAT).f64(*x),
            Value::Bool(b) => self.u8(TAG_BOOL).u8(*b as u8),
            Value::Str(s) => self.u8(TAG_STR).str(s),
            Value::FloatArray(xs) => {
                self.u8(TAG_FLOAT_ARRAY).len_prefix(xs.len());
                for x in xs {
                    self.f64(*x);
                }
                self
            }
        }
    }

    pub fn opt_value(&mut self, v: Option<&Value>) -> &mut Self {
        match v {
            None => self.u8(0),
            Some(v) => self.u8(1).value(v),
        }
    }

    pub fn context(&mut self, ctx: &Context) -> &mut Self {
        self.len_prefix(ctx.len());
        for (dim, tag) in ctx.iter() {
            self.str(dim).i64(tag);
        }
        self
    }

    pub fn signature(&mut self, sig: &DemandSignature) -> &mut Self {
        self.str(&sig.program_id).str(&sig.name).u8(sig.kind.code()).context(&sig.context).len_prefix(sig.args.len());
        for a in &sig.args {
            self.value(a);
        }
        self
    }

    pub fn demand(&mut self, d: &Demand) -> &mut Self {
        self.signature(&d.signature).u8(d.state.code()).opt_value(d.result.as_ref());
        match d.lease_expiry {
            None => self.u8(0),
            Some(t) => self.u8(1).u64(t),
        };
        self.u32(d.attempts)
    }
}

/// Cursor over an encoded buffer.
#[derive(Debug)]
pub struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    pub fn new(buf: &'a [u8]) -> Self {
        Self { buf, pos: 0 }
    }

    pub fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }

    /// Fails with `TrailingBytes` unless the whole buffer was consumed.
    pub fn finish(&self) -> Result<()> {
        match self.remaining() {
            0 => Ok(()),
            n => Err(CodecError::TrailingBytes(n)),
        }
    }

    pub fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.remaining() < n {
            return Err(CodecError::MalformedEncoding(format!(
                "need {n} bytes at offset {}, {} left",
                self.pos,
                self.remaining()
            )));
        }
        let out = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    pub fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    pub fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_be_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_be_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub fn i64(&mut self) -> Result<i64> {
        Ok(i64::from_be_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_bits(self.u64()?))
    }

    /// Reads a count and checks that at least `count * min_item` bytes
    /// remain, so hostile lengths cannot trigger huge allocations.
    pub fn count(&mut self, min_item: usize) -> Result<usize> {
        let n = self.u32()? as usize;
        if n.saturating_mul(min_item) > self.remaining() {
            return Err(CodecError::MalformedEncoding(format!("count {n} exceeds buffer")));
        }
        Ok(n)
    }

    pub fn str(&mut self) -> Result<String> {
        let n = self.count(1)?;
        let bytes = self.take(n)?;
        String::from_utf8(bytes.to_vec()).map_err(|_| CodecError::MalformedEncoding("invalid UTF-8".into()))
    }

    pub fn bytes(&mut self) -> Result<Vec<u8>> {
        let n = self.count(1)?;
        Ok(self.take(n)?.to_vec())
    }

    pub fn value(&mut self) -> Result<Value> {
        let malformed = |e: CodecError| CodecError::MalformedValue(e.to_string());
        let tag = self.u8().map_err(malformed)?;
        match tag {
            TAG_INT => Ok(Value::Int(self.i64().map_err(malformed)?)),
            TAG_FLOAT => Ok(Value::Float(self.f64().map_err(malformed)?)),
            TAG_BOOL => match self.u8().map_err(malformed)? {
                0 => Ok(Value::Bool(false)),
                1 => Ok(Value::Bool(true)),
                b => Err(CodecError::MalformedValue(format!("bool byte {b:#04x}"))),
            },
            TAG_STR => Ok(Value::Str(self.str().map_err(malformed)?)),
            TAG_FLOAT_ARRAY => {
                let n = self.count(8).map_err(malformed)?;
                let mut xs = Vec::with_capacity(n);
                for _ in 0..n {
                    xs.push(self.f64().map_err(malformed)?);
                }
                Ok(Value::FloatArray(xs))
            }
            t => Err(CodecError::MalformedValue(format!("unknown tag {t:#04x}"))),
        }
    }

    pub fn opt_value(&mut self) -> Result<Option<Value>> {
        match self.u8()? {
            0 => Ok(None),
            1 => Ok(Some(self.value()?)),
            b => Err(CodecError::MalformedEncoding(format!("option flag {b:#04x}"))),
        }
    }

    pub fn context(&mut self) -> Result<Context> {
        let n = self.count(12)?;
        let mut pairs: Vec<(String, i64)> = Vec::with_capacity(n);
        for _ in 0..n {
            let dim = self.str()?;
            let tag = self.i64()?;
            if !is_identifier(&dim) {
                return Err(CodecError::MalformedEncoding(format!("bad dimension name `{dim}`")));
            }
            if let Some((prev, _)) = pairs.last() {
                if prev.as_str() >= dim.as_str() {
                    return Err(CodecError::NonCanonicalOrder(dim));
                }
            }
            pairs.push((dim, tag));
        }
        Ok(Context::from_pairs(pairs).expect("validated above"))
    }

    pub fn signature(&mut self) -> Result<DemandSignature> {
        let program_id = self.str()?;
        let name = self.str()?;
        let kind_code = self.u8()?;
        let kind = DemandKind::from_code(kind_code)
            .ok_or_else(|| CodecError::MalformedEncoding(format!("demand kind {kind_code}")))?;
        let context = self.context()?;
        let n = self.count(2)?;
        let mut args = Vec::with_capacity(n);
        for _ in 0..n {
            args.push(self.value()?);
        }
        let sig = DemandSignature { program_id, name, context, kind, args };
        if !sig.is_well_formed() {
            return Err(CodecError::MalformedEncoding(format!("ill-formed {:?} signature", sig.kind)));
        }
        Ok(sig)
    }

    pub fn demand(&mut self) -> Result<Demand> {
        let signature = self.signature()?;
        let state_code = self.u8()?;
        let state = DemandState::from_code(state_code)
            .ok_or_else(|| CodecError::MalformedEncoding(format!("demand state {state_code}")))?;
        let result = self.opt_value()?;
        let lease_expiry = match self.u8()? {
            0 => None,
            1 => Some(self.u64()?),
            b => return Err(CodecError::MalformedEncoding(format!("option flag {b:#04x}"))),
        };
        let attempts = self.u32()?;
        let d = Demand { signature, state, result, lease_expiry, attempts };
        if !d.is_consistent() {
            return Err(CodecError::MalformedEncoding("inconsistent demand state".into()));
        }
        Ok(d)
    }
}

pub fn encode_value(v: &Value) -> Vec<u8> {
    let mut w = Writer::new();
    w.value(v);
    w.into_bytes()
}

pub fn decode_value(bytes: &[u8]) -> Result<Value> {
    let mut r = Reader::new(bytes);
    let v = r.value()?;
    r.finish()?;
    Ok(v)
}

pub fn encode_context(ctx: &Context) -> Vec<u8> {
    let mut w = Writer::new();
    w.context(ctx);
    w.into_bytes()
}

pub fn decode_context(bytes: &[u8]) -> Result<Context> {
    let mut r = Reader::new(bytes);
    let v = r.context()?;
    r.finish()?;
    Ok(v)
}

pub fn encode_signature(sig: &DemandSignature) -> Vec<u8> {
    let mut w = Writer::new();
    w.signature(sig);
    w.into_bytes()
}

pub fn decode_signature(bytes: &[u8]) -> Result<DemandSignature> {
    let mut r = Reader::new(bytes);
    let v = r.signature()?;
    r.finish()?;
    Ok(v)
}

pub fn encode_demand(d: &Demand) -> Vec<u8> {
    let mut w = Writer::new();
    w.demand(d);
    w.into_bytes()
}

pub fn decode_demand(bytes: &[u8]) -> Result<Demand> {
    let mut r = Reader::new(bytes);
    let v = r.demand()?;
    r.finish()?;
    Ok(v)
}
