//! Canonical binary form of a compiled program (`.geer` files and
//! resource entries in the store).

use std::collections::{BTreeMap, BTreeSet};

use super::ast::{BinOp, Expr};
use super::Geer;
use crate::codec::{CodecError, Reader, Writer};

const GEER_MAGIC: &[u8; 4] = b"GEER";
const MAX_DEPTH: usize = 1024;

const NODE_LITERAL: u8 = 0;
const NODE_IDENT: u8 = 1;
const NODE_BINARY: u8 = 2;
const NODE_IF: u8 = 3;
const NODE_AT: u8 = 4;
const NODE_HASH: u8 = 5;
const NODE_CALL: u8 = 6;
const NODE_NEG: u8 = 7;

fn write_expr(w: &mut Writer, e: &Expr) {
    match e {
        Expr::Literal(v) => {
            w.u8(NODE_LITERAL).value(v);
        }
        Expr::Ident(name) => {
            w.u8(NODE_IDENT).str(name);
        }
        Expr::Binary(op, l, r) => {
            w.u8(NODE_BINARY).u8(op.code());
            write_expr(w, l);
            write_expr(w, r);
        }
        Expr::If(c, t, f) => {
            w.u8(NODE_IF);
            write_expr(w, c);
            write_expr(w, t);
            write_expr(w, f);
        }
        Expr::At(inner, dim, tag) => {
            w.u8(NODE_AT);
            write_expr(w, inner);
            w.str(dim);
            write_expr(w, tag);
        }
        Expr::HashDim(dim) => {
            w.u8(NODE_HASH).str(dim);
        }
        Expr::Call(name, args) => {
            w.u8(NODE_CALL).str(name).len_prefix(args.len());
            for a in args {
                write_expr(w, a);
            }
        }
        Expr::Neg(inner) => {
            w.u8(NODE_NEG);
            write_expr(w, inner);
        }
    }
}

fn read_expr(r: &mut Reader<'_>, depth: usize) -> Result<Expr, CodecError> {
    if depth > MAX_DEPTH {
        return Err(CodecError::MalformedEncoding("expression nested too deeply".into()));
    }
    let next = |r: &mut Reader<'_>| read_expr(r, depth + 1).map(Box::new);
    Ok(match r.u8()? {
        NODE_LITERAL => Expr::Literal(r.value()?),
        NODE_IDENT => Expr::Ident(r.str()?),
        NODE_BINARY => {
            let code = r.u8()?;
            let op = BinOp::from_code(code).ok_or_else(|| CodecError::MalformedEncoding(format!("operator {code}")))?;
            Expr::Binary(op, next(r)?, next(r)?)
        }
        NODE_IF => Expr::If(next(r)?, next(r)?, next(r)?),
        NODE_AT => {
            let inner = next(r)?;
            let dim = r.str()?;
            Expr::At(inner, dim, next(r)?)
        }
        NODE_HASH => Expr::HashDim(r.str()?),
        NODE_CALL => {
            let name = r.str()?;
            let n = r.count(1)?;
            let mut args = Vec::with_capacity(n);
            for _ in 0..n {
                args.push(read_expr(r, depth + 1)?);
            }
            Expr::Call(name, args)
        }
        NODE_NEG => Expr::Neg(next(r)?),
        t => return Err(CodecError::MalformedEncoding(format!("node tag {t}"))),
    })
}

pub fn encode_geer(g: &Geer) -> Vec<u8> {
    let mut w = Writer::new();
    w.raw(GEER_MAGIC).str(&g.program_id).len_prefix(g.dimensions.len());
    for d in &g.dimensions {
        w.str(d);
    }
    w.len_prefix(g.dictionary.len());
    for (name, body) in &g.dictionary {
        w.str(name);
        write_expr(&mut w, body);
    }
    write_expr(&mut w, &g.root);
    w.bytes(&g.source_digest);
    w.into_bytes()
}

/// Decodes and re-validates a compiled program.
pub fn decode_geer(bytes: &[u8]) -> Result<Geer, CodecError> {
    let mut r = Reader::new(bytes);
    if r.take(4)? != GEER_MAGIC {
        return Err(CodecError::MalformedEncoding("not a compiled program".into()));
    }
    let program_id = r.str()?;
    let n = r.count(4)?;
    let mut dimensions = BTreeSet::new();
    for _ in 0..n {
        let d = r.str()?;
        if dimensions.last().is_some_and(|prev: &String| prev >= &d) {
            return Err(CodecError::NonCanonicalOrder(d));
        }
        dimensions.insert(d);
    }
    let n = r.count(5)?;
    let mut dictionary = BTreeMap::new();
    for _ in 0..n {
        let name = r.str()?;
        if dictionary.last_key_value().is_some_and(|(prev, _): (&String, _)| prev >= &name) {
            return Err(CodecError::NonCanonicalOrder(name));
        }
        let body = read_expr(&mut r, 0)?;
        dictionary.insert(name, body);
    }
    let root = read_expr(&mut r, 0)?;
    let source_digest = r.bytes()?;
    r.finish()?;
    let geer = Geer { program_id, dimensions, dictionary, root, source_digest };
    geer.check_closed().map_err(|e| CodecError::MalformedEncoding(e.to_string()))?;
    Ok(geer)
}
