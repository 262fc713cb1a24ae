//! Source printer. Every compound expression is parenthesized, so the
//! output re-parses to the same tree.

use std::fmt::Write;

use super::ast::{Decl, Expr, Program};
use super::Geer;
use crate::model::Value;

pub fn expr_to_source(e: &Expr) -> String {
    let mut out = String::new();
    write_expr(&mut out, e);
    out
}

fn write_expr(out: &mut String, e: &Expr) {
    match e {
        Expr::Literal(v) => write_literal(out, v),
        Expr::Ident(name) => out.push_str(name),
        Expr::HashDim(d) => {
            let _ = write!(out, "#.{d}");
        }
        Expr::Binary(op, l, r) => {
            out.push('(');
            write_expr(out, l);
            let _ = write!(out, " {op} ");
            write_expr(out, r);
            out.push(')');
        }
        Expr::Neg(inner) => {
            out.push_str("(-");
            write_expr(out, inner);
            out.push(')');
        }
        Expr::If(c, t, f) => {
            out.push_str("(if ");
            write_expr(out, c);
            out.push_str(" then ");
            write_expr(out, t);
            out.push_str(" else ");
            write_expr(out, f);
            out.push(')');
        }
        Expr::At(inner, dim, tag) => {
            out.push('(');
            write_expr(out, inner);
            let _ = write!(out, " @.{dim} ");
            write_expr(out, tag);
            out.push(')');
        }
        Expr::Call(name, args) => {
            let _ = write!(out, "call {name}(");
            for (i, a) in args.iter().enumerate() {
                if i > 0 {
                    out.push_str(", ");
                }
                write_expr(out, a);
            }
            out.push(')');
        }
    }
}

// Only non-negative finite numbers are reachable from source text.
fn write_literal(out: &mut String, v: &Value) {
    match v {
        Value::Int(i) if *i >= 0 => {
            let _ = write!(out, "{i}");
        }
        Value::Float(x) if x.is_finite() && x.is_sign_positive() => {
            let _ = write!(out, "{x:?}");
        }
        other => panic!("literal {other} has no source form"),
    }
}

pub fn program_to_source(p: &Program) -> String {
    let mut out = expr_to_source(&p.root);
    if !p.decls.is_empty() {
        out.push_str(" where");
        for d in &p.decls {
            match d {
                Decl::Dimension(dims) => {
                    let _ = write!(out, " dimension {};", dims.join(", "));
                }
                Decl::Define(name, body) => {
                    let _ = write!(out, " {name} = {};", expr_to_source(body));
                }
            }
        }
        out.push_str(" end");
    }
    out
}

/// Source text equivalent to a compiled program.
pub fn geer_to_source(g: &Geer) -> String {
    let mut decls = Vec::new();
    if !g.dimensions.is_empty() {
        decls.push(Decl::Dimension(g.dimensions.iter().cloned().collect()));
    }
    for (name, body) in &g.dictionary {
        decls.push(Decl::Define(name.clone(), body.clone()));
    }
    program_to_source(&Program { root: g.root.clone(), decls })
}
