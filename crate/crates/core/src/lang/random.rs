//! Seeded generator of well-formed, call-free programs, for differential
//! testing of evaluators.

use rand_core::{RngCore, SeedableRng};
use rand_xoshiro::SplitMix64;

use super::ast::{BinOp, Decl, Expr, Program};
use crate::model::Value;

#[derive(Debug, Clone)]
pub struct Shape {
    pub max_depth: usize,
    pub max_dims: usize,
    pub max_tag: i64,
    pub identifiers: usize,
    pub floats: bool,
}

impl Default for Shape {
    fn default() -> Self {
        Self { max_depth: 5, max_dims: 2, max_tag: 3, identifiers: 3, floats: true }
    }
}

const DIMS: [&str; 4] = ["d", "e", "f", "g"];
const OPS: [BinOp; 13] = [
    BinOp::Add,
    BinOp::Sub,
    BinOp::Mul,
    BinOp::Div,
    BinOp::Rem,
    BinOp::Eq,
    BinOp::Ne,
    BinOp::Lt,
    BinOp::Le,
    BinOp::Gt,
    BinOp::Ge,
    BinOp::And,
    BinOp::Or,
];
const COMPARISONS: [BinOp; 6] = [BinOp::Eq, BinOp::Ne, BinOp::Lt, BinOp::Le, BinOp::Gt, BinOp::Ge];

struct Gen<'s> {
    rng: SplitMix64,
    shape: &'s Shape,
    dims: Vec<String>,
    names: Vec<String>,
}

impl Gen<'_> {
    fn below(&mut self, n: u64) -> u64 {
        self.rng.next_u64() % n.max(1)
    }

    fn pick<'a, T>(&mut self, xs: &'a [T]) -> &'a T {
        &xs[self.below(xs.len() as u64) as usize]
    }

    fn leaf(&mut self) -> Expr {
        loop {
            match self.below(5) {
                0 | 1 => return Expr::Literal(Value::Int(self.below(10) as i64)),
                2 if self.shape.floats => return Expr::Literal(Value::Float(self.below(9) as f64 / 4.0)),
                3 if !self.names.is_empty() => {
                    let n = self.pick(&self.names.clone()).clone();
                    return Expr::Ident(n);
                }
                4 if !self.dims.is_empty() => {
                    let d = self.pick(&self.dims.clone()).clone();
                    return Expr::HashDim(d);
                }
                _ => {}
            }
        }
    }

    fn tag(&mut self, dim: &str, depth: usize) -> Expr {
        match self.below(6) {
            3 if depth >= 2 => Expr::binary(BinOp::Add, Expr::HashDim(dim.to_owned()), Expr::int(1)),
            4 if depth >= 2 => Expr::binary(BinOp::Sub, Expr::HashDim(dim.to_owned()), Expr::int(1)),
            5 => self.expr(depth),
            _ => Expr::int(self.below(self.shape.max_tag as u64 + 1) as i64),
        }
    }

    fn expr(&mut self, depth: usize) -> Expr {
        if depth <= 1 || self.below(4) == 0 {
            return self.leaf();
        }
        let d = depth - 1;
        match self.below(10) {
            0..=3 => {
                let op = *self.pick(&OPS);
                Expr::binary(op, self.expr(d), self.expr(d))
            }
            4 => Expr::Neg(Box::new(self.expr(d))),
            5 | 6 => {
                let op = *self.pick(&COMPARISONS);
                let cond = if d >= 2 { Expr::binary(op, self.expr(d - 1), self.expr(d - 1)) } else { self.leaf() };
                Expr::if_(cond, self.expr(d), self.expr(d))
            }
            _ if !self.dims.is_empty() => {
                let dim = self.pick(&self.dims.clone()).clone();
                let tag = self.tag(&dim, d);
                Expr::at(self.expr(d), &dim, tag)
            }
            _ => self.leaf(),
        }
    }
}

/// A random program whose expressions are at most `shape.max_depth`
/// deep. Identifiers are named `x0`, `x1`, ... and may refer to each
/// other, so evaluation can hit cycles, runaway depth or type errors.
pub fn random_program(seed: u64, shape: &Shape) -> Program {
    let mut g = Gen { rng: SplitMix64::seed_from_u64(seed), shape, dims: Vec::new(), names: Vec::new() };
    let ndims = g.below(shape.max_dims.min(DIMS.len()) as u64 + 1) as usize;
    g.dims = DIMS[..ndims].iter().map(|s| s.to_string()).collect();
    let nids = 1 + g.below(shape.identifiers.max(1) as u64) as usize;
    g.names = (0..nids).map(|i| format!("x{i}")).collect();
    let mut decls = Vec::new();
    if !g.dims.is_empty() {
        decls.push(Decl::Dimension(g.dims.clone()));
    }
    for name in g.names.clone() {
        let body = g.expr(shape.max_depth);
        decls.push(Decl::Define(name, body));
    }
    let root = Expr::Ident("x0".to_owned());
    Program { root, decls }
}

/// Dimensions a generated program declares.
pub fn declared_dims(p: &Program) -> Vec<String> {
    p.decls
        .iter()
        .filter_map(|d| match d {
            Decl::Dimension(ds) => Some(ds.clone()),
            Decl::Define(..) => None,
        })
        .flatten()
        .collect()
}
