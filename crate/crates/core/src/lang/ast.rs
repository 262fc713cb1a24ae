use std::fmt;

use crate::model::Value;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum BinOp {
    Add,
    Sub,
    Mul,
    Div,
    Rem,
    Eq,
    Ne,
    Lt,
    Le,
    Gt,
    Ge,
    And,
    Or,
}

impl BinOp {
    pub const ALL: [BinOp; 13] = [
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

    pub fn symbol(self) -> &'static str {
        match self {
            BinOp::Add => "+",
            BinOp::Sub => "-",
            BinOp::Mul => "*",
            BinOp::Div => "/",
            BinOp::Rem => "%",
            BinOp::Eq => "==",
            BinOp::Ne => "!=",
            BinOp::Lt => "<",
            BinOp::Le => "<=",
            BinOp::Gt => ">",
            BinOp::Ge => ">=",
            BinOp::And => "&&",
            BinOp::Or => "||",
        }
    }

    pub fn code(self) -> u8 {
        Self::ALL.iter().position(|o| *o == self).unwrap() as u8
    }

    pub fn from_code(code: u8) -> Option<Self> {
        Self::ALL.get(code as usize).copied()
    }
}

impl fmt::Display for BinOp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.symbol())
    }
}

/// Expression tree of the intensional language.
#[derive(Debug, Clone, PartialEq)]
pub enum Expr {
    Literal(Value),
    Ident(String),
    Binary(BinOp, Box<Expr>, Box<Expr>),
    Neg(Box<Expr>),
    If(Box<Expr>, Box<Expr>, Box<Expr>),
    /// `expr @.dim tag`: evaluate `expr` with `dim` moved to `tag`.
    At(Box<Expr>, String, Box<Expr>),
    /// `#.dim`: the current tag of `dim`.
    HashDim(String),
    Call(String, Vec<Expr>),
}

impl Expr {
    pub fn binary(op: BinOp, l: Expr, r: Expr) -> Self {
        Expr::Binary(op, Box::new(l), Box::new(r))
    }

    pub fn if_(c: Expr, t: Expr, e: Expr) -> Self {
        Expr::If(Box::new(c), Box::new(t), Box::new(e))
    }

    pub fn at(e: Expr, dim: &str, tag: Expr) -> Self {
        Expr::At(Box::new(e), dim.to_owned(), Box::new(tag))
    }

    pub fn int(i: i64) -> Self {
        Expr::Literal(Value::Int(i))
    }

    /// Calls `f` on every node, parents before children.
    pub fn walk<'a>(&'a self, f: &mut impl FnMut(&'a Expr)) {
        f(self);
        match self {
            Expr::Literal(_) | Expr::Ident(_) | Expr::HashDim(_) => {}
            Expr::Binary(_, l, r) => {
                l.walk(f);
                r.walk(f);
            }
            Expr::Neg(e) => e.walk(f),
            Expr::If(c, t, e) => {
                c.walk(f);
                t.walk(f);
                e.walk(f);
            }
            Expr::At(e, _, t) => {
                e.walk(f);
                t.walk(f);
            }
            Expr::Call(_, args) => args.iter().for_each(|a| a.walk(f)),
        }
    }

    pub fn depth(&self) -> usize {
        1 + match self {
            Expr::Literal(_) | Expr::Ident(_) | Expr::HashDim(_) => 0,
            Expr::Binary(_, l, r) => l.depth().max(r.depth()),
            Expr::Neg(e) => e.depth(),
            Expr::If(c, t, e) => c.depth().max(t.depth()).max(e.depth()),
            Expr::At(e, _, t) => e.depth().max(t.depth()),
            Expr::Call(_, args) => args.iter().map(Expr::depth).max().unwrap_or(0),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Decl {
    Dimension(Vec<String>),
    Define(String, Expr),
}

/// Parser output: root expression plus its `where` declarations.
#[derive(Debug, Clone, PartialEq)]
pub struct Program {
    pub root: Expr,
    pub decls: Vec<Decl>,
}
