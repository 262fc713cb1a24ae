//! Recursive-descent parser with one function per precedence level.
//!
//! ```text
//! program := expr [ "where" decl* "end" ]
//! decl    := "dimension" ident ("," ident)* ";" | ident "=" expr ";"
//! expr    := or
//! or      := and ("||" and)*
//! and     := cmp ("&&" cmp)*
//! cmp     := add (("=="|"!="|"<"|"<="|">"|">=") add)*
//! add     := mul (("+"|"-") mul)*
//! mul     := unary (("*"|"/"|"%") unary)*
//! unary   := "-" unary | postfix
//! postfix := primary ("@" "." ident primary)*
//! primary := INT | FLOAT | ident | "(" expr ")" | "#" "." ident
//!          | "if" expr "then" expr "else" expr
//!          | "call" ident "(" [expr ("," expr)*] ")"
//! ```

use super::ast::{BinOp, Decl, Expr, Program};
use super::lexer::{Token, TokenKind};
use super::LangError;
use crate::model::Value;

const MAX_NESTING: usize = 256;

struct Parser<'t> {
    tokens: &'t [Token],
    pos: usize,
    nesting: usize,
}

type PResult<T> = Result<T, LangError>;

impl<'t> Parser<'t> {
    fn peek(&self) -> &'t Token {
        &self.tokens[self.pos.min(self.tokens.len() - 1)]
    }

    fn advance(&mut self) -> &'t Token {
        let tok = self.peek();
        if tok.kind != TokenKind::Eof {
            self.pos += 1;
        }
        tok
    }

    fn at(&self, kind: &TokenKind) -> bool {
        std::mem::discriminant(&self.peek().kind) == std::mem::discriminant(kind)
    }

    fn error(&self, expected: &[&str]) -> LangError {
        let tok = self.peek();
        LangError::Parse {
            line: tok.line,
            col: tok.col,
            expected: expected.iter().map(|s| s.to_string()).collect(),
            found: tok.kind.describe(),
        }
    }

    fn expect(&mut self, kind: TokenKind) -> PResult<&'t Token> {
        if self.at(&kind) {
            Ok(self.advance())
        } else {
            Err(self.error(&[kind.spelling()]))
        }
    }

    fn ident(&mut self) -> PResult<String> {
        match &self.peek().kind {
            TokenKind::Ident(name) => {
                let name = name.clone();
                self.advance();
                Ok(name)
            }
            _ => Err(self.error(&["identifier"])),
        }
    }

    fn program(&mut self) -> PResult<Program> {
        let root = self.expr()?;
        let mut decls = Vec::new();
        if self.at(&TokenKind::Where) {
            self.advance();
            loop {
                match &self.peek().kind {
                    TokenKind::End => {
                        self.advance();
                        break;
                    }
                    TokenKind::Dimension => {
                        self.advance();
                        let mut dims = vec![self.ident()?];
                        while self.at(&TokenKind::Comma) {
                            self.advance();
                            dims.push(self.ident()?);
                        }
                        self.expect(TokenKind::Semi)?;
                        decls.push(Decl::Dimension(dims));
                    }
                    TokenKind::Ident(_) => {
                        let name = self.ident()?;
                        self.expect(TokenKind::Assign)?;
                        let body = self.expr()?;
                        self.expect(TokenKind::Semi)?;
                        decls.push(Decl::Define(name, body));
                    }
                    _ => return Err(self.error(&["dimension", "identifier", "end"])),
                }
            }
        }
        if !self.at(&TokenKind::Eof) {
            return Err(self.error(if decls.is_empty() { &["where", "end of input"] } else { &["end of input"] }));
        }
        Ok(Program { root, decls })
    }

    fn expr(&mut self) -> PResult<Expr> {
        self.nesting += 1;
        if self.nesting > MAX_NESTING {
            return Err(self.error(&["shallower nesting"]));
        }
        let e = stacker::maybe_grow(32 * 1024, 1024 * 1024, || self.or());
        self.nesting -= 1;
        e
    }

    fn left_assoc(
        &mut self,
        next: fn(&mut Self) -> PResult<Expr>,
        op_of: fn(&TokenKind) -> Option<BinOp>,
    ) -> PResult<Expr> {
        let mut lhs = next(self)?;
        while let Some(op) = op_of(&self.peek().kind) {
            self.advance();
            let rhs = next(self)?;
            lhs = Expr::binary(op, lhs, rhs);
        }
        Ok(lhs)
    }

    fn or(&mut self) -> PResult<Expr> {
        self.left_assoc(Self::and, |k| matches!(k, TokenKind::OrOr).then_some(BinOp::Or))
    }

    fn and(&mut self) -> PResult<Expr> {
        self.left_assoc(Self::cmp, |k| matches!(k, TokenKind::AndAnd).then_some(BinOp::And))
    }

    fn cmp(&mut self) -> PResult<Expr> {
        self.left_assoc(Self::add, |k| match k {
            TokenKind::EqEq => Some(BinOp::Eq),
            TokenKind::NotEq => Some(BinOp::Ne),
            TokenKind::Lt => Some(BinOp::Lt),
            TokenKind::Le => Some(BinOp::Le),
            TokenKind::Gt => Some(BinOp::Gt),
            TokenKind::Ge => Some(BinOp::Ge),
            _ => None,
        })
    }

    fn add(&mut self) -> PResult<Expr> {
        self.left_assoc(Self::mul, |k| match k {
            TokenKind::Plus => Some(BinOp::Add),
            TokenKind::Minus => Some(BinOp::Sub),
            _ => None,
        })
    }

    fn mul(&mut self) -> PResult<Expr> {
        self.left_assoc(Self::unary, |k| match k {
            TokenKind::Star => Some(BinOp::Mul),
            TokenKind::Slash => Some(BinOp::Div),
            TokenKind::Percent => Some(BinOp::Rem),
            _ => None,
        })
    }

    fn unary(&mut self) -> PResult<Expr> {
        if self.at(&TokenKind::Minus) {
            self.advance();
            self.nesting += 1;
            if self.nesting > MAX_NESTING {
                return Err(self.error(&["shallower nesting"]));
            }
            let inner = stacker::maybe_grow(32 * 1024, 1024 * 1024, || self.unary());
            self.nesting -= 1;
            return Ok(Expr::Neg(Box::new(inner?)));
        }
        self.postfix()
    }

    fn postfix(&mut self) -> PResult<Expr> {
        let mut e = self.primary()?;
        while self.at(&TokenKind::At) {
            self.advance();
            self.expect(TokenKind::Dot)?;
            let dim = self.ident()?;
            let tag = self.primary()?;
            e = Expr::At(Box::new(e), dim, Box::new(tag));
        }
        Ok(e)
    }

    fn primary(&mut self) -> PResult<Expr> {
        let tok = self.peek();
        match &tok.kind {
            TokenKind::Int(i) => {
                self.advance();
                Ok(Expr::Literal(Value::Int(*i)))
            }
            TokenKind::Float(x) => {
                self.advance();
                Ok(Expr::Literal(Value::Float(*x)))
            }
            TokenKind::Ident(name) => {
                self.advance();
                Ok(Expr::Ident(name.clone()))
            }
            TokenKind::LParen => {
                self.advance();
                let e = self.expr()?;
                self.expect(TokenKind::RParen)?;
                Ok(e)
            }
            TokenKind::Hash => {
                self.advance();
                self.expect(TokenKind::Dot)?;
                Ok(Expr::HashDim(self.ident()?))
            }
            TokenKind::If => {
                self.advance();
                let c = self.expr()?;
                self.expect(TokenKind::Then)?;
                let t = self.expr()?;
                self.expect(TokenKind::Else)?;
                let e = self.expr()?;
                Ok(Expr::if_(c, t, e))
            }
            TokenKind::Call => {
                self.advance();
                let name = self.ident()?;
                self.expect(TokenKind::LParen)?;
                let mut args = Vec::new();
                if !self.at(&TokenKind::RParen) {
                    args.push(self.expr()?);
                    while self.at(&TokenKind::Comma) {
                        self.advance();
                        args.push(self.expr()?);
                    }
                }
                self.expect(TokenKind::RParen)?;
                Ok(Expr::Call(name, args))
            }
            _ => Err(self.error(&["expression"])),
        }
    }
}

/// Parses a token stream produced by [`super::tokenize`].
pub fn parse_program(tokens: &[Token]) -> Result<Program, LangError> {
    assert!(tokens.last().is_some_and(|t| t.kind == TokenKind::Eof), "token stream must end with Eof");
    Parser { tokens, pos: 0, nesting: 0 }.program()
}
