use std::collections::{BTreeMap, BTreeSet};

use sha2::{Digest, Sha256};

use super::ast::{Decl, Expr, Program};
use super::lexer::Token;
use super::LangError;

/// A compiled program: the dictionary of every identifier's definition,
/// the declared dimensions and the root expression.
#[derive(Debug, Clone, PartialEq)]
pub struct Geer {
    pub program_id: String,
    pub dimensions: BTreeSet<String>,
    pub dictionary: BTreeMap<String, Expr>,
    pub root: Expr,
    pub source_digest: Vec<u8>,
}

impl Geer {
    pub fn lookup(&self, name: &str) -> Option<&Expr> {
        self.dictionary.get(name)
    }

    pub fn declares(&self, dim: &str) -> bool {
        self.dimensions.contains(dim)
    }

    /// Checks that the dictionary is closed and every dimension is declared.
    pub fn check_closed(&self) -> Result<(), LangError> {
        check_expr(&self.root, &self.dictionary, &self.dimensions)?;
        for body in self.dictionary.values() {
            check_expr(body, &self.dictionary, &self.dimensions)?;
        }
        Ok(())
    }
}

fn check_expr(e: &Expr, dict: &BTreeMap<String, Expr>, dims: &BTreeSet<String>) -> Result<(), LangError> {
    let mut err = None;
    e.walk(&mut |node| {
        if err.is_some() {
            return;
        }
        match node {
            Expr::Ident(name) if !dict.contains_key(name) => err = Some(LangError::UndefinedIdentifier(name.clone())),
            Expr::HashDim(d) | Expr::At(_, d, _) if !dims.contains(d) => {
                err = Some(LangError::UndeclaredDimension(d.clone()))
            }
            _ => {}
        }
    });
    err.map_or(Ok(()), Err)
}

/// Digest of the token stream; whitespace and comments do not contribute.
pub fn token_digest(tokens: &[Token]) -> Vec<u8> {
    let mut h = Sha256::new();
    for t in tokens {
        h.update(t.kind.spelling().as_bytes());
        h.update([0u8]);
        h.update((t.lexeme.len() as u32).to_be_bytes());
        h.update(t.lexeme.as_bytes());
    }
    h.finalize().to_vec()
}

/// Builds the dictionary and validates every reference.
pub fn analyze(program: Program, program_id: &str, source_digest: Vec<u8>) -> Result<Geer, LangError> {
    let mut dimensions = BTreeSet::new();
    let mut dictionary = BTreeMap::new();
    let mut order = Vec::new();
    for decl in program.decls {
        match decl {
            Decl::Dimension(dims) => {
                for d in dims {
                    if !dimensions.insert(d.clone()) {
                        return Err(LangError::DuplicateDefinition(d));
                    }
                }
            }
            Decl::Define(name, body) => {
                if dictionary.contains_key(&name) {
                    return Err(LangError::DuplicateDefinition(name));
                }
                order.push(name.clone());
                dictionary.insert(name, body);
            }
        }
    }
    check_expr(&program.root, &dictionary, &dimensions)?;
    for name in &order {
        check_expr(&dictionary[name], &dictionary, &dimensions)?;
    }
    Ok(Geer { program_id: program_id.to_owned(), dimensions, dictionary, root: program.root, source_digest })
}
