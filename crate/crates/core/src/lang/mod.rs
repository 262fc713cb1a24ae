//! Front-end for the intensional language: tokens, parser, semantic
//! analysis and the compiled dictionary form ([`Geer`]).

mod analyze;
pub mod ast;
mod encoding;
pub mod lexer;
mod parser;
pub mod pretty;
pub mod random;

use thiserror::Error;

pub use analyze::{analyze, token_digest, Geer};
pub use ast::{BinOp, Decl, Expr, Program};
pub use encoding::{decode_geer, encode_geer};
pub use lexer::{tokenize, Token, TokenKind};
pub use parser::parse_program;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum LangError {
    #[error("{line}:{col}: unexpected character {ch:?}")]
    Lex { line: u32, col: u32, ch: char },
    #[error("{line}:{col}: numeric literal `{lexeme}` out of range")]
    LiteralOutOfRange { line: u32, col: u32, lexeme: String },
    #[error("{line}:{col}: expected {}, found {found}", expected.join(" or "))]
    Parse { line: u32, col: u32, expected: Vec<String>, found: String },
    #[error("undefined identifier `{0}`")]
    UndefinedIdentifier(String),
    #[error("duplicate definition of `{0}`")]
    DuplicateDefinition(String),
    #[error("undeclared dimension `{0}`")]
    UndeclaredDimension(String),
}

impl LangError {
    pub fn code(&self) -> &'static str {
        match self {
            LangError::Lex { .. } | LangError::LiteralOutOfRange { .. } => "LexError",
            LangError::Parse { .. } => "ParseError",
            LangError::UndefinedIdentifier(_) => "UndefinedIdentifier",
            LangError::DuplicateDefinition(_) => "DuplicateDefinition",
            LangError::UndeclaredDimension(_) => "UndeclaredDimension",
        }
    }
}

/// Source text to compiled program.
pub fn compile(source: &str, program_id: &str) -> Result<Geer, LangError> {
    let tokens = tokenize(source)?;
    let digest = token_digest(&tokens);
    let program = parse_program(&tokens)?;
    analyze(program, program_id, digest)
}

#[cfg(test)]
mod tests {
    use super::*;

    const FACT: &str = "fact where dimension d; fact = if #.d == 0 then 1 else #.d * (fact @.d (#.d - 1)); end";

    #[test]
    fn compiles_factorial() {
        let g = compile(FACT, "fact").unwrap();
        assert_eq!(g.dimensions.iter().collect::<Vec<_>>(), vec!["d"]);
        assert_eq!(g.dictionary.keys().collect::<Vec<_>>(), vec!["fact"]);
        assert_eq!(g.root, Expr::Ident("fact".into()));
    }

    #[test]
    fn undefined_identifier() {
        assert_eq!(compile("x where y = 1; end", "p"), Err(LangError::UndefinedIdentifier("x".into())));
    }

    #[test]
    fn undeclared_dimension() {
        assert_eq!(compile("#.q", "p"), Err(LangError::UndeclaredDimension("q".into())));
        assert_eq!(compile("x where x = 1 @.q 2; end", "p"), Err(LangError::UndeclaredDimension("q".into())));
    }

    #[test]
    fn duplicate_definition() {
        assert_eq!(compile("x where x = 1; x = 2; end", "p"), Err(LangError::DuplicateDefinition("x".into())));
        assert_eq!(compile("1 where dimension d, d; end", "p"), Err(LangError::DuplicateDefinition("d".into())));
    }

    #[test]
    fn syntax_error_surfaces() {
        assert_eq!(compile("if 1 then 2", "p").unwrap_err().code(), "ParseError");
        assert_eq!(compile("4 $ 2", "p").unwrap_err().code(), "LexError");
    }

    #[test]
    fn digest_ignores_layout_and_comments() {
        let a = compile(FACT, "p").unwrap();
        let spaced = FACT.replace(' ', "\n  ") + " // trailing note";
        let b = compile(&spaced, "p").unwrap();
        assert_eq!(a.source_digest, b.source_digest);
        let c = compile(&FACT.replace("== 0", "== 1"), "p").unwrap();
        assert_ne!(a.source_digest, c.source_digest);
    }

    #[test]
    fn geer_binary_round_trip() {
        let g = compile(
            "a + call f(1.5, #.d) where dimension d, e; a = -b @.e 3; b = if #.d > 0 then 1 else 2; end",
            "prog",
        )
        .unwrap();
        let bytes = encode_geer(&g);
        assert_eq!(decode_geer(&bytes).unwrap(), g);
        assert!(decode_geer(&bytes[..bytes.len() - 1]).is_err());
        assert!(decode_geer(b"nope").is_err());
    }

    #[test]
    fn pretty_print_reparses() {
        let g = compile(FACT, "p").unwrap();
        let src = pretty::geer_to_source(&g);
        let again = compile(&src, "p").unwrap();
        assert_eq!(again.dictionary, g.dictionary);
        assert_eq!(again.root, g.root);
    }
}
