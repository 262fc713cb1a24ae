use super::LangError;

#[derive(Debug, Clone, PartialEq)]
pub enum TokenKind {
    Int(i64),
    Float(f64),
    Ident(String),
    Where,
    End,
    Dimension,
    If,
    Then,
    Else,
    Call,
    Plus,
    Minus,
    Star,
    Slash,
    Percent,
    EqEq,
    NotEq,
    Lt,
    Le,
    Gt,
    Ge,
    AndAnd,
    OrOr,
    At,
    Hash,
    Dot,
    Comma,
    Semi,
    LParen,
    RParen,
    Assign,
    Eof,
}

impl TokenKind {
    /// Human-readable spelling used in parse errors.
    pub fn describe(&self) -> String {
        match self {
            TokenKind::Int(i) => format!("integer {i}"),
            TokenKind::Float(x) => format!("float {x:?}"),
            TokenKind::Ident(s) => format!("identifier `{s}`"),
            TokenKind::Eof => "end of input".into(),
            other => format!("`{}`", other.spelling()),
        }
    }

    pub fn spelling(&self) -> &'static str {
        match self {
            TokenKind::Where => "where",
            TokenKind::End => "end",
            TokenKind::Dimension => "dimension",
            TokenKind::If => "if",
            TokenKind::Then => "then",
            TokenKind::Else => "else",
            TokenKind::Call => "call",
            TokenKind::Plus => "+",
            TokenKind::Minus => "-",
            TokenKind::Star => "*",
            TokenKind::Slash => "/",
            TokenKind::Percent => "%",
            TokenKind::EqEq => "==",
            TokenKind::NotEq => "!=",
            TokenKind::Lt => "<",
            TokenKind::Le => "<=",
            TokenKind::Gt => ">",
            TokenKind::Ge => ">=",
            TokenKind::AndAnd => "&&",
            TokenKind::OrOr => "||",
            TokenKind::At => "@",
            TokenKind::Hash => "#",
            TokenKind::Dot => ".",
            TokenKind::Comma => ",",
            TokenKind::Semi => ";",
            TokenKind::LParen => "(",
            TokenKind::RParen => ")",
            TokenKind::Assign => "=",
            TokenKind::Eof => "EOF",
            TokenKind::Int(_) => "INT",
            TokenKind::Float(_) => "FLOAT",
            TokenKind::Ident(_) => "IDENT",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Token {
    pub kind: TokenKind,
    pub lexeme: String,
    pub line: u32,
    pub col: u32,
}

fn keyword(word: &str) -> Option<TokenKind> {
    Some(match word {
        "where" => TokenKind::Where,
        "end" => TokenKind::End,
        "dimension" => TokenKind::Dimension,
        "if" => TokenKind::If,
        "then" => TokenKind::Then,
        "else" => TokenKind::Else,
        "call" => TokenKind::Call,
        _ => return None,
    })
}

struct Lexer {
    chars: Vec<char>,
    pos: usize,
    line: u32,
    col: u32,
}

impl Lexer {
    fn peek(&self, ahead: usize) -> Option<char> {
        self.chars.get(self.pos + ahead).copied()
    }

    fn bump(&mut self) -> Option<char> {
        let c = self.chars.get(self.pos).copied()?;
        self.pos += 1;
        if c == '\n' {
            self.line += 1;
            self.col = 1;
        } else {
            self.col += 1;
        }
        Some(c)
    }

    fn skip_trivia(&mut self) {
        loop {
            match self.peek(0) {
                Some(c) if c.is_whitespace() => {
                    self.bump();
                }
                Some('/') if self.peek(1) == Some('/') => {
                    while let Some(c) = self.peek(0) {
                        if c == '\n' {
                            break;
                        }
                        self.bump();
                    }
                }
                _ => return,
            }
        }
    }

    fn number(&mut self, line: u32, col: u32) -> Result<Token, LangError> {
        let start = self.pos;
        let mut is_float = false;
        while self.peek(0).is_some_and(|c| c.is_ascii_digit()) {
            self.bump();
        }
        if self.peek(0) == Some('.') && self.peek(1).is_some_and(|c| c.is_ascii_digit()) {
            is_float = true;
            self.bump();
            while self.peek(0).is_some_and(|c| c.is_ascii_digit()) {
                self.bump();
            }
        }
        if matches!(self.peek(0), Some('e' | 'E')) {
            let digit_at = if matches!(self.peek(1), Some('+' | '-')) { 2 } else { 1 };
            if self.peek(digit_at).is_some_and(|c| c.is_ascii_digit()) {
                is_float = true;
                for _ in 0..digit_at {
                    self.bump();
                }
                while self.peek(0).is_some_and(|c| c.is_ascii_digit()) {
                    self.bump();
                }
            }
        }
        let lexeme: String = self.chars[start..self.pos].iter().collect();
        let kind = if is_float {
            let x: f64 = lexeme.parse().expect("float lexeme");
            if !x.is_finite() {
                return Err(LangError::LiteralOutOfRange { line, col, lexeme });
            }
            TokenKind::Float(x)
        } else {
            match lexeme.parse::<i64>() {
                Ok(i) => TokenKind::Int(i),
                Err(_) => return Err(LangError::LiteralOutOfRange { line, col, lexeme }),
            }
        };
        Ok(Token { kind, lexeme, line, col })
    }

    fn next_token(&mut self) -> Result<Token, LangError> {
        self.skip_trivia();
        let (line, col) = (self.line, self.col);
        let Some(c) = self.peek(0) else {
            return Ok(Token { kind: TokenKind::Eof, lexeme: String::new(), line, col });
        };
        if c.is_ascii_digit() {
            return self.number(line, col);
        }
        if c.is_ascii_alphabetic() || c == '_' {
            let start = self.pos;
            while self.peek(0).is_some_and(|c| c.is_ascii_alphanumeric() || c == '_') {
                self.bump();
            }
            let lexeme: String = self.chars[start..self.pos].iter().collect();
            let kind = keyword(&lexeme).unwrap_or_else(|| TokenKind::Ident(lexeme.clone()));
            return Ok(Token { kind, lexeme, line, col });
        }
        let two = |a: char, b: char| c == a && self.peek(1) == Some(b);
        let (kind, len) = if two('=', '=') {
            (TokenKind::EqEq, 2)
        } else if two('!', '=') {
            (TokenKind::NotEq, 2)
        } else if two('<', '=') {
            (TokenKind::Le, 2)
        } else if two('>', '=') {
            (TokenKind::Ge, 2)
        } else if two('&', '&') {
            (TokenKind::AndAnd, 2)
        } else if two('|', '|') {
            (TokenKind::OrOr, 2)
        } else {
            let kind = match c {
                '+' => TokenKind::Plus,
                '-' => TokenKind::Minus,
                '*' => TokenKind::Star,
                '/' => TokenKind::Slash,
                '%' => TokenKind::Percent,
                '<' => TokenKind::Lt,
                '>' => TokenKind::Gt,
                '@' => TokenKind::At,
                '#' => TokenKind::Hash,
                '.' => TokenKind::Dot,
                ',' => TokenKind::Comma,
                ';' => TokenKind::Semi,
                '(' => TokenKind::LParen,
                ')' => TokenKind::RParen,
                '=' => TokenKind::Assign,
                other => return Err(LangError::Lex { line, col, ch: other }),
            };
            (kind, 1)
        };
        let start = self.pos;
        for _ in 0..len {
            self.bump();
        }
        let lexeme: String = self.chars[start..self.pos].iter().collect();
        Ok(Token { kind, lexeme, line, col })
    }
}

/// Splits source text into tokens, always ending with an `Eof` token.
pub fn tokenize(source: &str) -> Result<Vec<Token>, LangError> {
    let mut lexer = Lexer { chars: source.chars().collect(), pos: 0, line: 1, col: 1 };
    let mut out = Vec::new();
    loop {
        let tok = lexer.next_token()?;
        let done = tok.kind == TokenKind::Eof;
        out.push(tok);
        if done {
            return Ok(out);
        }
    }
}
