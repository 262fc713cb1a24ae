//! Text form of demand signatures for the command line.
//!
//! Intensional signatures read `prog:name@{d:5,t:1}` and procedural ones
//! `prog:name(1, 2.5, "x")`. Anything without a faithful text form is
//! written as `hex:` followed by its canonical key.

use eduction_core::codec;
use eduction_core::{Context, DemandKind, DemandSignature, Value};

/// Text that [`parse_signature`] turns back into exactly `sig`.
pub fn format_signature(sig: &DemandSignature) -> String {
    let text = sig.to_string();
    match parse_signature(&text) {
        Ok(back) if back == *sig => text,
        _ => format!("hex:{}", hex::encode(sig.key())),
    }
}

pub fn parse_signature(text: &str) -> Result<DemandSignature, String> {
    if let Some(h) = text.strip_prefix("hex:") {
        let bytes = hex::decode(h).map_err(|e| format!("bad hex key: {e}"))?;
        return codec::decode_signature(&bytes).map_err(|e| e.to_string());
    }
    let (program, rest) = text.split_once(':').ok_or("expected `program:name`")?;
    let at = rest.find(['@', '(']).ok_or("expected `@{context}` or `(args)` after the name")?;
    let (name, tail) = rest.split_at(at);
    if name.is_empty() {
        return Err("empty name".into());
    }
    if let Some(ctx) = tail.strip_prefix('@') {
        return Ok(DemandSignature::intensional(program, name, parse_context(ctx)?));
    }
    let inner = tail.strip_prefix('(').and_then(|t| t.strip_suffix(')')).ok_or("unbalanced parentheses")?;
    let mut p = Args { s: inner, pos: 0 };
    let args = p.list(None)?;
    let sig = DemandSignature::procedural(program, name, args);
    debug_assert_eq!(sig.kind, DemandKind::Procedural);
    Ok(sig)
}

/// `{d:5,t:1}`, or the `d=5,t=1` form accepted by `--ctx`.
pub fn parse_context(text: &str) -> Result<Context, String> {
    let body = text.strip_prefix('{').and_then(|t| t.strip_suffix('}')).unwrap_or(text);
    let mut pairs = Vec::new();
    for item in body.split(',').map(str::trim).filter(|s| !s.is_empty()) {
        let (d, t) = item.split_once([':', '=']).ok_or_else(|| format!("`{item}` is not dim=tag"))?;
        let tag = t.trim().parse::<i64>().map_err(|_| format!("tag `{}` is not an integer", t.trim()))?;
        pairs.push((d.trim().to_owned(), tag));
    }
    Context::from_pairs(pairs).map_err(|e| e.to_string())
}

struct Args<'a> {
    s: &'a str,
    pos: usize,
}

impl Args<'_> {
    fn rest(&self) -> &str {
        &self.s[self.pos..]
    }

    fn skip_ws(&mut self) {
        let trimmed = self.rest().trim_start();
        self.pos = self.s.len() - trimmed.len();
    }

    fn eat(&mut self, c: char) -> bool {
        self.skip_ws();
        if self.rest().starts_with(c) {
            self.pos += c.len_utf8();
            true
        } else {
            false
        }
    }

    /// Comma-separated values up to `close` (or the end of input).
    fn list(&mut self, close: Option<char>) -> Result<Vec<Value>, String> {
        let mut out = Vec::new();
        let done = |p: &mut Self| match close {
            Some(c) => p.eat(c),
            None => {
                p.skip_ws();
                p.rest().is_empty()
            }
        };
        if done(self) {
            return Ok(out);
        }
        loop {
            out.push(self.value()?);
            if done(self) {
                return Ok(out);
            }
            if !self.eat(',') {
                return Err(format!("expected `,` at `{}`", self.rest()));
            }
        }
    }

    fn value(&mut self) -> Result<Value, String> {
        self.skip_ws();
        if self.eat('"') {
            return self.string().map(Value::Str);
        }
        if self.eat('[') {
            let items = self.list(Some(']'))?;
            return items
                .into_iter()
                .map(|v| match v {
                    Value::Float(x) => Ok(x),
                    other => Err(format!("array element {other} is not a float")),
                })
                .collect::<Result<_, _>>()
                .map(Value::FloatArray);
        }
        let end = self.rest().find([',', ']', ')']).unwrap_or(self.rest().len());
        let tok = self.rest()[..end].trim().to_owned();
        self.pos += end;
        let tok = tok.as_str();
        match tok {
            "true" => Ok(Value::Bool(true)),
            "false" => Ok(Value::Bool(false)),
            _ if !tok.is_empty() && tok.trim_start_matches('-').bytes().all(|b| b.is_ascii_digit()) => {
                tok.parse().map(Value::Int).map_err(|_| format!("integer `{tok}` out of range"))
            }
            _ => tok.parse().map(Value::Float).map_err(|_| format!("cannot read `{tok}` as a value")),
        }
    }

    /// Body of a string literal using Rust debug escapes; the opening
    /// quote is already consumed.
    fn string(&mut self) -> Result<String, String> {
        let mut out = String::new();
        let mut chars = self.rest().char_indices();
        while let Some((i, c)) = chars.next() {
            match c {
                '"' => {
                    self.pos += i + 1;
                    return Ok(out);
                }
                '\\' => {
                    let (_, e) = chars.next().ok_or("dangling escape")?;
                    out.push(match e {
                        'n' => '\n',
                        'r' => '\r',
                        't' => '\t',
                        '0' => '\0',
                        '\\' | '"' | '\'' => e,
                        'u' => {
                            let hex: String = chars
                                .by_ref()
                                .map(|(_, c)| c)
                                .skip_while(|c| *c == '{')
                                .take_while(|c| *c != '}')
                                .collect();
                            u32::from_str_radix(&hex, 16)
                                .ok()
                                .and_then(char::from_u32)
                                .ok_or_else(|| format!("bad unicode escape `{hex}`"))?
                        }
                        other => return Err(format!("unknown escape `\\{other}`")),
                    });
                }
                c => out.push(c),
            }
        }
        Err("unterminated string".into())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn readable_forms() {
        let s = parse_signature("fact:fact@{d:5}").unwrap();
        assert_eq!(s, DemandSignature::intensional("fact", "fact", Context::empty().with("d", 5)));
        let p = parse_signature(r#"t:add2(1, -2.5, "a\"b", true, [1.0, 2.0])"#).unwrap();
        assert_eq!(
            p.args,
            vec![
                Value::Int(1),
                Value::Float(-2.5),
                Value::Str("a\"b".into()),
                Value::Bool(true),
                Value::FloatArray(vec![1.0, 2.0])
            ]
        );
        assert_eq!(parse_signature("t:f()").unwrap().args, vec![]);
        assert_eq!(parse_context("d=5, t=-1").unwrap(), Context::empty().with("d", 5).with("t", -1));
    }

    #[test]
    fn malformed_text_is_rejected() {
        for bad in ["fact", "p:@{}", "p:f(1", "p:f(1 2)", "p:f(\"x)", "p:f@{d:x}", "hex:zz", "p:f([true])"] {
            assert!(parse_signature(bad).is_err(), "{bad}");
        }
    }
}
