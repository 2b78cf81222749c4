//! Text format for constraint files.
//!
//! ```text
//! # comment
//! C1 measurement per_interval: max(x) == m[qlen.max]
//! C3 operational: count_pos(x) <= m[sent.sum]
//! C7 operational: max(x) >= 0.5 * s[bandwidth] when m[congestion.sum] > 0
//! ```
//!
//! The scope (`per_interval` | `per_window`) is optional and defaults to
//! `per_interval`. Guards after `when` are joined with `and`.

use super::{Aggregate, CmpOp, Constraint, ConstraintClass, ConstraintSet, Expr, Guard, Relation, Scope};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
enum Tok {
    Num(f64),
    Ident(String),
    Ref(char, String),
    LParen,
    RParen,
    Comma,
    Plus,
    Minus,
    Star,
    Cmp(String),
}

fn tokenize(s: &str, line: usize) -> Result<Vec<Tok>> {
    let err = |msg: String| Error::Parse { line, msg };
    let chars: Vec<char> = s.chars().collect();
    let mut out = Vec::new();
    let mut i = 0;
    while i < chars.len() {
        let c = chars[i];
        match c {
            ' ' | '\t' => i += 1,
            '(' => {
                out.push(Tok::LParen);
                i += 1
            }
            ')' => {
                out.push(Tok::RParen);
                i += 1
            }
            ',' => {
                out.push(Tok::Comma);
                i += 1
            }
            '+' => {
                out.push(Tok::Plus);
                i += 1
            }
            '-' => {
                out.push(Tok::Minus);
                i += 1
            }
            '*' => {
                out.push(Tok::Star);
                i += 1
            }
            '<' | '>' | '=' | '!' => {
                let two = chars.get(i + 1) == Some(&'=');
                let op: String = if two { chars[i..i + 2].iter().collect() } else { c.to_string() };
                if op == "=" || op == "!" {
                    return Err(err(format!("unexpected `{op}` (use `==` or `!=`)")));
                }
                out.push(Tok::Cmp(op));
                i += if two { 2 } else { 1 };
            }
            c if c.is_ascii_digit() || c == '.' => {
                let start = i;
                while i < chars.len()
                    && (chars[i].is_ascii_digit()
                        || chars[i] == '.'
                        || chars[i] == 'e'
                        || chars[i] == 'E'
                        || ((chars[i] == '-' || chars[i] == '+') && matches!(chars[i - 1], 'e' | 'E')))
                {
                    i += 1;
                }
                let text: String = chars[start..i].iter().collect();
                let v = text.parse::<f64>().map_err(|_| err(format!("bad number `{text}`")))?;
                out.push(Tok::Num(v));
            }
            c if c.is_alphabetic() || c == '_' => {
                let start = i;
                while i < chars.len() && (chars[i].is_alphanumeric() || chars[i] == '_') {
                    i += 1;
                }
                let word: String = chars[start..i].iter().collect();
                if (word == "m" || word == "s") && chars.get(i) == Some(&'[') {
                    let close = chars[i..]
                        .iter()
                        .position(|&c| c == ']')
                        .ok_or_else(|| err("unterminated `[`".into()))?;
                    let name: String = chars[i + 1..i + close].iter().collect::<String>().trim().to_string();
                    if name.is_empty() {
                        return Err(err("empty reference".into()));
                    }
                    out.push(Tok::Ref(word.chars().next().unwrap(), name));
                    i += close + 1;
                } else {
                    out.push(Tok::Ident(word));
                }
            }
            other => return Err(err(format!("unexpected character `{other}`"))),
        }
    }
    Ok(out)
}

struct Parser {
    toks: Vec<Tok>,
    pos: usize,
    line: usize,
}

impl Parser {
    fn err(&self, msg: impl Into<String>) -> Error {
        Error::Parse { line: self.line, msg: msg.into() }
    }

    fn peek(&self) -> Option<&Tok> {
        self.toks.get(self.pos)
    }

    fn next(&mut self) -> Option<Tok> {
        let t = self.toks.get(self.pos).cloned();
        self.pos += 1;
        t
    }

    fn expect(&mut self, t: Tok) -> Result<()> {
        match self.next() {
            Some(ref got) if *got == t => Ok(()),
            got => Err(self.err(format!("expected {t:?}, found {got:?}"))),
        }
    }

    fn expr(&mut self) -> Result<Expr> {
        let mut lhs = self.term()?;
        loop {
            match self.peek() {
                Some(Tok::Plus) => {
                    self.pos += 1;
                    lhs = Expr::add(lhs, self.term()?);
                }
                Some(Tok::Minus) => {
                    self.pos += 1;
                    lhs = Expr::sub(lhs, self.term()?);
                }
                _ => return Ok(lhs),
            }
        }
    }

    fn term(&mut self) -> Result<Expr> {
        let mut lhs = self.factor()?;
        while let Some(Tok::Star) = self.peek() {
            self.pos += 1;
            lhs = Expr::mul(lhs, self.factor()?);
        }
        Ok(lhs)
    }

    fn factor(&mut self) -> Result<Expr> {
        match self.next() {
            Some(Tok::Num(v)) => Ok(Expr::Const(v)),
            Some(Tok::Minus) => Ok(Expr::Neg(Box::new(self.factor()?))),
            Some(Tok::Ref('m', n)) => Ok(Expr::Measurement(n)),
            Some(Tok::Ref(_, n)) => Ok(Expr::Scalar(n)),
            Some(Tok::LParen) => {
                let e = self.expr()?;
                self.expect(Tok::RParen)?;
                Ok(e)
            }
            Some(Tok::Ident(f)) => {
                self.expect(Tok::LParen)?;
                match self.next() {
                    Some(Tok::Ident(x)) if x == "x" => {}
                    other => return Err(self.err(format!("`{f}` takes the series `x`, found {other:?}"))),
                }
                let agg = match f.as_str() {
                    "sum" => Aggregate::Sum,
                    "max" => Aggregate::Max,
                    "min" => Aggregate::Min,
                    "mean" => Aggregate::Mean,
                    "count_pos" => Aggregate::CountPositive,
                    "at" => {
                        self.expect(Tok::Comma)?;
                        match self.next() {
                            Some(Tok::Num(v)) if v >= 0.0 && v.fract() == 0.0 => Aggregate::At(v as usize),
                            other => return Err(self.err(format!("at() needs an index, found {other:?}"))),
                        }
                    }
                    other => return Err(self.err(format!("unknown function `{other}`"))),
                };
                self.expect(Tok::RParen)?;
                Ok(Expr::Agg(agg))
            }
            other => Err(self.err(format!("unexpected token {other:?}"))),
        }
    }

    fn cmp(&mut self) -> Result<String> {
        match self.next() {
            Some(Tok::Cmp(op)) => Ok(op),
            other => Err(self.err(format!("expected a comparison, found {other:?}"))),
        }
    }

    fn done(&self) -> bool {
        self.pos >= self.toks.len()
    }
}

fn split_keyword<'a>(s: &'a str, kw: &str) -> Vec<&'a str> {
    // split on a whole-word keyword
    let mut parts = Vec::new();
    let mut rest = s;
    loop {
        let found = rest.match_indices(kw).find(|(i, _)| {
            let before = rest[..*i].chars().last();
            let after = rest[i + kw.len()..].chars().next();
            before.map_or(true, char::is_whitespace) && after.map_or(true, char::is_whitespace)
        });
        match found {
            Some((i, _)) => {
                parts.push(&rest[..i]);
                rest = &rest[i + kw.len()..];
            }
            None => {
                parts.push(rest);
                return parts;
            }
        }
    }
}

fn parse_expr(text: &str, line: usize) -> Result<Expr> {
    let mut p = Parser { toks: tokenize(text, line)?, pos: 0, line };
    let e = p.expr()?;
    if !p.done() {
        return Err(p.err(format!("trailing input in `{}`", text.trim())));
    }
    Ok(e)
}

fn parse_guard(text: &str, line: usize) -> Result<Guard> {
    let mut p = Parser { toks: tokenize(text, line)?, pos: 0, line };
    let lhs = p.expr()?;
    let op = match p.cmp()?.as_str() {
        "<" => CmpOp::Lt,
        "<=" => CmpOp::Le,
        ">" => CmpOp::Gt,
        ">=" => CmpOp::Ge,
        "==" => CmpOp::Eq,
        "!=" => CmpOp::Ne,
        other => return Err(p.err(format!("bad guard comparison `{other}`"))),
    };
    let rhs = p.expr()?;
    if !p.done() {
        return Err(p.err("trailing input in guard"));
    }
    Ok(Guard::new(lhs, op, rhs))
}

/// Parse one constraint line.
pub fn parse_constraint(text: &str, line: usize) -> Result<Constraint> {
    let err = |msg: String| Error::Parse { line, msg };
    let (head, body) = text
        .split_once(':')
        .ok_or_else(|| err("expected `<name> <class> [scope]: <expr> <rel> <expr>`".into()))?;
    let words: Vec<&str> = head.split_whitespace().collect();
    let (name, class, scope) = match words.as_slice() {
        [name, class] => (*name, *class, "per_interval"),
        [name, class, scope] => (*name, *class, *scope),
        _ => return Err(err(format!("bad constraint header `{}`", head.trim()))),
    };
    let class = match class {
        "measurement" => ConstraintClass::Measurement,
        "operational" => ConstraintClass::Operational,
        other => return Err(err(format!("unknown class `{other}`"))),
    };
    let scope = match scope {
        "per_interval" => Scope::PerInterval,
        "per_window" => Scope::PerWindow,
        other => return Err(err(format!("unknown scope `{other}`"))),
    };

    let mut pieces = split_keyword(body, "when").into_iter();
    let relation_text = pieces.next().unwrap_or_default();
    let guard_text = pieces.next();
    if pieces.next().is_some() {
        return Err(err("`when` may appear only once".into()));
    }

    let mut p = Parser { toks: tokenize(relation_text, line)?, pos: 0, line };
    let lhs = p.expr()?;
    let relation = match p.cmp()?.as_str() {
        "==" => Relation::Eq,
        "<=" => Relation::Le,
        ">=" => Relation::Ge,
        other => return Err(err(format!("constraint relation must be ==, <= or >=, found `{other}`"))),
    };
    let rhs = p.expr()?;
    if !p.done() {
        return Err(err("trailing input after the constraint relation".into()));
    }

    let mut c = Constraint {
        name: name.to_string(),
        class,
        scope,
        lhs,
        relation,
        rhs,
        guards: Vec::new(),
    };
    if let Some(g) = guard_text {
        for part in split_keyword(g, "and") {
            c.guards.push(parse_guard(part, line)?);
        }
    }
    c.validate().map_err(|e| err(e.to_string()))?;
    Ok(c)
}

/// Parse a whole constraint file. Blank lines and `#` comments are skipped.
pub fn parse_constraint_set(text: &str) -> Result<ConstraintSet> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        out.push(parse_constraint(line, i + 1)?);
    }
    ConstraintSet::new(out)
}

/// Parse a standalone expression (used by config files and tests).
pub fn parse_expression(text: &str) -> Result<Expr> {
    parse_expr(text, 1)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_guarded_constraint() {
        let c = parse_constraint(
            "C7 operational: max(x) >= 0.5 * s[bandwidth] when m[congestion.sum] > 0",
            1,
        )
        .unwrap();
        assert_eq!(c.guards.len(), 1);
        assert_eq!(c.relation, Relation::Ge);
        assert_eq!(c.scope, Scope::PerInterval);
    }

    #[test]
    fn round_trips_through_display() {
        let text = "\
C1 measurement per_interval: max(x) == m[qlen.max]
C2 measurement per_interval: at(x, 0) == m[qlen.periodic]
C3 operational per_interval: count_pos(x) <= m[sent.sum]
W operational per_window: sum(x) - 2 * mean(x) <= -(s[a] + 1) when s[a] >= 0 and m[qlen.max] != 3
";
        let set = parse_constraint_set(text).unwrap();
        assert_eq!(set.len(), 4);
        let again = parse_constraint_set(&set.to_text()).unwrap();
        assert_eq!(set, again);
    }

    #[test]
    fn errors_carry_line_numbers() {
        let err = parse_constraint_set("# header\n\nC1 measurement: max(x) = m[q.max]\n").unwrap_err();
        match err {
            Error::Parse { line, .. } => assert_eq!(line, 3),
            other => panic!("unexpected {other:?}"),
        }
        assert!(parse_constraint("C1 bogus: max(x) == 1", 1).is_err());
        assert!(parse_constraint("C1 operational: foo(x) <= 1", 1).is_err());
        assert!(parse_constraint("C1 operational: max(x) <= 1 when max(x) > 0", 1).is_err());
    }

    #[test]
    fn scientific_numbers() {
        let e = parse_expression("1e-3 * sum(x) + 2.5E+2").unwrap();
        assert_eq!(e.to_string(), "0.001 * sum(x) + 250");
    }
}
