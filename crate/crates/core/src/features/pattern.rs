//! Calculation skeletons: numerals become `#` (or `#%`), operators and
//! grouping stay.
//!
//! The same grammar normalizes derivation strings and skeletons rendered from
//! generated programs, so both features share one alphabet.

use std::fmt;

use rust_decimal::Decimal;
use serde::{Deserialize, Serialize};

use crate::numeric::parse_plain_numeral;

/// A normalized calculation skeleton such as `(#-#)/#`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct CalcPattern(String);

impl CalcPattern {
    pub const OTHER: &'static str = "other";

    pub fn other() -> Self {
        CalcPattern(Self::OTHER.to_string())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }

    pub fn is_other(&self) -> bool {
        self.0 == Self::OTHER
    }

    /// Wraps an already-normalized skeleton without re-checking it.
    pub fn from_normalized(s: impl Into<String>) -> Self {
        CalcPattern(s.into())
    }
}

impl fmt::Display for CalcPattern {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Tok {
    Num { value: Option<Decimal>, percent: bool },
    Op(char),
    Open(char),
    Close(char),
    Ident(String),
    Comma,
}

fn tokenize(text: &str) -> Option<Vec<Tok>> {
    let chars: Vec<char> = text.chars().collect();
    let mut out = Vec::new();
    let mut i = 0;
    while i < chars.len() {
        let c = chars[i];
        match c {
            c if c.is_whitespace() || c == '$' => i += 1,
            '+' | '*' | '/' | '^' => {
                out.push(Tok::Op(c));
                i += 1;
            }
            '-' | '−' | '–' => {
                out.push(Tok::Op('-'));
                i += 1;
            }
            '×' => {
                out.push(Tok::Op('*'));
                i += 1;
            }
            '÷' => {
                out.push(Tok::Op('/'));
                i += 1;
            }
            '(' | '[' => {
                out.push(Tok::Open(c));
                i += 1;
            }
            ')' | ']' => {
                out.push(Tok::Close(c));
                i += 1;
            }
            ',' => {
                out.push(Tok::Comma);
                i += 1;
            }
            '#' => {
                i += 1;
                let percent = percent_follows(&chars, &mut i);
                out.push(Tok::Num {
                    value: None,
                    percent,
                });
            }
            c if c.is_ascii_digit() || c == '.' => {
                let start = i;
                while i < chars.len()
                    && (chars[i].is_ascii_digit()
                        || chars[i] == '.'
                        || (chars[i] == ','
                            && i + 1 < chars.len()
                            && chars[i + 1].is_ascii_digit()
                            && grouping_comma(&chars, i)))
                {
                    i += 1;
                }
                let lit: String = chars[start..i].iter().collect();
                let value = parse_plain_numeral(&lit)?;
                let percent = percent_follows(&chars, &mut i);
                out.push(Tok::Num {
                    value: Some(value),
                    percent,
                });
            }
            c if c.is_ascii_alphabetic() || c == '_' => {
                let start = i;
                while i < chars.len() && (chars[i].is_ascii_alphanumeric() || chars[i] == '_') {
                    i += 1;
                }
                out.push(Tok::Ident(chars[start..i].iter().collect()));
            }
            _ => return None,
        }
    }
    Some(out)
}

/// A comma followed by exactly three digits and then a non-digit is a
/// thousands separator; anything else separates arguments.
fn grouping_comma(chars: &[char], comma: usize) -> bool {
    let digits = chars[comma + 1..]
        .iter()
        .take_while(|c| c.is_ascii_digit())
        .count();
    digits == 3
}

fn percent_follows(chars: &[char], i: &mut usize) -> bool {
    let mut j = *i;
    while j < chars.len() && chars[j] == ' ' {
        j += 1;
    }
    if j < chars.len() && chars[j] == '%' {
        *i = j + 1;
        true
    } else {
        false
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Node {
    Num { value: Option<Decimal>, percent: bool },
    Group(char, Box<Node>),
    Neg(Box<Node>),
    Bin(char, Box<Node>, Box<Node>),
    Call(String, Vec<Node>),
}

struct Parser {
    toks: Vec<Tok>,
    pos: usize,
}

impl Parser {
    fn peek(&self) -> Option<&Tok> {
        self.toks.get(self.pos)
    }

    fn next(&mut self) -> Option<Tok> {
        let t = self.toks.get(self.pos).cloned();
        self.pos += 1;
        t
    }

    fn expr(&mut self) -> Option<Node> {
        let mut lhs = self.term()?;
        while let Some(Tok::Op(op @ ('+' | '-'))) = self.peek().cloned() {
            self.pos += 1;
            let rhs = self.term()?;
            lhs = Node::Bin(op, Box::new(lhs), Box::new(rhs));
        }
        Some(lhs)
    }

    fn term(&mut self) -> Option<Node> {
        let mut lhs = self.unary()?;
        while let Some(Tok::Op(op @ ('*' | '/'))) = self.peek().cloned() {
            self.pos += 1;
            let rhs = self.unary()?;
            lhs = Node::Bin(op, Box::new(lhs), Box::new(rhs));
        }
        Some(lhs)
    }

    fn unary(&mut self) -> Option<Node> {
        match self.peek() {
            Some(Tok::Op('-')) => {
                self.pos += 1;
                Some(Node::Neg(Box::new(self.unary()?)))
            }
            Some(Tok::Op('+')) => {
                self.pos += 1;
                self.unary()
            }
            _ => self.power(),
        }
    }

    fn power(&mut self) -> Option<Node> {
        let base = self.atom()?;
        if let Some(Tok::Op('^')) = self.peek() {
            self.pos += 1;
            let exp = self.unary()?;
            return Some(Node::Bin('^', Box::new(base), Box::new(exp)));
        }
        Some(base)
    }

    fn atom(&mut self) -> Option<Node> {
        match self.next()? {
            Tok::Num { value, percent } => Some(Node::Num { value, percent }),
            Tok::Open(open) => {
                let inner = self.expr()?;
                match self.next()? {
                    Tok::Close(close) if matching(open, close) => {
                        Some(Node::Group(open, Box::new(inner)))
                    }
                    _ => None,
                }
            }
            Tok::Ident(name) => {
                if self.next()? != Tok::Open('(') {
                    return None;
                }
                let mut args = Vec::new();
                if self.peek() == Some(&Tok::Close(')')) {
                    self.pos += 1;
                    return Some(Node::Call(name, args));
                }
                loop {
                    args.push(self.expr()?);
                    match self.next()? {
                        Tok::Comma => continue,
                        Tok::Close(')') => break,
                        _ => return None,
                    }
                }
                Some(Node::Call(name, args))
            }
            _ => None,
        }
    }
}

fn matching(open: char, close: char) -> bool {
    matches!((open, close), ('(', ')') | ('[', ']'))
}

fn parse(text: &str) -> Option<Node> {
    let toks = tokenize(text)?;
    if toks.is_empty() {
        return None;
    }
    let mut p = Parser { toks, pos: 0 };
    let node = p.expr()?;
    (p.pos == p.toks.len()).then_some(node)
}

/// Drops parentheses around a single numeral and directly doubled parentheses.
fn simplify(node: Node) -> Node {
    match node {
        Node::Group(kind, inner) => {
            let inner = simplify(*inner);
            match inner {
                Node::Num { .. } if kind == '(' => inner,
                Node::Group('(', _) if kind == '(' => inner,
                other => Node::Group(kind, Box::new(other)),
            }
        }
        Node::Neg(x) => Node::Neg(Box::new(simplify(*x))),
        Node::Bin(op, l, r) => Node::Bin(op, Box::new(simplify(*l)), Box::new(simplify(*r))),
        Node::Call(name, args) => Node::Call(name, args.into_iter().map(simplify).collect()),
        n @ Node::Num { .. } => n,
    }
}

fn strip_outer(mut node: Node) -> Node {
    while let Node::Group('(', inner) = node {
        node = *inner;
    }
    node
}

fn render(node: &Node, out: &mut String) {
    match node {
        Node::Num { percent, .. } => {
            out.push('#');
            if *percent {
                out.push('%');
            }
        }
        Node::Group(kind, inner) => {
            out.push(*kind);
            render(inner, out);
            out.push(if *kind == '[' { ']' } else { ')' });
        }
        Node::Neg(x) => {
            out.push('-');
            render(x, out);
        }
        Node::Bin(op, l, r) => {
            render(l, out);
            out.push(*op);
            render(r, out);
        }
        Node::Call(name, args) => {
            out.push_str(name);
            out.push('(');
            for (i, a) in args.iter().enumerate() {
                if i > 0 {
                    out.push(',');
                }
                render(a, out);
            }
            out.push(')');
        }
    }
}

fn collect_operands(node: &Node, out: &mut Vec<Decimal>) {
    match node {
        Node::Num { value, .. } => out.extend(value.iter().copied()),
        Node::Neg(x) => match x.as_ref() {
            Node::Num {
                value: Some(v), ..
            } => out.push(-*v),
            other => collect_operands(other, out),
        },
        Node::Group(_, x) => collect_operands(x, out),
        Node::Bin(_, l, r) => {
            collect_operands(l, out);
            collect_operands(r, out);
        }
        Node::Call(_, args) => args.iter().for_each(|a| collect_operands(a, out)),
    }
}

/// Skeleton of a derivation string, or `other` when it does not parse.
pub fn derivation_pattern(derivation: &str) -> CalcPattern {
    match normalize(derivation) {
        Some(p) => p,
        None => {
            tracing::debug!(derivation, "unparseable derivation");
            CalcPattern::other()
        }
    }
}

/// Normalizes a skeleton or derivation; `None` if it does not parse.
pub fn normalize(text: &str) -> Option<CalcPattern> {
    let node = strip_outer(simplify(parse(text)?));
    let mut out = String::new();
    render(&node, &mut out);
    Some(CalcPattern(out))
}

/// Every numeral of the derivation. A minus directly in front of a numeral
/// belongs to it; a minus in front of a group does not.
pub fn extract_operands(derivation: &str) -> Vec<Decimal> {
    if let Some(node) = parse(derivation) {
        let mut out = Vec::new();
        collect_operands(&simplify(node), &mut out);
        return out;
    }
    // Unparseable text: fall back to a plain scan of the numerals.
    let mut out = Vec::new();
    let mut current = String::new();
    for c in derivation.chars().chain(std::iter::once(' ')) {
        if c.is_ascii_digit() || c == '.' || (c == ',' && !current.is_empty()) {
            current.push(c);
        } else if !current.is_empty() {
            let lit = current.trim_end_matches([',', '.']);
            if let Some(v) = parse_plain_numeral(lit).or_else(|| parse_plain_numeral(&lit.replace(',', ""))) {
                out.push(v);
            }
            current.clear();
        }
    }
    out
}
