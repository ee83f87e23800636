//! A parser for the Python subset that generated programs use.
//!
//! It covers the statement and expression grammar well enough to recover the
//! arithmetic a program performs. Constructs outside the subset surface as a
//! [`ParseError`]; callers treat that as an unknown pattern.

use std::fmt;

#[derive(Debug, Clone, PartialEq)]
pub struct ParseError {
    pub line: usize,
    pub message: String,
}

impl fmt::Display for ParseError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "line {}: {}", self.line, self.message)
    }
}

impl std::error::Error for ParseError {}

#[derive(Debug, Clone, PartialEq)]
enum TokKind {
    Name(String),
    Number(String),
    Str,
    Op(&'static str),
    Newline,
    Indent,
    Dedent,
    Eof,
}

#[derive(Debug, Clone, PartialEq)]
struct Token {
    kind: TokKind,
    line: usize,
}

const OPERATORS: &[&str] = &[
    "**=", "//=", ">>=", "<<=", "...", "->", ":=", "**", "//", "==", "!=", "<=", ">=", "+=", "-=",
    "*=", "/=", "%=", "&=", "|=", "^=", "@=", "<<", ">>", "+", "-", "*", "/", "%", "@", "&", "|",
    "^", "~", "<", ">", "(", ")", "[", "]", "{", "}", ",", ":", ".", ";", "=",
];

fn lex(src: &str) -> Result<Vec<Token>, ParseError> {
    let chars: Vec<char> = src.chars().collect();
    let mut toks = Vec::new();
    let mut indents = vec![0usize];
    let mut depth = 0usize;
    let mut line = 1usize;
    let mut i = 0usize;
    let mut at_line_start = true;

    let err = |line: usize, m: &str| ParseError {
        line,
        message: m.to_string(),
    };

    while i < chars.len() {
        if at_line_start && depth == 0 {
            let mut width = 0;
            let mut j = i;
            while j < chars.len() && (chars[j] == ' ' || chars[j] == '\t' || chars[j] == '\x0c') {
                width = if chars[j] == '\t' { (width / 8 + 1) * 8 } else { width + 1 };
                j += 1;
            }
            // Blank and comment-only lines do not affect indentation.
            if j >= chars.len() || chars[j] == '\n' || chars[j] == '#' || chars[j] == '\r' {
                while j < chars.len() && chars[j] != '\n' {
                    j += 1;
                }
                if j < chars.len() {
                    line += 1;
                    j += 1;
                }
                i = j;
                continue;
            }
            i = j;
            at_line_start = false;
            let top = *indents.last().unwrap();
            if width > top {
                indents.push(width);
                toks.push(Token { kind: TokKind::Indent, line });
            } else {
                while width < *indents.last().unwrap() {
                    indents.pop();
                    toks.push(Token { kind: TokKind::Dedent, line });
                }
                if width != *indents.last().unwrap() {
                    return Err(err(line, "inconsistent dedent"));
                }
            }
        }

        let c = chars[i];
        match c {
            '\n' => {
                if depth == 0 {
                    toks.push(Token { kind: TokKind::Newline, line });
                    at_line_start = true;
                }
                line += 1;
                i += 1;
            }
            ' ' | '\t' | '\r' | '\x0c' => i += 1,
            '#' => {
                while i < chars.len() && chars[i] != '\n' {
                    i += 1;
                }
            }
            '\\' if chars.get(i + 1) == Some(&'\n') => {
                i += 2;
                line += 1;
            }
            c if c.is_ascii_digit() || (c == '.' && chars.get(i + 1).is_some_and(|d| d.is_ascii_digit())) => {
                let start = i;
                let mut prev = ' ';
                while i < chars.len() {
                    let d = chars[i];
                    let exp_sign = (d == '+' || d == '-') && (prev == 'e' || prev == 'E') && !chars[start..i].iter().any(|c| *c == 'x' || *c == 'X');
                    if d.is_ascii_alphanumeric() || d == '_' || d == '.' || exp_sign {
                        prev = d;
                        i += 1;
                    } else {
                        break;
                    }
                }
                toks.push(Token {
                    kind: TokKind::Number(chars[start..i].iter().filter(|c| **c != '_').collect()),
                    line,
                });
            }
            c if c.is_alphabetic() || c == '_' => {
                let start = i;
                while i < chars.len() && (chars[i].is_alphanumeric() || chars[i] == '_') {
                    i += 1;
                }
                let word: String = chars[start..i].iter().collect();
                let is_prefix = word.len() <= 2
                    && word.chars().all(|c| "rRbBuUfF".contains(c))
                    && matches!(chars.get(i), Some('\'') | Some('"'));
                if is_prefix {
                    i = lex_string(&chars, i, &mut line).ok_or_else(|| err(line, "unterminated string"))?;
                    toks.push(Token { kind: TokKind::Str, line });
                } else {
                    toks.push(Token { kind: TokKind::Name(word), line });
                }
            }
            '\'' | '"' => {
                i = lex_string(&chars, i, &mut line).ok_or_else(|| err(line, "unterminated string"))?;
                toks.push(Token { kind: TokKind::Str, line });
            }
            _ => {
                let rest: String = chars[i..chars.len().min(i + 3)].iter().collect();
                let op = OPERATORS
                    .iter()
                    .find(|op| rest.starts_with(**op))
                    .ok_or_else(|| err(line, &format!("unexpected character `{c}`")))?;
                match *op {
                    "(" | "[" | "{" => depth += 1,
                    ")" | "]" | "}" => depth = depth.saturating_sub(1),
                    _ => {}
                }
                toks.push(Token { kind: TokKind::Op(op), line });
                i += op.chars().count();
            }
        }
    }
    if !matches!(toks.last().map(|t| &t.kind), Some(TokKind::Newline) | None) {
        toks.push(Token { kind: TokKind::Newline, line });
    }
    while indents.len() > 1 {
        indents.pop();
        toks.push(Token { kind: TokKind::Dedent, line });
    }
    toks.push(Token { kind: TokKind::Eof, line });
    Ok(toks)
}

/// Returns the index just past the closing quote.
fn lex_string(chars: &[char], start: usize, line: &mut usize) -> Option<usize> {
    let q = chars[start];
    let triple = chars.get(start + 1) == Some(&q) && chars.get(start + 2) == Some(&q);
    let mut i = if triple { start + 3 } else { start + 1 };
    while i < chars.len() {
        let c = chars[i];
        if c == '\\' {
            if chars.get(i + 1) == Some(&'\n') {
                *line += 1;
            }
            i += 2;
            continue;
        }
        if c == '\n' {
            if !triple {
                return None;
            }
            *line += 1;
        }
        if c == q {
            if !triple {
                return Some(i + 1);
            }
            if chars.get(i + 1) == Some(&q) && chars.get(i + 2) == Some(&q) {
                return Some(i + 3);
            }
        }
        i += 1;
    }
    None
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BinOp {
    Add,
    Sub,
    Mul,
    Div,
    FloorDiv,
    Mod,
    Pow,
    MatMul,
    BitOr,
    BitXor,
    BitAnd,
    Shl,
    Shr,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UnaryOp {
    Neg,
    Pos,
    Not,
    Invert,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Expr {
    Num(String),
    Str,
    Name(String),
    Bin(BinOp, Box<Expr>, Box<Expr>),
    Unary(UnaryOp, Box<Expr>),
    BoolOp(Vec<Expr>),
    Compare(Vec<Expr>),
    IfExp {
        body: Box<Expr>,
        test: Box<Expr>,
        orelse: Box<Expr>,
    },
    Call {
        func: Box<Expr>,
        args: Vec<Expr>,
    },
    Attr(Box<Expr>, String),
    Subscript(Box<Expr>, Box<Expr>),
    Tuple(Vec<Expr>),
    List(Vec<Expr>),
    Dict(Vec<(Expr, Expr)>),
    Set(Vec<Expr>),
    Comprehension(Box<Expr>),
    Lambda(Box<Expr>),
    Starred(Box<Expr>),
    Slice,
    /// Keyword argument `name=value` inside a call.
    Keyword(Option<String>, Box<Expr>),
    NamedExpr(String, Box<Expr>),
    Ellipsis,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Stmt {
    FunctionDef {
        name: String,
        params: Vec<String>,
        body: Vec<Stmt>,
    },
    Return(Option<Expr>),
    Assign {
        targets: Vec<Expr>,
        value: Expr,
    },
    AugAssign {
        target: Expr,
        op: BinOp,
        value: Expr,
    },
    For {
        target: Expr,
        iter: Expr,
        body: Vec<Stmt>,
        orelse: Vec<Stmt>,
    },
    While {
        test: Expr,
        body: Vec<Stmt>,
        orelse: Vec<Stmt>,
    },
    If {
        test: Expr,
        body: Vec<Stmt>,
        orelse: Vec<Stmt>,
    },
    Try {
        body: Vec<Stmt>,
        handlers: Vec<Vec<Stmt>>,
        orelse: Vec<Stmt>,
        finalbody: Vec<Stmt>,
    },
    With {
        body: Vec<Stmt>,
    },
    ClassDef {
        body: Vec<Stmt>,
    },
    Expr(Expr),
    /// import, pass, break, continue, global, raise, assert, del.
    Simple,
}

pub fn parse_module(src: &str) -> Result<Vec<Stmt>, ParseError> {
    let toks = lex(src)?;
    let mut p = Parser { toks, pos: 0 };
    let mut body = Vec::new();
    while !p.at(&TokKind::Eof) {
        if p.eat(&TokKind::Newline) {
            continue;
        }
        body.extend(p.statement()?);
    }
    Ok(body)
}

struct Parser {
    toks: Vec<Token>,
    pos: usize,
}

const KEYWORDS: &[&str] = &[
    "False", "None", "True", "and", "as", "assert", "async", "await", "break", "class", "continue",
    "def", "del", "elif", "else", "except", "finally", "for", "from", "global", "if", "import", "in",
    "is", "lambda", "nonlocal", "not", "or", "pass", "raise", "return", "try", "while", "with",
    "yield",
];

impl Parser {
    fn peek(&self) -> &TokKind {
        &self.toks[self.pos].kind
    }

    fn peek_at(&self, k: usize) -> &TokKind {
        &self.toks[(self.pos + k).min(self.toks.len() - 1)].kind
    }

    fn line(&self) -> usize {
        self.toks[self.pos].line
    }

    fn at(&self, k: &TokKind) -> bool {
        self.peek() == k
    }

    fn at_op(&self, op: &str) -> bool {
        matches!(self.peek(), TokKind::Op(o) if *o == op)
    }

    fn at_kw(&self, kw: &str) -> bool {
        matches!(self.peek(), TokKind::Name(n) if n == kw)
    }

    fn eat(&mut self, k: &TokKind) -> bool {
        if self.at(k) {
            self.pos += 1;
            true
        } else {
            false
        }
    }

    fn eat_op(&mut self, op: &str) -> bool {
        if self.at_op(op) {
            self.pos += 1;
            true
        } else {
            false
        }
    }

    fn eat_kw(&mut self, kw: &str) -> bool {
        if self.at_kw(kw) {
            self.pos += 1;
            true
        } else {
            false
        }
    }

    fn fail<T>(&self, message: impl Into<String>) -> Result<T, ParseError> {
        Err(ParseError {
            line: self.line(),
            message: message.into(),
        })
    }

    fn expect_op(&mut self, op: &str) -> Result<(), ParseError> {
        if self.eat_op(op) {
            Ok(())
        } else {
            self.fail(format!("expected `{op}`, found {:?}", self.peek()))
        }
    }

    fn expect_kw(&mut self, kw: &str) -> Result<(), ParseError> {
        if self.eat_kw(kw) {
            Ok(())
        } else {
            self.fail(format!("expected `{kw}`"))
        }
    }

    fn name(&mut self) -> Result<String, ParseError> {
        match self.peek().clone() {
            TokKind::Name(n) if !KEYWORDS.contains(&n.as_str()) => {
                self.pos += 1;
                Ok(n)
            }
            other => self.fail(format!("expected identifier, found {other:?}")),
        }
    }

    fn end_of_simple(&mut self) -> Result<(), ParseError> {
        if self.eat(&TokKind::Newline) || self.at(&TokKind::Eof) || self.at(&TokKind::Dedent) {
            Ok(())
        } else {
            self.fail(format!("expected end of statement, found {:?}", self.peek()))
        }
    }

    fn block(&mut self) -> Result<Vec<Stmt>, ParseError> {
        self.expect_op(":")?;
        if self.eat(&TokKind::Newline) {
            while self.eat(&TokKind::Newline) {}
            if !self.eat(&TokKind::Indent) {
                return self.fail("expected an indented block");
            }
            let mut body = Vec::new();
            while !self.eat(&TokKind::Dedent) {
                if self.at(&TokKind::Eof) {
                    break;
                }
                if self.eat(&TokKind::Newline) {
                    continue;
                }
                body.extend(self.statement()?);
            }
            Ok(body)
        } else {
            self.simple_line()
        }
    }

    fn statement(&mut self) -> Result<Vec<Stmt>, ParseError> {
        if self.eat_op("@") {
            self.expr()?;
            self.eat(&TokKind::Newline);
            return self.statement();
        }
        let kw = match self.peek() {
            TokKind::Name(n) => n.clone(),
            _ => return self.simple_line(),
        };
        let stmt = match kw.as_str() {
            "async" => {
                self.pos += 1;
                return self.statement();
            }
            "def" => {
                self.pos += 1;
                let name = self.name()?;
                self.expect_op("(")?;
                let params = self.params(")")?;
                self.expect_op(")")?;
                if self.eat_op("->") {
                    self.expr()?;
                }
                let body = self.block()?;
                Stmt::FunctionDef { name, params, body }
            }
            "class" => {
                self.pos += 1;
                self.name()?;
                if self.eat_op("(") {
                    if !self.at_op(")") {
                        self.call_args()?;
                    }
                    self.expect_op(")")?;
                }
                Stmt::ClassDef { body: self.block()? }
            }
            "if" => {
                self.pos += 1;
                self.if_rest()?
            }
            "for" => {
                self.pos += 1;
                let target = self.target_list()?;
                self.expect_kw("in")?;
                let iter = self.expr_list()?;
                let body = self.block()?;
                let orelse = if self.eat_kw("else") { self.block()? } else { Vec::new() };
                Stmt::For {
                    target,
                    iter,
                    body,
                    orelse,
                }
            }
            "while" => {
                self.pos += 1;
                let test = self.named_expr()?;
                let body = self.block()?;
                let orelse = if self.eat_kw("else") { self.block()? } else { Vec::new() };
                Stmt::While { test, body, orelse }
            }
            "try" => {
                self.pos += 1;
                let body = self.block()?;
                let mut handlers = Vec::new();
                while self.eat_kw("except") {
                    self.eat_op("*");
                    if !self.at_op(":") {
                        self.expr()?;
                        if self.eat_kw("as") {
                            self.name()?;
                        }
                    }
                    handlers.push(self.block()?);
                }
                let orelse = if self.eat_kw("else") { self.block()? } else { Vec::new() };
                let finalbody = if self.eat_kw("finally") { self.block()? } else { Vec::new() };
                Stmt::Try {
                    body,
                    handlers,
                    orelse,
                    finalbody,
                }
            }
            "with" => {
                self.pos += 1;
                loop {
                    self.expr()?;
                    if self.eat_kw("as") {
                        self.target()?;
                    }
                    if !self.eat_op(",") {
                        break;
                    }
                }
                Stmt::With { body: self.block()? }
            }
            _ => return self.simple_line(),
        };
        Ok(vec![stmt])
    }

    fn if_rest(&mut self) -> Result<Stmt, ParseError> {
        let test = self.named_expr()?;
        let body = self.block()?;
        let orelse = if self.eat_kw("elif") {
            vec![self.if_rest()?]
        } else if self.eat_kw("else") {
            self.block()?
        } else {
            Vec::new()
        };
        Ok(Stmt::If { test, body, orelse })
    }

    fn params(&mut self, close: &str) -> Result<Vec<String>, ParseError> {
        let mut params = Vec::new();
        while !self.at_op(close) {
            if (self.eat_op("*") || self.eat_op("**")) && (self.at_op(",") || self.at_op(close)) {
                self.eat_op(",");
                continue;
            }
            if self.eat_op("/") {
                self.eat_op(",");
                continue;
            }
            params.push(self.name()?);
            if close == ")" && self.eat_op(":") {
                self.expr()?;
            }
            if self.eat_op("=") {
                self.expr()?;
            }
            if !self.eat_op(",") {
                break;
            }
        }
        Ok(params)
    }

    /// One physical line of `;`-separated simple statements.
    fn simple_line(&mut self) -> Result<Vec<Stmt>, ParseError> {
        let mut out = vec![self.simple_statement()?];
        while self.eat_op(";") {
            if self.at(&TokKind::Newline) || self.at(&TokKind::Eof) {
                break;
            }
            out.push(self.simple_statement()?);
        }
        self.end_of_simple()?;
        Ok(out)
    }

    fn skip_to_line_end(&mut self) {
        while !matches!(self.peek(), TokKind::Newline | TokKind::Eof) && !self.at_op(";") {
            self.pos += 1;
        }
    }

    fn simple_statement(&mut self) -> Result<Stmt, ParseError> {
        if let TokKind::Name(n) = self.peek().clone() {
            match n.as_str() {
                "return" => {
                    self.pos += 1;
                    if matches!(self.peek(), TokKind::Newline | TokKind::Eof | TokKind::Dedent) || self.at_op(";") {
                        return Ok(Stmt::Return(None));
                    }
                    return Ok(Stmt::Return(Some(self.star_expr_list()?)));
                }
                "pass" | "break" | "continue" | "import" | "from" | "global" | "nonlocal" | "raise"
                | "assert" | "del" => {
                    self.pos += 1;
                    self.skip_to_line_end();
                    return Ok(Stmt::Simple);
                }
                _ => {}
            }
        }
        let first = self.star_expr_list()?;
        if self.eat_op(":") {
            // Annotated assignment.
            self.expr()?;
            if self.eat_op("=") {
                let value = self.star_expr_list()?;
                return Ok(Stmt::Assign {
                    targets: vec![first],
                    value,
                });
            }
            return Ok(Stmt::Simple);
        }
        if let TokKind::Op(op) = self.peek().clone() {
            if let Some(bin) = aug_op(op) {
                self.pos += 1;
                let value = self.star_expr_list()?;
                return Ok(Stmt::AugAssign {
                    target: first,
                    op: bin,
                    value,
                });
            }
        }
        if self.at_op("=") {
            let mut targets = vec![first];
            let mut value;
            loop {
                self.expect_op("=")?;
                value = self.star_expr_list()?;
                if self.at_op("=") {
                    targets.push(value);
                } else {
                    break;
                }
            }
            return Ok(Stmt::Assign { targets, value });
        }
        Ok(Stmt::Expr(first))
    }

    fn target(&mut self) -> Result<Expr, ParseError> {
        if self.eat_op("*") {
            return Ok(Expr::Starred(Box::new(self.bit_or()?)));
        }
        self.bit_or()
    }

    fn target_list(&mut self) -> Result<Expr, ParseError> {
        let first = self.target()?;
        if !self.at_op(",") {
            return Ok(first);
        }
        let mut items = vec![first];
        while self.eat_op(",") {
            if self.at_kw("in") || self.at_op("=") {
                break;
            }
            items.push(self.target()?);
        }
        Ok(Expr::Tuple(items))
    }

    fn star_or_expr(&mut self) -> Result<Expr, ParseError> {
        if self.eat_op("*") {
            return Ok(Expr::Starred(Box::new(self.bit_or()?)));
        }
        self.named_expr()
    }

    /// Comma-separated expressions; a trailing or inner comma makes a tuple.
    fn star_expr_list(&mut self) -> Result<Expr, ParseError> {
        let first = self.star_or_expr()?;
        if !self.at_op(",") {
            return Ok(first);
        }
        let mut items = vec![first];
        while self.eat_op(",") {
            if self.expr_terminator() {
                break;
            }
            items.push(self.star_or_expr()?);
        }
        Ok(Expr::Tuple(items))
    }

    fn expr_list(&mut self) -> Result<Expr, ParseError> {
        self.star_expr_list()
    }

    fn expr_terminator(&self) -> bool {
        matches!(self.peek(), TokKind::Newline | TokKind::Eof | TokKind::Dedent)
            || ["=", ")", "]", "}", ":", ";"].iter().any(|o| self.at_op(o))
            || aug_op_kind(self.peek()).is_some()
    }

    fn named_expr(&mut self) -> Result<Expr, ParseError> {
        if let (TokKind::Name(n), TokKind::Op(":=")) = (self.peek().clone(), self.peek_at(1).clone()) {
            self.pos += 2;
            let value = self.expr()?;
            return Ok(Expr::NamedExpr(n, Box::new(value)));
        }
        self.expr()
    }

    fn expr(&mut self) -> Result<Expr, ParseError> {
        if self.eat_kw("lambda") {
            self.params(":")?;
            self.expect_op(":")?;
            return Ok(Expr::Lambda(Box::new(self.expr()?)));
        }
        let body = self.or_test()?;
        if self.at_kw("if") {
            // Not a conditional expression when it belongs to a comprehension filter.
            let save = self.pos;
            self.pos += 1;
            let test = self.or_test()?;
            if self.eat_kw("else") {
                let orelse = self.expr()?;
                return Ok(Expr::IfExp {
                    body: Box::new(body),
                    test: Box::new(test),
                    orelse: Box::new(orelse),
                });
            }
            self.pos = save;
        }
        Ok(body)
    }

    fn or_test(&mut self) -> Result<Expr, ParseError> {
        let first = self.and_test()?;
        if !self.at_kw("or") {
            return Ok(first);
        }
        let mut items = vec![first];
        while self.eat_kw("or") {
            items.push(self.and_test()?);
        }
        Ok(Expr::BoolOp(items))
    }

    fn and_test(&mut self) -> Result<Expr, ParseError> {
        let first = self.not_test()?;
        if !self.at_kw("and") {
            return Ok(first);
        }
        let mut items = vec![first];
        while self.eat_kw("and") {
            items.push(self.not_test()?);
        }
        Ok(Expr::BoolOp(items))
    }

    fn not_test(&mut self) -> Result<Expr, ParseError> {
        if self.eat_kw("not") {
            return Ok(Expr::Unary(UnaryOp::Not, Box::new(self.not_test()?)));
        }
        self.comparison()
    }

    fn comp_op(&mut self) -> bool {
        for op in ["<", ">", "==", ">=", "<=", "!="] {
            if self.eat_op(op) {
                return true;
            }
        }
        if self.eat_kw("in") {
            return true;
        }
        if self.at_kw("not") && matches!(self.peek_at(1), TokKind::Name(n) if n == "in") {
            self.pos += 2;
            return true;
        }
        if self.eat_kw("is") {
            self.eat_kw("not");
            return true;
        }
        false
    }

    fn comparison(&mut self) -> Result<Expr, ParseError> {
        let first = self.bit_or()?;
        let mut items = vec![first];
        while self.comp_op() {
            items.push(self.bit_or()?);
        }
        if items.len() == 1 {
            Ok(items.pop().unwrap())
        } else {
            Ok(Expr::Compare(items))
        }
    }

    fn binary_level(
        &mut self,
        ops: &[(&str, BinOp)],
        next: fn(&mut Self) -> Result<Expr, ParseError>,
    ) -> Result<Expr, ParseError> {
        let mut lhs = next(self)?;
        'outer: loop {
            for (tok, op) in ops {
                if self.eat_op(tok) {
                    let rhs = next(self)?;
                    lhs = Expr::Bin(*op, Box::new(lhs), Box::new(rhs));
                    continue 'outer;
                }
            }
            return Ok(lhs);
        }
    }

    fn bit_or(&mut self) -> Result<Expr, ParseError> {
        self.binary_level(&[("|", BinOp::BitOr)], Self::bit_xor)
    }

    fn bit_xor(&mut self) -> Result<Expr, ParseError> {
        self.binary_level(&[("^", BinOp::BitXor)], Self::bit_and)
    }

    fn bit_and(&mut self) -> Result<Expr, ParseError> {
        self.binary_level(&[("&", BinOp::BitAnd)], Self::shift)
    }

    fn shift(&mut self) -> Result<Expr, ParseError> {
        self.binary_level(&[("<<", BinOp::Shl), (">>", BinOp::Shr)], Self::arith)
    }

    fn arith(&mut self) -> Result<Expr, ParseError> {
        self.binary_level(&[("+", BinOp::Add), ("-", BinOp::Sub)], Self::term)
    }

    fn term(&mut self) -> Result<Expr, ParseError> {
        self.binary_level(
            &[
                ("*", BinOp::Mul),
                ("/", BinOp::Div),
                ("//", BinOp::FloorDiv),
                ("%", BinOp::Mod),
                ("@", BinOp::MatMul),
            ],
            Self::factor,
        )
    }

    fn factor(&mut self) -> Result<Expr, ParseError> {
        for (tok, op) in [("-", UnaryOp::Neg), ("+", UnaryOp::Pos), ("~", UnaryOp::Invert)] {
            if self.eat_op(tok) {
                return Ok(Expr::Unary(op, Box::new(self.factor()?)));
            }
        }
        self.power()
    }

    fn power(&mut self) -> Result<Expr, ParseError> {
        self.eat_kw("await");
        let base = self.atom_expr()?;
        if self.eat_op("**") {
            let exp = self.factor()?;
            return Ok(Expr::Bin(BinOp::Pow, Box::new(base), Box::new(exp)));
        }
        Ok(base)
    }

    fn atom_expr(&mut self) -> Result<Expr, ParseError> {
        let mut e = self.atom()?;
        loop {
            if self.eat_op("(") {
                let args = if self.at_op(")") { Vec::new() } else { self.call_args()? };
                self.expect_op(")")?;
                e = Expr::Call {
                    func: Box::new(e),
                    args,
                };
            } else if self.eat_op("[") {
                let index = self.subscript_list()?;
                self.expect_op("]")?;
                e = Expr::Subscript(Box::new(e), Box::new(index));
            } else if self.eat_op(".") {
                let attr = match self.peek().clone() {
                    TokKind::Name(n) => {
                        self.pos += 1;
                        n
                    }
                    _ => return self.fail("expected attribute name"),
                };
                e = Expr::Attr(Box::new(e), attr);
            } else {
                return Ok(e);
            }
        }
    }

    fn call_args(&mut self) -> Result<Vec<Expr>, ParseError> {
        let mut args = Vec::new();
        loop {
            if self.at_op(")") {
                break;
            }
            let arg = if self.eat_op("**") {
                Expr::Keyword(None, Box::new(self.expr()?))
            } else if self.eat_op("*") {
                Expr::Starred(Box::new(self.expr()?))
            } else if let (TokKind::Name(n), TokKind::Op("=")) = (self.peek().clone(), self.peek_at(1).clone()) {
                self.pos += 2;
                Expr::Keyword(Some(n), Box::new(self.expr()?))
            } else {
                let e = self.named_expr()?;
                if self.at_kw("for") || self.at_kw("async") {
                    self.comp_for()?;
                    Expr::Comprehension(Box::new(e))
                } else {
                    e
                }
            };
            args.push(arg);
            if !self.eat_op(",") {
                break;
            }
        }
        Ok(args)
    }

    fn subscript_list(&mut self) -> Result<Expr, ParseError> {
        let first = self.subscript()?;
        if !self.at_op(",") {
            return Ok(first);
        }
        let mut items = vec![first];
        while self.eat_op(",") {
            if self.at_op("]") {
                break;
            }
            items.push(self.subscript()?);
        }
        Ok(Expr::Tuple(items))
    }

    fn subscript(&mut self) -> Result<Expr, ParseError> {
        let lower = if self.at_op(":") { None } else { Some(self.named_expr()?) };
        if !self.at_op(":") {
            return lower.map_or_else(|| self.fail("empty subscript"), Ok);
        }
        while self.eat_op(":") {
            if !self.at_op(":") && !self.at_op("]") && !self.at_op(",") {
                self.expr()?;
            }
        }
        Ok(Expr::Slice)
    }

    fn comp_for(&mut self) -> Result<(), ParseError> {
        loop {
            self.eat_kw("async");
            if !self.eat_kw("for") {
                return Ok(());
            }
            self.target_list()?;
            self.expect_kw("in")?;
            self.or_test()?;
            while self.eat_kw("if") {
                self.or_test()?;
            }
        }
    }

    fn atom(&mut self) -> Result<Expr, ParseError> {
        match self.peek().clone() {
            TokKind::Number(n) => {
                self.pos += 1;
                Ok(Expr::Num(n))
            }
            TokKind::Str => {
                while matches!(self.peek(), TokKind::Str) {
                    self.pos += 1;
                }
                Ok(Expr::Str)
            }
            TokKind::Name(n) => match n.as_str() {
                "None" | "True" | "False" => {
                    self.pos += 1;
                    Ok(Expr::Name(n))
                }
                "yield" => {
                    self.pos += 1;
                    self.eat_kw("from");
                    if self.expr_terminator() {
                        Ok(Expr::Name("None".into()))
                    } else {
                        self.star_expr_list()
                    }
                }
                _ => Ok(Expr::Name(self.name()?)),
            },
            TokKind::Op("...") => {
                self.pos += 1;
                Ok(Expr::Ellipsis)
            }
            TokKind::Op("(") => {
                self.pos += 1;
                if self.eat_op(")") {
                    return Ok(Expr::Tuple(Vec::new()));
                }
                let first = self.star_or_expr()?;
                if self.at_kw("for") || self.at_kw("async") {
                    self.comp_for()?;
                    self.expect_op(")")?;
                    return Ok(Expr::Comprehension(Box::new(first)));
                }
                if self.eat_op(")") {
                    return Ok(first);
                }
                let mut items = vec![first];
                while self.eat_op(",") {
                    if self.at_op(")") {
                        break;
                    }
                    items.push(self.star_or_expr()?);
                }
                self.expect_op(")")?;
                Ok(Expr::Tuple(items))
            }
            TokKind::Op("[") => {
                self.pos += 1;
                if self.eat_op("]") {
                    return Ok(Expr::List(Vec::new()));
                }
                let first = self.star_or_expr()?;
                if self.at_kw("for") || self.at_kw("async") {
                    self.comp_for()?;
                    self.expect_op("]")?;
                    return Ok(Expr::Comprehension(Box::new(first)));
                }
                let mut items = vec![first];
                while self.eat_op(",") {
                    if self.at_op("]") {
                        break;
                    }
                    items.push(self.star_or_expr()?);
                }
                self.expect_op("]")?;
                Ok(Expr::List(items))
            }
            TokKind::Op("{") => {
                self.pos += 1;
                if self.eat_op("}") {
                    return Ok(Expr::Dict(Vec::new()));
                }
                if self.eat_op("**") {
                    self.bit_or()?;
                    let mut pairs = Vec::new();
                    while self.eat_op(",") {
                        if self.at_op("}") {
                            break;
                        }
                        if self.eat_op("**") {
                            self.bit_or()?;
                        } else {
                            let k = self.expr()?;
                            self.expect_op(":")?;
                            pairs.push((k, self.expr()?));
                        }
                    }
                    self.expect_op("}")?;
                    return Ok(Expr::Dict(pairs));
                }
                let first = self.star_or_expr()?;
                if self.eat_op(":") {
                    let v = self.expr()?;
                    if self.at_kw("for") || self.at_kw("async") {
                        self.comp_for()?;
                        self.expect_op("}")?;
                        return Ok(Expr::Comprehension(Box::new(v)));
                    }
                    let mut pairs = vec![(first, v)];
                    while self.eat_op(",") {
                        if self.at_op("}") {
                            break;
                        }
                        if self.eat_op("**") {
                            self.bit_or()?;
                            continue;
                        }
                        let k = self.expr()?;
                        self.expect_op(":")?;
                        pairs.push((k, self.expr()?));
                    }
                    self.expect_op("}")?;
                    return Ok(Expr::Dict(pairs));
                }
                if self.at_kw("for") || self.at_kw("async") {
                    self.comp_for()?;
                    self.expect_op("}")?;
                    return Ok(Expr::Comprehension(Box::new(first)));
                }
                let mut items = vec![first];
                while self.eat_op(",") {
                    if self.at_op("}") {
                        break;
                    }
                    items.push(self.star_or_expr()?);
                }
                self.expect_op("}")?;
                Ok(Expr::Set(items))
            }
            other => self.fail(format!("unexpected token {other:?}")),
        }
    }
}

fn aug_op(op: &str) -> Option<BinOp> {
    Some(match op {
        "+=" => BinOp::Add,
        "-=" => BinOp::Sub,
        "*=" => BinOp::Mul,
        "/=" => BinOp::Div,
        "//=" => BinOp::FloorDiv,
        "%=" => BinOp::Mod,
        "**=" => BinOp::Pow,
        "@=" => BinOp::MatMul,
        "|=" => BinOp::BitOr,
        "^=" => BinOp::BitXor,
        "&=" => BinOp::BitAnd,
        "<<=" => BinOp::Shl,
        ">>=" => BinOp::Shr,
        _ => return None,
    })
}

fn aug_op_kind(k: &TokKind) -> Option<BinOp> {
    match k {
        TokKind::Op(o) => aug_op(o),
        _ => None,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn body_of_run(src: &str) -> Vec<Stmt> {
        let module = parse_module(src).unwrap();
        match module.into_iter().next().unwrap() {
            Stmt::FunctionDef { body, .. } => body,
            other => panic!("not a def: {other:?}"),
        }
    }

    #[test]
    fn parses_typical_program() {
        let src = r#"
def run(value_list):
    # find values
    v2019 = None
    v2018 = None
    for item in value_list:
        if item['category'] == 'Revenue' and item['header'] == "2019":
            v2019 = item['number_value']
        elif item["category"] == 'Revenue':
            v2018 = item['number_value']
    if v2019 is None or v2018 is None:
        return (0.0, '')
    change = ((v2019 - v2018) / v2018) * 100
    return (round(change, 2), 'percent')
"#;
        let body = body_of_run(src);
        assert_eq!(body.len(), 6);
        assert!(matches!(body.last(), Some(Stmt::Return(Some(Expr::Tuple(_))))));
    }

    #[test]
    fn precedence_and_unary() {
        let m = parse_module("x = -a + b * c ** 2\n").unwrap();
        let Stmt::Assign { value, .. } = &m[0] else { panic!() };
        let Expr::Bin(BinOp::Add, l, r) = value else { panic!("{value:?}") };
        assert!(matches!(**l, Expr::Unary(UnaryOp::Neg, _)));
        assert!(matches!(**r, Expr::Bin(BinOp::Mul, _, _)));
    }

    #[test]
    fn comprehensions_lambdas_and_strings() {
        let src = "def run(vl):\n    vals = [v['number_value'] for v in vl if v['header'] in ('2019', \"2018\")]\n    f = lambda x: x * 2\n    s = f'{vals!r:>10}' + '''a\nb'''\n    return sum(vals) / len(vals), ''\n";
        let body = body_of_run(src);
        assert_eq!(body.len(), 4);
    }

    #[test]
    fn try_with_and_semicolons() {
        let src = "import math\ndef run(vl):\n    try:\n        a = 1; b = 2\n    except (KeyError, ValueError) as e:\n        return (float('nan'), '')\n    finally:\n        pass\n    with open('x') as f:\n        pass\n    return (a - b, '')\n";
        let m = parse_module(src).unwrap();
        assert_eq!(m.len(), 2);
    }

    #[test]
    fn dicts_slices_and_walrus() {
        let src = "def run(vl):\n    d = {x['category']: x['number_value'] for x in vl}\n    e = {'a': 1, **d}\n    xs = vl[1:3]\n    if (n := len(xs)) > 1:\n        return (n, '')\n    return (d.get('a', 0), '')\n";
        assert_eq!(body_of_run(src).len(), 5);
    }

    #[test]
    fn one_line_def() {
        let m = parse_module("def run(v): return (1.0, 'percent')").unwrap();
        assert!(matches!(&m[0], Stmt::FunctionDef { body, .. } if body.len() == 1));
    }

    #[test]
    fn syntax_errors_are_reported() {
        assert!(parse_module("def run(v)\n    return 1\n").is_err());
        assert!(parse_module("def run(v):\n    return (1,\n").is_err());
        assert!(parse_module("x = 'unterminated\n").is_err());
        assert!(parse_module("def run(v):\n        a = 1\n    b = 2\n").is_err());
    }
}
