//! Calculation skeleton of a generated program.
//!
//! The returned expression is rebuilt symbolically: locals are inlined from
//! their latest assignment, literals and value-list lookups become holes, and
//! `+` accumulation inside a loop becomes `sum(#)`.

use super::pattern::{normalize, CalcPattern};
use super::pyast::{parse_module, BinOp, Expr, Stmt, UnaryOp};

/// Maximum number of nested variable substitutions in one expression.
pub const MAX_INLINE_DEPTH: usize = 16;

#[derive(Debug, Clone, PartialEq)]
enum Sym {
    Hole,
    Sum,
    Bin(char, Box<Sym>, Box<Sym>),
    Neg(Box<Sym>),
    Call(&'static str, Box<Sym>),
    Tuple(Vec<Sym>),
}

#[derive(Clone)]
struct Binding {
    sym: Sym,
    depth: usize,
}

#[derive(Default)]
struct Env {
    vars: std::collections::HashMap<String, Binding>,
}

impl Env {
    fn set(&mut self, name: &str, sym: Sym, depth: usize) {
        let binding = if depth > MAX_INLINE_DEPTH {
            Binding { sym: Sym::Hole, depth: 0 }
        } else {
            Binding { sym, depth }
        };
        self.vars.insert(name.to_string(), binding);
    }
}

/// Symbolic value of an expression plus the deepest inlining it needed.
fn eval(e: &Expr, env: &Env) -> (Sym, usize) {
    match e {
        Expr::Name(n) => match env.vars.get(n) {
            Some(b) => (b.sym.clone(), b.depth + 1),
            None => (Sym::Hole, 0),
        },
        Expr::Bin(op, l, r) => {
            let (ls, ld) = eval(l, env);
            let (rs, rd) = eval(r, env);
            let depth = ld.max(rd);
            let c = match op {
                BinOp::Add => '+',
                BinOp::Sub => '-',
                BinOp::Mul => '*',
                BinOp::Div | BinOp::FloorDiv => '/',
                BinOp::Pow => '^',
                BinOp::Mod => return (Sym::Call("mod", Box::new(Sym::Bin(',', Box::new(ls), Box::new(rs)))), depth),
                _ => return (Sym::Hole, depth),
            };
            (Sym::Bin(c, Box::new(ls), Box::new(rs)), depth)
        }
        Expr::Unary(UnaryOp::Neg, x) => {
            let (s, d) = eval(x, env);
            (Sym::Neg(Box::new(s)), d)
        }
        Expr::Unary(UnaryOp::Pos, x) => eval(x, env),
        Expr::IfExp { body, .. } => eval(body, env),
        Expr::NamedExpr(_, x) => eval(x, env),
        Expr::Tuple(items) | Expr::List(items) => {
            let mut depth = 0;
            let syms = items
                .iter()
                .map(|x| {
                    let (s, d) = eval(x, env);
                    depth = depth.max(d);
                    s
                })
                .collect();
            (Sym::Tuple(syms), depth)
        }
        Expr::Call { func, args } => eval_call(func, args, env),
        _ => (Sym::Hole, 0),
    }
}

fn call_name(func: &Expr) -> Option<&str> {
    match func {
        Expr::Name(n) => Some(n),
        Expr::Attr(_, n) => Some(n),
        _ => None,
    }
}

fn eval_call(func: &Expr, args: &[Expr], env: &Env) -> (Sym, usize) {
    let positional: Vec<&Expr> = args.iter().filter(|a| !matches!(a, Expr::Keyword(..))).collect();
    match call_name(func) {
        // Formatting and conversion wrappers leave the arithmetic unchanged.
        Some("round" | "float" | "int" | "Decimal") if !positional.is_empty() => eval(positional[0], env),
        Some("sum" | "fsum") => (Sym::Sum, 0),
        Some(name @ ("abs" | "mean" | "max" | "min")) if !positional.is_empty() => {
            let name: &'static str = match name {
                "abs" => "abs",
                "mean" => "mean",
                "max" => "max",
                _ => "min",
            };
            let (inner, d) = if positional.len() == 1 { eval(positional[0], env) } else { (Sym::Hole, 0) };
            let inner = match inner {
                Sym::Tuple(_) => Sym::Hole,
                other => other,
            };
            (Sym::Call(name, Box::new(inner)), d)
        }
        _ => (Sym::Hole, 0),
    }
}

fn first_of_tuple(sym: Sym) -> Sym {
    match sym {
        Sym::Tuple(mut items) if !items.is_empty() => items.swap_remove(0),
        Sym::Tuple(_) => Sym::Hole,
        other => other,
    }
}

fn assign_target(target: &Expr, value: &Expr, env: &mut Env) {
    match target {
        Expr::Name(n) => {
            let (s, d) = eval(value, env);
            env.set(n, s, d);
        }
        Expr::Tuple(ts) | Expr::List(ts) => {
            let parts = match value {
                Expr::Tuple(vs) | Expr::List(vs) if vs.len() == ts.len() => Some(vs),
                _ => None,
            };
            for (k, t) in ts.iter().enumerate() {
                match (t, parts) {
                    (Expr::Name(_), Some(vs)) => assign_target(t, &vs[k], env),
                    _ => bind_opaque(t, env),
                }
            }
        }
        _ => {}
    }
}

fn bind_opaque(target: &Expr, env: &mut Env) {
    match target {
        Expr::Name(n) => env.set(n, Sym::Hole, 0),
        Expr::Tuple(ts) | Expr::List(ts) => ts.iter().for_each(|t| bind_opaque(t, env)),
        Expr::Starred(t) => bind_opaque(t, env),
        _ => {}
    }
}

/// Walks statements in order, updating bindings. Returns the symbolic value of
/// the first top-level `return` at this block level when `stop_at_return`.
fn walk(body: &[Stmt], env: &mut Env, loop_depth: usize, stop_at_return: bool) -> Option<Sym> {
    for stmt in body {
        match stmt {
            Stmt::Assign { targets, value } => {
                let is_accumulation = loop_depth > 0
                    && targets.len() == 1
                    && matches!(
                        (&targets[0], value),
                        (Expr::Name(t), Expr::Bin(BinOp::Add, l, _)) if matches!(&**l, Expr::Name(n) if n == t)
                    );
                if is_accumulation {
                    if let (Expr::Name(t), Expr::Bin(_, _, r)) = (&targets[0], value) {
                        accumulate(t, r, env);
                    }
                } else {
                    for t in targets {
                        assign_target(t, value, env);
                    }
                }
            }
            Stmt::AugAssign { target, op, value } => {
                let Expr::Name(t) = target else { continue };
                if loop_depth > 0 && *op == BinOp::Add {
                    accumulate(t, value, env);
                } else {
                    let combined = Expr::Bin(*op, Box::new(target.clone()), Box::new(value.clone()));
                    let (s, d) = eval(&combined, env);
                    env.set(t, s, d);
                }
            }
            Stmt::For { target, body, orelse, .. } => {
                bind_opaque(target, env);
                walk(body, env, loop_depth + 1, false);
                walk(orelse, env, loop_depth, false);
            }
            Stmt::While { body, orelse, .. } => {
                walk(body, env, loop_depth + 1, false);
                walk(orelse, env, loop_depth, false);
            }
            Stmt::If { body, orelse, .. } => {
                walk(body, env, loop_depth, false);
                walk(orelse, env, loop_depth, false);
            }
            Stmt::Try {
                body,
                handlers,
                orelse,
                finalbody,
            } => {
                walk(body, env, loop_depth, false);
                walk(orelse, env, loop_depth, false);
                for h in handlers {
                    walk(h, env, loop_depth, false);
                }
                walk(finalbody, env, loop_depth, false);
            }
            Stmt::With { body } => {
                walk(body, env, loop_depth, false);
            }
            Stmt::Return(value) if stop_at_return => {
                return Some(match value {
                    Some(v) => first_of_tuple(eval(v, env).0),
                    None => Sym::Hole,
                });
            }
            _ => {}
        }
    }
    None
}

fn accumulate(target: &str, value: &Expr, env: &mut Env) {
    // `n += 1` counts items; anything else sums them.
    let sym = if matches!(value, Expr::Num(_)) { Sym::Hole } else { Sym::Sum };
    env.set(target, sym, 0);
}

/// Falls back to the last `return` anywhere in the body when no top-level one exists.
fn last_nested_return(body: &[Stmt]) -> Option<&Expr> {
    let mut found = None;
    for stmt in body {
        let inner = match stmt {
            Stmt::Return(Some(e)) => Some(e),
            Stmt::If { body, orelse, .. } | Stmt::For { body, orelse, .. } | Stmt::While { body, orelse, .. } => {
                last_nested_return(orelse).or_else(|| last_nested_return(body))
            }
            Stmt::Try { body, orelse, .. } => last_nested_return(orelse).or_else(|| last_nested_return(body)),
            Stmt::With { body } => last_nested_return(body),
            _ => None,
        };
        if inner.is_some() {
            found = inner;
        }
    }
    found
}

fn precedence(op: char) -> u8 {
    match op {
        '+' | '-' => 1,
        '*' | '/' => 2,
        '^' => 3,
        _ => 0,
    }
}

/// Operands that are themselves operations get parentheses unless they
/// continue a left-associated chain of the same operator.
fn render(sym: &Sym, out: &mut String) {
    match sym {
        Sym::Hole | Sym::Tuple(_) => out.push('#'),
        Sym::Sum => out.push_str("sum(#)"),
        Sym::Neg(x) => {
            out.push('-');
            render_operand(x, out, true);
        }
        Sym::Call(name, x) => {
            out.push_str(name);
            out.push('(');
            render(x, out);
            out.push(')');
        }
        Sym::Bin(',', l, r) => {
            render(l, out);
            out.push(',');
            render(r, out);
        }
        Sym::Bin(op, l, r) => {
            let left_chain = matches!(&**l, Sym::Bin(lop, ..) if lop == op && precedence(*op) > 0 && *op != '^');
            render_operand(l, out, !left_chain);
            out.push(*op);
            render_operand(r, out, true);
        }
    }
}

fn render_operand(sym: &Sym, out: &mut String, wrap_ops: bool) {
    // Unary minus binds tighter than any binary operator here, so it is never wrapped.
    let is_op = matches!(sym, Sym::Bin(op, ..) if *op != ',');
    if is_op && wrap_ops {
        out.push('(');
        render(sym, out);
        out.push(')');
    } else {
        render(sym, out);
    }
}

fn target_body(module: &[Stmt]) -> &[Stmt] {
    let defs: Vec<&Stmt> = module.iter().filter(|s| matches!(s, Stmt::FunctionDef { .. })).collect();
    let chosen = defs
        .iter()
        .find(|s| matches!(s, Stmt::FunctionDef { name, .. } if name == "run"))
        .or_else(|| defs.first());
    match chosen {
        Some(Stmt::FunctionDef { body, .. }) => body,
        _ => module,
    }
}

/// Skeleton of the number a program returns; `other` when the program does
/// not parse or returns nothing recognizable.
pub fn code_pattern(source: &str) -> CalcPattern {
    let Ok(module) = parse_module(source) else {
        return CalcPattern::other();
    };
    let body = target_body(&module);
    let mut env = Env::default();
    let sym = match walk(body, &mut env, 0, true) {
        Some(sym) => sym,
        None => match last_nested_return(body) {
            Some(e) => first_of_tuple(eval(e, &env).0),
            None => return CalcPattern::other(),
        },
    };
    let mut out = String::new();
    render(&sym, &mut out);
    normalize(&out).unwrap_or_else(CalcPattern::other)
}
