//! A small arithmetic expression grammar with exact symbolic differentiation.
//!
//! Expressions range over named variables with operators `+ - * / ^`, unary
//! minus, the functions `sin cos exp log tanh`, and numeric literals. They
//! power user-specified coefficients and nonlinearities and, through
//! [`Expr::diff`] and [`Expr::substitute`], exact manufactured sources:
//! derivatives are tree rewrites, never sampled.

use crate::error::{Error, Result};
use std::collections::BTreeSet;
use std::fmt;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Func {
    Sin,
    Cos,
    Exp,
    Log,
    Tanh,
}

impl Func {
    fn name(self) -> &'static str {
        match self {
            Func::Sin => "sin",
            Func::Cos => "cos",
            Func::Exp => "exp",
            Func::Log => "log",
            Func::Tanh => "tanh",
        }
    }

    fn apply(self, x: f64) -> f64 {
        match self {
            Func::Sin => x.sin(),
            Func::Cos => x.cos(),
            Func::Exp => x.exp(),
            Func::Log => x.ln(),
            Func::Tanh => x.tanh(),
        }
    }
}

/// Parsed expression tree.
#[derive(Debug, Clone, PartialEq)]
pub enum Expr {
    Num(f64),
    Var(String),
    Neg(Box<Expr>),
    Add(Box<Expr>, Box<Expr>),
    Sub(Box<Expr>, Box<Expr>),
    Mul(Box<Expr>, Box<Expr>),
    Div(Box<Expr>, Box<Expr>),
    Pow(Box<Expr>, Box<Expr>),
    Fun(Func, Box<Expr>),
}

// Smart constructors with light constant folding; enough to keep
// differentiated trees readable and cheap to evaluate.
pub fn num(v: f64) -> Expr {
    Expr::Num(v)
}

pub fn var(name: &str) -> Expr {
    Expr::Var(name.to_string())
}

pub fn add(a: Expr, b: Expr) -> Expr {
    match (&a, &b) {
        (Expr::Num(x), Expr::Num(y)) => Expr::Num(x + y),
        (Expr::Num(x), _) if *x == 0.0 => b,
        (_, Expr::Num(y)) if *y == 0.0 => a,
        _ => Expr::Add(Box::new(a), Box::new(b)),
    }
}

pub fn sub(a: Expr, b: Expr) -> Expr {
    match (&a, &b) {
        (Expr::Num(x), Expr::Num(y)) => Expr::Num(x - y),
        (_, Expr::Num(y)) if *y == 0.0 => a,
        (Expr::Num(x), _) if *x == 0.0 => neg(b),
        _ => Expr::Sub(Box::new(a), Box::new(b)),
    }
}

pub fn neg(a: Expr) -> Expr {
    match a {
        Expr::Num(x) => Expr::Num(-x),
        Expr::Neg(inner) => *inner,
        _ => Expr::Neg(Box::new(a)),
    }
}

pub fn mul(a: Expr, b: Expr) -> Expr {
    match (&a, &b) {
        (Expr::Num(x), Expr::Num(y)) => Expr::Num(x * y),
        (Expr::Num(x), _) if *x == 0.0 => Expr::Num(0.0),
        (_, Expr::Num(y)) if *y == 0.0 => Expr::Num(0.0),
        (Expr::Num(x), _) if *x == 1.0 => b,
        (_, Expr::Num(y)) if *y == 1.0 => a,
        _ => Expr::Mul(Box::new(a), Box::new(b)),
    }
}

pub fn div(a: Expr, b: Expr) -> Expr {
    match (&a, &b) {
        (Expr::Num(x), _) if *x == 0.0 => Expr::Num(0.0),
        (_, Expr::Num(y)) if *y == 1.0 => a,
        (Expr::Num(x), Expr::Num(y)) if *y != 0.0 => Expr::Num(x / y),
        _ => Expr::Div(Box::new(a), Box::new(b)),
    }
}

pub fn pow(a: Expr, b: Expr) -> Expr {
    match (&a, &b) {
        (_, Expr::Num(y)) if *y == 0.0 => Expr::Num(1.0),
        (_, Expr::Num(y)) if *y == 1.0 => a,
        (Expr::Num(x), Expr::Num(y)) => Expr::Num(x.powf(*y)),
        _ => Expr::Pow(Box::new(a), Box::new(b)),
    }
}

pub fn fun(f: Func, a: Expr) -> Expr {
    match &a {
        Expr::Num(x) => Expr::Num(f.apply(*x)),
        _ => Expr::Fun(f, Box::new(a)),
    }
}

impl Expr {
    /// Parses an expression source string. Errors carry line and column.
    pub fn parse(src: &str) -> Result<Expr> {
        Parser::new(src)?.parse_all()
    }

    /// Free variables in sorted order.
    pub fn free_vars(&self) -> BTreeSet<String> {
        let mut out = BTreeSet::new();
        self.collect_vars(&mut out);
        out
    }

    fn collect_vars(&self, out: &mut BTreeSet<String>) {
        match self {
            Expr::Num(_) => {}
            Expr::Var(name) => {
                out.insert(name.clone());
            }
            Expr::Neg(a) | Expr::Fun(_, a) => a.collect_vars(out),
            Expr::Add(a, b)
            | Expr::Sub(a, b)
            | Expr::Mul(a, b)
            | Expr::Div(a, b)
            | Expr::Pow(a, b) => {
                a.collect_vars(out);
                b.collect_vars(out);
            }
        }
    }

    /// Evaluates against `(name, value)` bindings; unbound variables error.
    pub fn eval(&self, env: &[(&str, f64)]) -> Result<f64> {
        Ok(match self {
            Expr::Num(v) => *v,
            Expr::Var(name) => env
                .iter()
                .find(|(n, _)| n == name)
                .map(|(_, v)| *v)
                .ok_or_else(|| Error::Argument(format!("unbound variable '{name}'")))?,
            Expr::Neg(a) => -a.eval(env)?,
            Expr::Add(a, b) => a.eval(env)? + b.eval(env)?,
            Expr::Sub(a, b) => a.eval(env)? - b.eval(env)?,
            Expr::Mul(a, b) => a.eval(env)? * b.eval(env)?,
            Expr::Div(a, b) => a.eval(env)? / b.eval(env)?,
            Expr::Pow(a, b) => a.eval(env)?.powf(b.eval(env)?),
            Expr::Fun(f, a) => f.apply(a.eval(env)?),
        })
    }

    /// Exact partial derivative with respect to `name`.
    pub fn diff(&self, name: &str) -> Expr {
        match self {
            Expr::Num(_) => num(0.0),
            Expr::Var(v) => num(if v == name { 1.0 } else { 0.0 }),
            Expr::Neg(a) => neg(a.diff(name)),
            Expr::Add(a, b) => add(a.diff(name), b.diff(name)),
            Expr::Sub(a, b) => sub(a.diff(name), b.diff(name)),
            Expr::Mul(a, b) => add(
                mul(a.diff(name), (**b).clone()),
                mul((**a).clone(), b.diff(name)),
            ),
            Expr::Div(a, b) => div(
                sub(
                    mul(a.diff(name), (**b).clone()),
                    mul((**a).clone(), b.diff(name)),
                ),
                pow((**b).clone(), num(2.0)),
            ),
            Expr::Pow(a, b) => match &**b {
                // Constant exponent: n * a^(n-1) * a'.
                Expr::Num(n) => mul(
                    mul(num(*n), pow((**a).clone(), num(n - 1.0))),
                    a.diff(name),
                ),
                _ => {
                    // General a^b = exp(b log a).
                    let a_ = (**a).clone();
                    let b_ = (**b).clone();
                    mul(
                        pow(a_.clone(), b_.clone()),
                        add(
                            mul(b.diff(name), fun(Func::Log, a_.clone())),
                            div(mul(b_, a.diff(name)), a_),
                        ),
                    )
                }
            },
            Expr::Fun(f, a) => {
                let inner = a.diff(name);
                let outer = match f {
                    Func::Sin => fun(Func::Cos, (**a).clone()),
                    Func::Cos => neg(fun(Func::Sin, (**a).clone())),
                    Func::Exp => fun(Func::Exp, (**a).clone()),
                    Func::Log => div(num(1.0), (**a).clone()),
                    Func::Tanh => sub(
                        num(1.0),
                        pow(fun(Func::Tanh, (**a).clone()), num(2.0)),
                    ),
                };
                mul(outer, inner)
            }
        }
    }

    /// Replaces every occurrence of a variable by an expression tree.
    pub fn substitute(&self, name: &str, replacement: &Expr) -> Expr {
        match self {
            Expr::Num(v) => num(*v),
            Expr::Var(v) => {
                if v == name {
                    replacement.clone()
                } else {
                    var(v)
                }
            }
            Expr::Neg(a) => neg(a.substitute(name, replacement)),
            Expr::Add(a, b) => add(a.substitute(name, replacement), b.substitute(name, replacement)),
            Expr::Sub(a, b) => sub(a.substitute(name, replacement), b.substitute(name, replacement)),
            Expr::Mul(a, b) => mul(a.substitute(name, replacement), b.substitute(name, replacement)),
            Expr::Div(a, b) => div(a.substitute(name, replacement), b.substitute(name, replacement)),
            Expr::Pow(a, b) => pow(a.substitute(name, replacement), b.substitute(name, replacement)),
            Expr::Fun(f, a) => fun(*f, a.substitute(name, replacement)),
        }
    }

    /// Resolves variables against a fixed slot order for fast repeated
    /// evaluation; unknown variables error here rather than per call.
    pub fn compile(&self, slots: &[&str]) -> Result<Compiled> {
        let node = CompiledNode::build(self, slots)?;
        Ok(Compiled { node })
    }
}

impl fmt::Display for Expr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fn prec(e: &Expr) -> u8 {
            match e {
                Expr::Add(..) | Expr::Sub(..) => 1,
                Expr::Mul(..) | Expr::Div(..) => 2,
                Expr::Neg(..) => 3,
                Expr::Pow(..) => 4,
                Expr::Num(_) | Expr::Var(_) | Expr::Fun(..) => 5,
            }
        }
        fn wrap(e: &Expr, min: u8, f: &mut fmt::Formatter<'_>) -> fmt::Result {
            if prec(e) < min {
                write!(f, "({e})")
            } else {
                write!(f, "{e}")
            }
        }
        match self {
            Expr::Num(v) => {
                if *v < 0.0 {
                    write!(f, "({v})")
                } else {
                    write!(f, "{v}")
                }
            }
            Expr::Var(name) => write!(f, "{name}"),
            Expr::Neg(a) => {
                write!(f, "-")?;
                wrap(a, 3, f)
            }
            Expr::Add(a, b) => {
                wrap(a, 1, f)?;
                write!(f, " + ")?;
                wrap(b, 2, f)
            }
            Expr::Sub(a, b) => {
                wrap(a, 1, f)?;
                write!(f, " - ")?;
                wrap(b, 2, f)
            }
            Expr::Mul(a, b) => {
                wrap(a, 2, f)?;
                write!(f, "*")?;
                wrap(b, 3, f)
            }
            Expr::Div(a, b) => {
                wrap(a, 2, f)?;
                write!(f, "/")?;
                wrap(b, 5, f)
            }
            Expr::Pow(a, b) => {
                wrap(a, 5, f)?;
                write!(f, "^")?;
                wrap(b, 5, f)
            }
            Expr::Fun(func, a) => write!(f, "{}({a})", func.name()),
        }
    }
}

/// Slot-resolved expression for tight evaluation loops.
#[derive(Debug, Clone)]
pub struct Compiled {
    node: CompiledNode,
}

#[derive(Debug, Clone)]
enum CompiledNode {
    Num(f64),
    Slot(usize),
    Neg(Box<CompiledNode>),
    Add(Box<CompiledNode>, Box<CompiledNode>),
    Sub(Box<CompiledNode>, Box<CompiledNode>),
    Mul(Box<CompiledNode>, Box<CompiledNode>),
    Div(Box<CompiledNode>, Box<CompiledNode>),
    Pow(Box<CompiledNode>, Box<CompiledNode>),
    PowInt(Box<CompiledNode>, i32),
    Fun(Func, Box<CompiledNode>),
}

impl CompiledNode {
    fn build(e: &Expr, slots: &[&str]) -> Result<CompiledNode> {
        Ok(match e {
            Expr::Num(v) => CompiledNode::Num(*v),
            Expr::Var(name) => {
                let idx = slots.iter().position(|s| s == name).ok_or_else(|| {
                    Error::Argument(format!(
                        "variable '{name}' is not allowed here (allowed: {})",
                        slots.join(", ")
                    ))
                })?;
                CompiledNode::Slot(idx)
            }
            Expr::Neg(a) => CompiledNode::Neg(Box::new(Self::build(a, slots)?)),
            Expr::Add(a, b) => CompiledNode::Add(
                Box::new(Self::build(a, slots)?),
                Box::new(Self::build(b, slots)?),
            ),
            Expr::Sub(a, b) => CompiledNode::Sub(
                Box::new(Self::build(a, slots)?),
                Box::new(Self::build(b, slots)?),
            ),
            Expr::Mul(a, b) => CompiledNode::Mul(
                Box::new(Self::build(a, slots)?),
                Box::new(Self::build(b, slots)?),
            ),
            Expr::Div(a, b) => CompiledNode::Div(
                Box::new(Self::build(a, slots)?),
                Box::new(Self::build(b, slots)?),
            ),
            Expr::Pow(a, b) => match &**b {
                Expr::Num(n) if n.fract() == 0.0 && n.abs() <= 64.0 => {
                    CompiledNode::PowInt(Box::new(Self::build(a, slots)?), *n as i32)
                }
                _ => CompiledNode::Pow(
                    Box::new(Self::build(a, slots)?),
                    Box::new(Self::build(b, slots)?),
                ),
            },
            Expr::Fun(f, a) => CompiledNode::Fun(*f, Box::new(Self::build(a, slots)?)),
        })
    }

    fn eval(&self, values: &[f64]) -> f64 {
        match self {
            CompiledNode::Num(v) => *v,
            CompiledNode::Slot(i) => values[*i],
            CompiledNode::Neg(a) => -a.eval(values),
            CompiledNode::Add(a, b) => a.eval(values) + b.eval(values),
            CompiledNode::Sub(a, b) => a.eval(values) - b.eval(values),
            CompiledNode::Mul(a, b) => a.eval(values) * b.eval(values),
            CompiledNode::Div(a, b) => a.eval(values) / b.eval(values),
            CompiledNode::Pow(a, b) => a.eval(values).powf(b.eval(values)),
            CompiledNode::PowInt(a, n) => a.eval(values).powi(*n),
            CompiledNode::Fun(f, a) => f.apply(a.eval(values)),
        }
    }
}

impl Compiled {
    #[inline]
    pub fn eval(&self, values: &[f64]) -> f64 {
        self.node.eval(values)
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Token {
    Num(f64),
    Ident(String),
    Plus,
    Minus,
    Star,
    Slash,
    Caret,
    LParen,
    RParen,
}

struct Parser {
    tokens: Vec<(Token, usize, usize)>,
    pos: usize,
}

impl Parser {
    fn new(src: &str) -> Result<Parser> {
        let mut tokens = Vec::new();
        let mut line = 1usize;
        let mut col = 1usize;
        let bytes: Vec<char> = src.chars().collect();
        let mut i = 0;
        while i < bytes.len() {
            let c = bytes[i];
            let (tline, tcol) = (line, col);
            match c {
                ' ' | '\t' | '\r' => {
                    i += 1;
                    col += 1;
                }
                '\n' => {
                    i += 1;
                    line += 1;
                    col = 1;
                }
                '+' => {
                    tokens.push((Token::Plus, tline, tcol));
                    i += 1;
                    col += 1;
                }
                '-' => {
                    tokens.push((Token::Minus, tline, tcol));
                    i += 1;
                    col += 1;
                }
                '*' => {
                    tokens.push((Token::Star, tline, tcol));
                    i += 1;
                    col += 1;
                }
                '/' => {
                    tokens.push((Token::Slash, tline, tcol));
                    i += 1;
                    col += 1;
                }
                '^' => {
                    tokens.push((Token::Caret, tline, tcol));
                    i += 1;
                    col += 1;
                }
                '(' => {
                    tokens.push((Token::LParen, tline, tcol));
                    i += 1;
                    col += 1;
                }
                ')' => {
                    tokens.push((Token::RParen, tline, tcol));
                    i += 1;
                    col += 1;
                }
                c if c.is_ascii_digit() || c == '.' => {
                    let start = i;
                    while i < bytes.len()
                        && (bytes[i].is_ascii_digit()
                            || bytes[i] == '.'
                            || bytes[i] == 'e'
                            || bytes[i] == 'E'
                            || ((bytes[i] == '+' || bytes[i] == '-')
                                && i > start
                                && (bytes[i - 1] == 'e' || bytes[i - 1] == 'E')))
                    {
                        i += 1;
                    }
                    let text: String = bytes[start..i].iter().collect();
                    let value = text.parse::<f64>().map_err(|_| {
                        Error::Parse(format!("invalid number '{text}' at {tline}:{tcol}"))
                    })?;
                    tokens.push((Token::Num(value), tline, tcol));
                    col += i - start;
                }
                c if c.is_ascii_alphabetic() || c == '_' => {
                    let start = i;
                    while i < bytes.len()
                        && (bytes[i].is_ascii_alphanumeric() || bytes[i] == '_')
                    {
                        i += 1;
                    }
                    let text: String = bytes[start..i].iter().collect();
                    tokens.push((Token::Ident(text), tline, tcol));
                    col += i - start;
                }
                other => {
                    return Err(Error::Parse(format!(
                        "unexpected character '{other}' at {line}:{col}"
                    )));
                }
            }
        }
        Ok(Parser { tokens, pos: 0 })
    }

    fn peek(&self) -> Option<&Token> {
        self.tokens.get(self.pos).map(|(t, _, _)| t)
    }

    fn location(&self) -> (usize, usize) {
        self.tokens
            .get(self.pos)
            .or_else(|| self.tokens.last())
            .map(|(_, l, c)| (*l, *c))
            .unwrap_or((1, 1))
    }

    fn advance(&mut self) -> Option<Token> {
        let t = self.tokens.get(self.pos).map(|(t, _, _)| t.clone());
        self.pos += 1;
        t
    }

    fn parse_all(&mut self) -> Result<Expr> {
        if self.tokens.is_empty() {
            return Err(Error::Parse("empty expression at 1:1".into()));
        }
        let e = self.parse_sum()?;
        if self.pos != self.tokens.len() {
            let (l, c) = self.location();
            return Err(Error::Parse(format!("unexpected trailing input at {l}:{c}")));
        }
        Ok(e)
    }

    fn parse_sum(&mut self) -> Result<Expr> {
        let mut lhs = self.parse_product()?;
        loop {
            match self.peek() {
                Some(Token::Plus) => {
                    self.advance();
                    lhs = add(lhs, self.parse_product()?);
                }
                Some(Token::Minus) => {
                    self.advance();
                    lhs = sub(lhs, self.parse_product()?);
                }
                _ => return Ok(lhs),
            }
        }
    }

    fn parse_product(&mut self) -> Result<Expr> {
        let mut lhs = self.parse_unary()?;
        loop {
            match self.peek() {
                Some(Token::Star) => {
                    self.advance();
                    lhs = mul(lhs, self.parse_unary()?);
                }
                Some(Token::Slash) => {
                    self.advance();
                    lhs = div(lhs, self.parse_unary()?);
                }
                _ => return Ok(lhs),
            }
        }
    }

    fn parse_unary(&mut self) -> Result<Expr> {
        if matches!(self.peek(), Some(Token::Minus)) {
            self.advance();
            return Ok(neg(self.parse_unary()?));
        }
        self.parse_power()
    }

    fn parse_power(&mut self) -> Result<Expr> {
        let base = self.parse_atom()?;
        if matches!(self.peek(), Some(Token::Caret)) {
            self.advance();
            // Right-associative; the exponent may itself carry a unary minus.
            let exponent = self.parse_unary()?;
            return Ok(pow(base, exponent));
        }
        Ok(base)
    }

    fn parse_atom(&mut self) -> Result<Expr> {
        let (line, col) = self.location();
        match self.advance() {
            Some(Token::Num(v)) => Ok(num(v)),
            Some(Token::Ident(name)) => {
                let func = match name.as_str() {
                    "sin" => Some(Func::Sin),
                    "cos" => Some(Func::Cos),
                    "exp" => Some(Func::Exp),
                    "log" => Some(Func::Log),
                    "tanh" => Some(Func::Tanh),
                    _ => None,
                };
                if let Some(f) = func {
                    match self.advance() {
                        Some(Token::LParen) => {}
                        _ => {
                            return Err(Error::Parse(format!(
                                "expected '(' after '{}' at {line}:{col}",
                                f.name()
                            )));
                        }
                    }
                    let arg = self.parse_sum()?;
                    match self.advance() {
                        Some(Token::RParen) => Ok(fun(f, arg)),
                        _ => Err(Error::Parse(format!(
                            "missing ')' for '{}' opened at {line}:{col}",
                            f.name()
                        ))),
                    }
                } else {
                    Ok(var(&name))
                }
            }
            Some(Token::LParen) => {
                let e = self.parse_sum()?;
                match self.advance() {
                    Some(Token::RParen) => Ok(e),
                    _ => Err(Error::Parse(format!(
                        "missing ')' for group opened at {line}:{col}"
                    ))),
                }
            }
            other => Err(Error::Parse(format!(
                "expected a value at {line}:{col}, found {other:?}"
            ))),
        }
    }
}
