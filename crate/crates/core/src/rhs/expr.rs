//! Expression trees for right-hand sides and scalar families.
//!
//! One small grammar serves three dialects, selected by [`ParseCtx`]:
//! delayed state references `x[i](t - d)` for RHS source, plain named
//! variables for sequence families (`x`, `k`) and history expressions
//! (`theta`), and named scalar parameters that are substituted at parse
//! time. Precedence, tightest first: unary minus, `^` (right-associative),
//! `*` `/`, `+` `-`. So `-x^2` is `(-x)^2` and `2^3^2` is `2^(3^2)`.
//!
//! Printing is structure-preserving: re-parsing a printed tree gives the
//! same tree, so print ∘ parse is idempotent after one round.

use std::collections::BTreeMap;
use std::fmt;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
#[error("parse error at {line}:{col}: {message}")]
pub struct ParseError {
    pub line: usize,
    pub col: usize,
    pub message: String,
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EvalError {
    #[error("log of non-positive value {0}")]
    LogDomain(f64),
    #[error("division by near-zero denominator {0:e}")]
    DivByZero(f64),
    #[error("non-finite result from {0}")]
    NonFinite(&'static str),
    #[error("state lookup failed: {0}")]
    State(String),
}

/// Denominators below this magnitude are treated as division by zero.
pub const DIV_EPS: f64 = 1e-300;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BinOp {
    Add,
    Sub,
    Mul,
    Div,
    Pow,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Func {
    Sin,
    Cos,
    Exp,
    Log,
    Abs,
    Pow,
}

impl Func {
    fn name(self) -> &'static str {
        match self {
            Func::Sin => "sin",
            Func::Cos => "cos",
            Func::Exp => "exp",
            Func::Log => "log",
            Func::Abs => "abs",
            Func::Pow => "pow",
        }
    }

    fn arity(self) -> usize {
        match self {
            Func::Pow => 2,
            _ => 1,
        }
    }

    fn from_name(s: &str) -> Option<Func> {
        Some(match s {
            "sin" => Func::Sin,
            "cos" => Func::Cos,
            "exp" => Func::Exp,
            "log" => Func::Log,
            "abs" => Func::Abs,
            "pow" => Func::Pow,
            _ => return None,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Expr {
    Const(f64),
    /// Positional slot in the variable table the expression was parsed with.
    Var(usize),
    /// Delayed state reference `x[comp+1](t - delay)`.
    Delayed { comp: usize, delay: f64 },
    Neg(Box<Expr>),
    Bin(BinOp, Box<Expr>, Box<Expr>),
    Call(Func, Vec<Expr>),
}

/// Values a delayed state reference resolves against.
pub trait StateView {
    fn delayed(&self, comp: usize, delay: f64) -> Result<f64, EvalError>;
}

/// State view for expressions that contain no delayed references.
pub struct NoState;

impl StateView for NoState {
    fn delayed(&self, _comp: usize, _delay: f64) -> Result<f64, EvalError> {
        Err(EvalError::State("expression has no state to reference".into()))
    }
}

impl<F: Fn(usize, f64) -> Result<f64, EvalError>> StateView for F {
    fn delayed(&self, comp: usize, delay: f64) -> Result<f64, EvalError> {
        self(comp, delay)
    }
}

impl Expr {
    pub fn eval(&self, vars: &[f64], state: &dyn StateView) -> Result<f64, EvalError> {
        let v = self.eval_inner(vars, state)?;
        if v.is_finite() {
            Ok(v)
        } else {
            Err(EvalError::NonFinite("expression"))
        }
    }

    fn eval_inner(&self, vars: &[f64], state: &dyn StateView) -> Result<f64, EvalError> {
        Ok(match self {
            Expr::Const(c) => *c,
            Expr::Var(i) => vars[*i],
            Expr::Delayed { comp, delay } => state.delayed(*comp, *delay)?,
            Expr::Neg(e) => -e.eval_inner(vars, state)?,
            Expr::Bin(op, a, b) => {
                let x = a.eval_inner(vars, state)?;
                let y = b.eval_inner(vars, state)?;
                match op {
                    BinOp::Add => x + y,
                    BinOp::Sub => x - y,
                    BinOp::Mul => x * y,
                    BinOp::Div => {
                        if y.abs() < DIV_EPS {
                            return Err(EvalError::DivByZero(y));
                        }
                        x / y
                    }
                    BinOp::Pow => pow_checked(x, y)?,
                }
            }
            Expr::Call(f, args) => {
                let x = args[0].eval_inner(vars, state)?;
                match f {
                    Func::Sin => x.sin(),
                    Func::Cos => x.cos(),
                    Func::Exp => {
                        let v = x.exp();
                        if !v.is_finite() {
                            return Err(EvalError::NonFinite("exp"));
                        }
                        v
                    }
                    Func::Log => {
                        if x <= 0.0 {
                            return Err(EvalError::LogDomain(x));
                        }
                        x.ln()
                    }
                    Func::Abs => x.abs(),
                    Func::Pow => {
                        let y = args[1].eval_inner(vars, state)?;
                        pow_checked(x, y)?
                    }
                }
            }
        })
    }

    /// Every delay appearing in the tree, in source order with duplicates.
    pub fn collect_delays(&self, out: &mut Vec<f64>) {
        match self {
            Expr::Delayed { delay, .. } => out.push(*delay),
            Expr::Neg(e) => e.collect_delays(out),
            Expr::Bin(_, a, b) => {
                a.collect_delays(out);
                b.collect_delays(out);
            }
            Expr::Call(_, args) => {
                for a in args {
                    a.collect_delays(out);
                }
            }
            _ => {}
        }
    }

    /// (component, delay) pairs of every delayed reference in the tree.
    pub fn collect_refs(&self, out: &mut Vec<(usize, f64)>) {
        match self {
            Expr::Delayed { comp, delay } => out.push((*comp, *delay)),
            Expr::Neg(e) => e.collect_refs(out),
            Expr::Bin(_, a, b) => {
                a.collect_refs(out);
                b.collect_refs(out);
            }
            Expr::Call(_, args) => {
                for a in args {
                    a.collect_refs(out);
                }
            }
            _ => {}
        }
    }
}

fn pow_checked(x: f64, y: f64) -> Result<f64, EvalError> {
    let v = x.powf(y);
    if v.is_finite() {
        Ok(v)
    } else {
        Err(EvalError::NonFinite("pow"))
    }
}

/// Parsing dialect: which plain variables exist, which parameters get
/// substituted, and whether delayed state references are allowed.
pub struct ParseCtx<'a> {
    pub vars: &'a [&'a str],
    pub params: &'a BTreeMap<String, f64>,
    /// `Some((n_components, max_delay))` enables `x[i](t - d)` atoms.
    pub state: Option<(usize, f64)>,
}

impl<'a> ParseCtx<'a> {
    pub fn scalar(vars: &'a [&'a str], params: &'a BTreeMap<String, f64>) -> Self {
        ParseCtx { vars, params, state: None }
    }
}

pub fn parse(src: &str, ctx: &ParseCtx) -> Result<Expr, ParseError> {
    let tokens = lex(src)?;
    let mut p = Parser { src, tokens, pos: 0, ctx };
    let e = p.parse_add()?;
    if p.pos < p.tokens.len() {
        return Err(p.err_at(p.tokens[p.pos].offset, "unexpected trailing input"));
    }
    Ok(e)
}

// ---------------------------------------------------------------- lexing --

#[derive(Debug, Clone, PartialEq)]
enum Tok {
    Num(f64),
    Ident(String),
    Plus,
    Minus,
    Star,
    Slash,
    Caret,
    LParen,
    RParen,
    LBracket,
    RBracket,
    Comma,
}

#[derive(Debug, Clone)]
struct Token {
    tok: Tok,
    offset: usize,
}

fn line_col(src: &str, offset: usize) -> (usize, usize) {
    let mut line = 1;
    let mut col = 1;
    for (i, c) in src.char_indices() {
        if i >= offset {
            break;
        }
        if c == '\n' {
            line += 1;
            col = 1;
        } else {
            col += 1;
        }
    }
    (line, col)
}

fn lex(src: &str) -> Result<Vec<Token>, ParseError> {
    let bytes = src.as_bytes();
    let mut out = Vec::new();
    let mut i = 0;
    while i < bytes.len() {
        let c = bytes[i] as char;
        let tok = match c {
            ' ' | '\t' | '\n' | '\r' => {
                i += 1;
                continue;
            }
            '+' => Tok::Plus,
            '-' => Tok::Minus,
            '*' => Tok::Star,
            '/' => Tok::Slash,
            '^' => Tok::Caret,
            '(' => Tok::LParen,
            ')' => Tok::RParen,
            '[' => Tok::LBracket,
            ']' => Tok::RBracket,
            ',' => Tok::Comma,
            '0'..='9' | '.' => {
                let start = i;
                while i < bytes.len() && (bytes[i].is_ascii_digit() || bytes[i] == b'.') {
                    i += 1;
                }
                if i < bytes.len() && (bytes[i] == b'e' || bytes[i] == b'E') {
                    let mut j = i + 1;
                    if j < bytes.len() && (bytes[j] == b'+' || bytes[j] == b'-') {
                        j += 1;
                    }
                    if j < bytes.len() && bytes[j].is_ascii_digit() {
                        i = j;
                        while i < bytes.len() && bytes[i].is_ascii_digit() {
                            i += 1;
                        }
                    }
                }
                let text = &src[start..i];
                let n = text.parse::<f64>().map_err(|_| {
                    let (line, col) = line_col(src, start);
                    ParseError { line, col, message: format!("bad number literal {text:?}") }
                })?;
                out.push(Token { tok: Tok::Num(n), offset: start });
                continue;
            }
            'a'..='z' | 'A'..='Z' | '_' => {
                let start = i;
                while i < bytes.len()
                    && (bytes[i].is_ascii_alphanumeric() || bytes[i] == b'_')
                {
                    i += 1;
                }
                out.push(Token { tok: Tok::Ident(src[start..i].to_string()), offset: start });
                continue;
            }
            other => {
                let (line, col) = line_col(src, i);
                return Err(ParseError {
                    line,
                    col,
                    message: format!("unexpected character {other:?}"),
                });
            }
        };
        out.push(Token { tok, offset: i });
        i += 1;
    }
    Ok(out)
}

// --------------------------------------------------------------- parsing --

struct Parser<'a> {
    src: &'a str,
    tokens: Vec<Token>,
    pos: usize,
    ctx: &'a ParseCtx<'a>,
}

impl<'a> Parser<'a> {
    fn err_at(&self, offset: usize, msg: impl Into<String>) -> ParseError {
        let (line, col) = line_col(self.src, offset);
        ParseError { line, col, message: msg.into() }
    }

    fn err_here(&self, msg: impl Into<String>) -> ParseError {
        let offset = self
            .tokens
            .get(self.pos)
            .map(|t| t.offset)
            .unwrap_or(self.src.len());
        self.err_at(offset, msg)
    }

    fn peek(&self) -> Option<&Tok> {
        self.tokens.get(self.pos).map(|t| &t.tok)
    }

    fn bump(&mut self) -> Option<Tok> {
        let t = self.tokens.get(self.pos).map(|t| t.tok.clone());
        if t.is_some() {
            self.pos += 1;
        }
        t
    }

    fn expect(&mut self, want: Tok, what: &str) -> Result<(), ParseError> {
        match self.peek() {
            Some(t) if *t == want => {
                self.pos += 1;
                Ok(())
            }
            _ => Err(self.err_here(format!("expected {what}"))),
        }
    }

    fn parse_add(&mut self) -> Result<Expr, ParseError> {
        let mut e = self.parse_mul()?;
        loop {
            match self.peek() {
                Some(Tok::Plus) => {
                    self.pos += 1;
                    e = Expr::Bin(BinOp::Add, Box::new(e), Box::new(self.parse_mul()?));
                }
                Some(Tok::Minus) => {
                    self.pos += 1;
                    e = Expr::Bin(BinOp::Sub, Box::new(e), Box::new(self.parse_mul()?));
                }
                _ => return Ok(e),
            }
        }
    }

    fn parse_mul(&mut self) -> Result<Expr, ParseError> {
        let mut e = self.parse_pow()?;
        loop {
            match self.peek() {
                Some(Tok::Star) => {
                    self.pos += 1;
                    e = Expr::Bin(BinOp::Mul, Box::new(e), Box::new(self.parse_pow()?));
                }
                Some(Tok::Slash) => {
                    self.pos += 1;
                    e = Expr::Bin(BinOp::Div, Box::new(e), Box::new(self.parse_pow()?));
                }
                _ => return Ok(e),
            }
        }
    }

    // `^` is right-associative and binds looser than unary minus: the base
    // of a power is a full unary expression, so -x^2 is (-x)^2.
    fn parse_pow(&mut self) -> Result<Expr, ParseError> {
        let base = self.parse_unary()?;
        if let Some(Tok::Caret) = self.peek() {
            self.pos += 1;
            let exp = self.parse_pow()?;
            return Ok(Expr::Bin(BinOp::Pow, Box::new(base), Box::new(exp)));
        }
        Ok(base)
    }

    fn parse_unary(&mut self) -> Result<Expr, ParseError> {
        if let Some(Tok::Minus) = self.peek() {
            self.pos += 1;
            return Ok(Expr::Neg(Box::new(self.parse_unary()?)));
        }
        self.parse_atom()
    }

    fn parse_atom(&mut self) -> Result<Expr, ParseError> {
        let offset = self
            .tokens
            .get(self.pos)
            .map(|t| t.offset)
            .unwrap_or(self.src.len());
        match self.bump() {
            Some(Tok::Num(n)) => Ok(Expr::Const(n)),
            Some(Tok::LParen) => {
                let e = self.parse_add()?;
                self.expect(Tok::RParen, "')'")?;
                Ok(e)
            }
            Some(Tok::Ident(name)) => self.parse_ident(offset, &name),
            Some(other) => Err(self.err_at(offset, format!("unexpected token {other:?}"))),
            None => Err(self.err_at(offset, "unexpected end of input")),
        }
    }

    fn parse_ident(&mut self, offset: usize, name: &str) -> Result<Expr, ParseError> {
        // State reference: x [ i ] ( t [- d] )
        if name == "x" && self.peek() == Some(&Tok::LBracket) {
            let (n_comp, max_delay) = self.ctx.state.ok_or_else(|| {
                self.err_at(offset, "state references x[i](t-d) are not allowed here")
            })?;
            self.pos += 1; // [
            let idx_offset = self
                .tokens
                .get(self.pos)
                .map(|t| t.offset)
                .unwrap_or(self.src.len());
            let comp = match self.bump() {
                Some(Tok::Num(n)) if n.fract() == 0.0 && n >= 1.0 => n as usize,
                _ => return Err(self.err_at(idx_offset, "expected component index >= 1")),
            };
            if comp > n_comp {
                return Err(self.err_at(
                    idx_offset,
                    format!("component index {comp} out of range (system has {n_comp})"),
                ));
            }
            self.expect(Tok::RBracket, "']'")?;
            self.expect(Tok::LParen, "'('")?;
            match self.bump() {
                Some(Tok::Ident(t)) if t == "t" => {}
                _ => return Err(self.err_here("expected 't' in state reference")),
            }
            let delay = match self.peek() {
                Some(Tok::Minus) => {
                    self.pos += 1;
                    let d_offset = self
                        .tokens
                        .get(self.pos)
                        .map(|t| t.offset)
                        .unwrap_or(self.src.len());
                    match self.bump() {
                        Some(Tok::Num(d)) => {
                            if d > max_delay {
                                return Err(self.err_at(
                                    d_offset,
                                    format!("delay {d} exceeds history length {max_delay}"),
                                ));
                            }
                            d
                        }
                        _ => {
                            return Err(self
                                .err_at(d_offset, "delay must be a literal non-negative number"))
                        }
                    }
                }
                _ => 0.0,
            };
            self.expect(Tok::RParen, "')'")?;
            return Ok(Expr::Delayed { comp: comp - 1, delay });
        }

        // Function call.
        if self.peek() == Some(&Tok::LParen) {
            let f = Func::from_name(name).ok_or_else(|| {
                self.err_at(offset, format!("unknown function {name:?}"))
            })?;
            self.pos += 1; // (
            let mut args = vec![self.parse_add()?];
            while self.peek() == Some(&Tok::Comma) {
                self.pos += 1;
                args.push(self.parse_add()?);
            }
            self.expect(Tok::RParen, "')'")?;
            if args.len() != f.arity() {
                return Err(self.err_at(
                    offset,
                    format!("{} takes {} argument(s), got {}", f.name(), f.arity(), args.len()),
                ));
            }
            return Ok(Expr::Call(f, args));
        }

        // Plain variable or substituted parameter.
        if let Some(i) = self.ctx.vars.iter().position(|v| *v == name) {
            return Ok(Expr::Var(i));
        }
        if let Some(v) = self.ctx.params.get(name) {
            return Ok(Expr::Const(*v));
        }
        let hint = if name == "x" && self.ctx.state.is_some() {
            " (state references are written x[i](t-d))"
        } else {
            ""
        };
        Err(self.err_at(offset, format!("unknown identifier {name:?}{hint}")))
    }
}

// -------------------------------------------------------------- printing --

// Precedence levels used for minimal re-parseable parenthesisation.
const PREC_ADD: u8 = 1;
const PREC_MUL: u8 = 2;
const PREC_POW: u8 = 3;
const PREC_UNARY: u8 = 4;
const PREC_ATOM: u8 = 5;

pub struct ExprDisplay<'a> {
    pub expr: &'a Expr,
    pub vars: &'a [&'a str],
}

impl fmt::Display for ExprDisplay<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write_expr(f, self.expr, self.vars, 0)
    }
}

fn prec_of(e: &Expr) -> u8 {
    match e {
        Expr::Const(c) if *c < 0.0 => PREC_UNARY, // prints with a leading '-'
        Expr::Const(_) | Expr::Var(_) | Expr::Delayed { .. } | Expr::Call(..) => PREC_ATOM,
        Expr::Neg(_) => PREC_UNARY,
        Expr::Bin(BinOp::Pow, ..) => PREC_POW,
        Expr::Bin(BinOp::Mul | BinOp::Div, ..) => PREC_MUL,
        Expr::Bin(BinOp::Add | BinOp::Sub, ..) => PREC_ADD,
    }
}

fn write_expr(
    f: &mut fmt::Formatter<'_>,
    e: &Expr,
    vars: &[&str],
    min_prec: u8,
) -> fmt::Result {
    let prec = prec_of(e);
    let parens = prec < min_prec;
    if parens {
        write!(f, "(")?;
    }
    match e {
        Expr::Const(c) => write!(f, "{c}")?,
        Expr::Var(i) => write!(f, "{}", vars.get(*i).copied().unwrap_or("?"))?,
        Expr::Delayed { comp, delay } => {
            if *delay == 0.0 {
                write!(f, "x[{}](t)", comp + 1)?;
            } else {
                write!(f, "x[{}](t-{delay})", comp + 1)?;
            }
        }
        Expr::Neg(inner) => {
            write!(f, "-")?;
            write_expr(f, inner, vars, PREC_UNARY)?;
        }
        Expr::Bin(op, a, b) => {
            let (sym, lp, rp) = match op {
                // Left-assoc ops reparse correctly if the right child is
                // printed one level tighter; `^` is the mirror image.
                BinOp::Add => ("+", PREC_ADD, PREC_MUL),
                BinOp::Sub => ("-", PREC_ADD, PREC_MUL),
                BinOp::Mul => ("*", PREC_MUL, PREC_POW),
                BinOp::Div => ("/", PREC_MUL, PREC_POW),
                BinOp::Pow => ("^", PREC_UNARY, PREC_POW),
            };
            write_expr(f, a, vars, lp)?;
            write!(f, " {sym} ")?;
            write_expr(f, b, vars, rp)?;
        }
        Expr::Call(func, args) => {
            write!(f, "{}(", func.name())?;
            for (i, a) in args.iter().enumerate() {
                if i > 0 {
                    write!(f, ", ")?;
                }
                write_expr(f, a, vars, 0)?;
            }
            write!(f, ")")?;
        }
    }
    if parens {
        write!(f, ")")?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn scalar_ctx() -> (Vec<&'static str>, BTreeMap<String, f64>) {
        (vec!["x", "k"], BTreeMap::new())
    }

    fn p(src: &str) -> Expr {
        let (vars, params) = scalar_ctx();
        parse(src, &ParseCtx::scalar(&vars, &params)).unwrap()
    }

    fn ev(src: &str, x: f64, k: f64) -> f64 {
        p(src).eval(&[x, k], &NoState).unwrap()
    }

    #[test]
    fn precedence_and_associativity() {
        assert_eq!(ev("1 + 2 * 3", 0.0, 0.0), 7.0);
        assert_eq!(ev("2 ^ 3 ^ 2", 0.0, 0.0), 512.0); // right-assoc
        assert_eq!(ev("-2 ^ 2", 0.0, 0.0), 4.0); // unary minus binds tighter
        assert_eq!(ev("2 ^ -1", 0.0, 0.0), 0.5);
        assert_eq!(ev("10 - 2 - 3", 0.0, 0.0), 5.0); // left-assoc
        assert_eq!(ev("12 / 2 / 3", 0.0, 0.0), 2.0);
        assert_eq!(ev("2 * x ^ 2", 3.0, 0.0), 18.0);
    }

    #[test]
    fn functions_and_params() {
        let vars: Vec<&str> = vec!["x"];
        let mut params = BTreeMap::new();
        params.insert("a".to_string(), 2.5);
        let e = parse("a * sin(x) + pow(x, 2)", &ParseCtx::scalar(&vars, &params)).unwrap();
        let v = e.eval(&[0.5], &NoState).unwrap();
        assert!((v - (2.5 * 0.5f64.sin() + 0.25)).abs() < 1e-15);
    }

    #[test]
    fn reports_position_of_errors() {
        let vars: Vec<&str> = vec!["x"];
        let params = BTreeMap::new();
        let ctx = ParseCtx::scalar(&vars, &params);
        let err = parse("x + foo(x)", &ctx).unwrap_err();
        assert_eq!((err.line, err.col), (1, 5));
        let err = parse("x +\n* 2", &ctx).unwrap_err();
        assert_eq!((err.line, err.col), (2, 1));
        let err = parse("sin(x, 2)", &ctx).unwrap_err();
        assert!(err.message.contains("1 argument"));
        let err = parse("x + $", &ctx).unwrap_err();
        assert!(err.message.contains("unexpected character"));
        let err = parse("(x + 2", &ctx).unwrap_err();
        assert!(err.message.contains("')'"));
    }

    #[test]
    fn state_references() {
        let vars: Vec<&str> = vec!["t"];
        let params = BTreeMap::new();
        let ctx = ParseCtx { vars: &vars, params: &params, state: Some((2, 1.5)) };
        let e = parse("-x[1](t-1) + x[2](t)", &ctx).unwrap();
        let mut refs = Vec::new();
        e.collect_refs(&mut refs);
        assert_eq!(refs, vec![(0, 1.0), (1, 0.0)]);

        let err = parse("x[3](t)", &ctx).unwrap_err();
        assert!(err.message.contains("out of range"));
        let err = parse("x[1](t-2)", &ctx).unwrap_err();
        assert!(err.message.contains("exceeds history length"));
        let err = parse("x[1](s)", &ctx).unwrap_err();
        assert!(err.message.contains("'t'"));
        // Delays must be literals, not expressions.
        let err = parse("x[1](t-(1))", &ctx).unwrap_err();
        assert!(err.message.contains("literal"));
    }

    #[test]
    fn plain_x_hint_in_state_dialect() {
        let vars: Vec<&str> = vec!["t"];
        let params = BTreeMap::new();
        let ctx = ParseCtx { vars: &vars, params: &params, state: Some((1, 1.0)) };
        let err = parse("x + 1", &ctx).unwrap_err();
        assert!(err.message.contains("x[i](t-d)"));
    }

    fn fmt_expr(e: &Expr, vars: &[&str]) -> String {
        format!("{}", ExprDisplay { expr: e, vars })
    }

    #[test]
    fn printing_preserves_structure() {
        let (vars, params) = scalar_ctx();
        let ctx = ParseCtx::scalar(&vars, &params);
        for src in [
            "x + k * 2",
            "(x + k) * 2",
            "-x ^ 2",
            "-(x ^ 2)",
            "x - (k - 1)",
            "x / (k / 2)",
            "2 ^ 3 ^ 2",
            "(2 ^ 3) ^ 2",
            "pow(x, 2) + sin(cos(x))",
            "x * k * x",
            "x * (k * x)",
            "--x",
        ] {
            let t1 = parse(src, &ctx).unwrap();
            let printed = fmt_expr(&t1, &vars);
            let t2 = parse(&printed, &ctx).unwrap();
            assert_eq!(t1, t2, "round trip changed {src:?} -> {printed:?}");
        }
    }

    // Random trees: printing then parsing reproduces the tree, and evaluation
    // agrees. This is the print ∘ parse fixed-point property.
    fn arb_expr() -> impl Strategy<Value = Expr> {
        let leaf = prop_oneof![
            (0.0f64..100.0).prop_map(Expr::Const),
            (0usize..2).prop_map(Expr::Var),
        ];
        leaf.prop_recursive(4, 24, 3, |inner| {
            prop_oneof![
                (inner.clone(), inner.clone(), prop_oneof![
                    Just(BinOp::Add), Just(BinOp::Sub), Just(BinOp::Mul)
                ])
                    .prop_map(|(a, b, op)| Expr::Bin(op, Box::new(a), Box::new(b))),
                inner.clone().prop_map(|e| Expr::Neg(Box::new(e))),
                inner.clone().prop_map(|e| Expr::Call(Func::Sin, vec![e])),
                inner.prop_map(|e| Expr::Call(Func::Abs, vec![e])),
            ]
        })
    }

    proptest! {
        #[test]
        fn print_parse_round_trip(e in arb_expr()) {
            let vars = ["x", "k"];
            let params = BTreeMap::new();
            let ctx = ParseCtx::scalar(&vars, &params);
            let printed = fmt_expr(&e, &vars);
            let back = parse(&printed, &ctx).unwrap();
            prop_assert_eq!(&e, &back, "printed form: {}", printed);
            let v1 = e.eval(&[1.3, -0.7], &NoState);
            let v2 = back.eval(&[1.3, -0.7], &NoState);
            prop_assert_eq!(v1, v2);
        }

        /// Whitespace reformatting never changes evaluation.
        #[test]
        fn eval_invariant_under_reformat(x in -5.0f64..5.0, k in 1.0f64..20.0) {
            let dense = "k*x*exp(-k*x)+x^2/(1+abs(x))";
            let spaced = " k * x * exp( - k * x ) + x ^ 2 / ( 1 + abs( x ) ) ";
            let a = ev(dense, x, k);
            let b = ev(spaced, x, k);
            prop_assert_eq!(a, b);
        }
    }

    #[test]
    fn eval_guards() {
        assert!(matches!(
            ev_err("log(x)", 0.0),
            EvalError::LogDomain(v) if v == 0.0
        ));
        assert!(matches!(ev_err("1 / x", 0.0), EvalError::DivByZero(_)));
        assert!(matches!(ev_err("exp(x)", 1e4), EvalError::NonFinite(_)));
        // A denormal-but-nonzero denominator below 1e-300 is rejected too.
        assert!(matches!(ev_err("1 / x", 1e-310), EvalError::DivByZero(_)));
    }

    fn ev_err(src: &str, x: f64) -> EvalError {
        let vars: Vec<&str> = vec!["x"];
        let params = BTreeMap::new();
        parse(src, &ParseCtx::scalar(&vars, &params))
            .unwrap()
            .eval(&[x], &NoState)
            .unwrap_err()
    }
}
