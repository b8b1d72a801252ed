//! A small expression language over `u1`, `u2` and `t`.
//!
//! Grammar (whitespace-insensitive, byte offsets in errors):
//!
//! ```text
//! expr  := term (('+' | '-') term)*
//! term  := unary (('*' | '/') unary)*
//! unary := '-' unary | power
//! power := atom ('^' unary)?          exponent must fold to an integer
//! atom  := number | 'u1' | 'u2' | 't' | 'pi'
//!        | fname '(' expr ')' | 'pow' '(' expr ',' expr ')' | '(' expr ')'
//! fname := sin | cos | exp | sqrt | abs
//! ```

use std::fmt;

use thiserror::Error;

use crate::jets::{Jet, JetError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Var {
    U1,
    U2,
    T,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Func {
    Sin,
    Cos,
    Exp,
    Sqrt,
    Abs,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BinOp {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Expr {
    Const(f64),
    Var(Var),
    Neg(Box<Expr>),
    Func(Func, Box<Expr>),
    Bin(BinOp, Box<Expr>, Box<Expr>),
    Pow(Box<Expr>, i32),
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ExprError {
    #[error("syntax error at byte {position}: expected {}", expected.join(" or "))]
    Syntax { position: usize, expected: Vec<&'static str> },
    #[error("unknown identifier '{name}' at byte {position}")]
    UnknownIdentifier { name: String, position: usize },
    #[error("exponent at byte {position} is not an integer constant")]
    BadExponent { position: usize },
    #[error("{what} undefined at ({}, {})", point[0], point[1])]
    Domain { what: &'static str, point: [f64; 2] },
    #[error("variable t is not bound in this context")]
    UnboundT,
    #[error("argument of abs changes sign on the domain near ({}, {})", point[0], point[1])]
    AbsSignChange { point: [f64; 2] },
    #[error(transparent)]
    Jet(#[from] JetError),
}

/// Values of the three variables as jets.
#[derive(Debug, Clone, Copy)]
pub struct JetEnv {
    pub u1: Jet,
    pub u2: Jet,
    pub t: Option<Jet>,
}

impl JetEnv {
    pub fn at(point: [f64; 2], order: usize) -> JetEnv {
        JetEnv { u1: Jet::var(point[0], 0, order), u2: Jet::var(point[1], 1, order), t: None }
    }

    fn point(&self) -> [f64; 2] {
        [self.u1.value(), self.u2.value()]
    }
}

pub fn parse(src: &str) -> Result<Expr, ExprError> {
    let mut p = Parser { src: src.as_bytes(), pos: 0 };
    let e = p.expr()?;
    p.skip_ws();
    if p.pos < p.src.len() {
        return Err(ExprError::Syntax { position: p.pos, expected: vec!["operator", "end of input"] });
    }
    Ok(e)
}

struct Parser<'a> {
    src: &'a [u8],
    pos: usize,
}

impl Parser<'_> {
    fn skip_ws(&mut self) {
        while self.pos < self.src.len() && self.src[self.pos].is_ascii_whitespace() {
            self.pos += 1;
        }
    }

    fn peek(&mut self) -> Option<u8> {
        self.skip_ws();
        self.src.get(self.pos).copied()
    }

    fn eat(&mut self, c: u8) -> bool {
        if self.peek() == Some(c) {
            self.pos += 1;
            true
        } else {
            false
        }
    }

    fn expect(&mut self, c: u8, what: &'static str) -> Result<(), ExprError> {
        if self.eat(c) {
            Ok(())
        } else {
            Err(ExprError::Syntax { position: self.pos, expected: vec![what] })
        }
    }

    fn expr(&mut self) -> Result<Expr, ExprError> {
        let mut lhs = self.term()?;
        loop {
            let op = match self.peek() {
                Some(b'+') => BinOp::Add,
                Some(b'-') => BinOp::Sub,
                _ => return Ok(lhs),
            };
            self.pos += 1;
            let rhs = self.term()?;
            lhs = Expr::Bin(op, Box::new(lhs), Box::new(rhs));
        }
    }

    fn term(&mut self) -> Result<Expr, ExprError> {
        let mut lhs = self.unary()?;
        loop {
            let op = match self.peek() {
                Some(b'*') => BinOp::Mul,
                Some(b'/') => BinOp::Div,
                _ => return Ok(lhs),
            };
            self.pos += 1;
            let rhs = self.unary()?;
            lhs = Expr::Bin(op, Box::new(lhs), Box::new(rhs));
        }
    }

    fn unary(&mut self) -> Result<Expr, ExprError> {
        if self.eat(b'-') {
            let literal = matches!(self.peek(), Some(c) if c.is_ascii_digit() || c == b'.');
            return Ok(match self.unary()? {
                Expr::Const(v) if literal => Expr::Const(-v),
                e => Expr::Neg(Box::new(e)),
            });
        }
        self.power()
    }

    fn power(&mut self) -> Result<Expr, ExprError> {
        let base = self.atom()?;
        if self.eat(b'^') {
            self.skip_ws();
            let at = self.pos;
            let exponent = self.unary()?;
            let n = integer_exponent(&exponent).ok_or(ExprError::BadExponent { position: at })?;
            return Ok(Expr::Pow(Box::new(base), n));
        }
        Ok(base)
    }

    fn atom(&mut self) -> Result<Expr, ExprError> {
        const ATOM: &[&str] = &["number", "identifier", "'('"];
        let start = {
            self.skip_ws();
            self.pos
        };
        match self.peek() {
            Some(c) if c.is_ascii_digit() || c == b'.' => self.number(),
            Some(c) if c.is_ascii_alphabetic() => {
                while self.pos < self.src.len() && (self.src[self.pos].is_ascii_alphanumeric() || self.src[self.pos] == b'_') {
                    self.pos += 1;
                }
                let name = std::str::from_utf8(&self.src[start..self.pos]).expect("ascii identifier");
                self.identifier(name, start)
            }
            Some(b'(') => {
                self.pos += 1;
                let e = self.expr()?;
                self.expect(b')', "')'")?;
                Ok(e)
            }
            _ => Err(ExprError::Syntax { position: self.pos, expected: ATOM.to_vec() }),
        }
    }

    fn identifier(&mut self, name: &str, start: usize) -> Result<Expr, ExprError> {
        let func = match name {
            "u1" => return Ok(Expr::Var(Var::U1)),
            "u2" => return Ok(Expr::Var(Var::U2)),
            "t" => return Ok(Expr::Var(Var::T)),
            "pi" => return Ok(Expr::Const(std::f64::consts::PI)),
            "sin" => Func::Sin,
            "cos" => Func::Cos,
            "exp" => Func::Exp,
            "sqrt" => Func::Sqrt,
            "abs" => Func::Abs,
            "pow" => {
                self.expect(b'(', "'('")?;
                let base = self.expr()?;
                self.expect(b',', "','")?;
                self.skip_ws();
                let at = self.pos;
                let exponent = self.expr()?;
                self.expect(b')', "')'")?;
                let n = integer_exponent(&exponent).ok_or(ExprError::BadExponent { position: at })?;
                return Ok(Expr::Pow(Box::new(base), n));
            }
            _ => return Err(ExprError::UnknownIdentifier { name: name.to_string(), position: start }),
        };
        self.expect(b'(', "'('")?;
        let arg = self.expr()?;
        self.expect(b')', "')'")?;
        Ok(Expr::Func(func, Box::new(arg)))
    }

    fn number(&mut self) -> Result<Expr, ExprError> {
        let start = self.pos;
        let s = self.src;
        let digits = |p: &mut usize| {
            while *p < s.len() && s[*p].is_ascii_digit() {
                *p += 1;
            }
        };
        let mut p = self.pos;
        digits(&mut p);
        if p < s.len() && s[p] == b'.' {
            p += 1;
            digits(&mut p);
        }
        if p < s.len() && (s[p] == b'e' || s[p] == b'E') {
            let mut q = p + 1;
            if q < s.len() && (s[q] == b'+' || s[q] == b'-') {
                q += 1;
            }
            if q < s.len() && s[q].is_ascii_digit() {
                digits(&mut q);
                p = q;
            }
        }
        let text = std::str::from_utf8(&s[start..p]).expect("ascii number");
        let v: f64 = text.parse().map_err(|_| ExprError::Syntax { position: start, expected: vec!["number"] })?;
        self.pos = p;
        Ok(Expr::Const(v))
    }
}

fn integer_exponent(e: &Expr) -> Option<i32> {
    let v = e.constant_value()?;
    (v.fract() == 0.0 && v.abs() <= 64.0).then_some(v as i32)
}

fn bin(op: BinOp, a: Expr, b: Expr) -> Expr {
    Expr::Bin(op, Box::new(a), Box::new(b))
}

fn add(a: Expr, b: Expr) -> Expr {
    match (&a, &b) {
        (Expr::Const(x), _) if *x == 0.0 => b,
        (_, Expr::Const(y)) if *y == 0.0 => a,
        _ => bin(BinOp::Add, a, b),
    }
}

fn sub(a: Expr, b: Expr) -> Expr {
    match (&a, &b) {
        (_, Expr::Const(y)) if *y == 0.0 => a,
        (Expr::Const(x), _) if *x == 0.0 => Expr::Neg(Box::new(b)),
        _ => bin(BinOp::Sub, a, b),
    }
}

fn mul(a: Expr, b: Expr) -> Expr {
    match (&a, &b) {
        (Expr::Const(x), _) | (_, Expr::Const(x)) if *x == 0.0 => Expr::Const(0.0),
        (Expr::Const(x), _) if *x == 1.0 => b,
        (_, Expr::Const(y)) if *y == 1.0 => a,
        _ => bin(BinOp::Mul, a, b),
    }
}

impl Expr {
    /// Value of a variable-free expression.
    pub fn constant_value(&self) -> Option<f64> {
        Some(match self {
            Expr::Const(v) => *v,
            Expr::Var(_) => return None,
            Expr::Neg(a) => -a.constant_value()?,
            Expr::Func(f, a) => {
                let x = a.constant_value()?;
                match f {
                    Func::Sin => x.sin(),
                    Func::Cos => x.cos(),
                    Func::Exp => x.exp(),
                    Func::Sqrt => x.sqrt(),
                    Func::Abs => x.abs(),
                }
            }
            Expr::Bin(op, a, b) => {
                let (x, y) = (a.constant_value()?, b.constant_value()?);
                match op {
                    BinOp::Add => x + y,
                    BinOp::Sub => x - y,
                    BinOp::Mul => x * y,
                    BinOp::Div => x / y,
                }
            }
            Expr::Pow(a, n) => a.constant_value()?.powi(*n),
        })
    }

    pub fn uses(&self, v: Var) -> bool {
        match self {
            Expr::Const(_) => false,
            Expr::Var(w) => *w == v,
            Expr::Neg(a) | Expr::Func(_, a) | Expr::Pow(a, _) => a.uses(v),
            Expr::Bin(_, a, b) => a.uses(v) || b.uses(v),
        }
    }

    /// Symbolic partial derivative with light constant folding.
    pub fn derivative(&self, v: Var) -> Expr {
        match self {
            Expr::Const(_) => Expr::Const(0.0),
            Expr::Var(w) => Expr::Const(if *w == v { 1.0 } else { 0.0 }),
            Expr::Neg(a) => match a.derivative(v) {
                Expr::Const(0.0) => Expr::Const(0.0),
                d => Expr::Neg(Box::new(d)),
            },
            Expr::Bin(op, a, b) => {
                let (da, db) = (a.derivative(v), b.derivative(v));
                match op {
                    BinOp::Add => add(da, db),
                    BinOp::Sub => sub(da, db),
                    BinOp::Mul => add(mul(da, (**b).clone()), mul((**a).clone(), db)),
                    BinOp::Div => {
                        let num = sub(mul(da, (**b).clone()), mul((**a).clone(), db));
                        match num {
                            Expr::Const(0.0) => Expr::Const(0.0),
                            num => bin(BinOp::Div, num, Expr::Pow(b.clone(), 2)),
                        }
                    }
                }
            }
            Expr::Pow(a, n) => {
                let inner = match n - 1 {
                    0 => Expr::Const(1.0),
                    1 => (**a).clone(),
                    m => Expr::Pow(a.clone(), m),
                };
                mul(mul(Expr::Const(*n as f64), inner), a.derivative(v))
            }
            Expr::Func(f, a) => {
                let da = a.derivative(v);
                let arg = (**a).clone();
                let outer = match f {
                    Func::Sin => Expr::Func(Func::Cos, Box::new(arg)),
                    Func::Cos => Expr::Neg(Box::new(Expr::Func(Func::Sin, Box::new(arg)))),
                    Func::Exp => self.clone(),
                    Func::Sqrt => bin(BinOp::Div, Expr::Const(0.5), self.clone()),
                    Func::Abs => bin(BinOp::Div, self.clone(), arg),
                };
                mul(outer, da)
            }
        }
    }

    pub fn eval_jets(&self, env: &JetEnv) -> Result<Jet, ExprError> {
        let order = env.u1.order().min(env.u2.order());
        let dom = |what| ExprError::Domain { what, point: env.point() };
        Ok(match self {
            Expr::Const(v) => Jet::constant(*v, order),
            Expr::Var(Var::U1) => env.u1,
            Expr::Var(Var::U2) => env.u2,
            Expr::Var(Var::T) => env.t.ok_or(ExprError::UnboundT)?,
            Expr::Neg(a) => -a.eval_jets(env)?,
            Expr::Bin(op, a, b) => {
                let (x, y) = (a.eval_jets(env)?, b.eval_jets(env)?);
                match op {
                    BinOp::Add => x + y,
                    BinOp::Sub => x - y,
                    BinOp::Mul => x * y,
                    BinOp::Div => x.try_div(&y).map_err(|_| dom("division"))?,
                }
            }
            Expr::Pow(a, n) => a.eval_jets(env)?.powi(*n).map_err(|_| dom("negative power"))?,
            Expr::Func(f, a) => {
                let x = a.eval_jets(env)?;
                match f {
                    Func::Sin => x.sin(),
                    Func::Cos => x.cos(),
                    Func::Exp => x.exp(),
                    Func::Sqrt => x.try_sqrt().map_err(|_| dom("sqrt"))?,
                    Func::Abs => x.try_abs().map_err(|_| dom("abs"))?,
                }
            }
        })
    }

    /// Jet of the expression in `(u1, u2)` at `point`.
    pub fn eval_jet(&self, point: [f64; 2], order: usize) -> Result<Jet, ExprError> {
        self.eval_jets(&JetEnv::at(point, order))
    }

    /// Plain floating-point evaluation; `t` may be `None` when unused.
    pub fn eval(&self, u1: f64, u2: f64, t: Option<f64>) -> Result<f64, ExprError> {
        let dom = |what| ExprError::Domain { what, point: [u1, u2] };
        let v = match self {
            Expr::Const(v) => *v,
            Expr::Var(Var::U1) => u1,
            Expr::Var(Var::U2) => u2,
            Expr::Var(Var::T) => t.ok_or(ExprError::UnboundT)?,
            Expr::Neg(a) => -a.eval(u1, u2, t)?,
            Expr::Bin(op, a, b) => {
                let (x, y) = (a.eval(u1, u2, t)?, b.eval(u1, u2, t)?);
                match op {
                    BinOp::Add => x + y,
                    BinOp::Sub => x - y,
                    BinOp::Mul => x * y,
                    BinOp::Div => {
                        if y == 0.0 {
                            return Err(dom("division"));
                        }
                        x / y
                    }
                }
            }
            Expr::Pow(a, n) => {
                let x = a.eval(u1, u2, t)?;
                if x == 0.0 && *n < 0 {
                    return Err(dom("negative power"));
                }
                x.powi(*n)
            }
            Expr::Func(f, a) => {
                let x = a.eval(u1, u2, t)?;
                match f {
                    Func::Sin => x.sin(),
                    Func::Cos => x.cos(),
                    Func::Exp => x.exp(),
                    Func::Sqrt if x < 0.0 => return Err(dom("sqrt")),
                    Func::Sqrt => x.sqrt(),
                    Func::Abs => x.abs(),
                }
            }
        };
        Ok(v)
    }

    /// Rejects `abs(g)` where `g` takes both signs on a 16×16 grid over the rectangle.
    pub fn check_abs_sign(&self, u1: (f64, f64), u2: (f64, f64)) -> Result<(), ExprError> {
        match self {
            Expr::Const(_) | Expr::Var(_) => Ok(()),
            Expr::Neg(a) | Expr::Pow(a, _) => a.check_abs_sign(u1, u2),
            Expr::Bin(_, a, b) => {
                a.check_abs_sign(u1, u2)?;
                b.check_abs_sign(u1, u2)
            }
            Expr::Func(f, a) => {
                a.check_abs_sign(u1, u2)?;
                if *f != Func::Abs {
                    return Ok(());
                }
                let (mut pos, mut neg) = (None, None);
                for i in 0..16 {
                    for j in 0..16 {
                        let p = [
                            u1.0 + (u1.1 - u1.0) * i as f64 / 15.0,
                            u2.0 + (u2.1 - u2.0) * j as f64 / 15.0,
                        ];
                        match a.eval(p[0], p[1], Some(p[0])) {
                            Ok(v) if v > 0.0 => pos = Some(p),
                            Ok(v) if v < 0.0 => neg = Some(p),
                            _ => {}
                        }
                    }
                }
                match (pos, neg) {
                    (Some(_), Some(p)) => Err(ExprError::AbsSignChange { point: p }),
                    _ => Ok(()),
                }
            }
        }
    }
}

fn func_name(f: Func) -> &'static str {
    match f {
        Func::Sin => "sin",
        Func::Cos => "cos",
        Func::Exp => "exp",
        Func::Sqrt => "sqrt",
        Func::Abs => "abs",
    }
}

impl fmt::Display for Expr {
    /// Fully parenthesised; parsing the output reproduces the tree.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Expr::Const(v) if *v < 0.0 => write!(f, "({v:?})"),
            Expr::Const(v) => write!(f, "{v:?}"),
            Expr::Var(Var::U1) => write!(f, "u1"),
            Expr::Var(Var::U2) => write!(f, "u2"),
            Expr::Var(Var::T) => write!(f, "t"),
            Expr::Neg(a) if matches!(**a, Expr::Const(_)) => write!(f, "(-({a}))"),
            Expr::Neg(a) => write!(f, "(-{a})"),
            Expr::Func(g, a) => write!(f, "{}({a})", func_name(*g)),
            Expr::Bin(op, a, b) => {
                let s = match op {
                    BinOp::Add => "+",
                    BinOp::Sub => "-",
                    BinOp::Mul => "*",
                    BinOp::Div => "/",
                };
                write!(f, "({a} {s} {b})")
            }
            Expr::Pow(a, n) if *n < 0 => write!(f, "({a})^({n})"),
            Expr::Pow(a, n) => write!(f, "({a})^{n}"),
        }
    }
}
