//! Expressions for generators `g(t, y, z)`, constraints `phi(t, y, z)` and rewards
//! `f(t, w)`.
//!
//! Grammar (whitespace is insignificant):
//!
//! ```text
//! expr    := term (('+' | '-') term)*
//! term    := unary (('*' | '/') unary)*
//! unary   := '-' unary | primary
//! primary := number | variable | func '(' expr (',' expr)* ')' | '(' expr ')'
//! func    := abs | max | min | pos | neg | exp | sqrt
//! ```
//!
//! Variables are `t, y, z` for generators and constraints and `t, w` for rewards.
//! `pos(e) = max(e, 0)` and `neg(e) = max(-e, 0)`. Division by zero and any
//! non-finite intermediate result are evaluation errors.

use alloc::boxed::Box;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;

use crate::Error;

const MAX_DEPTH: usize = 200;

/// Which variables an expression may reference.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Signature {
    /// Generator or constraint over `(t, y, z)`.
    Driver,
    /// Reward or terminal condition over `(t, w)`.
    Reward,
}

impl fmt::Display for Signature {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Signature::Driver => f.write_str("(t, y, z)"),
            Signature::Reward => f.write_str("(t, w)"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Var {
    T,
    Y,
    Z,
    W,
}

impl Var {
    fn name(self) -> &'static str {
        match self {
            Var::T => "t",
            Var::Y => "y",
            Var::Z => "z",
            Var::W => "w",
        }
    }

    fn allowed_in(self, sig: Signature) -> bool {
        match (self, sig) {
            (Var::T, _) => true,
            (Var::Y | Var::Z, Signature::Driver) => true,
            (Var::W, Signature::Reward) => true,
            _ => false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum BinOp {
    Add,
    Sub,
    Mul,
    Div,
}

impl BinOp {
    fn symbol(self) -> char {
        match self {
            BinOp::Add => '+',
            BinOp::Sub => '-',
            BinOp::Mul => '*',
            BinOp::Div => '/',
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Func {
    Abs,
    Max,
    Min,
    Pos,
    Neg,
    Exp,
    Sqrt,
}

impl Func {
    fn lookup(name: &str) -> Option<Func> {
        Some(match name {
            "abs" => Func::Abs,
            "max" => Func::Max,
            "min" => Func::Min,
            "pos" => Func::Pos,
            "neg" => Func::Neg,
            "exp" => Func::Exp,
            "sqrt" => Func::Sqrt,
            _ => return None,
        })
    }

    fn name(self) -> &'static str {
        match self {
            Func::Abs => "abs",
            Func::Max => "max",
            Func::Min => "min",
            Func::Pos => "pos",
            Func::Neg => "neg",
            Func::Exp => "exp",
            Func::Sqrt => "sqrt",
        }
    }

    fn arity(self) -> usize {
        match self {
            Func::Max | Func::Min => 2,
            _ => 1,
        }
    }
}

/// Parsed expression tree.
#[derive(Debug, Clone, PartialEq)]
pub enum Expr {
    Num(f64),
    Var(Var),
    Neg(Box<Expr>),
    Bin(BinOp, Box<Expr>, Box<Expr>),
    Call(Func, Vec<Expr>),
}

impl Expr {
    pub fn references(&self, var: Var) -> bool {
        match self {
            Expr::Num(_) => false,
            Expr::Var(v) => *v == var,
            Expr::Neg(e) => e.references(var),
            Expr::Bin(_, a, b) => a.references(var) || b.references(var),
            Expr::Call(_, args) => args.iter().any(|a| a.references(var)),
        }
    }

    /// Evaluates with `a` bound to `y` (or `w`) and `b` bound to `z`.
    fn eval(&self, t: f64, a: f64, b: f64) -> Result<f64, EvalError> {
        Ok(match self {
            Expr::Num(v) => *v,
            Expr::Var(Var::T) => t,
            Expr::Var(Var::Y | Var::W) => a,
            Expr::Var(Var::Z) => b,
            Expr::Neg(e) => -e.eval(t, a, b)?,
            Expr::Bin(op, l, r) => {
                let l = l.eval(t, a, b)?;
                let r = r.eval(t, a, b)?;
                match op {
                    BinOp::Add => l + r,
                    BinOp::Sub => l - r,
                    BinOp::Mul => l * r,
                    BinOp::Div => {
                        if r == 0.0 {
                            return Err(EvalError::DivisionByZero);
                        }
                        l / r
                    }
                }
            }
            Expr::Call(func, args) => {
                let x = args[0].eval(t, a, b)?;
                match func {
                    Func::Abs => libm::fabs(x),
                    Func::Max => x.max(args[1].eval(t, a, b)?),
                    Func::Min => x.min(args[1].eval(t, a, b)?),
                    Func::Pos => x.max(0.0),
                    Func::Neg => (-x).max(0.0),
                    Func::Exp => libm::exp(x),
                    Func::Sqrt => libm::sqrt(x),
                }
            }
        })
    }
}

/// Canonical form: every binary operation parenthesized, negative literals as `(-x)`.
impl fmt::Display for Expr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Expr::Num(v) if v.is_sign_negative() => write!(f, "(-{})", -v),
            Expr::Num(v) => write!(f, "{v}"),
            Expr::Var(v) => f.write_str(v.name()),
            Expr::Neg(e) => write!(f, "(-{e})"),
            Expr::Bin(op, l, r) => write!(f, "({l} {} {r})", op.symbol()),
            Expr::Call(func, args) => {
                write!(f, "{}(", func.name())?;
                for (i, a) in args.iter().enumerate() {
                    if i > 0 {
                        f.write_str(", ")?;
                    }
                    write!(f, "{a}")?;
                }
                f.write_str(")")
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ParseError {
    #[error("syntax error at offset {offset}: {message}")]
    Syntax { offset: usize, message: String },
    #[error("unknown identifier `{name}` at offset {offset}")]
    UnknownIdentifier { name: String, offset: usize },
    #[error("variable `{name}` at offset {offset} is not allowed in a function of {signature}")]
    SignatureMismatch {
        name: String,
        offset: usize,
        signature: Signature,
    },
}

impl ParseError {
    pub fn offset(&self) -> usize {
        match self {
            ParseError::Syntax { offset, .. }
            | ParseError::UnknownIdentifier { offset, .. }
            | ParseError::SignatureMismatch { offset, .. } => *offset,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, thiserror::Error)]
pub enum EvalError {
    #[error("division by zero")]
    DivisionByZero,
    #[error("non-finite result")]
    NonFinite,
    #[error("environment does not match the function signature")]
    WrongEnvironment,
}

#[derive(Debug, Clone, PartialEq)]
enum Tok {
    Num(f64),
    Ident(String),
    Sym(char),
    End,
}

struct Parser<'a> {
    src: &'a str,
    pos: usize,
    tok: Tok,
    tok_start: usize,
    sig: Signature,
    depth: usize,
}

impl<'a> Parser<'a> {
    fn new(src: &'a str, sig: Signature) -> Result<Self, ParseError> {
        let mut p = Parser {
            src,
            pos: 0,
            tok: Tok::End,
            tok_start: 0,
            sig,
            depth: 0,
        };
        p.advance()?;
        Ok(p)
    }

    fn syntax(&self, offset: usize, message: impl Into<String>) -> ParseError {
        ParseError::Syntax {
            offset,
            message: message.into(),
        }
    }

    fn advance(&mut self) -> Result<(), ParseError> {
        let bytes = self.src.as_bytes();
        while self.pos < bytes.len() && bytes[self.pos].is_ascii_whitespace() {
            self.pos += 1;
        }
        self.tok_start = self.pos;
        let Some(&c) = bytes.get(self.pos) else {
            self.tok = Tok::End;
            return Ok(());
        };
        if c.is_ascii_digit() || c == b'.' {
            let start = self.pos;
            while self.pos < bytes.len() && (bytes[self.pos].is_ascii_digit() || bytes[self.pos] == b'.') {
                self.pos += 1;
            }
            if self.pos < bytes.len() && (bytes[self.pos] == b'e' || bytes[self.pos] == b'E') {
                let mut q = self.pos + 1;
                if q < bytes.len() && (bytes[q] == b'+' || bytes[q] == b'-') {
                    q += 1;
                }
                if q < bytes.len() && bytes[q].is_ascii_digit() {
                    while q < bytes.len() && bytes[q].is_ascii_digit() {
                        q += 1;
                    }
                    self.pos = q;
                }
            }
            let text = &self.src[start..self.pos];
            let value: f64 = text
                .parse()
                .map_err(|_| self.syntax(start, format!("malformed number `{text}`")))?;
            if !value.is_finite() {
                return Err(self.syntax(start, format!("number `{text}` is out of range")));
            }
            self.tok = Tok::Num(value);
        } else if c.is_ascii_alphabetic() || c == b'_' {
            let start = self.pos;
            while self.pos < bytes.len() && (bytes[self.pos].is_ascii_alphanumeric() || bytes[self.pos] == b'_') {
                self.pos += 1;
            }
            self.tok = Tok::Ident(self.src[start..self.pos].to_string());
        } else if b"+-*/(),".contains(&c) {
            self.pos += 1;
            self.tok = Tok::Sym(c as char);
        } else {
            let ch = self.src[self.pos..].chars().next().unwrap_or('?');
            return Err(self.syntax(self.pos, format!("unexpected character `{ch}`")));
        }
        Ok(())
    }

    fn describe(&self) -> String {
        match &self.tok {
            Tok::Num(v) => format!("number {v}"),
            Tok::Ident(s) => format!("`{s}`"),
            Tok::Sym(c) => format!("`{c}`"),
            Tok::End => "end of input".to_string(),
        }
    }

    fn expect(&mut self, sym: char) -> Result<(), ParseError> {
        if self.tok == Tok::Sym(sym) {
            self.advance()
        } else {
            Err(self.syntax(self.tok_start, format!("expected `{sym}`, found {}", self.describe())))
        }
    }

    fn parse_all(&mut self) -> Result<Expr, ParseError> {
        let e = self.expr()?;
        if self.tok != Tok::End {
            return Err(self.syntax(self.tok_start, format!("unexpected {}", self.describe())));
        }
        Ok(e)
    }

    fn enter(&mut self) -> Result<(), ParseError> {
        self.depth += 1;
        if self.depth > MAX_DEPTH {
            return Err(self.syntax(self.tok_start, "expression nested too deeply"));
        }
        Ok(())
    }

    fn expr(&mut self) -> Result<Expr, ParseError> {
        self.enter()?;
        let mut lhs = self.term()?;
        loop {
            let op = match self.tok {
                Tok::Sym('+') => BinOp::Add,
                Tok::Sym('-') => BinOp::Sub,
                _ => break,
            };
            self.advance()?;
            let rhs = self.term()?;
            lhs = Expr::Bin(op, Box::new(lhs), Box::new(rhs));
        }
        self.depth -= 1;
        Ok(lhs)
    }

    fn term(&mut self) -> Result<Expr, ParseError> {
        let mut lhs = self.unary()?;
        loop {
            let op = match self.tok {
                Tok::Sym('*') => BinOp::Mul,
                Tok::Sym('/') => BinOp::Div,
                _ => break,
            };
            self.advance()?;
            let rhs = self.unary()?;
            lhs = Expr::Bin(op, Box::new(lhs), Box::new(rhs));
        }
        Ok(lhs)
    }

    fn unary(&mut self) -> Result<Expr, ParseError> {
        if self.tok == Tok::Sym('-') {
            self.enter()?;
            self.advance()?;
            let inner = self.unary()?;
            self.depth -= 1;
            // Literals are folded so that printing and re-parsing is a fixpoint.
            return Ok(match inner {
                Expr::Num(v) => Expr::Num(-v),
                other => Expr::Neg(Box::new(other)),
            });
        }
        self.primary()
    }

    fn primary(&mut self) -> Result<Expr, ParseError> {
        let start = self.tok_start;
        match self.tok.clone() {
            Tok::Num(v) => {
                self.advance()?;
                Ok(Expr::Num(v))
            }
            Tok::Sym('(') => {
                self.advance()?;
                let e = self.expr()?;
                self.expect(')')?;
                Ok(e)
            }
            Tok::Ident(name) => {
                self.advance()?;
                if let Some(func) = Func::lookup(&name) {
                    if self.tok != Tok::Sym('(') {
                        return Err(self.syntax(self.tok_start, format!("expected `(` after `{name}`")));
                    }
                    self.advance()?;
                    let mut args = vec![self.expr()?];
                    while self.tok == Tok::Sym(',') {
                        if args.len() == func.arity() {
                            return Err(self.syntax(
                                self.tok_start,
                                format!("`{name}` takes {} argument(s)", func.arity()),
                            ));
                        }
                        self.advance()?;
                        args.push(self.expr()?);
                    }
                    if args.len() != func.arity() {
                        return Err(self.syntax(
                            self.tok_start,
                            format!("`{name}` takes {} argument(s)", func.arity()),
                        ));
                    }
                    self.expect(')')?;
                    return Ok(Expr::Call(func, args));
                }
                let var = match name.as_str() {
                    "t" => Var::T,
                    "y" => Var::Y,
                    "z" => Var::Z,
                    "w" => Var::W,
                    _ => return Err(ParseError::UnknownIdentifier { name, offset: start }),
                };
                if !var.allowed_in(self.sig) {
                    return Err(ParseError::SignatureMismatch {
                        name,
                        offset: start,
                        signature: self.sig,
                    });
                }
                Ok(Expr::Var(var))
            }
            _ => Err(self.syntax(start, format!("unexpected {}", self.describe()))),
        }
    }
}

/// Parses `text` as an expression over the variables allowed by `sig`.
pub fn parse_expr(text: &str, sig: Signature) -> Result<Expr, ParseError> {
    Parser::new(text, sig)?.parse_all()
}

/// Lipschitz constants in `y` and `z` separately.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Lipschitz {
    pub y: f64,
    pub z: f64,
}

impl Lipschitz {
    /// The single constant `M` of a joint Lipschitz bound.
    pub fn max(&self) -> f64 {
        self.y.max(self.z)
    }
}

/// Evaluation environment.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Env {
    Driver { t: f64, y: f64, z: f64 },
    Reward { t: f64, w: f64 },
}

/// A parsed generator, constraint or reward together with its structural metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct FunctionSpec {
    source: String,
    expr: Expr,
    signature: Signature,
    lipschitz: Option<Lipschitz>,
    convex: Option<bool>,
}

impl FunctionSpec {
    pub fn parse(text: &str, signature: Signature) -> Result<Self, ParseError> {
        let expr = parse_expr(text, signature)?;
        Ok(FunctionSpec {
            source: text.to_string(),
            expr,
            signature,
            lipschitz: None,
            convex: None,
        })
    }

    pub fn driver(text: &str) -> Result<Self, ParseError> {
        Self::parse(text, Signature::Driver)
    }

    pub fn reward(text: &str) -> Result<Self, ParseError> {
        Self::parse(text, Signature::Reward)
    }

    pub(crate) fn from_expr(expr: Expr, signature: Signature) -> Self {
        FunctionSpec {
            source: expr.to_string(),
            expr,
            signature,
            lipschitz: None,
            convex: None,
        }
    }

    /// Attaches a declared Lipschitz bound, which takes precedence over grid estimates.
    pub fn with_lipschitz(mut self, lipschitz: Lipschitz) -> Self {
        self.lipschitz = Some(lipschitz);
        self
    }

    pub fn with_convexity(mut self, convex: bool) -> Self {
        self.convex = Some(convex);
        self
    }

    pub fn source(&self) -> &str {
        &self.source
    }

    pub fn expr(&self) -> &Expr {
        &self.expr
    }

    pub fn signature(&self) -> Signature {
        self.signature
    }

    pub fn declared_lipschitz(&self) -> Option<Lipschitz> {
        self.lipschitz
    }

    pub fn declared_convex(&self) -> Option<bool> {
        self.convex
    }

    /// Canonical printed form; parsing it again yields the same tree.
    pub fn canonical(&self) -> String {
        self.expr.to_string()
    }

    pub fn references(&self, var: Var) -> bool {
        self.expr.references(var)
    }

    /// True when the expression does not depend on `y`.
    pub fn is_z_only(&self) -> bool {
        !self.expr.references(Var::Y)
    }

    /// True when the expression is the literal constant zero.
    pub fn is_zero(&self) -> bool {
        matches!(self.expr, Expr::Num(v) if v == 0.0)
    }

    pub fn evaluate(&self, env: Env) -> Result<f64, EvalError> {
        match (env, self.signature) {
            (Env::Driver { t, y, z }, Signature::Driver) => self.eval_driver(t, y, z),
            (Env::Reward { t, w }, Signature::Reward) => self.eval_reward(t, w),
            _ => Err(EvalError::WrongEnvironment),
        }
    }

    #[inline]
    pub fn eval_driver(&self, t: f64, y: f64, z: f64) -> Result<f64, EvalError> {
        finite(self.expr.eval(t, y, z)?)
    }

    #[inline]
    pub fn eval_reward(&self, t: f64, w: f64) -> Result<f64, EvalError> {
        finite(self.expr.eval(t, w, 0.0)?)
    }

    /// Declared Lipschitz constants, or the estimate from the default probe grid.
    pub fn lipschitz_on(&self, horizon: f64) -> Result<Lipschitz, Error> {
        match self.lipschitz {
            Some(l) => Ok(l),
            None => Ok(check_structure(self, &ProbeGrid::default_for(horizon))?.lipschitz),
        }
    }
}

#[inline]
fn finite(v: f64) -> Result<f64, EvalError> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(EvalError::NonFinite)
    }
}

/// Probe grid for [`check_structure`]: a uniform grid on a `(y, z)` box at a few times.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbeGrid {
    pub y_range: (f64, f64),
    pub z_range: (f64, f64),
    pub points: usize,
    pub times: Vec<f64>,
}

impl ProbeGrid {
    pub const DEFAULT_POINTS: usize = 33;
    pub const DEFAULT_HALF_WIDTH: f64 = 5.0;

    /// 33 points per axis on `y, z in [-5, 5]`, `t in {0, T/2, T}`.
    pub fn default_for(horizon: f64) -> Self {
        let h = Self::DEFAULT_HALF_WIDTH;
        ProbeGrid {
            y_range: (-h, h),
            z_range: (-h, h),
            points: Self::DEFAULT_POINTS,
            times: vec![0.0, horizon / 2.0, horizon],
        }
    }

    pub(crate) fn axis(range: (f64, f64), points: usize) -> Vec<f64> {
        let step = (range.1 - range.0) / (points - 1) as f64;
        (0..points).map(|i| range.0 + step * i as f64).collect()
    }
}

/// Outcome of the numerical assumption screen.
#[derive(Debug, Clone, PartialEq)]
pub struct StructureReport {
    pub grid: ProbeGrid,
    /// Largest finite-difference slope between axis neighbours.
    pub lipschitz: Lipschitz,
    /// `max |f(t, y, 0)|` over the grid.
    pub zero_slice_max: f64,
    /// `f(t, y, 0) = 0` within 1e-12 everywhere on the grid.
    pub a3_holds: bool,
    pub convexity_checks: usize,
    pub convexity_violations: usize,
    /// Smallest `L0 >= 0` with `f(t, y, 0) <= L0 + M|y|` for grid `y >= L0`.
    pub eq24_l0: f64,
    pub eq24_holds: bool,
}

impl StructureReport {
    pub fn lipschitz_estimate(&self) -> f64 {
        self.lipschitz.max()
    }

    pub fn convex(&self) -> bool {
        self.convexity_violations == 0
    }
}

pub const STRUCTURE_TOLERANCE: f64 = 1e-12;

/// Screens a function for Lipschitz continuity, the zero-slice condition, convexity
/// and the linear growth bound on a probe grid. This is a screen, not a certificate.
pub fn check_structure(f: &FunctionSpec, grid: &ProbeGrid) -> Result<StructureReport, Error> {
    if grid.points < 3 {
        return Err(Error::Config(format!(
            "probe grid needs at least 3 points per axis, got {}",
            grid.points
        )));
    }
    if !(grid.y_range.0 < grid.y_range.1) || !(grid.z_range.0 < grid.z_range.1) || grid.times.is_empty() {
        return Err(Error::Config("probe box is empty".to_string()));
    }
    let n = grid.points;
    let ys = ProbeGrid::axis(grid.y_range, n);
    let zs = match f.signature {
        Signature::Driver => ProbeGrid::axis(grid.z_range, n),
        // Rewards have one spatial argument; a single z column keeps the loops uniform.
        Signature::Reward => vec![0.0],
    };
    let eval = |t: f64, y: f64, z: f64| {
        f.expr
            .eval(t, y, z)
            .and_then(finite)
            .map_err(|source| Error::Probe { t, y, z, source })
    };

    let mut lip = Lipschitz::default();
    let mut zero_slice_max: f64 = 0.0;
    let mut checks = 0usize;
    let mut violations = 0usize;
    let mut growth: Vec<(f64, f64)> = Vec::with_capacity(n);
    let nz = zs.len();
    let mut table = vec![0.0; n * nz];
    let dy = ys[1] - ys[0];
    let dz = if nz > 1 { zs[1] - zs[0] } else { 1.0 };

    for &t in &grid.times {
        for (i, &y) in ys.iter().enumerate() {
            for (j, &z) in zs.iter().enumerate() {
                table[i * nz + j] = eval(t, y, z)?;
            }
        }
        let at = |i: usize, j: usize| table[i * nz + j];
        for i in 0..n {
            for j in 0..nz {
                if i + 1 < n {
                    lip.y = lip.y.max(libm::fabs(at(i + 1, j) - at(i, j)) / dy);
                }
                if j + 1 < nz {
                    lip.z = lip.z.max(libm::fabs(at(i, j + 1) - at(i, j)) / dz);
                }
            }
        }
        // Midpoint convexity along both axes and both diagonals.
        let dirs: [(isize, isize); 4] = [(1, 0), (0, 1), (1, 1), (1, -1)];
        for i in 0..n as isize {
            for j in 0..nz as isize {
                for (di, dj) in dirs {
                    let mut s = 1isize;
                    loop {
                        let (ai, aj, bi, bj) = (i - s * di, j - s * dj, i + s * di, j + s * dj);
                        let inside = |p: isize, q: isize| p >= 0 && q >= 0 && p < n as isize && q < nz as isize;
                        if !inside(ai, aj) || !inside(bi, bj) {
                            break;
                        }
                        checks += 1;
                        let mid = at(i as usize, j as usize);
                        let chord = 0.5 * (at(ai as usize, aj as usize) + at(bi as usize, bj as usize));
                        if mid > chord + STRUCTURE_TOLERANCE {
                            violations += 1;
                        }
                        s += 1;
                    }
                }
            }
        }
        for (i, &y) in ys.iter().enumerate() {
            let v = eval(t, y, 0.0)?;
            zero_slice_max = zero_slice_max.max(libm::fabs(v));
            match growth.get_mut(i) {
                Some(g) => g.1 = g.1.max(v),
                None => growth.push((y, v)),
            }
        }
    }

    let m = lip.max();
    let (eq24_l0, eq24_holds) = growth_constant(&growth, m, grid.y_range.1);
    Ok(StructureReport {
        grid: grid.clone(),
        lipschitz: lip,
        zero_slice_max,
        a3_holds: zero_slice_max <= STRUCTURE_TOLERANCE,
        convexity_checks: checks,
        convexity_violations: violations,
        eq24_l0,
        eq24_holds,
    })
}

/// Smallest candidate `L0 >= 0` such that every probed `y >= L0` has `g(y, 0) <= L0 + M|y|`.
fn growth_constant(samples: &[(f64, f64)], m: f64, y_max: f64) -> (f64, bool) {
    let excess = |y: f64, v: f64| v - m * libm::fabs(y);
    let mut candidates: Vec<f64> = vec![0.0];
    for &(y, v) in samples {
        if y > 0.0 {
            candidates.push(y);
        }
        let e = excess(y, v);
        if e > 0.0 {
            candidates.push(e);
        }
    }
    candidates.sort_by(f64::total_cmp);
    for l0 in candidates {
        let ok = samples
            .iter()
            .filter(|(y, _)| *y >= l0)
            .all(|&(y, v)| excess(y, v) <= l0 + STRUCTURE_TOLERANCE);
        if ok {
            return (l0, l0 <= y_max);
        }
    }
    (f64::INFINITY, false)
}

/// Named regression anchors: a small set of generators and constraints with known
/// Lipschitz constants.
pub mod catalog {
    use super::*;

    /// Coefficient of the linear-in-`y` generators.
    pub const A: f64 = 0.5;
    /// Coefficient of the `z` terms in generators.
    pub const B: f64 = 0.5;
    /// Threshold of the upper bound constraint `z <= k`.
    pub const K: f64 = 0.5;

    #[derive(Debug, Clone)]
    pub struct Entry {
        pub name: &'static str,
        pub spec: FunctionSpec,
        /// `E(c xi) = c E(xi)` for `c >= 0`.
        pub positively_homogeneous: bool,
    }

    fn entry(name: &'static str, text: &str, lip: Lipschitz, homogeneous: bool) -> Entry {
        let spec = FunctionSpec::driver(text)
            .expect("catalog expressions parse")
            .with_lipschitz(lip)
            .with_convexity(true);
        Entry {
            name,
            spec,
            positively_homogeneous: homogeneous,
        }
    }

    pub fn generators() -> Vec<Entry> {
        vec![
            entry("zero", "0", Lipschitz { y: 0.0, z: 0.0 }, true),
            entry("b_abs_z", &format!("{B}*abs(z)"), Lipschitz { y: 0.0, z: B }, true),
            entry("a_y", &format!("{A}*y"), Lipschitz { y: A, z: 0.0 }, true),
            entry("a_y_b_z", &format!("{A}*y+{B}*z"), Lipschitz { y: A, z: B }, true),
        ]
    }

    pub fn constraints() -> Vec<Entry> {
        vec![
            entry("zero", "0", Lipschitz { y: 0.0, z: 0.0 }, true),
            entry("z_zero", "abs(z)", Lipschitz { y: 0.0, z: 1.0 }, true),
            entry("z_nonneg", "neg(z)", Lipschitz { y: 0.0, z: 1.0 }, true),
            entry("z_upper", &format!("pos(z-{K})"), Lipschitz { y: 0.0, z: 1.0 }, false),
        ]
    }

    /// Every `(generator, constraint)` pair.
    pub fn pairs() -> Vec<(Entry, Entry)> {
        let mut out = Vec::new();
        for g in generators() {
            for phi in constraints() {
                out.push((g.clone(), phi.clone()));
            }
        }
        out
    }

    pub fn by_name<'a>(entries: &'a [Entry], name: &str) -> Option<&'a Entry> {
        entries.iter().find(|e| e.name == name)
    }
}
