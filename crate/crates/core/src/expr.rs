//! Closed-form scalar fields.
//!
//! Coefficients, sources, reactions and reference solutions are written in a
//! small arithmetic language:
//!
//! ```text
//! expr  := term (('+' | '-') term)*
//! term  := unary (('*' | '/') unary)*
//! unary := '-' unary | power
//! power := atom ('^' unary)?
//! atom  := number | name | func '(' expr ')' | '(' expr ')'
//! ```
//!
//! Names are the variables `x1`, `x2`, `t`, `s`, `eps` and the constant `pi`;
//! functions are `sin`, `cos`, `exp`, `atan`, `sqrt`.

use std::fmt;
use std::str::FromStr;

use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
#[error("{message} at column {column} in `{source_text}`")]
pub struct ExprError {
    pub message: String,
    /// 1-based column inside the expression text.
    pub column: usize,
    pub source_text: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Var {
    X1,
    X2,
    T,
    S,
    Eps,
}

impl Var {
    const ALL: [Var; 5] = [Var::X1, Var::X2, Var::T, Var::S, Var::Eps];

    fn bit(self) -> u8 {
        1 << (self as u8)
    }

    fn name(self) -> &'static str {
        match self {
            Var::X1 => "x1",
            Var::X2 => "x2",
            Var::T => "t",
            Var::S => "s",
            Var::Eps => "eps",
        }
    }
}

/// Set of variables an expression depends on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct VarSet(u8);

impl VarSet {
    pub const EMPTY: VarSet = VarSet(0);

    pub fn of(vars: &[Var]) -> Self {
        VarSet(vars.iter().fold(0, |acc, v| acc | v.bit()))
    }

    pub fn contains(self, v: Var) -> bool {
        self.0 & v.bit() != 0
    }

    pub fn is_empty(self) -> bool {
        self.0 == 0
    }

    pub fn is_subset(self, other: VarSet) -> bool {
        self.0 & !other.0 == 0
    }

    pub fn union(self, other: VarSet) -> Self {
        VarSet(self.0 | other.0)
    }

    pub fn vars(self) -> impl Iterator<Item = Var> {
        Var::ALL.into_iter().filter(move |v| self.contains(*v))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Func {
    Sin,
    Cos,
    Exp,
    Atan,
    Sqrt,
}

impl Func {
    fn apply(self, x: f64) -> f64 {
        match self {
            Func::Sin => x.sin(),
            Func::Cos => x.cos(),
            Func::Exp => x.exp(),
            Func::Atan => x.atan(),
            Func::Sqrt => x.sqrt(),
        }
    }

    fn name(self) -> &'static str {
        match self {
            Func::Sin => "sin",
            Func::Cos => "cos",
            Func::Exp => "exp",
            Func::Atan => "atan",
            Func::Sqrt => "sqrt",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Node {
    Num(f64),
    Var(Var),
    Neg(Box<Node>),
    Add(Box<Node>, Box<Node>),
    Sub(Box<Node>, Box<Node>),
    Mul(Box<Node>, Box<Node>),
    Div(Box<Node>, Box<Node>),
    Pow(Box<Node>, Box<Node>),
    Call(Func, Box<Node>),
}

/// Values bound to the free variables during evaluation.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct Env {
    pub x1: f64,
    pub x2: f64,
    pub t: f64,
    pub s: f64,
    pub eps: f64,
}

impl Env {
    pub fn at(x1: f64, x2: f64) -> Self {
        Env {
            x1,
            x2,
            ..Default::default()
        }
    }

    fn get(&self, v: Var) -> f64 {
        match v {
            Var::X1 => self.x1,
            Var::X2 => self.x2,
            Var::T => self.t,
            Var::S => self.s,
            Var::Eps => self.eps,
        }
    }
}

impl Node {
    pub fn eval(&self, env: &Env) -> f64 {
        match self {
            Node::Num(v) => *v,
            Node::Var(v) => env.get(*v),
            Node::Neg(a) => -a.eval(env),
            Node::Add(a, b) => a.eval(env) + b.eval(env),
            Node::Sub(a, b) => a.eval(env) - b.eval(env),
            Node::Mul(a, b) => a.eval(env) * b.eval(env),
            Node::Div(a, b) => a.eval(env) / b.eval(env),
            Node::Pow(a, b) => {
                let e = b.eval(env);
                let base = a.eval(env);
                if e.fract() == 0.0 && e.abs() <= 64.0 {
                    base.powi(e as i32)
                } else {
                    base.powf(e)
                }
            }
            Node::Call(f, a) => f.apply(a.eval(env)),
        }
    }

    pub fn deps(&self) -> VarSet {
        match self {
            Node::Num(_) => VarSet::EMPTY,
            Node::Var(v) => VarSet::of(&[*v]),
            Node::Neg(a) | Node::Call(_, a) => a.deps(),
            Node::Add(a, b)
            | Node::Sub(a, b)
            | Node::Mul(a, b)
            | Node::Div(a, b)
            | Node::Pow(a, b) => a.deps().union(b.deps()),
        }
    }

    /// Splits `self` into `left * right` where `left` only depends on variables
    /// in `group` and `right` on none of them.
    fn split(&self, group: VarSet) -> Option<(Node, Node)> {
        let deps = self.deps();
        if deps.is_subset(group) {
            return Some((self.clone(), Node::Num(1.0)));
        }
        if deps.0 & group.0 == 0 {
            return Some((Node::Num(1.0), self.clone()));
        }
        match self {
            Node::Neg(a) => {
                let (l, r) = a.split(group)?;
                Some((Node::Neg(Box::new(l)), r))
            }
            Node::Mul(a, b) => {
                let (al, ar) = a.split(group)?;
                let (bl, br) = b.split(group)?;
                Some((mul(al, bl), mul(ar, br)))
            }
            Node::Div(a, b) => {
                let (al, ar) = a.split(group)?;
                let (bl, br) = b.split(group)?;
                Some((
                    Node::Div(Box::new(al), Box::new(bl)),
                    Node::Div(Box::new(ar), Box::new(br)),
                ))
            }
            Node::Pow(a, e) if e.deps().is_empty() => {
                let (l, r) = a.split(group)?;
                Some((
                    Node::Pow(Box::new(l), e.clone()),
                    Node::Pow(Box::new(r), e.clone()),
                ))
            }
            _ => None,
        }
    }
}

fn mul(a: Node, b: Node) -> Node {
    match (&a, &b) {
        (Node::Num(x), _) if *x == 1.0 => b,
        (_, Node::Num(y)) if *y == 1.0 => a,
        _ => Node::Mul(Box::new(a), Box::new(b)),
    }
}

impl fmt::Display for Node {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Node::Num(v) => write!(f, "{v:?}"),
            Node::Var(v) => f.write_str(v.name()),
            Node::Neg(a) => write!(f, "(-{a})"),
            Node::Add(a, b) => write!(f, "({a} + {b})"),
            Node::Sub(a, b) => write!(f, "({a} - {b})"),
            Node::Mul(a, b) => write!(f, "({a} * {b})"),
            Node::Div(a, b) => write!(f, "({a} / {b})"),
            Node::Pow(a, b) => write!(f, "({a} ^ {b})"),
            Node::Call(func, a) => write!(f, "{}({a})", func.name()),
        }
    }
}

/// A parsed expression together with its source text.
#[derive(Debug, Clone)]
pub struct Expr {
    text: String,
    root: Node,
    deps: VarSet,
}

impl PartialEq for Expr {
    fn eq(&self, other: &Self) -> bool {
        self.root == other.root
    }
}

impl Expr {
    pub fn parse(text: &str) -> Result<Self, ExprError> {
        let tokens = tokenize(text)?;
        let mut p = Parser {
            text,
            tokens,
            pos: 0,
        };
        let root = p.expr()?;
        if let Some(tok) = p.peek() {
            return Err(p.error("unexpected trailing input", tok.col));
        }
        Ok(Self::from_node(text.trim().to_string(), root))
    }

    pub fn constant(value: f64) -> Self {
        Self::from_node(format!("{value:?}"), Node::Num(value))
    }

    pub fn zero() -> Self {
        Self::constant(0.0)
    }

    fn from_node(text: String, root: Node) -> Self {
        let deps = root.deps();
        Expr { text, root, deps }
    }

    pub fn text(&self) -> &str {
        &self.text
    }

    pub fn node(&self) -> &Node {
        &self.root
    }

    pub fn deps(&self) -> VarSet {
        self.deps
    }

    pub fn depends_on(&self, v: Var) -> bool {
        self.deps.contains(v)
    }

    pub fn is_constant(&self) -> bool {
        self.deps.is_empty()
    }

    /// Value when the expression has no free variables.
    pub fn constant_value(&self) -> Option<f64> {
        self.is_constant().then(|| self.root.eval(&Env::default()))
    }

    /// Whether the expression is the literal constant zero.
    pub fn is_zero(&self) -> bool {
        self.constant_value() == Some(0.0)
    }

    pub fn eval(&self, env: &Env) -> f64 {
        self.root.eval(env)
    }

    pub fn eval_xy(&self, x1: f64, x2: f64) -> f64 {
        self.root.eval(&Env::at(x1, x2))
    }

    /// Factor as `g(group vars) * h(other vars)`, if the tree makes that
    /// structure visible.
    pub fn split_product(&self, group: &[Var]) -> Option<(Expr, Expr)> {
        let (l, r) = self.root.split(VarSet::of(group))?;
        Some((
            Self::from_node(l.to_string(), l),
            Self::from_node(r.to_string(), r),
        ))
    }

    /// Factor as `g(x1) * h(x2)` for fields on the domain.
    pub fn split_x1_x2(&self) -> Option<(Expr, Expr)> {
        if !self.deps.is_subset(VarSet::of(&[Var::X1, Var::X2])) {
            return None;
        }
        self.split_product(&[Var::X1])
    }
}

impl FromStr for Expr {
    type Err = ExprError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Expr::parse(s)
    }
}

impl fmt::Display for Expr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.text)
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Tok {
    Num(f64),
    Ident(String),
    Op(char),
    LParen,
    RParen,
}

#[derive(Debug, Clone)]
struct Token {
    tok: Tok,
    col: usize,
}

fn tokenize(text: &str) -> Result<Vec<Token>, ExprError> {
    let err = |message: &str, col: usize| ExprError {
        message: message.to_string(),
        column: col,
        source_text: text.to_string(),
    };
    let chars: Vec<char> = text.chars().collect();
    let mut out = Vec::new();
    let mut i = 0;
    while i < chars.len() {
        let c = chars[i];
        let col = i + 1;
        if c.is_whitespace() {
            i += 1;
        } else if c.is_ascii_digit() || c == '.' {
            let start = i;
            while i < chars.len() && (chars[i].is_ascii_digit() || chars[i] == '.') {
                i += 1;
            }
            // exponent part: 1e-3, 2.5E+4
            if i < chars.len() && (chars[i] == 'e' || chars[i] == 'E') {
                let mut j = i + 1;
                if j < chars.len() && (chars[j] == '+' || chars[j] == '-') {
                    j += 1;
                }
                if j < chars.len() && chars[j].is_ascii_digit() {
                    while j < chars.len() && chars[j].is_ascii_digit() {
                        j += 1;
                    }
                    i = j;
                }
            }
            let s: String = chars[start..i].iter().collect();
            let v = s.parse::<f64>().map_err(|_| err("malformed number", col))?;
            out.push(Token {
                tok: Tok::Num(v),
                col,
            });
        } else if c.is_ascii_alphabetic() || c == '_' {
            let start = i;
            while i < chars.len() && (chars[i].is_ascii_alphanumeric() || chars[i] == '_') {
                i += 1;
            }
            out.push(Token {
                tok: Tok::Ident(chars[start..i].iter().collect()),
                col,
            });
        } else {
            let tok = match c {
                '+' | '-' | '*' | '/' | '^' => Tok::Op(c),
                '(' => Tok::LParen,
                ')' => Tok::RParen,
                _ => return Err(err(&format!("unexpected character `{c}`"), col)),
            };
            out.push(Token { tok, col });
            i += 1;
        }
    }
    Ok(out)
}

struct Parser<'a> {
    text: &'a str,
    tokens: Vec<Token>,
    pos: usize,
}

impl Parser<'_> {
    fn error(&self, message: &str, col: usize) -> ExprError {
        ExprError {
            message: message.to_string(),
            column: col,
            source_text: self.text.to_string(),
        }
    }

    fn end_col(&self) -> usize {
        self.text.chars().count() + 1
    }

    fn peek(&self) -> Option<&Token> {
        self.tokens.get(self.pos)
    }

    fn next(&mut self) -> Option<Token> {
        let t = self.tokens.get(self.pos).cloned();
        self.pos += 1;
        t
    }

    fn eat_op(&mut self, ops: &[char]) -> Option<char> {
        match self.peek() {
            Some(Token {
                tok: Tok::Op(c), ..
            }) if ops.contains(c) => {
                let c = *c;
                self.pos += 1;
                Some(c)
            }
            _ => None,
        }
    }

    fn expr(&mut self) -> Result<Node, ExprError> {
        let mut lhs = self.term()?;
        while let Some(op) = self.eat_op(&['+', '-']) {
            let rhs = self.term()?;
            lhs = if op == '+' {
                Node::Add(Box::new(lhs), Box::new(rhs))
            } else {
                Node::Sub(Box::new(lhs), Box::new(rhs))
            };
        }
        Ok(lhs)
    }

    fn term(&mut self) -> Result<Node, ExprError> {
        let mut lhs = self.unary()?;
        while let Some(op) = self.eat_op(&['*', '/']) {
            let rhs = self.unary()?;
            lhs = if op == '*' {
                Node::Mul(Box::new(lhs), Box::new(rhs))
            } else {
                Node::Div(Box::new(lhs), Box::new(rhs))
            };
        }
        Ok(lhs)
    }

    fn unary(&mut self) -> Result<Node, ExprError> {
        if self.eat_op(&['-']).is_some() {
            return Ok(Node::Neg(Box::new(self.unary()?)));
        }
        if self.eat_op(&['+']).is_some() {
            return self.unary();
        }
        self.power()
    }

    fn power(&mut self) -> Result<Node, ExprError> {
        let base = self.atom()?;
        if self.eat_op(&['^']).is_some() {
            let exp = self.unary()?;
            return Ok(Node::Pow(Box::new(base), Box::new(exp)));
        }
        Ok(base)
    }

    fn atom(&mut self) -> Result<Node, ExprError> {
        let end = self.end_col();
        let Some(tok) = self.next() else {
            return Err(self.error("unexpected end of expression", end));
        };
        match tok.tok {
            Tok::Num(v) => Ok(Node::Num(v)),
            Tok::LParen => {
                let inner = self.expr()?;
                self.expect_rparen(tok.col)?;
                Ok(inner)
            }
            Tok::Ident(name) => {
                let func = match name.as_str() {
                    "sin" => Some(Func::Sin),
                    "cos" => Some(Func::Cos),
                    "exp" => Some(Func::Exp),
                    "atan" => Some(Func::Atan),
                    "sqrt" => Some(Func::Sqrt),
                    _ => None,
                };
                if let Some(func) = func {
                    match self.next() {
                        Some(Token {
                            tok: Tok::LParen,
                            col,
                        }) => {
                            let arg = self.expr()?;
                            self.expect_rparen(col)?;
                            Ok(Node::Call(func, Box::new(arg)))
                        }
                        _ => Err(self.error(&format!("expected `(` after `{name}`"), tok.col)),
                    }
                } else {
                    match name.as_str() {
                        "x1" => Ok(Node::Var(Var::X1)),
                        "x2" => Ok(Node::Var(Var::X2)),
                        "t" => Ok(Node::Var(Var::T)),
                        "s" => Ok(Node::Var(Var::S)),
                        "eps" => Ok(Node::Var(Var::Eps)),
                        "pi" => Ok(Node::Num(std::f64::consts::PI)),
                        _ => Err(self.error(&format!("unknown name `{name}`"), tok.col)),
                    }
                }
            }
            Tok::Op(c) => Err(self.error(&format!("unexpected operator `{c}`"), tok.col)),
            Tok::RParen => Err(self.error("unexpected `)`", tok.col)),
        }
    }

    fn expect_rparen(&mut self, open_col: usize) -> Result<(), ExprError> {
        match self.next() {
            Some(Token {
                tok: Tok::RParen, ..
            }) => Ok(()),
            _ => Err(self.error("unclosed `(`", open_col)),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    #[test]
    fn precedence_and_unary_minus() {
        let e = Expr::parse("1 + 2*3 - -4/2").unwrap();
        assert_eq!(e.eval(&Env::default()), 9.0);
        let e = Expr::parse("-x1^2").unwrap();
        assert_eq!(e.eval_xy(3.0, 0.0), -9.0);
        let e = Expr::parse("2^3^2").unwrap();
        assert_eq!(e.eval(&Env::default()), 512.0);
    }

    #[test]
    fn functions_and_constants() {
        let e = Expr::parse("sin(pi/2) + cos(0) + exp(0) + atan(1)*4/pi + sqrt(4)").unwrap();
        assert!((e.eval(&Env::default()) - 6.0).abs() < 1e-15);
        let e = Expr::parse("1e-3 + 2.5E2").unwrap();
        assert_eq!(e.eval(&Env::default()), 250.001);
    }

    #[test]
    fn error_positions() {
        let err = Expr::parse("1 + y").unwrap_err();
        assert_eq!(err.column, 5);
        let err = Expr::parse("sin(x1").unwrap_err();
        assert_eq!(err.column, 4);
        let err = Expr::parse("2 $ 3").unwrap_err();
        assert_eq!(err.column, 3);
        assert!(Expr::parse("").is_err());
        assert!(Expr::parse("1 2").is_err());
    }

    #[test]
    fn dependencies() {
        let e = Expr::parse("1 + x2*x2/10").unwrap();
        assert!(!e.depends_on(Var::X1));
        assert!(e.depends_on(Var::X2));
        assert!(Expr::parse("pi*2").unwrap().is_constant());
    }

    #[test]
    fn separable_products_split() {
        let e = Expr::parse("0.2*sin(x1)*sin(x2)").unwrap();
        let (g, h) = e.split_x1_x2().unwrap();
        assert!(!g.depends_on(Var::X2));
        assert!(!h.depends_on(Var::X1));
        for &(a, b) in &[(0.3, 1.1), (2.0, 0.4), (PI / 3.0, 2.9)] {
            let lhs = e.eval_xy(a, b);
            let rhs = g.eval_xy(a, b) * h.eval_xy(a, b);
            assert!((lhs - rhs).abs() < 1e-15);
        }

        let e = Expr::parse("-(x1*(pi - x1)) / (1 + x2^2)").unwrap();
        let (g, h) = e.split_x1_x2().unwrap();
        let lhs = e.eval_xy(0.7, 1.3);
        assert!((lhs - g.eval_xy(0.7, 0.0) * h.eval_xy(0.0, 1.3)).abs() < 1e-15);

        assert!(Expr::parse("sin(x1 + x2)").unwrap().split_x1_x2().is_none());
        assert!(Expr::parse("x1 + x2").unwrap().split_x1_x2().is_none());
        let (g, h) = Expr::parse("exp(-t)*sin(x1)")
            .unwrap()
            .split_product(&[Var::T])
            .unwrap();
        assert_eq!(g.deps(), VarSet::of(&[Var::T]));
        assert_eq!(h.deps(), VarSet::of(&[Var::X1]));
    }
}
