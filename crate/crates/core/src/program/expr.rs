//! Pointwise expressions and multi-statement kernels.
//!
//! Grammar (whitespace-insensitive):
//!
//! ```text
//! expr  := term (("+" | "-") term)*
//! term  := unary (("*" | "/") unary)*
//! unary := "-" unary | atom
//! atom  := number | "$" | name ["@" name] | call | "(" expr ")"
//! call  := sqrt|tanh|relu|exp (expr) | pow(expr, expr) | dropout(expr, rate[, key])
//!        | norm(expr) | reduce_sum|reduce_max|reduce_min(expr) | slice(name, axis)
//! ```
//!
//! `$` is the in-flight value of a fused collective; `node@tensor` is the value
//! `node` wrote into `tensor`.

use std::fmt;

use super::{Operand, Reducer, Source};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum UnOp {
    Neg,
    Sqrt,
    Tanh,
    Relu,
    Exp,
}

impl UnOp {
    pub fn apply(self, x: f32) -> f32 {
        match self {
            UnOp::Neg => -x,
            UnOp::Sqrt => x.sqrt(),
            UnOp::Tanh => x.tanh(),
            UnOp::Relu => x.max(0.0),
            UnOp::Exp => x.exp(),
        }
    }

    fn name(self) -> &'static str {
        match self {
            UnOp::Neg => "-",
            UnOp::Sqrt => "sqrt",
            UnOp::Tanh => "tanh",
            UnOp::Relu => "relu",
            UnOp::Exp => "exp",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum BinOp {
    Add,
    Sub,
    Mul,
    Div,
    Pow,
}

impl BinOp {
    pub fn apply(self, a: f32, b: f32) -> f32 {
        match self {
            BinOp::Add => a + b,
            BinOp::Sub => a - b,
            BinOp::Mul => a * b,
            BinOp::Div => a / b,
            BinOp::Pow => a.powf(b),
        }
    }

    fn precedence(self) -> u8 {
        match self {
            BinOp::Add | BinOp::Sub => 1,
            BinOp::Mul | BinOp::Div => 2,
            BinOp::Pow => 3,
        }
    }

    fn symbol(self) -> &'static str {
        match self {
            BinOp::Add => "+",
            BinOp::Sub => "-",
            BinOp::Mul => "*",
            BinOp::Div => "/",
            BinOp::Pow => "pow",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Expr {
    Const(f32),
    Operand(Operand),
    /// An earlier statement of the same kernel.
    Member(String),
    /// The reduced value flowing through a fused collective.
    InFlight,
    Unary(UnOp, Box<Expr>),
    Binary(BinOp, Box<Expr>, Box<Expr>),
    /// Inverted dropout. `key` identifies the mask stream and survives every
    /// transformation.
    Dropout { input: Box<Expr>, rate: f32, key: u64 },
    /// Euclidean norm of a whole tensor (statement level only).
    Norm(Box<Expr>),
    /// Reduction of a whole tensor to a scalar (statement level only).
    Reduce(Reducer, Box<Expr>),
}

impl Expr {
    pub fn operand(op: Operand) -> Expr {
        Expr::Operand(op)
    }

    pub fn bin(op: BinOp, a: Expr, b: Expr) -> Expr {
        Expr::Binary(op, Box::new(a), Box::new(b))
    }

    pub fn is_reduction(&self) -> bool {
        matches!(self, Expr::Norm(_) | Expr::Reduce(..))
    }

    /// The element-wise body of a statement (the argument of a reduction).
    pub fn elementwise_body(&self) -> &Expr {
        match self {
            Expr::Norm(e) | Expr::Reduce(_, e) => e,
            e => e,
        }
    }

    pub fn children(&self) -> Vec<&Expr> {
        match self {
            Expr::Const(_) | Expr::Operand(_) | Expr::Member(_) | Expr::InFlight => Vec::new(),
            Expr::Unary(_, e) | Expr::Norm(e) | Expr::Reduce(_, e) => vec![e],
            Expr::Dropout { input, .. } => vec![input],
            Expr::Binary(_, a, b) => vec![a, b],
        }
    }

    pub fn visit(&self, f: &mut dyn FnMut(&Expr)) {
        f(self);
        for c in self.children() {
            c.visit(f);
        }
    }

    pub fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Expr)) {
        f(self);
        match self {
            Expr::Const(_) | Expr::Operand(_) | Expr::Member(_) | Expr::InFlight => {}
            Expr::Unary(_, e) | Expr::Norm(e) | Expr::Reduce(_, e) => e.visit_mut(f),
            Expr::Dropout { input, .. } => input.visit_mut(f),
            Expr::Binary(_, a, b) => {
                a.visit_mut(f);
                b.visit_mut(f);
            }
        }
    }

    pub fn operands(&self) -> Vec<&Operand> {
        let mut out = Vec::new();
        collect_operands(self, &mut out);
        out
    }

    pub fn uses_in_flight(&self) -> bool {
        let mut found = false;
        self.visit(&mut |e| found |= matches!(e, Expr::InFlight));
        found
    }

    /// Reductions anywhere below the top level are rejected by validation.
    pub fn has_nested_reduction(&self) -> bool {
        let mut found = false;
        for c in self.elementwise_body().children() {
            c.visit(&mut |e| found |= e.is_reduction());
        }
        if !self.is_reduction() {
            self.visit(&mut |e| found |= e.is_reduction());
        }
        found
    }

    /// Number of arithmetic operations per element, used by the cost model.
    pub fn op_count(&self) -> usize {
        let mut n = 0;
        self.visit(&mut |e| {
            if matches!(e, Expr::Unary(..) | Expr::Binary(..) | Expr::Dropout { .. } | Expr::Norm(_) | Expr::Reduce(..)) {
                n += 1;
            }
        });
        n.max(1)
    }

    fn precedence(&self) -> u8 {
        match self {
            Expr::Binary(op, ..) if *op != BinOp::Pow => op.precedence(),
            Expr::Unary(UnOp::Neg, _) => 3,
            Expr::Const(c) if *c < 0.0 || (*c == 0.0 && c.is_sign_negative()) => 3,
            _ => 4,
        }
    }
}

fn collect_operands<'a>(e: &'a Expr, out: &mut Vec<&'a Operand>) {
    if let Expr::Operand(o) = e {
        out.push(o);
    }
    for c in e.children() {
        collect_operands(c, out);
    }
}

fn fmt_child(f: &mut fmt::Formatter<'_>, e: &Expr, min_prec: u8) -> fmt::Result {
    if e.precedence() < min_prec {
        write!(f, "({e})")
    } else {
        write!(f, "{e}")
    }
}

impl fmt::Display for Expr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Expr::Const(c) => write!(f, "{c:?}"),
            Expr::Operand(o) => write!(f, "{o}"),
            Expr::Member(m) => f.write_str(m),
            Expr::InFlight => f.write_str("$"),
            Expr::Unary(UnOp::Neg, e) => {
                f.write_str("-")?;
                fmt_child(f, e, 3)
            }
            Expr::Unary(op, e) => write!(f, "{}({e})", op.name()),
            Expr::Binary(BinOp::Pow, a, b) => write!(f, "pow({a}, {b})"),
            Expr::Binary(op, a, b) => {
                let p = op.precedence();
                fmt_child(f, a, p)?;
                write!(f, " {} ", op.symbol())?;
                // Right operands of non-associative operators need parentheses
                // at equal precedence.
                let right_min = if matches!(op, BinOp::Sub | BinOp::Div) { p + 1 } else { p };
                fmt_child(f, b, right_min)
            }
            Expr::Dropout { input, rate, key } => write!(f, "dropout({input}, {rate:?}, {key})"),
            Expr::Norm(e) => write!(f, "norm({e})"),
            Expr::Reduce(r, e) => {
                let name = match r {
                    Reducer::Sum => "reduce_sum",
                    Reducer::Max => "reduce_max",
                    Reducer::Min => "reduce_min",
                };
                write!(f, "{name}({e})")
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
#[error("expression parse error at offset {offset}: {message}")]
pub struct ParseError {
    pub offset: usize,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq)]
enum Tok {
    Num(f32),
    Int(u64),
    Name(String),
    Sym(char),
}

fn tokenize(s: &str) -> Result<Vec<(usize, Tok)>, ParseError> {
    let bytes = s.as_bytes();
    let mut out = Vec::new();
    let mut i = 0;
    while i < bytes.len() {
        let c = bytes[i] as char;
        if c.is_whitespace() {
            i += 1;
        } else if c.is_ascii_digit() || (c == '.' && bytes.get(i + 1).is_some_and(|b| b.is_ascii_digit())) {
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
            let text = &s[start..i];
            let tok = if text.chars().all(|c| c.is_ascii_digit()) {
                Tok::Int(text.parse().map_err(|_| ParseError { offset: start, message: format!("bad integer {text}") })?)
            } else {
                Tok::Num(text.parse().map_err(|_| ParseError { offset: start, message: format!("bad number {text}") })?)
            };
            out.push((start, tok));
        } else if c.is_ascii_alphabetic() || c == '_' {
            let start = i;
            while i < bytes.len() && (bytes[i].is_ascii_alphanumeric() || bytes[i] == b'_') {
                i += 1;
            }
            out.push((start, Tok::Name(s[start..i].to_string())));
        } else if "+-*/(),@$".contains(c) {
            out.push((i, Tok::Sym(c)));
            i += 1;
        } else {
            return Err(ParseError { offset: i, message: format!("unexpected character '{c}'") });
        }
    }
    Ok(out)
}

struct Parser<'a> {
    toks: Vec<(usize, Tok)>,
    pos: usize,
    len: usize,
    dropout_key: &'a mut dyn FnMut() -> u64,
}

impl Parser<'_> {
    fn peek(&self) -> Option<&Tok> {
        self.toks.get(self.pos).map(|(_, t)| t)
    }

    fn offset(&self) -> usize {
        self.toks.get(self.pos).map_or(self.len, |(o, _)| *o)
    }

    fn err<T>(&self, message: impl Into<String>) -> Result<T, ParseError> {
        Err(ParseError { offset: self.offset(), message: message.into() })
    }

    fn eat(&mut self, c: char) -> bool {
        if self.peek() == Some(&Tok::Sym(c)) {
            self.pos += 1;
            true
        } else {
            false
        }
    }

    fn expect(&mut self, c: char) -> Result<(), ParseError> {
        if self.eat(c) {
            Ok(())
        } else {
            self.err(format!("expected '{c}'"))
        }
    }

    fn expr(&mut self) -> Result<Expr, ParseError> {
        let mut lhs = self.term()?;
        loop {
            let op = if self.eat('+') {
                BinOp::Add
            } else if self.eat('-') {
                BinOp::Sub
            } else {
                return Ok(lhs);
            };
            lhs = Expr::bin(op, lhs, self.term()?);
        }
    }

    fn term(&mut self) -> Result<Expr, ParseError> {
        let mut lhs = self.unary()?;
        loop {
            let op = if self.eat('*') {
                BinOp::Mul
            } else if self.eat('/') {
                BinOp::Div
            } else {
                return Ok(lhs);
            };
            lhs = Expr::bin(op, lhs, self.unary()?);
        }
    }

    fn unary(&mut self) -> Result<Expr, ParseError> {
        if self.eat('-') {
            return Ok(match self.unary()? {
                Expr::Const(c) => Expr::Const(-c),
                e => Expr::Unary(UnOp::Neg, Box::new(e)),
            });
        }
        self.atom()
    }

    fn number(&mut self) -> Result<f32, ParseError> {
        let neg = self.eat('-');
        let v = match self.peek().cloned() {
            Some(Tok::Num(v)) => v,
            Some(Tok::Int(v)) => v as f32,
            _ => return self.err("expected a number"),
        };
        self.pos += 1;
        Ok(if neg { -v } else { v })
    }

    fn integer(&mut self) -> Result<u64, ParseError> {
        match self.peek().cloned() {
            Some(Tok::Int(v)) => {
                self.pos += 1;
                Ok(v)
            }
            _ => self.err("expected an integer"),
        }
    }

    fn atom(&mut self) -> Result<Expr, ParseError> {
        let tok = match self.peek().cloned() {
            Some(t) => t,
            None => return self.err("unexpected end of expression"),
        };
        match tok {
            Tok::Num(v) => {
                self.pos += 1;
                Ok(Expr::Const(v))
            }
            Tok::Int(v) => {
                self.pos += 1;
                Ok(Expr::Const(v as f32))
            }
            Tok::Sym('(') => {
                self.pos += 1;
                let e = self.expr()?;
                self.expect(')')?;
                Ok(e)
            }
            Tok::Sym('$') => {
                self.pos += 1;
                Ok(Expr::InFlight)
            }
            Tok::Name(name) => {
                self.pos += 1;
                if self.eat('(') {
                    let e = self.call(&name)?;
                    self.expect(')')?;
                    Ok(e)
                } else {
                    self.reference(name)
                }
            }
            Tok::Sym(c) => self.err(format!("unexpected '{c}'")),
        }
    }

    fn reference(&mut self, name: String) -> Result<Expr, ParseError> {
        if self.eat('@') {
            match self.peek().cloned() {
                Some(Tok::Name(t)) => {
                    self.pos += 1;
                    Ok(Expr::Operand(Operand::written(name, t)))
                }
                _ => self.err("expected a tensor name after '@'"),
            }
        } else {
            Ok(Expr::Operand(Operand::tensor(name)))
        }
    }

    fn call(&mut self, name: &str) -> Result<Expr, ParseError> {
        let unary = |op| -> Option<UnOp> { Some(op) };
        let un = match name {
            "sqrt" | "Sqrt" => unary(UnOp::Sqrt),
            "tanh" => unary(UnOp::Tanh),
            "relu" => unary(UnOp::Relu),
            "exp" => unary(UnOp::Exp),
            _ => None,
        };
        if let Some(op) = un {
            return Ok(Expr::Unary(op, Box::new(self.expr()?)));
        }
        match name {
            "pow" | "Pow" => {
                let a = self.expr()?;
                self.expect(',')?;
                let b = self.expr()?;
                Ok(Expr::bin(BinOp::Pow, a, b))
            }
            "dropout" | "Dropout" => {
                let input = self.expr()?;
                self.expect(',')?;
                let rate = self.number()?;
                if !(0.0..1.0).contains(&rate) {
                    return self.err("dropout rate must lie in [0, 1)");
                }
                let key = if self.eat(',') { self.integer()? } else { (self.dropout_key)() };
                Ok(Expr::Dropout { input: Box::new(input), rate, key })
            }
            "norm" | "Norm" => Ok(Expr::Norm(Box::new(self.expr()?))),
            "reduce_sum" => Ok(Expr::Reduce(Reducer::Sum, Box::new(self.expr()?))),
            "reduce_max" => Ok(Expr::Reduce(Reducer::Max, Box::new(self.expr()?))),
            "reduce_min" => Ok(Expr::Reduce(Reducer::Min, Box::new(self.expr()?))),
            "slice" | "Slice" => {
                let base = match self.peek().cloned() {
                    Some(Tok::Name(n)) => {
                        self.pos += 1;
                        n
                    }
                    _ => return self.err("slice expects a name"),
                };
                let mut e = self.reference(base)?;
                self.expect(',')?;
                let axis = self.integer()? as usize;
                if let Expr::Operand(o) = &mut e {
                    o.slice = Some(axis);
                }
                Ok(e)
            }
            other => self.err(format!("unknown function {other}")),
        }
    }
}

/// Parses an expression. Bare names come back as `Source::Tensor` operands;
/// callers resolve them against nodes, tensors and kernel members.
/// `dropout_key` supplies keys for dropouts written without an explicit one.
pub fn parse_expr(s: &str, dropout_key: &mut dyn FnMut() -> u64) -> Result<Expr, ParseError> {
    let toks = tokenize(s)?;
    let mut p = Parser { toks, pos: 0, len: s.len(), dropout_key };
    let e = p.expr()?;
    if p.pos != p.toks.len() {
        return p.err("trailing input");
    }
    Ok(e)
}

/// One statement of a kernel; `update` names the tensor whose storage
/// receives the statement's value.
#[derive(Debug, Clone, PartialEq)]
pub struct Stmt {
    pub name: String,
    pub expr: Expr,
    pub update: Option<String>,
}

/// A sequence of statements evaluated in order; the last statement is the
/// kernel's primary result.
#[derive(Debug, Clone, PartialEq)]
pub struct Kernel {
    pub stmts: Vec<Stmt>,
}

impl Kernel {
    pub fn single(name: impl Into<String>, expr: Expr) -> Kernel {
        Kernel { stmts: vec![Stmt { name: name.into(), expr, update: None }] }
    }

    pub fn primary(&self) -> &Stmt {
        self.stmts.last().expect("kernel has at least one statement")
    }

    /// A kernel whose only statement forwards one operand unchanged.
    pub fn is_identity(&self) -> bool {
        self.stmts.len() == 1
            && self.stmts[0].update.is_none()
            && matches!(self.stmts[0].expr, Expr::Operand(_))
    }

    pub fn operands(&self) -> Vec<&Operand> {
        self.stmts.iter().flat_map(|s| s.expr.operands()).collect()
    }

    pub fn map_operands(&mut self, f: &mut dyn FnMut(&mut Operand)) {
        for s in &mut self.stmts {
            s.expr.visit_mut(&mut |e| {
                if let Expr::Operand(o) = e {
                    f(o);
                }
            });
        }
    }

    pub fn updates(&self) -> Vec<&str> {
        self.stmts.iter().filter_map(|s| s.update.as_deref()).collect()
    }

    pub fn uses_in_flight(&self) -> bool {
        self.stmts.iter().any(|s| s.expr.uses_in_flight())
    }

    pub fn has_reduction(&self) -> bool {
        self.stmts.iter().any(|s| s.expr.is_reduction())
    }

    /// Replaces every read of `from` (any slice view) by `to`, keeping views.
    pub fn replace_source(&mut self, from: &Source, to: &Source) {
        self.map_operands(&mut |o| {
            if &o.source == from {
                o.source = to.clone();
            }
        });
    }
}

impl fmt::Display for Kernel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, s) in self.stmts.iter().enumerate() {
            if i > 0 {
                f.write_str("; ")?;
            }
            match &s.update {
                Some(t) => write!(f, "{} = update({t}, {})", s.name, s.expr)?,
                None => write!(f, "{} = {}", s.name, s.expr)?,
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(s: &str) -> Expr {
        let mut k = 0;
        parse_expr(s, &mut || {
            k += 1;
            k
        })
        .unwrap()
    }

    #[test]
    fn precedence_and_associativity() {
        assert_eq!(parse("a - b - c").to_string(), "a - b - c");
        assert_eq!(parse("a - (b - c)").to_string(), "a - (b - c)");
        assert_eq!(parse("a * (b + c)").to_string(), "a * (b + c)");
        assert_eq!(parse("a / b / c").to_string(), "a / b / c");
        assert_eq!(parse("a / (b * c)").to_string(), "a / (b * c)");
    }

    #[test]
    fn adam_line_round_trips() {
        let src = "p - lr * m1 / sqrt(v1)";
        let e = parse(src);
        assert_eq!(parse(&e.to_string()), e);
        let e = parse("v*beta2+(1-beta1)*avg*avg");
        assert_eq!(e.to_string(), "v * beta2 + (1.0 - beta1) * avg * avg");
    }

    #[test]
    fn special_forms() {
        let e = parse("dropout(sum + b, 0.1) + slice(r, 2)");
        assert_eq!(e.to_string(), "dropout(sum + b, 0.1, 1) + slice(r, 2)");
        let e = parse("rs@m * $");
        assert_eq!(e.to_string(), "rs@m * $");
        assert!(parse("norm(x)").is_reduction());
        assert!(parse("1 + norm(x)").has_nested_reduction());
        assert_eq!(parse("-2 * x").to_string(), "-2.0 * x");
        assert_eq!(parse("1e-3").to_string(), "0.001");
    }

    #[test]
    fn errors_have_offsets() {
        let err = parse_expr("a + * b", &mut || 0).unwrap_err();
        assert_eq!(err.offset, 4);
        assert!(parse_expr("dropout(a, 1.5)", &mut || 0).is_err());
        assert!(parse_expr("a b", &mut || 0).is_err());
    }
}
