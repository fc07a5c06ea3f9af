//! A small operator-expression language for declaring observables.
//!
//! ```text
//! expr    := sum ("+" "h.c.")?
//! sum     := term (("+"|"-") term)*
//! term    := factor ("*" factor)*
//! factor  := scalar | atom | "(" sum ")"
//! atom    := IDENT "'"?            // trailing apostrophe = adjoint
//! scalar  := NUMBER | NUMBER "i" | "i"
//! IDENT   := [A-Za-z_][A-Za-z0-9_]*
//! ```
//!
//! Example: `sz_A * c3 * c2A + h.c.`

use std::collections::BTreeMap;
use std::fmt;

use thiserror::Error;

use crate::hspace::{SpaceSpec, SubsystemKind};
use crate::opalg::{self, OpError, PauliAxis, SparseOperator, C64, ONE};

#[derive(Debug, Error, Clone, PartialEq)]
#[error("{line}:{column}: {message}")]
pub struct ParseError {
    pub line: usize,
    pub column: usize,
    pub message: String,
}

#[derive(Debug, Error)]
pub enum LowerError {
    #[error("unresolved symbol `{0}`")]
    Unresolved(String),
    #[error(transparent)]
    Op(#[from] OpError),
}

#[derive(Debug, Clone, PartialEq)]
pub enum OpExpr {
    Scalar(C64),
    Atom { name: String, dagger: bool },
    Product(Vec<OpExpr>),
    /// Terms with a negation flag; the first term is never negated.
    Sum(Vec<(bool, OpExpr)>),
}

/// A parsed expression with its optional trailing `+ h.c.`.
#[derive(Debug, Clone, PartialEq)]
pub struct Expression {
    pub body: OpExpr,
    pub plus_hc: bool,
}

#[derive(Debug, Clone, PartialEq)]
enum Tok {
    Number(f64),
    ImagNumber(f64),
    Ident(String),
    Dagger,
    Plus,
    Minus,
    Star,
    LParen,
    RParen,
    HermitianConj,
    End,
}

#[derive(Debug, Clone)]
struct Spanned {
    tok: Tok,
    line: usize,
    column: usize,
}

fn advance(n: usize, i: &mut usize, col: &mut usize) {
    *i += n;
    *col += n;
}

fn lex(text: &str) -> Result<Vec<Spanned>, ParseError> {
    let chars: Vec<char> = text.chars().collect();
    let mut out = Vec::new();
    let (mut i, mut line, mut col) = (0usize, 1usize, 1usize);
    let err = |line, column, message: String| ParseError { line, column, message };
    while i < chars.len() {
        let c = chars[i];
        let (l0, c0) = (line, col);
        if c == '\n' {
            i += 1;
            line += 1;
            col = 1;
            continue;
        }
        if c.is_whitespace() {
            advance(1, &mut i, &mut col);
            continue;
        }
        let single = match c {
            '+' => Some(Tok::Plus),
            '-' => Some(Tok::Minus),
            '*' => Some(Tok::Star),
            '(' => Some(Tok::LParen),
            ')' => Some(Tok::RParen),
            '\'' => Some(Tok::Dagger),
            _ => None,
        };
        if let Some(tok) = single {
            out.push(Spanned { tok, line: l0, column: c0 });
            advance(1, &mut i, &mut col);
            continue;
        }
        if chars[i..].starts_with(&['h', '.', 'c', '.']) {
            out.push(Spanned { tok: Tok::HermitianConj, line: l0, column: c0 });
            advance(4, &mut i, &mut col);
            continue;
        }
        if c.is_ascii_digit() || (c == '.' && chars.get(i + 1).is_some_and(|d| d.is_ascii_digit())) {
            let start = i;
            let mut j = i;
            while j < chars.len() && chars[j].is_ascii_digit() {
                j += 1;
            }
            if j < chars.len() && chars[j] == '.' {
                j += 1;
                while j < chars.len() && chars[j].is_ascii_digit() {
                    j += 1;
                }
            }
            if j < chars.len() && (chars[j] == 'e' || chars[j] == 'E') {
                let mut k = j + 1;
                if k < chars.len() && (chars[k] == '+' || chars[k] == '-') {
                    k += 1;
                }
                if k < chars.len() && chars[k].is_ascii_digit() {
                    while k < chars.len() && chars[k].is_ascii_digit() {
                        k += 1;
                    }
                    j = k;
                }
            }
            let literal: String = chars[start..j].iter().collect();
            let value: f64 = literal
                .parse()
                .map_err(|_| err(l0, c0, format!("invalid number `{literal}`")))?;
            let imaginary = chars.get(j) == Some(&'i');
            if imaginary {
                j += 1;
            }
            if chars.get(j).is_some_and(|&d| d.is_ascii_alphanumeric() || d == '_') {
                return Err(err(l0, c0, "number followed by identifier; use `*`".into()));
            }
            let tok = if imaginary { Tok::ImagNumber(value) } else { Tok::Number(value) };
            out.push(Spanned { tok, line: l0, column: c0 });
            advance(j - start, &mut i, &mut col);
            continue;
        }
        if c.is_ascii_alphabetic() || c == '_' {
            let start = i;
            let mut j = i;
            while j < chars.len() && (chars[j].is_ascii_alphanumeric() || chars[j] == '_') {
                j += 1;
            }
            let name: String = chars[start..j].iter().collect();
            let tok = if name == "i" { Tok::ImagNumber(1.0) } else { Tok::Ident(name) };
            out.push(Spanned { tok, line: l0, column: c0 });
            advance(j - start, &mut i, &mut col);
            continue;
        }
        return Err(err(l0, c0, format!("unexpected character `{c}`")));
    }
    out.push(Spanned { tok: Tok::End, line, column: col });
    Ok(out)
}

struct Parser {
    toks: Vec<Spanned>,
    pos: usize,
}

impl Parser {
    fn peek(&self) -> &Tok {
        &self.toks[self.pos].tok
    }

    fn bump(&mut self) -> Spanned {
        let t = self.toks[self.pos].clone();
        if self.pos + 1 < self.toks.len() {
            self.pos += 1;
        }
        t
    }

    fn error(&self, message: impl Into<String>) -> ParseError {
        let t = &self.toks[self.pos];
        ParseError { line: t.line, column: t.column, message: message.into() }
    }

    fn expr(&mut self) -> Result<Expression, ParseError> {
        let mut terms = vec![(false, self.term()?)];
        let mut plus_hc = false;
        loop {
            match self.peek() {
                Tok::Plus => {
                    self.bump();
                    if *self.peek() == Tok::HermitianConj {
                        self.bump();
                        plus_hc = true;
                        break;
                    }
                    terms.push((false, self.term()?));
                }
                Tok::Minus => {
                    self.bump();
                    terms.push((true, self.term()?));
                }
                _ => break,
            }
        }
        match self.peek() {
            Tok::End => {}
            Tok::RParen => return Err(self.error("unbalanced `)`")),
            Tok::HermitianConj => return Err(self.error("`h.c.` must follow `+`")),
            other => return Err(self.error(format!("unexpected {}", describe(other)))),
        }
        Ok(Expression { body: collapse_sum(terms), plus_hc })
    }

    fn sum(&mut self) -> Result<OpExpr, ParseError> {
        let mut terms = vec![(false, self.term()?)];
        loop {
            match self.peek() {
                Tok::Plus => {
                    self.bump();
                    if *self.peek() == Tok::HermitianConj {
                        return Err(self.error("`+ h.c.` is only allowed at the end of an expression"));
                    }
                    terms.push((false, self.term()?));
                }
                Tok::Minus => {
                    self.bump();
                    terms.push((true, self.term()?));
                }
                _ => break,
            }
        }
        Ok(collapse_sum(terms))
    }

    fn term(&mut self) -> Result<OpExpr, ParseError> {
        let mut factors = vec![self.factor()?];
        while *self.peek() == Tok::Star {
            self.bump();
            factors.push(self.factor()?);
        }
        Ok(if factors.len() == 1 { factors.pop().unwrap() } else { OpExpr::Product(factors) })
    }

    fn factor(&mut self) -> Result<OpExpr, ParseError> {
        match self.peek().clone() {
            Tok::Number(v) => {
                self.bump();
                Ok(OpExpr::Scalar(C64::new(v, 0.0)))
            }
            Tok::ImagNumber(v) => {
                self.bump();
                Ok(OpExpr::Scalar(C64::new(0.0, v)))
            }
            Tok::Ident(name) => {
                self.bump();
                let dagger = *self.peek() == Tok::Dagger;
                if dagger {
                    self.bump();
                }
                if matches!(self.peek(), Tok::Ident(_) | Tok::Number(_) | Tok::ImagNumber(_) | Tok::LParen) {
                    return Err(self.error("missing `*` between factors"));
                }
                Ok(OpExpr::Atom { name, dagger })
            }
            Tok::LParen => {
                let open = self.bump();
                let inner = self.sum()?;
                if *self.peek() != Tok::RParen {
                    return Err(ParseError {
                        line: open.line,
                        column: open.column,
                        message: "unbalanced `(`".into(),
                    });
                }
                self.bump();
                Ok(inner)
            }
            other => Err(self.error(format!("expected operand, found {}", describe(&other)))),
        }
    }
}

fn collapse_sum(mut terms: Vec<(bool, OpExpr)>) -> OpExpr {
    if terms.len() == 1 && !terms[0].0 {
        terms.pop().unwrap().1
    } else {
        OpExpr::Sum(terms)
    }
}

fn describe(t: &Tok) -> String {
    match t {
        Tok::Number(v) => format!("number {v}"),
        Tok::ImagNumber(v) => format!("number {v}i"),
        Tok::Ident(s) => format!("identifier `{s}`"),
        Tok::Dagger => "`'`".into(),
        Tok::Plus => "`+`".into(),
        Tok::Minus => "`-`".into(),
        Tok::Star => "`*`".into(),
        Tok::LParen => "`(`".into(),
        Tok::RParen => "`)`".into(),
        Tok::HermitianConj => "`h.c.`".into(),
        Tok::End => "end of input".into(),
    }
}

pub fn parse(text: &str) -> Result<Expression, ParseError> {
    let toks = lex(text)?;
    Parser { toks, pos: 0 }.expr()
}

impl fmt::Display for OpExpr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            OpExpr::Scalar(c) => {
                if c.im == 0.0 {
                    write!(f, "{}", c.re)
                } else if c.re == 0.0 {
                    write!(f, "{}i", c.im)
                } else {
                    write!(f, "({} + {}i)", c.re, c.im)
                }
            }
            OpExpr::Atom { name, dagger } => write!(f, "{}{}", name, if *dagger { "'" } else { "" }),
            OpExpr::Product(items) => {
                for (k, item) in items.iter().enumerate() {
                    if k > 0 {
                        write!(f, " * ")?;
                    }
                    match item {
                        OpExpr::Product(_) | OpExpr::Sum(_) => write!(f, "({item})")?,
                        _ => write!(f, "{item}")?,
                    }
                }
                Ok(())
            }
            OpExpr::Sum(terms) => {
                for (k, (neg, item)) in terms.iter().enumerate() {
                    match (k, neg) {
                        (0, _) => {}
                        (_, true) => write!(f, " - ")?,
                        (_, false) => write!(f, " + ")?,
                    }
                    match item {
                        OpExpr::Sum(_) => write!(f, "({item})")?,
                        _ => write!(f, "{item}")?,
                    }
                }
                Ok(())
            }
        }
    }
}

impl fmt::Display for Expression {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.body)?;
        if self.plus_hc {
            write!(f, " + h.c.")?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SymbolKind {
    Mode,
    Pauli(PauliAxis),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Symbol {
    pub label: String,
    pub kind: SymbolKind,
}

/// Maps DSL identifiers to subsystems.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct SymbolTable {
    entries: BTreeMap<String, Symbol>,
}

impl SymbolTable {
    pub fn new() -> Self {
        Self::default()
    }

    /// Every boson label names its own annihilation operator, and every
    /// two-level label `L` gets `sx_L`, `sy_L`, `sz_L`.
    pub fn from_labels(space: &SpaceSpec) -> Self {
        let mut table = Self::new();
        for s in space.subsystems() {
            match s.kind {
                SubsystemKind::Boson { .. } => table.insert_mode(&s.label, &s.label),
                SubsystemKind::TwoLevel => {
                    table.insert_pauli(&format!("sx_{}", s.label), &s.label, PauliAxis::X);
                    table.insert_pauli(&format!("sy_{}", s.label), &s.label, PauliAxis::Y);
                    table.insert_pauli(&format!("sz_{}", s.label), &s.label, PauliAxis::Z);
                }
            }
        }
        table
    }

    pub fn insert_mode(&mut self, ident: &str, label: &str) {
        self.entries.insert(ident.to_string(), Symbol { label: label.to_string(), kind: SymbolKind::Mode });
    }

    pub fn insert_pauli(&mut self, ident: &str, label: &str, axis: PauliAxis) {
        self.entries.insert(ident.to_string(), Symbol { label: label.to_string(), kind: SymbolKind::Pauli(axis) });
    }

    pub fn get(&self, ident: &str) -> Option<&Symbol> {
        self.entries.get(ident)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Symbol)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    /// Adds every entry of `other`, overriding on conflict.
    pub fn extend(&mut self, other: &SymbolTable) {
        for (k, v) in &other.entries {
            self.entries.insert(k.clone(), v.clone());
        }
    }
}

fn lower_node(node: &OpExpr, space: &SpaceSpec, table: &SymbolTable) -> Result<SparseOperator, LowerError> {
    Ok(match node {
        OpExpr::Scalar(c) => SparseOperator::scalar(space, *c),
        OpExpr::Atom { name, dagger } => {
            let sym = table.get(name).ok_or_else(|| LowerError::Unresolved(name.clone()))?;
            match sym.kind {
                SymbolKind::Mode if *dagger => opalg::raise(space, &sym.label)?,
                SymbolKind::Mode => opalg::lower(space, &sym.label)?,
                // Pauli matrices are self-adjoint; the marker is accepted and ignored
                SymbolKind::Pauli(axis) => opalg::pauli(space, &sym.label, axis)?,
            }
        }
        OpExpr::Product(items) => {
            let mut it = items.iter();
            let mut acc = lower_node(it.next().expect("non-empty product"), space, table)?;
            for item in it {
                acc = acc.mul(&lower_node(item, space, table)?)?;
            }
            acc
        }
        OpExpr::Sum(terms) => {
            let mut acc = SparseOperator::zero(space);
            for (neg, item) in terms {
                let sign = if *neg { -ONE } else { ONE };
                acc = acc.add_scaled(&lower_node(item, space, table)?, sign)?;
            }
            acc
        }
    })
}

/// Lowers a parsed expression to a sparse operator on `space`.
pub fn lower(expr: &Expression, space: &SpaceSpec, table: &SymbolTable) -> Result<SparseOperator, LowerError> {
    let op = lower_node(&expr.body, space, table)?;
    Ok(if expr.plus_hc { op.plus_hc() } else { op })
}

/// Parses and lowers in one step.
pub fn compile(text: &str, space: &SpaceSpec, table: &SymbolTable) -> Result<SparseOperator, CompileError> {
    let expr = parse(text)?;
    Ok(lower(&expr, space, table)?)
}

#[derive(Debug, Error)]
pub enum CompileError {
    #[error("parse error at {0}")]
    Parse(#[from] ParseError),
    #[error(transparent)]
    Lower(#[from] LowerError),
}
