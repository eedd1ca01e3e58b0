//! Co-safe LTL over finite traces.
//!
//! Formulas are built from atoms `y<k>`, `!`, `&`, `|`, `->`, `F`/`<>`
//! (eventually) and `G`/`[]` (always). The Unicode forms `¬ ∧ ∨ → ◊ □` are
//! accepted as well. Binary operators are ordered `&` > `|` > `->`; `&` and `|`
//! associate to the left, `->` to the right.

mod compile;
mod eval;
mod trace;

pub use compile::{compile_to_spec_net, Guard, SpecMove, SpecNet};
pub use eval::eval_finite_trace;
pub use trace::{induced_trace, occupancy, Trace, TraceError};

use std::fmt;

use thiserror::Error;

use crate::labels::LabelSet;

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub enum Formula {
    Atom(u32),
    Not(Box<Formula>),
    And(Box<Formula>, Box<Formula>),
    Or(Box<Formula>, Box<Formula>),
    Implies(Box<Formula>, Box<Formula>),
    Eventually(Box<Formula>),
    Always(Box<Formula>),
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum LtlError {
    #[error("syntax error at byte {pos}: {msg}")]
    Syntax { pos: usize, msg: String },
    #[error("atom y{atom} outside y1..y{n_reg}")]
    AtomOutOfRange { atom: u32, n_reg: u32 },
    #[error("formula outside the supported fragment: {0}")]
    UnsupportedFragment(String),
    #[error("formula is not co-safe: {0}")]
    NonCosafe(String),
}

impl Formula {
    pub fn atom(k: u32) -> Self {
        Formula::Atom(k)
    }

    pub fn not(f: Formula) -> Self {
        Formula::Not(Box::new(f))
    }

    pub fn and(a: Formula, b: Formula) -> Self {
        Formula::And(Box::new(a), Box::new(b))
    }

    pub fn or(a: Formula, b: Formula) -> Self {
        Formula::Or(Box::new(a), Box::new(b))
    }

    pub fn implies(a: Formula, b: Formula) -> Self {
        Formula::Implies(Box::new(a), Box::new(b))
    }

    pub fn eventually(f: Formula) -> Self {
        Formula::Eventually(Box::new(f))
    }

    pub fn always(f: Formula) -> Self {
        Formula::Always(Box::new(f))
    }

    /// `F (a1 & F (a2 & ... F an))`.
    pub fn sequence(atoms: &[u32]) -> Self {
        let (last, rest) = atoms.split_last().expect("empty sequence");
        rest.iter().rev().fold(Formula::eventually(Formula::Atom(*last)), |acc, &a| {
            Formula::eventually(Formula::and(Formula::Atom(a), acc))
        })
    }

    /// All atoms mentioned by the formula.
    pub fn atoms(&self) -> LabelSet {
        match self {
            Formula::Atom(k) => LabelSet::single(*k),
            Formula::Not(a) | Formula::Eventually(a) | Formula::Always(a) => a.atoms(),
            Formula::And(a, b) | Formula::Or(a, b) | Formula::Implies(a, b) => {
                a.atoms().union(b.atoms())
            }
        }
    }

    fn precedence(&self) -> u8 {
        match self {
            Formula::Implies(..) => 1,
            Formula::Or(..) => 2,
            Formula::And(..) => 3,
            Formula::Not(_) | Formula::Eventually(_) | Formula::Always(_) => 4,
            Formula::Atom(_) => 5,
        }
    }

    fn write_at(&self, f: &mut fmt::Formatter<'_>, min_prec: u8) -> fmt::Result {
        let paren = self.precedence() < min_prec;
        if paren {
            f.write_str("(")?;
        }
        match self {
            Formula::Atom(k) => write!(f, "y{k}")?,
            Formula::Not(a) => {
                f.write_str("!")?;
                a.write_at(f, 4)?;
            }
            Formula::Eventually(a) => {
                f.write_str("F ")?;
                a.write_at(f, 4)?;
            }
            Formula::Always(a) => {
                f.write_str("G ")?;
                a.write_at(f, 4)?;
            }
            Formula::And(a, b) => {
                a.write_at(f, 3)?;
                f.write_str(" & ")?;
                b.write_at(f, 4)?;
            }
            Formula::Or(a, b) => {
                a.write_at(f, 2)?;
                f.write_str(" | ")?;
                b.write_at(f, 3)?;
            }
            Formula::Implies(a, b) => {
                a.write_at(f, 2)?;
                f.write_str(" -> ")?;
                b.write_at(f, 1)?;
            }
        }
        if paren {
            f.write_str(")")?;
        }
        Ok(())
    }
}

impl fmt::Display for Formula {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        self.write_at(f, 0)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
enum Tok {
    LParen,
    RParen,
    Not,
    And,
    Or,
    Implies,
    Eventually,
    Always,
    Atom(u32),
}

fn tokenize(text: &str) -> Result<Vec<(usize, Tok)>, LtlError> {
    let mut out = Vec::new();
    let mut chars = text.char_indices().peekable();
    while let Some(&(pos, c)) = chars.peek() {
        let syntax = |msg: String| LtlError::Syntax { pos, msg };
        match c {
            c if c.is_whitespace() => {
                chars.next();
            }
            '(' | ')' | '!' | '¬' | '&' | '∧' | '|' | '∨' | '→' | '◊' | '◇' | '□' => {
                chars.next();
                let tok = match c {
                    '(' => Tok::LParen,
                    ')' => Tok::RParen,
                    '!' | '¬' => Tok::Not,
                    '&' | '∧' => Tok::And,
                    '|' | '∨' => Tok::Or,
                    '→' => Tok::Implies,
                    '◊' | '◇' => Tok::Eventually,
                    _ => Tok::Always,
                };
                out.push((pos, tok));
            }
            '-' => {
                chars.next();
                match chars.next() {
                    Some((_, '>')) => out.push((pos, Tok::Implies)),
                    _ => return Err(syntax("expected `->`".into())),
                }
            }
            '<' => {
                chars.next();
                match chars.next() {
                    Some((_, '>')) => out.push((pos, Tok::Eventually)),
                    _ => return Err(syntax("expected `<>`".into())),
                }
            }
            '[' => {
                chars.next();
                match chars.next() {
                    Some((_, ']')) => out.push((pos, Tok::Always)),
                    _ => return Err(syntax("expected `[]`".into())),
                }
            }
            c if c.is_ascii_alphanumeric() || c == '_' => {
                let mut word = String::new();
                while let Some(&(_, c)) = chars.peek() {
                    if c.is_ascii_alphanumeric() || c == '_' {
                        word.push(c);
                        chars.next();
                    } else {
                        break;
                    }
                }
                let tok = match word.as_str() {
                    "F" => Tok::Eventually,
                    "G" => Tok::Always,
                    w => match w.strip_prefix('y').map(str::parse::<u32>) {
                        Some(Ok(k)) => Tok::Atom(k),
                        _ => return Err(syntax(format!("unknown identifier `{word}`"))),
                    },
                };
                out.push((pos, tok));
            }
            other => return Err(syntax(format!("unexpected character `{other}`"))),
        }
    }
    Ok(out)
}

struct Parser {
    toks: Vec<(usize, Tok)>,
    at: usize,
    end: usize,
    n_reg: u32,
}

impl Parser {
    fn peek(&self) -> Option<&Tok> {
        self.toks.get(self.at).map(|(_, t)| t)
    }

    fn pos(&self) -> usize {
        self.toks.get(self.at).map_or(self.end, |(p, _)| *p)
    }

    fn error<T>(&self, msg: impl Into<String>) -> Result<T, LtlError> {
        Err(LtlError::Syntax {
            pos: self.pos(),
            msg: msg.into(),
        })
    }

    fn implies(&mut self) -> Result<Formula, LtlError> {
        let lhs = self.or()?;
        if self.peek() == Some(&Tok::Implies) {
            self.at += 1;
            let rhs = self.implies()?;
            return Ok(Formula::implies(lhs, rhs));
        }
        Ok(lhs)
    }

    fn or(&mut self) -> Result<Formula, LtlError> {
        let mut lhs = self.and()?;
        while self.peek() == Some(&Tok::Or) {
            self.at += 1;
            lhs = Formula::or(lhs, self.and()?);
        }
        Ok(lhs)
    }

    fn and(&mut self) -> Result<Formula, LtlError> {
        let mut lhs = self.unary()?;
        while self.peek() == Some(&Tok::And) {
            self.at += 1;
            lhs = Formula::and(lhs, self.unary()?);
        }
        Ok(lhs)
    }

    fn unary(&mut self) -> Result<Formula, LtlError> {
        match self.peek() {
            Some(Tok::Not) => {
                self.at += 1;
                Ok(Formula::not(self.unary()?))
            }
            Some(Tok::Eventually) => {
                self.at += 1;
                Ok(Formula::eventually(self.unary()?))
            }
            Some(Tok::Always) => {
                self.at += 1;
                Ok(Formula::always(self.unary()?))
            }
            _ => self.primary(),
        }
    }

    fn primary(&mut self) -> Result<Formula, LtlError> {
        match self.peek().cloned() {
            Some(Tok::Atom(k)) => {
                if k == 0 || k > self.n_reg {
                    return Err(LtlError::AtomOutOfRange {
                        atom: k,
                        n_reg: self.n_reg,
                    });
                }
                self.at += 1;
                Ok(Formula::Atom(k))
            }
            Some(Tok::LParen) => {
                self.at += 1;
                let inner = self.implies()?;
                if self.peek() != Some(&Tok::RParen) {
                    return self.error("expected `)`");
                }
                self.at += 1;
                Ok(inner)
            }
            Some(t) => self.error(format!("unexpected token {t:?}")),
            None => self.error("unexpected end of formula"),
        }
    }
}

/// Parses a formula whose atoms must lie in `y1 ..= y{n_reg}`.
pub fn parse_ltl(text: &str, n_reg: u32) -> Result<Formula, LtlError> {
    let n_reg = n_reg.min(crate::labels::MAX_ATOMS);
    let mut p = Parser {
        toks: tokenize(text)?,
        at: 0,
        end: text.len(),
        n_reg,
    };
    let f = p.implies()?;
    if p.at != p.toks.len() {
        return p.error("trailing input");
    }
    Ok(f)
}

/// Negation normal form: negations only on atoms, no implications.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub enum Nnf {
    Lit { atom: u32, positive: bool },
    And(Box<Nnf>, Box<Nnf>),
    Or(Box<Nnf>, Box<Nnf>),
    Eventually(Box<Nnf>),
    Always(Box<Nnf>),
}

impl Nnf {
    pub fn from_formula(f: &Formula) -> Nnf {
        Self::convert(f, true)
    }

    fn convert(f: &Formula, positive: bool) -> Nnf {
        let bin = |a: &Formula, pa: bool, b: &Formula, pb: bool, conj: bool| {
            let (a, b) = (Box::new(Self::convert(a, pa)), Box::new(Self::convert(b, pb)));
            if conj {
                Nnf::And(a, b)
            } else {
                Nnf::Or(a, b)
            }
        };
        match f {
            Formula::Atom(k) => Nnf::Lit { atom: *k, positive },
            Formula::Not(a) => Self::convert(a, !positive),
            Formula::And(a, b) => bin(a, positive, b, positive, positive),
            Formula::Or(a, b) => bin(a, positive, b, positive, !positive),
            // a -> b == !a | b;  !(a -> b) == a & !b
            Formula::Implies(a, b) => bin(a, !positive, b, positive, !positive),
            Formula::Eventually(a) => {
                let inner = Box::new(Self::convert(a, positive));
                if positive {
                    Nnf::Eventually(inner)
                } else {
                    Nnf::Always(inner)
                }
            }
            Formula::Always(a) => {
                let inner = Box::new(Self::convert(a, positive));
                if positive {
                    Nnf::Always(inner)
                } else {
                    Nnf::Eventually(inner)
                }
            }
        }
    }

    pub fn is_propositional(&self) -> bool {
        match self {
            Nnf::Lit { .. } => true,
            Nnf::And(a, b) | Nnf::Or(a, b) => a.is_propositional() && b.is_propositional(),
            Nnf::Eventually(_) | Nnf::Always(_) => false,
        }
    }

    /// Evaluates a propositional formula against one observation.
    pub fn holds_now(&self, obs: LabelSet) -> Option<bool> {
        match self {
            Nnf::Lit { atom, positive } => Some(obs.contains(*atom) == *positive),
            Nnf::And(a, b) => Some(a.holds_now(obs)? && b.holds_now(obs)?),
            Nnf::Or(a, b) => Some(a.holds_now(obs)? || b.holds_now(obs)?),
            _ => None,
        }
    }

    /// Every satisfying trace has a finite good prefix: each disjunctive branch
    /// carries at least one propositional or eventuality obligation. Pure safety
    /// (`G` with nothing to reach) is rejected.
    fn has_guarantee(&self) -> bool {
        match self {
            Nnf::Lit { .. } | Nnf::Eventually(_) => true,
            Nnf::Always(_) => false,
            Nnf::And(a, b) => a.has_guarantee() || b.has_guarantee(),
            Nnf::Or(a, b) => a.has_guarantee() && b.has_guarantee(),
        }
    }

    /// Checks the supported fragment: `G` only over propositional formulas.
    pub fn check_fragment(&self) -> Result<(), LtlError> {
        match self {
            Nnf::Lit { .. } => Ok(()),
            Nnf::And(a, b) | Nnf::Or(a, b) => {
                a.check_fragment()?;
                b.check_fragment()
            }
            Nnf::Eventually(a) => a.check_fragment(),
            Nnf::Always(a) if a.is_propositional() => Ok(()),
            Nnf::Always(a) => Err(LtlError::UnsupportedFragment(format!(
                "`G` applied to the temporal formula {a:?}"
            ))),
        }
    }

    pub fn check_cosafe(&self) -> Result<(), LtlError> {
        if self.has_guarantee() {
            Ok(())
        } else {
            Err(LtlError::NonCosafe(
                "some branch is a pure safety obligation with no finite witness".into(),
            ))
        }
    }
}
