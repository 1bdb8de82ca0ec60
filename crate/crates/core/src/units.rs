//! Dimensional analysis over SI base dimensions.
//!
//! Exponents are exact rationals so that `sqrt` and squaring never round.
//! The [`UnitTracker`] follows a prefix sequence as it is generated and
//! reports which units the next token must carry; [`units_mask`] turns that
//! into a one-step-lookahead filter over a token library.

use std::fmt;
use std::ops::{Add, Neg, Sub};

use num_rational::Rational32;
use num_traits::Zero;
use serde::de::{self, Deserializer};
use serde::ser::{SerializeSeq, Serializer};
use serde::{Deserialize, Serialize};

use crate::expr::{Node, Op, TokenLibrary};

pub const N_DIMS: usize = 7;

/// Exponents of (length, mass, time, current, temperature, amount, luminosity).
#[derive(Clone, Copy, PartialEq, Eq, Hash, Default)]
pub struct UnitVector(pub [Rational32; N_DIMS]);

impl UnitVector {
    pub const DIMENSIONLESS: UnitVector = UnitVector([Rational32::new_raw(0, 1); N_DIMS]);

    pub fn from_ints(exps: [i32; N_DIMS]) -> Self {
        UnitVector(exps.map(Rational32::from_integer))
    }

    pub fn is_dimensionless(&self) -> bool {
        self.0.iter().all(Zero::is_zero)
    }

    pub fn scale(&self, factor: Rational32) -> Self {
        UnitVector(self.0.map(|e| e * factor))
    }

    pub fn length() -> Self {
        Self::from_ints([1, 0, 0, 0, 0, 0, 0])
    }

    pub fn time() -> Self {
        Self::from_ints([0, 0, 1, 0, 0, 0, 0])
    }

    /// Energy per unit mass, i.e. velocity squared.
    pub fn specific_energy() -> Self {
        Self::from_ints([2, 0, -2, 0, 0, 0, 0])
    }
}

impl Add for UnitVector {
    type Output = UnitVector;
    fn add(self, rhs: UnitVector) -> UnitVector {
        let mut out = self.0;
        for (o, r) in out.iter_mut().zip(rhs.0) {
            *o += r;
        }
        UnitVector(out)
    }
}

impl Sub for UnitVector {
    type Output = UnitVector;
    fn sub(self, rhs: UnitVector) -> UnitVector {
        self + (-rhs)
    }
}

impl Neg for UnitVector {
    type Output = UnitVector;
    fn neg(self) -> UnitVector {
        UnitVector(self.0.map(|e| -e))
    }
}

impl fmt::Debug for UnitVector {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[")?;
        for (i, e) in self.0.iter().enumerate() {
            if i > 0 {
                write!(f, ", ")?;
            }
            write!(f, "{e}")?;
        }
        write!(f, "]")
    }
}

impl Serialize for UnitVector {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        let mut seq = serializer.serialize_seq(Some(N_DIMS))?;
        for e in &self.0 {
            if e.is_integer() {
                seq.serialize_element(&e.to_integer())?;
            } else {
                seq.serialize_element(&format!("{}/{}", e.numer(), e.denom()))?;
            }
        }
        seq.end()
    }
}

#[derive(Deserialize)]
#[serde(untagged)]
enum ExponentRepr {
    Int(i32),
    Text(String),
}

impl<'de> Deserialize<'de> for UnitVector {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let raw = Vec::<ExponentRepr>::deserialize(deserializer)?;
        if raw.len() != N_DIMS {
            return Err(de::Error::invalid_length(raw.len(), &"7 unit exponents"));
        }
        let mut out = [Rational32::zero(); N_DIMS];
        for (slot, r) in out.iter_mut().zip(raw) {
            *slot = match r {
                ExponentRepr::Int(i) => Rational32::from_integer(i),
                ExponentRepr::Text(s) => parse_rational(&s).map_err(de::Error::custom)?,
            };
        }
        Ok(UnitVector(out))
    }
}

fn parse_rational(s: &str) -> Result<Rational32, String> {
    let s = s.trim();
    match s.split_once('/') {
        Some((n, d)) => {
            let n: i32 = n.trim().parse().map_err(|_| format!("bad exponent {s:?}"))?;
            let d: i32 = d.trim().parse().map_err(|_| format!("bad exponent {s:?}"))?;
            if d == 0 {
                return Err(format!("zero denominator in {s:?}"));
            }
            Ok(Rational32::new(n, d))
        }
        None => s
            .parse::<i32>()
            .map(Rational32::from_integer)
            .map_err(|_| format!("bad exponent {s:?}")),
    }
}

/// Declared units of a token. `Free` constants adapt to whatever their slot requires.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UnitSpec {
    Exact(UnitVector),
    Free,
}

impl Default for UnitSpec {
    fn default() -> Self {
        UnitSpec::Exact(UnitVector::DIMENSIONLESS)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum UnitConstraint {
    Exact(UnitVector),
    Free,
    Contradiction,
}

impl UnitConstraint {
    fn exact(&self) -> Option<UnitVector> {
        match self {
            UnitConstraint::Exact(u) => Some(*u),
            _ => None,
        }
    }
}

fn is_transcendental(op: Op) -> bool {
    matches!(op, Op::Exp | Op::Log | Op::Cos | Op::Sin)
}

/// Bottom-up units of `op` applied to children with the given units.
pub fn combine_units(op: Op, children: &[UnitConstraint]) -> UnitConstraint {
    use UnitConstraint::*;
    assert_eq!(children.len(), op.arity(), "child count must equal arity of {op:?}");
    if children.contains(&Contradiction) {
        return Contradiction;
    }
    let half = Rational32::new(1, 2);
    let two = Rational32::from_integer(2);
    match op {
        Op::Add | Op::Sub => match (children[0], children[1]) {
            (Exact(a), Exact(b)) if a == b => Exact(a),
            (Exact(_), Exact(_)) => Contradiction,
            (Exact(a), Free) | (Free, Exact(a)) => Exact(a),
            _ => Free,
        },
        Op::Mul => match (children[0], children[1]) {
            (Exact(a), Exact(b)) => Exact(a + b),
            _ => Free,
        },
        Op::Div => match (children[0], children[1]) {
            (Exact(a), Exact(b)) => Exact(a - b),
            _ => Free,
        },
        Op::Inv => match children[0] {
            Exact(a) => Exact(-a),
            other => other,
        },
        Op::Neg => children[0],
        Op::Sqrt => match children[0] {
            Exact(a) => Exact(a.scale(half)),
            other => other,
        },
        Op::Square => match children[0] {
            Exact(a) => Exact(a.scale(two)),
            other => other,
        },
        Op::Exp | Op::Log | Op::Cos | Op::Sin => match children[0] {
            Exact(a) if !a.is_dimensionless() => Contradiction,
            _ => Exact(UnitVector::DIMENSIONLESS),
        },
    }
}

/// Resolve the units a completed subtree presents to a slot requiring `required`.
fn settle(actual: UnitConstraint, required: UnitConstraint) -> UnitConstraint {
    match (actual, required) {
        (UnitConstraint::Contradiction, _) | (_, UnitConstraint::Contradiction) => {
            UnitConstraint::Contradiction
        }
        (UnitConstraint::Exact(a), UnitConstraint::Exact(r)) if a != r => {
            UnitConstraint::Contradiction
        }
        (UnitConstraint::Free, UnitConstraint::Exact(r)) => UnitConstraint::Exact(r),
        (a, _) => a,
    }
}

#[derive(Clone, Debug)]
struct Frame {
    op: Op,
    required: UnitConstraint,
    done: Vec<UnitConstraint>,
}

/// Incremental unit bookkeeping over a prefix sequence.
#[derive(Clone, Debug)]
pub struct UnitTracker {
    target: UnitConstraint,
    stack: Vec<Frame>,
    root: Option<UnitConstraint>,
    contradiction: bool,
}

impl UnitTracker {
    /// `target = None` disables dimensional analysis: every slot is `Free`.
    pub fn new(target: Option<UnitVector>) -> Self {
        UnitTracker {
            target: target.map_or(UnitConstraint::Free, UnitConstraint::Exact),
            stack: Vec::new(),
            root: None,
            contradiction: false,
        }
    }

    pub fn is_contradiction(&self) -> bool {
        self.contradiction
    }

    /// Units of the completed tree, once the sequence has closed.
    pub fn root_units(&self) -> Option<UnitConstraint> {
        self.root
    }

    /// Requirement on the next token placed.
    pub fn next_requirement(&self) -> UnitConstraint {
        use UnitConstraint::*;
        if self.contradiction {
            return Contradiction;
        }
        let Some(frame) = self.stack.last() else {
            return self.target;
        };
        let r = frame.required;
        match frame.op {
            Op::Add | Op::Sub => match (frame.done.first(), r) {
                (_, Exact(_)) => r,
                (Some(first), _) => match first {
                    Exact(u) => Exact(*u),
                    _ => Free,
                },
                (None, _) => Free,
            },
            Op::Mul => match (frame.done.first().and_then(UnitConstraint::exact), r.exact()) {
                (Some(a), Some(req)) => Exact(req - a),
                _ => Free,
            },
            Op::Div => match (frame.done.first().and_then(UnitConstraint::exact), r.exact()) {
                (Some(a), Some(req)) => Exact(a - req),
                _ => Free,
            },
            Op::Inv => r.exact().map_or(Free, |u| Exact(-u)),
            Op::Neg => r,
            Op::Sqrt => r.exact().map_or(Free, |u| Exact(u.scale(Rational32::from_integer(2)))),
            Op::Square => r.exact().map_or(Free, |u| Exact(u.scale(Rational32::new(1, 2)))),
            Op::Exp | Op::Log | Op::Cos | Op::Sin => Exact(UnitVector::DIMENSIONLESS),
        }
    }

    /// Whether placing a token with this node and declared units at the next
    /// slot is immediately consistent.
    pub fn admits(&self, node: Node, units: UnitSpec) -> bool {
        let req = self.next_requirement();
        match req {
            UnitConstraint::Contradiction => false,
            UnitConstraint::Free => true,
            UnitConstraint::Exact(r) => match node {
                Node::Op(op) => !(is_transcendental(op) && !r.is_dimensionless()),
                _ => match units {
                    UnitSpec::Free => true,
                    UnitSpec::Exact(u) => u == r,
                },
            },
        }
    }

    pub fn push(&mut self, node: Node, units: UnitSpec) {
        if self.contradiction || self.root.is_some() {
            self.contradiction = true;
            return;
        }
        let req = self.next_requirement();
        match node {
            Node::Op(op) => {
                if let (true, UnitConstraint::Exact(r)) = (is_transcendental(op), req) {
                    if !r.is_dimensionless() {
                        self.contradiction = true;
                        return;
                    }
                }
                self.stack.push(Frame { op, required: req, done: Vec::with_capacity(2) });
            }
            _ => {
                let declared = match units {
                    UnitSpec::Exact(u) => UnitConstraint::Exact(u),
                    UnitSpec::Free => UnitConstraint::Free,
                };
                self.complete(settle(declared, req));
            }
        }
    }

    fn complete(&mut self, mut units: UnitConstraint) {
        loop {
            if units == UnitConstraint::Contradiction {
                self.contradiction = true;
                return;
            }
            let Some(frame) = self.stack.last_mut() else {
                self.root = Some(units);
                return;
            };
            frame.done.push(units);
            if frame.done.len() < frame.op.arity() {
                return;
            }
            let frame = self.stack.pop().expect("frame present");
            units = settle(combine_units(frame.op, &frame.done), frame.required);
        }
    }
}

/// Constraint on the next token after `partial`, given the target units of the root.
pub fn required_units(
    partial: &[usize],
    library: &TokenLibrary,
    target_units: Option<UnitVector>,
) -> UnitConstraint {
    let mut tracker = UnitTracker::new(target_units);
    for &id in partial {
        let tok = library.token(id);
        tracker.push(tok.node, tok.units);
    }
    tracker.next_requirement()
}

/// Whether a complete sequence is dimensionally consistent with the target.
/// Always true when dimensional analysis is off.
pub fn units_consistent(tokens: &[usize], library: &TokenLibrary) -> bool {
    let Some(target) = library.target_units() else {
        return true;
    };
    let mut tracker = UnitTracker::new(Some(target));
    for &id in tokens {
        let tok = library.token(id);
        tracker.push(tok.node, tok.units);
    }
    !tracker.is_contradiction()
}

/// Tokens that can follow `partial` without an immediate unit contradiction.
pub fn units_mask(
    partial: &[usize],
    library: &TokenLibrary,
    target_units: Option<UnitVector>,
) -> Vec<bool> {
    let mut tracker = UnitTracker::new(target_units);
    for &id in partial {
        let tok = library.token(id);
        tracker.push(tok.node, tok.units);
    }
    library.tokens().iter().map(|t| tracker.admits(t.node, t.units)).collect()
}
