//! Exact-recovery decision: a candidate matches a target when their ratio or
//! their difference is constant over the input domain.
//!
//! Expressions are first normalized by a small terminating rewrite system,
//! then probed numerically at quasi-random points.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::expr::{evaluate, Expression, Node, Op, Realization};

pub const PROBE_POINTS: usize = 256;
pub const PROBE_TOLERANCE: f64 = 1e-6;
/// Ratio probing skips points where the target is this close to zero and
/// rejects a ratio this close to zero.
pub const RATIO_SKIP: f64 = 1e-9;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Rule {
    Ratio,
    Difference,
}

#[derive(Clone, Debug, PartialEq)]
enum Tree {
    Leaf(Node),
    Unary(Op, Box<Tree>),
    Binary(Op, Box<Tree>, Box<Tree>),
}

fn lit(v: f64) -> Tree {
    Tree::Leaf(Node::Lit(v))
}

fn is_lit(t: &Tree, v: f64) -> bool {
    matches!(t, Tree::Leaf(Node::Lit(x)) if *x == v)
}

impl Tree {
    fn from_prefix(nodes: &[Node], pos: &mut usize) -> Tree {
        let n = nodes[*pos];
        *pos += 1;
        match n {
            Node::Op(op) if op.arity() == 2 => {
                let a = Tree::from_prefix(nodes, pos);
                let b = Tree::from_prefix(nodes, pos);
                Tree::Binary(op, Box::new(a), Box::new(b))
            }
            Node::Op(op) => Tree::Unary(op, Box::new(Tree::from_prefix(nodes, pos))),
            leaf => Tree::Leaf(leaf),
        }
    }

    fn to_prefix(&self, out: &mut Vec<Node>) {
        match self {
            Tree::Leaf(n) => out.push(*n),
            Tree::Unary(op, a) => {
                out.push(Node::Op(*op));
                a.to_prefix(out);
            }
            Tree::Binary(op, a, b) => {
                out.push(Node::Op(*op));
                a.to_prefix(out);
                b.to_prefix(out);
            }
        }
    }

    fn key(&self) -> Vec<(u8, u64)> {
        let mut nodes = Vec::new();
        self.to_prefix(&mut nodes);
        nodes.iter().map(Node::key).collect()
    }

    fn as_lit(&self) -> Option<f64> {
        match self {
            Tree::Leaf(Node::Lit(v)) => Some(*v),
            _ => None,
        }
    }
}

fn fold_unary(op: Op, a: f64) -> Option<f64> {
    let v = match op {
        Op::Inv if a.abs() >= crate::expr::MIN_DENOMINATOR => 1.0 / a,
        Op::Sqrt if a >= 0.0 => a.sqrt(),
        Op::Square => a * a,
        Op::Neg => -a,
        Op::Exp => a.exp(),
        Op::Log if a > 0.0 => a.ln(),
        Op::Cos => a.cos(),
        Op::Sin => a.sin(),
        _ => return None,
    };
    v.is_finite().then_some(v)
}

fn fold_binary(op: Op, a: f64, b: f64) -> Option<f64> {
    let v = match op {
        Op::Add => a + b,
        Op::Sub => a - b,
        Op::Mul => a * b,
        Op::Div if b.abs() >= crate::expr::MIN_DENOMINATOR => a / b,
        _ => return None,
    };
    v.is_finite().then_some(v)
}

fn rewrite(t: Tree) -> Tree {
    use Tree::*;
    match t {
        Leaf(_) => t,
        Unary(op, a) => {
            let a = rewrite(*a);
            if let Some(v) = a.as_lit().and_then(|x| fold_unary(op, x)) {
                return lit(v);
            }
            match (op, a) {
                (Op::Neg, Unary(Op::Neg, x)) | (Op::Inv, Unary(Op::Inv, x)) => *x,
                (Op::Exp, Unary(Op::Log, x)) | (Op::Log, Unary(Op::Exp, x)) => *x,
                (Op::Square, Unary(Op::Sqrt, x)) => *x,
                (Op::Inv, Binary(Op::Div, x, y)) => Binary(Op::Div, y, x),
                (op, a) => Unary(op, Box::new(a)),
            }
        }
        Binary(op, a, b) => {
            let (a, b) = (rewrite(*a), rewrite(*b));
            if let (Some(x), Some(y)) = (a.as_lit(), b.as_lit()) {
                if let Some(v) = fold_binary(op, x, y) {
                    return lit(v);
                }
            }
            match op {
                Op::Add if is_lit(&b, 0.0) => a,
                Op::Add if is_lit(&a, 0.0) => b,
                Op::Add => match b {
                    Unary(Op::Neg, y) => Binary(Op::Sub, Box::new(a), y),
                    b => ordered(Op::Add, a, b),
                },
                Op::Sub if is_lit(&b, 0.0) => a,
                Op::Sub if is_lit(&a, 0.0) => Unary(Op::Neg, Box::new(b)),
                Op::Sub if a == b => lit(0.0),
                Op::Sub => match b {
                    Unary(Op::Neg, y) => ordered(Op::Add, a, *y),
                    b => Binary(Op::Sub, Box::new(a), Box::new(b)),
                },
                Op::Mul if is_lit(&a, 1.0) => b,
                Op::Mul if is_lit(&b, 1.0) => a,
                Op::Mul if is_lit(&a, 0.0) || is_lit(&b, 0.0) => lit(0.0),
                Op::Mul if a == b => Unary(Op::Square, Box::new(a)),
                Op::Mul => match (a, b) {
                    (x, Unary(Op::Inv, y)) | (Unary(Op::Inv, y), x) => Binary(Op::Div, Box::new(x), y),
                    (a, b) => ordered(Op::Mul, a, b),
                },
                Op::Div if is_lit(&b, 1.0) => a,
                Op::Div if a == b => lit(1.0),
                Op::Div if is_lit(&a, 1.0) => Unary(Op::Inv, Box::new(b)),
                Op::Div => match b {
                    Unary(Op::Inv, y) => ordered(Op::Mul, a, *y),
                    b => Binary(Op::Div, Box::new(a), Box::new(b)),
                },
                _ => Binary(op, Box::new(a), Box::new(b)),
            }
        }
    }
}

fn ordered(op: Op, a: Tree, b: Tree) -> Tree {
    if a.key().cmp(&b.key()) == Ordering::Greater {
        Tree::Binary(op, Box::new(b), Box::new(a))
    } else {
        Tree::Binary(op, Box::new(a), Box::new(b))
    }
}

/// Rewrite-normalize `expr`; the result evaluates identically wherever both are defined.
pub fn simplify(expr: &Expression) -> Expression {
    let mut pos = 0;
    let mut tree = Tree::from_prefix(expr.nodes(), &mut pos);
    for _ in 0..64 {
        let next = rewrite(tree.clone());
        if next == tree {
            break;
        }
        tree = next;
    }
    let mut nodes = Vec::with_capacity(expr.complexity());
    tree.to_prefix(&mut nodes);
    Expression::new(nodes, expr.n_class(), expr.n_spe()).expect("rewriting preserves well-formedness")
}

fn radical_inverse(mut i: usize, base: usize) -> f64 {
    let (mut f, mut r) = (1.0, 0.0);
    while i > 0 {
        f /= base as f64;
        r += f * (i % base) as f64;
        i /= base;
    }
    r
}

const PRIMES: [usize; 12] = [2, 3, 5, 7, 11, 13, 17, 19, 23, 29, 31, 37];

/// `n` Halton points inside the given box.
pub fn halton_points(ranges: &[(f64, f64)], n: usize) -> Vec<Vec<f64>> {
    (1..=n)
        .map(|i| {
            ranges
                .iter()
                .enumerate()
                .map(|(d, (lo, hi))| lo + (hi - lo) * radical_inverse(i, PRIMES[d % PRIMES.len()]))
                .collect()
        })
        .collect()
}

fn eval_point(expr: &Expression, point: &[f64]) -> Option<f64> {
    if expr.uses_class() || expr.uses_spe() {
        return None;
    }
    let columns = point.iter().map(|v| vec![*v]).collect();
    let r = Realization::new("probe", columns, vec![0.0]).ok()?;
    let class = vec![0.0; expr.n_class()];
    let spe = vec![0.0; expr.n_spe()];
    let out = evaluate(expr, &r, &class, &spe).ok()?;
    (!out.invalid).then(|| out.values[0])
}

fn common_value(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let (lo, hi) = values.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(*v), b.max(*v)));
    let mean = values.iter().sum::<f64>() / values.len() as f64;
    (hi - lo < PROBE_TOLERANCE * (1.0 + mean.abs())).then_some(mean)
}

/// The value `expr` takes everywhere in `var_ranges`, if it is constant there.
///
/// Every adjustable constant must already be bound; otherwise `None`.
pub fn constancy_probe(expr: &Expression, var_ranges: &[(f64, f64)], n_points: usize) -> Option<f64> {
    let values = halton_points(var_ranges, n_points.max(32))
        .iter()
        .map(|p| eval_point(expr, p))
        .collect::<Option<Vec<f64>>>()?;
    common_value(&values)
}

fn combine(op: Op, a: &Expression, b: &Expression) -> Expression {
    let mut nodes = Vec::with_capacity(1 + a.complexity() + b.complexity());
    nodes.push(Node::Op(op));
    nodes.extend_from_slice(a.nodes());
    nodes.extend_from_slice(b.nodes());
    Expression::new(nodes, a.n_class().max(b.n_class()), a.n_spe().max(b.n_spe())).expect("two complete trees")
}

/// Which rule, if any, shows `candidate` and `target` equivalent.
///
/// Both must have every adjustable constant bound.
pub fn equivalence_rule(candidate: &Expression, target: &Expression, var_ranges: &[(f64, f64)]) -> Option<Rule> {
    let points = halton_points(var_ranges, PROBE_POINTS);
    let ratio = simplify(&combine(Op::Div, candidate, target));
    let mut values = Vec::with_capacity(points.len());
    let mut ratio_ok = true;
    for p in &points {
        match eval_point(target, p) {
            Some(t) if t.abs() < RATIO_SKIP => continue,
            Some(_) => {}
            None => {
                ratio_ok = false;
                break;
            }
        }
        match eval_point(&ratio, p) {
            Some(v) => values.push(v),
            None => {
                ratio_ok = false;
                break;
            }
        }
    }
    // a vanishing ratio only says the candidate is zero
    if ratio_ok && common_value(&values).is_some_and(|v| v.abs() > RATIO_SKIP) {
        return Some(Rule::Ratio);
    }
    let diff = simplify(&combine(Op::Sub, candidate, target));
    constancy_probe(&diff, var_ranges, PROBE_POINTS).map(|_| Rule::Difference)
}

/// `expr` times one extra realization-specific constant, appended after the existing ones.
///
/// Fitting this form lets the ratio rule see a candidate whose constants
/// match the target only up to an overall factor.
pub fn with_free_factor(expr: &Expression) -> Expression {
    let mut nodes = vec![Node::Op(Op::Mul), Node::Spe(expr.n_spe())];
    nodes.extend_from_slice(expr.nodes());
    Expression::new(nodes, expr.n_class(), expr.n_spe() + 1).expect("extended tree is complete")
}

/// `expr` plus one extra realization-specific constant, the additive
/// counterpart of [`with_free_factor`].
pub fn with_free_offset(expr: &Expression) -> Expression {
    let mut nodes = vec![Node::Op(Op::Add)];
    nodes.extend_from_slice(expr.nodes());
    nodes.push(Node::Spe(expr.n_spe()));
    Expression::new(nodes, expr.n_class(), expr.n_spe() + 1).expect("extended tree is complete")
}

pub fn is_equivalent(candidate: &Expression, target: &Expression, var_ranges: &[(f64, f64)]) -> bool {
    equivalence_rule(candidate, target, var_ranges).is_some()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::expr::{parse_infix, LibrarySpec, TokenLibrary};

    fn lib() -> TokenLibrary {
        let spec: LibrarySpec = serde_json::from_value(serde_json::json!({
            "operators": ["+", "-", "*", "/", "inv", "sqrt", "sq", "neg", "exp", "log", "cos", "sin"],
            "variables": [{"name": "x"}],
        }))
        .unwrap();
        TokenLibrary::from_spec(&spec).unwrap()
    }

    fn s(text: &str) -> String {
        let l = lib();
        simplify(&parse_infix(text, &l).unwrap()).to_infix(l.names())
    }

    #[test]
    fn identities_fold_away() {
        assert_eq!(s("x*1 + 0"), "x");
        assert_eq!(s("exp(log(x))"), "x");
        assert_eq!(s("1/(1/x)"), "x");
        assert_eq!(s("-(-x)"), "x");
        assert_eq!(s("x - x"), "0");
        assert_eq!(s("2*3 + x/x"), "7");
        assert_eq!(s("sqrt(x^2)"), "sqrt(x^2)");
    }

    #[test]
    fn commutative_operands_are_ordered() {
        assert_eq!(s("x*2"), s("2*x"));
        assert_eq!(s("exp(x) + x"), s("x + exp(x)"));
    }

    #[test]
    fn probe_examples() {
        let l = lib();
        let p = |t: &str| constancy_probe(&parse_infix(t, &l).unwrap(), &[(1.0, 2.0)], 64);
        assert_eq!(p("3"), Some(3.0));
        assert_eq!(p("x/x"), Some(1.0));
        assert!((p("sin(x)^2 + cos(x)^2").unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(p("x"), None);
        assert_eq!(p("log(x - 5)"), None);
    }

    #[test]
    fn halton_stays_in_box() {
        let pts = halton_points(&[(0.5, 6.0), (-1.0, 1.0)], 256);
        assert!(pts.iter().all(|p| p[0] >= 0.5 && p[0] <= 6.0 && p[1].abs() <= 1.0));
    }
}
