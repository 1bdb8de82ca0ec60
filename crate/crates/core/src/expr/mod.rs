//! Token grammar, prefix expressions, and protected batched evaluation.

mod data;
mod eval;
mod infix;
mod library;

pub use data::{DatasetManifest, MultiDataset, Realization};
pub use eval::{evaluate, evaluate_multi, EvalOutput, Inputs, Tape, MIN_DENOMINATOR};
pub use infix::parse_infix;
pub use library::{
    ConstantSpec, FixedSpec, LibrarySpec, Token, TokenKind, TokenLibrary, VariableSpec,
};

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Hard cap on prefix length.
pub const MAX_LENGTH: usize = 35;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Op {
    Add,
    Sub,
    Mul,
    Div,
    Inv,
    Sqrt,
    Square,
    Neg,
    Exp,
    Log,
    Cos,
    Sin,
}

impl Op {
    pub const ALL: [Op; 12] = [
        Op::Add,
        Op::Sub,
        Op::Mul,
        Op::Div,
        Op::Inv,
        Op::Sqrt,
        Op::Square,
        Op::Neg,
        Op::Exp,
        Op::Log,
        Op::Cos,
        Op::Sin,
    ];

    pub fn arity(self) -> usize {
        match self {
            Op::Add | Op::Sub | Op::Mul | Op::Div => 2,
            _ => 1,
        }
    }

    pub fn symbol(self) -> &'static str {
        match self {
            Op::Add => "+",
            Op::Sub => "-",
            Op::Mul => "*",
            Op::Div => "/",
            Op::Inv => "inv",
            Op::Sqrt => "sqrt",
            Op::Square => "sq",
            Op::Neg => "neg",
            Op::Exp => "exp",
            Op::Log => "log",
            Op::Cos => "cos",
            Op::Sin => "sin",
        }
    }

    pub fn from_symbol(s: &str) -> Option<Op> {
        let op = match s {
            "+" | "add" => Op::Add,
            "-" | "sub" => Op::Sub,
            "*" | "mul" => Op::Mul,
            "/" | "div" => Op::Div,
            "inv" | "1/x" => Op::Inv,
            "sqrt" => Op::Sqrt,
            "sq" | "n2" | "square" => Op::Square,
            "neg" => Op::Neg,
            "exp" => Op::Exp,
            "log" => Op::Log,
            "cos" => Op::Cos,
            "sin" => Op::Sin,
            _ => return None,
        };
        Some(op)
    }
}

/// One element of a prefix sequence.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum Node {
    Op(Op),
    Var(usize),
    /// Fixed numeric constant, including literals introduced by parsing.
    Lit(f64),
    /// Class constant: one value shared by every realization.
    Class(usize),
    /// Realization-specific constant: one value per realization.
    Spe(usize),
}

impl Node {
    pub fn arity(&self) -> usize {
        match self {
            Node::Op(op) => op.arity(),
            _ => 0,
        }
    }

    /// Identity key that treats literals bitwise.
    pub(crate) fn key(&self) -> (u8, u64) {
        match *self {
            Node::Op(op) => (0, op as u64),
            Node::Var(i) => (1, i as u64),
            Node::Lit(v) => (2, v.to_bits()),
            Node::Class(i) => (3, i as u64),
            Node::Spe(i) => (4, i as u64),
        }
    }
}

/// True iff the arities describe exactly one complete prefix tree.
pub fn is_complete_arities(arities: impl IntoIterator<Item = usize>) -> bool {
    let mut dangling: isize = 1;
    let mut seen = false;
    for a in arities {
        if dangling == 0 {
            return false;
        }
        seen = true;
        dangling += a as isize - 1;
    }
    seen && dangling == 0
}

/// Completeness check over library token ids.
pub fn is_complete(tokens: &[usize], library: &TokenLibrary) -> Result<bool> {
    let mut arities = Vec::with_capacity(tokens.len());
    for &id in tokens {
        let tok = library.get(id).ok_or(Error::InvalidToken(id))?;
        arities.push(tok.node.arity());
    }
    Ok(is_complete_arities(arities))
}

/// A complete prefix-ordered expression.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Expression {
    nodes: Vec<Node>,
    n_class: usize,
    n_spe: usize,
}

impl Expression {
    pub fn new(nodes: Vec<Node>, n_class: usize, n_spe: usize) -> Result<Self> {
        if !is_complete_arities(nodes.iter().map(Node::arity)) {
            return Err(Error::contract("prefix sequence is not a complete tree"));
        }
        for n in &nodes {
            match *n {
                Node::Class(i) if i >= n_class => {
                    return Err(Error::contract(format!("class constant {i} out of range")))
                }
                Node::Spe(i) if i >= n_spe => {
                    return Err(Error::contract(format!("spe constant {i} out of range")))
                }
                _ => {}
            }
        }
        Ok(Expression { nodes, n_class, n_spe })
    }

    pub fn from_ids(ids: &[usize], library: &TokenLibrary) -> Result<Self> {
        let nodes = ids
            .iter()
            .map(|&id| library.get(id).map(|t| t.node).ok_or(Error::InvalidToken(id)))
            .collect::<Result<Vec<_>>>()?;
        Expression::new(nodes, library.n_class(), library.n_spe())
    }

    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    pub fn n_class(&self) -> usize {
        self.n_class
    }

    pub fn n_spe(&self) -> usize {
        self.n_spe
    }

    /// Token count of the prefix encoding.
    pub fn complexity(&self) -> usize {
        self.nodes.len()
    }

    /// Variable index of the highest variable referenced, plus one.
    pub fn n_vars_used(&self) -> usize {
        self.nodes
            .iter()
            .filter_map(|n| match n {
                Node::Var(i) => Some(i + 1),
                _ => None,
            })
            .max()
            .unwrap_or(0)
    }

    pub fn uses_class(&self) -> bool {
        self.nodes.iter().any(|n| matches!(n, Node::Class(_)))
    }

    pub fn uses_spe(&self) -> bool {
        self.nodes.iter().any(|n| matches!(n, Node::Spe(_)))
    }

    /// For each node, the indices of its children in the prefix array.
    pub fn children(&self) -> Vec<[usize; 2]> {
        let n = self.nodes.len();
        let mut out = vec![[usize::MAX; 2]; n];
        let mut stack: Vec<usize> = Vec::with_capacity(n);
        for i in (0..n).rev() {
            match self.nodes[i].arity() {
                0 => {}
                1 => out[i][0] = stack.pop().expect("complete tree"),
                _ => {
                    out[i][0] = stack.pop().expect("complete tree");
                    out[i][1] = stack.pop().expect("complete tree");
                }
            }
            stack.push(i);
        }
        out
    }

    pub fn to_infix(&self, names: &Names) -> String {
        infix::to_infix(self, names)
    }

    /// Replace class and spe constants with literal values.
    pub fn bind(&self, class_vals: &[f64], spe_vals: &[f64]) -> Result<Expression> {
        if class_vals.len() != self.n_class || spe_vals.len() != self.n_spe {
            return Err(Error::contract("constant vector length mismatch in bind"));
        }
        let nodes = self
            .nodes
            .iter()
            .map(|n| match *n {
                Node::Class(i) => Node::Lit(class_vals[i]),
                Node::Spe(i) => Node::Lit(spe_vals[i]),
                other => other,
            })
            .collect();
        Ok(Expression { nodes, n_class: 0, n_spe: 0 })
    }

    /// Stable identity key; equal expressions produce equal keys.
    pub fn key(&self) -> Vec<(u8, u64)> {
        self.nodes.iter().map(Node::key).collect()
    }
}

/// Display names for variables and adjustable constants.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Names {
    pub vars: Vec<String>,
    pub class: Vec<String>,
    pub spe: Vec<String>,
}

impl Names {
    pub fn var(&self, i: usize) -> String {
        self.vars.get(i).cloned().unwrap_or_else(|| format!("x{i}"))
    }

    pub fn class(&self, i: usize) -> String {
        self.class.get(i).cloned().unwrap_or_else(|| format!("c{}", i + 1))
    }

    pub fn spe(&self, i: usize) -> String {
        self.spe.get(i).cloned().unwrap_or_else(|| format!("k{}", i + 1))
    }
}

impl fmt::Display for Expression {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_infix(&Names::default()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn lib() -> TokenLibrary {
        let spec: LibrarySpec = serde_json::from_value(serde_json::json!({
            "operators": ["+", "*", "cos"],
            "variables": [{"name": "t"}],
            "fixed_constants": [{"name": "1", "value": 1.0}],
            "spe_constants": [{"name": "Phi"}, {"name": "omega"}],
        }))
        .unwrap();
        TokenLibrary::from_spec(&spec).unwrap()
    }

    #[test]
    fn completeness_examples() {
        let lib = lib();
        let id = |s: &str| lib.id_of(s).unwrap();
        assert!(is_complete(&[id("+"), id("t"), id("1")], &lib).unwrap());
        assert!(!is_complete(&[id("+"), id("t")], &lib).unwrap());
        // cos(Phi + omega*t): dangling 1 -> 1 -> 2 -> 1 -> 2 -> 1 -> 0
        let seq = [id("cos"), id("+"), id("Phi"), id("*"), id("omega"), id("t")];
        assert!(is_complete(&seq, &lib).unwrap());
        assert!(!is_complete(&seq[..5], &lib).unwrap());
        assert!(matches!(is_complete(&[99], &lib), Err(Error::InvalidToken(99))));
    }

    #[test]
    fn trailing_tokens_are_incomplete() {
        assert!(!is_complete_arities([0, 0]));
        assert!(!is_complete_arities([]));
        assert!(is_complete_arities([0]));
    }

    #[test]
    fn children_follow_prefix_layout() {
        // * (+ x 1) x
        let e = Expression::new(
            vec![Node::Op(Op::Mul), Node::Op(Op::Add), Node::Var(0), Node::Lit(1.0), Node::Var(0)],
            0,
            0,
        )
        .unwrap();
        let ch = e.children();
        assert_eq!(ch[0], [1, 4]);
        assert_eq!(ch[1], [2, 3]);
    }

    #[test]
    fn constant_index_bounds_are_checked() {
        assert!(Expression::new(vec![Node::Class(0)], 0, 0).is_err());
        assert!(Expression::new(vec![Node::Spe(1)], 0, 1).is_err());
        assert!(Expression::new(vec![Node::Spe(0)], 0, 1).is_ok());
    }
}
