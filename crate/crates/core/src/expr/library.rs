use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use super::{Names, Node, Op};
use crate::error::{Error, Result};
use crate::units::{UnitSpec, UnitVector};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TokenKind {
    Operator,
    InputVariable,
    FixedConstant,
    ClassConstant,
    SpeConstant,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Token {
    pub id: usize,
    pub symbol: String,
    pub node: Node,
    pub units: UnitSpec,
}

impl Token {
    pub fn arity(&self) -> usize {
        self.node.arity()
    }

    pub fn kind(&self) -> TokenKind {
        match self.node {
            Node::Op(_) => TokenKind::Operator,
            Node::Var(_) => TokenKind::InputVariable,
            Node::Lit(_) => TokenKind::FixedConstant,
            Node::Class(_) => TokenKind::ClassConstant,
            Node::Spe(_) => TokenKind::SpeConstant,
        }
    }

    pub fn var_index(&self) -> Option<usize> {
        match self.node {
            Node::Var(i) => Some(i),
            _ => None,
        }
    }

    pub fn const_index(&self) -> Option<usize> {
        match self.node {
            Node::Class(i) | Node::Spe(i) => Some(i),
            _ => None,
        }
    }

    pub fn is_adjustable(&self) -> bool {
        matches!(self.node, Node::Class(_) | Node::Spe(_))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VariableSpec {
    pub name: String,
    #[serde(default = "dimensionless")]
    pub units: UnitVector,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FixedSpec {
    pub name: String,
    pub value: f64,
    #[serde(default = "dimensionless")]
    pub units: UnitVector,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConstantSpec {
    pub name: String,
    #[serde(default = "free_units")]
    pub units: UnitSpec,
}

fn dimensionless() -> UnitVector {
    UnitVector::DIMENSIONLESS
}

fn free_units() -> UnitSpec {
    UnitSpec::Free
}

/// Serializable description of a token library.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LibrarySpec {
    pub operators: Vec<String>,
    pub variables: Vec<VariableSpec>,
    #[serde(default)]
    pub fixed_constants: Vec<FixedSpec>,
    #[serde(default)]
    pub class_constants: Vec<ConstantSpec>,
    #[serde(default)]
    pub spe_constants: Vec<ConstantSpec>,
    #[serde(default)]
    pub dimensional_analysis: bool,
    #[serde(default)]
    pub target_units: Option<UnitVector>,
}

/// Vocabulary available to the generator and the parser.
#[derive(Clone, Debug)]
pub struct TokenLibrary {
    tokens: Vec<Token>,
    by_symbol: HashMap<String, usize>,
    names: Names,
    target_units: Option<UnitVector>,
    spec: LibrarySpec,
}

impl TokenLibrary {
    pub fn from_spec(spec: &LibrarySpec) -> Result<Self> {
        let mut tokens = Vec::new();
        let mut push = |symbol: &str, node: Node, units: UnitSpec| {
            let id = tokens.len();
            tokens.push(Token { id, symbol: symbol.to_string(), node, units });
        };
        for name in &spec.operators {
            let op = Op::from_symbol(name)
                .ok_or_else(|| Error::config(format!("unknown operator {name:?}")))?;
            push(op.symbol(), Node::Op(op), UnitSpec::Free);
        }
        for (i, v) in spec.variables.iter().enumerate() {
            push(&v.name, Node::Var(i), UnitSpec::Exact(v.units));
        }
        for f in &spec.fixed_constants {
            if !f.value.is_finite() {
                return Err(Error::config(format!("fixed constant {:?} is not finite", f.name)));
            }
            push(&f.name, Node::Lit(f.value), UnitSpec::Exact(f.units));
        }
        for (i, c) in spec.class_constants.iter().enumerate() {
            push(&c.name, Node::Class(i), c.units);
        }
        for (i, c) in spec.spe_constants.iter().enumerate() {
            push(&c.name, Node::Spe(i), c.units);
        }

        let mut by_symbol = HashMap::new();
        for t in &tokens {
            if by_symbol.insert(t.symbol.clone(), t.id).is_some() {
                return Err(Error::config(format!("duplicate token symbol {:?}", t.symbol)));
            }
        }
        if spec.variables.is_empty() {
            return Err(Error::config("token library declares no input variables"));
        }
        let target_units = match (spec.dimensional_analysis, spec.target_units) {
            (true, Some(u)) => Some(u),
            (true, None) => {
                return Err(Error::config("dimensional analysis enabled without target_units"))
            }
            (false, _) => None,
        };
        let names = Names {
            vars: spec.variables.iter().map(|v| v.name.clone()).collect(),
            class: spec.class_constants.iter().map(|c| c.name.clone()).collect(),
            spe: spec.spe_constants.iter().map(|c| c.name.clone()).collect(),
        };
        Ok(TokenLibrary { tokens, by_symbol, names, target_units, spec: spec.clone() })
    }

    pub fn spec(&self) -> &LibrarySpec {
        &self.spec
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[Token] {
        &self.tokens
    }

    pub fn token(&self, id: usize) -> &Token {
        &self.tokens[id]
    }

    pub fn get(&self, id: usize) -> Option<&Token> {
        self.tokens.get(id)
    }

    pub fn id_of(&self, symbol: &str) -> Option<usize> {
        self.by_symbol.get(symbol).copied()
    }

    pub fn names(&self) -> &Names {
        &self.names
    }

    pub fn n_vars(&self) -> usize {
        self.names.vars.len()
    }

    pub fn n_class(&self) -> usize {
        self.names.class.len()
    }

    pub fn n_spe(&self) -> usize {
        self.names.spe.len()
    }

    /// Root units when dimensional analysis is on, `None` otherwise.
    pub fn target_units(&self) -> Option<UnitVector> {
        self.target_units
    }

    /// Id of the token carrying an identical node, if any.
    pub fn id_of_node(&self, node: &Node) -> Option<usize> {
        self.tokens.iter().position(|t| t.node.key() == node.key())
    }
}
