use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::expr::{Expression, Node, TokenLibrary};
use crate::optimizer::FitResult;

#[derive(Clone, Debug)]
pub struct ParetoEntry {
    pub tokens: Vec<usize>,
    pub expression: Expression,
    pub fit: FitResult,
    pub reward: f64,
}

/// Best candidate per complexity, keeping only entries whose reward beats
/// every simpler entry.
#[derive(Clone, Debug, Default)]
pub struct ParetoFront {
    entries: BTreeMap<usize, ParetoEntry>,
}

impl ParetoFront {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Entries in increasing complexity.
    pub fn entries(&self) -> impl Iterator<Item = &ParetoEntry> {
        self.entries.values()
    }

    pub fn get(&self, complexity: usize) -> Option<&ParetoEntry> {
        self.entries.get(&complexity)
    }

    pub fn best_reward(&self) -> f64 {
        self.entries.values().next_back().map_or(0.0, |e| e.reward)
    }

    /// Insert `entry` if nothing simpler or equally complex is at least as
    /// good, then drop the entries it dominates. Returns whether it was kept.
    pub fn update(&mut self, entry: ParetoEntry) -> bool {
        if entry.fit.flagged_invalid || !(entry.reward > 0.0) {
            return false;
        }
        let c = entry.expression.complexity();
        if self.entries.range(..=c).any(|(_, e)| e.reward >= entry.reward) {
            return false;
        }
        let dominated: Vec<usize> = self
            .entries
            .range(c + 1..)
            .filter(|(_, e)| e.reward <= entry.reward)
            .map(|(k, _)| *k)
            .collect();
        for k in dominated {
            self.entries.remove(&k);
        }
        self.entries.insert(c, entry);
        true
    }

    /// Pairwise check that no stored entry dominates another.
    pub fn is_consistent(&self) -> bool {
        let v: Vec<(&usize, &ParetoEntry)> = self.entries.iter().collect();
        v.iter().all(|(c, e)| **c == e.expression.complexity())
            && v.iter().all(|(ca, a)| v.iter().all(|(cb, b)| ca >= cb || a.reward < b.reward))
    }

    pub fn to_records(&self, library: &TokenLibrary) -> Vec<ParetoRecord> {
        self.entries.values().map(|e| ParetoRecord::new(e, library)).collect()
    }
}

/// Serializable view of one front entry.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParetoRecord {
    pub complexity: usize,
    pub infix: String,
    pub prefix: Vec<String>,
    pub reward: f64,
    pub mse: f64,
    pub nrmse: f64,
    pub r2: f64,
    /// Fitted value of every class constant the expression uses.
    pub class_constants: BTreeMap<String, f64>,
    /// Per-realization values of every spe constant the expression uses.
    pub spe_constants: BTreeMap<String, Vec<f64>>,
}

impl ParetoRecord {
    pub fn new(e: &ParetoEntry, library: &TokenLibrary) -> Self {
        let names = library.names();
        let mut class_constants = BTreeMap::new();
        let mut spe_constants = BTreeMap::new();
        for node in e.expression.nodes() {
            match *node {
                Node::Class(i) => {
                    class_constants.insert(names.class(i), e.fit.class_vals[i]);
                }
                Node::Spe(i) => {
                    spe_constants.insert(names.spe(i), e.fit.spe_table.iter().map(|row| row[i]).collect());
                }
                _ => {}
            }
        }
        ParetoRecord {
            complexity: e.expression.complexity(),
            infix: e.expression.to_infix(names),
            prefix: e.tokens.iter().map(|&t| library.token(t).symbol.clone()).collect(),
            reward: e.reward,
            mse: e.fit.mse,
            nrmse: e.fit.nrmse,
            r2: e.fit.r2,
            class_constants,
            spe_constants,
        }
    }

    /// Rebuild the expression from its prefix symbols.
    pub fn expression(&self, library: &TokenLibrary) -> Result<(Vec<usize>, Expression)> {
        let ids = self
            .prefix
            .iter()
            .map(|s| {
                library
                    .id_of(s)
                    .ok_or_else(|| crate::Error::config(format!("front token {s:?} not in library")))
            })
            .collect::<Result<Vec<_>>>()?;
        let expr = Expression::from_ids(&ids, library)?;
        Ok((ids, expr))
    }
}
