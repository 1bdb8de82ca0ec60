use crate::error::{Error, Result};
use crate::expr::{Node, Op, TokenLibrary};
use crate::units::UnitTracker;

use super::ControllerConfig;

/// Per-library masking rules derived once from the run configuration.
#[derive(Clone, Debug)]
pub struct Priors {
    max_length: usize,
    min_length: usize,
    arity: Vec<usize>,
    caps: Vec<Option<usize>>,
    inverse_of: Vec<Vec<usize>>,
    trig: Vec<bool>,
    forbid_nested_trig: bool,
    units_active: bool,
    library: TokenLibrary,
}

fn inverse_pair(op: Op) -> &'static [Op] {
    match op {
        Op::Exp => &[Op::Log],
        Op::Log => &[Op::Exp],
        Op::Inv => &[Op::Inv],
        Op::Neg => &[Op::Neg],
        Op::Sqrt => &[Op::Square],
        Op::Square => &[Op::Sqrt],
        _ => &[],
    }
}

impl Priors {
    pub fn new(library: &TokenLibrary, cfg: &ControllerConfig) -> Result<Self> {
        if cfg.min_length < 1 || cfg.min_length > cfg.max_length {
            return Err(Error::config("min_length must lie in 1..=max_length"));
        }
        let n = library.len();
        let mut caps: Vec<Option<usize>> = library
            .tokens()
            .iter()
            .map(|t| t.is_adjustable().then_some(cfg.default_constant_cap))
            .collect();
        for (symbol, &cap) in &cfg.occurrence_caps {
            let id = library
                .id_of(symbol)
                .ok_or_else(|| Error::config(format!("occurrence_caps names unknown token {symbol:?}")))?;
            caps[id] = Some(cap);
        }
        let mut inverse_of = vec![Vec::new(); n];
        if cfg.forbid_inverse_nesting {
            for t in library.tokens() {
                if let Node::Op(op) = t.node {
                    inverse_of[t.id] = inverse_pair(op)
                        .iter()
                        .filter_map(|o| library.id_of_node(&Node::Op(*o)))
                        .collect();
                }
            }
        }
        let trig = library
            .tokens()
            .iter()
            .map(|t| matches!(t.node, Node::Op(Op::Cos | Op::Sin)))
            .collect();
        Ok(Priors {
            max_length: cfg.max_length,
            min_length: cfg.min_length,
            arity: library.tokens().iter().map(|t| t.arity()).collect(),
            caps,
            inverse_of,
            trig,
            forbid_nested_trig: cfg.forbid_nested_trig,
            units_active: library.target_units().is_some(),
            library: library.clone(),
        })
    }

    pub fn library(&self) -> &TokenLibrary {
        &self.library
    }

    pub fn start(&self) -> GenerationState {
        GenerationState {
            tokens: Vec::with_capacity(self.max_length),
            dangling: 1,
            counts: vec![0; self.arity.len()],
            stack: Vec::new(),
            units: UnitTracker::new(self.library.target_units()),
        }
    }

    /// Fill `out` with the feasible-token mask and return how many are feasible.
    ///
    /// The unit prior only looks one token ahead, so an earlier choice can
    /// leave a slot whose required units no remaining token can supply. The
    /// unit constraint is then dropped for that step; the finished sequence
    /// is inconsistent and [`crate::units::units_consistent`] rejects it at
    /// scoring time. Sampling first retries such sequences, see
    /// [`crate::controller::sample_batch`].
    pub fn feasible(&self, state: &GenerationState, out: &mut [bool]) -> usize {
        self.feasible_with_relaxation(state, out).0
    }

    /// Like [`Priors::feasible`], also reporting whether the unit constraint
    /// had to be dropped at this step.
    pub fn feasible_with_relaxation(&self, state: &GenerationState, out: &mut [bool]) -> (usize, bool) {
        if state.dangling == 0 {
            out.iter_mut().for_each(|m| *m = false);
            return (0, false);
        }
        let count = self.mask(state, out, self.units_active);
        if count == 0 && self.units_active {
            return (self.mask(state, out, false), true);
        }
        (count, false)
    }

    fn mask(&self, state: &GenerationState, out: &mut [bool], with_units: bool) -> usize {
        let len = state.tokens.len();
        let parent = state.stack.last().map(|&(p, _)| state.tokens[p]);
        let in_trig = self.forbid_nested_trig && state.stack.iter().any(|&(p, _)| self.trig[state.tokens[p]]);
        let mut count = 0;
        for (id, slot) in out.iter_mut().enumerate() {
            let a = self.arity[id];
            let dangling = state.dangling - 1 + a;
            let new_len = len + 1;
            let mut ok = new_len + dangling <= self.max_length;
            ok &= !(dangling == 0 && new_len < self.min_length);
            ok &= self.caps[id].map_or(true, |c| state.counts[id] < c);
            ok &= parent.map_or(true, |p| !self.inverse_of[p].contains(&id));
            ok &= !(in_trig && self.trig[id]);
            if ok && with_units {
                let tok = self.library.token(id);
                ok = state.units.admits(tok.node, tok.units);
            }
            *slot = ok;
            count += ok as usize;
        }
        count
    }

    /// Set excluded logits to `-inf`.
    pub fn apply(&self, logits: &mut [f64], state: &GenerationState) -> Result<()> {
        let mut mask = vec![false; logits.len()];
        if self.feasible(state, &mut mask) == 0 {
            return Err(Error::AllMasked { step: state.tokens.len() });
        }
        for (l, m) in logits.iter_mut().zip(&mask) {
            if !m {
                *l = f64::NEG_INFINITY;
            }
        }
        Ok(())
    }
}

/// Bookkeeping for one partially generated prefix sequence.
#[derive(Clone, Debug)]
pub struct GenerationState {
    tokens: Vec<usize>,
    dangling: usize,
    counts: Vec<usize>,
    /// Open operators as (position, children completed).
    stack: Vec<(usize, usize)>,
    units: UnitTracker,
}

impl GenerationState {
    pub fn tokens(&self) -> &[usize] {
        &self.tokens
    }

    pub fn is_complete(&self) -> bool {
        self.dangling == 0
    }

    /// Previous token, parent of the next token, and its left sibling.
    pub fn context(&self) -> (Option<usize>, Option<usize>, Option<usize>) {
        let prev = self.tokens.last().copied();
        match self.stack.last() {
            Some(&(p, filled)) => {
                let sibling = (filled == 1).then(|| self.tokens[p + 1]);
                (prev, Some(self.tokens[p]), sibling)
            }
            None => (prev, None, None),
        }
    }

    pub fn push(&mut self, priors: &Priors, id: usize) {
        let pos = self.tokens.len();
        let a = priors.arity[id];
        self.tokens.push(id);
        self.counts[id] += 1;
        self.dangling = self.dangling + a - 1;
        let tok = priors.library.token(id);
        self.units.push(tok.node, tok.units);
        if a > 0 {
            self.stack.push((pos, 0));
            return;
        }
        while let Some(top) = self.stack.last_mut() {
            top.1 += 1;
            if top.1 < priors.arity[self.tokens[top.0]] {
                break;
            }
            self.stack.pop();
        }
    }
}
