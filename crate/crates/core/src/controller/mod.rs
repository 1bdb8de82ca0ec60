//! Recurrent policy over prefix token sequences.
//!
//! A single GRU layer reads, at each step, the embeddings of the previous
//! token and of the parent and left sibling of the slot being filled. The
//! logits are masked by [`Priors`] before the softmax.

mod params;
mod priors;

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::expr::{Expression, MAX_LENGTH};

pub use params::{Checkpoint, ControllerParams, Layout, CHECKPOINT_VERSION};
pub use priors::{GenerationState, Priors};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ControllerConfig {
    pub batch_size: usize,
    pub max_length: usize,
    pub min_length: usize,
    pub hidden_size: usize,
    pub embedding_size: usize,
    pub entropy_coef: f64,
    /// Per-symbol caps; adjustable constants not listed get `default_constant_cap`.
    pub occurrence_caps: BTreeMap<String, usize>,
    pub default_constant_cap: usize,
    pub forbid_inverse_nesting: bool,
    pub forbid_nested_trig: bool,
    /// Attempts per sequence when every token ends up masked.
    pub max_resamples: usize,
}

impl Default for ControllerConfig {
    fn default() -> Self {
        ControllerConfig {
            batch_size: 2000,
            max_length: MAX_LENGTH,
            min_length: 3,
            hidden_size: 64,
            embedding_size: 16,
            entropy_coef: 0.005,
            occurrence_caps: BTreeMap::new(),
            default_constant_cap: 3,
            forbid_inverse_nesting: true,
            forbid_nested_trig: true,
            max_resamples: 100,
        }
    }
}

impl ControllerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be at least 1"));
        }
        if self.max_length == 0 || self.max_length > MAX_LENGTH {
            return Err(Error::config(format!("max_length must lie in 1..={MAX_LENGTH}")));
        }
        if self.min_length == 0 || self.min_length > self.max_length {
            return Err(Error::config("min_length must lie in 1..=max_length"));
        }
        if self.hidden_size == 0 || self.embedding_size == 0 {
            return Err(Error::config("hidden_size and embedding_size must be positive"));
        }
        if !(self.entropy_coef >= 0.0) {
            return Err(Error::config("entropy_coef must be non-negative"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct BatchSample {
    pub sequences: Vec<Expression>,
    pub tokens: Vec<Vec<usize>>,
    pub log_probs: Vec<f64>,
    pub entropies: Vec<f64>,
    pub lengths: Vec<usize>,
}

impl BatchSample {
    pub fn len(&self) -> usize {
        self.sequences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sequences.is_empty()
    }
}

fn masked_softmax(logits: &[f64], mask: &[bool], probs: &mut [f64]) {
    let max = logits
        .iter()
        .zip(mask)
        .filter(|(_, m)| **m)
        .fold(f64::NEG_INFINITY, |a, (l, _)| a.max(*l));
    let mut total = 0.0;
    for ((p, l), m) in probs.iter_mut().zip(logits).zip(mask) {
        *p = if *m { (l - max).exp() } else { 0.0 };
        total += *p;
    }
    probs.iter_mut().for_each(|p| *p /= total);
}

fn entropy(probs: &[f64]) -> f64 {
    -probs.iter().filter(|p| **p > 0.0).map(|p| p * p.ln()).sum::<f64>()
}

/// Probabilities over the vocabulary at every step of feeding `tokens`.
///
/// Stops early at the step where the policy would have to emit an
/// infeasible token; `Err` reports that step.
pub fn step_distributions(params: &ControllerParams, priors: &Priors, tokens: &[usize]) -> Result<Vec<Vec<f64>>> {
    let v = params.layout().vocab;
    let mut state = priors.start();
    let mut h = vec![0.0; params.layout().hidden];
    let mut ws = params::Workspace::new(params.layout());
    let mut mask = vec![false; v];
    let mut out = Vec::with_capacity(tokens.len());
    for &tok in tokens {
        params.step(&state, &mut h, &mut ws);
        if priors.feasible(&state, &mut mask) == 0 || tok >= v || !mask[tok] {
            return Err(Error::contract(format!("token {tok} is infeasible at step {}", out.len())));
        }
        let mut probs = vec![0.0; v];
        masked_softmax(&ws.logits, &mask, &mut probs);
        out.push(probs);
        state.push(priors, tok);
    }
    if !state.is_complete() {
        return Err(Error::contract("sequence is not a complete expression"));
    }
    Ok(out)
}

fn sample_one<R: Rng>(
    params: &ControllerParams,
    priors: &Priors,
    rng: &mut R,
    ws: &mut params::Workspace,
    strict: bool,
) -> Result<(Vec<usize>, f64, f64)> {
    let v = params.layout().vocab;
    let mut state = priors.start();
    let mut h = vec![0.0; params.layout().hidden];
    let mut mask = vec![false; v];
    let mut probs = vec![0.0; v];
    let (mut logp, mut ent) = (0.0, 0.0);
    while !state.is_complete() {
        params.step(&state, &mut h, ws);
        let (count, relaxed) = priors.feasible_with_relaxation(&state, &mut mask);
        if count == 0 || (strict && relaxed) {
            return Err(Error::AllMasked { step: state.tokens().len() });
        }
        masked_softmax(&ws.logits, &mask, &mut probs);
        let u: f64 = rng.gen();
        let mut acc = 0.0;
        let mut choice = None;
        for (id, p) in probs.iter().enumerate() {
            if *p > 0.0 {
                acc += p;
                choice = Some(id);
                if u < acc {
                    break;
                }
            }
        }
        let id = choice.expect("at least one feasible token");
        logp += probs[id].ln();
        ent += entropy(&probs);
        state.push(priors, id);
    }
    Ok((state.tokens().to_vec(), logp, ent))
}

/// Draw `cfg.batch_size` complete sequences.
///
/// A sequence that runs into a unit dead end is redrawn up to
/// `cfg.max_resamples` times; the last attempt keeps whatever the relaxed
/// mask produces, and scoring then rejects it as dimensionally inconsistent.
pub fn sample_batch<R: Rng>(
    params: &ControllerParams,
    priors: &Priors,
    cfg: &ControllerConfig,
    rng: &mut R,
) -> Result<BatchSample> {
    let lib = priors.library();
    let mut ws = params::Workspace::new(params.layout());
    let mut batch = BatchSample {
        sequences: Vec::with_capacity(cfg.batch_size),
        tokens: Vec::with_capacity(cfg.batch_size),
        log_probs: Vec::with_capacity(cfg.batch_size),
        entropies: Vec::with_capacity(cfg.batch_size),
        lengths: Vec::with_capacity(cfg.batch_size),
    };
    for _ in 0..cfg.batch_size {
        let mut attempt = 0;
        let (tokens, logp, ent) = loop {
            match sample_one(params, priors, rng, &mut ws, attempt < cfg.max_resamples) {
                Ok(s) => break s,
                Err(Error::AllMasked { step }) if attempt < cfg.max_resamples => {
                    log::debug!("all tokens masked at step {step}; resampling");
                    attempt += 1;
                }
                Err(e) => return Err(e),
            }
        };
        batch.sequences.push(Expression::from_ids(&tokens, lib)?);
        batch.lengths.push(tokens.len());
        batch.tokens.push(tokens);
        batch.log_probs.push(logp);
        batch.entropies.push(ent);
    }
    Ok(batch)
}

/// Log-probability of `tokens` and its exact gradient.
pub fn log_prob_and_grad(params: &ControllerParams, priors: &Priors, tokens: &[usize]) -> Result<(f64, Vec<f64>)> {
    let mut grad = vec![0.0; params.len()];
    let (logp, _) = params.backprop(priors, tokens, 1.0, 0.0, &mut grad)?;
    Ok((logp, grad))
}

/// Summed per-step entropy along `tokens` and its gradient.
pub fn entropy_and_grad(params: &ControllerParams, priors: &Priors, tokens: &[usize]) -> Result<(f64, Vec<f64>)> {
    let mut grad = vec![0.0; params.len()];
    let (_, ent) = params.backprop(priors, tokens, 0.0, 1.0, &mut grad)?;
    Ok((ent, grad))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::expr::{LibrarySpec, TokenLibrary};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn library(ops: &[&str]) -> TokenLibrary {
        let spec: LibrarySpec = serde_json::from_value(serde_json::json!({
            "operators": ops,
            "variables": [{"name": "x"}],
            "class_constants": [{"name": "c1"}],
            "spe_constants": [{"name": "k1"}],
        }))
        .unwrap();
        TokenLibrary::from_spec(&spec).unwrap()
    }

    #[test]
    fn single_feasible_token_has_zero_log_prob() {
        let spec: LibrarySpec = serde_json::from_value(serde_json::json!({
            "operators": [], "variables": [{"name": "x"}],
        }))
        .unwrap();
        let lib = TokenLibrary::from_spec(&spec).unwrap();
        let cfg = ControllerConfig { batch_size: 1, min_length: 1, ..Default::default() };
        let priors = Priors::new(&lib, &cfg).unwrap();
        let params = ControllerParams::init(&lib, &cfg, 3);
        let batch = sample_batch(&params, &priors, &cfg, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(batch.tokens, vec![vec![0]]);
        assert_eq!(batch.log_probs[0], 0.0);
        let (lp, g) = log_prob_and_grad(&params, &priors, &[0]).unwrap();
        assert_eq!(lp, 0.0);
        assert!(g.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn uniform_initial_policy() {
        let lib = library(&["+", "*"]);
        let cfg = ControllerConfig { min_length: 1, ..Default::default() };
        let priors = Priors::new(&lib, &cfg).unwrap();
        let params = ControllerParams::init(&lib, &cfg, 1);
        let d = step_distributions(&params, &priors, &[2]).unwrap();
        assert!(d[0].iter().all(|p| (p - 0.2).abs() < 1e-15));
    }

    #[test]
    fn batches_are_seed_deterministic() {
        let lib = library(&["+", "*", "exp"]);
        let cfg = ControllerConfig { batch_size: 50, ..Default::default() };
        let priors = Priors::new(&lib, &cfg).unwrap();
        let params = ControllerParams::init(&lib, &cfg, 9);
        let a = sample_batch(&params, &priors, &cfg, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        let b = sample_batch(&params, &priors, &cfg, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        assert_eq!(a.tokens, b.tokens);
        assert_eq!(a.log_probs, b.log_probs);
        assert!(a.log_probs.iter().all(|l| l.is_finite() && *l <= 0.0));
    }
}
