//! Risk-seeking policy-gradient search over expression skeletons.

mod pareto;

use std::collections::HashMap;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::controller::{sample_batch, BatchSample, ControllerConfig, ControllerParams, Priors};
use crate::error::{Error, Result};
use crate::expr::{LibrarySpec, MultiDataset, TokenLibrary};
use crate::optimizer::{fit_constants_scaled, target_std, ConstantScales, FitConfig, FitResult};
use crate::rng::{substream, substream_seed};
use crate::units::units_consistent;

pub use pareto::{ParetoEntry, ParetoFront, ParetoRecord};

/// Full description of one search run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub library: LibrarySpec,
    #[serde(default)]
    pub search: SearchConfig,
    #[serde(default)]
    pub controller: ControllerConfig,
    #[serde(default)]
    pub fit: FitConfig,
}

impl RunConfig {
    pub fn validate(&self) -> Result<TokenLibrary> {
        self.search.validate()?;
        self.controller.validate()?;
        self.fit.validate()?;
        let lib = TokenLibrary::from_spec(&self.library)?;
        Priors::new(&lib, &self.controller)?;
        Ok(lib)
    }

    /// Hex SHA-256 of the canonical JSON encoding.
    pub fn hash(&self) -> String {
        let text = serde_json::to_string(self).expect("config serializes");
        hex::encode(Sha256::digest(text.as_bytes()))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SearchConfig {
    pub seed: u64,
    pub max_expressions: usize,
    /// Elite fraction of each batch driving the update.
    pub epsilon: f64,
    pub lr: f64,
    /// Stop once a candidate reaches this reward; `null` runs to budget.
    pub stop_reward: Option<f64>,
}

impl Default for SearchConfig {
    fn default() -> Self {
        SearchConfig { seed: 0, max_expressions: 200_000, epsilon: 0.05, lr: 2.5e-3, stop_reward: Some(1.0 - 1e-9) }
    }
}

impl SearchConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0 && self.epsilon <= 1.0) {
            return Err(Error::config("epsilon must lie in (0, 1]"));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::config("lr must be positive"));
        }
        if self.max_expressions == 0 {
            return Err(Error::config("max_expressions must be at least 1"));
        }
        Ok(())
    }
}

/// `1 / (1 + NRMSE)`, zero for flagged or undefined fits.
pub fn reward(nrmse: f64) -> f64 {
    if nrmse.is_finite() && nrmse >= 0.0 {
        1.0 / (1.0 + nrmse)
    } else {
        0.0
    }
}

fn fit_reward(fit: &FitResult) -> f64 {
    if fit.flagged_invalid {
        0.0
    } else {
        reward(fit.nrmse)
    }
}

/// Linear-interpolation empirical quantile, `q` in [0, 1].
pub fn quantile(values: &[f64], q: f64) -> f64 {
    let mut s = values.to_vec();
    s.sort_by(f64::total_cmp);
    let pos = q * (s.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = (lo + 1).min(s.len() - 1);
    s[lo] + (pos - lo as f64) * (s[hi] - s[lo])
}

/// Indices with reward strictly above the `1 - epsilon` quantile, and that quantile.
pub fn elite_filter(rewards: &[f64], epsilon: f64) -> (Vec<usize>, f64) {
    if rewards.is_empty() {
        return (Vec::new(), 0.0);
    }
    let threshold = quantile(rewards, 1.0 - epsilon);
    let idx = rewards.iter().enumerate().filter(|(_, r)| **r > threshold).map(|(i, _)| i).collect();
    (idx, threshold)
}

/// First-order adaptive-moment optimizer state.
#[derive(Clone, Debug)]
pub struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
    pub lr: f64,
}

impl Adam {
    const B1: f64 = 0.9;
    const B2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    pub fn new(n: usize, lr: f64) -> Self {
        Adam { m: vec![0.0; n], v: vec![0.0; n], t: 0, lr }
    }

    /// Move `params` along `ascent`.
    pub fn step(&mut self, params: &mut [f64], ascent: &[f64]) {
        self.t += 1;
        let c1 = 1.0 - Self::B1.powi(self.t);
        let c2 = 1.0 - Self::B2.powi(self.t);
        for i in 0..params.len() {
            let g = ascent[i];
            self.m[i] = Self::B1 * self.m[i] + (1.0 - Self::B1) * g;
            self.v[i] = Self::B2 * self.v[i] + (1.0 - Self::B2) * g * g;
            params[i] += self.lr * (self.m[i] / c1) / ((self.v[i] / c2).sqrt() + Self::EPS);
        }
    }
}

/// One risk-seeking update; returns the elite threshold and whether the
/// parameters changed.
pub fn train_step(
    params: &mut ControllerParams,
    adam: &mut Adam,
    priors: &Priors,
    batch: &BatchSample,
    rewards: &[f64],
    epsilon: f64,
    entropy_coef: f64,
) -> Result<(f64, bool)> {
    if rewards.len() != batch.len() {
        return Err(Error::contract("rewards and batch differ in length"));
    }
    let (elite, threshold) = elite_filter(rewards, epsilon);
    if elite.is_empty() {
        return Ok((threshold, false));
    }
    let scale = 1.0 / elite.len() as f64;
    let mut grad = vec![0.0; params.len()];
    for &i in &elite {
        let w = (rewards[i] - threshold) * scale;
        params.backprop(priors, &batch.tokens[i], w, entropy_coef * scale, &mut grad)?;
    }
    if grad.iter().any(|g| !g.is_finite()) {
        log::warn!("non-finite policy gradient; update skipped");
        return Ok((threshold, false));
    }
    let before = params.as_slice().to_vec();
    adam.step(params.as_mut_slice(), &grad);
    if params.as_slice().iter().any(|v| !v.is_finite()) {
        params.as_mut_slice().copy_from_slice(&before);
        log::warn!("update produced non-finite parameters; reverted");
        return Ok((threshold, false));
    }
    Ok((threshold, true))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iteration: usize,
    pub batch_best_reward: f64,
    pub best_reward: f64,
    pub elite_threshold: f64,
    pub expressions_evaluated: usize,
    pub unique_fitted: usize,
    pub front_size: usize,
    pub wall_time_s: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub seed: u64,
    pub config_hash: String,
    pub iterations: Vec<IterationRecord>,
    pub expressions_evaluated: usize,
    pub unique_fitted: usize,
    pub best_reward: f64,
    pub stopped_on_reward: bool,
    pub wall_time_s: f64,
}

#[derive(Clone, Debug)]
pub struct SearchOutcome {
    pub front: ParetoFront,
    pub record: RunRecord,
    pub params: ControllerParams,
}

fn fit_seed(seed: u64, tokens: &[usize]) -> u64 {
    let mut h = Sha256::new();
    h.update(substream_seed(seed, "init").to_le_bytes());
    for t in tokens {
        h.update((*t as u32).to_le_bytes());
    }
    u64::from_le_bytes(h.finalize()[..8].try_into().expect("8 bytes"))
}

pub fn run_search(data: &MultiDataset, cfg: &RunConfig) -> Result<SearchOutcome> {
    run_search_with(data, cfg, |_| {})
}

/// [`run_search`] with a callback after every iteration.
pub fn run_search_with(
    data: &MultiDataset,
    cfg: &RunConfig,
    mut on_iteration: impl FnMut(&IterationRecord),
) -> Result<SearchOutcome> {
    let library = cfg.validate()?;
    if library.n_vars() != data.n_vars() {
        return Err(Error::config(format!(
            "library declares {} variables but the data has {}",
            library.n_vars(),
            data.n_vars()
        )));
    }
    if !(target_std(data) > 0.0) {
        return Err(Error::DegenerateTarget);
    }
    let seed = cfg.search.seed;
    let priors = Priors::new(&library, &cfg.controller)?;
    let mut params = ControllerParams::init(&library, &cfg.controller, substream_seed(seed, "controller"));
    let mut adam = Adam::new(params.len(), cfg.search.lr);
    let mut sampler = substream(seed, "sampling");
    let scales = ConstantScales::from_units(&library, data);
    let mut cache: HashMap<Vec<usize>, FitResult> = HashMap::new();
    let mut front = ParetoFront::new();
    let mut iterations = Vec::new();
    let mut evaluated = 0;
    let mut stopped = false;
    let started = Instant::now();

    while evaluated < cfg.search.max_expressions && !stopped {
        let batch = sample_batch(&params, &priors, &cfg.controller, &mut sampler)?;
        evaluated += batch.len();

        let mut fresh: Vec<usize> = Vec::new();
        let mut queued = std::collections::HashSet::new();
        for (i, t) in batch.tokens.iter().enumerate() {
            if !cache.contains_key(t) && queued.insert(t.clone()) {
                fresh.push(i);
            }
        }
        let fits: Vec<FitResult> = fresh
            .par_iter()
            .map(|&i| {
                if units_consistent(&batch.tokens[i], &library) {
                    fit_constants_scaled(&batch.sequences[i], data, &cfg.fit, fit_seed(seed, &batch.tokens[i]), &scales)
                } else {
                    FitResult::invalid(&batch.sequences[i], data.n_realizations())
                }
            })
            .collect();
        for (&i, fit) in fresh.iter().zip(fits) {
            cache.insert(batch.tokens[i].clone(), fit);
        }

        let mut rewards = Vec::with_capacity(batch.len());
        for (i, t) in batch.tokens.iter().enumerate() {
            let fit = &cache[t];
            let r = fit_reward(fit);
            rewards.push(r);
            front.update(ParetoEntry {
                tokens: t.clone(),
                expression: batch.sequences[i].clone(),
                fit: fit.clone(),
                reward: r,
            });
        }
        let (threshold, _) = train_step(
            &mut params,
            &mut adam,
            &priors,
            &batch,
            &rewards,
            cfg.search.epsilon,
            cfg.controller.entropy_coef,
        )?;
        let batch_best = rewards.iter().cloned().fold(0.0, f64::max);
        if let Some(stop) = cfg.search.stop_reward {
            stopped = front.best_reward() >= stop;
        }
        let rec = IterationRecord {
            iteration: iterations.len(),
            batch_best_reward: batch_best,
            best_reward: front.best_reward(),
            elite_threshold: threshold,
            expressions_evaluated: evaluated,
            unique_fitted: cache.len(),
            front_size: front.len(),
            wall_time_s: started.elapsed().as_secs_f64(),
        };
        log::info!(
            "iteration {} evaluated {} best {:.6} threshold {:.6}",
            rec.iteration,
            evaluated,
            rec.best_reward,
            threshold
        );
        on_iteration(&rec);
        iterations.push(rec);
    }

    let record = RunRecord {
        seed,
        config_hash: cfg.hash(),
        iterations,
        expressions_evaluated: evaluated,
        unique_fitted: cache.len(),
        best_reward: front.best_reward(),
        stopped_on_reward: stopped,
        wall_time_s: started.elapsed().as_secs_f64(),
    };
    Ok(SearchOutcome { front, record, params })
}

/// Pretty JSON of the front; byte-identical for identical runs.
pub fn front_json(front: &ParetoFront, library: &TokenLibrary) -> String {
    serde_json::to_string_pretty(&front.to_records(library)).expect("front serializes")
}
