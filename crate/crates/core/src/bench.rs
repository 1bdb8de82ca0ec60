//! Eight-challenge benchmark: data synthesis, noise, scoring and run matrices.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::controller::ControllerConfig;
use crate::equivalence::{equivalence_rule, with_free_factor, with_free_offset, Rule};
use crate::error::{Error, Result};
use crate::expr::{evaluate, parse_infix, Expression, LibrarySpec, MultiDataset, Realization, TokenLibrary};
use crate::optimizer::{fit_constants_scaled, ConstantScales, FitConfig, FitResult};
use crate::rng::{substream, substream_seed};
use crate::search::{run_search_with, IterationRecord, ParetoFront, ParetoRecord, RunConfig, RunRecord, SearchConfig};

pub const OPERATORS: [&str; 12] = ["+", "-", "*", "/", "inv", "sqrt", "sq", "neg", "exp", "log", "cos", "sin"];
pub const ACCURACY_R2: f64 = 0.999;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Range {
    pub name: String,
    pub lo: f64,
    pub hi: f64,
}

fn range(name: &str, lo: f64, hi: f64) -> Range {
    Range { name: name.into(), lo, hi }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChallengeSpec {
    pub id: usize,
    pub name: String,
    /// Target in infix form; realization parameters appear by name.
    pub target: String,
    pub variables: Vec<Range>,
    pub parameters: Vec<Range>,
}

pub fn challenges() -> Vec<ChallengeSpec> {
    let c = |id, name: &str, target: &str, variables, parameters| ChallengeSpec {
        id,
        name: name.into(),
        target: target.into(),
        variables,
        parameters,
    };
    vec![
        c(
            1,
            "Harmonic Oscillator",
            "A*cos(Phi + omega*t)",
            vec![range("t", 0.0, 9.4)],
            vec![range("A", 0.6, 1.2), range("omega", 0.2, 1.5), range("Phi", 0.9, 1.1)],
        ),
        c(
            2,
            "Radioactive Decay",
            "n0*exp(-t/T)",
            vec![range("t", 0.5, 6.0)],
            vec![range("n0", 0.4, 2.0), range("T", 0.9, 1.4)],
        ),
        c(
            3,
            "Free Fall",
            "0.5*9.81*t^2 + t*v0 + z0",
            vec![range("t", 0.0, 1.0)],
            vec![range("v0", -2.0, 8.0), range("z0", -3.0, 3.0)],
        ),
        c(
            4,
            "Damped Harmonic Oscillator A",
            "exp(-k*t)*cos(Phi + 1.389*t)",
            vec![range("t", 0.0, 9.4)],
            vec![range("k", 0.2, 1.0), range("Phi", -0.2, 0.3)],
        ),
        c(
            5,
            "Damped Harmonic Oscillator B",
            "exp(-0.345*t)*cos(Phi + omega*t)",
            vec![range("t", 0.0, 9.4)],
            vec![range("omega", 0.6, 1.4), range("Phi", -0.2, 0.3)],
        ),
        c(
            6,
            "Black Body Photon Count",
            "1/(exp(5.9*nu/T) - 1)",
            vec![range("nu", 1.0, 5.0)],
            vec![range("T", 1.0, 5.0)],
        ),
        c(
            7,
            "Ideal Gas Law",
            "n*8.314*T/V",
            vec![range("T", 1.0, 5.0), range("V", 1.0, 5.0)],
            vec![range("n", 1.0, 5.0)],
        ),
        c(
            8,
            "Free Fall Terminal Velocity",
            "sqrt(2*m*9.807/(0.47*A*rho))",
            vec![range("m", 1.0, 10.0), range("A", 1.0, 5.0)],
            vec![range("rho", 1.0, 6.0)],
        ),
    ]
}

pub fn challenge(id: usize) -> Result<ChallengeSpec> {
    challenges()
        .into_iter()
        .find(|c| c.id == id)
        .ok_or_else(|| Error::config(format!("challenge id must lie in 1..=8, got {id}")))
}

fn named(names: impl IntoIterator<Item = impl Into<String>>) -> Vec<serde_json::Value> {
    names.into_iter().map(|n| serde_json::json!({ "name": n.into() })).collect()
}

/// The search library: all twelve operators, the constant 1, one class and
/// two spe constants, no dimensional analysis.
pub fn benchmark_library(variables: &[String]) -> LibrarySpec {
    serde_json::from_value(serde_json::json!({
        "operators": OPERATORS,
        "variables": named(variables.iter().cloned()),
        "fixed_constants": [{"name": "1", "value": 1.0}],
        "class_constants": named(["c1"]),
        "spe_constants": named(["k1", "k2"]),
        "dimensional_analysis": false,
    }))
    .expect("static library spec")
}

impl ChallengeSpec {
    pub fn variable_names(&self) -> Vec<String> {
        self.variables.iter().map(|r| r.name.clone()).collect()
    }

    pub fn var_ranges(&self) -> Vec<(f64, f64)> {
        self.variables.iter().map(|r| (r.lo, r.hi)).collect()
    }

    /// Library in which the target parses, with parameters as spe constants.
    pub fn truth_library(&self) -> TokenLibrary {
        let spec: LibrarySpec = serde_json::from_value(serde_json::json!({
            "operators": OPERATORS,
            "variables": named(self.variable_names()),
            "spe_constants": named(self.parameters.iter().map(|p| p.name.clone())),
        }))
        .expect("static library spec");
        TokenLibrary::from_spec(&spec).expect("challenge library")
    }

    pub fn target(&self) -> Expression {
        parse_infix(&self.target, &self.truth_library()).expect("challenge target parses")
    }

    pub fn search_library(&self) -> LibrarySpec {
        benchmark_library(&self.variable_names())
    }

    /// Target values with `params` bound, inputs given column-wise.
    pub fn evaluate(&self, columns: Vec<Vec<f64>>, params: &[f64]) -> Result<Vec<f64>> {
        let n = columns.first().map_or(0, Vec::len);
        let r = Realization::new("eval", columns, vec![0.0; n])?;
        let out = evaluate(&self.target(), &r, &[], params)?;
        if out.invalid {
            return Err(Error::Dataset(format!("challenge {} target undefined on the inputs", self.id)));
        }
        Ok(out.values)
    }
}

/// Clean benchmark data with the true parameters of each realization.
#[derive(Clone, Debug)]
pub struct ChallengeData {
    pub data: MultiDataset,
    pub params: Vec<Vec<f64>>,
}

pub fn generate_challenge_data(id: usize, n_reals: usize, n_samples: usize, seed: u64) -> Result<ChallengeData> {
    let spec = challenge(id)?;
    let mut rng = substream(seed, "data");
    generate_from(&spec, n_reals, n_samples, &mut rng)
}

pub fn generate_from<R: Rng>(spec: &ChallengeSpec, n_reals: usize, n_samples: usize, rng: &mut R) -> Result<ChallengeData> {
    if n_reals == 0 || n_samples == 0 {
        return Err(Error::config("need at least one realization and one sample"));
    }
    let mut reals = Vec::with_capacity(n_reals);
    let mut params = Vec::with_capacity(n_reals);
    for i in 0..n_reals {
        let p: Vec<f64> = spec.parameters.iter().map(|r| rng.gen_range(r.lo..=r.hi)).collect();
        let columns: Vec<Vec<f64>> = spec
            .variables
            .iter()
            .map(|r| (0..n_samples).map(|_| rng.gen_range(r.lo..=r.hi)).collect())
            .collect();
        let y = spec.evaluate(columns.clone(), &p)?;
        reals.push(Realization::new(format!("realization_{i:03}"), columns, y)?);
        params.push(p);
    }
    Ok(ChallengeData { data: MultiDataset::unitless(reals)?, params })
}

/// Add `N(0, gamma * RMS(y))` noise to every entry.
pub fn add_noise<R: Rng>(y: &[f64], gamma: f64, rng: &mut R) -> Vec<f64> {
    if gamma == 0.0 {
        return y.to_vec();
    }
    let rms = (y.iter().map(|v| v * v).sum::<f64>() / y.len() as f64).sqrt();
    let normal = Normal::new(0.0, gamma * rms).expect("finite noise scale");
    y.iter().map(|v| v + normal.sample(rng)).collect()
}

/// Noise applied separately to each realization.
pub fn noisy_dataset<R: Rng>(data: &MultiDataset, gamma: f64, rng: &mut R) -> Result<MultiDataset> {
    let reals = data
        .realizations()
        .iter()
        .map(|r| r.with_y(add_noise(r.y(), gamma, rng)))
        .collect::<Result<Vec<_>>>()?;
    MultiDataset::new(reals, data.var_units().to_vec(), data.y_units())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EntryScore {
    pub complexity: usize,
    pub infix: String,
    pub reward: f64,
    pub refit_r2: f64,
    pub equivalent_to_target: bool,
    pub rule: Option<Rule>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Score {
    pub recovered: bool,
    pub accurate: bool,
    pub best_r2: f64,
    pub entries: Vec<EntryScore>,
}

/// Whether `expr`, with constants refit on `test`, matches the target in
/// every realization, and which rule fired in the first one.
pub fn recovery_on(
    expr: &Expression,
    fit_class: &[f64],
    fit_spe: &[Vec<f64>],
    target: &Expression,
    truth: &[Vec<f64>],
    var_ranges: &[(f64, f64)],
) -> Option<Rule> {
    let mut rule = None;
    for (spe, p) in fit_spe.iter().zip(truth) {
        let cand = expr.bind(fit_class, spe).ok()?;
        let tgt = target.bind(&[], p).ok()?;
        let r = equivalence_rule(&cand, &tgt, var_ranges)?;
        rule.get_or_insert(r);
    }
    rule
}

/// Tighter settings for refits whose constants feed the equivalence probe.
pub fn scoring_fit(fit: &FitConfig) -> FitConfig {
    FitConfig { g_tol: 1e-14, f_rel_tol: 1e-15, max_iters: fit.max_iters.max(500), ..fit.clone() }
}

/// Number of refits [`refit_variant`] offers per candidate.
pub const REFIT_VARIANTS: usize = 3;

/// Refit `expr` on `data` directly (`variant` 0), with a free per-realization
/// factor (1) or with a free per-realization offset (2).
///
/// The extra constant is dropped from the returned table, so the result
/// always binds `expr` itself. The factor and offset let the equivalence
/// rules judge the form rather than one least-squares compromise: a
/// candidate missing an overall amplitude fits the data with distorted
/// constants, but with the amplitude supplied its constants match the target.
pub fn refit_variant(
    expr: &Expression,
    variant: usize,
    data: &MultiDataset,
    fit: &FitConfig,
    seed: u64,
    scales: &ConstantScales,
) -> FitResult {
    let n_spe = expr.n_spe();
    let (form, extra) = match variant {
        0 => return fit_constants_scaled(expr, data, fit, seed, scales),
        1 => (with_free_factor(expr), 1.0),
        _ => {
            let y = data.pooled_y();
            let rms = (y.iter().map(|v| v * v).sum::<f64>() / y.len() as f64).sqrt();
            (with_free_offset(expr), if rms > 0.0 && rms.is_finite() { rms } else { 1.0 })
        }
    };
    let mut spe = scales.spe.clone();
    spe.resize(n_spe, 1.0);
    spe.push(extra);
    let scales = ConstantScales { class: scales.class.clone(), spe };
    let mut out = fit_constants_scaled(&form, data, fit, seed, &scales);
    for row in &mut out.spe_table {
        row.truncate(n_spe);
    }
    out
}

/// Score a front against fresh test data with known parameters.
pub fn score_run(
    front: &ParetoFront,
    spec: &ChallengeSpec,
    test: &ChallengeData,
    names: &crate::expr::Names,
    fit: &FitConfig,
    seed: u64,
) -> Score {
    let target = spec.target();
    let ranges = spec.var_ranges();
    let fit = &scoring_fit(fit);
    let entries: Vec<EntryScore> = front
        .entries()
        .collect::<Vec<_>>()
        .par_iter()
        .map(|e| {
            let expr = &e.expression;
            let seed = seed ^ expr.complexity() as u64;
            let scales = ConstantScales::ones(expr.n_class(), expr.n_spe());
            let direct = refit_variant(expr, 0, &test.data, fit, seed, &scales);
            let rule = (0..REFIT_VARIANTS).find_map(|v| {
                let refit = if v == 0 { direct.clone() } else { refit_variant(expr, v, &test.data, fit, seed, &scales) };
                if refit.flagged_invalid {
                    return None;
                }
                recovery_on(expr, &refit.class_vals, &refit.spe_table, &target, &test.params, &ranges)
            });
            EntryScore {
                complexity: expr.complexity(),
                infix: expr.to_infix(names),
                reward: e.reward,
                refit_r2: if direct.r2.is_finite() { direct.r2 } else { f64::MIN },
                equivalent_to_target: rule.is_some(),
                rule,
            }
        })
        .collect();
    Score {
        recovered: entries.iter().any(|e| e.equivalent_to_target),
        accurate: entries.iter().any(|e| e.refit_r2 > ACCURACY_R2),
        best_r2: entries.iter().map(|e| e.refit_r2).fold(f64::MIN, f64::max),
        entries,
    }
}

/// Search budget and sizes shared by every run of a matrix.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BenchSettings {
    pub n_samples: usize,
    pub max_expressions: usize,
    pub batch_size: usize,
    pub controller: Option<ControllerConfig>,
    pub fit: FitConfig,
}

impl Default for BenchSettings {
    fn default() -> Self {
        BenchSettings { n_samples: 100, max_expressions: 200_000, batch_size: 2000, controller: None, fit: FitConfig::default() }
    }
}

impl BenchSettings {
    pub fn run_config(&self, spec: &ChallengeSpec, noise: f64, seed: u64) -> RunConfig {
        let mut controller = self.controller.clone().unwrap_or_default();
        controller.batch_size = self.batch_size;
        RunConfig {
            library: spec.search_library(),
            search: SearchConfig {
                seed,
                max_expressions: self.max_expressions,
                stop_reward: (noise == 0.0).then_some(1.0 - 1e-9),
                ..Default::default()
            },
            controller,
            fit: self.fit.clone(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Sr,
    ClassSr,
}

impl Mode {
    pub fn for_reals(n_reals: usize) -> Mode {
        if n_reals == 1 {
            Mode::Sr
        } else {
            Mode::ClassSr
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChallengeRun {
    pub challenge: usize,
    pub name: String,
    pub noise: f64,
    pub n_reals: usize,
    pub mode: Mode,
    pub seed: u64,
    pub config_hash: String,
    pub version: String,
    pub front: Vec<ParetoRecord>,
    pub score: Score,
    pub record: RunRecord,
}

/// One benchmark run, with the per-iteration callback forwarded.
pub fn run_challenge_with(
    id: usize,
    noise: f64,
    n_reals: usize,
    seed: u64,
    settings: &BenchSettings,
    on_iteration: impl FnMut(&IterationRecord),
) -> Result<(ChallengeRun, RunConfig)> {
    if !(noise >= 0.0) {
        return Err(Error::config("noise must be non-negative"));
    }
    let spec = challenge(id)?;
    let clean = generate_challenge_data(id, n_reals, settings.n_samples, seed)?;
    let train = noisy_dataset(&clean.data, noise, &mut substream(seed, "noise"))?;
    let cfg = settings.run_config(&spec, noise, seed);
    let outcome = run_search_with(&train, &cfg, on_iteration)?;
    let test = generate_from(&spec, n_reals, settings.n_samples, &mut substream(seed, "test-data"))?;
    let library = TokenLibrary::from_spec(&cfg.library)?;
    let score = score_run(&outcome.front, &spec, &test, library.names(), &cfg.fit, substream_seed(seed, "refit"));
    let run = ChallengeRun {
        challenge: id,
        name: spec.name.clone(),
        noise,
        n_reals,
        mode: Mode::for_reals(n_reals),
        seed,
        config_hash: cfg.hash(),
        version: env!("CARGO_PKG_VERSION").into(),
        front: outcome.front.to_records(&library),
        score,
        record: outcome.record,
    };
    Ok((run, cfg))
}

pub fn run_challenge(id: usize, noise: f64, n_reals: usize, seed: u64, settings: &BenchSettings) -> Result<ChallengeRun> {
    run_challenge_with(id, noise, n_reals, seed, settings, |_| {}).map(|(r, _)| r)
}

pub fn run_dir_name(id: usize, noise: f64, n_reals: usize, seed: u64) -> String {
    format!("challenge{id}_noise{noise}_nreals{n_reals}_seed{seed}")
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).expect("serializable");
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Run and write `config.json`, `iterations.jsonl`, `pareto.json` and `run.json` under `dir`.
pub fn run_challenge_to_dir(
    dir: &Path,
    id: usize,
    noise: f64,
    n_reals: usize,
    seed: u64,
    settings: &BenchSettings,
) -> Result<ChallengeRun> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut lines = String::new();
    let (run, cfg) = run_challenge_with(id, noise, n_reals, seed, settings, |rec| {
        lines.push_str(&serde_json::to_string(rec).expect("record serializes"));
        lines.push('\n');
    })?;
    write_json(&dir.join("config.json"), &cfg)?;
    let jl = dir.join("iterations.jsonl");
    fs::write(&jl, lines).map_err(|e| Error::io(&jl, e))?;
    write_json(&dir.join("pareto.json"), &run.front)?;
    write_json(&dir.join("run.json"), &run)?;
    Ok(run)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchConfig {
    pub challenges: Vec<usize>,
    pub noises: Vec<f64>,
    pub seeds: Vec<u64>,
    /// Realization counts; 1 is plain SR.
    pub n_reals: Vec<usize>,
    #[serde(default)]
    pub settings: BenchSettings,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MatrixEntry {
    pub challenge: usize,
    pub noise: f64,
    pub n_reals: usize,
    pub seed: u64,
    pub dir: PathBuf,
    pub error: Option<String>,
}

/// Execute every combination; failures are recorded, never fatal.
pub fn run_benchmark(cfg: &BenchConfig, out_dir: &Path) -> Result<Vec<MatrixEntry>> {
    let mut jobs = Vec::new();
    for &c in &cfg.challenges {
        for &n in &cfg.noises {
            for &r in &cfg.n_reals {
                for &s in &cfg.seeds {
                    jobs.push((c, n, r, s));
                }
            }
        }
    }
    let entries: Vec<MatrixEntry> = jobs
        .par_iter()
        .map(|&(c, n, r, s)| {
            let dir = out_dir.join(run_dir_name(c, n, r, s));
            let error = run_challenge_to_dir(&dir, c, n, r, s, &cfg.settings).err().map(|e| e.to_string());
            if let Some(e) = &error {
                log::error!("run {} failed: {e}", dir.display());
            }
            MatrixEntry { challenge: c, noise: n, n_reals: r, seed: s, dir, error }
        })
        .collect();
    let rows = aggregate(&load_runs(out_dir)?);
    write_aggregate(out_dir, &rows)?;
    Ok(entries)
}

/// Every `run.json` found at depth one or two below `dir`.
pub fn load_runs(dir: &Path) -> Result<Vec<ChallengeRun>> {
    let mut runs = Vec::new();
    let mut paths = Vec::new();
    collect_named(dir, "run.json", 2, &mut paths)?;
    paths.sort();
    for p in paths {
        let text = fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
        let run: ChallengeRun = serde_json::from_str(&text)
            .map_err(|source| Error::Json { context: p.display().to_string(), source })?;
        runs.push(run);
    }
    Ok(runs)
}

pub(crate) fn collect_named(dir: &Path, name: &str, depth: usize, out: &mut Vec<PathBuf>) -> Result<()> {
    let here = dir.join(name);
    if here.is_file() {
        out.push(here);
    }
    if depth == 0 {
        return Ok(());
    }
    let read = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    for entry in read {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        if entry.path().is_dir() {
            collect_named(&entry.path(), name, depth - 1, out)?;
        }
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AggregateRow {
    pub challenge: usize,
    pub noise: f64,
    pub mode: Mode,
    pub n_runs: usize,
    pub recovery_rate: f64,
    pub accuracy_rate: f64,
    pub median_r2: f64,
}

pub fn median(v: &mut [f64]) -> f64 {
    if v.is_empty() {
        return f64::NAN;
    }
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

pub fn aggregate(runs: &[ChallengeRun]) -> Vec<AggregateRow> {
    let mut groups: BTreeMap<(usize, u64, Mode), Vec<&ChallengeRun>> = BTreeMap::new();
    for r in runs {
        groups.entry((r.challenge, r.noise.to_bits(), r.mode)).or_default().push(r);
    }
    groups
        .into_iter()
        .map(|((challenge, noise, mode), rs)| {
            let n = rs.len() as f64;
            let mut r2: Vec<f64> = rs.iter().map(|r| r.score.best_r2).collect();
            AggregateRow {
                challenge,
                noise: f64::from_bits(noise),
                mode,
                n_runs: rs.len(),
                recovery_rate: rs.iter().filter(|r| r.score.recovered).count() as f64 / n,
                accuracy_rate: rs.iter().filter(|r| r.score.accurate).count() as f64 / n,
                median_r2: median(&mut r2),
            }
        })
        .collect()
}

/// `aggregate.csv` and `plot_data.json` under `dir`.
pub fn write_aggregate(dir: &Path, rows: &[AggregateRow]) -> Result<()> {
    let path = dir.join("aggregate.csv");
    let mut w = csv::Writer::from_path(&path).map_err(|source| Error::Csv { path: path.clone(), source })?;
    for row in rows {
        w.serialize(row).map_err(|source| Error::Csv { path: path.clone(), source })?;
    }
    w.flush().map_err(|e| Error::io(&path, e))?;
    write_json(&dir.join("plot_data.json"), &rows)
}
