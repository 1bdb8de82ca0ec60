//! Synthetic stellar streams in an NFW halo.
//!
//! Units are kpc, Gyr and solar masses, so velocities are kpc/Gyr and
//! energies per unit mass are (kpc/Gyr)². Each stream is approximated by an
//! orbit; its members share a total energy that becomes the spe constant of
//! the search, while the halo parameters are class constants.

use std::fs;
use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bench::{add_noise, median, refit_variant, ACCURACY_R2, REFIT_VARIANTS};
use crate::controller::ControllerConfig;
use crate::equivalence::{equivalence_rule, Rule};
use crate::error::{Error, Result};
use crate::expr::{parse_infix, Expression, LibrarySpec, MultiDataset, Realization, TokenLibrary};
use crate::optimizer::{ConstantScales, FitConfig};
use crate::rng::{substream, substream_seed};
use crate::search::{run_search_with, IterationRecord, ParetoFront, ParetoRecord, RunConfig, RunRecord, SearchConfig};
use crate::units::UnitVector;

/// Gravitational constant in kpc³ M☉⁻¹ Gyr⁻², from GM☉ = 1.32712440018e20 m³ s⁻²,
/// 1 kpc = 3.0856775814913673e19 m and a Julian Gyr of 3.15576e16 s.
pub const G: f64 = 4.498_502_152_079_693e-6;

/// Largest relative energy error an accepted orbit may show.
pub const DRIFT_TOLERANCE: f64 = 1e-6;
/// Orbits may not come closer to the centre than this during synthesis [kpc].
pub const MIN_PERICENTRE: f64 = 1.0;
pub const DEFAULT_DT: f64 = 1e-3;
pub const DEFAULT_SPAN: f64 = 1.0;
pub const POINTS_PER_ORBIT: usize = 100;
pub const DEFAULT_STREAMS: usize = 29;

const SINGULAR_RADIUS: f64 = 1e-9;
const MAX_ATTEMPTS: usize = 200_000;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HaloParams {
    pub m200: f64,
    pub c: f64,
    pub r_scale: f64,
}

impl Default for HaloParams {
    fn default() -> Self {
        HaloParams { m200: 1e12, c: 10.0, r_scale: 20.0 }
    }
}

impl HaloParams {
    pub fn new(m200: f64, c: f64, r_scale: f64) -> Result<Self> {
        let h = HaloParams { m200, c, r_scale };
        h.validate()?;
        Ok(h)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.m200 > 0.0 && self.c > 1.0 && self.r_scale > 0.0) || !self.m200.is_finite() {
            return Err(Error::config("halo needs m200 > 0, c > 1 and r_scale > 0"));
        }
        Ok(())
    }

    pub fn g(&self) -> f64 {
        1.0 / ((1.0 + self.c).ln() - self.c / (1.0 + self.c))
    }

    /// G·M200·g, the mass scale of the potential [kpc³/Gyr²].
    pub fn strength(&self) -> f64 {
        G * self.m200 * self.g()
    }

    /// Prefactor of ln(1+r/R)·(R/r) in the potential [(kpc/Gyr)²].
    pub fn energy_scale(&self) -> f64 {
        self.strength() / self.r_scale
    }
}

/// Φ(r) = −(G·M200·g/R)·ln(1+r/R)·(R/r).
pub fn nfw_potential(r: f64, halo: &HaloParams) -> Result<f64> {
    if !(r > 0.0) {
        return Err(Error::Contract(format!("potential needs r > 0, got {r}")));
    }
    Ok(potential(r, halo))
}

fn ln1p_over(u: f64) -> f64 {
    if u < 1e-8 {
        1.0 - u / 2.0
    } else {
        u.ln_1p() / u
    }
}

fn potential(r: f64, halo: &HaloParams) -> f64 {
    -halo.energy_scale() * ln1p_over(r / halo.r_scale)
}

/// dΦ/dr, always positive.
pub fn radial_force(r: f64, halo: &HaloParams) -> f64 {
    let u = r / halo.r_scale;
    // ln(1+u) - u/(1+u), expanded where it cancels
    let m = if u < 1e-4 {
        u * u * (0.5 - u * (2.0 / 3.0 - 0.75 * u))
    } else {
        u.ln_1p() - u / (1.0 + u)
    };
    halo.strength() * m / (r * r)
}

pub fn circular_velocity(r: f64, halo: &HaloParams) -> f64 {
    (r * radial_force(r, halo)).sqrt()
}

pub fn escape_velocity(r: f64, halo: &HaloParams) -> f64 {
    (-2.0 * potential(r, halo)).sqrt()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhasePoint {
    pub position: [f64; 3],
    pub velocity: [f64; 3],
    pub t: f64,
}

fn norm(v: &[f64; 3]) -> f64 {
    (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt()
}

impl PhasePoint {
    pub fn radius(&self) -> f64 {
        norm(&self.position)
    }

    pub fn speed(&self) -> f64 {
        norm(&self.velocity)
    }

    pub fn kinetic(&self) -> f64 {
        let v = self.speed();
        0.5 * v * v
    }

    pub fn energy(&self, halo: &HaloParams) -> f64 {
        self.kinetic() + potential(self.radius(), halo)
    }
}

fn acceleration(x: &[f64; 3], halo: &HaloParams) -> Result<[f64; 3]> {
    let r = norm(x);
    if !(r > SINGULAR_RADIUS) {
        return Err(Error::Integration(format!("trajectory reached r = {r:e} kpc")));
    }
    let f = -radial_force(r, halo) / r;
    Ok([f * x[0], f * x[1], f * x[2]])
}

/// Kick-drift-kick leapfrog for `n_steps` steps of `dt` (negative runs backwards).
pub fn leapfrog(start: &PhasePoint, halo: &HaloParams, dt: f64, n_steps: usize) -> Result<PhasePoint> {
    let mut out = *start;
    leapfrog_visit(&mut out, halo, dt, n_steps, |_| true)?;
    Ok(out)
}

/// Steps in place, handing each new state to `visit`; stops early when it returns false.
fn leapfrog_visit(
    p: &mut PhasePoint,
    halo: &HaloParams,
    dt: f64,
    n_steps: usize,
    mut visit: impl FnMut(&PhasePoint) -> bool,
) -> Result<bool> {
    let t0 = p.t;
    let mut a = acceleration(&p.position, halo)?;
    for step in 1..=n_steps {
        for k in 0..3 {
            p.velocity[k] += 0.5 * dt * a[k];
            p.position[k] += dt * p.velocity[k];
        }
        a = acceleration(&p.position, halo)?;
        for k in 0..3 {
            p.velocity[k] += 0.5 * dt * a[k];
        }
        p.t = t0 + step as f64 * dt;
        if !visit(p) {
            return Ok(false);
        }
    }
    Ok(true)
}

/// A sampled orbit with its energy diagnostics.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Orbit {
    pub points: Vec<PhasePoint>,
    /// Energy of the initial condition.
    pub energy: f64,
    /// Largest |E(t) - E(0)| / |E(0)| over every step.
    pub max_drift: f64,
    pub min_radius: f64,
}

/// Integrate forward and backward from `ic` and keep `n_out` points evenly
/// spread over [-span, span], each snapped to the step grid.
///
/// Integration stops early once the drift exceeds `abort_drift`; the returned
/// orbit then has `max_drift > abort_drift` and no points.
pub fn integrate(
    ic: &PhasePoint,
    halo: &HaloParams,
    dt: f64,
    span: f64,
    n_out: usize,
    abort_drift: f64,
) -> Result<Orbit> {
    if !(dt > 0.0 && span >= 0.0) || n_out < 2 {
        return Err(Error::Contract("integration needs dt > 0, span >= 0 and at least two output points".into()));
    }
    if !ic.position.iter().chain(&ic.velocity).all(|v| v.is_finite()) || !(ic.radius() > 0.0) {
        return Err(Error::Contract("initial condition must be finite with r > 0".into()));
    }
    let e0 = ic.energy(halo);
    if !(e0 < 0.0) {
        return Err(Error::Integration(format!(
            "unbound initial condition: E = {e0:.6e} (kpc/Gyr)^2 at r = {:.4} kpc",
            ic.radius()
        )));
    }
    let n = (span / dt).round() as usize;
    let total = 2 * n;
    let wanted: Vec<usize> =
        (0..n_out).map(|k| ((k * total) as f64 / (n_out - 1) as f64).round() as usize).collect();

    let mut max_drift: f64 = 0.0;
    let mut min_radius = ic.radius();
    let mut grid: Vec<Option<PhasePoint>> = vec![None; total + 1];
    let keep: Vec<bool> = {
        let mut k = vec![false; total + 1];
        wanted.iter().for_each(|&i| k[i] = true);
        k
    };
    if keep[n] {
        grid[n] = Some(*ic);
    }
    for (dir, sign) in [(1isize, 1.0), (-1, -1.0)] {
        let mut p = *ic;
        let mut idx = n as isize;
        let finished = leapfrog_visit(&mut p, halo, sign * dt, n, |q| {
            idx += dir;
            let drift = ((q.energy(halo) - e0) / e0).abs();
            max_drift = max_drift.max(drift);
            min_radius = min_radius.min(q.radius());
            if keep[idx as usize] {
                grid[idx as usize] = Some(*q);
            }
            drift <= abort_drift
        })?;
        if !finished {
            return Ok(Orbit { points: Vec::new(), energy: e0, max_drift, min_radius });
        }
    }
    let points = wanted.iter().map(|&i| grid[i].expect("grid point visited")).collect();
    Ok(Orbit { points, energy: e0, max_drift, min_radius })
}

/// Orbit through `ic` sampled at 100 points over the span.
pub fn integrate_orbit(ic: &PhasePoint, halo: &HaloParams, dt: f64, span: f64) -> Result<Vec<PhasePoint>> {
    let orbit = integrate(ic, halo, dt, span, POINTS_PER_ORBIT, f64::INFINITY)?;
    if orbit.max_drift > DRIFT_TOLERANCE {
        return Err(Error::Integration(format!(
            "relative energy drift {:.3e} exceeds {DRIFT_TOLERANCE:e} (E = {:.6e}, r_min = {:.4} kpc, dt = {dt})",
            orbit.max_drift, orbit.energy, orbit.min_radius
        )));
    }
    Ok(orbit.points)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StreamSet {
    pub halo: HaloParams,
    pub streams: Vec<Vec<PhasePoint>>,
    /// Total energy per unit mass of each stream.
    pub energies: Vec<f64>,
    pub max_drift: Vec<f64>,
}

impl StreamSet {
    pub fn len(&self) -> usize {
        self.streams.len()
    }

    pub fn is_empty(&self) -> bool {
        self.streams.is_empty()
    }

    /// The first `n` streams.
    pub fn take(&self, n: usize) -> StreamSet {
        StreamSet {
            halo: self.halo,
            streams: self.streams[..n].to_vec(),
            energies: self.energies[..n].to_vec(),
            max_drift: self.max_drift[..n].to_vec(),
        }
    }
}

fn random_direction<R: Rng>(rng: &mut R) -> [f64; 3] {
    let z: f64 = rng.gen_range(-1.0..=1.0);
    let phi: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
    let s = (1.0 - z * z).sqrt();
    [s * phi.cos(), s * phi.sin(), z]
}

/// Progenitor initial conditions: radius uniform in [8, 45] kpc, isotropic
/// position, speed uniform in [0.5, 0.95] of the local escape speed. A
/// direction whose orbit dips below [`MIN_PERICENTRE`] has its radial part
/// halved, up to four times; orbits whose energy error exceeds
/// [`DRIFT_TOLERANCE`] are redrawn.
fn sample_stream(halo: &HaloParams, dt: f64, span: f64, rng: &mut ChaCha8Rng) -> Result<Orbit> {
    for _ in 0..MAX_ATTEMPTS {
        let r = rng.gen_range(8.0..=45.0);
        let xhat = random_direction(rng);
        let position = xhat.map(|c| c * r);
        let speed = rng.gen_range(0.5..=0.95) * escape_velocity(r, halo);
        let mut dir = random_direction(rng);
        for _ in 0..5 {
            let ic = PhasePoint { position, velocity: dir.map(|c| c * speed), t: 0.0 };
            let orbit = match integrate(&ic, halo, dt, span, POINTS_PER_ORBIT, DRIFT_TOLERANCE) {
                Ok(o) => o,
                Err(Error::Integration(_)) => break,
                Err(e) => return Err(e),
            };
            if orbit.min_radius < MIN_PERICENTRE {
                let radial = dir[0] * xhat[0] + dir[1] * xhat[1] + dir[2] * xhat[2];
                for k in 0..3 {
                    dir[k] -= 0.5 * radial * xhat[k];
                }
                let n = norm(&dir);
                dir = dir.map(|c| c / n);
                continue;
            }
            if orbit.max_drift <= DRIFT_TOLERANCE {
                return Ok(orbit);
            }
            break;
        }
    }
    Err(Error::Integration(format!("no acceptable initial condition after {MAX_ATTEMPTS} attempts")))
}

/// `n_streams` independent orbits; stream `i` draws from its own sub-stream
/// of `seed`, so a set is a prefix of any larger set with the same seed.
pub fn make_stream_set(n_streams: usize, halo: &HaloParams, seed: u64) -> Result<StreamSet> {
    make_stream_set_with(n_streams, halo, seed, DEFAULT_DT, DEFAULT_SPAN)
}

pub fn make_stream_set_with(n_streams: usize, halo: &HaloParams, seed: u64, dt: f64, span: f64) -> Result<StreamSet> {
    if n_streams == 0 {
        return Err(Error::config("need at least one stream"));
    }
    halo.validate()?;
    let orbits = (0..n_streams)
        .into_par_iter()
        .map(|i| sample_stream(halo, dt, span, &mut substream(seed, &format!("stream{i}"))))
        .collect::<Result<Vec<_>>>()?;
    Ok(StreamSet {
        halo: *halo,
        energies: orbits.iter().map(|o| o.energy).collect(),
        max_drift: orbits.iter().map(|o| o.max_drift).collect(),
        streams: orbits.into_iter().map(|o| o.points).collect(),
    })
}

/// One realization per stream with input `r` [kpc] and target ½v² [(kpc/Gyr)²].
pub fn streams_to_multidataset<R: Rng>(set: &StreamSet, noise_gamma: f64, rng: &mut R) -> Result<MultiDataset> {
    if !(noise_gamma >= 0.0) {
        return Err(Error::config("noise must be non-negative"));
    }
    let reals = set
        .streams
        .iter()
        .enumerate()
        .map(|(i, pts)| {
            let r: Vec<f64> = pts.iter().map(PhasePoint::radius).collect();
            let y: Vec<f64> = pts.iter().map(PhasePoint::kinetic).collect();
            Realization::new(format!("stream{i:02}"), vec![r], add_noise(&y, noise_gamma, rng))
        })
        .collect::<Result<Vec<_>>>()?;
    MultiDataset::new(reals, vec![UnitVector::length()], UnitVector::specific_energy())
}

/// Operators, the constant 1, spe `k` (energy), class `c1` (energy), `c2`
/// (length) and `c3` (dimensionless), with dimensional analysis on.
pub fn streams_library() -> LibrarySpec {
    serde_json::from_value(serde_json::json!({
        "operators": ["+", "-", "*", "/", "inv", "sqrt", "sq", "neg", "exp", "log"],
        "variables": [{"name": "r", "units": UnitVector::length()}],
        "fixed_constants": [{"name": "1", "value": 1.0}],
        "class_constants": [
            {"name": "c1", "units": {"exact": UnitVector::specific_energy()}},
            {"name": "c2", "units": {"exact": UnitVector::length()}},
            {"name": "c3", "units": {"exact": UnitVector::DIMENSIONLESS}},
        ],
        "spe_constants": [{"name": "k", "units": {"exact": UnitVector::specific_energy()}}],
        "dimensional_analysis": true,
        "target_units": UnitVector::specific_energy(),
    }))
    .expect("static library spec")
}

/// ½v² = E − Φ(r) written in the search library.
pub const TARGET: &str = "k + c1*log(1 + r/c2)*c2/r";

pub fn target_expression(library: &TokenLibrary) -> Result<Expression> {
    parse_infix(TARGET, library)
}

/// Class values of [`TARGET`] for `halo`, in library order (c3 unused).
pub fn true_class_constants(halo: &HaloParams) -> Vec<f64> {
    vec![halo.energy_scale(), halo.r_scale, 0.0]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StreamsConfig {
    pub seed: u64,
    pub noise: f64,
    /// Fraction of the streams handed to the search; at least one is used.
    pub frac_real: f64,
    pub n_streams: usize,
    pub halo: HaloParams,
    pub max_expressions: usize,
    pub batch_size: usize,
    pub stop_reward: Option<f64>,
    pub controller: Option<ControllerConfig>,
    pub fit: FitConfig,
}

impl Default for StreamsConfig {
    fn default() -> Self {
        StreamsConfig {
            seed: 0,
            noise: 0.0,
            frac_real: 1.0,
            n_streams: DEFAULT_STREAMS,
            halo: HaloParams::default(),
            max_expressions: 250_000,
            batch_size: 2000,
            stop_reward: None,
            controller: None,
            fit: FitConfig::default(),
        }
    }
}

impl StreamsConfig {
    pub fn n_used(&self) -> usize {
        ((self.frac_real * self.n_streams as f64).round() as usize).clamp(1, self.n_streams.max(1))
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.frac_real > 0.0 && self.frac_real <= 1.0) {
            return Err(Error::config("frac_real must lie in (0, 1]"));
        }
        if self.n_streams == 0 {
            return Err(Error::config("n_streams must be at least 1"));
        }
        if !(self.noise >= 0.0) {
            return Err(Error::config("noise must be non-negative"));
        }
        self.halo.validate()
    }

    pub fn run_config(&self) -> RunConfig {
        let mut controller = self.controller.clone().unwrap_or_default();
        controller.batch_size = self.batch_size;
        RunConfig {
            library: streams_library(),
            search: SearchConfig {
                seed: self.seed,
                max_expressions: self.max_expressions,
                stop_reward: self.stop_reward,
                ..Default::default()
            },
            controller,
            fit: self.fit.clone(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StreamEntryScore {
    pub complexity: usize,
    pub infix: String,
    pub reward: f64,
    pub refit_r2: f64,
    pub equivalent_to_target: bool,
    pub rule: Option<Rule>,
    pub class_constants: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StreamsScore {
    pub recovered: bool,
    pub accurate: bool,
    pub best_r2: f64,
    pub entries: Vec<StreamEntryScore>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StreamsRun {
    pub seed: u64,
    pub noise: f64,
    pub frac_real: f64,
    pub n_reals: usize,
    pub config_hash: String,
    pub version: String,
    pub front: Vec<ParetoRecord>,
    pub score: StreamsScore,
    pub record: RunRecord,
}

/// Whether `expr`, refit on `test`, matches the NFW composite on every stream.
pub fn stream_recovery(
    expr: &Expression,
    class: &[f64],
    spe: &[Vec<f64>],
    test: &StreamSet,
    library: &TokenLibrary,
) -> Result<Option<Rule>> {
    let target = target_expression(library)?;
    let truth = true_class_constants(&test.halo);
    let mut rule = None;
    for ((pts, e), k) in test.streams.iter().zip(&test.energies).zip(spe) {
        let (lo, hi) = pts
            .iter()
            .map(PhasePoint::radius)
            .fold((f64::INFINITY, 0.0f64), |(lo, hi), r| (lo.min(r), hi.max(r)));
        let cand = expr.bind(class, k)?;
        let tgt = target.bind(&truth, &[*e])?;
        match equivalence_rule(&cand, &tgt, &[(lo, hi)]) {
            Some(r) => {
                rule.get_or_insert(r);
            }
            None => return Ok(None),
        }
    }
    Ok(rule)
}

pub fn score_streams(front: &ParetoFront, test: &StreamSet, library: &TokenLibrary, fit: &FitConfig, seed: u64) -> Result<StreamsScore> {
    let data = streams_to_multidataset(test, 0.0, &mut substream(seed, "noise"))?;
    let fit = &crate::bench::scoring_fit(fit);
    let scales = ConstantScales::from_units(library, &data);
    let names = library.names();
    let entries = front
        .entries()
        .collect::<Vec<_>>()
        .par_iter()
        .map(|e| {
            let expr = &e.expression;
            let seed = seed ^ expr.complexity() as u64;
            let direct = refit_variant(expr, 0, &data, fit, seed, &scales);
            let mut rule = None;
            for v in 0..REFIT_VARIANTS {
                let refit = if v == 0 { direct.clone() } else { refit_variant(expr, v, &data, fit, seed, &scales) };
                if !refit.flagged_invalid {
                    rule = stream_recovery(expr, &refit.class_vals, &refit.spe_table, test, library)?;
                }
                if rule.is_some() {
                    break;
                }
            }
            Ok(StreamEntryScore {
                complexity: expr.complexity(),
                infix: expr.to_infix(names),
                reward: e.reward,
                refit_r2: if direct.r2.is_finite() { direct.r2 } else { f64::MIN },
                equivalent_to_target: rule.is_some(),
                rule,
                class_constants: direct.class_vals,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(StreamsScore {
        recovered: entries.iter().any(|e| e.equivalent_to_target),
        accurate: entries.iter().any(|e| e.refit_r2 > ACCURACY_R2),
        best_r2: entries.iter().map(|e| e.refit_r2).fold(f64::MIN, f64::max),
        entries,
    })
}

/// Training streams for a run: the first `cfg.n_used()` of the seed's catalog, with noise.
pub fn training_data(cfg: &StreamsConfig) -> Result<(StreamSet, MultiDataset)> {
    let set = make_stream_set(cfg.n_streams, &cfg.halo, substream_seed(cfg.seed, "data"))?.take(cfg.n_used());
    let data = streams_to_multidataset(&set, cfg.noise, &mut substream(cfg.seed, "noise"))?;
    Ok((set, data))
}

pub fn run_streams_experiment_with(
    cfg: &StreamsConfig,
    on_iteration: impl FnMut(&IterationRecord),
) -> Result<(StreamsRun, RunConfig)> {
    cfg.validate()?;
    let (_, train) = training_data(cfg)?;
    let run_cfg = cfg.run_config();
    let outcome = run_search_with(&train, &run_cfg, on_iteration)?;
    let library = TokenLibrary::from_spec(&run_cfg.library)?;
    let test = make_stream_set(cfg.n_used(), &cfg.halo, substream_seed(cfg.seed, "test-data"))?;
    let score = score_streams(&outcome.front, &test, &library, &run_cfg.fit, substream_seed(cfg.seed, "refit"))?;
    let run = StreamsRun {
        seed: cfg.seed,
        noise: cfg.noise,
        frac_real: cfg.frac_real,
        n_reals: cfg.n_used(),
        config_hash: run_cfg.hash(),
        version: env!("CARGO_PKG_VERSION").into(),
        front: outcome.front.to_records(&library),
        score,
        record: outcome.record,
    };
    Ok((run, run_cfg))
}

pub fn run_streams_experiment(cfg: &StreamsConfig) -> Result<StreamsRun> {
    run_streams_experiment_with(cfg, |_| {}).map(|(r, _)| r)
}

pub fn run_dir_name(cfg: &StreamsConfig) -> String {
    format!("streams_noise{}_frac{}_seed{}", cfg.noise, cfg.frac_real, cfg.seed)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).expect("serializable");
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Run and write `config.json`, `iterations.jsonl`, `pareto.json` and `run.json` under `dir`.
pub fn run_streams_to_dir(dir: &Path, cfg: &StreamsConfig) -> Result<StreamsRun> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut lines = String::new();
    let (run, run_cfg) = run_streams_experiment_with(cfg, |rec| {
        lines.push_str(&serde_json::to_string(rec).expect("record serializes"));
        lines.push('\n');
    })?;
    write_json(&dir.join("config.json"), &run_cfg)?;
    write_json(&dir.join("streams_config.json"), cfg)?;
    let jl = dir.join("iterations.jsonl");
    fs::write(&jl, lines).map_err(|e| Error::io(&jl, e))?;
    write_json(&dir.join("pareto.json"), &run.front)?;
    write_json(&dir.join("run.json"), &run)?;
    Ok(run)
}

pub fn load_streams_runs(dir: &Path) -> Result<Vec<StreamsRun>> {
    let mut paths = Vec::new();
    crate::bench::collect_named(dir, "run.json", 2, &mut paths)?;
    paths.sort();
    let mut runs = Vec::new();
    for p in paths {
        let text = fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
        let run: StreamsRun = serde_json::from_str(&text)
            .map_err(|source| Error::Json { context: p.display().to_string(), source })?;
        runs.push(run);
    }
    Ok(runs)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StreamsAggregateRow {
    pub noise: f64,
    pub frac_real: f64,
    pub n_runs: usize,
    pub recovery_rate: f64,
    pub accuracy_rate: f64,
    pub median_r2: f64,
}

pub fn aggregate_streams(runs: &[StreamsRun]) -> Vec<StreamsAggregateRow> {
    let mut groups: std::collections::BTreeMap<(u64, u64), Vec<&StreamsRun>> = Default::default();
    for r in runs {
        groups.entry((r.noise.to_bits(), r.frac_real.to_bits())).or_default().push(r);
    }
    groups
        .into_iter()
        .map(|((noise, frac), rs)| {
            let n = rs.len() as f64;
            let mut r2: Vec<f64> = rs.iter().map(|r| r.score.best_r2).collect();
            StreamsAggregateRow {
                noise: f64::from_bits(noise),
                frac_real: f64::from_bits(frac),
                n_runs: rs.len(),
                recovery_rate: rs.iter().filter(|r| r.score.recovered).count() as f64 / n,
                accuracy_rate: rs.iter().filter(|r| r.score.accurate).count() as f64 / n,
                median_r2: median(&mut r2),
            }
        })
        .collect()
}

/// `aggregate.csv` and `plot_data.json` for every run under `dir`.
pub fn analyze(dir: &Path) -> Result<Vec<StreamsAggregateRow>> {
    let rows = aggregate_streams(&load_streams_runs(dir)?);
    let path = dir.join("aggregate.csv");
    let mut w = csv::Writer::from_path(&path).map_err(|source| Error::Csv { path: path.clone(), source })?;
    for row in &rows {
        w.serialize(row).map_err(|source| Error::Csv { path: path.clone(), source })?;
    }
    w.flush().map_err(|e| Error::io(&path, e))?;
    write_json(&dir.join("plot_data.json"), &rows)?;
    Ok(rows)
}

/// Positions and kinetic energy against radius, per stream.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StreamPlotData {
    pub x: Vec<f64>,
    pub y: Vec<f64>,
    pub z: Vec<f64>,
    pub r: Vec<f64>,
    pub e_kin: Vec<f64>,
    pub energy: f64,
}

pub fn plot_data(set: &StreamSet) -> Vec<StreamPlotData> {
    set.streams
        .iter()
        .zip(&set.energies)
        .map(|(pts, e)| StreamPlotData {
            x: pts.iter().map(|p| p.position[0]).collect(),
            y: pts.iter().map(|p| p.position[1]).collect(),
            z: pts.iter().map(|p| p.position[2]).collect(),
            r: pts.iter().map(PhasePoint::radius).collect(),
            e_kin: pts.iter().map(PhasePoint::kinetic).collect(),
            energy: *e,
        })
        .collect()
}

/// Write the dataset manifest and CSVs, `streams.json` and `plot_data.json` under `dir`.
pub fn export(dir: &Path, n_streams: usize, halo: &HaloParams, noise: f64, seed: u64) -> Result<StreamSet> {
    let set = make_stream_set(n_streams, halo, substream_seed(seed, "data"))?;
    let data = streams_to_multidataset(&set, noise, &mut substream(seed, "noise"))?;
    data.write_manifest(dir)?;
    write_json(&dir.join("streams.json"), &set)?;
    write_json(&dir.join("plot_data.json"), &plot_data(&set))?;
    Ok(set)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn g_constant_matches_unit_conversion() {
        let g = 1.327_124_400_18e20 * 3.155_76e16f64.powi(2) / 3.085_677_581_491_367_3e19f64.powi(3);
        assert!((g / G - 1.0).abs() < 1e-14);
    }

    #[test]
    fn force_is_derivative_of_potential() {
        let halo = HaloParams::default();
        for r in [0.01, 1.0, 20.0, 90.0] {
            let h = 1e-5 * r;
            let fd = (potential(r + h, &halo) - potential(r - h, &halo)) / (2.0 * h);
            assert!((fd / radial_force(r, &halo) - 1.0).abs() < 1e-7, "r = {r}");
        }
    }

    #[test]
    fn unbound_ic_is_rejected() {
        let halo = HaloParams::default();
        let v = 1.01 * escape_velocity(10.0, &halo);
        let ic = PhasePoint { position: [10.0, 0.0, 0.0], velocity: [0.0, v, 0.0], t: 0.0 };
        assert!(matches!(integrate_orbit(&ic, &halo, 1e-3, 1.0), Err(Error::Integration(_))));
    }

    #[test]
    fn output_times_span_the_window() {
        let halo = HaloParams::default();
        let v = circular_velocity(30.0, &halo);
        let ic = PhasePoint { position: [30.0, 0.0, 0.0], velocity: [0.0, v, 0.0], t: 0.0 };
        let pts = integrate_orbit(&ic, &halo, 1e-3, 1.0).unwrap();
        assert_eq!(pts.len(), 100);
        assert!((pts[0].t + 1.0).abs() < 1e-9 && (pts[99].t - 1.0).abs() < 1e-9);
        assert!(pts.windows(2).all(|w| w[1].t > w[0].t));
    }
}
