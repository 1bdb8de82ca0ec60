//! Joint fitting of class and realization-specific constants.
//!
//! The cost is the pooled squared error normalized by `N_r * sum_i N(i)`,
//! i.e. the realization count appears in the denominator on top of the
//! total sample count. NRMSE divides the root of that cost by the standard
//! deviation of all targets pooled. Both follow the published definitions
//! literally and therefore differ from a plain pooled mean when `N_r > 1`.
//!
//! Parameters are packed as `[class_vals, spe_table row-major]`.

pub mod lbfgs;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::expr::{Expression, Inputs, MultiDataset, Node, Tape, TokenLibrary};
use crate::units::{UnitSpec, UnitVector, N_DIMS};
use lbfgs::{LbfgsSettings, Termination};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FitConfig {
    pub g_tol: f64,
    pub max_iters: usize,
    pub n_restarts: usize,
    pub history_size: usize,
    /// Relative objective change below which a fit counts as converged.
    pub f_rel_tol: f64,
}

impl Default for FitConfig {
    fn default() -> Self {
        FitConfig { g_tol: 1e-9, max_iters: 150, n_restarts: 2, history_size: 10, f_rel_tol: 1e-12 }
    }
}

impl FitConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.g_tol >= 0.0) || !(self.f_rel_tol >= 0.0) {
            return Err(Error::config("fit tolerances must be non-negative"));
        }
        if self.history_size == 0 {
            return Err(Error::config("history_size must be at least 1"));
        }
        Ok(())
    }

    fn settings(&self) -> LbfgsSettings {
        LbfgsSettings {
            history: self.history_size,
            g_tol: self.g_tol,
            f_rel_tol: self.f_rel_tol,
            max_iters: self.max_iters,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    pub class_vals: Vec<f64>,
    pub spe_table: Vec<Vec<f64>>,
    pub mse: f64,
    pub nrmse: f64,
    pub r2: f64,
    pub converged: bool,
    pub n_iters: usize,
    pub flagged_invalid: bool,
}

impl FitResult {
    /// Result for a candidate rejected without fitting.
    pub fn invalid(expr: &Expression, n_real: usize) -> FitResult {
        FitResult {
            class_vals: vec![f64::NAN; expr.n_class()],
            spe_table: vec![vec![f64::NAN; expr.n_spe()]; n_real],
            mse: f64::INFINITY,
            nrmse: f64::INFINITY,
            r2: f64::NEG_INFINITY,
            converged: false,
            n_iters: 0,
            flagged_invalid: true,
        }
    }
}

/// Population standard deviation of the pooled targets.
pub fn target_std(data: &MultiDataset) -> f64 {
    let y = data.pooled_y();
    let n = y.len() as f64;
    let mean = y.iter().sum::<f64>() / n;
    (y.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt()
}

fn target_ss(data: &MultiDataset) -> f64 {
    let y = data.pooled_y();
    let mean = y.iter().sum::<f64>() / y.len() as f64;
    y.iter().map(|v| (v - mean).powi(2)).sum()
}

/// Normalization of the squared-error sum: `N_r * sum_i N(i)`.
pub fn mse_denominator(data: &MultiDataset) -> f64 {
    (data.n_realizations() * data.n_total()) as f64
}

fn pack(expr: &Expression, data: &MultiDataset, class: &[f64], spe: &[Vec<f64>]) -> Result<Vec<f64>> {
    if class.len() != expr.n_class() {
        return Err(Error::contract(format!("expected {} class values", expr.n_class())));
    }
    if spe.len() != data.n_realizations() {
        return Err(Error::contract(format!(
            "spe table has {} rows for {} realizations",
            spe.len(),
            data.n_realizations()
        )));
    }
    if spe.iter().any(|row| row.len() != expr.n_spe()) {
        return Err(Error::contract(format!("spe rows must have {} entries", expr.n_spe())));
    }
    if expr.n_vars_used() > data.n_vars() {
        return Err(Error::contract("expression references a variable missing from the data"));
    }
    let mut theta = class.to_vec();
    for row in spe {
        theta.extend_from_slice(row);
    }
    Ok(theta)
}

fn unpack(expr: &Expression, n_real: usize, theta: &[f64]) -> (Vec<f64>, Vec<Vec<f64>>) {
    let nc = expr.n_class();
    let ns = expr.n_spe();
    let class = theta[..nc].to_vec();
    let spe = (0..n_real).map(|r| theta[nc + r * ns..nc + (r + 1) * ns].to_vec()).collect();
    (class, spe)
}

/// Squared-error objective with reverse-mode gradients for one expression.
pub struct Objective<'a> {
    expr: &'a Expression,
    data: &'a MultiDataset,
    tape: Tape<'a>,
    seed: Vec<f64>,
    denom: f64,
}

impl<'a> Objective<'a> {
    pub fn new(expr: &'a Expression, data: &'a MultiDataset) -> Self {
        Objective {
            expr,
            data,
            tape: Tape::new(expr),
            seed: vec![0.0; data.n_total()],
            denom: mse_denominator(data),
        }
    }

    fn inputs<'t>(&self, theta: &'t [f64]) -> Inputs<'t>
    where
        'a: 't,
    {
        let nc = self.expr.n_class();
        Inputs::pooled(self.data, &theta[..nc], &theta[nc..], self.expr.n_spe())
    }

    /// Sum of squared residuals, or `None` when flagged.
    pub fn sse(&mut self, theta: &[f64]) -> Option<f64> {
        let inp = self.inputs(theta);
        if !self.tape.forward(&inp) {
            return None;
        }
        let sse: f64 = self
            .tape
            .output()
            .iter()
            .zip(self.data.pooled_y())
            .map(|(f, y)| (f - y).powi(2))
            .sum();
        sse.is_finite().then_some(sse)
    }

    /// MSE and its gradient; `None` when flagged.
    pub fn value_grad(&mut self, theta: &[f64], grad: &mut [f64]) -> Option<f64> {
        let inp = self.inputs(theta);
        if !self.tape.forward(&inp) {
            return None;
        }
        let scale = 2.0 / self.denom;
        let mut sse = 0.0;
        for ((s, f), y) in self.seed.iter_mut().zip(self.tape.output()).zip(self.data.pooled_y()) {
            let r = f - y;
            sse += r * r;
            *s = scale * r;
        }
        grad.iter_mut().for_each(|g| *g = 0.0);
        let nc = self.expr.n_class();
        let (gc, gs) = grad.split_at_mut(nc);
        if !self.tape.backward(&inp, &self.seed, gc, gs) {
            return None;
        }
        let mse = sse / self.denom;
        mse.is_finite().then_some(mse)
    }
}

/// MSE as defined above; `+inf` when evaluation is flagged.
pub fn mse(expr: &Expression, data: &MultiDataset, class_vals: &[f64], spe_table: &[Vec<f64>]) -> Result<f64> {
    let theta = pack(expr, data, class_vals, spe_table)?;
    let mut obj = Objective::new(expr, data);
    Ok(obj.sse(&theta).map_or(f64::INFINITY, |s| s / mse_denominator(data)))
}

pub fn nrmse(expr: &Expression, data: &MultiDataset, class_vals: &[f64], spe_table: &[Vec<f64>]) -> Result<f64> {
    let sigma = target_std(data);
    if !(sigma > 0.0) {
        return Err(Error::DegenerateTarget);
    }
    Ok(mse(expr, data, class_vals, spe_table)?.sqrt() / sigma)
}

/// Pooled coefficient of determination against the global target mean.
pub fn r_squared(
    expr: &Expression,
    data: &MultiDataset,
    class_vals: &[f64],
    spe_table: &[Vec<f64>],
) -> Result<f64> {
    let theta = pack(expr, data, class_vals, spe_table)?;
    let sst = target_ss(data);
    if !(sst > 0.0) {
        return Err(Error::DegenerateTarget);
    }
    let mut obj = Objective::new(expr, data);
    Ok(obj.sse(&theta).map_or(f64::NEG_INFINITY, |s| 1.0 - s / sst))
}

/// Exact MSE gradient in packed layout; `None` when evaluation is flagged.
pub fn grad_constants(
    expr: &Expression,
    data: &MultiDataset,
    class_vals: &[f64],
    spe_table: &[Vec<f64>],
) -> Result<Option<Vec<f64>>> {
    let theta = pack(expr, data, class_vals, spe_table)?;
    let mut grad = vec![0.0; theta.len()];
    let mut obj = Objective::new(expr, data);
    Ok(obj.value_grad(&theta, &mut grad).map(|_| grad))
}

fn metrics(data: &MultiDataset, sse: f64) -> (f64, f64, f64) {
    let mse = sse / mse_denominator(data);
    let sigma = target_std(data);
    let nrmse = if sigma > 0.0 { mse.sqrt() / sigma } else if mse == 0.0 { 0.0 } else { f64::INFINITY };
    let sst = target_ss(data);
    let r2 = if sst > 0.0 { 1.0 - sse / sst } else if sse == 0.0 { 1.0 } else { f64::NEG_INFINITY };
    (mse, nrmse, r2)
}

/// Fit with every constant starting at 1.0 and deterministic restarts.
pub fn fit_constants(expr: &Expression, data: &MultiDataset, cfg: &FitConfig) -> FitResult {
    fit_constants_seeded(expr, data, cfg, 0)
}

/// As [`fit_constants`], with restart draws taken from `seed`.
pub fn fit_constants_seeded(expr: &Expression, data: &MultiDataset, cfg: &FitConfig, seed: u64) -> FitResult {
    let n_theta = expr.n_class() + expr.n_spe() * data.n_realizations();
    fit_from(expr, data, cfg, seed, vec![1.0; n_theta])
}

/// As [`fit_constants_seeded`], but every constant starts at its scale and
/// L-BFGS runs in coordinates divided by `scales`. With unit scales this is
/// exactly [`fit_constants_seeded`].
pub fn fit_constants_scaled(
    expr: &Expression,
    data: &MultiDataset,
    cfg: &FitConfig,
    seed: u64,
    scales: &ConstantScales,
) -> FitResult {
    let packed = scales.packed(expr, data.n_realizations());
    fit_from_scaled(expr, data, cfg, seed, packed.clone(), &packed)
}

/// Fit from an explicit packed starting point.
pub fn fit_from(expr: &Expression, data: &MultiDataset, cfg: &FitConfig, seed: u64, start: Vec<f64>) -> FitResult {
    let ones = vec![1.0; start.len()];
    fit_from_scaled(expr, data, cfg, seed, start, &ones)
}

/// Typical magnitude of each constant, used as a diagonal preconditioner.
#[derive(Clone, Debug, PartialEq)]
pub struct ConstantScales {
    pub class: Vec<f64>,
    pub spe: Vec<f64>,
}

impl ConstantScales {
    pub fn ones(n_class: usize, n_spe: usize) -> Self {
        ConstantScales { class: vec![1.0; n_class], spe: vec![1.0; n_spe] }
    }

    /// Magnitudes implied by the declared units: one scale per base dimension
    /// is chosen (minimum-norm in log space) so that every variable and the
    /// target have their RMS value as scale. Free or dimensionless constants get 1.
    pub fn from_units(library: &TokenLibrary, data: &MultiDataset) -> Self {
        let mut scales = ConstantScales::ones(library.n_class(), library.n_spe());
        if !library.spec().dimensional_analysis || data.n_vars() != library.n_vars() {
            return scales;
        }
        let rms = |v: &[f64]| (v.iter().map(|x| x * x).sum::<f64>() / v.len() as f64).sqrt();
        let mut rows: Vec<([f64; N_DIMS], f64)> = Vec::new();
        let mut push = |u: &UnitVector, values: &[f64]| {
            let m = rms(values);
            if !u.is_dimensionless() && m > 0.0 && m.is_finite() {
                rows.push((u.0.map(|e| *e.numer() as f64 / *e.denom() as f64), m.ln()));
            }
        };
        for (u, col) in data.var_units().iter().zip(data.pooled_columns()) {
            push(u, col);
        }
        push(&data.y_units(), data.pooled_y());
        let log_dims = min_norm_solve(&rows);
        for tok in library.tokens() {
            let UnitSpec::Exact(u) = tok.units else { continue };
            let exps = u.0.map(|e| *e.numer() as f64 / *e.denom() as f64);
            let s = exps.iter().zip(&log_dims).map(|(a, b)| a * b).sum::<f64>().exp();
            if !(s.is_finite() && s > 0.0) {
                continue;
            }
            match tok.node {
                Node::Class(i) => scales.class[i] = s,
                Node::Spe(i) => scales.spe[i] = s,
                _ => {}
            }
        }
        scales
    }

    /// Packed layout matching the optimizer: class values then spe rows.
    pub fn packed(&self, expr: &Expression, n_real: usize) -> Vec<f64> {
        let mut out: Vec<f64> = (0..expr.n_class()).map(|i| self.class.get(i).copied().unwrap_or(1.0)).collect();
        for _ in 0..n_real {
            out.extend((0..expr.n_spe()).map(|i| self.spe.get(i).copied().unwrap_or(1.0)));
        }
        out
    }
}

/// x = Aᵀ(AAᵀ + λI)⁻¹b for the rows of A with right-hand sides b.
fn min_norm_solve(rows: &[([f64; N_DIMS], f64)]) -> [f64; N_DIMS] {
    let m = rows.len();
    let mut out = [0.0; N_DIMS];
    if m == 0 {
        return out;
    }
    let mut a = vec![vec![0.0; m + 1]; m];
    for i in 0..m {
        for j in 0..m {
            a[i][j] = rows[i].0.iter().zip(&rows[j].0).map(|(x, y)| x * y).sum::<f64>();
        }
        a[i][i] += 1e-10;
        a[i][m] = rows[i].1;
    }
    // Gaussian elimination with partial pivoting
    for col in 0..m {
        let piv = (col..m).max_by(|&x, &y| a[x][col].abs().total_cmp(&a[y][col].abs())).expect("non-empty");
        a.swap(col, piv);
        let p = a[col][col];
        for row in 0..m {
            if row != col {
                let f = a[row][col] / p;
                for k in col..=m {
                    a[row][k] -= f * a[col][k];
                }
            }
        }
    }
    for i in 0..m {
        let alpha = a[i][m] / a[i][i];
        for (o, r) in out.iter_mut().zip(&rows[i].0) {
            *o += alpha * r;
        }
    }
    out
}

/// [`fit_from`] with L-BFGS working on `theta / scales`; restart draws are
/// multiplied by the scales too.
pub fn fit_from_scaled(
    expr: &Expression,
    data: &MultiDataset,
    cfg: &FitConfig,
    seed: u64,
    start: Vec<f64>,
    scales: &[f64],
) -> FitResult {
    assert_eq!(scales.len(), start.len(), "one scale per packed constant");
    let n_real = data.n_realizations();
    let mut obj = Objective::new(expr, data);
    if !expr.uses_class() && !expr.uses_spe() {
        return match obj.sse(&start) {
            Some(sse) => {
                let (mse, nrmse, r2) = metrics(data, sse);
                let (class_vals, spe_table) = unpack(expr, n_real, &start);
                FitResult { class_vals, spe_table, mse, nrmse, r2, converged: true, n_iters: 0, flagged_invalid: false }
            }
            None => FitResult::invalid(expr, n_real),
        };
    }

    let settings = cfg.settings();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut best: Option<(lbfgs::LbfgsOutcome, usize)> = None;
    let mut total_iters = 0;
    for attempt in 0..=cfg.n_restarts {
        let x0: Vec<f64> = if attempt == 0 {
            start.clone()
        } else {
            (0..start.len())
                .map(|i| {
                    let mag = 10f64.powf(rng.gen_range(-1.0..1.0)) * scales[i];
                    if rng.gen_bool(0.5) { mag } else { -mag }
                })
                .collect()
        };
        let phi0: Vec<f64> = x0.iter().zip(scales).map(|(x, s)| x / s).collect();
        let mut theta = vec![0.0; phi0.len()];
        let outcome = lbfgs::minimize(
            |phi, g| {
                theta.iter_mut().zip(phi).zip(scales).for_each(|((t, p), s)| *t = p * s);
                let f = obj.value_grad(&theta, g)?;
                g.iter_mut().zip(scales).for_each(|(gi, s)| *gi *= s);
                Some(f)
            },
            &phi0,
            &settings,
        )
        .map(|mut out| {
            out.x.iter_mut().zip(scales).for_each(|(x, s)| *x *= s);
            out
        });
        if let Some(out) = outcome {
            total_iters += out.iters;
            let better = best.as_ref().map_or(true, |(b, _)| out.f < b.f);
            let done = out.converged();
            if better {
                best = Some((out, attempt));
            }
            if done {
                break;
            }
        }
    }
    let Some((out, _)) = best else {
        return FitResult::invalid(expr, n_real);
    };
    let Some(sse) = obj.sse(&out.x) else {
        return FitResult::invalid(expr, n_real);
    };
    let (mse, nrmse, r2) = metrics(data, sse);
    let (class_vals, spe_table) = unpack(expr, n_real, &out.x);
    FitResult {
        class_vals,
        spe_table,
        mse,
        nrmse,
        r2,
        converged: matches!(out.termination, Termination::Gradient | Termination::FunctionChange),
        n_iters: total_iters,
        flagged_invalid: false,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::expr::{parse_infix, LibrarySpec, Realization, TokenLibrary};

    fn lib() -> TokenLibrary {
        let spec: LibrarySpec = serde_json::from_value(serde_json::json!({
            "operators": ["+", "-", "*", "/", "exp", "sq"],
            "variables": [{"name": "x"}],
            "class_constants": [{"name": "c1"}],
            "spe_constants": [{"name": "k1"}, {"name": "k2"}],
        }))
        .unwrap();
        TokenLibrary::from_spec(&spec).unwrap()
    }

    fn data(ys: &[&[f64]]) -> MultiDataset {
        let reals = ys
            .iter()
            .map(|y| {
                let x: Vec<f64> = (0..y.len()).map(|i| i as f64 * 0.5).collect();
                Realization::new("r", vec![x], y.to_vec()).unwrap()
            })
            .collect();
        MultiDataset::unitless(reals).unwrap()
    }

    #[test]
    fn mse_follows_double_normalization() {
        let l = lib();
        let zero = parse_infix("0*x", &l).unwrap();
        let one = data(&[&[1.0, 1.0]]);
        assert_eq!(mse(&zero, &one, &[0.0], &[vec![0.0, 0.0]]).unwrap(), 1.0);
        let two = data(&[&[1.0, 1.0], &[1.0, 1.0]]);
        let m = mse(&zero, &two, &[0.0], &[vec![0.0, 0.0], vec![0.0, 0.0]]).unwrap();
        assert_eq!(m, 4.0 / (2.0 * 4.0));
    }

    #[test]
    fn nrmse_of_mean_predictor_is_one() {
        let l = lib();
        let c = parse_infix("c1", &l).unwrap();
        let y = [1.0, 4.0, 2.0, 7.0];
        let d = data(&[&y]);
        let mean = y.iter().sum::<f64>() / 4.0;
        let v = nrmse(&c, &d, &[mean], &[vec![0.0, 0.0]]).unwrap();
        assert!((v - 1.0).abs() < 1e-14);
        // scaling y and f together leaves it unchanged
        let y2: Vec<f64> = y.iter().map(|v| 2.0 * v).collect();
        let d2 = data(&[&y2]);
        let v2 = nrmse(&c, &d2, &[2.0 * mean], &[vec![0.0, 0.0]]).unwrap();
        assert!((v2 - v).abs() < 1e-14);
        assert_eq!(r_squared(&c, &d, &[mean], &[vec![0.0, 0.0]]).unwrap(), 0.0);
    }

    #[test]
    fn degenerate_target_is_an_error() {
        let l = lib();
        let c = parse_infix("c1", &l).unwrap();
        let d = data(&[&[3.0, 3.0]]);
        assert!(matches!(nrmse(&c, &d, &[3.0], &[vec![0.0, 0.0]]), Err(Error::DegenerateTarget)));
    }

    #[test]
    fn r2_is_pooled_against_global_mean() {
        let l = lib();
        // SST = 4; predicting 0.1 everywhere on mean-zero y leaves SSE = 4 + 4 * 0.01
        let y = [1.0, -1.0, 1.0, -1.0];
        let d = data(&[&y]);
        let e = parse_infix("c1", &l).unwrap();
        let r2 = r_squared(&e, &d, &[0.1], &[vec![0.0, 0.0]]).unwrap();
        assert!((r2 + 0.01).abs() < 1e-12);
        let exact = parse_infix("k1", &l).unwrap();
        let fitted = fit_constants(&exact, &d, &FitConfig::default());
        assert!(fitted.r2.abs() < 1e-12);
    }

    #[test]
    fn class_constant_pools_all_realizations() {
        let l = lib();
        let c = parse_infix("c1", &l).unwrap();
        let d = data(&[&[5.0, 5.0, 5.0], &[5.0, 5.0, 5.0]]);
        let fit = fit_constants(&c, &d, &FitConfig::default());
        assert!((fit.class_vals[0] - 5.0).abs() < 1e-8);
        assert!(fit.mse < 1e-16);
        let d = data(&[&[1.0, 2.0, 3.0], &[7.0, 8.0, 9.0]]);
        let fit = fit_constants(&c, &d, &FitConfig::default());
        assert!((fit.class_vals[0] - 5.0).abs() < 1e-8);
    }

    #[test]
    fn spe_constant_takes_realization_means() {
        let l = lib();
        let k = parse_infix("k1", &l).unwrap();
        let d = data(&[&[1.0, 3.0], &[6.0, 8.0]]);
        let fit = fit_constants(&k, &d, &FitConfig::default());
        assert!((fit.spe_table[0][0] - 2.0).abs() < 1e-8);
        assert!((fit.spe_table[1][0] - 7.0).abs() < 1e-8);
    }

    #[test]
    fn hand_derivative_of_scaled_input() {
        let l = lib();
        let e = parse_infix("c1*x", &l).unwrap();
        let r = Realization::new("r", vec![vec![2.0]], vec![0.0]).unwrap();
        let d = MultiDataset::unitless(vec![r]).unwrap();
        let g = grad_constants(&e, &d, &[1.0], &[vec![0.0, 0.0]]).unwrap().unwrap();
        assert!((g[0] - 8.0).abs() < 1e-12);
    }

    #[test]
    fn gradient_vanishes_at_optimum() {
        let l = lib();
        let c = parse_infix("c1", &l).unwrap();
        let d = data(&[&[1.0, 2.0], &[3.0, 6.0]]);
        let g = grad_constants(&c, &d, &[3.0], &[vec![0.0, 0.0], vec![0.0, 0.0]]).unwrap().unwrap();
        assert!(g[0].abs() < 1e-10);
    }

    #[test]
    fn constant_free_expression_reports_metrics() {
        let l = lib();
        let e = parse_infix("x", &l).unwrap();
        let d = data(&[&[0.0, 0.5, 1.0]]);
        let fit = fit_constants(&e, &d, &FitConfig::default());
        assert_eq!(fit.mse, 0.0);
        assert_eq!(fit.r2, 1.0);
        assert_eq!(fit.n_iters, 0);
    }

    #[test]
    fn invalid_everywhere_is_flagged() {
        let l = lib();
        let e = parse_infix("x/(c1 - c1)", &l).unwrap();
        let d = data(&[&[0.0, 0.5, 1.0]]);
        let fit = fit_constants(&e, &d, &FitConfig::default());
        assert!(fit.flagged_invalid);
        assert_eq!(fit.mse, f64::INFINITY);
    }
}
