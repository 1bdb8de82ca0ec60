//! Limited-memory BFGS with a strong-Wolfe line search.
//!
//! The objective returns `None` where it is undefined (protected evaluation
//! flagged the point); the line search treats such points as `+inf` and
//! shrinks the step.

use std::collections::VecDeque;

#[derive(Clone, Debug)]
pub struct LbfgsSettings {
    pub history: usize,
    /// Stop when the largest gradient component falls below this.
    pub g_tol: f64,
    /// Stop when an accepted step changes the objective by less than this
    /// fraction of its magnitude.
    pub f_rel_tol: f64,
    pub max_iters: usize,
}

impl Default for LbfgsSettings {
    fn default() -> Self {
        LbfgsSettings { history: 10, g_tol: 1e-9, f_rel_tol: 1e-12, max_iters: 150 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Termination {
    Gradient,
    FunctionChange,
    MaxIterations,
    LineSearchFailed,
}

#[derive(Clone, Debug)]
pub struct LbfgsOutcome {
    pub x: Vec<f64>,
    pub f: f64,
    pub iters: usize,
    pub termination: Termination,
    /// Objective value after every accepted step, starting with the initial point.
    pub trace: Vec<f64>,
}

impl LbfgsOutcome {
    pub fn converged(&self) -> bool {
        matches!(self.termination, Termination::Gradient | Termination::FunctionChange)
    }
}

const C1: f64 = 1e-4;
const C2: f64 = 0.9;
const MAX_LS: usize = 30;

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn inf_norm(a: &[f64]) -> f64 {
    a.iter().fold(0.0, |m, v| m.max(v.abs()))
}

struct Probe {
    alpha: f64,
    f: f64,
    dphi: f64,
    g: Vec<f64>,
}

struct LineSearch<'a, F> {
    func: &'a mut F,
    x: &'a [f64],
    d: &'a [f64],
    f0: f64,
    dphi0: f64,
    trial: Vec<f64>,
}

impl<F: FnMut(&[f64], &mut [f64]) -> Option<f64>> LineSearch<'_, F> {
    fn eval(&mut self, alpha: f64) -> Probe {
        for ((t, x), d) in self.trial.iter_mut().zip(self.x).zip(self.d) {
            *t = x + alpha * d;
        }
        let mut g = vec![0.0; self.x.len()];
        match (self.func)(&self.trial, &mut g) {
            Some(f) if f.is_finite() && g.iter().all(|v| v.is_finite()) => {
                let dphi = dot(&g, self.d);
                Probe { alpha, f, dphi, g }
            }
            _ => Probe { alpha, f: f64::INFINITY, dphi: f64::NAN, g },
        }
    }

    fn armijo(&self, p: &Probe) -> bool {
        p.f.is_finite() && p.f <= self.f0 + C1 * p.alpha * self.dphi0
    }

    fn curvature(&self, p: &Probe) -> bool {
        p.dphi.abs() <= -C2 * self.dphi0
    }

    fn search(&mut self, alpha0: f64) -> Option<Probe> {
        let mut prev = Probe { alpha: 0.0, f: self.f0, dphi: self.dphi0, g: Vec::new() };
        let mut alpha = alpha0;
        for i in 0..MAX_LS {
            let p = self.eval(alpha);
            if !self.armijo(&p) || (i > 0 && p.f >= prev.f) {
                return self.zoom(prev, p);
            }
            if self.curvature(&p) {
                return Some(p);
            }
            if p.dphi >= 0.0 {
                return self.zoom(p, prev);
            }
            alpha *= 2.0;
            prev = p;
        }
        Some(prev).filter(|p| p.alpha > 0.0)
    }

    fn zoom(&mut self, mut lo: Probe, mut hi: Probe) -> Option<Probe> {
        for _ in 0..MAX_LS {
            let (a, b) = (lo.alpha.min(hi.alpha), lo.alpha.max(hi.alpha));
            if (b - a) <= 1e-16 * b.max(1.0) {
                break;
            }
            let mut alpha = interpolate(&lo, &hi).unwrap_or(0.5 * (lo.alpha + hi.alpha));
            let margin = 0.1 * (b - a);
            if !(alpha > a + margin && alpha < b - margin) {
                alpha = 0.5 * (lo.alpha + hi.alpha);
            }
            let p = self.eval(alpha);
            if !self.armijo(&p) || p.f >= lo.f {
                hi = p;
            } else {
                if self.curvature(&p) {
                    return Some(p);
                }
                if p.dphi * (hi.alpha - lo.alpha) >= 0.0 {
                    hi = std::mem::replace(&mut lo, p);
                } else {
                    lo = p;
                }
            }
        }
        // Settle for sufficient decrease when the curvature condition never held.
        Some(lo).filter(|p| p.alpha > 0.0 && p.f < self.f0)
    }
}

/// Cubic interpolation through two probes with slopes, when both are finite.
fn interpolate(lo: &Probe, hi: &Probe) -> Option<f64> {
    if !(lo.f.is_finite() && hi.f.is_finite() && lo.dphi.is_finite() && hi.dphi.is_finite()) {
        return None;
    }
    let (a1, a2) = (lo.alpha, hi.alpha);
    let d1 = lo.dphi + hi.dphi - 3.0 * (lo.f - hi.f) / (a1 - a2);
    let disc = d1 * d1 - lo.dphi * hi.dphi;
    if disc < 0.0 {
        return None;
    }
    let d2 = (a2 - a1).signum() * disc.sqrt();
    let denom = hi.dphi - lo.dphi + 2.0 * d2;
    if denom == 0.0 {
        return None;
    }
    let alpha = a2 - (a2 - a1) * (hi.dphi + d2 - d1) / denom;
    alpha.is_finite().then_some(alpha)
}

/// Minimize `func`, which writes the gradient into its second argument.
///
/// Returns `None` when the objective is undefined at `x0`.
pub fn minimize<F>(mut func: F, x0: &[f64], cfg: &LbfgsSettings) -> Option<LbfgsOutcome>
where
    F: FnMut(&[f64], &mut [f64]) -> Option<f64>,
{
    let n = x0.len();
    let mut x = x0.to_vec();
    let mut g = vec![0.0; n];
    let mut f = func(&x, &mut g).filter(|f| f.is_finite())?;
    if g.iter().any(|v| !v.is_finite()) {
        return None;
    }
    let mut trace = vec![f];
    let mut mem: VecDeque<(Vec<f64>, Vec<f64>, f64)> = VecDeque::with_capacity(cfg.history);
    let mut iters = 0;
    let termination = loop {
        if inf_norm(&g) <= cfg.g_tol {
            break Termination::Gradient;
        }
        if iters >= cfg.max_iters {
            break Termination::MaxIterations;
        }
        let mut d = two_loop(&g, &mem);
        let mut dphi0 = dot(&g, &d);
        if !(dphi0 < 0.0) {
            mem.clear();
            d = g.iter().map(|v| -v).collect();
            dphi0 = dot(&g, &d);
        }
        let alpha0 = if mem.is_empty() { (1.0 / g.iter().map(|v| v.abs()).sum::<f64>()).min(1.0) } else { 1.0 };

        let mut ls = LineSearch { func: &mut func, x: &x, d: &d, f0: f, dphi0, trial: vec![0.0; n] };
        let Some(p) = ls.search(alpha0) else {
            break Termination::LineSearchFailed;
        };
        iters += 1;
        let s: Vec<f64> = d.iter().map(|v| p.alpha * v).collect();
        let y: Vec<f64> = p.g.iter().zip(&g).map(|(a, b)| a - b).collect();
        let sy = dot(&s, &y);
        let f_old = f;
        for (xi, si) in x.iter_mut().zip(&s) {
            *xi += si;
        }
        f = p.f;
        g = p.g;
        trace.push(f);
        if sy > 1e-300 {
            if mem.len() == cfg.history {
                mem.pop_front();
            }
            mem.push_back((s, y, 1.0 / sy));
        }
        if (f_old - f).abs() <= cfg.f_rel_tol * f.abs().max(f_old.abs()) {
            break Termination::FunctionChange;
        }
    };
    Some(LbfgsOutcome { x, f, iters, termination, trace })
}

fn two_loop(g: &[f64], mem: &VecDeque<(Vec<f64>, Vec<f64>, f64)>) -> Vec<f64> {
    let mut q: Vec<f64> = g.to_vec();
    let mut alphas = Vec::with_capacity(mem.len());
    for (s, y, rho) in mem.iter().rev() {
        let a = rho * dot(s, &q);
        for (qi, yi) in q.iter_mut().zip(y) {
            *qi -= a * yi;
        }
        alphas.push(a);
    }
    if let Some((s, y, _)) = mem.back() {
        let gamma = dot(s, y) / dot(y, y);
        for qi in q.iter_mut() {
            *qi *= gamma;
        }
    }
    for ((s, y, rho), a) in mem.iter().zip(alphas.into_iter().rev()) {
        let b = rho * dot(y, &q);
        for (qi, si) in q.iter_mut().zip(s) {
            *qi += (a - b) * si;
        }
    }
    q.iter_mut().for_each(|v| *v = -*v);
    q
}
