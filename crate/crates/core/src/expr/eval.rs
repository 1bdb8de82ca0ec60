//! Protected evaluation and reverse accumulation over a prefix tape.
//!
//! Domain violations never panic or raise: `log(x <= 0)`, `sqrt(x < 0)`,
//! division by `|d| < 1e-12` and any non-finite intermediate flag the whole
//! evaluation invalid.

use super::{Expression, MultiDataset, Node, Op, Realization};
use crate::error::{Error, Result};

/// Smallest denominator magnitude accepted by `/` and `inv`.
pub const MIN_DENOMINATOR: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq)]
pub struct EvalOutput {
    pub values: Vec<f64>,
    pub invalid: bool,
}

/// Leaf sources for one tape pass. `spe` is row-major `[N_r x n_spe]`.
#[derive(Clone, Copy)]
pub struct Inputs<'a> {
    pub columns: &'a [Vec<f64>],
    pub offsets: &'a [usize],
    pub class: &'a [f64],
    pub spe: &'a [f64],
    pub n_spe: usize,
}

impl<'a> Inputs<'a> {
    pub fn pooled(data: &'a MultiDataset, class: &'a [f64], spe: &'a [f64], n_spe: usize) -> Self {
        Inputs { columns: data.pooled_columns(), offsets: data.offsets(), class, spe, n_spe }
    }

    fn n(&self) -> usize {
        *self.offsets.last().unwrap_or(&0)
    }
}

/// Reusable evaluation buffers for one expression.
pub struct Tape<'e> {
    expr: &'e Expression,
    children: Vec<[usize; 2]>,
    vals: Vec<Vec<f64>>,
    adj: Vec<Vec<f64>>,
    /// Whether the subtree rooted at a node holds an adjustable constant.
    live: Vec<bool>,
}

impl<'e> Tape<'e> {
    pub fn new(expr: &'e Expression) -> Self {
        let n = expr.nodes().len();
        let children = expr.children();
        let mut live = vec![false; n];
        for i in (0..n).rev() {
            live[i] = match expr.nodes()[i] {
                Node::Class(_) | Node::Spe(_) => true,
                Node::Op(op) => (0..op.arity()).any(|k| live[children[i][k]]),
                _ => false,
            };
        }
        Tape { expr, children, vals: vec![Vec::new(); n], adj: vec![Vec::new(); n], live }
    }

    pub fn output(&self) -> &[f64] {
        &self.vals[0]
    }

    /// Forward pass over all samples; returns false when flagged invalid.
    pub fn forward(&mut self, inp: &Inputs) -> bool {
        let n = inp.n();
        let nodes = self.expr.nodes();
        for i in (0..nodes.len()).rev() {
            let (head, tail) = self.vals.split_at_mut(i + 1);
            let out = &mut head[i];
            out.clear();
            let ch = self.children[i];
            let child = |k: usize| -> &Vec<f64> { &tail[ch[k] - i - 1] };
            let ok = match nodes[i] {
                Node::Var(j) => {
                    out.extend_from_slice(&inp.columns[j][..n]);
                    true
                }
                Node::Lit(v) => {
                    out.resize(n, v);
                    true
                }
                Node::Class(j) => {
                    out.resize(n, inp.class[j]);
                    true
                }
                Node::Spe(j) => {
                    for r in 0..inp.offsets.len() - 1 {
                        let v = inp.spe[r * inp.n_spe + j];
                        let len = inp.offsets[r + 1] - inp.offsets[r];
                        out.extend(std::iter::repeat(v).take(len));
                    }
                    true
                }
                Node::Op(op) => apply(op, child(0), if op.arity() == 2 { Some(child(1)) } else { None }, out),
            };
            if !ok {
                return false;
            }
        }
        true
    }

    /// Reverse accumulation from `seed = d(loss)/d(output)`.
    ///
    /// Adds into `grad_class` and the row-major `grad_spe`. Must follow a
    /// successful [`Tape::forward`] with the same inputs. Returns false on a
    /// non-finite derivative.
    pub fn backward(
        &mut self,
        inp: &Inputs,
        seed: &[f64],
        grad_class: &mut [f64],
        grad_spe: &mut [f64],
    ) -> bool {
        let nodes = self.expr.nodes();
        let n = seed.len();
        self.adj[0].clear();
        self.adj[0].extend_from_slice(seed);
        for i in 0..nodes.len() {
            if !self.live[i] {
                continue;
            }
            let ch = self.children[i];
            match nodes[i] {
                Node::Var(_) | Node::Lit(_) => {}
                Node::Class(j) => {
                    let s: f64 = self.adj[i].iter().sum();
                    grad_class[j] += s;
                }
                Node::Spe(j) => {
                    for r in 0..inp.offsets.len() - 1 {
                        let s: f64 = self.adj[i][inp.offsets[r]..inp.offsets[r + 1]].iter().sum();
                        grad_spe[r * inp.n_spe + j] += s;
                    }
                }
                Node::Op(op) => {
                    let (head, tail) = self.adj.split_at_mut(i + 1);
                    let g = &head[i];
                    let v = &self.vals[i];
                    if op.arity() == 1 {
                        let a = &self.vals[ch[0]];
                        let da = &mut tail[ch[0] - i - 1];
                        da.clear();
                        da.resize(n, 0.0);
                        for k in 0..n {
                            da[k] = g[k] * unary_derivative(op, a[k], v[k]);
                        }
                    } else {
                        let (a, b) = (&self.vals[ch[0]], &self.vals[ch[1]]);
                        let (t0, t1) = tail.split_at_mut(ch[1] - i - 1);
                        let da = &mut t0[ch[0] - i - 1];
                        let db = &mut t1[0];
                        da.clear();
                        db.clear();
                        let (l0, l1) = (self.live[ch[0]], self.live[ch[1]]);
                        match op {
                            Op::Add => {
                                if l0 {
                                    da.extend_from_slice(g);
                                }
                                if l1 {
                                    db.extend_from_slice(g);
                                }
                            }
                            Op::Sub => {
                                if l0 {
                                    da.extend_from_slice(g);
                                }
                                if l1 {
                                    db.extend(g.iter().map(|x| -x));
                                }
                            }
                            Op::Mul => {
                                if l0 {
                                    da.extend(g.iter().zip(b).map(|(g, b)| g * b));
                                }
                                if l1 {
                                    db.extend(g.iter().zip(a).map(|(g, a)| g * a));
                                }
                            }
                            Op::Div => {
                                if l0 {
                                    da.extend(g.iter().zip(b).map(|(g, b)| g / b));
                                }
                                if l1 {
                                    db.extend(g.iter().zip(v).zip(b).map(|((g, v), b)| -g * v / b));
                                }
                            }
                            _ => unreachable!("unary op in binary branch"),
                        }
                    }
                }
            }
        }
        grad_class.iter().chain(grad_spe.iter()).all(|g| g.is_finite())
    }
}

fn unary_derivative(op: Op, a: f64, v: f64) -> f64 {
    match op {
        Op::Inv => -v * v,
        Op::Sqrt => 0.5 / v,
        Op::Square => 2.0 * a,
        Op::Neg => -1.0,
        Op::Exp => v,
        Op::Log => 1.0 / a,
        Op::Cos => -a.sin(),
        Op::Sin => a.cos(),
        _ => unreachable!("binary op in unary derivative"),
    }
}

fn apply(op: Op, a: &[f64], b: Option<&[f64]>, out: &mut Vec<f64>) -> bool {
    let b = || b.expect("binary operand");
    match op {
        Op::Add => out.extend(a.iter().zip(b()).map(|(x, y)| x + y)),
        Op::Sub => out.extend(a.iter().zip(b()).map(|(x, y)| x - y)),
        Op::Mul => out.extend(a.iter().zip(b()).map(|(x, y)| x * y)),
        Op::Div => {
            if b().iter().any(|d| d.abs() < MIN_DENOMINATOR) {
                return false;
            }
            out.extend(a.iter().zip(b()).map(|(x, y)| x / y));
        }
        Op::Inv => {
            if a.iter().any(|d| d.abs() < MIN_DENOMINATOR) {
                return false;
            }
            out.extend(a.iter().map(|x| 1.0 / x));
        }
        Op::Sqrt => {
            if a.iter().any(|&x| x < 0.0) {
                return false;
            }
            out.extend(a.iter().map(|x| x.sqrt()));
        }
        Op::Square => out.extend(a.iter().map(|x| x * x)),
        Op::Neg => out.extend(a.iter().map(|x| -x)),
        Op::Exp => out.extend(a.iter().map(|x| x.exp())),
        Op::Log => {
            if a.iter().any(|&x| x <= 0.0) {
                return false;
            }
            out.extend(a.iter().map(|x| x.ln()));
        }
        Op::Cos => out.extend(a.iter().map(|x| x.cos())),
        Op::Sin => out.extend(a.iter().map(|x| x.sin())),
    }
    out.iter().all(|v| v.is_finite())
}

fn check_lengths(expr: &Expression, class_len: usize, spe_len: usize, n_vars: usize) -> Result<()> {
    if class_len != expr.n_class() {
        return Err(Error::contract(format!(
            "expected {} class values, got {class_len}",
            expr.n_class()
        )));
    }
    if spe_len != expr.n_spe() {
        return Err(Error::contract(format!("expected {} spe values, got {spe_len}", expr.n_spe())));
    }
    if expr.n_vars_used() > n_vars {
        return Err(Error::contract(format!(
            "expression uses {} variables, data has {n_vars}",
            expr.n_vars_used()
        )));
    }
    Ok(())
}

/// Evaluate on one realization.
pub fn evaluate(
    expr: &Expression,
    realization: &Realization,
    class_vals: &[f64],
    spe_vals: &[f64],
) -> Result<EvalOutput> {
    check_lengths(expr, class_vals.len(), spe_vals.len(), realization.n_vars())?;
    let offsets = [0, realization.n_samples()];
    let inp = Inputs {
        columns: realization.columns(),
        offsets: &offsets,
        class: class_vals,
        spe: spe_vals,
        n_spe: expr.n_spe(),
    };
    let mut tape = Tape::new(expr);
    if tape.forward(&inp) {
        Ok(EvalOutput { values: tape.vals.swap_remove(0), invalid: false })
    } else {
        Ok(EvalOutput { values: Vec::new(), invalid: true })
    }
}

/// Evaluate every realization, row `i` of `spe_table` feeding realization `i`.
pub fn evaluate_multi(
    expr: &Expression,
    data: &MultiDataset,
    class_vals: &[f64],
    spe_table: &[Vec<f64>],
) -> Result<Vec<EvalOutput>> {
    if spe_table.len() != data.n_realizations() {
        return Err(Error::contract(format!(
            "spe table has {} rows for {} realizations",
            spe_table.len(),
            data.n_realizations()
        )));
    }
    data.realizations()
        .iter()
        .zip(spe_table)
        .map(|(r, spe)| evaluate(expr, r, class_vals, spe))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::expr::{parse_infix, LibrarySpec, TokenLibrary};

    fn lib(vars: &[&str], class: &[&str], spe: &[&str]) -> TokenLibrary {
        let spec: LibrarySpec = serde_json::from_value(serde_json::json!({
            "operators": ["+", "-", "*", "/", "inv", "sqrt", "sq", "neg", "exp", "log", "cos", "sin"],
            "variables": vars.iter().map(|v| serde_json::json!({"name": v})).collect::<Vec<_>>(),
            "fixed_constants": [{"name": "1", "value": 1.0}],
            "class_constants": class.iter().map(|v| serde_json::json!({"name": v})).collect::<Vec<_>>(),
            "spe_constants": spe.iter().map(|v| serde_json::json!({"name": v})).collect::<Vec<_>>(),
        }))
        .unwrap();
        TokenLibrary::from_spec(&spec).unwrap()
    }

    #[test]
    fn x_plus_one() {
        let l = lib(&["x0"], &[], &[]);
        let e = parse_infix("x0 + 1", &l).unwrap();
        let r = Realization::new("r", vec![vec![0.0, 2.0]], vec![0.0, 0.0]).unwrap();
        assert_eq!(evaluate(&e, &r, &[], &[]).unwrap().values, vec![1.0, 3.0]);
    }

    #[test]
    fn decay_at_origin() {
        let l = lib(&["t"], &[], &["n0", "T"]);
        let e = parse_infix("n0*exp(-t/T)", &l).unwrap();
        let r = Realization::new("r", vec![vec![0.0]], vec![0.0]).unwrap();
        assert_eq!(evaluate(&e, &r, &[], &[1.0, 1.0]).unwrap().values, vec![1.0]);
    }

    #[test]
    fn terminal_velocity_matches_scalar_arithmetic() {
        let l = lib(&["m", "A"], &[], &["rho"]);
        let e = parse_infix("sqrt(2*m*9.807/(0.47*A*rho))", &l).unwrap();
        let r = Realization::new("r", vec![vec![1.0], vec![1.0]], vec![0.0]).unwrap();
        let got = evaluate(&e, &r, &[], &[1.0]).unwrap().values[0];
        let oracle = ((2.0 * 1.0 * 9.807) / (0.47 * 1.0 * 1.0) as f64).sqrt();
        assert!((got - oracle).abs() < 1e-14);
        assert!((got - 6.460_024_372_5).abs() < 1e-9);
    }

    #[test]
    fn multi_uses_row_per_realization() {
        let l = lib(&["x"], &["c1"], &["k1"]);
        let r = |n: usize| Realization::new("r", vec![vec![0.5; n]], vec![0.0; n]).unwrap();
        let data = MultiDataset::unitless(vec![r(3), r(2)]).unwrap();
        let k = parse_infix("k1", &l).unwrap();
        let out = evaluate_multi(&k, &data, &[0.0], &[vec![2.0], vec![5.0]]).unwrap();
        assert_eq!(out[0].values, vec![2.0; 3]);
        assert_eq!(out[1].values, vec![5.0; 2]);
        let c = parse_infix("c1", &l).unwrap();
        let out = evaluate_multi(&c, &data, &[3.0], &[vec![0.0], vec![0.0]]).unwrap();
        assert!(out.iter().all(|o| o.values.iter().all(|&v| v == 3.0)));
    }

    #[test]
    fn free_fall_per_realization() {
        let l = lib(&["t"], &[], &["v0", "z0"]);
        let e = parse_infix("0.5*9.81*t^2 + t*v0 + z0", &l).unwrap();
        let ts = vec![0.0, 0.25, 0.6, 1.0];
        let params = [[1.5, -2.0], [7.0, 0.3]];
        let reals: Vec<_> = (0..2)
            .map(|_| Realization::new("r", vec![ts.clone()], vec![0.0; 4]).unwrap())
            .collect();
        let data = MultiDataset::unitless(reals).unwrap();
        let table: Vec<Vec<f64>> = params.iter().map(|p| p.to_vec()).collect();
        let out = evaluate_multi(&e, &data, &[], &table).unwrap();
        for (o, p) in out.iter().zip(params) {
            for (v, t) in o.values.iter().zip(&ts) {
                let oracle = 0.5 * 9.81 * t * t + t * p[0] + p[1];
                assert!((v - oracle).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn domain_violations_are_flagged() {
        let l = lib(&["x"], &[], &[]);
        let r = Realization::new("r", vec![vec![-1.0, 1.0]], vec![0.0, 0.0]).unwrap();
        for text in ["log(x)", "sqrt(x)", "1/(x - x)", "inv(x - x)", "exp(exp(exp(exp(x*10))))"] {
            let e = parse_infix(text, &l).unwrap();
            let out = evaluate(&e, &r, &[], &[]).unwrap();
            assert!(out.invalid, "{text} should be invalid");
        }
    }

    #[test]
    fn wrong_lengths_are_contract_errors() {
        let l = lib(&["x"], &["c1"], &[]);
        let e = parse_infix("c1*x", &l).unwrap();
        let r = Realization::new("r", vec![vec![1.0]], vec![0.0]).unwrap();
        assert!(matches!(evaluate(&e, &r, &[], &[]), Err(Error::Contract(_))));
    }
}
