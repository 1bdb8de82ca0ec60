use classsr::expr::{
    evaluate, evaluate_multi, is_complete, is_complete_arities, parse_infix, Expression, LibrarySpec, MultiDataset,
    Node, Op, Realization, TokenLibrary,
};
use proptest::prelude::*;

fn library(vars: &[&str], class: &[&str], spe: &[&str]) -> TokenLibrary {
    let named = |v: &[&str]| v.iter().map(|n| serde_json::json!({ "name": n })).collect::<Vec<_>>();
    let spec: LibrarySpec = serde_json::from_value(serde_json::json!({
        "operators": ["+", "-", "*", "/", "inv", "sqrt", "sq", "neg", "exp", "log", "cos", "sin"],
        "variables": named(vars),
        "fixed_constants": [{"name": "1", "value": 1.0}],
        "class_constants": named(class),
        "spe_constants": named(spe),
    }))
    .unwrap();
    TokenLibrary::from_spec(&spec).unwrap()
}

fn ids(lib: &TokenLibrary, symbols: &[&str]) -> Vec<usize> {
    symbols.iter().map(|s| lib.id_of(s).unwrap_or_else(|| panic!("no token {s}"))).collect()
}

#[test]
fn completeness_examples() {
    let lib = library(&["x", "t"], &[], &["Phi", "omega"]);
    assert!(is_complete(&ids(&lib, &["+", "x", "1"]), &lib).unwrap());
    assert!(!is_complete(&ids(&lib, &["+", "x"]), &lib).unwrap());
    // body of the harmonic oscillator: cos(Phi + omega*t)
    assert!(is_complete(&ids(&lib, &["cos", "+", "Phi", "*", "omega", "t"]), &lib).unwrap());
    assert!(!is_complete_arities([]));
    assert!(!is_complete_arities([0, 0]));
}

#[test]
fn evaluation_examples() {
    let lib = library(&["x0"], &[], &[]);
    let e = parse_infix("x0 + 1", &lib).unwrap();
    let r = Realization::new("r", vec![vec![0.0, 2.0]], vec![0.0, 0.0]).unwrap();
    assert_eq!(evaluate(&e, &r, &[], &[]).unwrap().values, vec![1.0, 3.0]);

    let lib = library(&["t"], &[], &["n0", "T"]);
    let e = parse_infix("n0*exp(-t/T)", &lib).unwrap();
    let r = Realization::new("r", vec![vec![0.0]], vec![0.0]).unwrap();
    assert_eq!(evaluate(&e, &r, &[], &[1.0, 1.0]).unwrap().values, vec![1.0]);

    let lib = library(&["m", "A", "rho"], &[], &[]);
    let e = parse_infix("sqrt(2*m*9.807/(0.47*A*rho))", &lib).unwrap();
    let r = Realization::new("r", vec![vec![1.0], vec![1.0], vec![1.0]], vec![0.0]).unwrap();
    let v = evaluate(&e, &r, &[], &[]).unwrap().values[0];
    assert!((v - (2.0f64 * 9.807 / 0.47).sqrt()).abs() < 1e-12);
    assert!((v - 6.4594).abs() < 2e-3);
}

#[test]
fn multi_realization_examples() {
    let lib = library(&["x"], &["c1"], &["k1"]);
    let reals = vec![
        Realization::new("a", vec![vec![0.0, 1.0, 2.0]], vec![0.0; 3]).unwrap(),
        Realization::new("b", vec![vec![5.0, 6.0]], vec![0.0; 2]).unwrap(),
    ];
    let data = MultiDataset::unitless(reals).unwrap();
    let k = parse_infix("k1", &lib).unwrap();
    let out = evaluate_multi(&k, &data, &[0.0], &[vec![2.0], vec![5.0]]).unwrap();
    assert_eq!(out[0].values, vec![2.0; 3]);
    assert_eq!(out[1].values, vec![5.0; 2]);
    let c = parse_infix("c1", &lib).unwrap();
    let out = evaluate_multi(&c, &data, &[3.0], &[vec![0.0], vec![0.0]]).unwrap();
    assert!(out.iter().all(|o| o.values.iter().all(|v| *v == 3.0)));
}

#[test]
fn free_fall_matches_scalar_evaluation() {
    let lib = library(&["t"], &["c1"], &["k1", "k2"]);
    let e = parse_infix("c1*t^2 + k1*t + k2", &lib).unwrap();
    let params = [(1.5, 2.0), (-0.5, 7.0), (3.0, -1.0)];
    let ts: Vec<f64> = (0..25).map(|i| i as f64 * 0.2).collect();
    let reals: Vec<Realization> = params
        .iter()
        .enumerate()
        .map(|(i, _)| Realization::new(format!("r{i}"), vec![ts.clone()], vec![0.0; ts.len()]).unwrap())
        .collect();
    let data = MultiDataset::unitless(reals).unwrap();
    let spe: Vec<Vec<f64>> = params.iter().map(|(v0, z0)| vec![*v0, *z0]).collect();
    let out = evaluate_multi(&e, &data, &[4.905], &spe).unwrap();
    for (o, (v0, z0)) in out.iter().zip(params) {
        for (y, t) in o.values.iter().zip(&ts) {
            let expected = 0.5 * 9.81 * t * t + t * v0 + z0;
            assert!((y - expected).abs() < 1e-12 * (1.0 + expected.abs()));
        }
    }
}

#[test]
fn complexity_examples() {
    let lib = library(&["x", "t"], &[], &["n0", "T"]);
    assert_eq!(parse_infix("x", &lib).unwrap().complexity(), 1);
    assert_eq!(parse_infix("x + 1", &lib).unwrap().complexity(), 3);
    assert_eq!(parse_infix("n0*exp(-t/T)", &lib).unwrap().complexity(), 7);
}

#[test]
fn printing_examples() {
    let lib = library(&["x", "t"], &[], &["A", "Phi", "omega"]);
    let from = |syms: &[&str]| Expression::from_ids(&ids(&lib, syms), &lib).unwrap().to_infix(lib.names());
    assert_eq!(from(&["+", "x", "1"]).replace(' ', ""), "(x+1)");
    assert_eq!(from(&["sqrt", "x"]), "sqrt(x)");
    let osc = from(&["*", "A", "cos", "+", "Phi", "*", "omega", "t"]);
    assert_eq!(osc.replace(' ', ""), "A*cos(Phi+omega*t)");
}

#[test]
fn parsing_reverses_printing() {
    let lib = library(&["x", "t"], &[], &["A", "Phi", "omega"]);
    for (text, prefix) in [
        ("x + 1", vec!["+", "x", "1"]),
        ("sqrt(x)", vec!["sqrt", "x"]),
        ("A*cos(Phi + omega*t)", vec!["*", "A", "cos", "+", "Phi", "*", "omega", "t"]),
    ] {
        let parsed = parse_infix(text, &lib).unwrap();
        let built = Expression::from_ids(&ids(&lib, &prefix), &lib).unwrap();
        assert_eq!(parsed, built, "{text}");
    }
}

#[test]
fn protected_operators_flag_invalid() {
    let lib = library(&["x"], &[], &[]);
    let r = Realization::new("r", vec![vec![-1.0, 0.0, 1000.0]], vec![0.0; 3]).unwrap();
    for text in ["log(x)", "sqrt(x)", "1/(x - x)", "exp(x)"] {
        let e = parse_infix(text, &lib).unwrap();
        assert!(evaluate(&e, &r, &[], &[]).unwrap().invalid, "{text} should be flagged");
    }
}

fn arb_nodes(depth: u32) -> BoxedStrategy<Vec<Node>> {
    let leaf = prop_oneof![
        (0usize..2).prop_map(|i| vec![Node::Var(i)]),
        Just(vec![Node::Lit(1.0)]),
        Just(vec![Node::Class(0)]),
        Just(vec![Node::Spe(0)]),
    ];
    leaf.prop_recursive(depth, 24, 2, |inner| {
        prop_oneof![
            (prop::sample::select(&[Op::Sqrt, Op::Square, Op::Neg, Op::Exp, Op::Log, Op::Cos, Op::Sin, Op::Inv][..]), inner.clone())
                .prop_map(|(op, a)| [vec![Node::Op(op)], a].concat()),
            (prop::sample::select(&[Op::Add, Op::Sub, Op::Mul, Op::Div][..]), inner.clone(), inner)
                .prop_map(|(op, a, b)| [vec![Node::Op(op)], a, b].concat()),
        ]
    })
    .boxed()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn printed_expressions_parse_back(nodes in arb_nodes(5)) {
        let lib = library(&["x", "t"], &["c1"], &["k1"]);
        let e = Expression::new(nodes, 1, 1).unwrap();
        let text = e.to_infix(lib.names());
        let back = parse_infix(&text, &lib).unwrap();
        prop_assert_eq!(&back.to_infix(lib.names()), &text);
        // values agree wherever the original is defined
        let r = Realization::new("p", vec![vec![0.3, 1.7, 2.9], vec![0.5, 1.1, 4.0]], vec![0.0; 3]).unwrap();
        let a = evaluate(&e, &r, &[1.3], &[0.7]).unwrap();
        let b = evaluate(&back, &r, &[1.3], &[0.7]).unwrap();
        prop_assert_eq!(a.invalid, b.invalid);
        for (u, v) in a.values.iter().zip(&b.values) {
            prop_assert!((u - v).abs() <= 1e-9 * (1.0 + u.abs()), "{} vs {} for {}", u, v, text);
        }
    }

    #[test]
    fn arities_decide_completeness(arities in prop::collection::vec(0usize..3, 1..20)) {
        let mut dangling: i64 = 1;
        let mut closed_early = false;
        for (i, a) in arities.iter().enumerate() {
            dangling += *a as i64 - 1;
            if dangling == 0 && i + 1 < arities.len() {
                closed_early = true;
            }
        }
        prop_assert_eq!(is_complete_arities(arities.clone()), dangling == 0 && !closed_early);
    }
}
