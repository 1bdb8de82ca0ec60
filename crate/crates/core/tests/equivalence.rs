use classsr::bench::challenge;
use classsr::equivalence::{constancy_probe, equivalence_rule, halton_points, is_equivalent, simplify, Rule};
use classsr::expr::{evaluate, parse_infix, Expression, LibrarySpec, Node, Op, Realization, TokenLibrary};
use proptest::prelude::*;

fn library() -> TokenLibrary {
    let spec: LibrarySpec = serde_json::from_value(serde_json::json!({
        "operators": ["+", "-", "*", "/", "inv", "sqrt", "sq", "neg", "exp", "log", "cos", "sin"],
        "variables": [{"name": "x"}, {"name": "t"}],
    }))
    .unwrap();
    TokenLibrary::from_spec(&spec).unwrap()
}

fn parse(text: &str) -> Expression {
    parse_infix(text, &library()).unwrap()
}

const BOX: [(f64, f64); 2] = [(0.5, 3.0), (0.2, 2.0)];

#[test]
fn simplification_examples() {
    let lib = library();
    let s = |t: &str| simplify(&parse(t)).to_infix(lib.names());
    assert_eq!(s("x*1 + 0"), "x");
    assert_eq!(s("exp(log(x))"), "x");
    assert_eq!(s("1/(1/x)"), "x");
    assert_eq!(s("t*x"), s("x*t"));
}

#[test]
fn probe_examples() {
    assert_eq!(constancy_probe(&parse("3"), &BOX, 64), Some(3.0));
    assert_eq!(constancy_probe(&parse("x/x"), &[(1.0, 2.0), (1.0, 2.0)], 64), Some(1.0));
    let trig = constancy_probe(&parse("sin(x)^2 + cos(x)^2"), &BOX, 64).unwrap();
    assert!((trig - 1.0).abs() < 1e-12);
    assert_eq!(constancy_probe(&parse("x + t"), &BOX, 64), None);
}

#[test]
fn decay_examples() {
    let spec = challenge(2).unwrap();
    let lib = spec.truth_library();
    let ranges = spec.var_ranges();
    let target = spec.target().bind(&[], &[1.3, 1.1]).unwrap();
    let cand = |t: &str| parse_infix(t, &lib).unwrap().bind(&[], &[1.3, 1.1]).unwrap();
    assert_eq!(equivalence_rule(&cand("2*n0*exp(-t/T)"), &target, &ranges), Some(Rule::Ratio));
    assert_eq!(equivalence_rule(&cand("n0*exp(-t/T) + 7"), &target, &ranges), Some(Rule::Difference));
    assert_eq!(equivalence_rule(&cand("n0*exp(-t^2/T)"), &target, &ranges), None);
    assert_eq!(equivalence_rule(&cand("exp(-t/T)"), &target, &ranges), Some(Rule::Ratio));
}

#[test]
fn zero_and_constant_candidates_are_rejected() {
    let x = parse("x*exp(t)");
    assert!(!is_equivalent(&parse("x - x"), &x, &BOX));
    assert!(!is_equivalent(&parse("exp(1)"), &x, &BOX));
    assert!(is_equivalent(&parse("x - x"), &parse("t - t"), &BOX), "both zero differ by a constant");
}

#[test]
fn halton_points_are_distinct_and_inside() {
    let pts = halton_points(&BOX, 256);
    assert_eq!(pts.len(), 256);
    for w in pts.windows(2) {
        assert_ne!(w[0], w[1]);
    }
    assert!(pts.iter().all(|p| p.iter().zip(BOX).all(|(v, (lo, hi))| *v >= lo && *v <= hi)));
}

fn arb_expr(depth: u32) -> BoxedStrategy<Vec<Node>> {
    let leaf = prop_oneof![
        (0usize..2).prop_map(|i| vec![Node::Var(i)]),
        prop::sample::select(&[0.0, 1.0, 2.0, 0.5, -1.0][..]).prop_map(|v| vec![Node::Lit(v)]),
    ];
    leaf.prop_recursive(depth, 20, 2, |inner| {
        prop_oneof![
            (prop::sample::select(&[Op::Sqrt, Op::Square, Op::Neg, Op::Exp, Op::Log, Op::Cos, Op::Sin, Op::Inv][..]), inner.clone())
                .prop_map(|(op, a)| [vec![Node::Op(op)], a].concat()),
            (prop::sample::select(&[Op::Add, Op::Sub, Op::Mul, Op::Div][..]), inner.clone(), inner)
                .prop_map(|(op, a, b)| [vec![Node::Op(op)], a, b].concat()),
        ]
    })
    .boxed()
}

fn values(e: &Expression, points: &[Vec<f64>]) -> Vec<Option<f64>> {
    points
        .iter()
        .map(|p| {
            let r = Realization::new("p", p.iter().map(|v| vec![*v]).collect(), vec![0.0]).unwrap();
            let out = evaluate(e, &r, &[], &[]).unwrap();
            (!out.invalid).then(|| out.values[0])
        })
        .collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn simplify_preserves_values(nodes in arb_expr(4)) {
        let e = Expression::new(nodes, 0, 0).unwrap();
        let s = simplify(&e);
        prop_assert!(s.complexity() <= e.complexity() + 2);
        let pts = halton_points(&BOX, 32);
        for (a, b) in values(&e, &pts).into_iter().zip(values(&s, &pts)) {
            if let (Some(a), Some(b)) = (a, b) {
                prop_assert!((a - b).abs() <= 1e-8 * (1.0 + a.abs()), "{} vs {}", a, b);
            }
        }
    }

    #[test]
    fn equivalence_is_reflexive(nodes in arb_expr(4)) {
        let e = Expression::new(nodes, 0, 0).unwrap();
        let pts = halton_points(&BOX, 256);
        if values(&e, &pts).iter().all(|v| v.is_some_and(f64::is_finite)) {
            prop_assert!(is_equivalent(&e, &e, &BOX));
        }
    }

    #[test]
    fn equivalence_is_symmetric(a in arb_expr(3), b in arb_expr(3), shift in 0usize..3) {
        let a = Expression::new(a, 0, 0).unwrap();
        let b = match shift {
            0 => Expression::new(b, 0, 0).unwrap(),
            1 => Expression::new([vec![Node::Op(Op::Mul), Node::Lit(2.5)], a.nodes().to_vec()].concat(), 0, 0).unwrap(),
            _ => Expression::new([vec![Node::Op(Op::Add), Node::Lit(3.0)], a.nodes().to_vec()].concat(), 0, 0).unwrap(),
        };
        let pts = halton_points(&BOX, 256);
        let clean = |e: &Expression| values(e, &pts).iter().all(|v| v.is_some_and(|v| v.is_finite() && v.abs() > 1e-6));
        if clean(&a) && clean(&b) {
            prop_assert_eq!(is_equivalent(&a, &b, &BOX), is_equivalent(&b, &a, &BOX));
        }
    }
}
