use classsr::bench::{
    add_noise, aggregate, challenge, challenges, generate_challenge_data, load_runs, noisy_dataset, run_benchmark,
    score_run, BenchConfig, BenchSettings, Mode,
};
use classsr::expr::{parse_infix, TokenLibrary};
use classsr::optimizer::{fit_constants, FitConfig};
use classsr::rng::substream;
use classsr::search::{reward, ParetoEntry, ParetoFront};

fn front_of(texts: &[&str], lib: &TokenLibrary, data: &classsr::expr::MultiDataset) -> ParetoFront {
    let mut f = ParetoFront::new();
    for t in texts {
        let expression = parse_infix(t, lib).unwrap();
        let fit = fit_constants(&expression, data, &FitConfig::default());
        let reward = reward(fit.nrmse);
        let tokens = expression.nodes().iter().map(|n| lib.id_of_node(n).unwrap()).collect();
        f.update(ParetoEntry { tokens, expression, fit, reward });
    }
    f
}

#[test]
fn eight_challenges_with_table_ranges() {
    let all = challenges();
    assert_eq!(all.iter().map(|c| c.id).collect::<Vec<_>>(), (1..=8).collect::<Vec<_>>());
    for c in &all {
        // every target parses and is defined over its whole box
        let data = generate_challenge_data(c.id, 3, 50, 1).unwrap();
        assert_eq!(data.data.n_realizations(), 3);
        assert_eq!(data.params[0].len(), c.parameters.len());
        for (p, r) in data.params[0].iter().zip(&c.parameters) {
            assert!(*p >= r.lo && *p <= r.hi);
        }
    }
    assert!(challenge(9).is_err());
}

#[test]
fn pinned_parameter_examples() {
    assert_eq!(challenge(2).unwrap().evaluate(vec![vec![0.0]], &[1.0, 1.0]).unwrap(), vec![1.0]);
    let gas = challenge(7).unwrap().evaluate(vec![vec![1.0], vec![1.0]], &[1.0]).unwrap()[0];
    assert!((gas - 8.314).abs() < 1e-12);
    let photons = challenge(6).unwrap().evaluate(vec![vec![1.0]], &[5.9]).unwrap()[0];
    assert!((photons - 0.58198).abs() < 1e-5);
}

#[test]
fn data_generation_is_seeded() {
    let a = generate_challenge_data(4, 5, 20, 11).unwrap();
    let b = generate_challenge_data(4, 5, 20, 11).unwrap();
    let c = generate_challenge_data(4, 5, 20, 12).unwrap();
    assert_eq!(a.data.pooled_y(), b.data.pooled_y());
    assert_ne!(a.data.pooled_y(), c.data.pooled_y());
}

#[test]
fn noise_examples() {
    let mut rng = substream(0, "noise");
    assert_eq!(add_noise(&[3.0, 4.0], 0.0, &mut rng), vec![3.0, 4.0]);
    // y = [3, 4] repeated: RMS 3.5355, so gamma 1 gives that standard deviation
    let y: Vec<f64> = (0..100_000).map(|i| if i % 2 == 0 { 3.0 } else { 4.0 }).collect();
    let noisy = add_noise(&y, 1.0, &mut rng);
    let resid: Vec<f64> = noisy.iter().zip(&y).map(|(a, b)| a - b).collect();
    let mean = resid.iter().sum::<f64>() / resid.len() as f64;
    let sd = (resid.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / resid.len() as f64).sqrt();
    assert!((sd / 3.5355 - 1.0).abs() < 0.02, "{sd}");
}

#[test]
fn noise_is_applied_per_realization() {
    let clean = generate_challenge_data(7, 4, 2000, 3).unwrap();
    let noisy = noisy_dataset(&clean.data, 0.01, &mut substream(3, "noise")).unwrap();
    for (c, n) in clean.data.realizations().iter().zip(noisy.realizations()) {
        let rms = (c.y().iter().map(|v| v * v).sum::<f64>() / c.n_samples() as f64).sqrt();
        let sd = (c.y().iter().zip(n.y()).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / c.n_samples() as f64).sqrt();
        assert!((sd / (0.01 * rms) - 1.0).abs() < 0.1);
    }
}

#[test]
fn recovery_examples() {
    let spec = challenge(2).unwrap();
    let lib = TokenLibrary::from_spec(&spec.search_library()).unwrap();
    let test = generate_challenge_data(2, 10, 100, 5).unwrap();
    let fit = FitConfig::default();

    let exact = front_of(&["k1*exp(-(t/k2))"], &lib, &test.data);
    let s = score_run(&exact, &spec, &test, lib.names(), &fit, 0);
    assert!(s.recovered && s.accurate, "{s:?}");

    let constants = front_of(&["k1", "c1"], &lib, &test.data);
    let s = score_run(&constants, &spec, &test, lib.names(), &fit, 0);
    assert!(!s.recovered);

    // n0 is constant within each realization, so the ratio rule accepts the missing prefactor
    let near = front_of(&["exp(-(t/k2))"], &lib, &test.data);
    let s = score_run(&near, &spec, &test, lib.names(), &fit, 0);
    assert!(s.recovered);

    let wrong = front_of(&["k1*exp(-(t*t/k2))"], &lib, &test.data);
    assert!(!score_run(&wrong, &spec, &test, lib.names(), &fit, 0).recovered);
}

#[test]
fn single_cell_matrix_writes_one_run() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = BenchConfig {
        challenges: vec![7],
        noises: vec![0.0],
        seeds: vec![0],
        n_reals: vec![1],
        settings: BenchSettings { max_expressions: 200, batch_size: 100, n_samples: 30, ..Default::default() },
    };
    let entries = run_benchmark(&cfg, dir.path()).unwrap();
    assert_eq!(entries.len(), 1);
    assert!(entries[0].error.is_none());
    for f in ["config.json", "iterations.jsonl", "pareto.json", "run.json"] {
        assert!(entries[0].dir.join(f).is_file(), "{f}");
    }
    let runs = load_runs(dir.path()).unwrap();
    assert_eq!(runs.len(), 1);
    assert_eq!(runs[0].mode, Mode::Sr);
    let rows = aggregate(&runs);
    assert_eq!(rows.len(), 1);
    assert!(dir.path().join("aggregate.csv").is_file());
}
