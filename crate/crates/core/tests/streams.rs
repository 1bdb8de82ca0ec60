use classsr::equivalence::Rule;
use classsr::expr::TokenLibrary;
use classsr::optimizer::{fit_constants_scaled, ConstantScales, FitConfig};
use classsr::rng::substream;
use classsr::streams::*;
use proptest::prelude::*;

fn halo() -> HaloParams {
    HaloParams::default()
}

fn at_rest(r: f64) -> PhasePoint {
    PhasePoint { position: [r, 0.0, 0.0], velocity: [0.0; 3], t: 0.0 }
}

fn circular(r: f64) -> PhasePoint {
    PhasePoint { position: [r, 0.0, 0.0], velocity: [0.0, circular_velocity(r, &halo()), 0.0], t: 0.0 }
}

#[test]
fn circular_orbit_keeps_its_radius() {
    let end = leapfrog(&circular(15.0), &halo(), 1e-3, 2000).unwrap();
    assert!((end.radius() / 15.0 - 1.0).abs() < 1e-4, "{}", end.radius());
    assert!((end.t - 2.0).abs() < 1e-12);
}

#[test]
fn radial_infall_conserves_energy() {
    let orbit = integrate(&at_rest(30.0), &halo(), 1e-3, 0.05, 11, f64::INFINITY).unwrap();
    assert!(orbit.max_drift < DRIFT_TOLERANCE, "{}", orbit.max_drift);
    assert!(orbit.points[0].radius() < 30.0 && orbit.points[10].radius() < 30.0, "falls both ways in time");
}

#[test]
fn halving_the_step_cuts_drift_fourfold() {
    let ic = PhasePoint { position: [12.0, 0.0, 0.0], velocity: [30.0, 150.0, 40.0], t: 0.0 };
    let coarse = integrate(&ic, &halo(), 4e-3, 1.0, 11, f64::INFINITY).unwrap().max_drift;
    let fine = integrate(&ic, &halo(), 2e-3, 1.0, 11, f64::INFINITY).unwrap().max_drift;
    let ratio = coarse / fine;
    assert!((3.0..5.0).contains(&ratio), "{coarse:e} / {fine:e} = {ratio}");
}

#[test]
fn leapfrog_is_time_reversible() {
    let ic = PhasePoint { position: [20.0, 5.0, -3.0], velocity: [-40.0, 120.0, 60.0], t: 0.0 };
    let forward = leapfrog(&ic, &halo(), 1e-3, 1000).unwrap();
    let back = leapfrog(&forward, &halo(), -1e-3, 1000).unwrap();
    for k in 0..3 {
        assert!((back.position[k] - ic.position[k]).abs() < 1e-8);
        assert!((back.velocity[k] - ic.velocity[k]).abs() < 1e-8);
    }
}

#[test]
fn unbound_start_is_an_integration_error() {
    let mut ic = circular(10.0);
    ic.velocity[1] = 2.0 * escape_velocity(10.0, &halo());
    assert!(matches!(integrate_orbit(&ic, &halo(), 1e-3, 1.0), Err(classsr::Error::Integration(_))));
}

#[test]
fn one_stream_has_one_hundred_points() {
    let set = make_stream_set(1, &halo(), 0).unwrap();
    assert_eq!(set.len(), 1);
    assert_eq!(set.streams[0].len(), POINTS_PER_ORBIT);
    let times: Vec<f64> = set.streams[0].iter().map(|p| p.t).collect();
    assert!((times[0] + DEFAULT_SPAN).abs() < 1e-9 && (times[99] - DEFAULT_SPAN).abs() < 1e-9);
    // a catalog is a prefix of any larger one with the same seed
    assert_eq!(make_stream_set(3, &halo(), 0).unwrap().streams[0], set.streams[0]);
}

#[test]
fn kinetic_plus_potential_is_the_stream_energy() {
    let set = make_stream_set(DEFAULT_STREAMS, &halo(), 4).unwrap();
    assert_eq!(set.len(), 29);
    let data = streams_to_multidataset(&set, 0.0, &mut substream(4, "noise")).unwrap();
    for ((real, pts), e) in data.realizations().iter().zip(&set.streams).zip(&set.energies) {
        assert!(pts.iter().all(|p| p.radius() >= MIN_PERICENTRE));
        for (y, p) in real.y().iter().zip(pts) {
            let sum = y + nfw_potential(p.radius(), &halo()).unwrap();
            assert!(((sum - e) / e).abs() < 1e-6);
        }
    }
    assert!(set.max_drift.iter().all(|d| *d <= DRIFT_TOLERANCE));
}

#[test]
fn noise_scales_with_the_stream_rms() {
    let set = make_stream_set(2, &halo(), 1).unwrap();
    let clean = streams_to_multidataset(&set, 0.0, &mut substream(1, "noise")).unwrap();
    let noisy = streams_to_multidataset(&set, 0.05, &mut substream(1, "noise")).unwrap();
    let (mut resid, mut power) = (0.0, 0.0);
    for (c, n) in clean.realizations().iter().zip(noisy.realizations()) {
        for (a, b) in c.y().iter().zip(n.y()) {
            resid += (a - b).powi(2);
            power += a * a;
        }
    }
    let ratio = (resid / power).sqrt() / 0.05;
    assert!((0.8..1.2).contains(&ratio), "{ratio}");
}

#[test]
fn skeleton_fit_recovers_the_halo() {
    let lib = TokenLibrary::from_spec(&streams_library()).unwrap();
    let set = make_stream_set(DEFAULT_STREAMS, &halo(), 2).unwrap();
    let data = streams_to_multidataset(&set, 0.0, &mut substream(2, "noise")).unwrap();
    let target = target_expression(&lib).unwrap();
    let fit = fit_constants_scaled(&target, &data, &FitConfig::default(), 0, &ConstantScales::from_units(&lib, &data));
    let truth = true_class_constants(&halo());
    assert!((fit.class_vals[0] / truth[0] - 1.0).abs() < 1e-3, "{:?} vs {truth:?}", fit.class_vals);
    assert!((fit.class_vals[1] / 20.0 - 1.0).abs() < 1e-3, "{:?}", fit.class_vals);
    for (k, e) in fit.spe_table.iter().zip(&set.energies) {
        assert!((k[0] / e - 1.0).abs() < 1e-3);
    }
}

#[test]
fn potential_shape() {
    let h = halo();
    let deep = -h.energy_scale();
    assert!((nfw_potential(1e-9, &h).unwrap() / deep - 1.0).abs() < 1e-9);
    assert!(nfw_potential(0.0, &h).is_err());
    let mut last = f64::NEG_INFINITY;
    for i in 1..200 {
        let phi = nfw_potential(i as f64 * 0.5, &h).unwrap();
        assert!(phi > last && phi < 0.0);
        last = phi;
    }
}

#[test]
fn fraction_selects_streams() {
    let full = StreamsConfig::default();
    assert_eq!(full.n_used(), 29);
    let single = StreamsConfig { frac_real: 0.01, ..Default::default() };
    assert_eq!(single.n_used(), 1);
    assert!(StreamsConfig { frac_real: 0.0, ..Default::default() }.validate().is_err());
    let (set, data) = training_data(&StreamsConfig { frac_real: 0.1, n_streams: 10, ..Default::default() }).unwrap();
    assert_eq!((set.len(), data.n_realizations()), (1, 1));
}

#[test]
fn target_matches_itself_on_every_stream() {
    let lib = TokenLibrary::from_spec(&streams_library()).unwrap();
    let set = make_stream_set(3, &halo(), 6).unwrap();
    let target = target_expression(&lib).unwrap();
    let spe: Vec<Vec<f64>> = set.energies.iter().map(|e| vec![*e]).collect();
    let rule = stream_recovery(&target, &true_class_constants(&halo()), &spe, &set, &lib).unwrap();
    assert_eq!(rule, Some(Rule::Ratio), "identical forms have ratio one");
    // a free-fall style form is not the halo
    let wrong = classsr::expr::parse_infix("k + c1*c2/r", &lib).unwrap();
    assert_eq!(stream_recovery(&wrong, &true_class_constants(&halo()), &spe, &set, &lib).unwrap(), None);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    /// Leapfrog energy error is bounded and second order in the step.
    #[test]
    fn bound_orbits_have_second_order_drift(r in 5.0f64..50.0, frac in 0.2f64..0.9, z in -1.0f64..1.0) {
        let h = halo();
        let v = frac * escape_velocity(r, &h);
        let s = (1.0 - z * z).sqrt();
        let ic = PhasePoint { position: [r, 0.0, 0.0], velocity: [z * v, s * v, 0.0], t: 0.0 };
        let coarse = integrate(&ic, &h, 1e-3, 0.25, 5, f64::INFINITY).unwrap();
        let fine = integrate(&ic, &h, 5e-4, 0.25, 5, f64::INFINITY).unwrap();
        if coarse.min_radius > MIN_PERICENTRE && coarse.max_drift > 1e-10 {
            prop_assert!(coarse.max_drift < 1e-2, "{:e}", coarse.max_drift);
            let ratio = coarse.max_drift / fine.max_drift;
            prop_assert!((2.5..6.0).contains(&ratio), "{:e} / {:e}", coarse.max_drift, fine.max_drift);
        }
    }
}
