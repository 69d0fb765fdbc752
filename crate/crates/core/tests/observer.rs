mod common;

use common::{harmonic_oscillator, oscillator_matrices, pseudo_inverse, sylvester};
use kkl::dynamics::{simulate_system, SimOptions};
use kkl::learning::{Encoder, LearnedObserver};
use kkl::linfilter::build_design;
use kkl::observer::{
    add_noise, contraction_check, error_heatmap, estimate, evaluate_trajectory, rmse, run_filter, ContractionOptions, ContractionOutcome,
    EstimateOptions, TrajectoryConfig,
};
use kkl::sampling::{uniform_grid, FilterMatrices};
use kkl::KklError;

fn linear_observer(omega: f64) -> LearnedObserver<f64> {
    let (a, c) = oscillator_matrices();
    let d = build_design(omega, 2, 1).unwrap();
    let t = sylvester(&a, &c, &d.d, &d.f);
    LearnedObserver::from_linear_maps(t.clone(), pseudo_inverse(&t), 1).unwrap()
}

#[test]
fn noise_statistics() {
    let y = vec![vec![0.0f64]; 1_000_000];
    let noisy = add_noise(&y, 0.5, 17).unwrap();
    let n = noisy.len() as f64;
    let mean = noisy.iter().map(|v| v[0]).sum::<f64>() / n;
    let std = (noisy.iter().map(|v| (v[0] - mean).powi(2)).sum::<f64>() / n).sqrt();
    assert!((std - 0.5).abs() < 0.005, "{std}");
    assert!(mean.abs() < 5.0 * 0.5 / n.sqrt());
}

#[test]
fn filter_superposition() {
    let design = build_design(0.3, 2, 1).unwrap();
    let f = FilterMatrices::from_design(&design);
    let y1: Vec<Vec<f64>> = (0..500).map(|k| vec![(k as f64 * 0.01).sin()]).collect();
    let y2: Vec<Vec<f64>> = (0..500).map(|k| vec![(k as f64 * 0.013).cos() * 2.0]).collect();
    let sum: Vec<Vec<f64>> = y1.iter().zip(&y2).map(|(a, b)| vec![a[0] + b[0]]).collect();
    let zero = vec![vec![0.0]; 500];
    let mut o = EstimateOptions::new(0.01);
    o.z0 = Some(vec![0.3, -0.1, 0.2]);
    let (za, zb, zs, z0) = (
        run_filter(&f, &y1, &o).unwrap(),
        run_filter(&f, &y2, &o).unwrap(),
        run_filter(&f, &sum, &o).unwrap(),
        run_filter(&f, &zero, &o).unwrap(),
    );
    for k in 0..500 {
        for i in 0..3 {
            assert!((zs[k][i] - (za[k][i] + zb[k][i] - z0[k][i])).abs() < 1e-10);
        }
    }
}

#[test]
fn non_finite_measurements_abort_with_the_step() {
    let design = build_design(0.3, 2, 1).unwrap();
    let mut y = vec![vec![0.1]; 20];
    y[7][0] = f64::INFINITY;
    let err = run_filter(&FilterMatrices::from_design(&design), &y, &EstimateOptions::new(0.01)).unwrap_err();
    assert!(matches!(err, KklError::NonFiniteState { .. }), "{err}");
}

#[test]
fn stored_rmse_matches_recomputation() {
    let obs = linear_observer(0.5);
    let design = obs.design(0.5).unwrap();
    let sys = harmonic_oscillator();
    let cfg = TrajectoryConfig { duration: 10.0, dt: Some(1e-2), sigma: 0.1, seed: 3, ..TrajectoryConfig::default() };
    let run = evaluate_trajectory(&obs, &design, &sys, &[0.6, 0.6], &cfg).unwrap();
    let n = run.estimates.len() as f64;
    let manual = (run
        .estimates
        .iter()
        .zip(&run.truth.states)
        .map(|(a, b)| (a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2))
        .sum::<f64>()
        / n)
        .sqrt();
    assert!((run.rmse - manual).abs() <= 1e-12 * manual);
    assert_eq!(run.rmse, rmse(&run.estimates, &run.truth.states));
    let mut buf = Vec::new();
    run.write_csv(&mut buf).unwrap();
    assert!(String::from_utf8(buf).unwrap().starts_with("t,x1,x2,y_meas,z1,z2,z3,xhat1,xhat2\n"));
}

#[test]
fn noise_raises_the_error_on_average() {
    let obs = linear_observer(0.5);
    let design = obs.design(0.5).unwrap();
    let sys = harmonic_oscillator();
    let mean = |sigma: f64| {
        (0..5)
            .map(|seed| {
                let cfg = TrajectoryConfig { duration: 10.0, dt: Some(1e-2), sigma, seed, ..TrajectoryConfig::default() };
                evaluate_trajectory(&obs, &design, &sys, &[0.6, 0.6], &cfg).unwrap().rmse
            })
            .sum::<f64>()
            / 5.0
    };
    assert!(mean(0.5) >= mean(0.0));
}

#[test]
fn starting_on_the_manifold_removes_the_transient() {
    let obs = linear_observer(0.5);
    let design = obs.design(0.5).unwrap();
    let sys = harmonic_oscillator();
    let cfg = TrajectoryConfig { duration: 5.0, dt: Some(1e-3), start_on_manifold: true, ..TrajectoryConfig::default() };
    let run = evaluate_trajectory(&obs, &design, &sys, &[0.6, 0.6], &cfg).unwrap();
    assert!(run.errors().iter().all(|&e| e < 1e-6), "{}", run.errors().iter().cloned().fold(0.0, f64::max));
}

fn linear_slope(omega: f64) -> (f64, f64) {
    let obs = linear_observer(omega);
    let design = obs.design(omega).unwrap();
    let duration = 10.0 / design.lambda_min;
    let run = contraction_check(&obs, &design, &harmonic_oscillator(), &[0.6, 0.6], &ContractionOptions::new(duration, 1e-3)).unwrap();
    (run.outcome.slope().unwrap(), design.lambda_min)
}

#[test]
fn exact_linear_map_contracts_at_lambda_min() {
    let (slope, lambda) = linear_slope(0.5);
    assert!((slope + lambda).abs() < 0.02 * lambda, "{slope} vs {}", -lambda);
    let (s2, _) = linear_slope(1.0);
    let ratio = s2 / slope;
    assert!((1.7..=2.3).contains(&ratio), "{ratio}");
}

#[test]
fn manifold_start_reports_converged() {
    let obs = linear_observer(0.5);
    let design = obs.design(0.5).unwrap();
    let x0 = [0.6, 0.6];
    let mut opts = ContractionOptions::new(5.0, 1e-3);
    opts.z0 = Some(obs.encode_state(&x0, 0.5).unwrap());
    let run = contraction_check(&obs, &design, &harmonic_oscillator(), &x0, &opts).unwrap();
    assert!(matches!(run.outcome, ContractionOutcome::Converged { time } if time == 0.0), "{:?}", run.outcome);
}

#[test]
fn perfect_decoder_heatmap_and_single_point() {
    let obs = linear_observer(0.5);
    let design = obs.design(0.5).unwrap();
    let sys = harmonic_oscillator();
    let grid = uniform_grid(&sys.domain, 9).unwrap();
    let hm = error_heatmap(&obs, &design, &sys, &grid, 1e-3).unwrap();
    assert!(hm.max() < 1e-3);

    let one = vec![vec![0.3, -0.4]];
    let hm1 = error_heatmap(&obs, &design, &sys, &one, 1e-3).unwrap();
    assert_eq!(hm1.errors.len(), 1);
    let samples = kkl::sampling::backward_forward(&sys, &design, &one, &kkl::sampling::BackwardForwardOptions::new(1e-3)).unwrap();
    let xhat = obs.decode(&samples.pairs[0].z, 0.5).unwrap();
    let direct = ((xhat[0] - samples.pairs[0].x[0]).powi(2) + (xhat[1] - samples.pairs[0].x[1]).powi(2)).sqrt();
    assert_eq!(hm1.errors[0], direct);
    assert_eq!(hm1.median(), direct);
}

#[test]
fn estimate_tracks_a_noiseless_trajectory() {
    let obs = linear_observer(0.5);
    let design = obs.design(0.5).unwrap();
    let sys = harmonic_oscillator();
    let truth = simulate_system(&sys, &[0.6, 0.6], 20.0, SimOptions::forward(1e-3)).unwrap();
    let out = estimate(&obs, &design, truth.outputs.as_ref().unwrap(), &EstimateOptions::new(1e-3)).unwrap();
    let last = out.estimates.last().unwrap();
    let x = truth.last_state();
    assert!((last[0] - x[0]).abs() < 1e-4 && (last[1] - x[1]).abs() < 1e-4);
}
