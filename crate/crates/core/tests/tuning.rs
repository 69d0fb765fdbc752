mod common;

use common::{harmonic_oscillator, oscillator_matrices, pseudo_inverse, sylvester};
use kkl::dynamics::SystemModel;
use kkl::learning::{train_supervised, LearnedObserver, TrainConfig};
use kkl::linfilter::{build_design, BesselNorm};
use kkl::sampling::{generate_dataset, GenerateOptions, Sampler};
use kkl::tuning::{argmin, criterion_alpha, empirical_j, sweep, test_points, JacobianNorm, TestGridConfig, TuningEntry};
use nalgebra::DMatrix;
use proptest::prelude::*;

fn linear_observer(omega: f64) -> LearnedObserver<f64> {
    let (a, c) = oscillator_matrices();
    let d = build_design(omega, 2, 1).unwrap();
    let t = sylvester(&a, &c, &d.d, &d.f);
    LearnedObserver::from_linear_maps(t.clone(), pseudo_inverse(&t), 1).unwrap()
}

fn trained_observer() -> LearnedObserver<f64> {
    let sys = SystemModel::reverse_duffing();
    let opts = GenerateOptions { n: 100, sampler: Sampler::Lhs, seed: 0, dt: 1e-3, z0: None, shared_points: false, blowup_bound: 1e6 };
    let ds = generate_dataset(&sys, &[0.4, 0.8], &opts).unwrap();
    train_supervised(&ds, &TrainConfig { hidden: vec![16, 16], max_epochs: 2, batch_size: 32, ..TrainConfig::default() }).unwrap().0
}

#[test]
fn linear_decoder_gives_constant_j() {
    let obs = linear_observer(0.5);
    let m = obs.decoder.weights[0].columns(0, 3).into_owned();
    let zs: Vec<Vec<f64>> = (0..40).map(|k| vec![k as f64 * 0.1, -0.2, 0.3]).collect();
    let j = empirical_j(&obs, &zs, 0.5, JacobianNorm::Frobenius).unwrap();
    assert!(j.iter().all(|&v| v == m.norm()));
    let design = build_design(0.5, 2, 1).unwrap();
    let e = criterion_alpha(&obs, &design, &zs, JacobianNorm::Frobenius).unwrap();
    let expect = m.norm() * 40f64.sqrt() * (design.hinf_norm_geps().unwrap() + design.h2_norm_gz().unwrap());
    assert!((e.alpha - expect).abs() <= 1e-12 * expect);
    assert_eq!(e.alpha_over_n, e.alpha / 40.0);
}

#[test]
fn jacobian_matches_finite_differences() {
    let obs = trained_observer();
    let zs: Vec<Vec<f64>> = vec![vec![0.1, 0.2, -0.3], vec![-1.0, 0.5, 0.0], vec![0.7, 0.7, 0.7], vec![2.0, -1.0, 0.4], vec![0.0, 0.0, 0.0]];
    let h = 1e-6;
    for z in &zs {
        let j = obs.decoder_jacobian(z, 0.6).unwrap();
        let mut fd = DMatrix::zeros(2, 3);
        for k in 0..3 {
            let (mut a, mut b) = (z.clone(), z.clone());
            a[k] += h;
            b[k] -= h;
            let (fa, fb) = (obs.decode(&a, 0.6).unwrap(), obs.decode(&b, 0.6).unwrap());
            for i in 0..2 {
                fd[(i, k)] = (fa[i] - fb[i]) / (2.0 * h);
            }
        }
        assert!((&j - &fd).norm() / fd.norm() < 1e-4, "{j} vs {fd}");
    }
}

#[test]
fn alpha_factorizes() {
    let obs = trained_observer();
    let sys = SystemModel::reverse_duffing();
    let grid = TestGridConfig { n: 49, ..TestGridConfig::default() };
    let report = sweep(&obs, &sys, 3, &[0.4, 0.6, 0.8], &grid, BesselNorm::Magnitude);
    let valid = report.valid_entries();
    assert_eq!(valid.len(), 3);
    for e in valid {
        assert!((e.alpha - e.j_l2 * (e.hinf_geps + e.h2_gz)).abs() <= 1e-12 * e.alpha);
    }
    let best = report.argmin_entry().unwrap();
    assert!(report.valid_entries().iter().all(|e| e.alpha >= best.alpha));
}

#[test]
fn regenerated_test_points_reproduce_alpha() {
    let obs = trained_observer();
    let sys = SystemModel::reverse_duffing();
    let design = build_design(0.6, 2, 1).unwrap();
    let grid = TestGridConfig { n: 36, ..TestGridConfig::default() };
    let a = criterion_alpha(&obs, &design, &test_points(&sys, &design, &grid).unwrap(), grid.jacobian_norm).unwrap();
    let b = criterion_alpha(&obs, &design, &test_points(&sys, &design, &grid).unwrap(), grid.jacobian_norm).unwrap();
    assert_eq!(a, b);
}

#[test]
fn singleton_sweep_returns_its_frequency() {
    let obs = linear_observer(0.5);
    let sys = harmonic_oscillator();
    let report = sweep(&obs, &sys, 3, &[0.5], &TestGridConfig { n: 16, ..TestGridConfig::default() }, BesselNorm::Magnitude);
    assert_eq!(report.argmin_omega_c, Some(0.5));
    let mut buf = Vec::new();
    report.write_csv(&mut buf).unwrap();
    let text = String::from_utf8(buf).unwrap();
    assert_eq!(text.lines().count(), 2);
    let first: f64 = text.lines().nth(1).unwrap().split(',').next().unwrap().parse().unwrap();
    assert_eq!(first, 0.5);
}

fn entry(omega_c: f64, alpha: f64) -> TuningEntry {
    TuningEntry { omega_c, hinf_geps: 0.0, h2_gz: 0.0, j_l2: 0.0, alpha, alpha_over_n: alpha, n: 1 }
}

proptest! {
    #[test]
    fn argmin_is_minimal_with_smallest_tie(alphas in prop::collection::vec(0u8..5, 1..20)) {
        let entries: Vec<TuningEntry> = alphas.iter().enumerate().map(|(i, &a)| entry(1.0 - i as f64 * 0.01, a as f64)).collect();
        let i = argmin(&entries).unwrap();
        let min = entries.iter().map(|e| e.alpha).fold(f64::INFINITY, f64::min);
        prop_assert_eq!(entries[i].alpha, min);
        for e in &entries {
            if e.alpha == min {
                prop_assert!(entries[i].omega_c <= e.omega_c);
            }
        }
    }
}
