mod common;

use common::{harmonic_oscillator, oscillator_matrices, pseudo_inverse, sylvester};
use kkl::dynamics::{SystemModel, DEFAULT_BLOWUP_BOUND};
use kkl::learning::{
    pde_residual, resume_supervised, train_autoencoder, train_supervised, AutoencoderConfig, Encoder, LearnedObserver, TrainConfig,
};
use kkl::linfilter::{build_design, eigenvalues};
use kkl::sampling::{generate_dataset, lhs, GenerateOptions, Sampler};
use kkl::{AutoencoderModel64, Dataset64, LearnedObserver64};
use nalgebra::DMatrix;

fn small_config(epochs: usize) -> TrainConfig {
    TrainConfig { hidden: vec![12, 12], batch_size: 32, max_epochs: epochs, ..TrainConfig::default() }
}

fn duffing_dataset() -> Dataset64 {
    let sys = SystemModel::reverse_duffing();
    let opts = GenerateOptions { n: 120, sampler: Sampler::Lhs, seed: 2, dt: 1e-3, z0: None, shared_points: false, blowup_bound: DEFAULT_BLOWUP_BOUND };
    generate_dataset(&sys, &[0.5, 1.0], &opts).unwrap()
}

#[test]
fn exact_linear_maps_have_zero_residual() {
    let sys = harmonic_oscillator();
    let (a, c) = oscillator_matrices();
    let design = build_design(0.5, 2, 1).unwrap();
    let t = sylvester(&a, &c, &design.d, &design.f);
    let obs = LearnedObserver::<f64>::from_linear_maps(t.clone(), pseudo_inverse(&t), 1).unwrap();
    for x in lhs(50, &sys.domain, 3).unwrap() {
        let r = pde_residual(&obs, &sys, &x, 0.5).unwrap();
        assert!(r.iter().all(|v| v.abs() < 1e-10), "{r:?}");
    }
}

#[test]
fn residual_vanishes_at_the_equilibrium() {
    let sys = SystemModel::<f64>::reverse_duffing();
    let t = DMatrix::from_fn(3, 2, |i, j| (i + 2 * j) as f64 * 0.3 - 0.5);
    let obs = LearnedObserver::<f64>::from_linear_maps(t.clone(), pseudo_inverse(&t), 1).unwrap();
    assert_eq!(pde_residual(&obs, &sys, &[0.0, 0.0], 0.3).unwrap(), vec![0.0; 3]);
}

#[test]
fn supervised_training_is_seed_deterministic() {
    let ds = duffing_dataset();
    let (a, la) = train_supervised(&ds, &small_config(3)).unwrap();
    let (b, lb) = train_supervised(&ds, &small_config(3)).unwrap();
    assert_eq!(la, lb);
    assert_eq!(a, b);
    let (_, lc) = train_supervised(&ds, &TrainConfig { seed: 1, ..small_config(3) }).unwrap();
    assert_ne!(la.last().unwrap().losses, lc.last().unwrap().losses);
}

#[test]
fn training_log_and_checkpoint_roundtrip() {
    let ds = duffing_dataset();
    let (obs, log) = train_supervised(&ds, &small_config(4)).unwrap();
    assert_eq!(log.columns, vec!["loss_T", "loss_Tstar"]);
    let mut buf = Vec::new();
    log.write_csv(&mut buf).unwrap();
    assert!(String::from_utf8(buf).unwrap().starts_with("epoch,loss_T,loss_Tstar\n"));
    let back = LearnedObserver64::from_json(&obs.to_json().unwrap()).unwrap();
    assert_eq!(back, obs);
    let z = obs.encode(&[0.2, -0.3], 0.5).unwrap();
    assert_eq!(back.decode(&z, 0.5).unwrap(), obs.decode(&z, 0.5).unwrap());
}

#[test]
fn resumed_training_starts_near_the_checkpoint() {
    let ds = duffing_dataset();
    let (obs, first) = train_supervised(&ds, &small_config(15)).unwrap();
    let (_, second) = resume_supervised(obs, &ds, &small_config(3)).unwrap();
    let fresh = first.first().unwrap().losses[0];
    let best = first.epochs.iter().map(|e| e.losses[0]).fold(f64::INFINITY, f64::min);
    let resumed = second.first().unwrap().losses[0];
    assert!(resumed < fresh && resumed < 2.0 * best, "fresh {fresh}, best {best}, resumed {resumed}");
}

fn ae_config(optimize_d: bool) -> AutoencoderConfig {
    AutoencoderConfig { train: small_config(3), optimize_d, pole_lr: Some(1e-2), ..AutoencoderConfig::default() }
}

#[test]
fn frozen_filter_matrix_is_bit_identical() {
    let sys = SystemModel::<f64>::reverse_duffing();
    let xs = lhs(200, &sys.domain, 1).unwrap();
    let init = build_design(0.2, 2, 1).unwrap();
    let (model, _) = train_autoencoder(&xs, &sys, &init, &ae_config(false)).unwrap();
    assert_eq!(model.d_matrix().as_slice().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
               model.initial_poles.matrix().as_slice().iter().map(|v| v.to_bits()).collect::<Vec<_>>());
    assert!((model.d_matrix() - &init.d).amax() < 1e-12);
}

#[test]
fn trained_filter_matrix_stays_hurwitz() {
    let sys = SystemModel::<f64>::reverse_duffing();
    let xs = lhs(200, &sys.domain, 1).unwrap();
    let init = build_design(0.2, 2, 1).unwrap();
    let (model, log) = train_autoencoder(&xs, &sys, &init, &ae_config(true)).unwrap();
    assert_eq!(log.columns, vec!["loss_total", "loss_recon", "loss_pde"]);
    assert_ne!(model.poles, model.initial_poles);
    assert!(eigenvalues(&model.d_matrix()).iter().all(|e| e.re <= -1e-4));
    let back = AutoencoderModel64::from_json(&model.to_json().unwrap()).unwrap();
    assert_eq!(back.poles, model.poles);
    let refs: Vec<&[f64]> = xs.iter().take(5).map(Vec::as_slice).collect();
    let terms = model.loss_terms(&sys, &refs).unwrap();
    for (x, r) in refs.iter().zip(&terms.residuals) {
        let direct = pde_residual(&model, &sys, x, 0.2).unwrap();
        assert!(direct.iter().zip(r).all(|(a, b)| (a - b).abs() <= 1e-12 * a.abs().max(1.0)), "{direct:?} vs {r:?}");
    }
    assert_eq!(model.state_dim(), 2);
}
