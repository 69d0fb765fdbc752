use kkl::neural::{silu, silu_prime, Activation, Mlp, Normalizer};
use nalgebra::DMatrix;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn net(sizes: &[usize], seed: u64) -> Mlp<f64> {
    Mlp::new(sizes, Activation::Silu, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
}

fn loss(n: &Mlp<f64>, x: &DMatrix<f64>, y: &DMatrix<f64>) -> f64 {
    let out = n.forward_batch(x).unwrap();
    0.5 * (out - y).iter().map(|d| d * d).sum::<f64>() / x.ncols() as f64
}

#[test]
fn silu_values() {
    assert_eq!(silu(0.0f64), 0.0);
    assert!((silu(30.0f64) - 30.0).abs() < 1e-9);
    assert_eq!(silu_prime(0.0f64), 0.5);
}

#[test]
fn parameter_gradient_matches_central_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let n = net(&[2, 16, 2], 1);
    let x = DMatrix::from_fn(2, 8, |_, _| rng.gen_range(-1.0..1.0));
    let y = DMatrix::from_fn(2, 8, |_, _| rng.gen_range(-1.0..1.0));
    let (_, g) = n.grad_mse(&x, &y).unwrap();
    let flat_g: Vec<f64> = g.slices().iter().flat_map(|s| s.iter().copied()).collect();
    let h = 1e-5;
    for _ in 0..10 {
        let idx = rng.gen_range(0..flat_g.len());
        let bump = |delta: f64| {
            let mut m = n.clone();
            let mut k = idx;
            for s in m.param_slices_mut() {
                if k < s.len() {
                    s[k] += delta;
                    break;
                }
                k -= s.len();
            }
            loss(&m, &x, &y)
        };
        let fd = (bump(h) - bump(-h)) / (2.0 * h);
        let err = (fd - flat_g[idx]).abs() / flat_g[idx].abs().max(1e-3);
        assert!(err < 1e-5, "coordinate {idx}: analytic {} fd {fd}", flat_g[idx]);
    }
}

#[test]
fn input_jacobian_matches_central_differences() {
    let n = net(&[3, 50, 50, 2], 2);
    let x = [0.3, -0.7, 0.1];
    let j = n.input_jacobian(&x).unwrap();
    let h = 1e-5;
    let mut fd = DMatrix::zeros(2, 3);
    for k in 0..3 {
        let mut a = x;
        let mut b = x;
        a[k] += h;
        b[k] -= h;
        let (fa, fb) = (n.forward(&a).unwrap(), n.forward(&b).unwrap());
        for i in 0..2 {
            fd[(i, k)] = (fa[i] - fb[i]) / (2.0 * h);
        }
    }
    assert!((&j - &fd).norm() / fd.norm() < 1e-5);
}

#[test]
fn linear_network_jacobian_is_the_weight_product() {
    let mut n = Mlp::new(&[3, 4, 2], Activation::Identity, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
    n.biases[0].fill(0.25);
    let j = n.input_jacobian(&[1.0, 2.0, 3.0]).unwrap();
    assert_eq!(j, &n.weights[1] * &n.weights[0]);
}

#[test]
fn jvp_is_second_order_accurate() {
    let n = net(&[2, 50, 50, 3], 4);
    let sys = kkl::dynamics::SystemModel::<f64>::reverse_duffing();
    let x = [0.4, -0.55];
    let v = sys.eval_f(&x);
    let (_, jv) = n.jvp(&x, &v).unwrap();
    let dir = |h: f64| {
        let a: Vec<f64> = x.iter().zip(&v).map(|(p, q)| p + h * q).collect();
        let b: Vec<f64> = x.iter().zip(&v).map(|(p, q)| p - h * q).collect();
        let (fa, fb) = (n.forward(&a).unwrap(), n.forward(&b).unwrap());
        fa.iter().zip(&fb).zip(&jv).map(|((p, q), t)| ((p - q) / (2.0 * h) - t).abs()).fold(0.0, f64::max)
    };
    let (e1, e2) = (dir(1e-2), dir(5e-3));
    assert!(e1 < 1e-4 && (e1 / e2) > 3.0 && (e1 / e2) < 5.0, "errors {e1} {e2}");
}

#[test]
fn jacobian_norms_are_finite() {
    let n = net(&[4, 50, 50, 50, 50, 50, 2], 6);
    for k in 0..20 {
        let z = [k as f64 * 0.1, -1.0, 2.0, 0.5];
        let j = n.input_jacobian(&z).unwrap();
        assert!(j.norm().is_finite());
    }
}

proptest! {
    #[test]
    fn forward_is_reproducible(x in prop::collection::vec(-5.0f64..5.0, 3), seed in 0u64..50) {
        let n = net(&[3, 10, 2], seed);
        let a = n.forward(&x).unwrap();
        let b = n.forward(&x).unwrap();
        prop_assert_eq!(a.iter().map(|v| v.to_bits()).collect::<Vec<_>>(), b.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
        let batch = n.forward_batch(&DMatrix::from_column_slice(3, 1, &x)).unwrap();
        prop_assert_eq!(batch.as_slice(), a.as_slice());
    }

    #[test]
    fn normalizer_inverts(rows in prop::collection::vec(prop::collection::vec(-100.0f64..100.0, 2), 2..30)) {
        let refs: Vec<&[f64]> = rows.iter().map(Vec::as_slice).collect();
        let norm = Normalizer::fit(refs).unwrap();
        for r in &rows {
            let back = norm.inverse(&norm.transform(r));
            for (a, b) in back.iter().zip(r) {
                prop_assert!((a - b).abs() <= 1e-9 * b.abs().max(1.0));
            }
        }
    }
}

#[test]
fn constant_column_gets_the_floor() {
    let rows = [vec![2.0, 1.0], vec![2.0, 3.0]];
    let norm = Normalizer::fit(rows.iter().map(Vec::as_slice)).unwrap();
    assert_eq!(norm.mean[0], 2.0);
    assert_eq!(norm.scale[0], 1e-8);
    assert_eq!(norm.scale[1], 1.0);
}
