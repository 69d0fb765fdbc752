//! Independent oracles shared by the integration tests.
#![allow(dead_code)]

use nalgebra::{Complex, DMatrix, DVector};

/// Solves `T A = D T + F C` through the Kronecker form
/// `(Aᵀ ⊗ I − I ⊗ D) vec(T) = vec(F C)`.
pub fn sylvester(a: &DMatrix<f64>, c: &DMatrix<f64>, d: &DMatrix<f64>, f: &DMatrix<f64>) -> DMatrix<f64> {
    let nx = a.nrows();
    let nz = d.nrows();
    let eye_z = DMatrix::<f64>::identity(nz, nz);
    let eye_x = DMatrix::<f64>::identity(nx, nx);
    let lhs = a.transpose().kronecker(&eye_z) - eye_x.kronecker(d);
    let rhs = f * c;
    let vec_rhs = DVector::from_column_slice(rhs.as_slice());
    let sol = lhs.lu().solve(&vec_rhs).expect("Sylvester system is nonsingular");
    DMatrix::from_column_slice(nz, nx, sol.as_slice())
}

/// Left pseudo-inverse `(TᵀT)⁻¹Tᵀ`.
pub fn pseudo_inverse(t: &DMatrix<f64>) -> DMatrix<f64> {
    (t.transpose() * t).try_inverse().expect("full column rank") * t.transpose()
}

/// `‖(jωI − D)⁻¹ B‖₂` (largest singular value) evaluated with complex LU.
pub fn freq_gain(d: &DMatrix<f64>, b: &DMatrix<f64>, omega: f64) -> f64 {
    let n = d.nrows();
    let m = DMatrix::<Complex<f64>>::from_fn(n, n, |i, j| {
        let diag = if i == j { Complex::new(0.0, omega) } else { Complex::new(0.0, 0.0) };
        diag - Complex::new(d[(i, j)], 0.0)
    });
    let bc = b.map(|v| Complex::new(v, 0.0));
    let g = m.lu().solve(&bc).expect("jω is not an eigenvalue");
    g.svd(false, false).singular_values.max()
}

/// Brute-force H∞ norm: dense log grid then a fine local scan.
pub fn hinf_brute(d: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    let n = 100_000;
    let (lo, hi) = (1e-4f64, 1e4f64);
    let mut best = (freq_gain(d, b, 0.0), 0.0);
    for k in 0..n {
        let w = lo * (hi / lo).powf(k as f64 / (n - 1) as f64);
        let g = freq_gain(d, b, w);
        if g > best.0 {
            best = (g, w);
        }
    }
    let (mut peak, w0) = best;
    // the grid spacing is 1.8e-4 relative; scan one cell on each side
    for k in -2000..=2000 {
        let w = w0 * (1.0 + 2e-4 * k as f64 / 2000.0);
        peak = peak.max(freq_gain(d, b, w));
    }
    peak
}

/// Brute-force H2 norm of `(sI − D)⁻¹` from the frequency integral,
/// with `ω = tan θ` and composite Simpson on `θ ∈ (−π/2, π/2)`.
pub fn h2_brute(d: &DMatrix<f64>) -> f64 {
    let n = d.nrows();
    let eye = DMatrix::<f64>::identity(n, n);
    let fro2 = |omega: f64| -> f64 {
        let m = DMatrix::<Complex<f64>>::from_fn(n, n, |i, j| {
            let diag = if i == j { Complex::new(0.0, omega) } else { Complex::new(0.0, 0.0) };
            diag - Complex::new(d[(i, j)], 0.0)
        });
        let g = m.lu().solve(&eye.map(|v| Complex::new(v, 0.0))).unwrap();
        g.iter().map(|c| c.norm_sqr()).sum()
    };
    let steps = 40_000;
    let h = std::f64::consts::PI / steps as f64;
    let mut acc = 0.0;
    for k in 0..=steps {
        let theta = -std::f64::consts::FRAC_PI_2 + k as f64 * h;
        let val = if k == 0 || k == steps {
            0.0
        } else {
            let w = theta.tan();
            fro2(w) * (1.0 + w * w)
        };
        let weight = if k == 0 || k == steps { 1.0 } else if k % 2 == 1 { 4.0 } else { 2.0 };
        acc += weight * val;
    }
    (acc * h / 3.0 / (2.0 * std::f64::consts::PI)).sqrt()
}

pub fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs().max(1e-300)
}

/// Harmonic oscillator `ẋ = [[0,1],[−1,0]] x`, `y = x₁` on `[−1, 1]²`.
pub fn harmonic_oscillator() -> kkl::dynamics::SystemModel<f64> {
    let a = DMatrix::from_row_slice(2, 2, &[0.0, 1.0, -1.0, 0.0]);
    let c = DMatrix::from_row_slice(1, 2, &[1.0, 0.0]);
    kkl::dynamics::SystemModel::linear(a, c, kkl::dynamics::DomainBox::cube(2, -1.0, 1.0).unwrap()).unwrap()
}

pub fn oscillator_matrices() -> (DMatrix<f64>, DMatrix<f64>) {
    (DMatrix::from_row_slice(2, 2, &[0.0, 1.0, -1.0, 0.0]), DMatrix::from_row_slice(1, 2, &[1.0, 0.0]))
}
