//! Linear part of the observer: `ż = D z + F y`.
//!
//! `D` is assembled from the poles of a Bessel low-pass filter whose cut-off
//! is set by the single tuning frequency `ω_c`; `F` is all ones. This module
//! also computes the two transfer-function norms the tuning criterion uses:
//! the H2 norm of `(sI − D)⁻¹` and the H∞ norm of `(sI − D)⁻¹ F`.

use std::collections::HashMap;
use std::sync::{Mutex, OnceLock};

use nalgebra::{Complex, DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{KklError, Result};

pub type C64 = Complex<f64>;

/// Frequency normalization applied to the reverse Bessel polynomial roots
/// before scaling by `2π ω_c`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BesselNorm {
    /// Raw roots of θₙ (unit group delay at DC).
    Delay,
    /// Roots scaled so their product has unit magnitude (phase midpoint at 1 rad/s).
    Phase,
    /// Roots scaled so that `|H(j)| = 1/√2` (−3 dB at 1 rad/s).
    #[default]
    Magnitude,
}

/// Coefficients of the reverse Bessel polynomial θₙ, lowest degree first.
pub fn reverse_bessel_coefficients(order: usize) -> Vec<f64> {
    // a_k = (2n − k)! / (2^(n−k) k! (n−k)!), built by the ratio
    // a_{k+1}/a_k = 2 (n − k) / ((k + 1)(2n − k)).
    let n = order;
    let mut a = vec![0.0; n + 1];
    let mut a0 = 1.0;
    for j in (n + 1)..=(2 * n) {
        a0 *= j as f64;
    }
    a0 /= 2f64.powi(n as i32);
    a[0] = a0;
    for k in 0..n {
        a[k + 1] = a[k] * 2.0 * (n - k) as f64 / ((k + 1) as f64 * (2 * n - k) as f64);
    }
    a
}

fn horner(coeffs: &[f64], s: C64) -> (C64, C64) {
    // value and derivative
    let mut p = C64::new(0.0, 0.0);
    let mut dp = C64::new(0.0, 0.0);
    for &c in coeffs.iter().rev() {
        dp = dp * s + p;
        p = p * s + c;
    }
    (p, dp)
}

/// Roots of a real polynomial (coefficients lowest degree first) by the
/// Aberth–Ehrlich iteration followed by a Newton polish.
pub fn polynomial_roots(coeffs: &[f64]) -> Result<Vec<C64>> {
    let n = coeffs.len().saturating_sub(1);
    if n == 0 || coeffs[n] == 0.0 {
        return Err(KklError::InvalidInput("polynomial must have positive degree and non-zero leading term".into()));
    }
    let lead = coeffs[n];
    let monic: Vec<f64> = coeffs.iter().map(|c| c / lead).collect();
    if n == 1 {
        return Ok(vec![C64::new(-monic[0], 0.0)]);
    }
    // Initial guesses on a circle through the geometric mean root radius.
    let radius = monic[0].abs().powf(1.0 / n as f64).max(1e-3);
    let mut z: Vec<C64> = (0..n)
        .map(|k| C64::from_polar(radius, 2.0 * std::f64::consts::PI * (k as f64 + 0.25) / n as f64 + 0.4))
        .collect();
    let max_iter = 500;
    let mut converged = false;
    for _ in 0..max_iter {
        let mut max_step: f64 = 0.0;
        for i in 0..n {
            let (p, dp) = horner(&monic, z[i]);
            if p.norm() == 0.0 {
                continue;
            }
            let ratio = p / dp;
            let mut repulsion = C64::new(0.0, 0.0);
            for j in 0..n {
                if j != i {
                    repulsion += (z[i] - z[j]).inv();
                }
            }
            let step = ratio / (C64::new(1.0, 0.0) - ratio * repulsion);
            z[i] -= step;
            max_step = max_step.max(step.norm() / z[i].norm().max(1.0));
        }
        if max_step < 1e-15 {
            converged = true;
            break;
        }
    }
    for r in z.iter_mut() {
        for _ in 0..5 {
            let (p, dp) = horner(&monic, *r);
            if dp.norm() == 0.0 {
                break;
            }
            *r -= p / dp;
        }
    }
    let scale: f64 = monic.iter().map(|c| c.abs()).fold(0.0, f64::max).max(1.0);
    let worst = z.iter().map(|r| horner(&monic, *r).0.norm() / (scale * r.norm().max(1.0).powi(n as i32))).fold(0.0, f64::max);
    if !converged && worst > 1e-10 {
        return Err(KklError::Numerical(format!("polynomial root finding did not converge (relative residual {worst:e})")));
    }
    Ok(z)
}

/// Enforces exact conjugate symmetry and orders poles: ascending `|Im|`,
/// then ascending real part; each pair listed as `(re, +im), (re, −im)`.
pub fn canonical_pole_order(poles: &[C64]) -> Result<Vec<C64>> {
    let scale = poles.iter().map(|p| p.norm()).fold(0.0, f64::max).max(f64::MIN_POSITIVE);
    let tol = 1e-9 * scale;
    let mut reals = Vec::new();
    let mut upper = Vec::new();
    let mut lower = Vec::new();
    for p in poles {
        if p.im.abs() <= tol {
            reals.push(C64::new(p.re, 0.0));
        } else if p.im > 0.0 {
            upper.push(*p);
        } else {
            lower.push(*p);
        }
    }
    if upper.len() != lower.len() {
        return Err(KklError::Design("pole set is not closed under conjugation".into()));
    }
    let mut pairs = Vec::with_capacity(upper.len());
    let mut remaining = lower;
    for p in upper {
        let (idx, dist) = remaining
            .iter()
            .enumerate()
            .map(|(i, q)| (i, (q.conj() - p).norm()))
            .min_by(|a, b| a.1.total_cmp(&b.1))
            .expect("equal counts");
        if dist > 1e-6 * scale {
            return Err(KklError::Design(format!("pole {p} has no conjugate partner")));
        }
        let q = remaining.swap_remove(idx);
        // average the pair so the conjugate symmetry is exact
        pairs.push(C64::new(0.5 * (p.re + q.re), 0.5 * (p.im - q.im)));
    }
    reals.sort_by(|a, b| a.re.total_cmp(&b.re));
    pairs.sort_by(|a, b| a.im.abs().total_cmp(&b.im.abs()).then(a.re.total_cmp(&b.re)));
    let mut out = reals;
    for p in pairs {
        out.push(p);
        out.push(p.conj());
    }
    Ok(out)
}

fn magnitude_cutoff(coeffs: &[f64]) -> f64 {
    // |θ(0)|² / |θ(jw)|² = 1/2, with |θ(jw)| increasing in w.
    let target = coeffs[0] * std::f64::consts::SQRT_2;
    let mag = |w: f64| horner(coeffs, C64::new(0.0, w)).0.norm();
    let mut hi = 1.0;
    while mag(hi) < target {
        hi *= 2.0;
    }
    let mut lo = 0.0;
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mag(mid) < target {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo <= 1e-16 * hi {
            break;
        }
    }
    0.5 * (lo + hi)
}

fn normalized_bessel_poles(order: usize, norm: BesselNorm) -> Result<Vec<C64>> {
    static CACHE: OnceLock<Mutex<HashMap<(usize, BesselNorm), Vec<C64>>>> = OnceLock::new();
    let cache = CACHE.get_or_init(|| Mutex::new(HashMap::new()));
    if let Some(p) = cache.lock().expect("bessel cache poisoned").get(&(order, norm)) {
        return Ok(p.clone());
    }
    let coeffs = reverse_bessel_coefficients(order);
    let roots = polynomial_roots(&coeffs)?;
    let factor = match norm {
        BesselNorm::Delay => 1.0,
        BesselNorm::Phase => coeffs[0].powf(1.0 / order as f64),
        BesselNorm::Magnitude => magnitude_cutoff(&coeffs),
    };
    let poles = canonical_pole_order(&roots.iter().map(|r| r / factor).collect::<Vec<_>>())?;
    cache.lock().expect("bessel cache poisoned").insert((order, norm), poles.clone());
    Ok(poles)
}

/// Poles of the order-`order` Bessel low-pass with cut-off `2π ω_c`.
pub fn bessel_poles(order: usize, omega_c: f64, norm: BesselNorm) -> Result<Vec<C64>> {
    if order == 0 {
        return Err(KklError::InvalidInput("Bessel filter order must be at least 1".into()));
    }
    check_omega(omega_c)?;
    let scale = 2.0 * std::f64::consts::PI * omega_c;
    Ok(normalized_bessel_poles(order, norm)?.into_iter().map(|p| p * scale).collect())
}

fn check_omega(omega_c: f64) -> Result<()> {
    if !(omega_c > 0.0) || !omega_c.is_finite() {
        return Err(KklError::InvalidInput(format!("omega_c must be positive and finite, got {omega_c}")));
    }
    Ok(())
}

/// Block-diagonal real matrix with the given spectrum: 1×1 blocks for real
/// poles and `[[Re, Im], [−Im, Re]]` for each conjugate pair. Poles are taken
/// in the given order; a pair contributes one block at its first member.
pub fn block_diagonal_from_poles(poles: &[C64]) -> Result<DMatrix<f64>> {
    let n = poles.len();
    let mut d = DMatrix::zeros(n, n);
    let mut i = 0;
    while i < n {
        let p = poles[i];
        if p.im == 0.0 {
            d[(i, i)] = p.re;
            i += 1;
        } else {
            if i + 1 >= n || poles[i + 1] != p.conj() {
                return Err(KklError::Design(format!("complex pole {p} must be followed by its conjugate")));
            }
            let im = p.im.abs();
            d[(i, i)] = p.re;
            d[(i, i + 1)] = im;
            d[(i + 1, i)] = -im;
            d[(i + 1, i + 1)] = p.re;
            i += 2;
        }
    }
    Ok(d)
}

/// `min |Re p|` over the pole set.
pub fn lambda_min(poles: &[C64]) -> f64 {
    poles.iter().map(|p| p.re.abs()).fold(f64::INFINITY, f64::min)
}

/// Rank of the Kalman controllability matrix `[F, DF, …, D^{n−1}F]`.
pub fn controllability_rank(d: &DMatrix<f64>, f: &DMatrix<f64>) -> usize {
    let n = d.nrows();
    // Rescale D to unit spectral size; this leaves the rank unchanged and
    // keeps the Krylov columns comparable in magnitude.
    let s = d.abs().max().max(f64::MIN_POSITIVE);
    let ds = d / s;
    let m = f.ncols();
    let mut k = DMatrix::zeros(n, n * m);
    let mut block = f.clone();
    for j in 0..n {
        k.view_mut((0, j * m), (n, m)).copy_from(&block);
        block = &ds * block;
    }
    let sv = k.singular_values();
    let top = sv.max();
    sv.iter().filter(|&&v| v > 1e-10 * top).count()
}

/// Eigenvalues of a real square matrix.
pub fn eigenvalues(m: &DMatrix<f64>) -> Vec<C64> {
    m.complex_eigenvalues().iter().copied().collect()
}

pub fn is_hurwitz(m: &DMatrix<f64>) -> bool {
    m.is_square() && m.nrows() > 0 && eigenvalues(m).iter().all(|e| e.re < 0.0)
}

/// Observer linear part for one value of `ω_c`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(into = "DesignDoc", try_from = "DesignDoc")]
pub struct FilterDesign {
    pub omega_c: f64,
    pub d_z: usize,
    pub d_y: usize,
    /// Canonically ordered pole multiset (see [`canonical_pole_order`]).
    pub poles: Vec<C64>,
    pub d: DMatrix<f64>,
    pub f: DMatrix<f64>,
    pub lambda_min: f64,
}

impl FilterDesign {
    /// Builds `(D, F)` from an explicit pole set with `F = 1_{d_z×d_y}`.
    pub fn from_poles(omega_c: f64, poles: &[C64], d_y: usize) -> Result<Self> {
        if poles.is_empty() || d_y == 0 {
            return Err(KklError::InvalidInput("need at least one pole and one output".into()));
        }
        if let Some(p) = poles.iter().find(|p| !(p.re < 0.0)) {
            return Err(KklError::Design(format!("pole {p} is not in the open left half-plane")));
        }
        let poles = canonical_pole_order(poles)?;
        let d = block_diagonal_from_poles(&poles)?;
        let d_z = poles.len();
        let f = DMatrix::from_element(d_z, d_y, 1.0);
        let rank = controllability_rank(&d, &f);
        if rank < d_z {
            return Err(KklError::Design(format!(
                "(D, F) is not controllable: Kalman rank {rank} < {d_z} (repeated poles?)"
            )));
        }
        Ok(Self { omega_c, d_z, d_y, lambda_min: lambda_min(&poles), poles, d, f })
    }

    /// Bessel design of explicit order.
    pub fn bessel(omega_c: f64, d_z: usize, d_y: usize, norm: BesselNorm) -> Result<Self> {
        let poles = bessel_poles(d_z, omega_c, norm)?;
        Self::from_poles(omega_c, &poles, d_y)
    }

    /// Bessel design with the filter order `d_z = d_y (d_x + 1)`.
    pub fn build(omega_c: f64, d_x: usize, d_y: usize) -> Result<Self> {
        build_design(omega_c, d_x, d_y)
    }

    pub fn h2_norm_gz(&self) -> Result<f64> {
        h2_norm(&self.d)
    }

    pub fn hinf_norm_geps(&self) -> Result<f64> {
        Ok(hinf_norm(&self.d, &self.f)?.norm)
    }

    /// ‖G_ε‖∞ + ‖G_z‖H2.
    pub fn norm_factor(&self) -> Result<f64> {
        Ok(self.hinf_norm_geps()? + self.h2_norm_gz()?)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }
}

pub fn build_design(omega_c: f64, d_x: usize, d_y: usize) -> Result<FilterDesign> {
    if d_x == 0 || d_y == 0 {
        return Err(KklError::InvalidInput("state and output dimensions must be positive".into()));
    }
    FilterDesign::bessel(omega_c, d_y * (d_x + 1), d_y, BesselNorm::default())
}

/// On-disk form of a [`FilterDesign`].
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub struct DesignDoc {
    pub omega_c: f64,
    pub d_z: usize,
    pub poles: Vec<[f64; 2]>,
    #[serde(rename = "D")]
    pub d: Vec<Vec<f64>>,
    #[serde(rename = "F")]
    pub f: Vec<Vec<f64>>,
    pub lambda_min: f64,
}

fn rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

impl From<FilterDesign> for DesignDoc {
    fn from(d: FilterDesign) -> Self {
        Self {
            omega_c: d.omega_c,
            d_z: d.d_z,
            poles: d.poles.iter().map(|p| [p.re, p.im]).collect(),
            d: rows(&d.d),
            f: rows(&d.f),
            lambda_min: d.lambda_min,
        }
    }
}

impl TryFrom<DesignDoc> for FilterDesign {
    type Error = KklError;

    fn try_from(doc: DesignDoc) -> Result<Self> {
        let d_y = doc.f.first().map_or(0, Vec::len);
        let poles: Vec<C64> = doc.poles.iter().map(|p| C64::new(p[0], p[1])).collect();
        let design = FilterDesign::from_poles(doc.omega_c, &poles, d_y)?;
        if design.d_z != doc.d_z || doc.d.len() != doc.d_z {
            return Err(KklError::InvalidInput("design document dimensions are inconsistent".into()));
        }
        Ok(design)
    }
}

/// Solves `D P + P Dᵀ + Q = 0` for Hurwitz `D`.
pub fn solve_lyapunov(d: &DMatrix<f64>, q: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let n = d.nrows();
    if !d.is_square() || q.shape() != (n, n) {
        return Err(KklError::InvalidInput("Lyapunov operands must be square and of equal size".into()));
    }
    if !is_hurwitz(d) {
        return Err(KklError::InvalidInput("Lyapunov solver needs a Hurwitz matrix".into()));
    }
    // Column-major vec: vec(D P) = (I ⊗ D) vec P, vec(P Dᵀ) = (D ⊗ I) vec P.
    let eye = DMatrix::<f64>::identity(n, n);
    let op = eye.kronecker(d) + d.kronecker(&eye);
    let rhs = DVector::from_iterator(n * n, q.iter().map(|v| -v));
    let sol = op
        .lu()
        .solve(&rhs)
        .ok_or_else(|| KklError::Numerical("Lyapunov operator is singular".into()))?;
    let p = DMatrix::from_column_slice(n, n, sol.as_slice());
    let p = (&p + p.transpose()) * 0.5;
    let residual = (d * &p + &p * d.transpose() + q).norm();
    if residual > 1e-10 * q.norm().max(f64::MIN_POSITIVE) {
        return Err(KklError::Numerical(format!("Lyapunov residual {residual:e} too large")));
    }
    Ok(p)
}

/// H2 norm of `(sI − D)⁻¹`: `sqrt(trace P)` with `D P + P Dᵀ + I = 0`.
pub fn h2_norm(d: &DMatrix<f64>) -> Result<f64> {
    let n = d.nrows();
    let p = solve_lyapunov(d, &DMatrix::identity(n, n))?;
    Ok(p.trace().max(0.0).sqrt())
}

/// Largest singular value of `(jωI − A)⁻¹ B`.
pub fn gain_at(a: &DMatrix<f64>, b: &DMatrix<f64>, omega: f64) -> f64 {
    let n = a.nrows();
    let m = DMatrix::<C64>::from_fn(n, n, |i, j| {
        let diag = if i == j { C64::new(0.0, omega) } else { C64::new(0.0, 0.0) };
        diag - C64::new(a[(i, j)], 0.0)
    });
    let rhs = b.map(|v| C64::new(v, 0.0));
    match m.lu().solve(&rhs) {
        Some(g) if g.ncols() == 1 => g.iter().map(|c| c.norm_sqr()).sum::<f64>().sqrt(),
        Some(g) => g.singular_values().max(),
        None => f64::INFINITY,
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct HinfNorm {
    pub norm: f64,
    pub peak_frequency: f64,
}

/// H∞ norm of `(sI − A)⁻¹ B` for Hurwitz `A`.
///
/// Level-set iteration on the Hamiltonian
/// `H(γ) = [[A, B Bᵀ/γ²], [−I, −Aᵀ]]`, which has imaginary eigenvalues `jω`
/// exactly where the gain crosses `γ`. Each round lifts the lower bound to
/// the largest gain at the midpoints of the crossing intervals; the bound
/// converges quadratically, then a golden-section polish sharpens the peak.
/// An ambiguous eigenvalue test falls back to a dense frequency grid.
pub fn hinf_norm(a: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<HinfNorm> {
    let n = a.nrows();
    if !a.is_square() || b.nrows() != n || b.ncols() == 0 {
        return Err(KklError::InvalidInput("H-infinity operands have inconsistent shapes".into()));
    }
    let eigs = eigenvalues(a);
    if !eigs.iter().all(|e| e.re < 0.0) {
        return Err(KklError::InvalidInput("H-infinity norm needs a Hurwitz matrix".into()));
    }
    let mut best = HinfNorm { norm: gain_at(a, b, 0.0), peak_frequency: 0.0 };
    for e in &eigs {
        let w = e.im.abs();
        let g = gain_at(a, b, w);
        if g > best.norm {
            best = HinfNorm { norm: g, peak_frequency: w };
        }
    }
    let bbt = b * b.transpose();
    let scale = a.norm().max(1.0);
    let mut ambiguous = false;
    for _ in 0..100 {
        let gamma = best.norm * (1.0 + 1e-10);
        let mut h = DMatrix::<f64>::zeros(2 * n, 2 * n);
        h.view_mut((0, 0), (n, n)).copy_from(a);
        h.view_mut((0, n), (n, n)).copy_from(&(&bbt / (gamma * gamma)));
        h.view_mut((n, 0), (n, n)).copy_from(&(-DMatrix::<f64>::identity(n, n)));
        h.view_mut((n, n), (n, n)).copy_from(&(-a.transpose()));
        let heigs = eigenvalues(&h);
        if heigs.iter().any(|e| !e.re.is_finite() || !e.im.is_finite()) {
            ambiguous = true;
            break;
        }
        let mut crossings: Vec<f64> = heigs
            .iter()
            .filter(|e| e.re.abs() <= 1e-8 * scale && e.im >= 0.0)
            .map(|e| e.im)
            .collect();
        if crossings.is_empty() {
            break;
        }
        crossings.sort_by(f64::total_cmp);
        // include the mirror image so intervals straddling ω = 0 are probed
        let mut probes: Vec<f64> = crossings.windows(2).map(|w| 0.5 * (w[0] + w[1])).collect();
        probes.push(0.5 * crossings[0]);
        let mut improved = false;
        for w in probes {
            let g = gain_at(a, b, w);
            if g > best.norm * (1.0 + 1e-12) {
                best = HinfNorm { norm: g, peak_frequency: w };
                improved = true;
            }
        }
        if !improved {
            // Crossings exist but no probe beats the bound: the two crossings
            // straddle a peak within rounding of γ.
            let lo = crossings[0];
            let hi = *crossings.last().expect("non-empty");
            let polished = golden_max(|w| gain_at(a, b, w), lo, hi);
            if polished.1 > best.norm {
                best = HinfNorm { norm: polished.1, peak_frequency: polished.0 };
            }
            if (hi - lo) > 1e-3 * scale && polished.1 < best.norm * (1.0 - 1e-6) {
                ambiguous = true;
            }
            break;
        }
    }
    if ambiguous || !best.norm.is_finite() {
        log::warn!("Hamiltonian test ambiguous, falling back to frequency grid");
        return Ok(hinf_norm_grid(a, b, lambda_min(&eigs)));
    }
    if best.peak_frequency > 0.0 {
        let w0 = best.peak_frequency;
        let (w, g) = golden_max(|w| gain_at(a, b, w), w0 * (1.0 - 1e-3), w0 * (1.0 + 1e-3));
        if g > best.norm {
            best = HinfNorm { norm: g, peak_frequency: w };
        }
    }
    Ok(best)
}

/// Dense log-spaced grid over `[1e−4, 1e4]·ref_freq` plus golden-section
/// refinement around the best grid point.
pub fn hinf_norm_grid(a: &DMatrix<f64>, b: &DMatrix<f64>, ref_freq: f64) -> HinfNorm {
    let count = 10_000;
    let (lo, hi) = ((1e-4 * ref_freq).ln(), (1e4 * ref_freq).ln());
    let mut best = HinfNorm { norm: gain_at(a, b, 0.0), peak_frequency: 0.0 };
    let mut best_idx = None;
    for k in 0..count {
        let w = (lo + (hi - lo) * k as f64 / (count - 1) as f64).exp();
        let g = gain_at(a, b, w);
        if g > best.norm {
            best = HinfNorm { norm: g, peak_frequency: w };
            best_idx = Some(k);
        }
    }
    if let Some(k) = best_idx {
        let step = (hi - lo) / (count - 1) as f64;
        let left = (lo + step * (k as f64 - 1.0)).exp();
        let right = (lo + step * (k as f64 + 1.0)).exp();
        let (w, g) = golden_max(|w| gain_at(a, b, w), left, right);
        if g > best.norm {
            best = HinfNorm { norm: g, peak_frequency: w };
        }
    }
    best
}

fn golden_max(f: impl Fn(f64) -> f64, mut lo: f64, mut hi: f64) -> (f64, f64) {
    let ratio = 0.5 * (5f64.sqrt() - 1.0);
    let mut x1 = hi - ratio * (hi - lo);
    let mut x2 = lo + ratio * (hi - lo);
    let (mut f1, mut f2) = (f(x1), f(x2));
    for _ in 0..200 {
        if (hi - lo) <= 1e-14 * hi.abs().max(1e-300) {
            break;
        }
        if f1 < f2 {
            lo = x1;
            x1 = x2;
            f1 = f2;
            x2 = lo + ratio * (hi - lo);
            f2 = f(x2);
        } else {
            hi = x2;
            x2 = x1;
            f2 = f1;
            x1 = hi - ratio * (hi - lo);
            f1 = f(x1);
        }
    }
    if f1 > f2 {
        (x1, f1)
    } else {
        (x2, f2)
    }
}

/// Log- or linearly-spaced grid of tuning frequencies.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Spacing {
    #[default]
    Log,
    Linear,
}

pub fn omega_grid(min: f64, max: f64, count: usize, spacing: Spacing) -> Result<Vec<f64>> {
    check_omega(min)?;
    check_omega(max)?;
    if count == 0 || (count > 1 && !(min < max)) {
        return Err(KklError::InvalidInput(format!("omega grid needs count ≥ 1 and min < max (got {min}, {max}, {count})")));
    }
    if count == 1 {
        return Ok(vec![min]);
    }
    Ok((0..count)
        .map(|k| {
            let t = k as f64 / (count - 1) as f64;
            match spacing {
                Spacing::Log => (min.ln() + t * (max.ln() - min.ln())).exp(),
                Spacing::Linear => min + t * (max - min),
            }
        })
        .map(|w| w.clamp(min, max))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    const INV_2PI: f64 = 1.0 / (2.0 * std::f64::consts::PI);

    #[test]
    fn bessel_coefficients_order_three() {
        assert_eq!(reverse_bessel_coefficients(3), vec![15.0, 15.0, 6.0, 1.0]);
        assert_eq!(reverse_bessel_coefficients(1), vec![1.0, 1.0]);
    }

    #[test]
    fn first_order_pole() {
        let p = bessel_poles(1, INV_2PI, BesselNorm::Magnitude).unwrap();
        assert_eq!(p.len(), 1);
        assert!((p[0].re + 1.0).abs() < 1e-12 && p[0].im == 0.0);
    }

    #[test]
    fn third_order_unnormalized_poles() {
        let p = bessel_poles(3, INV_2PI, BesselNorm::Delay).unwrap();
        assert!((p[0].re + 2.322185354626086).abs() < 1e-9 && p[0].im == 0.0);
        assert!((p[1].re + 1.838907322686957).abs() < 1e-9);
        assert!((p[1].im - 1.754380959783722).abs() < 1e-9);
        assert_eq!(p[2], p[1].conj());
        let coeffs = reverse_bessel_coefficients(3);
        for r in &p {
            assert!(horner(&coeffs, *r).0.norm() < 1e-10);
        }
    }

    #[test]
    fn magnitude_normalization_hits_minus_three_db() {
        for order in 1..=8 {
            let poles = bessel_poles(order, INV_2PI, BesselNorm::Magnitude).unwrap();
            // |H(j)| = Π|p| / Π|j − p|
            let num: f64 = poles.iter().map(|p| p.norm()).product();
            let den: f64 = poles.iter().map(|p| (C64::new(0.0, 1.0) - p).norm()).product();
            assert!((num / den - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-10, "order {order}");
        }
    }

    #[test]
    fn block_rule() {
        let poles = [C64::new(-1.0, 0.0), C64::new(-2.0, 3.0), C64::new(-2.0, -3.0)];
        let design = FilterDesign::from_poles(1.0, &poles, 1).unwrap();
        let expected = DMatrix::from_row_slice(3, 3, &[-1.0, 0.0, 0.0, 0.0, -2.0, 3.0, 0.0, -3.0, -2.0]);
        assert_eq!(design.d, expected);
        assert_eq!(design.lambda_min, 1.0);
    }

    #[test]
    fn design_dimensions() {
        let d = build_design(0.15, 2, 1).unwrap();
        assert_eq!(d.d_z, 3);
        assert_eq!(d.f, DMatrix::from_element(3, 1, 1.0));
        let d = build_design(0.15, 2, 2).unwrap();
        assert_eq!((d.d_z, d.f.ncols()), (6, 2));
    }

    #[test]
    fn repeated_poles_are_not_controllable() {
        let poles = [C64::new(-1.0, 0.0), C64::new(-1.0, 0.0)];
        assert!(matches!(FilterDesign::from_poles(1.0, &poles, 1), Err(KklError::Design(_))));
        assert!(FilterDesign::from_poles(1.0, &[C64::new(0.5, 0.0)], 1).is_err());
    }

    #[test]
    fn scalar_lyapunov() {
        let p = solve_lyapunov(&DMatrix::from_element(1, 1, -1.0), &DMatrix::from_element(1, 1, 1.0)).unwrap();
        assert!((p[(0, 0)] - 0.5).abs() < 1e-15);
        let p = solve_lyapunov(&DMatrix::from_diagonal(&DVector::from_vec(vec![-2.0, -5.0])), &DMatrix::identity(2, 2)).unwrap();
        assert!((p[(0, 0)] - 0.25).abs() < 1e-15 && (p[(1, 1)] - 0.1).abs() < 1e-15 && p[(0, 1)].abs() < 1e-15);
        assert!(solve_lyapunov(&DMatrix::from_element(1, 1, 1.0), &DMatrix::from_element(1, 1, 1.0)).is_err());
    }

    #[test]
    fn norms_of_simple_systems() {
        let a = DMatrix::from_element(1, 1, -4.0);
        assert!((h2_norm(&a).unwrap() - 1.0 / 8f64.sqrt()).abs() < 1e-14);
        let r = hinf_norm(&a, &DMatrix::from_element(1, 1, 1.0)).unwrap();
        assert!((r.norm - 0.25).abs() < 1e-14 && r.peak_frequency == 0.0);
        let a = DMatrix::from_diagonal(&DVector::from_vec(vec![-1.0, -2.0]));
        assert!((h2_norm(&a).unwrap() - 0.75f64.sqrt()).abs() < 1e-14);
        let r = hinf_norm(&a, &DMatrix::from_element(2, 1, 1.0)).unwrap();
        assert!((r.norm - 1.25f64.sqrt()).abs() < 1e-14);
    }

    #[test]
    fn resonant_peak_found() {
        // lightly damped pair: peak well away from DC
        let a = DMatrix::from_row_slice(2, 2, &[-0.05, 2.0, -2.0, -0.05]);
        let b = DMatrix::from_element(2, 1, 1.0);
        let r = hinf_norm(&a, &b).unwrap();
        let grid = hinf_norm_grid(&a, &b, 0.05);
        assert!(r.norm >= grid.norm * (1.0 - 1e-9), "{} vs {}", r.norm, grid.norm);
        assert!((r.peak_frequency - 2.0).abs() < 0.05);
    }

    #[test]
    fn omega_grid_spacing() {
        let g = omega_grid(0.03, 1.0, 100, Spacing::Log).unwrap();
        assert_eq!(g.len(), 100);
        assert_eq!((g[0], g[99]), (0.03, 1.0));
        assert!(g.windows(2).all(|w| w[1] > w[0]));
        let r0 = g[1] / g[0];
        assert!((g[50] / g[49] - r0).abs() < 1e-12);
        assert_eq!(omega_grid(0.2, 0.2, 1, Spacing::Linear).unwrap(), vec![0.2]);
        assert!(omega_grid(0.0, 1.0, 3, Spacing::Log).is_err());
    }

    #[test]
    fn design_json_roundtrip() {
        let d = build_design(0.2, 2, 1).unwrap();
        let text = d.to_json().unwrap();
        assert!(text.contains("\"D\"") && text.contains("lambda_min"));
        let back = FilterDesign::from_json(&text).unwrap();
        assert_eq!(back, d);
    }
}
