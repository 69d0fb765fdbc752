//! Noise-sensitivity criterion `α(ω_c) = ‖J‖₂ (‖G_ε‖∞ + ‖G_z‖H2)` and the
//! sweep that picks the minimizing frequency.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::dynamics::SystemModel;
use crate::error::{KklError, Result};
use crate::export::{fmt_num, write_header};
use crate::learning::Decoder;
use crate::linfilter::FilterDesign;
use crate::sampling::{backward_forward, BackwardForwardOptions, Sampler};
use crate::scalar::Scalar;

/// Matrix norm applied to each decoder Jacobian.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum JacobianNorm {
    #[default]
    Frobenius,
    Spectral,
}

impl JacobianNorm {
    pub fn apply(self, m: &nalgebra::DMatrix<f64>) -> f64 {
        match self {
            JacobianNorm::Frobenius => m.norm(),
            JacobianNorm::Spectral => m.clone().svd(false, false).singular_values.max(),
        }
    }
}

/// `J_j = ‖∂T*/∂z(z_j, ω_c)‖` for every test point.
pub fn empirical_j<T: Scalar, M: Decoder<T> + ?Sized>(
    observer: &M,
    z_points: &[Vec<T>],
    omega_c: f64,
    norm: JacobianNorm,
) -> Result<Vec<f64>> {
    const CHUNK: usize = 512;
    let mut out = Vec::with_capacity(z_points.len());
    for chunk in z_points.chunks(CHUNK) {
        let refs: Vec<&[T]> = chunk.iter().map(Vec::as_slice).collect();
        for jac in observer.decode_jacobians(&refs, T::lit(omega_c))? {
            out.push(norm.apply(&jac.map(|v| v.as_f64())));
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TuningEntry {
    pub omega_c: f64,
    pub hinf_geps: f64,
    pub h2_gz: f64,
    pub j_l2: f64,
    pub alpha: f64,
    pub alpha_over_n: f64,
    pub n: usize,
}

impl TuningEntry {
    pub fn norm_factor(&self) -> f64 {
        self.hinf_geps + self.h2_gz
    }
}

/// Criterion entry for one design from precomputed `J_j` values.
pub fn entry_from_j(design: &FilterDesign, j: &[f64]) -> Result<TuningEntry> {
    if j.is_empty() {
        return Err(KklError::InvalidInput("criterion needs at least one test point".into()));
    }
    let hinf_geps = design.hinf_norm_geps()?;
    let h2_gz = design.h2_norm_gz()?;
    let j_l2 = j.iter().map(|v| v * v).sum::<f64>().sqrt();
    let alpha = j_l2 * (hinf_geps + h2_gz);
    if !alpha.is_finite() {
        return Err(KklError::Numerical(format!("non-finite criterion at omega_c = {}", design.omega_c)));
    }
    let n = j.len();
    Ok(TuningEntry { omega_c: design.omega_c, hinf_geps, h2_gz, j_l2, alpha, alpha_over_n: alpha / n as f64, n })
}

pub fn criterion_alpha<T: Scalar, M: Decoder<T> + ?Sized>(
    observer: &M,
    design: &FilterDesign,
    z_points: &[Vec<T>],
    norm: JacobianNorm,
) -> Result<TuningEntry> {
    let j = empirical_j(observer, z_points, design.omega_c, norm)?;
    entry_from_j(design, &j)
}

/// Test points for the criterion, paired with `z` by backward-forward sampling.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TestGridConfig {
    pub n: usize,
    pub sampler: Sampler,
    pub seed: u64,
    /// Integration step; the system default when `None`.
    pub dt: Option<f64>,
    pub jacobian_norm: JacobianNorm,
}

impl Default for TestGridConfig {
    fn default() -> Self {
        Self { n: 10_000, sampler: Sampler::Grid, seed: 0, dt: None, jacobian_norm: JacobianNorm::Frobenius }
    }
}

/// One computed or failed sweep entry.
#[derive(Clone, Debug, PartialEq)]
pub enum SweepEntry {
    Valid(TuningEntry),
    Invalid { omega_c: f64, reason: String },
}

impl SweepEntry {
    pub fn omega_c(&self) -> f64 {
        match self {
            SweepEntry::Valid(e) => e.omega_c,
            SweepEntry::Invalid { omega_c, .. } => *omega_c,
        }
    }

    pub fn valid(&self) -> Option<&TuningEntry> {
        match self {
            SweepEntry::Valid(e) => Some(e),
            SweepEntry::Invalid { .. } => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TuningReport {
    /// Ordered by `ω_c`.
    pub entries: Vec<SweepEntry>,
    pub argmin_omega_c: Option<f64>,
    pub grid: TestGridConfig,
}

/// Index of the smallest `alpha`; ties go to the smallest `ω_c`.
pub fn argmin(entries: &[TuningEntry]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, e) in entries.iter().enumerate() {
        best = match best {
            None => Some(i),
            Some(b) => {
                let cur = &entries[b];
                if e.alpha < cur.alpha || (e.alpha == cur.alpha && e.omega_c < cur.omega_c) {
                    Some(i)
                } else {
                    Some(b)
                }
            }
        }
    }
    best
}

impl TuningReport {
    pub fn from_entries(mut entries: Vec<SweepEntry>, grid: TestGridConfig) -> Self {
        entries.sort_by(|a, b| a.omega_c().total_cmp(&b.omega_c()));
        let valid: Vec<TuningEntry> = entries.iter().filter_map(|e| e.valid().cloned()).collect();
        let argmin_omega_c = argmin(&valid).map(|i| valid[i].omega_c);
        Self { entries, argmin_omega_c, grid }
    }

    pub fn valid_entries(&self) -> Vec<&TuningEntry> {
        self.entries.iter().filter_map(SweepEntry::valid).collect()
    }

    pub fn argmin_entry(&self) -> Option<&TuningEntry> {
        let w = self.argmin_omega_c?;
        self.valid_entries().into_iter().find(|e| e.omega_c == w)
    }

    /// Writes `omega_c,hinf_Geps,h2_Gz,J_l2,alpha,alpha_over_n,n` for valid entries.
    pub fn write_csv<W: Write>(&self, w: &mut W) -> std::io::Result<()> {
        let cols: Vec<String> =
            ["omega_c", "hinf_Geps", "h2_Gz", "J_l2", "alpha", "alpha_over_n", "n"].iter().map(|s| s.to_string()).collect();
        write_header(w, &cols)?;
        for e in self.valid_entries() {
            writeln!(
                w,
                "{},{},{},{},{},{},{}",
                fmt_num(e.omega_c),
                fmt_num(e.hinf_geps),
                fmt_num(e.h2_gz),
                fmt_num(e.j_l2),
                fmt_num(e.alpha),
                fmt_num(e.alpha_over_n),
                e.n
            )?;
        }
        Ok(())
    }
}

/// Filter states of the criterion's test grid at one frequency.
pub fn test_points<T: Scalar>(system: &SystemModel<T>, design: &FilterDesign, grid: &TestGridConfig) -> Result<Vec<Vec<T>>> {
    let dim = system.dim_x();
    let xs = match grid.sampler {
        Sampler::Grid => crate::sampling::uniform_grid(&system.domain, crate::sampling::grid_side_for(grid.n, dim))?,
        Sampler::Lhs => crate::sampling::lhs(grid.n, &system.domain, grid.seed)?,
    };
    let dt = grid.dt.map(T::lit).unwrap_or_else(|| system.default_dt());
    let samples = backward_forward(system, design, &xs, &BackwardForwardOptions::new(dt))?;
    Ok(samples.pairs.into_iter().map(|p| p.z).collect())
}

/// Evaluates the criterion at every frequency of `omegas`. Failures are
/// logged and excluded from the argmin.
pub fn sweep<T: Scalar, M: Decoder<T> + ?Sized>(
    observer: &M,
    system: &SystemModel<T>,
    d_z: usize,
    omegas: &[f64],
    grid: &TestGridConfig,
    bessel_norm: crate::linfilter::BesselNorm,
) -> TuningReport {
    let entries = omegas
        .iter()
        .map(|&omega| {
            let run = || -> Result<TuningEntry> {
                let design = FilterDesign::bessel(omega, d_z, system.dim_y(), bessel_norm)?;
                let zs = test_points(system, &design, grid)?;
                criterion_alpha(observer, &design, &zs, grid.jacobian_norm)
            };
            match run() {
                Ok(e) => {
                    log::info!("omega_c {omega:.4}: alpha {:.4e} (J {:.4e}, norms {:.4e})", e.alpha, e.j_l2, e.norm_factor());
                    SweepEntry::Valid(e)
                }
                Err(err) => {
                    log::warn!("omega_c {omega}: entry invalid ({err})");
                    SweepEntry::Invalid { omega_c: omega, reason: err.to_string() }
                }
            }
        })
        .collect();
    TuningReport::from_entries(entries, grid.clone())
}
