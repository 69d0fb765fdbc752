//! Dataset generation by backward-forward simulation.
//!
//! For each requested state `x_i` the plant is integrated backward for the
//! filter convergence time `t_c`, then plant and filter are integrated
//! together forward for `t_c` from an arbitrary filter state. The filter
//! thereby forgets its initial condition exactly when the plant returns to
//! `x_i`, so the pairs `(x_i, z_i)` sit on a grid the user chose.

use std::io::Write;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dynamics::{integrate_steps, step_count, DomainBox, SimOptions, SystemModel, DEFAULT_BLOWUP_BOUND};
use crate::error::{KklError, Result};
use crate::export::{numbered, read_numeric_csv, write_header, write_row};
use crate::linfilter::{build_design, FilterDesign};
use crate::scalar::{norm2, Scalar};

/// Plain Latin hypercube sample of `n` points in `bounds`.
pub fn lhs<T: Scalar>(n: usize, bounds: &DomainBox<T>, seed: u64) -> Result<Vec<Vec<T>>> {
    bounds.validate()?;
    if n == 0 {
        return Err(KklError::InvalidInput("LHS needs at least one point".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dim = bounds.dim();
    let mut points = vec![vec![T::zero(); dim]; n];
    let mut perm: Vec<usize> = (0..n).collect();
    for k in 0..dim {
        perm.shuffle(&mut rng);
        let lo = bounds.lower[k].as_f64();
        let width = bounds.upper[k].as_f64() - lo;
        for (i, p) in points.iter_mut().enumerate() {
            let u: f64 = rng.gen();
            let v = lo + width * (perm[i] as f64 + u) / n as f64;
            p[k] = T::lit(v.min(bounds.upper[k].as_f64()));
        }
    }
    Ok(points)
}

/// Tensor grid with `per_dim` equally spaced nodes per axis, including the
/// bounds. The first coordinate varies slowest.
pub fn uniform_grid<T: Scalar>(bounds: &DomainBox<T>, per_dim: usize) -> Result<Vec<Vec<T>>> {
    tensor_grid(bounds, per_dim, false)
}

/// Centres of the `per_dim^dim` equal cells partitioning the box, in the
/// same order as [`uniform_grid`].
pub fn cell_centers<T: Scalar>(bounds: &DomainBox<T>, per_dim: usize) -> Result<Vec<Vec<T>>> {
    tensor_grid(bounds, per_dim, true)
}

fn tensor_grid<T: Scalar>(bounds: &DomainBox<T>, per_dim: usize, centred: bool) -> Result<Vec<Vec<T>>> {
    bounds.validate()?;
    if per_dim == 0 {
        return Err(KklError::InvalidInput("grid needs at least one node per axis".into()));
    }
    let dim = bounds.dim();
    let total = per_dim.checked_pow(dim as u32).ok_or_else(|| KklError::InvalidInput("grid too large".into()))?;
    let node = |k: usize, j: usize| -> T {
        if centred {
            let lo = bounds.lower[k].as_f64();
            let hi = bounds.upper[k].as_f64();
            T::lit(lo + (hi - lo) * (j as f64 + 0.5) / per_dim as f64)
        } else if per_dim == 1 {
            T::lit(0.5 * (bounds.lower[k].as_f64() + bounds.upper[k].as_f64()))
        } else {
            let lo = bounds.lower[k].as_f64();
            let hi = bounds.upper[k].as_f64();
            T::lit(lo + (hi - lo) * j as f64 / (per_dim - 1) as f64)
        }
    };
    Ok((0..total)
        .map(|mut idx| {
            let mut p = vec![T::zero(); dim];
            for k in (0..dim).rev() {
                p[k] = node(k, idx % per_dim);
                idx /= per_dim;
            }
            p
        })
        .collect())
}

/// Nodes per axis giving about `n` points in `dim` dimensions.
pub fn grid_side_for(n: usize, dim: usize) -> usize {
    ((n as f64).powf(1.0 / dim as f64).round() as usize).max(1)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Sampler {
    #[default]
    Lhs,
    Grid,
}

impl Sampler {
    pub fn name(self) -> &'static str {
        match self {
            Sampler::Lhs => "lhs",
            Sampler::Grid => "grid",
        }
    }

    pub fn sample<T: Scalar>(self, n: usize, bounds: &DomainBox<T>, seed: u64) -> Result<Vec<Vec<T>>> {
        match self {
            Sampler::Lhs => lhs(n, bounds, seed),
            Sampler::Grid => uniform_grid(bounds, grid_side_for(n, bounds.dim())),
        }
    }
}

/// Time after which the filter is considered converged: `10 / λ_min`.
pub fn convergence_time(design: &FilterDesign) -> f64 {
    10.0 / design.lambda_min
}

/// `D` and `F` cast to the working scalar, row-major.
#[derive(Clone, Debug)]
pub struct FilterMatrices<T> {
    pub d_z: usize,
    pub d_y: usize,
    pub d: Vec<T>,
    pub f: Vec<T>,
}

impl<T: Scalar> FilterMatrices<T> {
    pub fn from_design(design: &FilterDesign) -> Self {
        Self::from_matrices(&design.d, &design.f)
    }

    pub fn from_matrices(d: &nalgebra::DMatrix<f64>, f: &nalgebra::DMatrix<f64>) -> Self {
        let rows = |m: &nalgebra::DMatrix<f64>| -> Vec<T> {
            m.row_iter().flat_map(|r| r.iter().map(|&v| T::lit(v)).collect::<Vec<_>>()).collect()
        };
        Self { d_z: d.nrows(), d_y: f.ncols(), d: rows(d), f: rows(f) }
    }

    /// `out = D z + F y`.
    #[inline]
    pub fn rate(&self, z: &[T], y: &[T], out: &mut [T]) {
        for i in 0..self.d_z {
            let mut acc = T::zero();
            let drow = &self.d[i * self.d_z..(i + 1) * self.d_z];
            for (a, b) in drow.iter().zip(z) {
                acc += *a * *b;
            }
            let frow = &self.f[i * self.d_y..(i + 1) * self.d_y];
            for (a, b) in frow.iter().zip(y) {
                acc += *a * *b;
            }
            out[i] = acc;
        }
    }
}

/// Augmented field of the plant and the filter driven by its output.
pub fn coupled_field<'a, T: Scalar>(
    system: &'a SystemModel<T>,
    filter: &'a FilterMatrices<T>,
) -> impl Fn(&[T], &mut [T]) + 'a {
    let dx = system.dim_x();
    move |s: &[T], out: &mut [T]| {
        let (x, z) = s.split_at(dx);
        let (fx, fz) = out.split_at_mut(dx);
        system.f(x, fx);
        let mut ybuf = [T::zero(); 16];
        if filter.d_y <= ybuf.len() {
            let y = &mut ybuf[..filter.d_y];
            system.h(x, y);
            filter.rate(z, y, fz);
        } else {
            let mut y = vec![T::zero(); filter.d_y];
            system.h(x, &mut y);
            filter.rate(z, &y, fz);
        }
    }
}

#[derive(Clone, Debug)]
pub struct BackwardForwardOptions<T> {
    pub dt: T,
    /// Filter state at `−t_c`; zero when `None`.
    pub z0: Option<Vec<T>>,
    pub blowup_bound: T,
    /// Overrides `t_c = 10/λ_min`.
    pub horizon: Option<T>,
}

impl<T: Scalar> BackwardForwardOptions<T> {
    pub fn new(dt: T) -> Self {
        Self { dt, z0: None, blowup_bound: T::lit(DEFAULT_BLOWUP_BOUND), horizon: None }
    }
}

/// `(x, z)` pair labelled with the tuning frequency it was generated under.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainingPair<T> {
    pub x: Vec<T>,
    pub z: Vec<T>,
    pub omega_c: T,
}

/// Output of one backward-forward run.
#[derive(Clone, Debug)]
pub struct BackwardForwardSamples<T> {
    pub pairs: Vec<TrainingPair<T>>,
    /// Per point `‖x_roundtrip − x_requested‖₂`.
    pub roundtrip_errors: Vec<T>,
    pub horizon: T,
    pub steps: usize,
}

impl<T: Scalar> BackwardForwardSamples<T> {
    pub fn max_roundtrip_error(&self) -> T {
        self.roundtrip_errors.iter().fold(T::zero(), |m, &e| m.max(e))
    }
}

pub const ROUNDTRIP_TOLERANCE: f64 = 1e-5;

/// Backward-forward pairs for every point under one filter design.
pub fn backward_forward<T: Scalar>(
    system: &SystemModel<T>,
    design: &FilterDesign,
    x_points: &[Vec<T>],
    opts: &BackwardForwardOptions<T>,
) -> Result<BackwardForwardSamples<T>> {
    let dx = system.dim_x();
    if design.d_y != system.dim_y() {
        return Err(KklError::InvalidInput(format!(
            "design has {} outputs but the system has {}",
            design.d_y,
            system.dim_y()
        )));
    }
    if let Some(bad) = x_points.iter().position(|p| p.len() != dx) {
        return Err(KklError::InvalidInput(format!("point {bad} has wrong dimension")));
    }
    let z0 = match &opts.z0 {
        Some(z) if z.len() != design.d_z => {
            return Err(KklError::InvalidInput(format!("z0 must have length {}", design.d_z)));
        }
        Some(z) => z.clone(),
        None => vec![T::zero(); design.d_z],
    };
    let horizon = opts.horizon.unwrap_or_else(|| T::lit(convergence_time(design)));
    let steps = step_count(horizon, opts.dt);
    let filter = FilterMatrices::<T>::from_design(design);
    let field = coupled_field(system, &filter);
    let omega = T::lit(design.omega_c);
    let sim = SimOptions { dt: opts.dt, direction: crate::dynamics::Direction::Backward, blowup_bound: opts.blowup_bound };

    let results: Vec<Result<(TrainingPair<T>, T)>> = x_points
        .par_iter()
        .enumerate()
        .map(|(i, x)| {
            let start = integrate_steps(|s, o| system.f(s, o), x, steps, sim).map_err(|e| annotate_blowup(e, i, x))?;
            let mut state = start;
            state.extend_from_slice(&z0);
            let end = integrate_steps(&field, &state, steps, SimOptions { direction: crate::dynamics::Direction::Forward, ..sim })
                .map_err(|e| annotate_blowup(e, i, x))?;
            let (xr, z) = end.split_at(dx);
            let err = norm2(&xr.iter().zip(x).map(|(a, b)| *a - *b).collect::<Vec<_>>());
            Ok((TrainingPair { x: xr.to_vec(), z: z.to_vec(), omega_c: omega }, err))
        })
        .collect();

    let mut pairs = Vec::with_capacity(x_points.len());
    let mut errors = Vec::with_capacity(x_points.len());
    for r in results {
        let (p, e) = r?;
        pairs.push(p);
        errors.push(e);
    }
    let out = BackwardForwardSamples { pairs, roundtrip_errors: errors, horizon, steps };
    let worst = out.max_roundtrip_error();
    if worst.as_f64() > ROUNDTRIP_TOLERANCE {
        log::warn!("omega_c = {}: largest backward-forward roundtrip error {worst:e}", design.omega_c);
    } else {
        log::debug!("omega_c = {}: largest backward-forward roundtrip error {worst:e}", design.omega_c);
    }
    Ok(out)
}

fn annotate_blowup<T: Scalar>(e: KklError, index: usize, x: &[T]) -> KklError {
    match e {
        KklError::BlowUp { step, time, stage, norm, .. } => KklError::BlowUp {
            step,
            time,
            stage,
            norm,
            hint: format!(
                " while sampling point {index} {:?}; the dynamics should be saturated smoothly outside the domain of interest",
                x.iter().map(|v| v.as_f64()).collect::<Vec<_>>()
            ),
        },
        other => other,
    }
}

/// Generation record stored next to a dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub seed: u64,
    /// Points per tuning frequency.
    pub n: usize,
    pub dt: f64,
    /// `[omega_c, t_c]` per frequency.
    pub t_c: Vec<[f64; 2]>,
    pub sampler: String,
    pub system: String,
    pub d_x: usize,
    pub d_z: usize,
    pub max_roundtrip_error: f64,
    #[serde(default)]
    pub config_digest: Option<String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset<T> {
    pub pairs: Vec<TrainingPair<T>>,
    pub meta: DatasetMeta,
}

/// Derives the per-frequency sampling seed.
pub fn derive_seed(seed: u64, index: u64) -> u64 {
    // splitmix64 of the combined value
    let mut z = seed.wrapping_add(0x9E37_79B9_7F4A_7C15u64.wrapping_mul(index.wrapping_add(1)));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Clone, Debug)]
pub struct GenerateOptions<T> {
    pub n: usize,
    pub sampler: Sampler,
    pub seed: u64,
    pub dt: T,
    pub z0: Option<Vec<T>>,
    /// Draw one point set for all frequencies instead of one per frequency.
    pub shared_points: bool,
    pub blowup_bound: f64,
}

/// Backward-forward dataset over a grid of tuning frequencies.
pub fn generate_dataset<T: Scalar>(system: &SystemModel<T>, omegas: &[f64], opts: &GenerateOptions<T>) -> Result<Dataset<T>> {
    if omegas.is_empty() {
        return Err(KklError::InvalidInput("need at least one omega_c".into()));
    }
    let mut pairs = Vec::with_capacity(omegas.len() * opts.n);
    let mut t_c = Vec::with_capacity(omegas.len());
    let mut worst = 0.0f64;
    let mut d_z = 0;
    let shared = if opts.shared_points { Some(opts.sampler.sample(opts.n, &system.domain, opts.seed)?) } else { None };
    for (k, &omega) in omegas.iter().enumerate() {
        let design = build_design(omega, system.dim_x(), system.dim_y())?;
        d_z = design.d_z;
        let points = match &shared {
            Some(p) => p.clone(),
            None => opts.sampler.sample(opts.n, &system.domain, derive_seed(opts.seed, k as u64))?,
        };
        let mut bf = BackwardForwardOptions::new(opts.dt);
        bf.z0 = opts.z0.clone();
        bf.blowup_bound = T::lit(opts.blowup_bound);
        let s = backward_forward(system, &design, &points, &bf)?;
        worst = worst.max(s.max_roundtrip_error().as_f64());
        t_c.push([omega, s.horizon.as_f64()]);
        pairs.extend(s.pairs);
    }
    let n = pairs.len() / omegas.len();
    Ok(Dataset {
        pairs,
        meta: DatasetMeta {
            seed: opts.seed,
            n,
            dt: opts.dt.as_f64(),
            t_c,
            sampler: opts.sampler.name().into(),
            system: system.name.clone(),
            d_x: system.dim_x(),
            d_z,
            max_roundtrip_error: worst,
            config_digest: None,
        },
    })
}

impl<T: Scalar> Dataset<T> {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    /// Distinct tuning frequencies in order of first appearance.
    pub fn omegas(&self) -> Vec<T> {
        let mut out: Vec<T> = Vec::new();
        for p in &self.pairs {
            if !out.contains(&p.omega_c) {
                out.push(p.omega_c);
            }
        }
        out
    }

    /// Pairs generated under one frequency.
    pub fn at_omega(&self, omega: T) -> Vec<&TrainingPair<T>> {
        self.pairs.iter().filter(|p| p.omega_c == omega).collect()
    }

    /// Writes `omega_c,x1,...,xdx,z1,...,zdz` CSV.
    pub fn write_csv<W: Write>(&self, w: &mut W) -> std::io::Result<()> {
        let mut cols = vec!["omega_c".to_string()];
        cols.extend(numbered("x", self.meta.d_x));
        cols.extend(numbered("z", self.meta.d_z));
        write_header(w, &cols)?;
        for p in &self.pairs {
            write_row(w, std::iter::once(p.omega_c).chain(p.x.iter().copied()).chain(p.z.iter().copied()))?;
        }
        Ok(())
    }

    pub fn meta_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&self.meta)?)
    }

    pub fn from_csv(csv: &str, meta: DatasetMeta) -> Result<Self> {
        let (header, rows) = read_numeric_csv::<T>(csv)?;
        let expected = 1 + meta.d_x + meta.d_z;
        if header.len() != expected || header[0] != "omega_c" {
            return Err(KklError::InvalidInput(format!(
                "dataset header has {} columns, meta implies {expected}",
                header.len()
            )));
        }
        let pairs = rows
            .into_iter()
            .map(|r| TrainingPair { omega_c: r[0], x: r[1..1 + meta.d_x].to_vec(), z: r[1 + meta.d_x..].to_vec() })
            .collect();
        Ok(Self { pairs, meta })
    }
}
